// Copyright 2026 The Blink Authors
// SPDX-License-Identifier: Apache-2.0
//
// Optimizers and learning-rate schedules shared by the backbone and
// amplifier trainers.

#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <utility>
#include <vector>

#include "blink/errors.hpp"

namespace blink {

// Number of warmup updates: ceil(ratio * total). The small slack keeps e.g.
// 0.03 * 100 from rounding up to 4.
inline int warmup_steps(int total_steps, double warmup_ratio) {
  if (total_steps <= 0) return 0;
  const int w = static_cast<int>(std::ceil(warmup_ratio * total_steps - 1e-9));
  return std::clamp(w, 0, total_steps);
}

// Learning rate for update `step` (1-based) of `total_steps`: linear warmup
// reaching lr_max at the last warmup update, then cosine decay that reaches
// zero at the final update.
inline double cosine_lr(int step, int total_steps, double warmup_ratio, double lr_max) {
  if (step < 1 || step > total_steps) throw InvalidArgument("cosine_lr: step out of range");
  const int w = warmup_steps(total_steps, warmup_ratio);
  if (step <= w) return lr_max * step / w;
  if (total_steps == w) return lr_max;
  const double progress = static_cast<double>(step - w) / (total_steps - w);
  return lr_max * 0.5 * (1.0 + std::cos(M_PI * progress));
}

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// AdamW with decoupled weight decay. Parameters are registered as spans in a
// fixed order; the i-th span always maps to the i-th moment buffer.
template <typename T>
class AdamW {
 public:
  explicit AdamW(AdamWOptions options = {}) : opt_(options) {}

  void step(const std::vector<std::pair<std::span<T>, std::span<const T>>>& params, double lr) {
    if (m_.empty()) {
      for (const auto& [p, g] : params) {
        m_.emplace_back(p.size(), 0.0);
        v_.emplace_back(p.size(), 0.0);
      }
    }
    if (m_.size() != params.size()) throw StateError("AdamW: parameter list changed between steps");
    ++t_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, t_);
    const double bc2 = 1.0 - std::pow(opt_.beta2, t_);
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto [p, g] = params[i];
      if (p.size() != g.size() || p.size() != m_[i].size()) throw StateError("AdamW: parameter size changed");
      for (std::size_t j = 0; j < p.size(); ++j) {
        const double gj = g[j];
        m_[i][j] = opt_.beta1 * m_[i][j] + (1.0 - opt_.beta1) * gj;
        v_[i][j] = opt_.beta2 * v_[i][j] + (1.0 - opt_.beta2) * gj * gj;
        const double mh = m_[i][j] / bc1;
        const double vh = v_[i][j] / bc2;
        double pj = p[j];
        pj -= lr * opt_.weight_decay * pj;
        pj -= lr * mh / (std::sqrt(vh) + opt_.eps);
        p[j] = static_cast<T>(pj);
      }
    }
  }

  long steps() const { return t_; }

 private:
  AdamWOptions opt_;
  long t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

template <typename T>
class MomentumSgd {
 public:
  explicit MomentumSgd(double momentum = 0.9) : momentum_(momentum) {}

  void step(const std::vector<std::pair<std::span<T>, std::span<const T>>>& params, double lr) {
    if (vel_.empty()) {
      for (const auto& [p, g] : params) vel_.emplace_back(p.size(), 0.0);
    }
    if (vel_.size() != params.size()) throw StateError("MomentumSgd: parameter list changed between steps");
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto [p, g] = params[i];
      for (std::size_t j = 0; j < p.size(); ++j) {
        vel_[i][j] = momentum_ * vel_[i][j] + g[j];
        p[j] = static_cast<T>(p[j] - lr * vel_[i][j]);
      }
    }
  }

 private:
  double momentum_;
  std::vector<std::vector<double>> vel_;
};

}  // namespace blink
