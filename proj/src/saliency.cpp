// Copyright 2026 The Blink Authors
// SPDX-License-Identifier: Apache-2.0

#include "blink/saliency.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "blink/errors.hpp"

namespace blink {

PatchGrid::PatchGrid(int grid_h, int grid_w, int p) : grid_h_(grid_h), grid_w_(grid_w), p_(p) {
  if (p <= 0 || grid_h <= 0 || grid_w <= 0) throw InvalidArgument("PatchGrid: sizes must be positive");
  if (grid_h % p != 0 || grid_w % p != 0) {
    throw InvalidArgument("PatchGrid: " + std::to_string(grid_h) + "x" + std::to_string(grid_w) +
                          " token grid is not divisible by p=" + std::to_string(p));
  }
  tokens_.resize(static_cast<std::size_t>(p * p));
  for (int r = 0; r < grid_h; ++r)
    for (int c = 0; c < grid_w; ++c) tokens_[static_cast<std::size_t>(patch_of(r * grid_w + c))].push_back(r * grid_w + c);
}

const std::vector<int>& PatchGrid::tokens(int patch) const {
  if (patch < 0 || patch >= count()) throw InvalidArgument("PatchGrid: patch index out of range");
  return tokens_[static_cast<std::size_t>(patch)];
}

int PatchGrid::patch_of(int token) const {
  if (token < 0 || token >= grid_h_ * grid_w_) throw InvalidArgument("PatchGrid: token index out of range");
  const int r = token / grid_w_;
  const int c = token % grid_w_;
  return (r / patch_h()) * p_ + c / patch_w();
}

const char* saliency_mode_name(SaliencyMode m) { return m == SaliencyMode::Softmax ? "softmax" : "raw"; }

SaliencyMode parse_saliency_mode(const std::string& s) {
  if (s == "softmax") return SaliencyMode::Softmax;
  if (s == "raw") return SaliencyMode::RawLogit;
  throw ConfigError("unknown saliency mode '" + s + "' (expected softmax or raw)");
}

std::vector<double> token_saliency(const Mat& query, const Mat& keys, int n_heads, SaliencyMode mode) {
  const auto n = static_cast<std::size_t>(keys.rows());
  if (n == 0) throw InvalidArgument("token_saliency: empty visual segment");
  if (query.rows() != 1 || query.cols() != keys.cols() || n_heads <= 0 || keys.cols() % n_heads != 0) {
    throw InvalidArgument("token_saliency: query/key shapes disagree");
  }
  const int hd = static_cast<int>(keys.cols()) / n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  std::vector<double> out(n, 0.0);
  std::vector<double> logits(n);
  for (int h = 0; h < n_heads; ++h) {
    for (std::size_t j = 0; j < n; ++j) {
      double dot = 0.0;
      for (int c = 0; c < hd; ++c) {
        dot += static_cast<double>(query(0, h * hd + c)) * static_cast<double>(keys(static_cast<Eigen::Index>(j), h * hd + c));
      }
      logits[j] = dot * scale;
    }
    if (mode == SaliencyMode::Softmax) {
      const auto p = softmax(logits);
      for (std::size_t j = 0; j < n; ++j) out[j] += p[j] / n_heads;
    } else {
      for (std::size_t j = 0; j < n; ++j) out[j] += logits[j] / n_heads;
    }
  }
  if (mode == SaliencyMode::RawLogit) {
    const double lo = *std::min_element(out.begin(), out.end());
    double total = 0.0;
    for (double& v : out) total += (v -= lo);
    if (!(total > 0.0)) {
      std::fill(out.begin(), out.end(), 1.0 / static_cast<double>(n));
    } else {
      for (double& v : out) v /= total;
    }
  }
  return out;
}

std::vector<double> token_saliency(const ToyMLLM& model, int layer, const TokenSequence& seq, SaliencyMode mode) {
  const Segment vis = seq.require(Role::Visual);
  if (vis.length == 0) throw InvalidArgument("token_saliency: empty visual segment");
  const int q_index = seq.last_text_index();
  std::vector<int> key_idx(static_cast<std::size_t>(vis.length));
  std::iota(key_idx.begin(), key_idx.end(), vis.begin);
  const int qi[1] = {q_index};
  return token_saliency(model.layer_queries(layer, seq, qi), model.layer_keys(layer, seq, key_idx),
                        model.config().n_heads, mode);
}

PatchSaliency aggregate_patches(std::span<const double> scores, const PatchGrid& grid) {
  if (static_cast<int>(scores.size()) != grid.grid_h() * grid.grid_w()) {
    throw InvalidArgument("aggregate_patches: score count does not match the grid");
  }
  PatchSaliency out;
  out.sums.assign(static_cast<std::size_t>(grid.count()), 0.0);
  for (int i = 0; i < grid.count(); ++i) {
    for (int t : grid.tokens(i)) out.sums[static_cast<std::size_t>(i)] += scores[static_cast<std::size_t>(t)];
  }
  out.argmax = static_cast<int>(std::max_element(out.sums.begin(), out.sums.end()) - out.sums.begin());
  return out;
}

double saliency_ratio(std::span<const double> patch_sums) {
  if (patch_sums.empty()) throw DegenerateInput("saliency_ratio: no patches");
  double total = 0.0;
  double best = patch_sums[0];
  for (double v : patch_sums) {
    if (v < 0.0) throw InvalidArgument("saliency_ratio: patch sums must be non-negative");
    total += v;
    best = std::max(best, v);
  }
  if (!(total > 0.0)) throw DegenerateInput("saliency_ratio: total saliency is zero");
  return std::clamp(best / total, 1.0 / static_cast<double>(patch_sums.size()), 1.0);
}

const char* action_name(ActionKind k) {
  switch (k) {
    case ActionKind::Keep: return "keep";
    case ActionKind::Expand: return "expand";
    case ActionKind::Drop: return "drop";
  }
  return "?";
}

SaliencyReport scan_layer(const ToyMLLM& model, int layer, const TokenSequence& seq, const PatchGrid& grid,
                          SaliencyMode mode) {
  SaliencyReport r;
  r.layer = layer;
  r.token_scores = token_saliency(model, layer, seq, mode);
  const PatchSaliency ps = aggregate_patches(r.token_scores, grid);
  r.patch_sums = ps.sums;
  r.argmax_patch = ps.argmax;
  r.rho = saliency_ratio(ps.sums);
  if (const auto sr = seq.find(Role::SuperRes)) {
    const int q = seq.last_text_index();
    std::vector<int> all(static_cast<std::size_t>(q + 1));
    std::iota(all.begin(), all.end(), 0);
    const int qi[1] = {q};
    const auto row = token_saliency(model.layer_queries(layer, seq, qi), model.layer_keys(layer, seq, all),
                                    model.config().n_heads, SaliencyMode::Softmax);
    for (int j = sr->begin; j < sr->end(); ++j) r.sr_mass += row[static_cast<std::size_t>(j)];
  }
  return r;
}

std::vector<LayerTraceRow> layer_trace(const ToyMLLM& model, const SceneSample& sample, int p, SaliencyMode mode) {
  const int g = model.config().grid_size();
  const PatchGrid grid(g, g, p);
  const int gt = sample.gt_patch_for(p, g, model.config().image_size);
  const PrefillResult pre = model.forward_prefill(model.build_prompt(sample.image, sample.query));
  std::vector<LayerTraceRow> rows;
  for (int l = 0; l < model.config().n_layers; ++l) {
    const SaliencyReport r = scan_layer(model, l, pre.layer_inputs[static_cast<std::size_t>(l)], grid, mode);
    rows.push_back(LayerTraceRow{l, r.rho, r.argmax_patch, r.argmax_patch == gt, r.sr_mass});
  }
  return rows;
}

void write_layer_trace_csv(const std::filesystem::path& path, std::span<const LayerTraceRow> rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigError("cannot write layer trace to " + path.string());
  out.precision(12);
  out << "layer,rho,argmax_patch,is_correct,sr_mass\n";
  for (const auto& r : rows) {
    out << r.layer << ',' << r.rho << ',' << r.argmax_patch << ',' << (r.is_correct ? 1 : 0) << ',' << r.sr_mass << '\n';
  }
}

}  // namespace blink
