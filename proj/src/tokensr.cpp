// Copyright 2026 The Blink Authors
// SPDX-License-Identifier: Apache-2.0

#include "blink/tokensr.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>

#include "blink/errors.hpp"
#include "blink/optim.hpp"

namespace blink {

// ---------------------------------------------------------------------------
// Weights

template <typename T>
TokenSRLayer<T> TokenSRLayer<T>::zeros(int d) {
  if (d < 4 || d % 4 != 0) throw InvalidArgument("TokenSR: hidden dim must be a positive multiple of 4");
  TokenSRLayer<T> w;
  w.conv1 = ConvKernel<T>(d / 2, d, 5);
  w.conv2 = ConvKernel<T>(d / 4, d / 2, 3);
  w.conv3 = ConvKernel<T>(d, d / 4, 1);
  return w;
}

template <typename T>
TokenSRLayer<T> TokenSRLayer<T>::random(int d, Rng& rng) {
  TokenSRLayer<T> w = zeros(d);
  // torch.nn.Conv2d's default: weights and biases uniform in +-1/sqrt(fan_in).
  for (auto* k : {&w.conv1, &w.conv2, &w.conv3}) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(k->in_channels * k->size * k->size));
    for (auto& v : k->weight) v = static_cast<T>(rng.uniform(-bound, bound));
    for (auto& v : k->bias) v = static_cast<T>(rng.uniform(-bound, bound));
  }
  return w;
}

template <typename T>
std::size_t TokenSRLayer<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto* k : {&conv1, &conv2, &conv3}) n += k->weight.size() + k->bias.size();
  return n;
}

template <typename T>
std::vector<std::span<T>> TokenSRLayer<T>::parameter_spans() {
  std::vector<std::span<T>> out;
  for (auto* k : {&conv1, &conv2, &conv3}) {
    out.emplace_back(k->weight);
    out.emplace_back(k->bias);
  }
  return out;
}

template <typename T>
std::vector<double> TokenSRLayer<T>::flatten() const {
  std::vector<double> theta;
  theta.reserve(parameter_count());
  for (const auto* k : {&conv1, &conv2, &conv3}) {
    theta.insert(theta.end(), k->weight.begin(), k->weight.end());
    theta.insert(theta.end(), k->bias.begin(), k->bias.end());
  }
  return theta;
}

template <typename T>
void TokenSRLayer<T>::unflatten(std::span<const double> theta) {
  if (theta.size() != parameter_count()) throw InvalidArgument("TokenSRLayer::unflatten: size mismatch");
  std::size_t i = 0;
  for (auto span : parameter_spans()) {
    for (auto& v : span) v = static_cast<T>(theta[i++]);
  }
}

// ---------------------------------------------------------------------------
// Forward / backward

namespace {

template <typename T>
Tensor3<T> relu(const Tensor3<T>& x) {
  Tensor3<T> y = x;
  for (auto& v : y.data()) v = std::max(v, T(0));
  return y;
}

template <typename T>
Tensor3<T> relu_backward(const Tensor3<T>& pre, Tensor3<T> grad) {
  for (std::size_t i = 0; i < grad.size(); ++i) {
    if (!(pre.data()[i] > T(0))) grad.data()[i] = T(0);
  }
  return grad;
}

}  // namespace

template <typename T>
Tensor3<T> amplify(const Tensor3<T>& x, const TokenSRLayer<T>& w, AmplifyCache<T>* cache) {
  if (x.channels() != w.dim()) {
    throw InvalidArgument("amplify: input has " + std::to_string(x.channels()) + " channels, amplifier expects " +
                          std::to_string(w.dim()));
  }
  Tensor3<T> pre1 = conv2d(x, w.conv1);
  Tensor3<T> act1 = relu(pre1);
  Tensor3<T> pre2 = conv2d(act1, w.conv2);
  Tensor3<T> act2 = relu(pre2);
  Tensor3<T> out = conv2d(act2, w.conv3);
  if (cache) {
    cache->input = x;
    cache->pre1 = std::move(pre1);
    cache->act1 = std::move(act1);
    cache->pre2 = std::move(pre2);
    cache->act2 = std::move(act2);
  }
  return out;
}

template <typename T>
Tensor3<T> amplify_backward(const AmplifyCache<T>& c, const TokenSRLayer<T>& w, const Tensor3<T>& grad_out,
                            TokenSRLayer<T>& grads) {
  Tensor3<T> g_act2 = conv2d_backward(c.act2, w.conv3, grad_out, grads.conv3);
  Tensor3<T> g_pre2 = relu_backward(c.pre2, std::move(g_act2));
  Tensor3<T> g_act1 = conv2d_backward(c.act1, w.conv2, g_pre2, grads.conv2);
  Tensor3<T> g_pre1 = relu_backward(c.pre1, std::move(g_act1));
  return conv2d_backward(c.input, w.conv1, g_pre1, grads.conv1);
}

template <typename T>
double tokensr_loss(const Tensor3<T>& student, const Tensor3<T>& teacher, const LossOptions& options,
                    Tensor3<T>* grad_student) {
  if (!student.same_shape(teacher)) throw InvalidArgument("tokensr_loss: student and teacher shapes differ");
  if (!(options.temperature > 0.0)) throw InvalidArgument("tokensr_loss: temperature must be positive");
  const int h = student.height();
  const int w = student.width();
  const int d = student.channels();
  const double n_tokens = static_cast<double>(h) * w;
  if (grad_student) *grad_student = Tensor3<T>(h, w, d);
  std::vector<double> zs(static_cast<std::size_t>(d)), zt(static_cast<std::size_t>(d)), g(static_cast<std::size_t>(d));
  double total = 0.0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int k = 0; k < d; ++k) {
        zs[static_cast<std::size_t>(k)] = student(y, x, k);
        zt[static_cast<std::size_t>(k)] = teacher(y, x, k);
      }
      const auto ps = softmax(zs, options.temperature);
      const auto pt = softmax(zt, options.temperature);
      const bool forward_kl = options.direction == KlDirection::TeacherStudent;
      total += forward_kl ? kl_divergence(pt, ps) : kl_divergence(ps, pt);
      if (!grad_student) continue;
      // dL/dps, respecting the floor applied inside kl_divergence.
      for (int k = 0; k < d; ++k) {
        const auto kk = static_cast<std::size_t>(k);
        if (forward_kl) {
          g[kk] = ps[kk] >= kKlEpsilon ? -pt[kk] / ps[kk] : 0.0;
        } else {
          g[kk] = ps[kk] > 0.0 ? std::log(ps[kk]) - std::log(std::max(pt[kk], kKlEpsilon)) + 1.0 : 0.0;
        }
      }
      double dot = 0.0;
      for (int k = 0; k < d; ++k) dot += ps[static_cast<std::size_t>(k)] * g[static_cast<std::size_t>(k)];
      for (int k = 0; k < d; ++k) {
        const auto kk = static_cast<std::size_t>(k);
        (*grad_student)(y, x, k) = static_cast<T>(ps[kk] * (g[kk] - dot) / options.temperature / n_tokens);
      }
    }
  }
  return total / n_tokens;
}

// ---------------------------------------------------------------------------
// Bank

TokenSRBank TokenSRBank::random(int d_model, std::span<const int> layers, std::uint64_t seed,
                                std::string backbone_digest) {
  TokenSRBank bank(d_model, std::move(backbone_digest));
  for (int l : layers) {
    Rng rng(seed * 1000003ULL + static_cast<std::uint64_t>(l));
    bank.set(l, TokenSRLayer<Real>::random(d_model, rng));
  }
  return bank;
}

std::vector<int> TokenSRBank::layers() const {
  std::vector<int> out;
  for (const auto& [l, w] : layers_) out.push_back(l);
  return out;
}

TokenSRLayer<Real>& TokenSRBank::at(int layer) {
  auto it = layers_.find(layer);
  if (it == layers_.end()) throw ConfigError("no TokenSR weights attached to layer " + std::to_string(layer));
  return it->second;
}

const TokenSRLayer<Real>& TokenSRBank::at(int layer) const {
  auto it = layers_.find(layer);
  if (it == layers_.end()) throw ConfigError("no TokenSR weights attached to layer " + std::to_string(layer));
  return it->second;
}

Tensor3<Real> TokenSRBank::apply(int layer, const Tensor3<Real>& grid) const {
  const TokenSRLayer<Real>& w = at(layer);
  if (identity_) return grid;
  return amplify(grid, w);
}

TensorArchive TokenSRBank::to_archive() const {
  TensorArchive a;
  for (const auto& [l, w] : layers_) {
    const std::string p = "tokensr.L" + std::to_string(l) + ".conv";
    int k = 1;
    for (const auto* c : {&w.conv1, &w.conv2, &w.conv3}) {
      const std::string name = p + std::to_string(k++);
      a.put(name + ".weight", {c->out_channels, c->in_channels, c->size, c->size}, std::span<const Real>(c->weight));
      a.put(name + ".bias", {c->out_channels}, std::span<const Real>(c->bias));
    }
  }
  a.meta() = {{"kind", "tokensr"}, {"d_model", d_}, {"layers", layers()}, {"backbone_digest", backbone_digest_}};
  return a;
}

TokenSRBank TokenSRBank::from_archive(const TensorArchive& a) {
  const auto& meta = a.meta();
  if (!meta.is_object() || meta.value("kind", "") != "tokensr") throw ConfigError("checkpoint is not a TokenSR bank");
  TokenSRBank bank(meta.at("d_model").get<int>(), meta.value("backbone_digest", ""));
  for (int l : meta.at("layers").get<std::vector<int>>()) {
    TokenSRLayer<Real> w = TokenSRLayer<Real>::zeros(bank.d_);
    const std::string p = "tokensr.L" + std::to_string(l) + ".conv";
    int k = 1;
    for (auto* c : {&w.conv1, &w.conv2, &w.conv3}) {
      const std::string name = p + std::to_string(k++);
      const std::vector<std::int64_t> wshape = {c->out_channels, c->in_channels, c->size, c->size};
      const auto wv = a.get_f64(name + ".weight", wshape);
      const auto bv = a.get_f64(name + ".bias", {c->out_channels});
      c->weight.assign(wv.begin(), wv.end());
      c->bias.assign(bv.begin(), bv.end());
    }
    bank.set(l, std::move(w));
  }
  return bank;
}

// ---------------------------------------------------------------------------
// Training

void TokenSRRecipe::validate() const {
  if (!(lr > 0.0)) throw ConfigError("TokenSR recipe: learning rate must be positive");
  if (warmup_ratio < 0.0 || warmup_ratio >= 1.0) throw ConfigError("TokenSR recipe: warmup ratio must be in [0, 1)");
  if (batch_size <= 0 || epochs <= 0) throw ConfigError("TokenSR recipe: batch size and epochs must be positive");
}

Tensor3<Real> rows_to_grid(const Mat& rows, int h, int w) {
  if (rows.rows() != static_cast<Eigen::Index>(h) * w) throw InvalidArgument("rows_to_grid: row count mismatch");
  Tensor3<Real> g(h, w, static_cast<int>(rows.cols()));
  std::copy(rows.data(), rows.data() + rows.size(), g.data().begin());
  return g;
}

Mat grid_to_rows(const Tensor3<Real>& grid) {
  Mat rows(static_cast<Eigen::Index>(grid.height()) * grid.width(), grid.channels());
  std::copy(grid.data().begin(), grid.data().end(), rows.data());
  return rows;
}

namespace {

Tensor3<Real> quadrant_upsampled(const Mat& visual, int grid, int quadrant) {
  const int half = grid / 2;
  const int r0 = (quadrant / 2) * half;
  const int c0 = (quadrant % 2) * half;
  Tensor3<Real> patch(half, half, static_cast<int>(visual.cols()));
  for (int r = 0; r < half; ++r)
    for (int c = 0; c < half; ++c)
      for (int k = 0; k < patch.channels(); ++k) patch(r, c, k) = visual((r0 + r) * grid + c0 + c, k);
  return bilinear_resize(patch, grid, grid);
}

}  // namespace

Tensor3<Real> student_input(const ToyMLLM& model, const Tensor3<float>& full, int quadrant, int layer) {
  const int g = model.config().grid_size();
  return quadrant_upsampled(model.visual_states(full, layer), g, quadrant);
}

Tensor3<Real> teacher_states(const ToyMLLM& model, const Tensor3<float>& full, int quadrant, int layer) {
  const int g = model.config().grid_size();
  const auto crops = make_crops(full, g);
  return rows_to_grid(model.visual_states(crops.at(static_cast<std::size_t>(quadrant)).crop, layer), g, g);
}

TokenSRTrainReport train_tokensr(const ToyMLLM& model, std::span<const CropPair> pairs, std::span<const int> layers,
                                 const TokenSRRecipe& recipe, TokenSRBank& bank) {
  recipe.validate();
  if (pairs.empty()) throw ConfigError("train_tokensr: no training pairs");
  for (int l : layers) {
    if (!bank.has(l)) throw ConfigError("train_tokensr: no TokenSR weights attached to layer " + std::to_string(l));
  }
  if (bank.dim() != model.config().d_model) throw ConfigError("train_tokensr: TokenSR width differs from backbone");
  TokenSRTrainReport report;
  report.backbone_digest_before = model.weights().digest();

  // Both student inputs and teachers are fixed functions of the frozen
  // backbone, so compute them once.
  const int g = model.config().grid_size();
  std::map<int, std::vector<Tensor3<Real>>> inputs, teachers;
  for (const auto& pair : pairs) {
    if (pair.full == nullptr || pair.quadrant < 0 || pair.quadrant > 3) throw InvalidArgument("train_tokensr: bad crop pair");
    const auto crops = make_crops(*pair.full, g);
    const auto& crop = crops[static_cast<std::size_t>(pair.quadrant)].crop;
    for (int l : layers) {
      inputs[l].push_back(quadrant_upsampled(model.visual_states(*pair.full, l), g, pair.quadrant));
      teachers[l].push_back(rows_to_grid(model.visual_states(crop, l), g, g));
    }
  }

  auto dataset_loss = [&](int l) {
    double total = 0.0;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      total += tokensr_loss(amplify(inputs[l][i], bank.at(l)), teachers[l][i], recipe.loss);
    }
    return total / static_cast<double>(pairs.size());
  };
  for (int l : layers) report.initial_loss[l] = dataset_loss(l);

  const int n = static_cast<int>(pairs.size());
  const int steps_per_epoch = (n + recipe.batch_size - 1) / recipe.batch_size;
  const int total_steps = steps_per_epoch * recipe.epochs;
  std::map<int, AdamW<Real>> adam;
  std::map<int, MomentumSgd<Real>> sgd;
  for (int l : layers) {
    adam.emplace(l, AdamW<Real>(AdamWOptions{0.9, 0.999, 1e-8, recipe.weight_decay}));
    sgd.emplace(l, MomentumSgd<Real>(0.9));
  }
  Rng rng(recipe.seed);
  std::vector<int> order(static_cast<std::size_t>(n));
  int step = 0;
  for (int epoch = 0; epoch < recipe.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    for (int i = n - 1; i > 0; --i) std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(rng.uniform_int(i + 1))]);
    for (int b = 0; b < steps_per_epoch; ++b) {
      ++step;
      const double lr = cosine_lr(step, total_steps, recipe.warmup_ratio, recipe.lr);
      const int begin = b * recipe.batch_size;
      const int end = std::min(n, begin + recipe.batch_size);
      double step_loss = 0.0;
      for (int l : layers) {
        TokenSRLayer<Real>& w = bank.at(l);
        TokenSRLayer<Real> grads = TokenSRLayer<Real>::zeros(bank.dim());
        for (int i = begin; i < end; ++i) {
          const auto idx = static_cast<std::size_t>(order[static_cast<std::size_t>(i)]);
          AmplifyCache<Real> cache;
          const Tensor3<Real> out = amplify(inputs[l][idx], w, &cache);
          Tensor3<Real> g_out;
          step_loss += tokensr_loss(out, teachers[l][idx], recipe.loss, &g_out);
          amplify_backward(cache, w, g_out, grads);
        }
        const Real inv = static_cast<Real>(1.0 / (end - begin));
        std::vector<std::pair<std::span<Real>, std::span<const Real>>> params;
        auto ps = w.parameter_spans();
        auto gs = grads.parameter_spans();
        for (std::size_t k = 0; k < ps.size(); ++k) {
          for (auto& v : gs[k]) v *= inv;
          params.emplace_back(ps[k], std::span<const Real>(gs[k].data(), gs[k].size()));
        }
        if (recipe.optimizer == OptimizerKind::AdamW) {
          adam.at(l).step(params, lr);
        } else {
          sgd.at(l).step(params, lr);
        }
      }
      report.curve.push_back(LossRow{step, lr, step_loss / ((end - begin) * static_cast<double>(layers.size()))});
    }
  }

  double init_sum = 0.0, final_sum = 0.0;
  for (int l : layers) {
    report.final_loss[l] = dataset_loss(l);
    init_sum += report.initial_loss[l];
    final_sum += report.final_loss[l];
  }
  report.initial_mean = init_sum / static_cast<double>(layers.size());
  report.final_mean = final_sum / static_cast<double>(layers.size());
  report.backbone_digest_after = model.weights().digest();
  return report;
}

GradientCheckResult gradient_check(const TokenSRLayer<double>& weights, std::span<const Tensor3<double>> inputs,
                                   std::span<const Tensor3<double>> teachers, const LossOptions& options, double step,
                                   double floor) {
  if (inputs.size() != teachers.size() || inputs.empty()) throw InvalidArgument("gradient_check: need matching batches");
  const double inv = 1.0 / static_cast<double>(inputs.size());
  TokenSRLayer<double> grads = TokenSRLayer<double>::zeros(weights.dim());
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    AmplifyCache<double> cache;
    const auto out = amplify(inputs[i], weights, &cache);
    Tensor3<double> g;
    tokensr_loss(out, teachers[i], options, &g);
    for (auto& v : g.data()) v *= inv;
    amplify_backward(cache, weights, g, grads);
  }
  // Loss plus the on/off pattern of every ReLU, so probes that cross a kink
  // can be told apart from genuine gradient errors.
  TokenSRLayer<double> probe = weights;
  std::vector<std::uint8_t> pattern;
  auto f = [&](std::span<const double> theta) {
    probe.unflatten(theta);
    pattern.clear();
    double total = 0.0;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      AmplifyCache<double> cache;
      total += tokensr_loss(amplify(inputs[i], probe, &cache), teachers[i], options);
      for (const auto* pre : {&cache.pre1, &cache.pre2})
        for (double v : pre->data()) pattern.push_back(v > 0.0);
    }
    return total * inv;
  };
  std::vector<double> theta = weights.flatten();
  f(theta);
  const std::vector<std::uint8_t> base = pattern;
  const auto analytic = grads.flatten();
  GradientCheckResult r;
  r.parameters = theta.size();
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double saved = theta[i];
    // Largest step on the ladder whose probes all keep the base ReLU pattern.
    std::optional<double> numeric;
    for (int shrink = 0; shrink < 4 && !numeric; ++shrink) {
      const double h = step / std::pow(4.0, shrink);
      const double offsets[4] = {h, -h, 2 * h, -2 * h};
      double v[4];
      bool kink = false;
      for (int k = 0; k < 4 && !kink; ++k) {
        theta[i] = saved + offsets[k];
        v[k] = f(theta);
        kink = pattern != base;
      }
      if (!kink) numeric = (8.0 * (v[0] - v[1]) - (v[2] - v[3])) / (12.0 * h);
    }
    theta[i] = saved;
    if (!numeric) {
      ++r.kink_skipped;
      continue;
    }
    const double diff = std::abs(analytic[i] - *numeric);
    r.max_abs_error = std::max(r.max_abs_error, diff);
    r.max_relative_error = std::max(r.max_relative_error, diff / std::max({std::abs(analytic[i]), std::abs(*numeric), floor}));
  }
  return r;
}

template struct TokenSRLayer<float>;
template struct TokenSRLayer<double>;
template Tensor3<float> amplify(const Tensor3<float>&, const TokenSRLayer<float>&, AmplifyCache<float>*);
template Tensor3<double> amplify(const Tensor3<double>&, const TokenSRLayer<double>&, AmplifyCache<double>*);
template Tensor3<float> amplify_backward(const AmplifyCache<float>&, const TokenSRLayer<float>&, const Tensor3<float>&,
                                         TokenSRLayer<float>&);
template Tensor3<double> amplify_backward(const AmplifyCache<double>&, const TokenSRLayer<double>&,
                                          const Tensor3<double>&, TokenSRLayer<double>&);
template double tokensr_loss(const Tensor3<float>&, const Tensor3<float>&, const LossOptions&, Tensor3<float>*);
template double tokensr_loss(const Tensor3<double>&, const Tensor3<double>&, const LossOptions&, Tensor3<double>*);

}  // namespace blink
