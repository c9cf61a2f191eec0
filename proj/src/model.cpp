// Copyright 2026 The Blink Authors
// SPDX-License-Identifier: Apache-2.0

#include "blink/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "blink/errors.hpp"

namespace blink {

void ModelConfig::validate() const {
  if (d_model <= 0 || n_heads <= 0 || d_model % n_heads != 0) {
    throw InvalidArgument("ModelConfig: d_model must be a positive multiple of n_heads");
  }
  if (head_dim() % 2 != 0) throw InvalidArgument("ModelConfig: head dimension must be even for rotary positions");
  if (n_layers <= 0 || vocab_size <= kEosToken || ffn_dim <= 0 || n_system <= 0 || max_text_len <= 0) {
    throw InvalidArgument("ModelConfig: sizes must be positive");
  }
  if (patch_pixels <= 0 || image_size <= 0 || image_size % patch_pixels != 0) {
    throw InvalidArgument("ModelConfig: image_size must be divisible by patch_pixels");
  }
}

nlohmann::json ModelConfig::to_json() const {
  return {{"d_model", d_model},           {"n_heads", n_heads},       {"n_layers", n_layers},
          {"vocab_size", vocab_size},     {"image_size", image_size}, {"patch_pixels", patch_pixels},
          {"max_text_len", max_text_len}, {"n_system", n_system},     {"ffn_dim", ffn_dim},
          {"rope_theta", rope_theta},     {"rng_seed", rng_seed}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.d_model = j.value("d_model", c.d_model);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.n_layers = j.value("n_layers", c.n_layers);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.image_size = j.value("image_size", c.image_size);
  c.patch_pixels = j.value("patch_pixels", c.patch_pixels);
  c.max_text_len = j.value("max_text_len", c.max_text_len);
  c.n_system = j.value("n_system", c.n_system);
  c.ffn_dim = j.value("ffn_dim", c.ffn_dim);
  c.rope_theta = j.value("rope_theta", c.rope_theta);
  c.rng_seed = j.value("rng_seed", c.rng_seed);
  c.validate();
  return c;
}

std::string ModelConfig::hash() const { return sha256_hex(to_json().dump()); }

const char* role_name(Role r) {
  switch (r) {
    case Role::System: return "System";
    case Role::Visual: return "Visual";
    case Role::SuperRes: return "SuperRes";
    case Role::Text: return "Text";
    case Role::Generated: return "Generated";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// TokenSequence

TokenSequence TokenSequence::from_parts(std::vector<std::pair<Role, Mat>> parts) {
  TokenSequence seq;
  int rows = 0;
  int cols = -1;
  for (const auto& [role, m] : parts) {
    if (m.rows() == 0) continue;
    if (cols >= 0 && m.cols() != cols) throw InvalidArgument("TokenSequence: parts have different widths");
    cols = static_cast<int>(m.cols());
    seq.segments_.push_back({role, rows, static_cast<int>(m.rows())});
    rows += static_cast<int>(m.rows());
  }
  seq.hidden_.resize(rows, std::max(cols, 0));
  for (std::size_t i = 0, r = 0; i < parts.size(); ++i) {
    if (parts[i].second.rows() == 0) continue;
    seq.hidden_.middleRows(seq.segments_[r].begin, seq.segments_[r].length) = parts[i].second;
    ++r;
  }
  seq.renumber_positions();
  seq.validate();
  return seq;
}

std::optional<Segment> TokenSequence::find(Role role) const {
  for (const Segment& s : segments_) {
    if (s.role == role) return s;
  }
  return std::nullopt;
}

Segment TokenSequence::require(Role role) const {
  auto s = find(role);
  if (!s) throw StateError(std::string("token sequence has no ") + role_name(role) + " segment");
  return *s;
}

Role TokenSequence::role_at(int index) const {
  for (const Segment& s : segments_) {
    if (index >= s.begin && index < s.end()) return s.role;
  }
  throw InvalidArgument("TokenSequence::role_at: index out of range");
}

std::vector<Role> TokenSequence::roles() const {
  std::vector<Role> out;
  out.reserve(size());
  for (const Segment& s : segments_) out.insert(out.end(), s.length, s.role);
  return out;
}

void TokenSequence::insert_segment_before(Role before, Role role, const Mat& rows) {
  if (has(role)) throw StateError(std::string("token sequence already has a ") + role_name(role) + " segment");
  if (rows.cols() != hidden_.cols()) throw InvalidArgument("insert_segment_before: width mismatch");
  const Segment anchor = require(before);
  const int n = static_cast<int>(rows.rows());
  Mat merged(hidden_.rows() + n, hidden_.cols());
  merged.topRows(anchor.begin) = hidden_.topRows(anchor.begin);
  merged.middleRows(anchor.begin, n) = rows;
  merged.bottomRows(hidden_.rows() - anchor.begin) = hidden_.bottomRows(hidden_.rows() - anchor.begin);
  hidden_ = std::move(merged);
  // New tokens temporarily share the anchor's position; renumbering fixes it.
  positions_.insert(positions_.begin() + anchor.begin, n, anchor.begin < static_cast<int>(positions_.size())
                                                              ? positions_[anchor.begin]
                                                              : 0);
  std::vector<Segment> segs;
  for (const Segment& s : segments_) {
    if (s.role == before) segs.push_back({role, s.begin, n});
    segs.push_back(s.begin >= anchor.begin ? Segment{s.role, s.begin + n, s.length} : s);
  }
  segments_ = std::move(segs);
}

void TokenSequence::remove_segment(Role role) {
  const Segment gone = require(role);
  Mat kept(hidden_.rows() - gone.length, hidden_.cols());
  kept.topRows(gone.begin) = hidden_.topRows(gone.begin);
  kept.bottomRows(hidden_.rows() - gone.end()) = hidden_.bottomRows(hidden_.rows() - gone.end());
  hidden_ = std::move(kept);
  positions_.erase(positions_.begin() + gone.begin, positions_.begin() + gone.end());
  std::vector<Segment> segs;
  for (const Segment& s : segments_) {
    if (s.role == role) continue;
    segs.push_back(s.begin > gone.begin ? Segment{s.role, s.begin - gone.length, s.length} : s);
  }
  segments_ = std::move(segs);
}

void TokenSequence::append_generated(const Mat& rows) {
  if (rows.cols() != hidden_.cols()) throw InvalidArgument("append_generated: width mismatch");
  const int old = size();
  const int n = static_cast<int>(rows.rows());
  hidden_.conservativeResize(old + n, Eigen::NoChange);
  hidden_.bottomRows(n) = rows;
  const int next = positions_.empty() ? 0 : positions_.back() + 1;
  for (int i = 0; i < n; ++i) positions_.push_back(next + i);
  if (!segments_.empty() && segments_.back().role == Role::Generated) {
    segments_.back().length += n;
  } else {
    segments_.push_back({Role::Generated, old, n});
  }
}

void TokenSequence::renumber_positions() {
  positions_.resize(static_cast<std::size_t>(size()));
  std::iota(positions_.begin(), positions_.end(), 0);
}

Tensor2<std::uint8_t> TokenSequence::attention_mask() const {
  Tensor2<std::uint8_t> mask(size(), size());
  for (int i = 0; i < size(); ++i)
    for (int j = 0; j <= i; ++j) mask(i, j) = 1;
  return mask;
}

namespace {

int role_rank(Role r) { return static_cast<int>(r); }

}  // namespace

void TokenSequence::validate() const {
  if (static_cast<int>(positions_.size()) != size()) {
    throw PipelineIntegrityError("token sequence: position count differs from token count");
  }
  int cursor = 0;
  int last_rank = -1;
  for (const Segment& s : segments_) {
    if (s.begin != cursor) throw PipelineIntegrityError("token sequence: segments are not contiguous");
    if (s.length <= 0) throw PipelineIntegrityError("token sequence: empty segment");
    if (role_rank(s.role) <= last_rank) {
      throw PipelineIntegrityError("token sequence: segment order must be [System, Visual, SuperRes?, Text, Generated?]");
    }
    last_rank = role_rank(s.role);
    cursor = s.end();
  }
  if (cursor != size()) throw PipelineIntegrityError("token sequence: segments do not cover every token");
  for (std::size_t i = 0; i < positions_.size(); ++i) {
    if (positions_[i] < 0) throw PipelineIntegrityError("token sequence: negative position id");
    if (i > 0 && positions_[i] <= positions_[i - 1]) {
      throw PipelineIntegrityError("token sequence: position ids must strictly increase");
    }
  }
}

// ---------------------------------------------------------------------------
// Weights

namespace {

Mat random_matrix(int rows, int cols, double stddev, Rng& rng) {
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Real>(rng.normal() * stddev);
  return m;
}

}  // namespace

ModelWeights ModelWeights::random(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  const int d = cfg.d_model;
  const double out_scale = 1.0 / std::sqrt(2.0 * cfg.n_layers);
  ModelWeights w;
  w.patch_proj = random_matrix(cfg.patch_dim(), d, 1.0 / std::sqrt(cfg.patch_dim()), rng);
  w.patch_bias = Mat::Zero(1, d);
  w.token_embed = random_matrix(cfg.vocab_size, d, 1.0, rng);
  for (int l = 0; l < cfg.n_layers; ++l) {
    LayerWeights lw;
    lw.attn_norm = Mat::Ones(1, d);
    lw.wq = random_matrix(d, d, 1.0 / std::sqrt(d), rng);
    lw.wk = random_matrix(d, d, 1.0 / std::sqrt(d), rng);
    lw.wv = random_matrix(d, d, 1.0 / std::sqrt(d), rng);
    lw.wo = random_matrix(d, d, out_scale / std::sqrt(d), rng);
    lw.ffn_norm = Mat::Ones(1, d);
    lw.w1 = random_matrix(d, cfg.ffn_dim, 1.0 / std::sqrt(d), rng);
    lw.b1 = Mat::Zero(1, cfg.ffn_dim);
    lw.w2 = random_matrix(cfg.ffn_dim, d, out_scale / std::sqrt(cfg.ffn_dim), rng);
    lw.b2 = Mat::Zero(1, d);
    w.layers.push_back(std::move(lw));
  }
  w.final_norm = Mat::Ones(1, d);
  w.lm_head = random_matrix(d, cfg.vocab_size, 1.0 / std::sqrt(d), rng);
  return w;
}

ModelWeights ModelWeights::zeros(const ModelConfig& cfg) {
  Rng rng(0);
  ModelWeights w = random(cfg, rng);
  w.set_zero();
  return w;
}

void ModelWeights::set_zero() {
  visit([](const std::string&, Mat& m) { m.setZero(); });
}

std::size_t ModelWeights::parameter_count() const {
  std::size_t n = 0;
  visit([&](const std::string&, const Mat& m) { n += static_cast<std::size_t>(m.size()); });
  return n;
}

std::string ModelWeights::digest() const {
  Sha256 h;
  visit([&](const std::string& name, const Mat& m) {
    h.update(name);
    h.update(m.data(), static_cast<std::size_t>(m.size()) * sizeof(Real));
  });
  return h.hex_digest();
}

// ---------------------------------------------------------------------------
// Model

Mat rms_normalize(const Mat& x, const Mat& gain, Eigen::VectorXd* inv_rms) {
  const Eigen::Index n = x.rows();
  const Eigen::Index d = x.cols();
  Mat out(n, d);
  if (inv_rms) inv_rms->resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    double ss = 0.0;
    for (Eigen::Index j = 0; j < d; ++j) ss += static_cast<double>(x(i, j)) * x(i, j);
    const double r = 1.0 / std::sqrt(ss / static_cast<double>(d) + kRmsEpsilon);
    if (inv_rms) (*inv_rms)(i) = r;
    out.row(i) = (x.row(i) * static_cast<Real>(r)).cwiseProduct(gain);
  }
  return out;
}

ToyMLLM::ToyMLLM(ModelConfig config, ModelWeights weights) : config_(config), weights_(std::move(weights)) {
  config_.validate();
  if (static_cast<int>(weights_.layers.size()) != config_.n_layers) {
    throw ConfigError("model weights have " + std::to_string(weights_.layers.size()) + " layers, config expects " +
                      std::to_string(config_.n_layers));
  }
}

ToyMLLM ToyMLLM::random(const ModelConfig& config) {
  Rng rng(config.rng_seed);
  return ToyMLLM(config, ModelWeights::random(config, rng));
}

Mat ToyMLLM::patchify(const Tensor3<float>& image) const {
  const int s = config_.image_size;
  const int pp = config_.patch_pixels;
  if (image.height() != s || image.width() != s || image.channels() != 3) {
    throw InvalidArgument("encode_image: image must be " + std::to_string(s) + "x" + std::to_string(s) + "x3");
  }
  const int g = config_.grid_size();
  Mat patches(g * g, config_.patch_dim());
  for (int gy = 0; gy < g; ++gy) {
    for (int gx = 0; gx < g; ++gx) {
      int col = 0;
      for (int py = 0; py < pp; ++py)
        for (int px = 0; px < pp; ++px)
          for (int c = 0; c < 3; ++c) patches(gy * g + gx, col++) = static_cast<Real>(image(gy * pp + py, gx * pp + px, c));
    }
  }
  return patches;
}

Mat ToyMLLM::encode_image(const Tensor3<float>& image) const {
  Mat tokens = patchify(image) * weights_.patch_proj;
  tokens.rowwise() += weights_.patch_bias.row(0);
  return tokens;
}

Mat ToyMLLM::embed_tokens(std::span<const int> ids) const {
  Mat out(static_cast<Eigen::Index>(ids.size()), config_.d_model);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= config_.vocab_size) throw InvalidArgument("embed_tokens: token id out of range");
    out.row(static_cast<Eigen::Index>(i)) = weights_.token_embed.row(ids[i]);
  }
  return out;
}

std::vector<int> ToyMLLM::system_tokens() const {
  std::vector<int> ids(static_cast<std::size_t>(config_.n_system), kSystemToken);
  ids[0] = kBosToken;
  return ids;
}

TokenSequence ToyMLLM::build_prompt(const Tensor3<float>& image, std::span<const int> query) const {
  if (query.empty() || static_cast<int>(query.size()) > config_.max_text_len) {
    throw InvalidArgument("build_prompt: query length must be in [1, max_text_len]");
  }
  const auto sys = system_tokens();
  return TokenSequence::from_parts({{Role::System, embed_tokens(sys)},
                                    {Role::Visual, encode_image(image)},
                                    {Role::Text, embed_tokens(query)}});
}

void ToyMLLM::apply_rope(Mat& m, std::span<const int> positions, bool inverse) const {
  const int hd = config_.head_dim();
  const int half = hd / 2;
  const int heads = static_cast<int>(m.cols()) / hd;
  if (static_cast<Eigen::Index>(positions.size()) != m.rows()) throw InvalidArgument("apply_rope: position count mismatch");
  std::vector<Real> cosv(half), sinv(half);
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const double pos = positions[static_cast<std::size_t>(r)];
    for (int i = 0; i < half; ++i) {
      const double angle = pos * std::pow(config_.rope_theta, -2.0 * i / hd);
      cosv[i] = static_cast<Real>(std::cos(angle));
      sinv[i] = static_cast<Real>(inverse ? -std::sin(angle) : std::sin(angle));
    }
    Real* row = m.row(r).data();
    for (int h = 0; h < heads; ++h) {
      Real* p = row + h * hd;
      for (int i = 0; i < half; ++i) {
        const Real a = p[2 * i];
        const Real b = p[2 * i + 1];
        p[2 * i] = a * cosv[i] - b * sinv[i];
        p[2 * i + 1] = a * sinv[i] + b * cosv[i];
      }
    }
  }
}

Mat ToyMLLM::layer_forward(int layer, const Mat& x, std::span<const int> positions, LayerActivations& a,
                           int probe_row, std::vector<double>* probe_out) const {
  const LayerWeights& w = weights_.layers.at(static_cast<std::size_t>(layer));
  const Eigen::Index n = x.rows();
  const int d = config_.d_model;
  const int heads = config_.n_heads;
  const int hd = config_.head_dim();
  const Real scale = static_cast<Real>(1.0 / std::sqrt(static_cast<double>(hd)));

  a.x_in = x;
  a.h1 = rms_normalize(x, w.attn_norm, &a.inv_rms1);
  a.q.noalias() = a.h1 * w.wq;
  a.k.noalias() = a.h1 * w.wk;
  a.v.noalias() = a.h1 * w.wv;
  apply_rope(a.q, positions);
  apply_rope(a.k, positions);

  a.attn.resize(static_cast<std::size_t>(heads));
  a.ctx.setZero(n, d);
  for (int h = 0; h < heads; ++h) {
    Mat s;
    s.noalias() = a.q.middleCols(h * hd, hd) * a.k.middleCols(h * hd, hd).transpose();
    for (Eigen::Index i = 0; i < n; ++i) {
      Real* row = s.row(i).data();
      Real mx = row[0] * scale;
      for (Eigen::Index j = 0; j <= i; ++j) mx = std::max(mx, row[j] * scale);
      Real total = 0;
      for (Eigen::Index j = 0; j <= i; ++j) {
        row[j] = std::exp(row[j] * scale - mx);
        total += row[j];
      }
      const Real inv = Real(1) / total;
      for (Eigen::Index j = 0; j <= i; ++j) row[j] *= inv;
      for (Eigen::Index j = i + 1; j < n; ++j) row[j] = 0;
    }
    a.ctx.middleCols(h * hd, hd).noalias() = s * a.v.middleCols(h * hd, hd);
    a.attn[static_cast<std::size_t>(h)] = std::move(s);
  }

  if (probe_out && probe_row >= 0) {
    // Recomputed in double so the reported row is normalized to ~1e-15.
    probe_out->assign(static_cast<std::size_t>(n), 0.0);
    std::vector<double> logits(static_cast<std::size_t>(probe_row + 1));
    for (int h = 0; h < heads; ++h) {
      for (int j = 0; j <= probe_row; ++j) {
        double dot = 0.0;
        for (int c = 0; c < hd; ++c) dot += static_cast<double>(a.q(probe_row, h * hd + c)) * a.k(j, h * hd + c);
        logits[static_cast<std::size_t>(j)] = dot / std::sqrt(static_cast<double>(hd));
      }
      const auto p = softmax(logits);
      for (int j = 0; j <= probe_row; ++j) (*probe_out)[static_cast<std::size_t>(j)] += p[static_cast<std::size_t>(j)] / heads;
    }
  }

  a.x_mid = x;
  a.x_mid.noalias() += a.ctx * w.wo;
  a.h2 = rms_normalize(a.x_mid, w.ffn_norm, &a.inv_rms2);
  a.ff_pre.noalias() = a.h2 * w.w1;
  a.ff_pre.rowwise() += w.b1.row(0);
  a.ff_act = a.ff_pre.unaryExpr([](Real v) { return gelu(v); });
  Mat out = a.x_mid;
  out.noalias() += a.ff_act * w.w2;
  out.rowwise() += w.b2.row(0);
  return out;
}

RowVec ToyMLLM::logits_for(const Eigen::Ref<const RowVec>& hidden) const {
  Mat row = hidden;
  Mat normed = rms_normalize(row, weights_.final_norm);
  RowVec out = normed * weights_.lm_head;
  return out;
}

Mat ToyMLLM::layer_queries(int layer, const TokenSequence& seq, std::span<const int> indices) const {
  const LayerWeights& w = weights_.layers.at(static_cast<std::size_t>(layer));
  Mat rows(static_cast<Eigen::Index>(indices.size()), seq.dim());
  std::vector<int> pos(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    rows.row(static_cast<Eigen::Index>(i)) = seq.hidden().row(indices[i]);
    pos[i] = seq.positions()[static_cast<std::size_t>(indices[i])];
  }
  Mat q = rms_normalize(rows, w.attn_norm) * w.wq;
  apply_rope(q, pos);
  return q;
}

Mat ToyMLLM::layer_keys(int layer, const TokenSequence& seq, std::span<const int> indices) const {
  const LayerWeights& w = weights_.layers.at(static_cast<std::size_t>(layer));
  Mat rows(static_cast<Eigen::Index>(indices.size()), seq.dim());
  std::vector<int> pos(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    rows.row(static_cast<Eigen::Index>(i)) = seq.hidden().row(indices[i]);
    pos[i] = seq.positions()[static_cast<std::size_t>(indices[i])];
  }
  Mat k = rms_normalize(rows, w.attn_norm) * w.wk;
  apply_rope(k, pos);
  return k;
}

PrefillResult ToyMLLM::forward_prefill(TokenSequence seq, const LayerHook& hook) const {
  seq.validate();
  seq.require(Role::System);
  seq.require(Role::Visual);
  seq.require(Role::Text);
  if (seq.dim() != config_.d_model) throw InvalidArgument("forward_prefill: hidden width differs from d_model");

  PrefillResult result;
  result.layer_inputs.reserve(static_cast<std::size_t>(config_.n_layers));
  std::vector<double> prev;
  for (int l = 0; l < config_.n_layers; ++l) {
    if (hook) {
      std::optional<TokenSequence> replaced = hook(HookContext{l, *this, seq, prev});
      if (replaced) {
        replaced->validate();
        if (replaced->dim() != config_.d_model || !replaced->has(Role::Visual) || !replaced->has(Role::Text)) {
          throw PipelineIntegrityError("layer hook returned a sequence without Visual/Text segments or of wrong width");
        }
        seq = std::move(*replaced);
      }
    }
    LayerActivations acts;
    std::vector<double> row;
    Mat out = layer_forward(l, seq.hidden(), seq.positions(), acts, seq.last_text_index(), &row);
    result.caches.push_back(LayerCache{std::move(acts.k), std::move(acts.v), seq.positions().back()});
    result.layer_inputs.push_back(seq);
    seq.hidden() = std::move(out);
    result.attention_rows.push_back(row);
    prev = std::move(row);
  }
  result.logits = logits_for(seq.hidden().row(seq.size() - 1));
  result.output = std::move(seq);
  return result;
}

Mat ToyMLLM::visual_states(const Tensor3<float>& image, int layer) const {
  if (layer < 0 || layer > config_.n_layers) throw InvalidArgument("visual_states: layer out of range");
  const auto sys = system_tokens();
  Mat x(config_.n_system + config_.n_visual(), config_.d_model);
  x.topRows(config_.n_system) = embed_tokens(sys);
  x.bottomRows(config_.n_visual()) = encode_image(image);
  std::vector<int> positions(static_cast<std::size_t>(x.rows()));
  std::iota(positions.begin(), positions.end(), 0);
  LayerActivations acts;
  for (int l = 0; l < layer; ++l) x = layer_forward(l, x, positions, acts);
  return x.bottomRows(config_.n_visual());
}

TensorArchive ToyMLLM::to_archive() const {
  TensorArchive archive;
  weights_.visit([&](const std::string& name, const Mat& m) {
    std::vector<float> values(static_cast<std::size_t>(m.size()));
    for (Eigen::Index i = 0; i < m.size(); ++i) values[static_cast<std::size_t>(i)] = static_cast<float>(m.data()[i]);
    archive.put(name, {m.rows(), m.cols()}, values);
  });
  archive.meta()["kind"] = "backbone";
  archive.meta()["model_config"] = config_.to_json();
  archive.meta()["config_hash"] = config_.hash();
  return archive;
}

ToyMLLM ToyMLLM::from_archive(const TensorArchive& archive) {
  if (archive.meta().value("kind", std::string()) != "backbone") throw ConfigError("checkpoint is not a backbone checkpoint");
  const ModelConfig cfg = ModelConfig::from_json(archive.meta().at("model_config"));
  ModelWeights w = ModelWeights::zeros(cfg);
  w.visit([&](const std::string& name, Mat& m) {
    const auto values = archive.get_f32(name, {m.rows(), m.cols()});
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Real>(values[static_cast<std::size_t>(i)]);
  });
  return ToyMLLM(cfg, std::move(w));
}

// ---------------------------------------------------------------------------
// Decoding

DecodeSession::DecodeSession(const ToyMLLM& model, std::vector<LayerCache> caches)
    : model_(&model), caches_(std::move(caches)) {
  if (static_cast<int>(caches_.size()) != model.config().n_layers) {
    throw StateError("decode session needs one cache per layer");
  }
}

DecodeSession DecodeSession::from_prefill(const ToyMLLM& model, const PrefillResult& prefill) {
  if (prefill.caches.empty()) throw StateError("decode requires a completed prefill");
  return DecodeSession(model, prefill.caches);
}

RowVec DecodeSession::step(int token) {
  if (!model_) throw StateError("decode_step called before prefill");
  const ModelConfig& cfg = model_->config();
  const int heads = cfg.n_heads;
  const int hd = cfg.head_dim();
  const Real scale = static_cast<Real>(1.0 / std::sqrt(static_cast<double>(hd)));
  const int one[1] = {token};
  Mat x = model_->embed_tokens(one);
  for (int l = 0; l < cfg.n_layers; ++l) {
    const LayerWeights& w = model_->weights().layers[static_cast<std::size_t>(l)];
    LayerCache& cache = caches_[static_cast<std::size_t>(l)];
    const int pos[1] = {cache.max_position + 1};
    Mat h = rms_normalize(x, w.attn_norm);
    Mat q = h * w.wq;
    Mat k = h * w.wk;
    Mat v = h * w.wv;
    model_->apply_rope(q, pos);
    model_->apply_rope(k, pos);
    const Eigen::Index n = cache.keys.rows() + 1;
    cache.keys.conservativeResize(n, Eigen::NoChange);
    cache.values.conservativeResize(n, Eigen::NoChange);
    cache.keys.row(n - 1) = k.row(0);
    cache.values.row(n - 1) = v.row(0);
    cache.max_position = pos[0];

    Mat ctx = Mat::Zero(1, cfg.d_model);
    for (int hh = 0; hh < heads; ++hh) {
      RowVec s = q.middleCols(hh * hd, hd) * cache.keys.middleCols(hh * hd, hd).transpose();
      s *= scale;
      const Real mx = s.maxCoeff();
      s = (s.array() - mx).exp();
      s /= s.sum();
      ctx.middleCols(hh * hd, hd).noalias() = s * cache.values.middleCols(hh * hd, hd);
    }
    x.noalias() += ctx * w.wo;
    Mat h2 = rms_normalize(x, w.ffn_norm);
    Mat pre = h2 * w.w1;
    pre.rowwise() += w.b1.row(0);
    Mat act = pre.unaryExpr([](Real val) { return gelu(val); });
    x.noalias() += act * w.w2;
    x.rowwise() += w.b2.row(0);
  }
  return model_->logits_for(x.row(0));
}

int argmax(const Eigen::Ref<const RowVec>& logits) {
  int best = 0;
  for (Eigen::Index i = 1; i < logits.size(); ++i) {
    if (logits(i) > logits(best)) best = static_cast<int>(i);
  }
  return best;
}

std::vector<int> greedy_generate(DecodeSession& session, const RowVec& first_logits, int eos, int max_new_tokens) {
  std::vector<int> out;
  RowVec logits = first_logits;
  for (int i = 0; i < max_new_tokens; ++i) {
    const int t = argmax(logits);
    if (t == eos) break;
    out.push_back(t);
    if (i + 1 < max_new_tokens) logits = session.step(t);
  }
  return out;
}

}  // namespace blink
