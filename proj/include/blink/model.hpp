// Copyright 2026 The Blink Authors
// SPDX-License-Identifier: Apache-2.0
//
// A miniature multimodal decoder: a linear patch projector feeding a stack of
// pre-norm transformer layers (RMSNorm, rotary multi-head attention, GELU
// feed-forward). Every layer exposes a hook that runs before its input
// normalization and may replace the token stream, so the number of tokens can
// differ from one layer to the next. Decoding keeps one key/value cache per
// layer, each with whatever length that layer processed during prefill.

#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "blink/checkpoint.hpp"
#include "blink/numerics.hpp"

namespace blink {

using Mat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVec = Eigen::Matrix<Real, 1, Eigen::Dynamic>;

struct ModelConfig {
  int d_model = 64;
  int n_heads = 4;
  int n_layers = 8;
  int vocab_size = 64;
  int image_size = 32;   // pixels per side
  int patch_pixels = 4;  // pixels per visual token side
  int max_text_len = 8;
  int n_system = 2;
  int ffn_dim = 256;
  double rope_theta = 10000.0;
  std::uint64_t rng_seed = 1;

  int grid_size() const { return image_size / patch_pixels; }  // H == W
  int n_visual() const { return grid_size() * grid_size(); }
  int head_dim() const { return d_model / n_heads; }
  int patch_dim() const { return patch_pixels * patch_pixels * 3; }

  // Throws InvalidArgument when the divisibility constraints fail.
  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  std::string hash() const;
};

// Reserved token ids shared with the task vocabulary.
inline constexpr int kPadToken = 0;
inline constexpr int kBosToken = 1;
inline constexpr int kSystemToken = 2;
inline constexpr int kEosToken = 3;

enum class Role : std::uint8_t { System, Visual, SuperRes, Text, Generated };

const char* role_name(Role r);

struct Segment {
  Role role;
  int begin;
  int length;

  int end() const { return begin + length; }
  bool operator==(const Segment&) const = default;
};

// The per-layer token stream. Segments always appear in the order
// [System, Visual, SuperRes?, Text, Generated?]; position ids strictly
// increase along the sequence.
class TokenSequence {
 public:
  TokenSequence() = default;

  // Concatenates the parts in order and numbers positions 0..n-1.
  static TokenSequence from_parts(std::vector<std::pair<Role, Mat>> parts);

  int size() const { return static_cast<int>(hidden_.rows()); }
  int dim() const { return static_cast<int>(hidden_.cols()); }

  Mat& hidden() { return hidden_; }
  const Mat& hidden() const { return hidden_; }
  std::vector<int>& positions() { return positions_; }
  const std::vector<int>& positions() const { return positions_; }
  const std::vector<Segment>& segments() const { return segments_; }

  std::optional<Segment> find(Role role) const;
  bool has(Role role) const { return find(role).has_value(); }
  Segment require(Role role) const;  // StateError if absent
  Role role_at(int index) const;
  std::vector<Role> roles() const;

  // Index of the final Text token, the query token for saliency.
  int last_text_index() const { return require(Role::Text).end() - 1; }

  // Inserts `rows` as a new segment immediately before the segment with role
  // `before`. Positions are left untouched; call renumber_positions().
  void insert_segment_before(Role before, Role role, const Mat& rows);
  // Removes the segment with `role` and its rows.
  void remove_segment(Role role);
  // Appends rows to the Generated segment, creating it if necessary.
  void append_generated(const Mat& rows);
  // Positions become 0..size()-1 in segment order.
  void renumber_positions();

  // Causal lower-triangular mask, mask(i, j) = 1 iff j <= i.
  Tensor2<std::uint8_t> attention_mask() const;

  // Throws PipelineIntegrityError if any sequence invariant is violated.
  void validate() const;

 private:
  Mat hidden_;
  std::vector<int> positions_;
  std::vector<Segment> segments_;
};

struct LayerWeights {
  Mat attn_norm;  // 1 x d
  Mat wq, wk, wv, wo;  // d x d
  Mat ffn_norm;   // 1 x d
  Mat w1;         // d x ffn
  Mat b1;         // 1 x ffn
  Mat w2;         // ffn x d
  Mat b2;         // 1 x d
};

struct ModelWeights {
  Mat patch_proj;   // patch_dim x d
  Mat patch_bias;   // 1 x d
  Mat token_embed;  // vocab x d
  std::vector<LayerWeights> layers;
  Mat final_norm;   // 1 x d
  Mat lm_head;      // d x vocab

  static ModelWeights random(const ModelConfig& cfg, Rng& rng);
  static ModelWeights zeros(const ModelConfig& cfg);

  // Calls fn(name, matrix) for every parameter in a fixed order.
  template <typename F>
  void visit(F&& fn) {
    fn(std::string("patch_proj"), patch_proj);
    fn(std::string("patch_bias"), patch_bias);
    fn(std::string("token_embed"), token_embed);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const std::string p = "layers." + std::to_string(l) + ".";
      LayerWeights& w = layers[l];
      fn(p + "attn_norm", w.attn_norm);
      fn(p + "wq", w.wq);
      fn(p + "wk", w.wk);
      fn(p + "wv", w.wv);
      fn(p + "wo", w.wo);
      fn(p + "ffn_norm", w.ffn_norm);
      fn(p + "w1", w.w1);
      fn(p + "b1", w.b1);
      fn(p + "w2", w.w2);
      fn(p + "b2", w.b2);
    }
    fn(std::string("final_norm"), final_norm);
    fn(std::string("lm_head"), lm_head);
  }
  template <typename F>
  void visit(F&& fn) const {
    const_cast<ModelWeights*>(this)->visit([&](const std::string& n, Mat& m) { fn(n, static_cast<const Mat&>(m)); });
  }

  void set_zero();
  std::size_t parameter_count() const;
  // SHA-256 of every parameter's bytes in visit order.
  std::string digest() const;
};

// Intermediate values of one layer, kept for the backward pass.
struct LayerActivations {
  Mat x_in;
  Eigen::VectorXd inv_rms1;
  Mat h1;
  Mat q, k, v;  // q and k after the rotary embedding
  std::vector<Mat> attn;  // per head, n x n (masked entries are zero)
  Mat ctx;
  Mat x_mid;
  Eigen::VectorXd inv_rms2;
  Mat h2;
  Mat ff_pre;
  Mat ff_act;
};

struct LayerCache {
  Mat keys;    // rotary-embedded keys, one row per cached token
  Mat values;
  int max_position = -1;
};

class ToyMLLM;

struct HookContext {
  int layer;
  const ToyMLLM& model;
  const TokenSequence& sequence;
  // Head-averaged attention row of the last Text token at the previous layer
  // (empty at layer 0).
  std::span<const double> prev_attention;
};

// Returns a replacement sequence, or nullopt to keep the input unchanged.
using LayerHook = std::function<std::optional<TokenSequence>(const HookContext&)>;

struct PrefillResult {
  std::vector<TokenSequence> layer_inputs;          // what each layer processed
  std::vector<std::vector<double>> attention_rows;  // last Text token, head-averaged
  TokenSequence output;                             // after the last layer
  RowVec logits;                                    // at the final token
  std::vector<LayerCache> caches;
};

class DecodeSession;

class ToyMLLM {
 public:
  ToyMLLM(ModelConfig config, ModelWeights weights);
  static ToyMLLM random(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  const ModelWeights& weights() const { return weights_; }
  ModelWeights& mutable_weights() { return weights_; }

  // Non-overlapping patchify followed by the linear projector. Rows follow
  // the row-major order of the token grid.
  Mat encode_image(const Tensor3<float>& image) const;
  // Flattened patches (n_visual x patch_dim), the projector's input.
  Mat patchify(const Tensor3<float>& image) const;
  Mat embed_tokens(std::span<const int> ids) const;
  // [System, Visual, Text] prompt for an image and query.
  TokenSequence build_prompt(const Tensor3<float>& image, std::span<const int> query) const;
  std::vector<int> system_tokens() const;

  PrefillResult forward_prefill(TokenSequence sequence, const LayerHook& hook = {}) const;

  // Hidden states of the visual tokens at the input of `layer` (0 gives the
  // projector output) for an image alone. Under causal attention they do not
  // depend on any text that follows.
  Mat visual_states(const Tensor3<float>& image, int layer) const;

  // One transformer layer. `probe_row` selects the token whose head-averaged
  // attention row is written to `probe_out` (skipped when negative).
  Mat layer_forward(int layer, const Mat& x, std::span<const int> positions, LayerActivations& acts,
                    int probe_row = -1, std::vector<double>* probe_out = nullptr) const;

  // Final RMSNorm and output projection of one hidden row.
  RowVec logits_for(const Eigen::Ref<const RowVec>& hidden) const;

  // Input-normalized, projected and rotary-embedded query/key rows of layer
  // `layer` for the given token indices: the quantities the layer's own
  // attention uses.
  Mat layer_queries(int layer, const TokenSequence& seq, std::span<const int> indices) const;
  Mat layer_keys(int layer, const TokenSequence& seq, std::span<const int> indices) const;

  // Rotary embedding applied in place to each row (per head) of m.
  void apply_rope(Mat& m, std::span<const int> positions, bool inverse = false) const;

  TensorArchive to_archive() const;
  static ToyMLLM from_archive(const TensorArchive& archive);
  void save(const std::filesystem::path& path) const { to_archive().save(path); }
  static ToyMLLM load(const std::filesystem::path& path) { return from_archive(TensorArchive::load(path)); }

 private:
  ModelConfig config_;
  ModelWeights weights_;
};

// Autoregressive decoding over frozen per-layer caches.
class DecodeSession {
 public:
  DecodeSession() = default;
  DecodeSession(const ToyMLLM& model, std::vector<LayerCache> caches);
  static DecodeSession from_prefill(const ToyMLLM& model, const PrefillResult& prefill);

  bool ready() const { return model_ != nullptr; }
  // Feeds one token; it attends to every layer's cache and is appended to it.
  // Throws StateError before a prefill has been attached.
  RowVec step(int token);

  const std::vector<LayerCache>& caches() const { return caches_; }

 private:
  const ToyMLLM* model_ = nullptr;
  std::vector<LayerCache> caches_;
};

inline constexpr double kRmsEpsilon = 1e-5;

// Row-wise RMS normalization scaled by `gain` (1 x d). Stores the per-row
// reciprocal RMS in `inv_rms` when given.
Mat rms_normalize(const Mat& x, const Mat& gain, Eigen::VectorXd* inv_rms = nullptr);

inline Real gelu(Real x) {
  constexpr Real kC = Real(0.7978845608028654);  // sqrt(2 / pi)
  return Real(0.5) * x * (Real(1) + std::tanh(kC * (x + Real(0.044715) * x * x * x)));
}
inline Real gelu_grad(Real x) {
  constexpr Real kC = Real(0.7978845608028654);
  const Real u = kC * (x + Real(0.044715) * x * x * x);
  const Real t = std::tanh(u);
  return Real(0.5) * (Real(1) + t) + Real(0.5) * x * (Real(1) - t * t) * kC * (Real(1) + Real(3 * 0.044715) * x * x);
}

int argmax(const Eigen::Ref<const RowVec>& logits);

// Greedy decoding starting from the prefill logits; stops after `eos` (not
// included in the result) or `max_new_tokens`.
std::vector<int> greedy_generate(DecodeSession& session, const RowVec& first_logits, int eos, int max_new_tokens);

}  // namespace blink
