// Copyright 2026 The Blink Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dynamic token resolution: per selected layer, scan saliency, then expand
// the most salient patch into a block of super-resolved tokens, drop a
// previously inserted block, or keep the sequence as is.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <boost/rational.hpp>
#include <json.hpp>

#include "blink/model.hpp"
#include "blink/saliency.hpp"
#include "blink/tokensr.hpp"

namespace blink {

enum class AmplifierMode { TokenSR, InterpOnly };
enum class Variant { Full, NoSGS, NoDTR, NoDrop };

const char* amplifier_name(AmplifierMode m);
const char* variant_name(Variant v);
AmplifierMode parse_amplifier(const std::string& s);
Variant parse_variant(const std::string& s);

using Rational = boost::rational<std::int64_t>;

// Thresholds tuned for a 2 x 2 grid rescaled to p x p by the ratio of uniform
// patch shares: tau * (1/p^2) / (1/4). Exact on rationals.
Rational scale_threshold(Rational tau_for_p2, int p);
// Parses a plain decimal such as "0.4" exactly.
Rational parse_decimal(const std::string& text);
inline double to_double(Rational r) { return boost::rational_cast<double>(r); }

struct BlinkConfig {
  std::vector<int> layers = {3, 4};
  double tau_exp = 0.5;
  double tau_drop = 0.4;
  int p = 2;
  AmplifierMode amplifier = AmplifierMode::TokenSR;
  Variant variant = Variant::Full;
  bool interpolate = true;  // false: insert the raw patch tokens
  SaliencyMode saliency = SaliencyMode::Softmax;
  std::uint64_t seed = 0;
  int max_new_tokens = 3;

  // Throws ConfigError on invalid thresholds or layers.
  void validate(int n_layers) const;
  // Sets p and thresholds scaled from the given 2 x 2 values.
  void set_patches(int patches, Rational tau_exp_p2 = Rational(1, 2), Rational tau_drop_p2 = Rational(2, 5));
  nlohmann::json to_json() const;
};

// Expand(argmax) when rho > tau_exp; Drop when rho < tau_drop and a block is
// alive; otherwise Keep. Variant NoDrop never drops. Throws InvalidArgument
// for rho outside [0, 1]. NoSGS and NoDTR need ActionPolicy.
ResolutionAction decide_action(double rho, int argmax_patch, const BlinkConfig& config, bool sr_present);

// Stateful decisions for one prefill, covering every variant.
class ActionPolicy {
 public:
  explicit ActionPolicy(const BlinkConfig& config);
  // `ordinal` is the position of the layer within the selected layer list.
  ResolutionAction decide(double rho, int argmax_patch, bool sr_present, int ordinal);

 private:
  BlinkConfig config_;
  Rng rng_;
};

// Source of the SuperRes block's refinement.
struct Amplifier {
  AmplifierMode mode = AmplifierMode::InterpOnly;
  const TokenSRBank* bank = nullptr;

  Tensor3<Real> apply(int layer, const Tensor3<Real>& grid) const;
};

// Visual tokens of one patch as a (patch_h x patch_w x d) grid.
Tensor3<Real> extract_patch(const TokenSequence& seq, const PatchGrid& grid, int patch);

// Inserts the amplified patch between Visual and Text, replacing any existing
// SuperRes block, and renumbers positions.
TokenSequence expand(const TokenSequence& seq, int layer, int patch, const PatchGrid& grid, const Amplifier& amplifier,
                     bool interpolate = true);

// Removes the SuperRes block and renumbers positions. StateError if absent.
TokenSequence drop(const TokenSequence& seq);

// Causal mask and contiguous positions for the current layout.
std::pair<Tensor2<std::uint8_t>, std::vector<int>> update_mask_positions(TokenSequence& seq);

// Key-insight intervention: at `layer` only, copy the most attended patch,
// resize it to the full grid and keep it for the rest of the stack.
LayerHook copy_baseline_hook(int layer, int p, SaliencyMode mode = SaliencyMode::Softmax);

struct BlinkResult {
  std::vector<int> tokens;                 // generated, without EOS
  std::vector<SaliencyReport> reports;     // one per selected layer
  std::vector<int> seq_lengths;            // per layer, as processed
  std::vector<std::vector<double>> attention_rows;  // per layer, last Text token

  int answer() const { return tokens.empty() ? -1 : tokens.front(); }
};

// Whole pipeline: one prefill with decisions at the selected layers, then
// greedy decoding over the frozen per-layer caches. ConfigError when TokenSR
// mode lacks weights for a selected layer.
BlinkResult run_blink(const ToyMLLM& model, const Tensor3<float>& image, std::span<const int> query,
                      const BlinkConfig& config, const TokenSRBank* bank = nullptr);

// Vanilla prediction through the same decoding path.
BlinkResult run_vanilla(const ToyMLLM& model, const Tensor3<float>& image, std::span<const int> query,
                        int max_new_tokens = 3);

// One JSON object per selected layer: {layer, rho, action, patch, seq_len}.
std::vector<nlohmann::json> action_trace(const BlinkResult& result);
void write_action_trace(const std::filesystem::path& path, const BlinkResult& result);

}  // namespace blink
