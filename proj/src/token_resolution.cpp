// Copyright 2026 The Blink Authors
// SPDX-License-Identifier: Apache-2.0

#include "blink/token_resolution.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include "blink/errors.hpp"

namespace blink {

const char* amplifier_name(AmplifierMode m) { return m == AmplifierMode::TokenSR ? "tokensr" : "interp"; }

const char* variant_name(Variant v) {
  switch (v) {
    case Variant::Full: return "full";
    case Variant::NoSGS: return "no_sgs";
    case Variant::NoDTR: return "no_dtr";
    case Variant::NoDrop: return "no_drop";
  }
  return "?";
}

AmplifierMode parse_amplifier(const std::string& s) {
  if (s == "tokensr") return AmplifierMode::TokenSR;
  if (s == "interp") return AmplifierMode::InterpOnly;
  throw ConfigError("unknown amplifier '" + s + "' (expected tokensr or interp)");
}

Variant parse_variant(const std::string& s) {
  for (Variant v : {Variant::Full, Variant::NoSGS, Variant::NoDTR, Variant::NoDrop}) {
    if (s == variant_name(v)) return v;
  }
  throw ConfigError("unknown variant '" + s + "' (expected full, no_sgs, no_dtr or no_drop)");
}

Rational scale_threshold(Rational tau_for_p2, int p) {
  if (p <= 0) throw InvalidArgument("scale_threshold: p must be positive");
  return tau_for_p2 * Rational(4, static_cast<std::int64_t>(p) * p);
}

Rational parse_decimal(const std::string& text) {
  std::size_t i = 0;
  bool negative = false;
  if (i < text.size() && (text[i] == '-' || text[i] == '+')) negative = text[i++] == '-';
  std::int64_t num = 0;
  std::int64_t den = 1;
  bool seen_digit = false;
  bool seen_point = false;
  for (; i < text.size(); ++i) {
    const char c = text[i];
    if (c == '.' && !seen_point) {
      seen_point = true;
    } else if (c >= '0' && c <= '9') {
      if (num > (INT64_MAX - 9) / 10 || (seen_point && den > INT64_MAX / 10)) throw ConfigError("decimal too long: " + text);
      num = num * 10 + (c - '0');
      if (seen_point) den *= 10;
      seen_digit = true;
    } else {
      throw ConfigError("not a plain decimal: '" + text + "'");
    }
  }
  if (!seen_digit) throw ConfigError("not a plain decimal: '" + text + "'");
  return Rational(negative ? -num : num, den);
}

void BlinkConfig::validate(int n_layers) const {
  if (!(tau_drop >= 0.0) || !(tau_exp > 0.0)) throw ConfigError("thresholds must satisfy tau_exp > 0, tau_drop >= 0");
  if (!(tau_drop < tau_exp)) throw ConfigError("thresholds must satisfy tau_drop < tau_exp");
  if (p <= 0) throw ConfigError("patch count p must be positive");
  if (max_new_tokens <= 0) throw ConfigError("max_new_tokens must be positive");
  std::set<int> seen;
  for (int l : layers) {
    if (l < 0 || l >= n_layers) throw ConfigError("selected layer " + std::to_string(l) + " outside [0, n_layers)");
    if (!seen.insert(l).second) throw ConfigError("selected layer " + std::to_string(l) + " listed twice");
  }
  if (!std::is_sorted(layers.begin(), layers.end())) throw ConfigError("selected layers must be in increasing order");
}

void BlinkConfig::set_patches(int patches, Rational tau_exp_p2, Rational tau_drop_p2) {
  p = patches;
  tau_exp = to_double(scale_threshold(tau_exp_p2, patches));
  tau_drop = to_double(scale_threshold(tau_drop_p2, patches));
}

nlohmann::json BlinkConfig::to_json() const {
  return {{"layers", layers},
          {"tau_exp", tau_exp},
          {"tau_drop", tau_drop},
          {"p", p},
          {"amplifier", amplifier_name(amplifier)},
          {"variant", variant_name(variant)},
          {"interpolate", interpolate},
          {"saliency", saliency_mode_name(saliency)},
          {"seed", seed},
          {"max_new_tokens", max_new_tokens}};
}

ResolutionAction decide_action(double rho, int argmax_patch, const BlinkConfig& config, bool sr_present) {
  if (!(rho >= 0.0 && rho <= 1.0)) throw InvalidArgument("decide_action: rho must lie in [0, 1]");
  if (config.variant == Variant::NoSGS || config.variant == Variant::NoDTR) {
    throw InvalidArgument("decide_action: variant needs an ActionPolicy");
  }
  if (rho > config.tau_exp) return ResolutionAction::expand(argmax_patch);
  if (rho < config.tau_drop && sr_present && config.variant != Variant::NoDrop) return ResolutionAction::drop();
  return ResolutionAction::keep();
}

ActionPolicy::ActionPolicy(const BlinkConfig& config) : config_(config), rng_(config.seed) {}

ResolutionAction ActionPolicy::decide(double rho, int argmax_patch, bool sr_present, int ordinal) {
  if (!(rho >= 0.0 && rho <= 1.0)) throw InvalidArgument("ActionPolicy: rho must lie in [0, 1]");
  switch (config_.variant) {
    case Variant::NoDTR:
      // Fixed cycle over the selected layers: expand, drop, expand, ...
      if (ordinal % 2 == 0) return ResolutionAction::expand(argmax_patch);
      return sr_present ? ResolutionAction::drop() : ResolutionAction::keep();
    case Variant::NoSGS: {
      // The draw happens at every selected layer so the stream does not
      // depend on rho.
      const int random_patch = rng_.uniform_int(config_.p * config_.p);
      if (rho > config_.tau_exp) return ResolutionAction::expand(random_patch);
      if (rho < config_.tau_drop && sr_present) return ResolutionAction::drop();
      return ResolutionAction::keep();
    }
    case Variant::Full:
    case Variant::NoDrop:
      return decide_action(rho, argmax_patch, config_, sr_present);
  }
  return ResolutionAction::keep();
}

Tensor3<Real> Amplifier::apply(int layer, const Tensor3<Real>& grid) const {
  if (mode == AmplifierMode::InterpOnly) return grid;
  if (bank == nullptr) throw ConfigError("TokenSR amplifier requested without TokenSR weights");
  return bank->apply(layer, grid);
}

Tensor3<Real> extract_patch(const TokenSequence& seq, const PatchGrid& grid, int patch) {
  const Segment vis = seq.require(Role::Visual);
  if (vis.length != grid.grid_h() * grid.grid_w()) throw InvalidArgument("extract_patch: Visual segment does not match the grid");
  if (patch < 0 || patch >= grid.count()) throw InvalidArgument("expand: patch index out of range");
  const auto& idx = grid.tokens(patch);
  Tensor3<Real> out(grid.patch_h(), grid.patch_w(), seq.dim());
  for (std::size_t t = 0; t < idx.size(); ++t) {
    const int r = static_cast<int>(t) / grid.patch_w();
    const int c = static_cast<int>(t) % grid.patch_w();
    for (int k = 0; k < seq.dim(); ++k) out(r, c, k) = seq.hidden()(vis.begin + idx[t], k);
  }
  return out;
}

TokenSequence expand(const TokenSequence& seq, int layer, int patch, const PatchGrid& grid, const Amplifier& amplifier,
                     bool interpolate) {
  Tensor3<Real> block = extract_patch(seq, grid, patch);
  if (interpolate) block = bilinear_resize(block, grid.grid_h(), grid.grid_w());
  block = amplifier.apply(layer, block);
  TokenSequence out = seq;
  if (out.has(Role::SuperRes)) out.remove_segment(Role::SuperRes);
  out.insert_segment_before(Role::Text, Role::SuperRes, grid_to_rows(block));
  out.renumber_positions();
  return out;
}

TokenSequence drop(const TokenSequence& seq) {
  if (!seq.has(Role::SuperRes)) throw StateError("drop: no SuperRes block to remove");
  TokenSequence out = seq;
  out.remove_segment(Role::SuperRes);
  out.renumber_positions();
  return out;
}

std::pair<Tensor2<std::uint8_t>, std::vector<int>> update_mask_positions(TokenSequence& seq) {
  seq.renumber_positions();
  return {seq.attention_mask(), seq.positions()};
}

LayerHook copy_baseline_hook(int layer, int p, SaliencyMode mode) {
  return [layer, p, mode](const HookContext& ctx) -> std::optional<TokenSequence> {
    if (ctx.layer != layer) return std::nullopt;
    const int g = ctx.model.config().grid_size();
    const PatchGrid grid(g, g, p);
    const SaliencyReport r = scan_layer(ctx.model, ctx.layer, ctx.sequence, grid, mode);
    return expand(ctx.sequence, ctx.layer, r.argmax_patch, grid, Amplifier{AmplifierMode::InterpOnly, nullptr});
  };
}

namespace {

BlinkResult decode(const ToyMLLM& model, const PrefillResult& prefill, int max_new_tokens) {
  BlinkResult result;
  DecodeSession session = DecodeSession::from_prefill(model, prefill);
  result.tokens = greedy_generate(session, prefill.logits, kEosToken, max_new_tokens);
  for (const auto& s : prefill.layer_inputs) result.seq_lengths.push_back(s.size());
  result.attention_rows = prefill.attention_rows;
  return result;
}

}  // namespace

BlinkResult run_blink(const ToyMLLM& model, const Tensor3<float>& image, std::span<const int> query,
                      const BlinkConfig& config, const TokenSRBank* bank) {
  config.validate(model.config().n_layers);
  const Amplifier amplifier{config.amplifier, bank};
  if (config.amplifier == AmplifierMode::TokenSR) {
    if (bank == nullptr) throw ConfigError("TokenSR mode requires TokenSR weights");
    if (bank->dim() != model.config().d_model) throw ConfigError("TokenSR width differs from the backbone");
    for (int l : config.layers) {
      if (!bank->has(l)) throw ConfigError("no TokenSR weights attached to layer " + std::to_string(l));
    }
  }
  const int g = model.config().grid_size();
  const PatchGrid grid(g, g, config.p);
  ActionPolicy policy(config);
  std::vector<SaliencyReport> reports;

  const LayerHook hook = [&](const HookContext& ctx) -> std::optional<TokenSequence> {
    const auto it = std::find(config.layers.begin(), config.layers.end(), ctx.layer);
    if (it == config.layers.end()) return std::nullopt;
    const int ordinal = static_cast<int>(it - config.layers.begin());
    SaliencyReport report = scan_layer(model, ctx.layer, ctx.sequence, grid, config.saliency);
    report.action = policy.decide(report.rho, report.argmax_patch, ctx.sequence.has(Role::SuperRes), ordinal);
    std::optional<TokenSequence> out;
    if (report.action.kind == ActionKind::Expand) {
      out = expand(ctx.sequence, ctx.layer, report.action.patch, grid, amplifier, config.interpolate);
    } else if (report.action.kind == ActionKind::Drop) {
      out = drop(ctx.sequence);
    }
    reports.push_back(std::move(report));
    return out;
  };

  const PrefillResult prefill = model.forward_prefill(model.build_prompt(image, query), hook);
  BlinkResult result = decode(model, prefill, config.max_new_tokens);
  result.reports = std::move(reports);
  return result;
}

BlinkResult run_vanilla(const ToyMLLM& model, const Tensor3<float>& image, std::span<const int> query,
                        int max_new_tokens) {
  const PrefillResult prefill = model.forward_prefill(model.build_prompt(image, query));
  return decode(model, prefill, max_new_tokens);
}

std::vector<nlohmann::json> action_trace(const BlinkResult& result) {
  std::vector<nlohmann::json> out;
  for (const auto& r : result.reports) {
    out.push_back({{"layer", r.layer},
                   {"rho", r.rho},
                   {"action", action_name(r.action.kind)},
                   {"patch", r.action.kind == ActionKind::Expand ? nlohmann::json(r.action.patch) : nlohmann::json()},
                   {"seq_len", result.seq_lengths.at(static_cast<std::size_t>(r.layer))}});
  }
  return out;
}

void write_action_trace(const std::filesystem::path& path, const BlinkResult& result) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigError("cannot write action trace to " + path.string());
  for (const auto& j : action_trace(result)) out << j.dump() << '\n';
}

}  // namespace blink
