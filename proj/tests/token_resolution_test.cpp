// Copyright 2026 The Blink Authors
// SPDX-License-Identifier: Apache-2.0

#include <fstream>

#include <gtest/gtest.h>

#include "blink/errors.hpp"
#include "blink/token_resolution.hpp"
#include "test_util.hpp"

namespace blink {
namespace {

using testing::random_image;
using testing::random_mat;
using testing::small_config;

TokenSequence small_prompt(const ToyMLLM& m, std::uint64_t seed) {
  Rng rng(seed);
  const int query[] = {4, 9, 6};
  return m.build_prompt(random_image(rng, m.config().image_size), query);
}

TEST(DecideAction, PaperThresholdExamples) {
  BlinkConfig c;
  EXPECT_EQ(decide_action(0.60, 2, c, false), ResolutionAction::expand(2));
  EXPECT_EQ(decide_action(0.60, 2, c, true), ResolutionAction::expand(2));
  EXPECT_EQ(decide_action(0.45, 2, c, true), ResolutionAction::keep());
  EXPECT_EQ(decide_action(0.30, 2, c, true), ResolutionAction::drop());
  EXPECT_EQ(decide_action(0.30, 2, c, false), ResolutionAction::keep());
  // Boundaries are strict.
  EXPECT_EQ(decide_action(0.5, 2, c, true), ResolutionAction::keep());
  EXPECT_EQ(decide_action(0.4, 2, c, true), ResolutionAction::keep());
  EXPECT_THROW(decide_action(1.5, 0, c, false), InvalidArgument);
  EXPECT_THROW(decide_action(-0.1, 0, c, false), InvalidArgument);
  c.variant = Variant::NoDrop;
  EXPECT_EQ(decide_action(0.30, 2, c, true), ResolutionAction::keep());
}

TEST(ActionPolicy, NoDtrFollowsFixedCycle) {
  BlinkConfig c;
  c.variant = Variant::NoDTR;
  c.layers = {2, 3, 4, 5};
  ActionPolicy policy(c);
  for (double rho : {0.25, 0.45, 0.9}) {
    EXPECT_EQ(policy.decide(rho, 1, false, 0).kind, ActionKind::Expand);
    EXPECT_EQ(policy.decide(rho, 1, true, 1).kind, ActionKind::Drop);
    EXPECT_EQ(policy.decide(rho, 1, false, 1).kind, ActionKind::Keep);
    EXPECT_EQ(policy.decide(rho, 1, false, 2).kind, ActionKind::Expand);
  }
}

TEST(ActionPolicy, NoSgsIsSeededAndUsesRandomPatches) {
  BlinkConfig c;
  c.variant = Variant::NoSGS;
  c.seed = 77;
  ActionPolicy a(c), b(c);
  std::set<int> patches;
  for (int i = 0; i < 40; ++i) {
    const auto x = a.decide(0.9, 0, false, i);
    EXPECT_EQ(x, b.decide(0.9, 0, false, i));
    ASSERT_EQ(x.kind, ActionKind::Expand);
    patches.insert(x.patch);
  }
  EXPECT_GT(patches.size(), 1u);
}

TEST(Thresholds, ScaledExactly) {
  EXPECT_EQ(scale_threshold(Rational(1, 2), 3), Rational(2, 9));
  EXPECT_EQ(scale_threshold(Rational(2, 5), 3), Rational(8, 45));
  EXPECT_EQ(scale_threshold(Rational(1, 2), 4), Rational(1, 8));
  EXPECT_EQ(scale_threshold(Rational(2, 5), 4), Rational(1, 10));
  EXPECT_EQ(scale_threshold(Rational(1, 2), 2), Rational(1, 2));
  EXPECT_EQ(parse_decimal("0.4"), Rational(2, 5));
  EXPECT_EQ(parse_decimal("1"), Rational(1));
  EXPECT_EQ(parse_decimal("0.125"), Rational(1, 8));
  EXPECT_THROW(parse_decimal("abc"), ConfigError);
  BlinkConfig c;
  c.set_patches(3);
  EXPECT_DOUBLE_EQ(c.tau_exp, 2.0 / 9.0);
  EXPECT_DOUBLE_EQ(c.tau_drop, 8.0 / 45.0);
}

TEST(BlinkConfig, Validation) {
  BlinkConfig c;
  EXPECT_NO_THROW(c.validate(8));
  c.tau_drop = 0.6;
  EXPECT_THROW(c.validate(8), ConfigError);
  c = BlinkConfig{};
  c.layers = {3, 9};
  EXPECT_THROW(c.validate(8), ConfigError);
  c.layers = {4, 3};
  EXPECT_THROW(c.validate(8), ConfigError);
}

TEST(Expand, LayoutLengthAndPositions) {
  const ToyMLLM m = ToyMLLM::random(small_config());
  const auto seq = small_prompt(m, 1);
  const PatchGrid grid(4, 4, 2);
  const auto out = expand(seq, 0, 3, grid, Amplifier{});
  EXPECT_EQ(out.size(), seq.size() + 16);
  EXPECT_EQ(out.roles(), [] {
    std::vector<Role> r(2, Role::System);
    r.insert(r.end(), 16, Role::Visual);
    r.insert(r.end(), 16, Role::SuperRes);
    r.insert(r.end(), 3, Role::Text);
    return r;
  }());
  // First Text position = n_sys + H*W + H*W.
  EXPECT_EQ(out.positions()[static_cast<std::size_t>(out.require(Role::Text).begin)], 2 + 16 + 16);
  EXPECT_THROW(expand(seq, 0, 4, grid, Amplifier{}), InvalidArgument);
}

TEST(Expand, WholeGridInterpIsBitwiseCopy) {
  const ToyMLLM m = ToyMLLM::random(small_config());
  const auto seq = small_prompt(m, 2);
  const auto out = expand(seq, 0, 0, PatchGrid(4, 4, 1), Amplifier{});
  const Segment v = out.require(Role::Visual), s = out.require(Role::SuperRes);
  EXPECT_EQ(out.hidden().middleRows(s.begin, s.length), out.hidden().middleRows(v.begin, v.length));
}

TEST(Expand, MatchesScalarBilinearOracle) {
  ModelConfig c = small_config();
  c.image_size = 32;  // 8 x 8 grid, 4 x 4 patches
  const ToyMLLM m = ToyMLLM::random(c);
  const auto seq = small_prompt(m, 3);
  const PatchGrid grid(8, 8, 2);
  const int patch = 2;  // bottom-left
  const auto out = expand(seq, 0, patch, grid, Amplifier{});
  const Segment v = seq.require(Role::Visual), s = out.require(Role::SuperRes);
  auto src = [&](int y, int x, int k) { return static_cast<double>(seq.hidden()(v.begin + (4 + y) * 8 + x, k)); };
  for (int i = 0; i < 8; ++i)
    for (int j = 0; j < 8; ++j) {
      const double sy = i * 3.0 / 7.0, sx = j * 3.0 / 7.0;
      const int y0 = static_cast<int>(sy), x0 = static_cast<int>(sx);
      const int y1 = std::min(y0 + 1, 3), x1 = std::min(x0 + 1, 3);
      const double wy = sy - y0, wx = sx - x0;
      for (int k = 0; k < c.d_model; ++k) {
        const double e = (1 - wy) * (1 - wx) * src(y0, x0, k) + (1 - wy) * wx * src(y0, x1, k) +
                         wy * (1 - wx) * src(y1, x0, k) + wy * wx * src(y1, x1, k);
        EXPECT_NEAR(out.hidden()(s.begin + i * 8 + j, k), e, 1e-5);
      }
    }
}

TEST(Expand, ReplacesExistingBlock) {
  const ToyMLLM m = ToyMLLM::random(small_config());
  const auto seq = small_prompt(m, 4);
  const PatchGrid grid(4, 4, 2);
  const auto once = expand(seq, 0, 0, grid, Amplifier{});
  const auto twice = expand(once, 0, 1, grid, Amplifier{});
  EXPECT_EQ(twice.size(), once.size());
  EXPECT_EQ(twice.hidden(), expand(seq, 0, 1, grid, Amplifier{}).hidden());
}

TEST(Expand, WithoutInterpolationInsertsRawPatch) {
  const ToyMLLM m = ToyMLLM::random(small_config());
  const auto seq = small_prompt(m, 5);
  const auto out = expand(seq, 0, 1, PatchGrid(4, 4, 2), Amplifier{}, false);
  EXPECT_EQ(out.require(Role::SuperRes).length, 4);
  const Segment v = seq.require(Role::Visual), s = out.require(Role::SuperRes);
  const int tokens[] = {2, 3, 6, 7};
  for (int i = 0; i < 4; ++i) EXPECT_EQ(out.hidden().row(s.begin + i), seq.hidden().row(v.begin + tokens[i]));
}

TEST(Drop, RestoresLayout) {
  const ToyMLLM m = ToyMLLM::random(small_config());
  const auto seq = small_prompt(m, 6);
  const auto ex = expand(seq, 0, 2, PatchGrid(4, 4, 2), Amplifier{});
  const auto back = drop(ex);
  EXPECT_EQ(back.segments(), seq.segments());
  EXPECT_EQ(back.positions(), seq.positions());
  EXPECT_EQ(back.hidden(), seq.hidden());
  EXPECT_THROW(drop(seq), StateError);
}

TEST(UpdateMaskPositions, Staircase) {
  const ToyMLLM m = ToyMLLM::random(small_config());
  auto seq = expand(small_prompt(m, 7), 0, 0, PatchGrid(4, 4, 2), Amplifier{});
  const auto [mask, pos] = update_mask_positions(seq);
  for (int i = 0; i < seq.size(); ++i) {
    int row = 0;
    for (int j = 0; j < seq.size(); ++j) row += mask(i, j);
    EXPECT_EQ(row, i + 1);
    EXPECT_EQ(pos[static_cast<std::size_t>(i)], i);
  }
}

TEST(RunBlink, NeverExpandingEqualsVanilla) {
  const ToyMLLM m = ToyMLLM::random(small_config(4));
  Rng rng(8);
  const auto image = random_image(rng, 16);
  const int query[] = {4, 9, 6};
  BlinkConfig c;
  c.layers = {1, 2};
  c.tau_exp = 1.1;
  c.amplifier = AmplifierMode::InterpOnly;
  const auto b = run_blink(m, image, query, c);
  const auto v = run_vanilla(m, image, query);
  EXPECT_EQ(b.tokens, v.tokens);
  EXPECT_EQ(b.attention_rows, v.attention_rows);
  EXPECT_EQ(b.reports.size(), 2u);
}

TEST(RunBlink, TraceStateMachineAndLengthLedger) {
  const ToyMLLM m = ToyMLLM::random(small_config(6));
  Rng rng(9);
  const int query[] = {4, 9, 6};
  BlinkConfig c;
  c.layers = {1, 2, 3, 4};
  c.amplifier = AmplifierMode::InterpOnly;
  for (Variant var : {Variant::Full, Variant::NoDTR, Variant::NoSGS, Variant::NoDrop}) {
    c.variant = var;
    for (int t = 0; t < 10; ++t) {
      c.tau_exp = 0.25 + 0.05 * t;
      c.tau_drop = c.tau_exp - 0.1;
      const auto r = run_blink(m, random_image(rng, 16), query, c);
      ASSERT_EQ(r.reports.size(), 4u);
      bool alive = false;
      const int base = r.seq_lengths[0];
      for (int l = 0; l < 6; ++l) {
        for (const auto& rep : r.reports) {
          if (rep.layer != l) continue;
          if (rep.action.kind == ActionKind::Drop) {
            EXPECT_TRUE(alive);
            alive = false;
          }
          if (rep.action.kind == ActionKind::Expand) alive = true;
        }
        EXPECT_EQ(r.seq_lengths[static_cast<std::size_t>(l)], base + (alive ? 16 : 0));
      }
      const auto trace = action_trace(r);
      EXPECT_EQ(trace.size(), 4u);
    }
  }
}

TEST(RunBlink, TokenSrModeNeedsWeights) {
  const ToyMLLM m = ToyMLLM::random(small_config(4));
  Rng rng(10);
  const int query[] = {4, 9, 6};
  BlinkConfig c;
  c.layers = {1, 2};
  EXPECT_THROW(run_blink(m, random_image(rng, 16), query, c, nullptr), ConfigError);
  const int only_one[] = {1};
  const auto bank = TokenSRBank::random(16, only_one, 0, m.weights().digest());
  EXPECT_THROW(run_blink(m, random_image(rng, 16), query, c, &bank), ConfigError);
}

TEST(RunBlink, InterpEqualsIdentityForcedTokenSr) {
  const ToyMLLM m = ToyMLLM::random(small_config(4));
  const int layers[] = {1, 2};
  auto bank = TokenSRBank::random(16, layers, 3, m.weights().digest());
  bank.force_identity(true);
  Rng rng(11);
  const int query[] = {4, 9, 6};
  BlinkConfig interp;
  interp.layers = {1, 2};
  interp.tau_exp = 0.2;
  interp.tau_drop = 0.1;
  interp.amplifier = AmplifierMode::InterpOnly;
  BlinkConfig tsr = interp;
  tsr.amplifier = AmplifierMode::TokenSR;
  for (int t = 0; t < 5; ++t) {
    const auto image = random_image(rng, 16);
    const auto a = run_blink(m, image, query, interp);
    const auto b = run_blink(m, image, query, tsr, &bank);
    EXPECT_EQ(a.tokens, b.tokens);
    EXPECT_EQ(a.attention_rows, b.attention_rows);
  }
}

TEST(CopyBaseline, MatchesForcedSingleExpansion) {
  const ToyMLLM m = ToyMLLM::random(small_config(4));
  const auto prompt = small_prompt(m, 12);
  const auto copy = m.forward_prefill(prompt, copy_baseline_hook(2, 2));
  BlinkConfig c;
  c.layers = {2};
  c.tau_exp = 0.0001;
  c.tau_drop = 0.0;
  c.variant = Variant::NoDrop;
  c.amplifier = AmplifierMode::InterpOnly;
  Rng rng(12);
  const int query[] = {4, 9, 6};
  const auto blink = run_blink(m, random_image(rng, 16), query, c);
  EXPECT_EQ(copy.attention_rows, blink.attention_rows);
  for (int l = 0; l < 4; ++l) {
    EXPECT_EQ(copy.layer_inputs[static_cast<std::size_t>(l)].size(), prompt.size() + (l >= 2 ? 16 : 0));
  }
}

TEST(ActionTrace, JsonLines) {
  const ToyMLLM m = ToyMLLM::random(small_config(4));
  Rng rng(13);
  const int query[] = {4, 9, 6};
  BlinkConfig c;
  c.layers = {1, 2};
  c.amplifier = AmplifierMode::InterpOnly;
  const auto r = run_blink(m, random_image(rng, 16), query, c);
  const auto dir = testing::temp_dir("actions");
  write_action_trace(dir / "a.jsonl", r);
  std::ifstream in(dir / "a.jsonl");
  int n = 0;
  for (std::string line; std::getline(in, line); ++n) {
    const auto j = nlohmann::json::parse(line);
    for (const char* k : {"layer", "rho", "action", "patch", "seq_len"}) EXPECT_TRUE(j.contains(k)) << k;
  }
  EXPECT_EQ(n, 2);
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace blink
