// Copyright 2026 The Blink Authors
// SPDX-License-Identifier: Apache-2.0

#include <fstream>
#include <numeric>

#include <gtest/gtest.h>

#include "blink/checkpoint.hpp"
#include "blink/errors.hpp"
#include "blink/model.hpp"
#include "test_util.hpp"

namespace blink {
namespace {

using testing::random_image;
using testing::random_mat;
using testing::small_config;

TEST(ModelConfig, Validation) {
  ModelConfig c = small_config();
  EXPECT_NO_THROW(c.validate());
  c.n_heads = 3;
  EXPECT_THROW(c.validate(), InvalidArgument);
  c = small_config();
  c.image_size = 18;
  EXPECT_THROW(c.validate(), InvalidArgument);
  EXPECT_EQ(ModelConfig{}.n_visual(), 64);
  EXPECT_EQ(ModelConfig{}.grid_size(), 8);
}

TEST(EncodeImage, ZeroImageZeroBias) {
  ToyMLLM m = ToyMLLM::random(small_config());
  m.mutable_weights().patch_bias.setZero();
  const Mat t = m.encode_image(Tensor3<float>(16, 16, 3));
  EXPECT_EQ(t.rows(), 16);
  EXPECT_EQ(t.cwiseAbs().maxCoeff(), 0);
}

TEST(EncodeImage, Locality) {
  const ToyMLLM m = ToyMLLM::random(small_config());
  Rng rng(1);
  Tensor3<float> img = random_image(rng, 16);
  const Mat a = m.encode_image(img);
  // Pixel inside token (0, 1).
  img(2, 5, 1) += 0.5f;
  const Mat b = m.encode_image(img);
  for (int r = 0; r < 16; ++r) {
    if (r == 1) {
      EXPECT_NE(a.row(r), b.row(r));
    } else {
      EXPECT_EQ(a.row(r), b.row(r));
    }
  }
}

TEST(EncodeImage, MatchesPerPatchOracle) {
  const ToyMLLM m = ToyMLLM::random(small_config());
  Rng rng(2);
  const Tensor3<float> img = random_image(rng, 16);
  const Mat t = m.encode_image(img);
  const auto& w = m.weights();
  for (int gy = 0; gy < 4; ++gy)
    for (int gx = 0; gx < 4; ++gx)
      for (int o = 0; o < 16; ++o) {
        double acc = w.patch_bias(0, o);
        int col = 0;
        for (int py = 0; py < 4; ++py)
          for (int px = 0; px < 4; ++px)
            for (int c = 0; c < 3; ++c) acc += img(gy * 4 + py, gx * 4 + px, c) * w.patch_proj(col++, o);
        EXPECT_NEAR(t(gy * 4 + gx, o), acc, 1e-4);
      }
  EXPECT_THROW(m.encode_image(Tensor3<float>(8, 8, 3)), InvalidArgument);
}

TEST(TokenSequence, LayoutAndValidation) {
  Rng rng(3);
  auto seq = TokenSequence::from_parts({{Role::System, random_mat(rng, 2, 4)},
                                        {Role::Visual, random_mat(rng, 4, 4)},
                                        {Role::Text, random_mat(rng, 3, 4)}});
  EXPECT_EQ(seq.size(), 9);
  EXPECT_EQ(seq.last_text_index(), 8);
  std::vector<int> expect(9);
  std::iota(expect.begin(), expect.end(), 0);
  EXPECT_EQ(seq.positions(), expect);

  seq.insert_segment_before(Role::Text, Role::SuperRes, random_mat(rng, 4, 4));
  seq.renumber_positions();
  EXPECT_NO_THROW(seq.validate());
  EXPECT_EQ(seq.roles()[6], Role::SuperRes);
  EXPECT_EQ(seq.require(Role::Text).begin, 10);

  seq.remove_segment(Role::SuperRes);
  seq.renumber_positions();
  EXPECT_EQ(seq.size(), 9);
  EXPECT_FALSE(seq.has(Role::SuperRes));
  EXPECT_THROW(seq.require(Role::SuperRes), StateError);

  auto bad = seq;
  bad.positions()[3] = bad.positions()[2];
  EXPECT_THROW(bad.validate(), PipelineIntegrityError);

  const auto mask = seq.attention_mask();
  for (int i = 0; i < 9; ++i)
    for (int j = 0; j < 9; ++j) EXPECT_EQ(mask(i, j), j <= i ? 1 : 0);
}

TEST(TokenSequence, OutOfOrderSegmentsRejected) {
  Rng rng(4);
  EXPECT_THROW(TokenSequence::from_parts({{Role::Visual, random_mat(rng, 2, 4)}, {Role::System, random_mat(rng, 2, 4)}}),
               PipelineIntegrityError);
}

TEST(ForwardPrefill, IdentityHookIsBitwiseTransparent) {
  const ToyMLLM m = ToyMLLM::random(small_config());
  Rng rng(5);
  const int query[] = {4, 9, 6};
  const auto prompt = m.build_prompt(random_image(rng, 16), query);
  const auto plain = m.forward_prefill(prompt);
  const auto hooked = m.forward_prefill(prompt, [](const HookContext& ctx) -> std::optional<TokenSequence> {
    return ctx.sequence;
  });
  EXPECT_EQ(plain.logits, hooked.logits);
  EXPECT_EQ(plain.output.hidden(), hooked.output.hidden());
  const auto nullhook = m.forward_prefill(prompt, [](const HookContext&) { return std::optional<TokenSequence>{}; });
  EXPECT_EQ(plain.logits, nullhook.logits);
}

TEST(ForwardPrefill, AttentionRowsNormalized) {
  const ToyMLLM m = ToyMLLM::random(small_config());
  Rng rng(6);
  const int query[] = {5, 12, 6};
  const auto r = m.forward_prefill(m.build_prompt(random_image(rng, 16), query));
  ASSERT_EQ(r.attention_rows.size(), 3u);
  for (const auto& row : r.attention_rows) {
    EXPECT_NEAR(std::accumulate(row.begin(), row.end(), 0.0), 1.0, 1e-6);
  }
}

TEST(ForwardPrefill, InsertionChangesLaterLayerLengthsOnly) {
  const ToyMLLM m = ToyMLLM::random(small_config(4));
  Rng rng(7);
  const int query[] = {4, 9, 6};
  const auto prompt = m.build_prompt(random_image(rng, 16), query);
  const Mat extra = random_mat(rng, 16, 16);
  const auto r = m.forward_prefill(prompt, [&](const HookContext& ctx) -> std::optional<TokenSequence> {
    if (ctx.layer != 2) return std::nullopt;
    TokenSequence s = ctx.sequence;
    s.insert_segment_before(Role::Text, Role::SuperRes, extra);
    s.renumber_positions();
    return s;
  });
  for (int l = 0; l < 4; ++l) {
    EXPECT_EQ(r.layer_inputs[static_cast<std::size_t>(l)].size(), l < 2 ? prompt.size() : prompt.size() + 16);
    EXPECT_EQ(r.caches[static_cast<std::size_t>(l)].keys.rows(), l < 2 ? prompt.size() : prompt.size() + 16);
  }
}

TEST(ForwardPrefill, BrokenHookRaisesIntegrityError) {
  const ToyMLLM m = ToyMLLM::random(small_config());
  Rng rng(8);
  const int query[] = {4, 9, 6};
  const auto prompt = m.build_prompt(random_image(rng, 16), query);
  EXPECT_THROW(m.forward_prefill(prompt,
                                 [](const HookContext& ctx) -> std::optional<TokenSequence> {
                                   TokenSequence s = ctx.sequence;
                                   s.positions()[0] = 50;
                                   return s;
                                 }),
               PipelineIntegrityError);
}

TEST(ForwardPrefill, Causality) {
  const ToyMLLM m = ToyMLLM::random(small_config());
  Rng rng(9);
  const int query[] = {4, 9, 6};
  auto prompt = m.build_prompt(random_image(rng, 16), query);
  const auto base = m.forward_prefill(prompt);
  // Zeroing the last token leaves every earlier output row untouched.
  prompt.hidden().row(prompt.size() - 1).setZero();
  const auto changed = m.forward_prefill(prompt);
  const int n = prompt.size();
  EXPECT_EQ(base.output.hidden().topRows(n - 1), changed.output.hidden().topRows(n - 1));
  EXPECT_NE(base.logits, changed.logits);
}

TEST(Decode, MatchesFullRecomputation) {
  const ToyMLLM m = ToyMLLM::random(small_config());
  Rng rng(10);
  const int query[] = {4, 9, 6};
  const auto image = random_image(rng, 16);
  const auto prompt = m.build_prompt(image, query);
  const auto pre = m.forward_prefill(prompt);
  auto session = DecodeSession::from_prefill(m, pre);
  const std::vector<int> fed = {12, 7, 20};
  for (std::size_t i = 0; i < fed.size(); ++i) {
    const RowVec step_logits = session.step(fed[i]);
    const std::vector<int> gen(fed.begin(), fed.begin() + static_cast<long>(i) + 1);
    const auto sys = m.system_tokens();
    const auto full = m.forward_prefill(TokenSequence::from_parts({{Role::System, m.embed_tokens(sys)},
                                                                   {Role::Visual, m.encode_image(image)},
                                                                   {Role::Text, m.embed_tokens(query)},
                                                                   {Role::Generated, m.embed_tokens(gen)}}));
    for (int v = 0; v < step_logits.cols(); ++v) EXPECT_NEAR(step_logits(v), full.logits(v), 1e-5);
  }
}

TEST(Decode, CacheLengthsAfterInsertion) {
  const ToyMLLM m = ToyMLLM::random(small_config(4));
  Rng rng(11);
  const int query[] = {4, 9, 6};
  const Mat extra = random_mat(rng, 16, 16);
  const auto pre = m.forward_prefill(m.build_prompt(random_image(rng, 16), query),
                                     [&](const HookContext& ctx) -> std::optional<TokenSequence> {
                                       if (ctx.layer != 1) return std::nullopt;
                                       TokenSequence s = ctx.sequence;
                                       s.insert_segment_before(Role::Text, Role::SuperRes, extra);
                                       s.renumber_positions();
                                       return s;
                                     });
  auto session = DecodeSession::from_prefill(m, pre);
  session.step(12);
  const auto& c = session.caches();
  for (int l = 1; l < 4; ++l) EXPECT_EQ(c[static_cast<std::size_t>(l)].keys.rows(), c[0].keys.rows() + 16);
  // Positions continue from each layer's own maximum.
  EXPECT_EQ(c[1].max_position, c[0].max_position + 16);
}

TEST(Decode, BeforePrefillIsStateError) {
  DecodeSession s;
  EXPECT_THROW(s.step(3), StateError);
}

TEST(Decode, GreedyIsReproducible) {
  const ToyMLLM m = ToyMLLM::random(small_config());
  Rng rng(12);
  const int query[] = {4, 9, 6};
  const auto prompt = m.build_prompt(random_image(rng, 16), query);
  std::vector<std::vector<int>> runs;
  for (int i = 0; i < 2; ++i) {
    const auto pre = m.forward_prefill(prompt);
    auto s = DecodeSession::from_prefill(m, pre);
    runs.push_back(greedy_generate(s, pre.logits, kEosToken, 4));
  }
  EXPECT_EQ(runs[0], runs[1]);
}

TEST(Checkpoint, ModelRoundTrip) {
  const ToyMLLM m = ToyMLLM::random(small_config());
  const auto dir = testing::temp_dir("ckpt");
  m.save(dir / "m.ckpt");
  const ToyMLLM back = ToyMLLM::load(dir / "m.ckpt");
  EXPECT_EQ(back.weights().digest(), m.weights().digest());
  EXPECT_EQ(back.config().to_json(), m.config().to_json());
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, ArchiveRoundTripAndErrors) {
  TensorArchive a;
  const std::vector<float> f = {1.5f, -2.0f, 3.25f, 0.0f};
  const std::vector<double> d = {1e-300, 2.0};
  a.put("f", {2, 2}, f);
  a.put("d", {2}, d);
  a.meta()["kind"] = "test";
  const auto dir = testing::temp_dir("archive");
  a.save(dir / "a.ckpt");
  const auto b = TensorArchive::load(dir / "a.ckpt");
  EXPECT_EQ(b.get_f32("f", {2, 2}), f);
  EXPECT_EQ(b.get_f64("d"), d);
  EXPECT_EQ(b.meta()["kind"], "test");
  EXPECT_EQ(b.digest(), a.digest());
  EXPECT_THROW(b.get_f32("f", {4}), ConfigError);
  EXPECT_THROW(b.get_f32("missing"), ConfigError);
  EXPECT_THROW(a.put("bad", {3}, f), InvalidArgument);

  // Magic check.
  {
    std::fstream io(dir / "a.ckpt", std::ios::in | std::ios::out | std::ios::binary);
    io.seekp(0);
    io.put('X');
  }
  EXPECT_THROW(TensorArchive::load(dir / "a.ckpt"), FormatError);
  // Truncation.
  a.save(dir / "t.ckpt");
  std::filesystem::resize_file(dir / "t.ckpt", std::filesystem::file_size(dir / "t.ckpt") - 3);
  EXPECT_THROW(TensorArchive::load(dir / "t.ckpt"), FormatError);
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, Sha256KnownVector) {
  EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

}  // namespace
}  // namespace blink
