// Copyright 2026 The Blink Authors
// SPDX-License-Identifier: Apache-2.0

#include <fstream>
#include <map>

#include <gtest/gtest.h>

#include "blink/data.hpp"
#include "blink/errors.hpp"
#include "test_util.hpp"

namespace blink {
namespace {

TEST(Vocabulary, RoundTrip) {
  for (int t = 0; t < Vocabulary::kFirstShape + kNumShapes; ++t) EXPECT_EQ(Vocabulary::encode(Vocabulary::decode(t)), t);
  for (int c = 0; c < kNumAnswerClasses; ++c) EXPECT_EQ(Vocabulary::answer_class(Vocabulary::answer_token(c)), c);
  EXPECT_THROW(Vocabulary::answer_class(Vocabulary::kAskColor), InvalidArgument);
  EXPECT_THROW(Vocabulary::encode("giraffe"), InvalidArgument);
}

TEST(GenerateScene, Deterministic) {
  for (int d = 0; d < 4; ++d) EXPECT_EQ(generate_scene(42, d), generate_scene(42, d));
  EXPECT_NE(generate_scene(42, 1).image, generate_scene(43, 1).image);
  EXPECT_THROW(generate_scene(1, 4), InvalidArgument);
}

TEST(GenerateScene, TargetInsideGroundTruthPatch) {
  for (int i = 0; i < 500; ++i) {
    const auto s = generate_scene(static_cast<std::uint64_t>(i), i % 4);
    const int half = 16;
    EXPECT_EQ(s.gt_patch, (s.target.y / half) * 2 + s.target.x / half);
    EXPECT_EQ((s.target.y + s.target.size - 1) / half, s.target.y / half);
    EXPECT_EQ((s.target.x + s.target.size - 1) / half, s.target.x / half);
    EXPECT_EQ(s.gt_patch_for(2, 8, 32), s.gt_patch);
    EXPECT_TRUE(Vocabulary::is_answer(s.answer));
    EXPECT_LE(s.distractors.size(), 3u);
    for (const auto& o : s.distractors) EXPECT_NE(o.quadrant, s.target.quadrant);
    for (float v : s.image.data()) {
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 1.0f);
    }
  }
}

TEST(GenerateScene, QueriedAttributeIsUnique) {
  for (int i = 0; i < 500; ++i) {
    const auto s = generate_scene(static_cast<std::uint64_t>(i), 3);
    const bool ask_color = s.query[0] == Vocabulary::kAskColor;
    for (const auto& o : s.distractors) {
      if (ask_color) {
        EXPECT_NE(o.shape, s.target.shape);
      } else {
        EXPECT_NE(o.color, s.target.color);
      }
    }
  }
}

TEST(GenerateScene, ClassBalanced) {
  std::map<int, int> hist;
  const int n = 10000;
  for (int i = 0; i < n; ++i) hist[generate_scene(static_cast<std::uint64_t>(i), i % 4).answer] += 1;
  ASSERT_EQ(hist.size(), static_cast<std::size_t>(kNumAnswerClasses));
  for (const auto& [token, count] : hist) {
    EXPECT_NEAR(count, n / 10.0, n / 10.0 * 0.1) << Vocabulary::decode(token);
  }
}

TEST(MakeCrops, ExactTilingAndTokenRanges) {
  const auto s = generate_scene(7, 2);
  const auto crops = make_crops(s.image, 8);
  Tensor3<float> rebuilt(32, 32, 3, -1.0f);
  for (int q = 0; q < 4; ++q) {
    const auto& c = crops[static_cast<std::size_t>(q)];
    EXPECT_EQ(static_cast<int>(c.quadrant), q);
    ASSERT_EQ(c.raw.height(), 16);
    ASSERT_EQ(c.crop.height(), 32);
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x)
        for (int k = 0; k < 3; ++k) {
          float& dst = rebuilt((q / 2) * 16 + y, (q % 2) * 16 + x, k);
          EXPECT_EQ(dst, -1.0f);  // no overlap
          dst = c.raw(y, x, k);
        }
    EXPECT_EQ(c.token_indices(8).size(), 16u);
  }
  EXPECT_EQ(rebuilt, s.image);
  const auto tl = crops[0].token_indices(8);
  EXPECT_EQ(tl, (std::vector<int>{0, 1, 2, 3, 8, 9, 10, 11, 16, 17, 18, 19, 24, 25, 26, 27}));
  EXPECT_THROW(make_crops(Tensor3<float>(31, 31, 3), 8), InvalidArgument);
}

TEST(MakeCrops, ConstantQuadrantStaysConstant) {
  Tensor3<float> img(32, 32, 3, 0.25f);
  for (const auto& c : make_crops(img, 8))
    for (float v : c.crop.data()) EXPECT_EQ(v, 0.25f);
}

TEST(Dataset, RoundTripIsBitwise) {
  std::vector<SceneSample> samples;
  for (int i = 0; i < 25; ++i) {
    auto s = generate_scene(static_cast<std::uint64_t>(i), i % 4);
    s.id = static_cast<std::uint64_t>(i);
    samples.push_back(s);
  }
  const auto dir = testing::temp_dir("dataset");
  write_dataset(dir, samples);
  EXPECT_EQ(read_dataset(dir), samples);
  std::ifstream blob(dir / "images.bin", std::ios::binary);
  char magic[10];
  blob.read(magic, 10);
  EXPECT_EQ(std::string(magic, 10), "BLINKDATA1");
  std::filesystem::remove_all(dir);
}

TEST(Dataset, TruncatedBlobAndCorruptHeaderRejected) {
  std::vector<SceneSample> samples = {generate_scene(1, 0), generate_scene(2, 1)};
  const auto dir = testing::temp_dir("trunc");
  write_dataset(dir, samples);
  std::filesystem::resize_file(dir / "images.bin", std::filesystem::file_size(dir / "images.bin") - 100);
  try {
    read_dataset(dir);
    FAIL() << "truncated blob accepted";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("offset"), std::string::npos) << e.what();
  }
  write_dataset(dir, samples);
  {
    std::fstream io(dir / "images.bin", std::ios::in | std::ios::out | std::ios::binary);
    io.put('Z');
  }
  EXPECT_THROW(read_dataset(dir), FormatError);
  write_dataset(dir, samples);
  {
    std::ofstream idx(dir / "index.jsonl", std::ios::app);
    idx << "{not json\n";
  }
  EXPECT_THROW(read_dataset(dir), FormatError);
  std::filesystem::remove_all(dir);
}

TEST(Dataset, StreamingMemoryIsBounded) {
  const auto dir = testing::temp_dir("stream");
  {
    DatasetWriter w(dir);
    const auto s = generate_scene(5, 1);
    for (int i = 0; i < 10000; ++i) w.write(s);
    w.close();
  }
  DatasetReader r(dir);
  std::size_t peak = 0, n = 0;
  while (auto s = r.next()) {
    peak = std::max(peak, r.buffered_bytes());
    ++n;
  }
  EXPECT_EQ(n, 10000u);
  // One image of 32 x 32 x 3 floats plus one index line.
  EXPECT_LT(peak, 32u * 32 * 3 * 4 + 4096);
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace blink
