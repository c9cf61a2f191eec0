// Copyright 2026 The Blink Authors
// SPDX-License-Identifier: Apache-2.0
//
// Synthetic visual question answering scenes with known salient regions, the
// quadrant cropping used to build amplifier teacher pairs, and a streaming
// on-disk dataset format (JSON-lines index plus a flat float32 image blob).

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "blink/numerics.hpp"

namespace blink {

inline constexpr int kNumColors = 6;
inline constexpr int kNumShapes = 4;
inline constexpr int kNumAnswerClasses = kNumColors + kNumShapes;

enum class ShapeKind : int { Square = 0, Ring = 1, Plus = 2, Cross = 3 };

// Token ids of the task language. Ids 0..3 are the reserved PAD/BOS/SYS/EOS.
class Vocabulary {
 public:
  static constexpr int kAskColor = 4;
  static constexpr int kAskShape = 5;
  static constexpr int kQuestionMark = 6;
  static constexpr int kFirstColor = 8;
  static constexpr int kFirstShape = kFirstColor + kNumColors;

  static int color_token(int color) { return kFirstColor + color; }
  static int shape_token(ShapeKind shape) { return kFirstShape + static_cast<int>(shape); }
  static bool is_answer(int token) { return token >= kFirstColor && token < kFirstShape + kNumShapes; }
  // Answer class index in [0, kNumAnswerClasses) for an answer token.
  static int answer_class(int token);
  static int answer_token(int answer_class) { return kFirstColor + answer_class; }

  static std::string decode(int token);
  // Throws InvalidArgument for unknown words.
  static int encode(std::string_view word);
};

struct ObjectDesc {
  ShapeKind shape = ShapeKind::Square;
  int color = 0;
  int x = 0;  // top-left pixel
  int y = 0;
  int size = 4;
  int quadrant = 0;  // 0 TL, 1 TR, 2 BL, 3 BR

  bool operator==(const ObjectDesc&) const = default;
};

struct SceneSample {
  std::uint64_t id = 0;
  std::uint64_t seed = 0;
  int difficulty = 0;
  Tensor3<float> image;  // image_size x image_size x 3, values in [0, 1]
  ObjectDesc target;
  std::vector<ObjectDesc> distractors;
  std::vector<int> query;
  int answer = 0;
  int gt_patch = 0;  // under the 2 x 2 patch grid, row-major

  // Patch (row-major under a p x p grid over a grid_size x grid_size token
  // grid) containing the target's centre.
  int gt_patch_for(int p, int grid_size, int image_size) const;
  bool operator==(const SceneSample&) const = default;
};

struct SceneOptions {
  int image_size = 32;
  // When >= 0, overrides the difficulty-derived distractor count (max 3).
  int force_distractors = -1;
  // Object corners snap to multiples of this many pixels inside a quadrant.
  int position_step = 4;
};

// Deterministic in (seed, difficulty, options). Difficulty in [0, 3] sets the
// maximum distractor count, object size range and background noise level.
SceneSample generate_scene(std::uint64_t seed, int difficulty, const SceneOptions& options = {});

enum class Quadrant : int { TL = 0, TR = 1, BL = 2, BR = 3 };

const char* quadrant_name(Quadrant q);

struct CropSample {
  Quadrant quadrant = Quadrant::TL;
  Tensor3<float> raw;   // the quadrant's pixels, (S/2) x (S/2) x 3
  Tensor3<float> crop;  // raw upscaled to S x S
  // Token rows [row_begin, row_end) and columns [col_begin, col_end) of the
  // full image's token grid covered by this quadrant.
  int row_begin = 0, row_end = 0, col_begin = 0, col_end = 0;

  std::vector<int> token_indices(int grid_size) const;
};

// Splits an S x S image into TL, TR, BL, BR quadrants, each upscaled back to
// S x S with bilinear resampling. Throws InvalidArgument for odd sizes.
std::array<CropSample, 4> make_crops(const Tensor3<float>& image, int grid_size);

inline constexpr std::string_view kDatasetMagic = "BLINKDATA1";

nlohmann::json sample_to_json(const SceneSample& s, std::uint64_t blob_offset);

class DatasetWriter {
 public:
  explicit DatasetWriter(const std::filesystem::path& dir);
  void write(const SceneSample& sample);
  void close();
  std::size_t count() const { return count_; }

 private:
  std::filesystem::path dir_;
  std::ofstream index_;
  std::ofstream blob_;
  std::uint64_t blob_offset_ = 0;
  std::size_t count_ = 0;
  int height_ = -1, width_ = -1, channels_ = -1;
};

// Streams samples one at a time; memory use does not depend on dataset size.
class DatasetReader {
 public:
  explicit DatasetReader(const std::filesystem::path& dir);
  std::optional<SceneSample> next();
  std::size_t buffered_bytes() const { return line_.capacity() + pixels_.capacity(); }

 private:
  std::ifstream index_;
  std::ifstream blob_;
  std::uint64_t blob_size_ = 0;
  std::uint64_t index_offset_ = 0;
  int height_ = 0, width_ = 0, channels_ = 0;
  std::string line_;
  std::vector<char> pixels_;
};

void write_dataset(const std::filesystem::path& dir, const std::vector<SceneSample>& samples);
std::vector<SceneSample> read_dataset(const std::filesystem::path& dir);

}  // namespace blink
