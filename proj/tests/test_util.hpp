// Copyright 2026 The Blink Authors
// SPDX-License-Identifier: Apache-2.0
//
// Shared fixtures for the unit tests.

#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "blink/model.hpp"
#include "blink/numerics.hpp"

namespace blink::testing {

// 16 px image, 4 px patches: a 4 x 4 token grid.
inline ModelConfig small_config(int layers = 3) {
  ModelConfig c;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_layers = layers;
  c.vocab_size = 32;
  c.image_size = 16;
  c.patch_pixels = 4;
  c.max_text_len = 8;
  c.n_system = 2;
  c.ffn_dim = 32;
  c.rng_seed = 11;
  return c;
}

inline Tensor3<float> random_image(Rng& rng, int size) {
  Tensor3<float> img(size, size, 3);
  for (auto& v : img.data()) v = static_cast<float>(rng.uniform());
  return img;
}

inline Mat random_mat(Rng& rng, int rows, int cols, double scale = 1.0) {
  Mat m(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) m(r, c) = static_cast<Real>(rng.normal() * scale);
  return m;
}

// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& tag) {
  std::random_device rd;
  auto p = std::filesystem::temp_directory_path() / ("blink_test_" + tag + "_" + std::to_string(rd()));
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace blink::testing
