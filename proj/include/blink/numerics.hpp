// Copyright 2026 The Blink Authors
// SPDX-License-Identifier: Apache-2.0
//
// Small deterministic tensor kernels shared by every module: softmax,
// corner-aligned bilinear resampling, same-padding 2-D convolution (with its
// backward pass), KL divergence and a central-difference gradient oracle.
//
// All kernels accumulate in a fixed row-major, left-to-right order so that
// repeated calls on equal inputs are bitwise identical.

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "blink/errors.hpp"

namespace blink {

#if defined(BLINK_REAL_DOUBLE) && BLINK_REAL_DOUBLE
using Real = double;
#else
using Real = float;
#endif

// Dense row-major matrix.
template <typename T>
class Tensor2 {
 public:
  Tensor2() = default;
  Tensor2(int rows, int cols, T fill = T(0)) : rows_(rows), cols_(cols) {
    if (rows < 0 || cols < 0) throw InvalidArgument("Tensor2: negative dimension");
    data_.assign(static_cast<std::size_t>(rows) * cols, fill);
  }

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  T& operator()(int r, int c) { return data_[static_cast<std::size_t>(r) * cols_ + c]; }
  const T& operator()(int r, int c) const { return data_[static_cast<std::size_t>(r) * cols_ + c]; }

  std::span<T> row(int r) { return {data_.data() + static_cast<std::size_t>(r) * cols_, static_cast<std::size_t>(cols_)}; }
  std::span<const T> row(int r) const {
    return {data_.data() + static_cast<std::size_t>(r) * cols_, static_cast<std::size_t>(cols_)};
  }

  std::vector<T>& data() { return data_; }
  const std::vector<T>& data() const { return data_; }

  bool operator==(const Tensor2&) const = default;

 private:
  int rows_ = 0;
  int cols_ = 0;
  std::vector<T> data_;
};

// Height x width x channels grid, channels innermost. Flattening the first two
// axes row-major gives the token order used by the decoder.
template <typename T>
class Tensor3 {
 public:
  Tensor3() = default;
  Tensor3(int height, int width, int channels, T fill = T(0))
      : height_(height), width_(width), channels_(channels) {
    if (height < 0 || width < 0 || channels < 0) throw InvalidArgument("Tensor3: negative dimension");
    data_.assign(static_cast<std::size_t>(height) * width * channels, fill);
  }

  int height() const { return height_; }
  int width() const { return width_; }
  int channels() const { return channels_; }
  std::size_t size() const { return data_.size(); }

  std::size_t offset(int y, int x, int k = 0) const {
    return (static_cast<std::size_t>(y) * width_ + x) * channels_ + k;
  }
  T& operator()(int y, int x, int k) { return data_[offset(y, x, k)]; }
  const T& operator()(int y, int x, int k) const { return data_[offset(y, x, k)]; }

  std::span<T> pixel(int y, int x) { return {data_.data() + offset(y, x), static_cast<std::size_t>(channels_)}; }
  std::span<const T> pixel(int y, int x) const {
    return {data_.data() + offset(y, x), static_cast<std::size_t>(channels_)};
  }

  std::vector<T>& data() { return data_; }
  const std::vector<T>& data() const { return data_; }

  bool same_shape(const Tensor3& o) const {
    return height_ == o.height_ && width_ == o.width_ && channels_ == o.channels_;
  }
  bool operator==(const Tensor3&) const = default;

 private:
  int height_ = 0;
  int width_ = 0;
  int channels_ = 0;
  std::vector<T> data_;
};

// Seeded generator with distributions defined here rather than by the standard
// library, so sequences are identical across toolchains.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer in [0, n).
  int uniform_int(int n) {
    if (n <= 0) throw InvalidArgument("Rng::uniform_int: n must be positive");
    return static_cast<int>(uniform() * n);
  }
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * M_PI * u2);
    has_spare_ = true;
    return r * std::cos(2.0 * M_PI * u2);
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Numerically stable softmax of values / temperature.
std::vector<double> softmax(std::span<const double> values, double temperature = 1.0);

// Channel-wise bilinear resampling with corner-aligned coordinates: output
// pixel (i, j) samples the source at (i*(h-1)/(H-1), j*(w-1)/(W-1)).
template <typename T>
Tensor3<T> bilinear_resize(const Tensor3<T>& grid, int out_height, int out_width);

// Weights of a square same-padding convolution, laid out [out][in][ky][kx].
template <typename T>
struct ConvKernel {
  int out_channels = 0;
  int in_channels = 0;
  int size = 0;  // odd
  std::vector<T> weight;
  std::vector<T> bias;

  ConvKernel() = default;
  ConvKernel(int out_ch, int in_ch, int kernel_size)
      : out_channels(out_ch),
        in_channels(in_ch),
        size(kernel_size),
        weight(static_cast<std::size_t>(out_ch) * in_ch * kernel_size * kernel_size, T(0)),
        bias(static_cast<std::size_t>(out_ch), T(0)) {}

  T& w(int o, int i, int ky, int kx) {
    return weight[((static_cast<std::size_t>(o) * in_channels + i) * size + ky) * size + kx];
  }
  const T& w(int o, int i, int ky, int kx) const {
    return weight[((static_cast<std::size_t>(o) * in_channels + i) * size + ky) * size + kx];
  }
};

// Zero-padded convolution with padding (f-1)/2 on each side; output has the
// input's spatial dimensions. Throws InvalidArgument for even kernel sizes or
// channel mismatch.
template <typename T>
Tensor3<T> conv2d(const Tensor3<T>& input, const ConvKernel<T>& kernel);

// Gradients of conv2d given dL/d(output). `grad_kernel` is accumulated into
// (so a batch can share one buffer); the returned tensor is dL/d(input).
template <typename T>
Tensor3<T> conv2d_backward(const Tensor3<T>& input, const ConvKernel<T>& kernel,
                           const Tensor3<T>& grad_output, ConvKernel<T>& grad_kernel);

// Floor applied to q before the logarithm in kl_divergence.
inline constexpr double kKlEpsilon = 1e-8;

// KL(p || q) = sum_i p_i ln(p_i / max(q_i, eps)); terms with p_i == 0 vanish.
double kl_divergence(std::span<const double> p, std::span<const double> q);

// Central-difference gradient estimate. Order 2 is (f(x + h) - f(x - h)) / 2h;
// order 4 is the five-point stencil
// (8 (f(x + h) - f(x - h)) - (f(x + 2h) - f(x - 2h))) / 12h.
std::vector<double> finite_diff_gradient(const std::function<double(std::span<const double>)>& f,
                                         std::span<const double> theta, double step, int order = 2);

// Returns true if every element is finite.
template <typename T>
bool all_finite(std::span<const T> values) {
  for (const T& v : values) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

}  // namespace blink
