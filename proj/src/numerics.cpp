// Copyright 2026 The Blink Authors
// SPDX-License-Identifier: Apache-2.0

#include "blink/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace blink {

std::vector<double> softmax(std::span<const double> values, double temperature) {
  if (values.empty()) throw InvalidArgument("softmax: empty input");
  if (!(temperature > 0.0)) throw InvalidArgument("softmax: temperature must be positive");
  double max_v = -std::numeric_limits<double>::infinity();
  for (double v : values) max_v = std::max(max_v, v);
  std::vector<double> out(values.size());
  double total = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    out[i] = std::exp((values[i] - max_v) / temperature);
    total += out[i];
  }
  for (double& v : out) v /= total;
  return out;
}

namespace {

// Source coordinate of output index i under corner alignment.
inline double source_coord(int i, int in_size, int out_size) {
  if (out_size == 1 || in_size == 1) return 0.0;
  return static_cast<double>(i) * (in_size - 1) / (out_size - 1);
}

}  // namespace

template <typename T>
Tensor3<T> bilinear_resize(const Tensor3<T>& grid, int out_height, int out_width) {
  if (grid.height() < 1 || grid.width() < 1) throw InvalidArgument("bilinear_resize: empty source grid");
  if (out_height < 1 || out_width < 1) throw InvalidArgument("bilinear_resize: target dimensions must be >= 1");
  const int h = grid.height();
  const int w = grid.width();
  const int d = grid.channels();
  Tensor3<T> out(out_height, out_width, d);
  for (int i = 0; i < out_height; ++i) {
    const double sy = source_coord(i, h, out_height);
    const int y0 = std::min(static_cast<int>(std::floor(sy)), h - 1);
    const int y1 = std::min(y0 + 1, h - 1);
    const T ty = static_cast<T>(sy - y0);
    for (int j = 0; j < out_width; ++j) {
      const double sx = source_coord(j, w, out_width);
      const int x0 = std::min(static_cast<int>(std::floor(sx)), w - 1);
      const int x1 = std::min(x0 + 1, w - 1);
      const T tx = static_cast<T>(sx - x0);
      const auto p00 = grid.pixel(y0, x0);
      const auto p01 = grid.pixel(y0, x1);
      const auto p10 = grid.pixel(y1, x0);
      const auto p11 = grid.pixel(y1, x1);
      auto dst = out.pixel(i, j);
      for (int k = 0; k < d; ++k) {
        // std::lerp is exact at t = 0 and bounded by its endpoints, so the
        // identity resize is bitwise and results never leave [min, max].
        const T top = std::lerp(p00[k], p01[k], tx);
        const T bottom = std::lerp(p10[k], p11[k], tx);
        dst[k] = std::lerp(top, bottom, ty);
      }
    }
  }
  return out;
}

namespace {

template <typename T>
void check_conv_args(const Tensor3<T>& input, const ConvKernel<T>& kernel) {
  if (kernel.size < 1 || kernel.size % 2 == 0) throw InvalidArgument("conv2d: kernel size must be odd");
  if (input.channels() != kernel.in_channels) throw InvalidArgument("conv2d: input channel mismatch");
  const std::size_t expected =
      static_cast<std::size_t>(kernel.out_channels) * kernel.in_channels * kernel.size * kernel.size;
  if (kernel.weight.size() != expected || kernel.bias.size() != static_cast<std::size_t>(kernel.out_channels)) {
    throw InvalidArgument("conv2d: kernel storage does not match its declared shape");
  }
}

// Reorders [out][in][ky][kx] into [ky][kx][in][out] so the innermost loop runs
// over contiguous output channels.
template <typename T>
std::vector<T> transpose_kernel(const ConvKernel<T>& k) {
  std::vector<T> t(k.weight.size());
  for (int o = 0; o < k.out_channels; ++o)
    for (int i = 0; i < k.in_channels; ++i)
      for (int ky = 0; ky < k.size; ++ky)
        for (int kx = 0; kx < k.size; ++kx)
          t[((static_cast<std::size_t>(ky) * k.size + kx) * k.in_channels + i) * k.out_channels + o] =
              k.w(o, i, ky, kx);
  return t;
}

}  // namespace

template <typename T>
Tensor3<T> conv2d(const Tensor3<T>& input, const ConvKernel<T>& kernel) {
  check_conv_args(input, kernel);
  const int H = input.height();
  const int W = input.width();
  const int cin = kernel.in_channels;
  const int cout = kernel.out_channels;
  const int f = kernel.size;
  const int pad = (f - 1) / 2;
  const std::vector<T> wt = transpose_kernel(kernel);
  Tensor3<T> out(H, W, cout);
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      auto dst = out.pixel(y, x);
      std::copy(kernel.bias.begin(), kernel.bias.end(), dst.begin());
      for (int ky = 0; ky < f; ++ky) {
        const int sy = y + ky - pad;
        if (sy < 0 || sy >= H) continue;
        for (int kx = 0; kx < f; ++kx) {
          const int sx = x + kx - pad;
          if (sx < 0 || sx >= W) continue;
          const auto src = input.pixel(sy, sx);
          const T* wrow = wt.data() + (static_cast<std::size_t>(ky) * f + kx) * cin * cout;
          for (int i = 0; i < cin; ++i) {
            const T v = src[i];
            const T* wi = wrow + static_cast<std::size_t>(i) * cout;
            for (int o = 0; o < cout; ++o) dst[o] += v * wi[o];
          }
        }
      }
    }
  }
  return out;
}

template <typename T>
Tensor3<T> conv2d_backward(const Tensor3<T>& input, const ConvKernel<T>& kernel,
                           const Tensor3<T>& grad_output, ConvKernel<T>& grad_kernel) {
  check_conv_args(input, kernel);
  const int H = input.height();
  const int W = input.width();
  const int cin = kernel.in_channels;
  const int cout = kernel.out_channels;
  const int f = kernel.size;
  const int pad = (f - 1) / 2;
  if (grad_output.height() != H || grad_output.width() != W || grad_output.channels() != cout) {
    throw InvalidArgument("conv2d_backward: gradient shape mismatch");
  }
  if (grad_kernel.weight.size() != kernel.weight.size() || grad_kernel.bias.size() != kernel.bias.size()) {
    grad_kernel = ConvKernel<T>(cout, cin, f);
  }
  const std::vector<T> wt = transpose_kernel(kernel);
  std::vector<T> gwt(wt.size(), T(0));
  Tensor3<T> grad_input(H, W, cin);
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      const auto g = grad_output.pixel(y, x);
      for (int o = 0; o < cout; ++o) grad_kernel.bias[o] += g[o];
      for (int ky = 0; ky < f; ++ky) {
        const int sy = y + ky - pad;
        if (sy < 0 || sy >= H) continue;
        for (int kx = 0; kx < f; ++kx) {
          const int sx = x + kx - pad;
          if (sx < 0 || sx >= W) continue;
          const auto src = input.pixel(sy, sx);
          auto gin = grad_input.pixel(sy, sx);
          const std::size_t base = (static_cast<std::size_t>(ky) * f + kx) * cin * cout;
          for (int i = 0; i < cin; ++i) {
            const T* wi = wt.data() + base + static_cast<std::size_t>(i) * cout;
            T* gwi = gwt.data() + base + static_cast<std::size_t>(i) * cout;
            const T v = src[i];
            T acc = T(0);
            for (int o = 0; o < cout; ++o) {
              acc += g[o] * wi[o];
              gwi[o] += g[o] * v;
            }
            gin[i] += acc;
          }
        }
      }
    }
  }
  for (int o = 0; o < cout; ++o)
    for (int i = 0; i < cin; ++i)
      for (int ky = 0; ky < f; ++ky)
        for (int kx = 0; kx < f; ++kx)
          grad_kernel.w(o, i, ky, kx) +=
              gwt[((static_cast<std::size_t>(ky) * f + kx) * cin + i) * cout + o];
  return grad_input;
}

double kl_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw InvalidArgument("kl_divergence: length mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;
    total += p[i] * (std::log(p[i]) - std::log(std::max(q[i], kKlEpsilon)));
  }
  return total;
}

std::vector<double> finite_diff_gradient(const std::function<double(std::span<const double>)>& f,
                                         std::span<const double> theta, double step, int order) {
  if (!(step > 0.0)) throw InvalidArgument("finite_diff_gradient: step must be positive");
  if (order != 2 && order != 4) throw InvalidArgument("finite_diff_gradient: order must be 2 or 4");
  std::vector<double> probe(theta.begin(), theta.end());
  std::vector<double> grad(theta.size());
  auto at = [&](std::size_t i, double offset) {
    const double saved = probe[i];
    probe[i] = saved + offset;
    const double v = f(probe);
    probe[i] = saved;
    return v;
  };
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double d1 = at(i, step) - at(i, -step);
    if (order == 2) {
      grad[i] = d1 / (2.0 * step);
    } else {
      const double d2 = at(i, 2.0 * step) - at(i, -2.0 * step);
      grad[i] = (8.0 * d1 - d2) / (12.0 * step);
    }
  }
  return grad;
}

template Tensor3<float> bilinear_resize(const Tensor3<float>&, int, int);
template Tensor3<double> bilinear_resize(const Tensor3<double>&, int, int);
template Tensor3<float> conv2d(const Tensor3<float>&, const ConvKernel<float>&);
template Tensor3<double> conv2d(const Tensor3<double>&, const ConvKernel<double>&);
template Tensor3<float> conv2d_backward(const Tensor3<float>&, const ConvKernel<float>&, const Tensor3<float>&,
                                        ConvKernel<float>&);
template Tensor3<double> conv2d_backward(const Tensor3<double>&, const ConvKernel<double>&,
                                         const Tensor3<double>&, ConvKernel<double>&);

}  // namespace blink
