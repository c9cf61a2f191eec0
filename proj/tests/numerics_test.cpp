// Copyright 2026 The Blink Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "blink/errors.hpp"
#include "blink/numerics.hpp"

namespace blink {
namespace {

// Scalar bilinear reference: corner-aligned source coordinate, explicit
// four-neighbour weights.
double bilinear_oracle(const Tensor3<double>& g, int out_h, int out_w, int i, int j, int k) {
  const double sy = out_h == 1 ? 0.0 : i * (g.height() - 1.0) / (out_h - 1.0);
  const double sx = out_w == 1 ? 0.0 : j * (g.width() - 1.0) / (out_w - 1.0);
  const int y0 = static_cast<int>(std::floor(sy)), x0 = static_cast<int>(std::floor(sx));
  const int y1 = std::min(y0 + 1, g.height() - 1), x1 = std::min(x0 + 1, g.width() - 1);
  const double wy = sy - y0, wx = sx - x0;
  return (1 - wy) * (1 - wx) * g(y0, x0, k) + (1 - wy) * wx * g(y0, x1, k) + wy * (1 - wx) * g(y1, x0, k) +
         wy * wx * g(y1, x1, k);
}

// Sliding-window conv reference with zero padding.
double conv_oracle(const Tensor3<double>& in, const ConvKernel<double>& k, int y, int x, int o) {
  const int r = k.size / 2;
  double acc = k.bias[static_cast<std::size_t>(o)];
  for (int i = 0; i < k.in_channels; ++i)
    for (int dy = -r; dy <= r; ++dy)
      for (int dx = -r; dx <= r; ++dx) {
        const int yy = y + dy, xx = x + dx;
        if (yy < 0 || xx < 0 || yy >= in.height() || xx >= in.width()) continue;
        acc += k.w(o, i, dy + r, dx + r) * in(yy, xx, i);
      }
  return acc;
}

Tensor3<double> random_grid(Rng& rng, int h, int w, int d) {
  Tensor3<double> g(h, w, d);
  for (auto& v : g.data()) v = rng.normal();
  return g;
}

TEST(Softmax, Symmetric) {
  const auto p = softmax(std::vector<double>{0.0, 0.0});
  EXPECT_DOUBLE_EQ(p[0], 0.5);
  EXPECT_DOUBLE_EQ(p[1], 0.5);
}

TEST(Softmax, LogThreeCase) {
  const auto p = softmax(std::vector<double>{std::log(3.0), 0.0});
  // exp(ln 3) / (exp(ln 3) + 1) by direct evaluation.
  const double e0 = std::exp(std::log(3.0)), e1 = std::exp(0.0);
  EXPECT_NEAR(p[0], e0 / (e0 + e1), 1e-12);
  EXPECT_NEAR(p[0], 0.75, 1e-12);
  EXPECT_NEAR(p[1], 0.25, 1e-12);
}

TEST(Softmax, SingleElementAndProperties) {
  EXPECT_EQ(softmax(std::vector<double>{-42.0})[0], 1.0);
  Rng rng(3);
  for (int t = 0; t < 200; ++t) {
    std::vector<double> v(1 + rng.uniform_int(20));
    for (auto& x : v) x = rng.normal() * 30.0;
    const auto p = softmax(v, 0.5 + rng.uniform());
    EXPECT_NEAR(std::accumulate(p.begin(), p.end(), 0.0), 1.0, 1e-9);
    for (double x : p) {
      EXPECT_GT(x, 0.0);
      EXPECT_LE(x, 1.0);
    }
  }
  EXPECT_THROW(softmax(std::vector<double>{}), InvalidArgument);
  EXPECT_THROW(softmax(std::vector<double>{1.0}, 0.0), InvalidArgument);
}

TEST(Bilinear, IdentityIsBitwise) {
  Rng rng(1);
  const auto g = random_grid(rng, 3, 5, 4);
  EXPECT_EQ(bilinear_resize(g, 3, 5), g);
}

TEST(Bilinear, ConstantsStayConstant) {
  Tensor3<double> g(3, 4, 2, 0.37);
  for (auto [h, w] : {std::pair{1, 1}, {7, 2}, {8, 8}, {2, 9}}) {
    const auto r = bilinear_resize(g, h, w);
    for (double v : r.data()) EXPECT_EQ(v, 0.37);
  }
  // Down then up reproduces constants exactly.
  EXPECT_EQ(bilinear_resize(bilinear_resize(g, 2, 2), 3, 4), g);
}

TEST(Bilinear, TwoByTwoMatchesScalarOracle) {
  Tensor3<double> g(2, 2, 1);
  g(0, 0, 0) = 0;
  g(0, 1, 0) = 1;
  g(1, 0, 0) = 2;
  g(1, 1, 0) = 3;
  const auto out = bilinear_resize(g, 4, 4);
  EXPECT_EQ(out(0, 0, 0), 0.0);
  EXPECT_EQ(out(0, 3, 0), 1.0);
  EXPECT_EQ(out(3, 0, 0), 2.0);
  EXPECT_EQ(out(3, 3, 0), 3.0);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) EXPECT_NEAR(out(i, j, 0), bilinear_oracle(g, 4, 4, i, j, 0), 1e-12);
}

TEST(Bilinear, RandomGridsMatchOracleAndStayInRange) {
  Rng rng(9);
  for (int t = 0; t < 40; ++t) {
    const int h = 1 + rng.uniform_int(5), w = 1 + rng.uniform_int(5);
    const int oh = 1 + rng.uniform_int(9), ow = 1 + rng.uniform_int(9);
    const auto g = random_grid(rng, h, w, 3);
    const auto out = bilinear_resize(g, oh, ow);
    ASSERT_EQ(out.height(), oh);
    ASSERT_EQ(out.width(), ow);
    for (int k = 0; k < 3; ++k) {
      double lo = 1e300, hi = -1e300;
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) lo = std::min(lo, g(y, x, k)), hi = std::max(hi, g(y, x, k));
      for (int i = 0; i < oh; ++i)
        for (int j = 0; j < ow; ++j) {
          EXPECT_NEAR(out(i, j, k), bilinear_oracle(g, oh, ow, i, j, k), 1e-12);
          EXPECT_GE(out(i, j, k), lo);
          EXPECT_LE(out(i, j, k), hi);
        }
    }
  }
}

TEST(Bilinear, RejectsZeroTarget) {
  Tensor3<double> g(2, 2, 1);
  EXPECT_THROW(bilinear_resize(g, 0, 3), InvalidArgument);
  EXPECT_THROW(bilinear_resize(g, 3, 0), InvalidArgument);
}

TEST(Conv2d, OneByOneIdentity) {
  Rng rng(2);
  const auto g = random_grid(rng, 4, 3, 5);
  ConvKernel<double> k(5, 5, 1);
  for (int c = 0; c < 5; ++c) k.w(c, c, 0, 0) = 1.0;
  EXPECT_EQ(conv2d(g, k), g);
}

TEST(Conv2d, BiasOnly) {
  Rng rng(2);
  const auto g = random_grid(rng, 4, 4, 2);
  ConvKernel<double> k(3, 2, 3);
  k.bias = {0.5, -1.0, 2.0};
  const auto out = conv2d(g, k);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x)
      for (int c = 0; c < 3; ++c) EXPECT_EQ(out(y, x, c), k.bias[static_cast<std::size_t>(c)]);
}

TEST(Conv2d, AveragingKernelOnThreeByThree) {
  Tensor3<double> g(3, 3, 1);
  for (int i = 0; i < 9; ++i) g(i / 3, i % 3, 0) = i + 1;
  ConvKernel<double> k(1, 1, 3);
  for (auto& w : k.weight) w = 1.0 / 9.0;
  const auto out = conv2d(g, k);
  EXPECT_NEAR(out(1, 1, 0), 45.0 / 9.0, 1e-12);
  // Top-left window covers {1, 2, 4, 5}; the rest is padding.
  EXPECT_NEAR(out(0, 0, 0), 12.0 / 9.0, 1e-12);
  EXPECT_NEAR(out(2, 2, 0), (5 + 6 + 8 + 9) / 9.0, 1e-12);
}

TEST(Conv2d, MatchesSlidingWindowOracle) {
  Rng rng(4);
  for (int f : {1, 3, 5}) {
    for (auto [h, w] : {std::pair{1, 1}, {2, 7}, {6, 5}}) {
      const auto g = random_grid(rng, h, w, 3);
      ConvKernel<double> k(4, 3, f);
      for (auto& v : k.weight) v = rng.normal();
      for (auto& v : k.bias) v = rng.normal();
      const auto out = conv2d(g, k);
      ASSERT_EQ(out.height(), h);
      ASSERT_EQ(out.width(), w);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          for (int o = 0; o < 4; ++o) EXPECT_NEAR(out(y, x, o), conv_oracle(g, k, y, x, o), 1e-10);
    }
  }
}

TEST(Conv2d, BackwardMatchesFiniteDifferences) {
  Rng rng(5);
  const auto g = random_grid(rng, 3, 4, 2);
  ConvKernel<double> k(3, 2, 3);
  for (auto& v : k.weight) v = rng.normal();
  for (auto& v : k.bias) v = rng.normal();
  const auto upstream = random_grid(rng, 3, 4, 3);
  auto loss = [&](const Tensor3<double>& in, const ConvKernel<double>& kk) {
    const auto out = conv2d(in, kk);
    return std::inner_product(out.data().begin(), out.data().end(), upstream.data().begin(), 0.0);
  };
  ConvKernel<double> grad_k(3, 2, 3);
  const auto grad_in = conv2d_backward(g, k, upstream, grad_k);

  std::vector<double> theta(k.weight.begin(), k.weight.end());
  const auto fd_w = finite_diff_gradient(
      [&](std::span<const double> t) {
        ConvKernel<double> kk = k;
        kk.weight.assign(t.begin(), t.end());
        return loss(g, kk);
      },
      theta, 1e-5);
  for (std::size_t i = 0; i < theta.size(); ++i) EXPECT_NEAR(grad_k.weight[i], fd_w[i], 1e-7);

  const auto fd_in = finite_diff_gradient(
      [&](std::span<const double> t) {
        Tensor3<double> in = g;
        in.data().assign(t.begin(), t.end());
        return loss(in, k);
      },
      g.data(), 1e-5);
  for (std::size_t i = 0; i < fd_in.size(); ++i) EXPECT_NEAR(grad_in.data()[i], fd_in[i], 1e-7);
}

TEST(Conv2d, EvenKernelRejected) {
  Tensor3<double> g(2, 2, 1);
  ConvKernel<double> k(1, 1, 2);
  EXPECT_THROW(conv2d(g, k), InvalidArgument);
}

TEST(KlDivergence, ClosedForms) {
  EXPECT_EQ(kl_divergence(std::vector<double>{0.5, 0.5}, std::vector<double>{0.5, 0.5}), 0.0);
  EXPECT_NEAR(kl_divergence(std::vector<double>{1.0, 0.0}, std::vector<double>{0.5, 0.5}), std::log(2.0), 1e-12);
  const double expected = 0.75 * std::log(0.75 / 0.5) + 0.25 * std::log(0.25 / 0.5);
  EXPECT_NEAR(kl_divergence(std::vector<double>{0.75, 0.25}, std::vector<double>{0.5, 0.5}), expected, 1e-12);
  EXPECT_NEAR(expected, 0.1308, 1e-4);
  EXPECT_THROW(kl_divergence(std::vector<double>{1.0}, std::vector<double>{0.5, 0.5}), InvalidArgument);
}

TEST(KlDivergence, NonNegativeOnRandomPairs) {
  Rng rng(6);
  for (int t = 0; t < 1000; ++t) {
    std::vector<double> a(5), b(5);
    for (auto& x : a) x = rng.normal() * 3;
    for (auto& x : b) x = rng.normal() * 3;
    const auto p = softmax(a), q = softmax(b);
    EXPECT_GE(kl_divergence(p, q), -1e-9);
    EXPECT_EQ(kl_divergence(p, p), 0.0);
  }
}

TEST(KlDivergence, ZeroReferenceBinIsClamped) {
  const double v = kl_divergence(std::vector<double>{0.5, 0.5}, std::vector<double>{1.0, 0.0});
  EXPECT_NEAR(v, 0.5 * std::log(0.5) + 0.5 * std::log(0.5 / kKlEpsilon), 1e-9);
}

TEST(FiniteDiff, QuadraticAndLinear) {
  const auto g = finite_diff_gradient([](std::span<const double> t) { return t[0] * t[0]; }, std::vector<double>{3.0},
                                      1e-4);
  EXPECT_NEAR(g[0], 6.0, 1e-6);
  const auto l = finite_diff_gradient([](std::span<const double> t) { return 2.5 * t[0] - 4.0 * t[1]; },
                                      std::vector<double>{1.0, -7.0}, 1e-3);
  EXPECT_NEAR(l[0], 2.5, 1e-9);
  EXPECT_NEAR(l[1], -4.0, 1e-9);
}

TEST(FiniteDiff, FivePointStencilIsExactOnQuartics) {
  // f = x^4 at x = 1.5 with h = 0.1: the two-point rule carries an h^2 bias of
  // 4 x h^2 = 0.06; the five-point rule has none for degree <= 4.
  auto f = [](std::span<const double> t) { return std::pow(t[0], 4); };
  const std::vector<double> x{1.5};
  EXPECT_NEAR(finite_diff_gradient(f, x, 0.1, 2)[0], 4 * 3.375 + 0.06, 1e-9);
  EXPECT_NEAR(finite_diff_gradient(f, x, 0.1, 4)[0], 4 * 3.375, 1e-9);
  EXPECT_THROW(finite_diff_gradient(f, x, 0.1, 3), InvalidArgument);
}

TEST(Tensor, AllFinite) {
  std::vector<double> v = {1.0, 2.0};
  EXPECT_TRUE(all_finite<double>(v));
  v.push_back(std::nan(""));
  EXPECT_FALSE(all_finite<double>(v));
}

}  // namespace
}  // namespace blink
