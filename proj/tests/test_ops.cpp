/*
 * SPDX-License-Identifier: Apache-2.0
 */
#include <gtest/gtest.h>

#include "support.hpp"

using namespace hifi;
using namespace testing_support;

namespace {

ag::Var leaf(Shape s, std::uint64_t seed, double sd = 1.0) { return ag::Var(random_tensor(std::move(s), seed, sd), true); }

// Bilinear sample of a 1-D signal at continuous position u with clamping.
double interp1(const std::vector<double>& v, double u) {
  const double n = static_cast<double>(v.size());
  u = std::clamp(u, 0.0, n - 1.0);
  const auto i0 = static_cast<std::size_t>(std::floor(u));
  const std::size_t i1 = std::min(i0 + 1, v.size() - 1);
  const double t = u - static_cast<double>(i0);
  return (1 - t) * v[i0] + t * v[i1];
}

}  // namespace

TEST(Autograd, DiamondAccumulates) {
  ag::Var x(Tensor({3}, {1.0, -2.0, 0.5}), true);
  ag::Var y = ag::mul(x, x);
  ag::Var z = ag::add(y, ag::scale(x, 3.0));
  ag::backward(ag::sum_sq(z));
  for (std::size_t i = 0; i < 3; ++i) {
    const double xi = x.value()[i], zi = xi * xi + 3 * xi;
    EXPECT_NEAR(x.grad()[i], 2 * zi * (2 * xi + 3), 1e-12);
  }
}

TEST(Autograd, NoGradGuardBuildsNoGraph) {
  ag::Var x = leaf({4}, 1);
  {
    ag::NoGradGuard ng;
    EXPECT_FALSE(ag::add(x, x).requires_grad());
  }
  EXPECT_TRUE(ag::add(x, x).requires_grad());
}

TEST(Autograd, NonScalarRootNeedsSeed) {
  ag::Var x = leaf({4}, 1);
  EXPECT_THROW(ag::backward(ag::scale(x, 2.0)), ShapeMismatch);
  Tensor seed({4}, 1.0);
  ag::backward(ag::scale(x, 2.0), &seed);
  EXPECT_DOUBLE_EQ(x.grad()[2], 2.0);
}

TEST(Activations, KnownValues) {
  ag::Var x(Tensor({3}, {-1.0, 0.0, 1.0}));
  const auto g = ag::gelu(x).value(), s = ag::silu(x).value(), sp = ag::softplus(x).value();
  EXPECT_NEAR(g[2], 0.8413447460685429, 1e-12);
  EXPECT_NEAR(g[0], -0.15865525393145707, 1e-12);
  EXPECT_DOUBLE_EQ(g[1], 0.0);
  EXPECT_NEAR(s[2], 1.0 / (1.0 + std::exp(-1.0)), 1e-15);
  EXPECT_NEAR(sp[1], std::log(2.0), 1e-15);
  EXPECT_NEAR(ag::sigmoid(x).value()[0], 1.0 / (1.0 + std::exp(1.0)), 1e-15);
  EXPECT_DOUBLE_EQ(ag::relu(x).value()[0], 0.0);
}

TEST(Activations, Gradients) {
  ag::Var x = leaf({2, 5}, 3, 2.0);
  for (auto f : {ag::gelu, ag::silu, ag::sigmoid, ag::softplus}) {
    const auto rep = gradcheck([&] { return ag::sum_sq(f(x)); }, {x});
    EXPECT_LE(rep.max_rel, 1e-5);
  }
}

TEST(Linear, MatchesNaiveAndGradients) {
  ag::Var x = leaf({2, 3, 5}, 1), w = leaf({4, 5}, 2), b = leaf({4}, 3);
  const auto y = ag::linear(x, w, b).value();
  for (std::size_t r = 0; r < 6; ++r)
    for (std::size_t o = 0; o < 4; ++o) {
      double s = b.value()[o];
      for (std::size_t i = 0; i < 5; ++i) s += x.value()[r * 5 + i] * w.value()[o * 5 + i];
      EXPECT_NEAR(y[r * 4 + o], s, 1e-12);
    }
  EXPECT_LE(gradcheck([&] { return ag::sum_sq(ag::linear(x, w, b)); }, {x, w, b}).max_rel, 1e-5);
  EXPECT_LE(gradcheck([&] { return ag::sum_sq(ag::linear(x, w, ag::Var())); }, {x, w}).max_rel, 1e-5);
  EXPECT_THROW(ag::linear(leaf({2, 4}, 1), w, b), ShapeMismatch);
}

TEST(LayerNormOp, MatchesNaiveAndGradients) {
  ag::Var x = leaf({3, 6}, 4, 2.0), g = leaf({6}, 5), b = leaf({6}, 6);
  const auto y = ag::layer_norm(x, g, b).value();
  for (std::size_t r = 0; r < 3; ++r) {
    double mu = 0, var = 0;
    for (std::size_t i = 0; i < 6; ++i) mu += x.value()[r * 6 + i] / 6;
    for (std::size_t i = 0; i < 6; ++i) var += std::pow(x.value()[r * 6 + i] - mu, 2) / 6;
    for (std::size_t i = 0; i < 6; ++i)
      EXPECT_NEAR(y[r * 6 + i], (x.value()[r * 6 + i] - mu) / std::sqrt(var + 1e-5) * g.value()[i] + b.value()[i], 1e-12);
  }
  const Tensor wt = random_tensor({3, 6}, 9);
  EXPECT_LE(gradcheck([&] { return ag::dot_const(ag::layer_norm(x, g, b), wt); }, {x, g, b}).max_rel, 1e-5);
}

TEST(DwConv2d, MatchesNaiveOracleBothStrides) {
  for (std::size_t stride : {1u, 2u}) {
    ag::Var x = leaf({2, 6, 8, 3}, 7), w = leaf({3, 3, 3}, 8), b = leaf({3}, 9);
    const auto y = ag::dwconv2d(x, w, b, stride);
    const std::size_t ho = stride == 1 ? 6 : 3, wo = stride == 1 ? 8 : 4;
    ASSERT_EQ(y.shape(), (Shape{2, ho, wo, 3}));
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t oy = 0; oy < ho; ++oy)
        for (std::size_t ox = 0; ox < wo; ++ox)
          for (std::size_t c = 0; c < 3; ++c) {
            double s = b.value()[c];
            for (int ky = 0; ky < 3; ++ky)
              for (int kx = 0; kx < 3; ++kx) {
                const int iy = int(oy * stride) + ky - 1, ix = int(ox * stride) + kx - 1;
                if (iy < 0 || iy >= 6 || ix < 0 || ix >= 8) continue;
                s += x.value().at(n, std::size_t(iy), std::size_t(ix), c) * w.value().at(c, std::size_t(ky), std::size_t(kx));
              }
            EXPECT_NEAR(y.value().at(n, oy, ox, c), s, 1e-12);
          }
    EXPECT_LE(gradcheck([&] { return ag::sum_sq(ag::dwconv2d(x, w, b, stride)); }, {x, w, b}).max_rel, 1e-5);
  }
}

TEST(DwConv1d, MatchesNaiveOracleAndGradients) {
  ag::Var x = leaf({2, 3, 9}, 10), w = leaf({3, 5}, 11), b = leaf({3}, 12);
  const auto y = ag::dwconv1d(x, w, b).value();
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t d = 0; d < 3; ++d)
      for (int t = 0; t < 9; ++t) {
        double s = b.value()[d];
        for (int j = 0; j < 5; ++j) {
          const int i = t + j - 2;
          if (i >= 0 && i < 9) s += x.value().at(n, d, std::size_t(i)) * w.value().at(d, std::size_t(j));
        }
        EXPECT_NEAR(y.at(n, d, std::size_t(t)), s, 1e-12);
      }
  EXPECT_LE(gradcheck([&] { return ag::sum_sq(ag::dwconv1d(x, w, b)); }, {x, w, b}).max_rel, 1e-5);
}

TEST(Upsample2x, HalfPixelBilinearOracle) {
  ag::Var x = leaf({1, 3, 4, 2}, 13);
  const auto y = ag::upsample2x(x, 0.5).value();
  for (std::size_t oy = 0; oy < 6; ++oy)
    for (std::size_t ox = 0; ox < 8; ++ox)
      for (std::size_t c = 0; c < 2; ++c) {
        // separable: interpolate rows at the column position, then along y
        std::vector<double> col(3);
        for (std::size_t iy = 0; iy < 3; ++iy) {
          std::vector<double> row(4);
          for (std::size_t ix = 0; ix < 4; ++ix) row[ix] = x.value().at(0, iy, ix, c);
          col[iy] = interp1(row, (ox + 0.5) / 2.0 - 0.5);
        }
        EXPECT_NEAR(y.at(0, oy, ox, c), 0.5 * interp1(col, (oy + 0.5) / 2.0 - 0.5), 1e-12);
      }
  EXPECT_LE(gradcheck([&] { return ag::sum_sq(ag::upsample2x(x, 0.5)); }, {x}).max_rel, 1e-5);
}

TEST(HaarLL, MatchesDwtAndGradients) {
  ag::Var x = leaf({1, 6, 4, 3}, 14);
  const auto ll = ag::haar_ll(x).value();
  const auto ref = wavelet::dwt2(x.value().reshaped({6, 4, 3})).LL;
  EXPECT_LE(max_abs_diff(ll.reshaped(ref.shape()), ref), 1e-14);
  EXPECT_LE(gradcheck([&] { return ag::sum_sq(ag::haar_ll(x)); }, {x}).max_rel, 1e-5);
}

TEST(Patches, SpaceToDepthLayoutAndInverse) {
  ag::Var x = leaf({2, 4, 6, 3}, 15);
  const auto s = ag::space_to_depth(x, 2);
  ASSERT_EQ(s.shape(), (Shape{2, 2, 3, 12}));
  // patch vector order is (py, px, c)
  EXPECT_DOUBLE_EQ(s.value().at(1, 1, 2, (1 * 2 + 0) * 3 + 2), x.value().at(1, 3, 4, 2));
  EXPECT_EQ(max_abs_diff(ag::depth_to_space(s, 2).value(), x.value()), 0.0);
  EXPECT_THROW(ag::space_to_depth(leaf({1, 5, 4, 1}, 1), 2), IndivisibleShape);
  EXPECT_LE(gradcheck([&] { return ag::sum_sq(ag::space_to_depth(x, 2)); }, {x}).max_rel, 1e-5);
  const Tensor wt = random_tensor({2, 4, 6, 3}, 3);
  ag::Var d = leaf({2, 2, 3, 12}, 16);
  EXPECT_LE(gradcheck([&] { return ag::dot_const(ag::depth_to_space(d, 2), wt); }, {d}).max_rel, 1e-5);
}

TEST(ShapeOps, SliceConcatTransposeReshape) {
  ag::Var x = leaf({2, 3, 5}, 17);
  const auto a = ag::slice_last(x, 0, 2), b = ag::slice_last(x, 2, 3);
  EXPECT_EQ(max_abs_diff(ag::concat_last({a, b}).value(), x.value()), 0.0);
  const auto t = ag::transpose_last2(x);
  ASSERT_EQ(t.shape(), (Shape{2, 5, 3}));
  EXPECT_DOUBLE_EQ(t.value().at(1, 4, 2), x.value().at(1, 2, 4));
  const Tensor wt = random_tensor({2, 5, 3}, 2);
  EXPECT_LE(gradcheck([&] { return ag::dot_const(ag::transpose_last2(x), wt); }, {x}).max_rel, 1e-5);
  EXPECT_LE(gradcheck([&] { return ag::sum_sq(ag::concat_last({ag::slice_last(x, 1, 2), ag::scale(x, 2.0)})); }, {x}).max_rel,
            1e-6);
  EXPECT_LE(gradcheck([&] { return ag::sum_sq(ag::reshape(x, {6, 5})); }, {x}).max_rel, 1e-5);
  EXPECT_THROW(ag::slice_last(x, 4, 2), ShapeMismatch);
}

TEST(ChannelOps, PoolAndReweight) {
  ag::Var x = leaf({2, 3, 4, 5}, 18), w = leaf({2, 5}, 19);
  const auto p = ag::global_avg_pool(x).value();
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 5; ++c) {
      double s = 0;
      for (std::size_t i = 0; i < 12; ++i) s += x.value()[(n * 12 + i) * 5 + c];
      EXPECT_NEAR(p[n * 5 + c], s / 12, 1e-12);
    }
  const auto m = ag::mul_channel(x, w).value();
  EXPECT_DOUBLE_EQ(m.at(1, 2, 3, 4), x.value().at(1, 2, 3, 4) * w.value().at(1, 4));
  EXPECT_LE(gradcheck([&] { return ag::sum_sq(ag::global_avg_pool(x)); }, {x}).max_rel, 1e-5);
  EXPECT_LE(gradcheck([&] { return ag::sum_sq(ag::mul_channel(x, w)); }, {x, w}).max_rel, 1e-5);
}

TEST(Losses, L1MeanAndSubgradient) {
  ag::Var p(Tensor({4}, {1.0, 2.0, 3.0, 4.0}), true);
  const Tensor t({4}, {1.0, 0.0, 5.0, 3.5});
  const auto l = ag::l1_loss(p, t);
  EXPECT_DOUBLE_EQ(l.value()[0], (0.0 + 2.0 + 2.0 + 0.5) / 4);
  ag::backward(l);
  EXPECT_DOUBLE_EQ(p.grad()[0], 0.0);
  EXPECT_DOUBLE_EQ(p.grad()[1], 0.25);
  EXPECT_DOUBLE_EQ(p.grad()[2], -0.25);
}

TEST(ParamStoreInit, PerNameDeterminism) {
  nn::ParamStore a(5), b(5);
  a.uniform("x", {4}, 1.0);
  auto va = a.uniform("y", {8}, 1.0);
  auto vb = b.uniform("y", {8}, 1.0);  // different registration order, same name
  EXPECT_EQ(max_abs_diff(va.value(), vb.value()), 0.0);
  EXPECT_THROW(a.zeros("x", {1}), ConfigError);
  EXPECT_EQ(a.scalar_count(), 12u);
  EXPECT_THROW(nn::DepthwiseConv1d(a, "c", 3, 4), ConfigError);
}
