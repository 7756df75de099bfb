#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "pdelab/diff.hpp"
#include "pdelab/errors.hpp"

namespace ad = pdelab::ad;
using ad::Graph;
using ad::Tensor;
using ad::Var;

namespace {

Tensor<double> iota(std::vector<std::size_t> shape, double start = 0.0) {
  Tensor<double> t(std::move(shape));
  std::iota(t.data.begin(), t.data.end(), start);
  return t;
}

Tensor<double> random_tensor(std::vector<std::size_t> shape, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Tensor<double> t(std::move(shape));
  for (double& v : t.data) v = u(rng);
  return t;
}

}  // namespace

TEST(DiffGradcheck, EveryRegisteredPrimitivePasses) {
  for (const auto& [name, op] : ad::op_registry()) {
    const auto report = ad::check_gradients(name);
    EXPECT_TRUE(report.passed) << name << " worst relative error " << report.worst;
    EXPECT_EQ(report.max_rel_error.size(), op.input_shapes.size());
  }
}

TEST(DiffGradcheck, SeveralSeeds) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    ad::GradCheckOptions opt;
    opt.seed = seed;
    for (const char* name : {"layer_normalize", "softmax_lastaxis", "dft_modulus", "window_dot", "crps"})
      EXPECT_TRUE(ad::check_gradients(name, opt).passed) << name << " seed " << seed;
  }
}

TEST(DiffGradcheck, CorruptedBackwardFails) {
  // Doubling the true adjoint of x^2.
  ad::OpBuilder square_wrong = [](Graph<double>& g, std::span<const Var> in) {
    const std::size_t xi = in[0].id;
    Tensor<double> y = g.value(in[0]);
    for (double& v : y.data) v *= v;
    return g.record(std::move(y), {in[0]}, [xi](Graph<double>& g, std::size_t self) {
      const auto dy = g.grad_buffer(self);
      const auto& x = g.value(xi).data;
      auto dx = g.grad_buffer(xi);
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += 4.0 * x[i] * dy[i];
    });
  };
  const auto report = ad::check_gradients("square_wrong", square_wrong, {{3, 4}});
  EXPECT_FALSE(report.passed);
  EXPECT_GT(report.worst, 0.1);
}

TEST(DiffLinear, IdentityWeightLeavesInputUnchanged) {
  Graph<double> g;
  const Tensor<double> x = random_tensor({2, 3, 4}, 1);
  Tensor<double> w({4, 4});
  for (std::size_t i = 0; i < 4; ++i) w.data[i * 4 + i] = 1.0;
  const Var y = ad::linear(g, g.constant(x), g.constant(w), g.constant(Tensor<double>({4})));
  EXPECT_EQ(g.value(y).data, x.data);
}

TEST(DiffLinear, SpatialExtentIsFree) {
  Graph<float> g;
  const Var w = g.constant(Tensor<float>({3, 5}, 0.5f));
  for (std::size_t D : {56u, 500u}) {
    const Var y = ad::linear(g, g.constant(Tensor<float>({1, D, 3}, 1.0f)), w);
    EXPECT_EQ(g.shape(y), (std::vector<std::size_t>{1, D, 5}));
    EXPECT_FLOAT_EQ(g.value(y).data.back(), 1.5f);
  }
}

TEST(DiffLinear, ShapeMismatchThrows) {
  Graph<double> g;
  EXPECT_THROW(ad::linear(g, g.constant(Tensor<double>({2, 3})), g.constant(Tensor<double>({4, 2}))),
               pdelab::ShapeError);
}

TEST(DiffLayerNorm, ConstantRowGivesZeros) {
  Graph<double> g;
  const Var y = ad::layer_normalize(g, g.constant(Tensor<double>({3, 8}, 2.5)));
  for (double v : g.value(y).data) EXPECT_EQ(v, 0.0);
}

TEST(DiffLayerNorm, RowsHaveZeroMeanUnitVariance) {
  Graph<double> g;
  const Tensor<double> x = random_tensor({4, 5, 16}, 2);
  const Var y = ad::layer_normalize(g, g.constant(x));
  const auto& v = g.value(y).data;
  for (std::size_t r = 0; r < 20; ++r) {
    double m = 0, s = 0;
    for (std::size_t c = 0; c < 16; ++c) m += v[r * 16 + c];
    m /= 16;
    for (std::size_t c = 0; c < 16; ++c) s += (v[r * 16 + c] - m) * (v[r * 16 + c] - m);
    s /= 16;
    EXPECT_NEAR(m, 0.0, 1e-6);
    // The stabiliser shrinks the variance slightly below one.
    EXPECT_NEAR(s, 1.0, 1e-3);
  }
}

TEST(DiffActivations, GeluAndSoftmaxValues) {
  Graph<double> g;
  const Var y = ad::gelu(g, g.constant(Tensor<double>({3}, {0.0, 1.0, -1.0})));
  EXPECT_EQ(g.value(y).data[0], 0.0);
  // 1 * Phi(1) and -1 * Phi(-1) from the closed form.
  EXPECT_NEAR(g.value(y).data[1], 0.8413447460685429, 1e-15);
  EXPECT_NEAR(g.value(y).data[2], -0.15865525393145707, 1e-15);

  const Var s = ad::softmax_lastaxis(g, g.constant(Tensor<double>({2, 9}, 3.0)));
  for (double v : g.value(s).data) EXPECT_NEAR(v, 1.0 / 9.0, 1e-15);
}

TEST(DiffActivations, SoftmaxIsPositiveAndNormalised) {
  Graph<float> g;
  Tensor<float> x({6, 17});
  std::mt19937 rng(5);
  std::uniform_real_distribution<float> u(-30.0f, 30.0f);
  for (float& v : x.data) v = u(rng);
  const Var s = ad::softmax_lastaxis(g, g.constant(x));
  for (std::size_t r = 0; r < 6; ++r) {
    double sum = 0;
    for (std::size_t j = 0; j < 17; ++j) {
      const float v = g.value(s).data[r * 17 + j];
      EXPECT_GE(v, 0.0f);
      sum += v;
    }
    EXPECT_NEAR(sum, 1.0, 1e-6);
  }
}

TEST(DiffUnfold, WindowsWrapAround) {
  Graph<double> g;
  const Var y = ad::unfold_circular(g, g.constant(iota({1, 4, 1})), 3);
  EXPECT_EQ(g.shape(y), (std::vector<std::size_t>{1, 4, 3, 1}));
  const std::vector<double> expect{3, 0, 1, 0, 1, 2, 1, 2, 3, 2, 3, 0};
  EXPECT_EQ(g.value(y).data, expect);
}

TEST(DiffUnfold, CentreOffsetIsIdentity) {
  Graph<double> g;
  const Tensor<double> x = random_tensor({2, 7, 3}, 3);
  const Var y = ad::unfold_circular(g, g.constant(x), 5);
  const auto& v = g.value(y).data;
  for (std::size_t p = 0; p < 14; ++p)
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(v[(p * 5 + 2) * 3 + c], x.data[p * 3 + c]);
}

TEST(DiffUnfold, ShiftCommutes) {
  Graph<double> g;
  const Tensor<double> x = random_tensor({1, 9, 2}, 4);
  Tensor<double> xs(x.shape);
  const std::size_t s = 4;
  for (std::size_t d = 0; d < 9; ++d)
    for (std::size_t c = 0; c < 2; ++c) xs.data[((d + s) % 9) * 2 + c] = x.data[d * 2 + c];
  const auto& a = g.value(ad::unfold_circular(g, g.constant(x), 3)).data;
  const auto& b = g.value(ad::unfold_circular(g, g.constant(xs), 3)).data;
  for (std::size_t d = 0; d < 9; ++d)
    for (std::size_t k = 0; k < 6; ++k) EXPECT_EQ(b[((d + s) % 9) * 6 + k], a[d * 6 + k]);
}

TEST(DiffUnfold, AllOnesAdjointCountsWindows) {
  Graph<double> g;
  const Var x = g.parameter(random_tensor({2, 6, 3}, 5));
  const Var y = ad::unfold_circular(g, x, 5);
  g.backward(ad::weighted_sum(g, y, Tensor<double>(g.shape(y), 1.0)));
  for (double v : g.grad(x)) EXPECT_EQ(v, 5.0);
}

TEST(DiffUnfold, InvalidWindowThrows) {
  Graph<double> g;
  const Var x = g.constant(Tensor<double>({1, 4, 2}));
  EXPECT_THROW(ad::unfold_circular(g, x, 2), pdelab::ConfigError);
  EXPECT_THROW(ad::unfold_circular(g, x, 5), pdelab::ConfigError);
}

TEST(DiffDft, ConstantInput) {
  Graph<double> g;
  const Var y = ad::dft_modulus(g, g.constant(Tensor<double>({1, 10}, -1.5)));
  ASSERT_EQ(g.shape(y), (std::vector<std::size_t>{1, 6}));
  EXPECT_NEAR(g.value(y).data[0], 15.0, 1e-12);
  for (std::size_t k = 1; k < 6; ++k) EXPECT_NEAR(g.value(y).data[k], 0.0, 1e-12);
}

TEST(DiffDft, ShiftInvariant) {
  Graph<double> g;
  const Tensor<double> x = random_tensor({1, 12}, 6);
  Tensor<double> xs(x.shape);
  for (std::size_t d = 0; d < 12; ++d) xs.data[(d + 5) % 12] = x.data[d];
  const auto& a = g.value(ad::dft_modulus(g, g.constant(x))).data;
  const auto& b = g.value(ad::dft_modulus(g, g.constant(xs))).data;
  for (std::size_t k = 0; k < a.size(); ++k) EXPECT_NEAR(a[k], b[k], 1e-12);
}

TEST(DiffDft, ZeroModulusHasZeroAdjoint) {
  // A constant input: every k > 0 mode is exactly zero.
  Graph<double> g;
  const Var xv = g.parameter(Tensor<double>({1, 8}, 0.75));
  const Var y = ad::dft_modulus(g, xv);
  ASSERT_EQ(g.value(y).data[3], 0.0);
  Tensor<double> w({1, 5});
  w.data = {0.0, 1.0, 1.0, 1.0, 1.0};
  g.backward(ad::weighted_sum(g, y, w));
  for (double v : g.grad(xv)) EXPECT_NEAR(v, 0.0, 1e-12);
}

TEST(DiffLosses, MseMaeValues) {
  Graph<double> g;
  const Var t = g.constant(Tensor<double>({4}, 0.0));
  const Var p = g.constant(Tensor<double>({4}, 2.0));
  EXPECT_EQ(g.value(ad::mse(g, p, t)).data[0], 4.0);
  EXPECT_EQ(g.value(ad::mse(g, t, t)).data[0], 0.0);
  EXPECT_EQ(g.value(ad::mae(g, p, t)).data[0], 2.0);
}

TEST(DiffLosses, CrpsHandValue) {
  Graph<double> g;
  const Var y = g.constant(Tensor<double>({1}, 0.0));
  const std::vector<Var> members{g.constant(Tensor<double>({1}, 1.0)), g.constant(Tensor<double>({1}, -1.0))};
  EXPECT_DOUBLE_EQ(g.value(ad::crps(g, y, std::span<const Var>(members))).data[0], 0.5);
}

TEST(DiffLosses, CrpsSingleMemberIsMae) {
  Graph<double> g;
  const Var y = g.constant(random_tensor({9}, 7));
  const Var x = g.constant(random_tensor({9}, 8));
  const std::vector<Var> members{x};
  EXPECT_EQ(g.value(ad::crps(g, y, std::span<const Var>(members))).data[0], g.value(ad::mae(g, x, y)).data[0]);
}

TEST(DiffReparameterize, ZeroNoiseGivesMean) {
  Graph<double> g;
  const Tensor<double> mu = random_tensor({3, 4}, 9);
  const Var y = ad::reparameterize(g, g.constant(mu), g.constant(random_tensor({3, 4}, 10)), Tensor<double>({3, 4}));
  EXPECT_EQ(g.value(y).data, mu.data);
}

TEST(DiffReparameterize, ClampStopsGradient) {
  Graph<double> g;
  const Var mu = g.parameter(Tensor<double>({2}, 0.0));
  const Var ls = g.parameter(Tensor<double>({2}, {20.0, 0.5}));
  const Var y = ad::reparameterize(g, mu, ls, Tensor<double>({2}, 1.0));
  EXPECT_DOUBLE_EQ(g.value(y).data[0], std::exp(5.0));
  g.backward(ad::weighted_sum(g, y, Tensor<double>({2}, 1.0)));
  EXPECT_EQ(g.grad(ls)[0], 0.0);
  EXPECT_DOUBLE_EQ(g.grad(ls)[1], std::exp(0.5));
}

TEST(DiffGraph, BackwardRunsInReverseRecordedOrder) {
  Graph<double> g;
  const Var x = g.parameter(random_tensor({2, 5, 4}, 11));
  const Var w = g.parameter(random_tensor({4, 4}, 12));
  const Var a = ad::linear(g, x, w);
  const Var b = ad::gelu(g, a);
  const Var c = ad::layer_normalize(g, b);
  const Var d = ad::add(g, c, a);
  const Var l = ad::mean(g, d);
  g.backward(l);
  const std::vector<std::size_t> expect{l.id, d.id, c.id, b.id, a.id};
  EXPECT_EQ(g.last_backward_order(), expect);
}

TEST(DiffGraph, SharedInputsAccumulate) {
  Graph<double> g;
  const Var x = g.parameter(Tensor<double>({3}, {1.0, 2.0, 3.0}));
  const Var y = ad::add(g, x, x);
  g.backward(ad::weighted_sum(g, y, Tensor<double>({3}, 1.0)));
  for (double v : g.grad(x)) EXPECT_EQ(v, 2.0);
}

TEST(DiffGraph, ReplayIsBitIdentical) {
  Graph<double> g;
  const Var x = g.parameter(random_tensor({2, 6, 4}, 13));
  const Var w = g.parameter(random_tensor({4, 4}, 14));
  const Var l = ad::mean(g, ad::softmax_lastaxis(g, ad::linear(g, ad::layer_normalize(g, x), w)));
  g.backward(l);
  const auto gx = g.grad(x);
  const auto gw = g.grad(w);
  g.backward(l);
  EXPECT_EQ(g.grad(x), gx);
  EXPECT_EQ(g.grad(w), gw);
}

TEST(DiffGraph, ConstantsTakeNoPartInBackward) {
  Graph<double> g;
  const Var x = g.constant(random_tensor({4}, 15));
  const Var p = g.parameter(random_tensor({4}, 16));
  const Var a = ad::gelu(g, x);
  const Var l = ad::mse(g, p, a);
  g.backward(l);
  EXPECT_FALSE(g.requires_grad(a));
  EXPECT_EQ(g.last_backward_order(), std::vector<std::size_t>{l.id});
}

TEST(DiffGraph, NonFiniteRejectedWhenChecking) {
  Graph<double> g;
  g.set_check_finite(true);
  const Var x = g.constant(Tensor<double>({2}, {1.0, std::nan("")}));
  EXPECT_THROW(ad::gelu(g, x), std::domain_error);
}

TEST(DiffGraph, BackwardNeedsScalarRoot) {
  Graph<double> g;
  const Var x = g.parameter(Tensor<double>({3}));
  EXPECT_THROW(g.backward(ad::gelu(g, x)), pdelab::ShapeError);
}
