#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "pdelab/errors.hpp"
#include "pdelab/ks.hpp"

using namespace pdelab;
using namespace pdelab::ks;

namespace {

constexpr double kPi = std::numbers::pi;

// Series coefficients of the Cox-Matthews weights divided by h, z = h * L.
double series(double z, const std::function<double(int n)>& coeff, int first) {
  double s = 0.0, zp = 1.0;
  for (int n = first; n < first + 30; ++n) {
    s += coeff(n) * zp;
    zp *= z;
  }
  return s;
}

double inv_fact(int n) { return n < 0 ? 0.0 : 1.0 / std::tgamma(n + 1.0); }

std::vector<double> smooth_initial(int n, double L) {
  std::vector<double> u(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const double x = L * i / n;
    u[static_cast<std::size_t>(i)] = std::cos(2 * kPi * x / L) * (1.0 + std::sin(2 * kPi * x / L));
  }
  return u;
}

std::vector<double> solve(double L, int n, double dt, double T, std::span<const double> u0) {
  Integrator integ(spectral::make_plan_1d(n, L), dt, u0);
  integ.advance(static_cast<std::size_t>(std::llround(T / dt)));
  return integ.field();
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST(KsConfig, GridSizeRule) {
  EXPECT_EQ(default_grid_size(22), 56);
  EXPECT_EQ(default_grid_size(36), 90);
  EXPECT_EQ(default_grid_size(48), 120);
  EXPECT_EQ(default_grid_size(64), 160);
  EXPECT_EQ(default_grid_size(98), 246);
  EXPECT_EQ(default_grid_size(128), 320);
  EXPECT_EQ(default_grid_size(200), 500);
}

TEST(KsConfig, Validation) {
  KSConfig c;
  EXPECT_NO_THROW(c.validate());
  c.snapshot_interval = 0.03;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.n_points = 6;
  EXPECT_THROW(c.validate(), ConfigError);
  c.n_points = 8;
  c.L = 100.0;  // 4 modes cannot resolve the unstable band up to L / 2pi
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Tables, LinearSymbolAndNeutralModes) {
  const auto plan = spectral::make_plan_1d(16, 2 * kPi);
  const auto t = build_tables(0.025, *plan);
  EXPECT_EQ(t.E[0], 1.0);
  EXPECT_EQ(t.E[1], 1.0);
  EXPECT_EQ(t.E2[1], 1.0);
  for (std::size_t m = 0; m < t.linear.size(); ++m) {
    EXPECT_LE(t.linear[m], 0.25);
    for (double v : {t.E[m], t.E2[m], t.Q[m], t.f1[m], t.f2[m], t.f3[m]}) EXPECT_TRUE(std::isfinite(v));
  }
}

TEST(Tables, ContourWeightsMatchTaylorSeries) {
  const double h = 0.025;
  for (double L : {2 * kPi, 22.0, 100.0}) {
    const auto plan = spectral::make_plan_1d(default_grid_size(L) < 16 ? 16 : default_grid_size(L), L);
    const auto t = build_tables(h, *plan);
    for (std::size_t m = 0; m < t.linear.size(); ++m) {
      const double z = h * t.linear[m];
      if (std::abs(z) > 0.5) continue;
      const double q = series(z, [](int n) { return std::pow(0.5, n + 1) * inv_fact(n + 1); }, 0);
      const double f1 = series(z, [](int n) { return 4 * inv_fact(n + 3) - 3 * inv_fact(n + 2) + inv_fact(n + 1); }, 0);
      const double f2 = series(z, [](int n) { return inv_fact(n + 2) - 2 * inv_fact(n + 3); }, 0);
      const double f3 = series(z, [](int n) { return 4 * inv_fact(n + 3) - inv_fact(n + 2); }, 0);
      EXPECT_NEAR(t.Q[m] / h, q, 1e-10);
      EXPECT_NEAR(t.f1[m] / h, f1, 1e-10);
      EXPECT_NEAR(t.f2[m] / h, f2, 1e-10);
      EXPECT_NEAR(t.f3[m] / h, f3, 1e-10);
    }
  }
  const auto plan = spectral::make_plan_1d(16, 2 * kPi);
  const auto t = build_tables(h, *plan);
  EXPECT_NEAR(t.f1[0], h / 6, 1e-10 * h);
  EXPECT_NEAR(t.Q[0], h / 2, 1e-10 * h);
}

TEST(Tables, MostUnstableModeAtL22) {
  const auto plan = spectral::make_plan_1d(56, 22.0);
  const auto t = build_tables(0.025, *plan);
  const auto best = std::max_element(t.linear.begin(), t.linear.end()) - t.linear.begin();
  EXPECT_EQ(best, std::lround(22.0 / (2 * kPi * std::sqrt(2.0))));
  EXPECT_NEAR(t.linear[static_cast<std::size_t>(best)], 0.25, 0.05);
}

TEST(Step, ZeroIsAFixedPoint) {
  std::vector<double> zero(32, 0.0);
  const auto u = solve(22.0, 32, 0.025, 5.0, zero);
  for (double v : u) EXPECT_EQ(v, 0.0);
}

TEST(Step, SingleModeLinearDecay) {
  // (L, mode index): decay rates 12, 0.40 and 2.1 per time unit.
  for (const auto& [L, j] : std::vector<std::pair<double, int>>{{2 * kPi, 2}, {22.0, 4}, {22.0, 5}}) {
    const double k = 2 * kPi * j / L, eps = 1e-8;
    const double expect = std::exp(k * k - k * k * k * k);
    std::vector<double> u0(56);
    for (int i = 0; i < 56; ++i) u0[static_cast<std::size_t>(i)] = eps * std::sin(j * 2 * kPi * i / 56);
    const auto u = solve(L, 56, 0.025, 1.0, u0);
    for (std::size_t i = 0; i < 56; ++i)
      if (std::abs(u0[i]) > 0.5 * eps) EXPECT_NEAR(u[i] / u0[i], expect, 1e-6 * expect) << L << ' ' << j;
  }
}

TEST(Step, FourthOrderConvergence) {
  // The stiff tail reduces the observed order at coarse steps (ratio about
  // 10 at dt = 0.05); the asymptotic regime starts near dt = 0.0125.
  const double L = 22.0, T = 1.0;
  const auto u0 = smooth_initial(56, L);
  const auto ref = solve(L, 56, 1.0 / 8192, T, u0);
  const auto e1 = max_abs_diff(solve(L, 56, 0.025, T, u0), ref);
  const auto e2 = max_abs_diff(solve(L, 56, 0.0125, T, u0), ref);
  const auto e3 = max_abs_diff(solve(L, 56, 0.00625, T, u0), ref);
  EXPECT_GT(e1 / e2, 8.0);
  EXPECT_NEAR(e2 / e3, 16.0, 4.0);
}

TEST(Step, MeanIsConserved) {
  auto u0 = random_initial_field(56, 0.1, 3);
  for (double& v : u0) v += 0.3;
  Integrator integ(spectral::make_plan_1d(56, 22.0), 0.025, u0);
  for (int block = 0; block < 20; ++block) {
    integ.advance(500);
    const auto u = integ.field();
    double mean = 0.0;
    for (double v : u) mean += v;
    EXPECT_NEAR(mean / 56.0, 0.3, 1e-8);
  }
}

TEST(Step, ChaoticAttractorIsBounded) {
  Integrator integ(spectral::make_plan_1d(56, 22.0), 0.025, random_initial_field(56, 0.1, 1));
  double peak = 0.0;
  for (int block = 0; block < 1000; ++block) {
    integ.advance(100);
    for (double v : integ.field()) peak = std::max(peak, std::abs(v));
  }
  EXPECT_LT(peak, 5.0);
  EXPECT_GT(peak, 1.0);
}

TEST(Step, RealityOfModes) {
  Integrator integ(spectral::make_plan_1d(56, 22.0), 0.025, random_initial_field(56, 0.1, 2));
  integ.advance(4000);
  EXPECT_EQ(integ.modes()[0].imag(), 0.0);
  EXPECT_LT(std::abs(integ.modes().back().imag()), 1e-12);
}

TEST(Step, DivergenceCarriesStepIndex) {
  std::vector<double> huge(32);
  for (std::size_t i = 0; i < huge.size(); ++i) huge[i] = (i % 2 ? 1e300 : -1e300) * std::sin(0.3 * i);
  Integrator integ(spectral::make_plan_1d(32, 22.0), 0.025, huge);
  integ.advance(0);
  try {
    integ.advance(10);
    FAIL() << "expected divergence";
  } catch (const DivergenceError& e) {
    EXPECT_GE(e.step(), 0);
    EXPECT_LT(e.step(), 10);
  }
}

TEST(Dataset, ShapesAndMetadata) {
  KSConfig c;
  c.L = 36.0;
  c.n_snapshots = 500;
  c.warmup_time = 50.0;
  c.seed = 4;
  const auto t = generate_dataset(c);
  EXPECT_EQ(t.n_frames(), 500u);
  EXPECT_EQ(t.frame_shape, (std::vector<std::size_t>{90}));
  EXPECT_EQ(t.metadata.at("domain_length"), 36.0);
  EXPECT_EQ(t.metadata.at("n_points"), 90);
  EXPECT_EQ(t.metadata.at("seed"), 4);
  EXPECT_DOUBLE_EQ(t.t0, 50.0);
  EXPECT_DOUBLE_EQ(t.snapshot_interval, 1.0);
}

TEST(Dataset, PretrainingShape) {
  KSConfig c;
  c.n_snapshots = 5000;
  const auto t = generate_dataset(c);
  EXPECT_EQ(t.n_frames(), 5000u);
  EXPECT_EQ(t.frame_shape[0], 56u);
}

TEST(Dataset, NoWarmupReturnsInitialField) {
  KSConfig c;
  c.warmup_time = 0.0;
  c.n_snapshots = 1;
  c.seed = 9;
  const auto t = generate_dataset(c);
  const auto u0 = random_initial_field(56, 0.1, 9);
  ASSERT_EQ(t.data.size(), 56u);
  for (std::size_t i = 0; i < 56; ++i) EXPECT_NEAR(t.data[i], u0[i], 1e-14);
  double sd = 0.0;
  for (double v : u0) sd += v * v;
  EXPECT_NEAR(std::sqrt(sd / 56), 0.1, 0.03);
}

TEST(Dataset, SeedDeterminism) {
  KSConfig c;
  c.warmup_time = 20.0;
  c.n_snapshots = 20;
  c.seed = 5;
  const auto a = generate_dataset(c), b = generate_dataset(c);
  EXPECT_EQ(a.data, b.data);
  c.seed = 6;
  EXPECT_NE(generate_dataset(c).data, a.data);
}
