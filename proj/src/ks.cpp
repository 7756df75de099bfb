#include "pdelab/ks.hpp"

#include <cmath>
#include <numbers>
#include <random>
#include <string>

#include "pdelab/errors.hpp"
#include "pdelab/rng.hpp"
#include "pdelab/version.hpp"

namespace pdelab::ks {

int default_grid_size(double L) { return spectral::round_to_even(2.5 * L); }

int KSConfig::resolved_n() const { return n_points > 0 ? n_points : default_grid_size(L); }

std::size_t KSConfig::steps_per_snapshot() const {
  return static_cast<std::size_t>(std::llround(snapshot_interval / dt));
}

void KSConfig::validate() const {
  if (!(L > 0.0)) throw ConfigError("ks: L must be positive");
  if (!(dt > 0.0)) throw ConfigError("ks: dt must be positive");
  const int n = resolved_n();
  if (n < 8 || n % 2 != 0) throw ConfigError("ks: n_points must be even and >= 8");
  if (!(n / 2.0 > L / (2.0 * std::numbers::pi)))
    throw ConfigError("ks: n_points too small to resolve the linearly unstable modes");
  const double ratio = snapshot_interval / dt;
  if (!(snapshot_interval > 0.0) || std::abs(ratio - std::round(ratio)) > 1e-9 * ratio)
    throw ConfigError("ks: snapshot_interval must be an integer multiple of dt");
  if (warmup_time < 0.0) throw ConfigError("ks: warmup_time must be non-negative");
  if (contour_points < 16) throw ConfigError("ks: need at least 16 contour points");
}

ETDRK4Tables build_tables(double dt, const spectral::SpectralPlan& plan, int contour_points) {
  if (plan.dims() != 1) throw ConfigError("ks: plan must be one-dimensional");
  const auto k = plan.wavenumbers(0);
  const std::size_t m = plan.mode_count();

  ETDRK4Tables t;
  t.dt = dt;
  t.linear.resize(m);
  t.E.resize(m);
  t.E2.resize(m);
  t.Q.resize(m);
  t.f1.resize(m);
  t.f2.resize(m);
  t.f3.resize(m);

  std::vector<Complex> roots(static_cast<std::size_t>(contour_points));
  for (int j = 0; j < contour_points; ++j)
    roots[static_cast<std::size_t>(j)] =
        std::polar(1.0, 2.0 * std::numbers::pi * (j + 0.5) / contour_points);

  for (std::size_t i = 0; i < m; ++i) {
    const double k2 = k[i] * k[i];
    const double lin = k2 - k2 * k2;
    const double z0 = dt * lin;
    t.linear[i] = lin;
    t.E[i] = std::exp(z0);
    t.E2[i] = std::exp(z0 / 2.0);

    Complex q{}, a{}, b{}, c{};
    for (const Complex& r : roots) {
      const Complex z = z0 + r;
      const Complex ez = std::exp(z);
      const Complex z3 = z * z * z;
      q += (std::exp(z / 2.0) - 1.0) / z;
      a += (-4.0 - z + ez * (4.0 - 3.0 * z + z * z)) / z3;
      b += (2.0 + z + ez * (z - 2.0)) / z3;
      c += (-4.0 - 3.0 * z - z * z + ez * (4.0 - z)) / z3;
    }
    const double inv = 1.0 / contour_points;
    t.Q[i] = dt * (q * inv).real();
    t.f1[i] = dt * (a * inv).real();
    t.f2[i] = dt * (b * inv).real();
    t.f3[i] = dt * (c * inv).real();
  }
  return t;
}

ETDRK4Tables build_tables(const KSConfig& config, const spectral::SpectralPlan& plan) {
  config.validate();
  return build_tables(config.dt, plan, config.contour_points);
}

void nonlinear_term(std::span<const Complex> modes, std::span<Complex> out,
                    const spectral::SpectralPlan& plan) {
  thread_local std::vector<Complex> buf;
  thread_local std::vector<double> u;
  buf.assign(modes.begin(), modes.end());
  spectral::apply_dealias(buf, plan);
  u.resize(plan.size());
  plan.inverse(buf, u);
  for (double& x : u) x *= x;
  plan.forward(u, out);
  spectral::apply_dealias(out, plan);
  const auto k = plan.wavenumbers(0);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= Complex(0.0, -0.5 * k[i]);
}

namespace {

struct Stages {
  std::vector<Complex> nv, na, nb, nc, a, b, c;
  explicit Stages(std::size_t m) : nv(m), na(m), nb(m), nc(m), a(m), b(m), c(m) {}
};

void etdrk4(std::span<Complex> v, const ETDRK4Tables& t, const spectral::SpectralPlan& plan,
            std::vector<Complex>& nv, std::vector<Complex>& na, std::vector<Complex>& nb,
            std::vector<Complex>& nc, std::vector<Complex>& a, std::vector<Complex>& b,
            std::vector<Complex>& c, std::int64_t step_index) {
  const std::size_t m = v.size();
  if (m != plan.mode_count() || t.E.size() != m) throw ShapeError("ks step: size mismatch");

  nonlinear_term(v, nv, plan);
  for (std::size_t i = 0; i < m; ++i) a[i] = t.E2[i] * v[i] + t.Q[i] * nv[i];
  nonlinear_term(a, na, plan);
  for (std::size_t i = 0; i < m; ++i) b[i] = t.E2[i] * v[i] + t.Q[i] * na[i];
  nonlinear_term(b, nb, plan);
  for (std::size_t i = 0; i < m; ++i) c[i] = t.E2[i] * a[i] + t.Q[i] * (2.0 * nb[i] - nv[i]);
  nonlinear_term(c, nc, plan);

  bool finite = true;
  for (std::size_t i = 0; i < m; ++i) {
    v[i] = t.E[i] * v[i] + t.f1[i] * nv[i] + 2.0 * t.f2[i] * (na[i] + nb[i]) + t.f3[i] * nc[i];
    finite = finite && std::isfinite(v[i].real()) && std::isfinite(v[i].imag());
  }
  if (!finite) throw DivergenceError("ks integration diverged", step_index);
}

}  // namespace

void step(std::span<Complex> modes, const ETDRK4Tables& tables, const spectral::SpectralPlan& plan,
          std::int64_t step_index) {
  Stages s(modes.size());
  etdrk4(modes, tables, plan, s.nv, s.na, s.nb, s.nc, s.a, s.b, s.c, step_index);
}

Integrator::Integrator(const spectral::PlanPtr& plan, double dt, std::span<const double> initial_field,
                       int contour_points)
    : plan_(plan), tables_(build_tables(dt, *plan, contour_points)) {
  const std::size_t m = plan_->mode_count();
  for (auto* v : {&modes_, &nv_, &na_, &nb_, &nc_, &a_, &b_, &c_}) v->resize(m);
  set_field(initial_field);
}

void Integrator::set_field(std::span<const double> values) {
  plan_->forward(values, modes_);
}

void Integrator::single_step() {
  etdrk4(modes_, tables_, *plan_, nv_, na_, nb_, nc_, a_, b_, c_, steps_);
  ++steps_;
  time_ = static_cast<double>(steps_) * tables_.dt;
}

void Integrator::advance(std::size_t n_steps) {
  for (std::size_t s = 0; s < n_steps; ++s) single_step();
}

std::vector<double> Integrator::field() const {
  std::vector<double> u(plan_->size());
  plan_->inverse(modes_, u);
  return u;
}

std::vector<double> random_initial_field(int n, double std_dev, std::uint64_t seed) {
  Rng rng = make_rng(seed, {0x6b73});
  std::normal_distribution<double> normal(0.0, std_dev);
  std::vector<double> u(static_cast<std::size_t>(n));
  double mean = 0.0;
  for (double& x : u) {
    x = normal(rng);
    mean += x;
  }
  mean /= n;
  for (double& x : u) x -= mean;
  return u;
}

Json config_to_json(const KSConfig& c) {
  return Json{{"L", c.L},
              {"n_points", c.resolved_n()},
              {"dt", c.dt},
              {"snapshot_interval", c.snapshot_interval},
              {"warmup_time", c.warmup_time},
              {"n_snapshots", c.n_snapshots},
              {"seed", c.seed},
              {"init_std", c.init_std},
              {"contour_points", c.contour_points}};
}

Trajectory generate_dataset(const KSConfig& config) {
  config.validate();
  const int n = config.resolved_n();
  auto plan = spectral::make_plan_1d(n, config.L);
  Integrator integ(plan, config.dt, random_initial_field(n, config.init_std, config.seed),
                   config.contour_points);

  const auto warmup_steps = static_cast<std::size_t>(std::llround(config.warmup_time / config.dt));
  const std::size_t per_snap = config.steps_per_snapshot();

  Trajectory traj({static_cast<std::size_t>(n)}, config.snapshot_interval,
                  static_cast<double>(warmup_steps) * config.dt);
  traj.metadata = {{"equation", "ks"},
                   {"parameters", config_to_json(config)},
                   {"dims", 1},
                   {"n_points", n},
                   {"domain_length", config.L},
                   {"conditioning", config.L},
                   {"dt", config.dt},
                   {"seed", config.seed},
                   {"creation", {{"tool", kToolName}, {"version", kVersion}}}};
  traj.data.reserve(config.n_snapshots * static_cast<std::size_t>(n));

  try {
    integ.advance(warmup_steps);
    for (std::size_t s = 0; s < config.n_snapshots; ++s) {
      if (s > 0) integ.advance(per_snap);
      traj.append(integ.field());
    }
  } catch (const DivergenceError& e) {
    throw DivergenceError(std::string(e.what()) + "; " + std::to_string(traj.n_frames()) +
                              " snapshots recorded before divergence, last at t=" +
                              std::to_string(traj.n_frames() ? traj.time(traj.n_frames() - 1) : 0.0),
                          e.step());
  }
  return traj;
}

}  // namespace pdelab::ks
