#include "pdelab/beta_plane.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <string>

#include "pdelab/errors.hpp"
#include "pdelab/version.hpp"

namespace pdelab::beta {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

double kappa2(const spectral::SpectralPlan& plan, std::size_t m) {
  const int ex = plan.mode_extent(0);
  const double kx = plan.wavenumbers(0)[m % static_cast<std::size_t>(ex)];
  const double ky = plan.wavenumbers(1)[m / static_cast<std::size_t>(ex)];
  return kx * kx + ky * ky;
}

bool is_nyquist(const spectral::SpectralPlan& plan, std::size_t m) {
  const int ex = plan.mode_extent(0);
  const int jx = plan.mode_index(0)[m % static_cast<std::size_t>(ex)];
  const int jy = plan.mode_index(1)[m / static_cast<std::size_t>(ex)];
  return jx == plan.n_points(0) / 2 || std::abs(jy) == plan.n_points(1) / 2;
}

void require_2d(const spectral::SpectralPlan& plan) {
  if (plan.dims() != 2) throw ConfigError("beta-plane: plan must be two-dimensional");
}

}  // namespace

void BetaConfig::validate() const {
  if (n_points < 8 || n_points % 2 != 0) throw ConfigError("beta: n_points must be even and >= 8");
  if (!(mu > 0.0)) throw ConfigError("beta: mu must be positive");
  if (!(epsilon >= 0.0)) throw ConfigError("beta: epsilon must be non-negative");
  if (!(dt > 0.0)) throw ConfigError("beta: dt must be positive");
  if (!(delta_k > 0.0)) throw ConfigError("beta: delta_k must be positive");
  if (epsilon > 0.0 && !(k_f + delta_k < n_points / 3.0))
    throw ConfigError("beta: forcing annulus k_f + delta_k must lie below n_points/3");
  if (hyperviscosity && (hyperviscosity->coefficient < 0.0 || hyperviscosity->order < 1))
    throw ConfigError("beta: invalid hyperviscosity");
}

spectral::PlanPtr BetaConfig::make_plan() const { return spectral::make_plan_2d(n_points, kTwoPi); }

BetaState initial_state(const BetaConfig& config, const spectral::SpectralPlan& plan) {
  require_2d(plan);
  BetaState s;
  s.zeta_modes.assign(plan.mode_count(), Complex{});
  s.rng = make_rng(config.seed, {0x6265});
  return s;
}

bool in_forcing_annulus(const BetaConfig& config, const spectral::SpectralPlan& plan, std::size_t m) {
  const int ex = plan.mode_extent(0);
  const int jx = plan.mode_index(0)[m % static_cast<std::size_t>(ex)];
  if (jx == 0) return false;
  const double kappa = std::sqrt(kappa2(plan, m));
  return std::abs(kappa - config.k_f) <= config.delta_k / 2.0;
}

std::vector<Complex> draw_forcing(const BetaConfig& config, const spectral::SpectralPlan& plan, Rng& rng) {
  require_2d(plan);
  std::vector<Complex> xi(plan.mode_count());
  if (config.epsilon == 0.0) return xi;

  // Each stored annulus mode has jx > 0 and stands for a conjugate pair.
  double inv_k2_sum = 0.0;
  for (std::size_t m = 0; m < xi.size(); ++m)
    if (in_forcing_annulus(config, plan, m)) inv_k2_sum += plan.conjugate_weight(m) / kappa2(plan, m);
  if (inv_k2_sum == 0.0) throw ConfigError("beta: forcing annulus contains no resolved modes");

  const double n2 = static_cast<double>(plan.size()) * static_cast<double>(plan.size());
  const double amplitude = std::sqrt(2.0 * config.epsilon * n2 / inv_k2_sum / config.dt);
  std::uniform_real_distribution<double> phase(0.0, kTwoPi);
  for (std::size_t m = 0; m < xi.size(); ++m)
    if (in_forcing_annulus(config, plan, m)) xi[m] = std::polar(amplitude, phase(rng));
  return xi;
}

double injection_rate(std::span<const Complex> forcing, const BetaConfig& config,
                      const spectral::SpectralPlan& plan) {
  const double n2 = static_cast<double>(plan.size()) * static_cast<double>(plan.size());
  double sum = 0.0;
  for (std::size_t m = 1; m < forcing.size(); ++m) {
    const double k2 = kappa2(plan, m);
    if (k2 > 0.0) sum += plan.conjugate_weight(m) * std::norm(forcing[m]) / k2;
  }
  return 0.5 * config.dt * sum / n2;
}

double kinetic_energy(std::span<const Complex> zeta, const spectral::SpectralPlan& plan) {
  require_2d(plan);
  const double n2 = static_cast<double>(plan.size()) * static_cast<double>(plan.size());
  double sum = 0.0;
  for (std::size_t m = 0; m < zeta.size(); ++m) {
    const double k2 = kappa2(plan, m);
    if (k2 > 0.0) sum += plan.conjugate_weight(m) * std::norm(zeta[m]) / k2;
  }
  return 0.5 * sum / n2;
}

Velocity velocity(std::span<const Complex> zeta, const spectral::SpectralPlan& plan) {
  require_2d(plan);
  const std::size_t mc = plan.mode_count();
  const int ex = plan.mode_extent(0);
  std::vector<Complex> uh(mc), vh(mc);
  for (std::size_t m = 0; m < mc; ++m) {
    const double k2 = kappa2(plan, m);
    if (k2 == 0.0 || is_nyquist(plan, m)) continue;
    const Complex psi = -zeta[m] / k2;
    const double kx = plan.wavenumbers(0)[m % static_cast<std::size_t>(ex)];
    const double ky = plan.wavenumbers(1)[m / static_cast<std::size_t>(ex)];
    uh[m] = Complex(0.0, -ky) * psi;
    vh[m] = Complex(0.0, kx) * psi;
  }
  Velocity out{std::vector<double>(plan.size()), std::vector<double>(plan.size())};
  plan.inverse(uh, out.u);
  plan.inverse(vh, out.v);
  return out;
}

std::vector<double> vorticity(std::span<const Complex> zeta, const spectral::SpectralPlan& plan) {
  std::vector<double> z(plan.size());
  plan.inverse(zeta, z);
  return z;
}

Solver::Solver(BetaConfig config, spectral::PlanPtr plan)
    : Solver(config, plan, initial_state(config, *plan)) {}

Solver::Solver(BetaConfig config, spectral::PlanPtr plan, BetaState state)
    : config_(std::move(config)), plan_(std::move(plan)), state_(std::move(state)) {
  config_.validate();
  require_2d(*plan_);
  if (plan_->n_points(0) != config_.n_points || plan_->n_points(1) != config_.n_points)
    throw ConfigError("beta: plan resolution differs from config");
  const std::size_t mc = plan_->mode_count();
  if (state_.zeta_modes.size() != mc) throw ShapeError("beta: state does not match plan");

  inv_kappa2_.resize(mc);
  decay_.assign(mc, 1.0);
  for (std::size_t m = 0; m < mc; ++m) {
    const double k2 = kappa2(*plan_, m);
    inv_kappa2_[m] = k2 > 0.0 ? 1.0 / k2 : 0.0;
    if (config_.hyperviscosity)
      decay_[m] = std::exp(-config_.hyperviscosity->coefficient * std::pow(k2, config_.hyperviscosity->order) *
                           config_.dt);
    if (config_.filter) decay_[m] *= plan_->filter_gain()[m];
    if (is_nyquist(*plan_, m) || k2 == 0.0) decay_[m] = 0.0;
  }
  for (auto* v : {&k1_, &k2_, &k3_, &k4_, &stage_, &tmp_, &work_a_, &work_b_}) v->resize(mc);
  for (auto* v : {&u_, &v_, &z_}) v->resize(plan_->size());
}

void Solver::tendency(std::span<const Complex> zeta, std::span<Complex> out) {
  const auto& plan = *plan_;
  const std::size_t mc = plan.mode_count();
  const auto mask = plan.dealias_mask();
  const auto kxs = plan.wavenumbers(0);
  const auto kys = plan.wavenumbers(1);
  const auto ex = static_cast<std::size_t>(plan.mode_extent(0));

  // Dealiased u, v and zeta in physical space.
  for (std::size_t m = 0; m < mc; ++m) {
    if (!mask[m]) {
      work_a_[m] = work_b_[m] = tmp_[m] = 0.0;
      continue;
    }
    const Complex psi = -zeta[m] * inv_kappa2_[m];
    work_a_[m] = Complex(0.0, -kys[m / ex]) * psi;
    work_b_[m] = Complex(0.0, kxs[m % ex]) * psi;
    tmp_[m] = zeta[m];
  }
  plan.inverse(work_a_, u_);
  plan.inverse(work_b_, v_);
  plan.inverse(tmp_, z_);
  for (std::size_t i = 0; i < u_.size(); ++i) {
    u_[i] *= z_[i];
    v_[i] *= z_[i];
  }
  plan.forward(u_, work_a_);
  plan.forward(v_, work_b_);

  for (std::size_t m = 0; m < mc; ++m) {
    const double kx = kxs[m % ex];
    const double ky = kys[m / ex];
    Complex adv = mask[m] ? Complex(0.0, kx) * work_a_[m] + Complex(0.0, ky) * work_b_[m] : Complex{};
    const Complex psi = -zeta[m] * inv_kappa2_[m];
    out[m] = -adv - Complex(0.0, config_.beta * kx) * psi - config_.mu * zeta[m];
  }
}

void Solver::step() {
  auto& z = state_.zeta_modes;
  const std::size_t mc = z.size();
  const double dt = config_.dt;

  tendency(z, k1_);
  auto& stage = stage_;
  for (std::size_t m = 0; m < mc; ++m) stage[m] = z[m] + 0.5 * dt * k1_[m];
  tendency(stage, k2_);
  for (std::size_t m = 0; m < mc; ++m) stage[m] = z[m] + 0.5 * dt * k2_[m];
  tendency(stage, k3_);
  for (std::size_t m = 0; m < mc; ++m) stage[m] = z[m] + dt * k3_[m];
  tendency(stage, k4_);

  const std::vector<Complex> xi = draw_forcing(config_, *plan_, state_.rng);
  bool finite = true;
  for (std::size_t m = 0; m < mc; ++m) {
    Complex next = z[m] + dt / 6.0 * (k1_[m] + 2.0 * k2_[m] + 2.0 * k3_[m] + k4_[m]) + dt * xi[m];
    next *= decay_[m];
    z[m] = next;
    finite = finite && std::isfinite(next.real()) && std::isfinite(next.imag());
  }
  if (!finite) throw DivergenceError("beta-plane integration diverged", state_.step);
  ++state_.step;
  state_.time = static_cast<double>(state_.step) * dt;
}

void Solver::advance(std::size_t n_steps) {
  for (std::size_t i = 0; i < n_steps; ++i) step();
}

void step(BetaState& state, const BetaConfig& config, const spectral::PlanPtr& plan) {
  Solver solver(config, plan, std::move(state));
  solver.step();
  state = std::move(solver.state());
}

std::vector<double> zonal_mean(std::span<const double> values, int nx, int ny) {
  if (values.size() != static_cast<std::size_t>(nx) * static_cast<std::size_t>(ny))
    throw ShapeError("zonal_mean: size mismatch");
  std::vector<double> out(static_cast<std::size_t>(ny));
  for (int iy = 0; iy < ny; ++iy) {
    double s = 0.0;
    for (int ix = 0; ix < nx; ++ix) s += values[static_cast<std::size_t>(iy * nx + ix)];
    out[static_cast<std::size_t>(iy)] = s / nx;
  }
  return out;
}

spectral::Field zonal_mean(const spectral::Field& field2d) {
  if (!field2d.plan || field2d.plan->dims() != 2) throw ShapeError("zonal_mean: need a 2D field");
  const auto& p = *field2d.plan;
  auto profile = zonal_mean(field2d.values, p.n_points(0), p.n_points(1));
  return spectral::Field(std::move(profile), spectral::make_plan_1d(p.n_points(1), p.domain_length(1)),
                         field2d.time);
}

std::vector<double> zonal_velocity(std::span<const Complex> zeta, const spectral::SpectralPlan& plan) {
  const Velocity vel = velocity(zeta, plan);
  return zonal_mean(vel.u, plan.n_points(0), plan.n_points(1));
}

EddyFields eddy_decomposition(std::span<const Complex> zeta, const spectral::SpectralPlan& plan) {
  const int nx = plan.n_points(0);
  const int ny = plan.n_points(1);
  const Velocity vel = velocity(zeta, plan);
  const std::vector<double> z = vorticity(zeta, plan);

  EddyFields e;
  e.U = zonal_mean(vel.u, nx, ny);
  const auto V = zonal_mean(vel.v, nx, ny);
  const auto Z = zonal_mean(z, nx, ny);
  e.u_eddy.resize(plan.size());
  e.v_eddy.resize(plan.size());
  e.zeta_eddy.resize(plan.size());
  std::vector<double> flux(plan.size());
  for (int iy = 0; iy < ny; ++iy) {
    for (int ix = 0; ix < nx; ++ix) {
      const auto i = static_cast<std::size_t>(iy * nx + ix);
      e.u_eddy[i] = vel.u[i] - e.U[static_cast<std::size_t>(iy)];
      e.v_eddy[i] = vel.v[i] - V[static_cast<std::size_t>(iy)];
      e.zeta_eddy[i] = z[i] - Z[static_cast<std::size_t>(iy)];
      flux[i] = e.zeta_eddy[i] * e.v_eddy[i];
    }
  }
  // The solver drops products above the 2/3 band; so does the budget.
  std::vector<Complex> fm(plan.mode_count());
  plan.forward(flux, fm);
  const auto mask = plan.dealias_mask();
  for (std::size_t m = 0; m < fm.size(); ++m)
    if (!mask[m]) fm[m] = 0.0;
  plan.inverse(fm, flux);
  e.reynolds = zonal_mean(flux, nx, ny);
  return e;
}

BudgetRecord eddy_mean_budget(const BetaState& before, const BetaState& after, const BetaConfig& config,
                              const spectral::SpectralPlan& plan) {
  require_2d(plan);
  const double dt = after.time - before.time;
  if (!(dt > 0.0)) throw ConfigError("eddy_mean_budget: states must be ordered in time");
  const EddyFields e0 = eddy_decomposition(before.zeta_modes, plan);
  const EddyFields e1 = eddy_decomposition(after.zeta_modes, plan);
  const int ny = plan.n_points(1);

  // Hyperviscous damping of U(y): -nu k_y^(2n) in spectral space.
  auto damping = [&](const std::vector<double>& U) {
    std::vector<double> d(U.size());
    for (std::size_t i = 0; i < U.size(); ++i) d[i] = -config.mu * U[i];
    if (config.hyperviscosity && config.hyperviscosity->coefficient > 0.0) {
      auto p1 = spectral::make_plan_1d(ny, plan.domain_length(1));
      std::vector<Complex> m(p1->mode_count());
      p1->forward(U, m);
      const auto k = p1->wavenumbers(0);
      for (std::size_t j = 0; j < m.size(); ++j)
        m[j] *= -config.hyperviscosity->coefficient * std::pow(k[j] * k[j], config.hyperviscosity->order);
      std::vector<double> h(U.size());
      p1->inverse(m, h);
      for (std::size_t i = 0; i < U.size(); ++i) d[i] += h[i];
    }
    return d;
  };
  const auto d0 = damping(e0.U);
  const auto d1 = damping(e1.U);

  BudgetRecord r;
  const auto n = static_cast<std::size_t>(ny);
  r.U = e1.U;
  r.dU_dt.resize(n);
  r.damping_term.resize(n);
  r.reynolds_term.resize(n);
  r.residual.resize(n);
  double max_term = 0.0, max_res = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    r.dU_dt[i] = (e1.U[i] - e0.U[i]) / dt;
    r.damping_term[i] = 0.5 * (d0[i] + d1[i]);
    r.reynolds_term[i] = 0.5 * (e0.reynolds[i] + e1.reynolds[i]);
    r.residual[i] = r.dU_dt[i] - r.damping_term[i] - r.reynolds_term[i];
    max_term = std::max({max_term, std::abs(r.dU_dt[i]), std::abs(r.damping_term[i]),
                         std::abs(r.reynolds_term[i])});
    max_res = std::max(max_res, std::abs(r.residual[i]));
  }
  r.relative_residual = max_term > 0.0 ? max_res / max_term : 0.0;
  return r;
}

Json config_to_json(const BetaConfig& c) {
  Json j{{"beta", c.beta},         {"mu", c.mu}, {"epsilon", c.epsilon}, {"k_f", c.k_f},
         {"delta_k", c.delta_k},   {"dt", c.dt}, {"n_points", c.n_points}, {"seed", c.seed},
         {"filter", c.filter}};
  if (c.hyperviscosity)
    j["hyperviscosity"] = {{"coefficient", c.hyperviscosity->coefficient}, {"order", c.hyperviscosity->order}};
  else
    j["hyperviscosity"] = nullptr;
  return j;
}

Trajectory generate_dataset(const BetaConfig& config, std::size_t n_snapshots, double snapshot_interval,
                            double warmup) {
  config.validate();
  const double ratio = snapshot_interval / config.dt;
  if (!(snapshot_interval > 0.0) || std::abs(ratio - std::round(ratio)) > 1e-9 * ratio)
    throw ConfigError("beta: snapshot_interval must be an integer multiple of dt");
  if (warmup < 0.0) throw ConfigError("beta: warmup must be non-negative");
  const auto per_snap = static_cast<std::size_t>(std::llround(ratio));
  const auto warmup_steps = static_cast<std::size_t>(std::llround(warmup / config.dt));

  Solver solver(config, config.make_plan());
  Trajectory traj({static_cast<std::size_t>(config.n_points)}, snapshot_interval,
                  static_cast<double>(warmup_steps) * config.dt);
  traj.metadata = {{"equation", "beta"},
                   {"parameters", config_to_json(config)},
                   {"dims", 1},
                   {"n_points", config.n_points},
                   {"domain_length", kTwoPi},
                   {"conditioning", config.beta},
                   {"variable", "U"},
                   {"dt", config.dt},
                   {"seed", config.seed},
                   {"creation", {{"tool", kToolName}, {"version", kVersion}}}};
  try {
    solver.advance(warmup_steps);
    for (std::size_t s = 0; s < n_snapshots; ++s) {
      if (s > 0) solver.advance(per_snap);
      traj.append(zonal_velocity(solver.state().zeta_modes, solver.plan()));
    }
  } catch (const DivergenceError& e) {
    throw DivergenceError(std::string(e.what()) + "; " + std::to_string(traj.n_frames()) +
                              " profiles recorded before divergence",
                          e.step());
  }
  return traj;
}

Trajectory vorticity_snapshot(const BetaState& state, const BetaConfig& config,
                              const spectral::SpectralPlan& plan) {
  Trajectory t({static_cast<std::size_t>(plan.n_points(1)), static_cast<std::size_t>(plan.n_points(0))},
               config.dt, state.time);
  t.metadata = {{"equation", "beta"},
                {"parameters", config_to_json(config)},
                {"dims", 2},
                {"n_points", config.n_points},
                {"domain_length", kTwoPi},
                {"variable", "zeta"},
                {"step", state.step},
                {"creation", {{"tool", kToolName}, {"version", kVersion}}}};
  t.append(vorticity(state.zeta_modes, plan));
  return t;
}

}  // namespace pdelab::beta
