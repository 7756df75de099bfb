#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "pdelab/rng.hpp"
#include "pdelab/spectral.hpp"
#include "pdelab/trajectory.hpp"

namespace pdelab::beta {

using spectral::Complex;

/// Dissipative small-scale term -nu * (-lap)^order, applied as an exact
/// per-step decay factor.
struct Hyperviscosity {
  double coefficient = 0.0;
  int order = 2;
};

/// Stochastically forced barotropic beta-plane on [0, 2pi)^2:
///   zeta_t + u . grad zeta + beta psi_x = xi - mu zeta
/// with lap psi = zeta and u = (-psi_y, psi_x).
struct BetaConfig {
  double beta = 0.9;
  double mu = 4e-2;
  double epsilon = 1e-4;
  int k_f = 16;
  double delta_k = 1.0;
  double dt = 4e-2;
  int n_points = 64;
  std::uint64_t seed = 0;
  std::optional<Hyperviscosity> hyperviscosity;
  bool filter = true;

  void validate() const;
  spectral::PlanPtr make_plan() const;
};

struct BetaState {
  std::vector<Complex> zeta_modes;
  double time = 0.0;
  std::int64_t step = 0;
  Rng rng;
};

/// Resting state (zeta = 0) with the forcing stream seeded from config.seed.
BetaState initial_state(const BetaConfig& config, const spectral::SpectralPlan& plan);

/// True for stored modes in the forcing annulus |kappa - k_f| <= delta_k/2.
/// Modes with k_x = 0 are excluded so the forcing only acts on the eddies.
bool in_forcing_annulus(const BetaConfig& config, const spectral::SpectralPlan& plan, std::size_t mode);

/// White-in-time forcing rate xi for one step: random phases on the
/// annulus, amplitude scaled with 1/sqrt(dt) so that the expected energy
/// injection per unit time equals epsilon.
std::vector<Complex> draw_forcing(const BetaConfig& config, const spectral::SpectralPlan& plan, Rng& rng);

/// Expected energy injection rate implied by one forcing draw,
/// (dt/2) sum |xi_k|^2 / (kappa^2 N^2) over the full spectrum.
double injection_rate(std::span<const Complex> forcing, const BetaConfig& config,
                      const spectral::SpectralPlan& plan);

/// Domain-mean kinetic energy, 1/2 <|u|^2>.
double kinetic_energy(std::span<const Complex> zeta_modes, const spectral::SpectralPlan& plan);

struct Velocity {
  std::vector<double> u, v;
};

Velocity velocity(std::span<const Complex> zeta_modes, const spectral::SpectralPlan& plan);
std::vector<double> vorticity(std::span<const Complex> zeta_modes, const spectral::SpectralPlan& plan);

/// RK4 on the deterministic terms, then the forcing increment dt * xi,
/// optional hyperviscous decay and the spectral filter.
class Solver {
 public:
  Solver(BetaConfig config, spectral::PlanPtr plan);
  Solver(BetaConfig config, spectral::PlanPtr plan, BetaState state);

  void step();
  void advance(std::size_t n_steps);

  const BetaState& state() const noexcept { return state_; }
  BetaState& state() noexcept { return state_; }
  const BetaConfig& config() const noexcept { return config_; }
  const spectral::SpectralPlan& plan() const noexcept { return *plan_; }
  const spectral::PlanPtr& plan_ptr() const noexcept { return plan_; }

  /// Deterministic tendency d(zeta)/dt without forcing.
  void tendency(std::span<const Complex> zeta, std::span<Complex> out);

 private:
  BetaConfig config_;
  spectral::PlanPtr plan_;
  BetaState state_;
  std::vector<double> inv_kappa2_;
  std::vector<double> decay_;
  std::vector<Complex> k1_, k2_, k3_, k4_, stage_, tmp_, work_a_, work_b_;
  std::vector<double> u_, v_, z_;
};

/// One step of a free-standing state.
void step(BetaState& state, const BetaConfig& config, const spectral::PlanPtr& plan);

/// Row-wise x-average of a 2D field stored [y][x]; length ny.
std::vector<double> zonal_mean(std::span<const double> values, int nx, int ny);
spectral::Field zonal_mean(const spectral::Field& field2d);

/// Zonal-mean zonal velocity U(y).
std::vector<double> zonal_velocity(std::span<const Complex> zeta_modes, const spectral::SpectralPlan& plan);

struct BudgetRecord {
  std::vector<double> U;
  std::vector<double> dU_dt;
  std::vector<double> damping_term;
  std::vector<double> reynolds_term;
  std::vector<double> residual;
  /// max|residual| / max over the three terms of max|term|.
  double relative_residual = 0.0;
};

/// Terms of dU/dt = -mu U (+ hyperviscosity) + mean_x(zeta' v'), evaluated
/// from two states one or more steps apart: the tendency by finite
/// difference, the right-hand side by the trapezoidal average of both ends.
BudgetRecord eddy_mean_budget(const BetaState& before, const BetaState& after, const BetaConfig& config,
                              const spectral::SpectralPlan& plan);

/// Eddy fields and the zonally averaged vorticity flux for one state. The
/// flux is restricted to the 2/3 band, as in the solver's advection.
struct EddyFields {
  std::vector<double> U, u_eddy, v_eddy, zeta_eddy, reynolds;
};
EddyFields eddy_decomposition(std::span<const Complex> zeta_modes, const spectral::SpectralPlan& plan);

/// Runs from rest, discards `warmup` time units and records U(y) profiles.
Trajectory generate_dataset(const BetaConfig& config, std::size_t n_snapshots, double snapshot_interval,
                            double warmup);

/// 2D vorticity snapshot in PDET1 layout (dims = 2).
Trajectory vorticity_snapshot(const BetaState& state, const BetaConfig& config,
                              const spectral::SpectralPlan& plan);

Json config_to_json(const BetaConfig& config);

}  // namespace pdelab::beta
