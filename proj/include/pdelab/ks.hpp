#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "pdelab/spectral.hpp"
#include "pdelab/trajectory.hpp"

namespace pdelab::ks {

using spectral::Complex;

/// Kuramoto-Sivashinsky run configuration:
///   u_t + u u_x + u_xx + u_xxxx = 0 on a periodic domain [0, L).
struct KSConfig {
  double L = 22.0;
  int n_points = 0;  ///< 0 selects default_grid_size(L)
  double dt = 2.5e-2;
  double snapshot_interval = 1.0;
  double warmup_time = 500.0;
  std::size_t n_snapshots = 100;
  std::uint64_t seed = 0;
  double init_std = 0.1;  ///< initial field ~ N(0, 0.01), i.e. std 0.1
  int contour_points = 32;

  int resolved_n() const;
  std::size_t steps_per_snapshot() const;
  void validate() const;
};

/// round_to_even(2.5 L): 22 -> 56, 36 -> 90, 98 -> 246, 200 -> 500.
int default_grid_size(double L);

/// Per-mode ETDRK4 coefficients for step size dt (Cox-Matthews form with
/// contour-averaged phi functions).
struct ETDRK4Tables {
  double dt = 0.0;
  std::vector<double> linear;  ///< k^2 - k^4
  std::vector<double> E, E2, Q, f1, f2, f3;
};

ETDRK4Tables build_tables(double dt, const spectral::SpectralPlan& plan, int contour_points = 32);
ETDRK4Tables build_tables(const KSConfig& config, const spectral::SpectralPlan& plan);

/// Pseudo-spectral -1/2 d/dx(u^2) with 2/3-rule dealiasing.
void nonlinear_term(std::span<const Complex> modes, std::span<Complex> out,
                    const spectral::SpectralPlan& plan);

/// One ETDRK4 step in place. Throws DivergenceError tagged with
/// `step_index` if the result is not finite.
void step(std::span<Complex> modes, const ETDRK4Tables& tables, const spectral::SpectralPlan& plan,
          std::int64_t step_index = 0);

/// Owns a KS state and the reusable stage buffers.
class Integrator {
 public:
  Integrator(const spectral::PlanPtr& plan, double dt, std::span<const double> initial_field,
             int contour_points = 32);

  void advance(std::size_t n_steps);
  std::vector<double> field() const;
  void set_field(std::span<const double> values);
  std::span<const Complex> modes() const noexcept { return modes_; }
  double time() const noexcept { return time_; }
  std::int64_t steps_taken() const noexcept { return steps_; }
  const spectral::SpectralPlan& plan() const noexcept { return *plan_; }
  const ETDRK4Tables& tables() const noexcept { return tables_; }

 private:
  void single_step();

  spectral::PlanPtr plan_;
  ETDRK4Tables tables_;
  std::vector<Complex> modes_, nv_, na_, nb_, nc_, a_, b_, c_;
  double time_ = 0.0;
  std::int64_t steps_ = 0;
};

/// Zero-mean Gaussian field with standard deviation `std_dev`.
std::vector<double> random_initial_field(int n, double std_dev, std::uint64_t seed);

/// Integrates from a random initial field, discards the warm-up and records
/// n_snapshots frames at snapshot_interval spacing.
Trajectory generate_dataset(const KSConfig& config);

Json config_to_json(const KSConfig& config);

}  // namespace pdelab::ks
