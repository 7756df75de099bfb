#include "pdelab/spectral.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>
#include <numbers>
#include <string>

#include "pdelab/errors.hpp"

namespace pdelab::spectral {

namespace {

// The FFTW planner is not reentrant; execution on new arrays is.
std::mutex& planner_mutex() {
  static std::mutex m;
  return m;
}

}  // namespace

struct SpectralPlan::Fftw {
  fftw_plan r2c = nullptr;
  fftw_plan c2r = nullptr;

  Fftw(int dims, int nx, int ny) {
    std::lock_guard lock(planner_mutex());
    const std::size_t n = static_cast<std::size_t>(nx) * static_cast<std::size_t>(ny);
    const std::size_t m = static_cast<std::size_t>(nx / 2 + 1) * static_cast<std::size_t>(ny);
    double* in = fftw_alloc_real(n);
    fftw_complex* out = fftw_alloc_complex(m);
    const unsigned flags = FFTW_ESTIMATE | FFTW_UNALIGNED;
    if (dims == 1) {
      r2c = fftw_plan_dft_r2c_1d(nx, in, out, flags | FFTW_PRESERVE_INPUT);
      c2r = fftw_plan_dft_c2r_1d(nx, out, in, flags | FFTW_DESTROY_INPUT);
    } else {
      r2c = fftw_plan_dft_r2c_2d(ny, nx, in, out, flags | FFTW_PRESERVE_INPUT);
      c2r = fftw_plan_dft_c2r_2d(ny, nx, out, in, flags | FFTW_DESTROY_INPUT);
    }
    fftw_free(in);
    fftw_free(out);
  }

  ~Fftw() {
    std::lock_guard lock(planner_mutex());
    fftw_destroy_plan(r2c);
    fftw_destroy_plan(c2r);
  }

  Fftw(const Fftw&) = delete;
  Fftw& operator=(const Fftw&) = delete;
};

SpectralPlan::SpectralPlan(int dims, std::vector<int> n_points, std::vector<double> domain_length,
                           FilterParams filter)
    : dims_(dims), n_(std::move(n_points)), length_(std::move(domain_length)) {
  if (dims_ != 1 && dims_ != 2) throw ConfigError("spectral plan: dims must be 1 or 2");
  if (static_cast<int>(n_.size()) != dims_ || static_cast<int>(length_.size()) != dims_)
    throw ConfigError("spectral plan: need one n_points and domain_length per axis");
  for (int a = 0; a < dims_; ++a) {
    if (n_[a] < 8 || n_[a] % 2 != 0)
      throw ConfigError("spectral plan: n_points must be even and >= 8, got " + std::to_string(n_[a]));
    if (!(length_[a] > 0.0) || !std::isfinite(length_[a]))
      throw ConfigError("spectral plan: domain_length must be positive");
  }
  if (!(filter.cutoff_fraction > 0.0 && filter.cutoff_fraction < 1.0) ||
      !(filter.nyquist_residual > 0.0 && filter.nyquist_residual < 1.0))
    throw ConfigError("spectral plan: invalid filter parameters");

  const double pi = std::numbers::pi;
  const int nx = n_[0];
  const int ny = dims_ == 2 ? n_[1] : 1;
  size_ = static_cast<std::size_t>(nx) * static_cast<std::size_t>(ny);

  mode_extent_.push_back(nx / 2 + 1);
  index_.emplace_back();
  for (int j = 0; j <= nx / 2; ++j) index_[0].push_back(j);
  if (dims_ == 2) {
    mode_extent_.push_back(ny);
    index_.emplace_back();
    for (int i = 0; i < ny; ++i) index_[1].push_back(i <= ny / 2 ? i : i - ny);
  }
  for (int a = 0; a < dims_; ++a) {
    k_.emplace_back();
    for (int j : index_[a]) k_[a].push_back(2.0 * pi * j / length_[a]);
  }
  mode_count_ = static_cast<std::size_t>(mode_extent_[0]) * static_cast<std::size_t>(ny);

  kappa_c_ = filter.cutoff_fraction * pi;
  c_ssd_ = std::log(filter.nyquist_residual) / std::pow((1.0 - filter.cutoff_fraction) * pi, 4);

  mask_.resize(mode_count_);
  gain_.resize(mode_count_);
  kappa_star_.resize(mode_count_);
  for (int iy = 0; iy < ny; ++iy) {
    const int jy = dims_ == 2 ? index_[1][iy] : 0;
    for (int jx = 0; jx <= nx / 2; ++jx) {
      const std::size_t m = mode_offset(jx, iy);
      bool keep = std::abs(jx) <= nx / 3;
      if (dims_ == 2) keep = keep && std::abs(jy) <= ny / 3;
      mask_[m] = keep ? 1 : 0;
      const double sx = 2.0 * pi * jx / nx;
      const double sy = dims_ == 2 ? 2.0 * pi * jy / ny : 0.0;
      const double kappa = std::sqrt(sx * sx + sy * sy);
      kappa_star_[m] = kappa;
      gain_[m] = kappa < kappa_c_ ? 1.0 : std::exp(c_ssd_ * std::pow(kappa - kappa_c_, 4));
    }
  }

  fftw_ = std::make_shared<const Fftw>(dims_, nx, ny);
}

double SpectralPlan::conjugate_weight(std::size_t mode) const noexcept {
  const int jx = static_cast<int>(mode % static_cast<std::size_t>(mode_extent_[0]));
  return (jx == 0 || jx == n_[0] / 2) ? 1.0 : 2.0;
}

void SpectralPlan::forward(std::span<const double> values, std::span<Complex> modes) const {
  if (values.size() != size_ || modes.size() != mode_count_)
    throw ShapeError("forward transform: size mismatch with plan");
  fftw_execute_dft_r2c(fftw_->r2c, const_cast<double*>(values.data()),
                       reinterpret_cast<fftw_complex*>(modes.data()));
}

void SpectralPlan::inverse(std::span<const Complex> modes, std::span<double> values) const {
  if (values.size() != size_ || modes.size() != mode_count_)
    throw ShapeError("inverse transform: size mismatch with plan");
  thread_local std::vector<Complex> scratch;
  scratch.assign(modes.begin(), modes.end());
  fftw_execute_dft_c2r(fftw_->c2r, reinterpret_cast<fftw_complex*>(scratch.data()), values.data());
  const double scale = 1.0 / static_cast<double>(size_);
  for (double& v : values) v *= scale;
}

PlanPtr make_plan(int dims, std::vector<int> n_points, std::vector<double> domain_length,
                  FilterParams filter) {
  return std::make_shared<const SpectralPlan>(dims, std::move(n_points), std::move(domain_length),
                                              filter);
}

PlanPtr make_plan_1d(int n, double length, FilterParams filter) {
  return make_plan(1, {n}, {length}, filter);
}

PlanPtr make_plan_2d(int n, double length, FilterParams filter) {
  return make_plan(2, {n, n}, {length, length}, filter);
}

Field::Field(std::vector<double> v, PlanPtr p, double t) : values(std::move(v)), plan(std::move(p)), time(t) {
  if (!plan) throw ConfigError("field: missing plan");
  if (values.size() != plan->size()) throw ShapeError("field: value count does not match plan");
}

std::vector<Complex> forward_transform(const Field& field) {
  if (!field.plan) throw ConfigError("forward_transform: field has no plan");
  std::vector<Complex> modes(field.plan->mode_count());
  field.plan->forward(field.values, modes);
  return modes;
}

Field inverse_transform(std::span<const Complex> modes, PlanPtr plan) {
  if (!plan) throw ConfigError("inverse_transform: missing plan");
  std::vector<double> values(plan->size());
  plan->inverse(modes, values);
  return Field(std::move(values), std::move(plan));
}

void differentiate_modes(std::span<Complex> modes, const SpectralPlan& plan, int order, int axis) {
  if (order < 0) throw ConfigError("spectral derivative: order must be non-negative");
  if (axis < 0 || axis >= plan.dims()) throw ConfigError("spectral derivative: bad axis");
  if (modes.size() != plan.mode_count()) throw ShapeError("spectral derivative: size mismatch");
  if (order == 0) return;

  // (ik)^order = k^order * i^order
  static constexpr Complex i_pow[4] = {{1, 0}, {0, 1}, {-1, 0}, {0, -1}};
  const Complex phase = i_pow[order % 4];
  const auto k = plan.wavenumbers(axis);
  const auto idx = plan.mode_index(axis);
  const int nyquist = plan.n_points(axis) / 2;
  const bool odd = order % 2 == 1;
  const int ex = plan.mode_extent(0);
  const int ey = plan.dims() == 2 ? plan.mode_extent(1) : 1;

  for (int iy = 0; iy < ey; ++iy) {
    for (int jx = 0; jx < ex; ++jx) {
      const int a = axis == 0 ? jx : iy;
      Complex& m = modes[plan.mode_offset(jx, iy)];
      if (odd && std::abs(idx[a]) == nyquist) {
        m = 0.0;
        continue;
      }
      m *= phase * std::pow(k[a], order);
    }
  }
}

Field spectral_derivative(const Field& field, int order, int axis) {
  auto modes = forward_transform(field);
  differentiate_modes(modes, *field.plan, order, axis);
  Field out = inverse_transform(modes, field.plan);
  out.time = field.time;
  return out;
}

void apply_filter(std::span<Complex> modes, const SpectralPlan& plan) {
  if (modes.size() != plan.mode_count()) throw ShapeError("apply_filter: size mismatch");
  const auto g = plan.filter_gain();
  for (std::size_t m = 0; m < modes.size(); ++m) modes[m] *= g[m];
}

void apply_dealias(std::span<Complex> modes, const SpectralPlan& plan) {
  if (modes.size() != plan.mode_count()) throw ShapeError("apply_dealias: size mismatch");
  const auto mask = plan.dealias_mask();
  for (std::size_t m = 0; m < modes.size(); ++m)
    if (!mask[m]) modes[m] = 0.0;
}

namespace {

struct Plan1d {
  fftw_plan r2c;
  fftw_plan c2r;
};

// Plans live for the lifetime of the process; there are only a handful of lengths.
const Plan1d& plan_1d(int n) {
  static std::map<int, Plan1d> cache;
  std::lock_guard lock(planner_mutex());
  auto it = cache.find(n);
  if (it != cache.end()) return it->second;
  double* in = fftw_alloc_real(static_cast<std::size_t>(n));
  fftw_complex* out = fftw_alloc_complex(static_cast<std::size_t>(n / 2 + 1));
  const unsigned flags = FFTW_ESTIMATE | FFTW_UNALIGNED;
  Plan1d p{fftw_plan_dft_r2c_1d(n, in, out, flags | FFTW_PRESERVE_INPUT),
           fftw_plan_dft_c2r_1d(n, out, in, flags | FFTW_DESTROY_INPUT)};
  fftw_free(in);
  fftw_free(out);
  return cache.emplace(n, p).first->second;
}

}  // namespace

void rfft(std::span<const double> values, std::span<Complex> modes) {
  const std::size_t n = values.size();
  if (n == 0 || modes.size() != n / 2 + 1) throw ShapeError("rfft: need n >= 1 inputs and n/2 + 1 outputs");
  const Plan1d& p = plan_1d(static_cast<int>(n));
  fftw_execute_dft_r2c(p.r2c, const_cast<double*>(values.data()), reinterpret_cast<fftw_complex*>(modes.data()));
}

void irfft(std::span<const Complex> modes, std::span<double> values) {
  const std::size_t n = values.size();
  if (n == 0 || modes.size() != n / 2 + 1) throw ShapeError("irfft: need n/2 + 1 inputs and n >= 1 outputs");
  const Plan1d& p = plan_1d(static_cast<int>(n));
  thread_local std::vector<Complex> scratch;
  scratch.assign(modes.begin(), modes.end());
  fftw_execute_dft_c2r(p.c2r, reinterpret_cast<fftw_complex*>(scratch.data()), values.data());
}

int round_to_even(double x) { return 2 * static_cast<int>(std::lround(x / 2.0)); }

}  // namespace pdelab::spectral
