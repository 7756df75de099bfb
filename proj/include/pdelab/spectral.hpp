#pragma once

#include <complex>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <vector>

namespace pdelab::spectral {

using Complex = std::complex<double>;

/// High-wavenumber exponential filter. Gain is 1 below the cutoff and
/// exp[C (kappa* - kappa_c)^4] above it, with kappa* the grid-scaled
/// wavenumber (Nyquist at pi) and C chosen so that the gain at kappa* = pi
/// equals `nyquist_residual`.
struct FilterParams {
  double cutoff_fraction = 0.65;
  double nyquist_residual = 1e-15;
};

/// Immutable transform plan for a periodic 1D or 2D grid.
///
/// Physical storage is row-major with x fastest: values[iy * nx + ix].
/// Mode storage is half-complex along x: modes[iy * (nx/2 + 1) + jx], with
/// jx in [0, nx/2] and the y index in FFT order (0..ny/2, -ny/2+1..-1).
/// The forward transform is unnormalised; the inverse divides by nx*ny.
///
/// Safe to share between threads: every transform call uses its own
/// scratch space.
class SpectralPlan {
 public:
  SpectralPlan(int dims, std::vector<int> n_points, std::vector<double> domain_length,
               FilterParams filter = {});

  int dims() const noexcept { return dims_; }
  int n_points(int axis) const { return n_.at(axis); }
  double domain_length(int axis) const { return length_.at(axis); }
  double spacing(int axis) const { return length_.at(axis) / n_.at(axis); }

  /// Number of physical grid points.
  std::size_t size() const noexcept { return size_; }
  /// Number of stored half-complex modes.
  std::size_t mode_count() const noexcept { return mode_count_; }
  /// Extent of the mode grid along an axis (nx/2+1 for x, ny for y).
  int mode_extent(int axis) const { return mode_extent_.at(axis); }

  /// Signed integer mode index along an axis, in storage order.
  std::span<const int> mode_index(int axis) const { return index_.at(axis); }
  /// Wavenumbers 2*pi*j/L along an axis, in storage order.
  std::span<const double> wavenumbers(int axis) const { return k_.at(axis); }

  /// Per-mode flag for the 2/3 rule: |j| <= floor(n/3) on every axis.
  std::span<const std::uint8_t> dealias_mask() const noexcept { return mask_; }
  std::span<const double> filter_gain() const noexcept { return gain_; }
  /// Grid-scaled wavenumber magnitude kappa* per mode.
  std::span<const double> scaled_wavenumber() const noexcept { return kappa_star_; }

  double filter_cutoff() const noexcept { return kappa_c_; }
  double filter_coefficient() const noexcept { return c_ssd_; }

  /// Mode offset for x-index jx (>= 0) and y storage row iy.
  std::size_t mode_offset(int jx, int iy = 0) const noexcept {
    return static_cast<std::size_t>(iy) * static_cast<std::size_t>(mode_extent_[0]) +
           static_cast<std::size_t>(jx);
  }

  /// Multiplicity of a stored mode in the full (two-sided) spectrum: 1 for
  /// the jx = 0 and jx = nx/2 columns, 2 otherwise.
  double conjugate_weight(std::size_t mode) const noexcept;

  void forward(std::span<const double> values, std::span<Complex> modes) const;
  /// Does not modify `modes`.
  void inverse(std::span<const Complex> modes, std::span<double> values) const;

 private:
  struct Fftw;

  int dims_;
  std::vector<int> n_;
  std::vector<double> length_;
  std::vector<int> mode_extent_;
  std::size_t size_ = 0;
  std::size_t mode_count_ = 0;
  std::vector<std::vector<int>> index_;
  std::vector<std::vector<double>> k_;
  std::vector<std::uint8_t> mask_;
  std::vector<double> gain_;
  std::vector<double> kappa_star_;
  double kappa_c_ = 0.0;
  double c_ssd_ = 0.0;
  std::shared_ptr<const Fftw> fftw_;
};

using PlanPtr = std::shared_ptr<const SpectralPlan>;

/// Validates and builds a plan; n_points must be even and >= 8 per axis.
PlanPtr make_plan(int dims, std::vector<int> n_points, std::vector<double> domain_length,
                  FilterParams filter = {});
PlanPtr make_plan_1d(int n, double length, FilterParams filter = {});
PlanPtr make_plan_2d(int n, double length, FilterParams filter = {});

/// A real field on a plan's physical grid.
struct Field {
  std::vector<double> values;
  PlanPtr plan;
  double time = 0.0;

  Field() = default;
  Field(std::vector<double> v, PlanPtr p, double t = 0.0);
};

std::vector<Complex> forward_transform(const Field& field);
Field inverse_transform(std::span<const Complex> modes, PlanPtr plan);

/// Multiplies modes in place by (i k_axis)^order. For odd orders the Nyquist
/// entry along that axis is zeroed.
void differentiate_modes(std::span<Complex> modes, const SpectralPlan& plan, int order, int axis);

Field spectral_derivative(const Field& field, int order, int axis = 0);

void apply_filter(std::span<Complex> modes, const SpectralPlan& plan);
void apply_dealias(std::span<Complex> modes, const SpectralPlan& plan);

/// Unnormalised real-to-complex DFT of length n = values.size() (any n >= 1);
/// writes n/2 + 1 modes. Plans are cached per length.
void rfft(std::span<const double> values, std::span<Complex> modes);
/// Unnormalised complex-to-real inverse of rfft: sum over the Hermitian
/// extension, so irfft(rfft(x)) = n * x. Imaginary parts of the k = 0 and
/// (even n) k = n/2 entries are ignored.
void irfft(std::span<const Complex> modes, std::span<double> values);

/// Rounds to the nearest even integer, halves away from zero.
int round_to_even(double x);

}  // namespace pdelab::spectral
