#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "pdelab/beta_plane.hpp"
#include "pdelab/emulator.hpp"
#include "pdelab/ks.hpp"
#include "pdelab/trajectory.hpp"

namespace pdelab::diag {

// ---------------------------------------------------------------------------
// Rollouts

struct RolloutOptions {
  std::size_t n_steps = 0;
  /// Abort once max|u| exceeds this (physical units).
  double cap = 1e3;
  std::uint64_t noise_seed = 0;
};

/// Feeds every forecast back as the newest history frame. `history` holds
/// at least S frames in physical units; its last S frames start the
/// rollout. The result holds the n_steps forecasts, one frame per step, at
/// the history's snapshot interval. Probabilistic models draw fresh noise
/// per step; a single rollout is member 0 of rollout_ensemble. Throws
/// DivergenceError with the step index on a non-finite or capped state.
Trajectory rollout(const emu::Model& model, const Trajectory& history, double conditioning,
                   const RolloutOptions& options);

/// `members` independent rollouts from the same history, batched through
/// the network. Member i uses the noise stream (noise_seed, i, step), so a
/// member's path does not depend on the ensemble size.
std::vector<Trajectory> rollout_ensemble(const emu::Model& model, const Trajectory& history, double conditioning,
                                         std::size_t members, const RolloutOptions& options);

// ---------------------------------------------------------------------------
// Joint PDFs

/// (u, du/dx, du/dt) at every position of every interior frame.
struct JointSamples {
  std::array<std::vector<double>, 3> values;
  std::size_t size() const noexcept { return values[0].size(); }
};

/// Spectral d/dx on a periodic domain of the given length.
std::vector<double> spectral_derivative(std::span<const double> u, double domain_length);

/// Centred time differences; the first and last frames are dropped.
/// Requires at least 3 frames.
JointSamples joint_samples(const Trajectory& traj, double domain_length);

struct Binning {
  std::array<std::vector<double>, 3> edges;
  std::size_t bins(std::size_t axis) const noexcept { return edges[axis].size() - 1; }
  bool operator==(const Binning&) const = default;
};

/// n_bins per axis spanning mean +- width * std of each variable. A
/// constant variable gets a unit-width range around its value.
Binning reference_binning(const JointSamples& samples, std::size_t n_bins = 50, double width = 4.0);

struct Histogram3D {
  Binning binning;
  /// Row-major [n0][n1][n2].
  std::vector<std::uint64_t> counts;
  /// Samples outside the binned domain.
  std::uint64_t outside = 0;

  std::uint64_t total_inside() const noexcept;
  std::size_t index(std::size_t i, std::size_t j, std::size_t k) const noexcept;
  /// Probability density over the binned domain; integrates to 1.
  std::vector<double> density() const;
  /// Probability mass per bin; sums to 1.
  std::vector<double> mass() const;
};

Histogram3D histogram(const JointSamples& samples, const Binning& binning);

/// Default joint PDF: reference binning of the trajectory itself.
Histogram3D joint_pdf(const Trajectory& traj, double domain_length, std::size_t n_bins = 50);
/// Joint PDF on given edges (for comparisons against a reference).
Histogram3D joint_pdf(const Trajectory& traj, double domain_length, const Binning& binning);

/// Density over the two remaining axes after summing out `axis`.
std::vector<double> marginal_density(const Histogram3D& h, std::size_t axis);

/// sqrt(1/2 sum (sqrt p - sqrt q)^2) over bins. Throws ShapeError for
/// different binnings.
double hellinger(const Histogram3D& a, const Histogram3D& b);
/// Same on probability-mass vectors of equal length.
double hellinger(std::span<const double> p, std::span<const double> q);

/// PDET1 container with dims = 3: frame 0 the density, frame 1 the counts;
/// the edges travel in the header.
Trajectory to_pdet(const Histogram3D& h);
Histogram3D histogram_from_pdet(const Trajectory& t);

// ---------------------------------------------------------------------------
// Zonal spectra and jets

/// One-sided time-mean power spectrum of 1D profiles, |F[U]_k|^2 / n^2
/// doubled for 0 < k < n/2, so that the sum equals the time mean of
/// sum(U^2) / n.
std::vector<double> zonal_psd(const Trajectory& traj);

inline constexpr double kJetProminence = 0.2;
inline constexpr std::size_t kEventDebounce = 5;

/// Local maxima of a periodic profile whose topographic prominence exceeds
/// prominence * max|U|. Plateaus count once.
int count_jets(std::span<const double> U, double prominence = kJetProminence);

enum class EventKind { nucleation, coalescence };
std::string to_string(EventKind k);
EventKind event_kind_from_string(const std::string& s);

struct EventRecord {
  EventKind kind = EventKind::nucleation;
  double time = 0.0;
  int count_before = 0;
  int count_after = 0;
};

/// Jet count per frame.
std::vector<int> jet_counts(const Trajectory& traj, double prominence = kJetProminence);

/// Runs of an equal count shorter than `debounce` frames are treated as
/// flicker and dropped; every change between the surviving runs emits one
/// event per unit step, stamped with the first frame of the new run.
std::vector<EventRecord> detect_events(const Trajectory& traj, double prominence = kJetProminence,
                                       std::size_t debounce = kEventDebounce);
std::vector<EventRecord> detect_events(std::span<const int> counts, std::span<const double> times,
                                       std::size_t debounce = kEventDebounce);

/// Time since the trajectory start of the first event of `kind`, if any.
std::optional<double> first_event_time(const std::vector<EventRecord>& events, EventKind kind, double t0);

struct EventTimeHistogram {
  std::vector<double> edges;
  std::vector<std::uint64_t> counts;
  /// Members without an event inside the horizon (or beyond the last edge).
  std::uint64_t overflow = 0;

  std::uint64_t total() const noexcept;
  /// Probability mass per bin with the overflow as a final bin.
  std::vector<double> mass() const;
};

EventTimeHistogram event_time_histogram(std::span<const std::optional<double>> first_times,
                                        std::vector<double> edges);

/// Produces the profile trajectory of one ensemble member.
using MemberRunner = std::function<Trajectory(std::size_t member)>;

struct EventPdfOptions {
  EventKind kind = EventKind::coalescence;
  double horizon = 0.0;
  std::vector<double> edges;
  double prominence = kJetProminence;
  std::size_t debounce = kEventDebounce;
  int threads = 1;
};

/// Runs the members (in parallel), finds each member's first event of the
/// requested kind within the horizon and histograms those times.
EventTimeHistogram event_time_pdf(const MemberRunner& run, std::size_t ensemble_size,
                                  const EventPdfOptions& options);

/// Solver member: continues `start` with the forcing stream reseeded from
/// (seed, member) and records U(y) every `interval` for n_frames frames,
/// frame 0 being `start` itself.
MemberRunner beta_solver_member(const beta::BetaState& start, const beta::BetaConfig& config,
                                std::size_t n_frames, double interval, std::uint64_t seed);

/// Emulator member: rollout from `history` with noise stream (seed, member).
/// Frame 0 is the last history frame, so member times start at the same
/// state as solver members.
MemberRunner emulator_member(const emu::Model& model, const Trajectory& history, double conditioning,
                             std::size_t n_steps, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Chaos

struct LyapunovOptions {
  double perturbation = 1e-8;
  double renormalize_every = 10.0;
  double averaging_time = 2000.0;
  /// Discarded before the twin is started.
  double transient = 500.0;
};

struct LyapunovResult {
  double exponent = 0.0;
  std::size_t renormalizations = 0;
  /// False when the estimate is not positive.
  bool chaotic = false;
};

/// Leading exponent from a perturbed twin trajectory renormalised at fixed
/// intervals.
LyapunovResult lyapunov_exponent(const ks::KSConfig& config, const LyapunovOptions& options = {});

/// Time, in Lyapunov times, until the RMS error of forecast frame i against
/// truth frame i first exceeds threshold * climatological RMS of truth.
/// Never exceeding gives the full forecast length.
double tracking_horizon(const Trajectory& truth, const Trajectory& forecast, double lyapunov_exponent,
                        double threshold = 0.5);

/// Deterministic emulator against a solver trajectory: the first S frames
/// of `truth` seed the rollout, the rest are the reference.
double tracking_horizon(const emu::Model& model, const Trajectory& truth, double conditioning,
                        double lyapunov_exponent, double threshold = 0.5);

// ---------------------------------------------------------------------------
// Output

void write_psd_csv(std::ostream& os, std::span<const double> psd);
void write_events_csv(std::ostream& os, const std::vector<EventRecord>& events);
void write_event_histogram_csv(std::ostream& os, const EventTimeHistogram& h);
/// Marginal density over (u, du/dx) with du/dt summed out, one row per bin.
void write_marginal_csv(std::ostream& os, const Histogram3D& h);

}  // namespace pdelab::diag
