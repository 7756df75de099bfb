#include "pdelab/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>

#include "pdelab/errors.hpp"
#include "pdelab/parallel.hpp"
#include "pdelab/rng.hpp"
#include "pdelab/spectral.hpp"

namespace pdelab::diag {

using ad::Graph;
using ad::Tensor;
using ad::Var;
using spectral::Complex;

// ---------------------------------------------------------------------------
// Rollouts

std::vector<Trajectory> rollout_ensemble(const emu::Model& model, const Trajectory& history, double conditioning,
                                         std::size_t members, const RolloutOptions& options) {
  const auto& cfg = model.config();
  const std::size_t S = static_cast<std::size_t>(cfg.history), C = static_cast<std::size_t>(cfg.channels);
  if (history.frame_shape.size() != 1) throw ShapeError("rollout: history frames must be 1D");
  if (history.n_frames() < S)
    throw ShapeError("rollout: need " + std::to_string(S) + " history frames, got " +
                     std::to_string(history.n_frames()));
  const std::size_t D = history.frame_shape[0], B = members;
  const double start = history.time(history.n_frames() - 1);

  std::vector<Trajectory> out;
  for (std::size_t m = 0; m < B; ++m) {
    out.emplace_back(history.frame_shape, history.snapshot_interval, start + history.snapshot_interval);
    out.back().metadata = history.metadata;
    out.back().metadata["source"] = "emulator";
  }
  if (B == 0 || options.n_steps == 0) return out;

  // Working-unit history [B, D, S], oldest frame first.
  Tensor<float> hist({B, D, S});
  for (std::size_t s = 0; s < S; ++s) {
    const auto f = history.frame(history.n_frames() - S + s);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t d = 0; d < D; ++d)
        hist.data[(b * D + d) * S + s] = static_cast<float>(model.normalization.forward(f[d]));
  }
  const bool probabilistic = cfg.mode == emu::Mode::probabilistic;
  const Tensor<float> cond({B, static_cast<std::size_t>(cfg.cond_dim)}, static_cast<float>(conditioning));

  std::vector<double> frame(D);
  for (std::size_t step = 0; step < options.n_steps; ++step) {
    Tensor<float> noise;
    if (probabilistic) {
      noise = Tensor<float>({B, D, C});
      std::normal_distribution<double> normal(0.0, 1.0);
      for (std::size_t b = 0; b < B; ++b) {
        Rng rng = make_rng(options.noise_seed, {b, step});
        for (std::size_t i = 0; i < D * C; ++i) noise.data[b * D * C + i] = static_cast<float>(normal(rng));
      }
    }
    Graph<float> g;
    const auto p = emu::bind(g, model, model.phase, false);
    const Var c = model.phase == emu::Phase::finetune ? g.constant(cond) : Var{};
    const Var y = emu::forward(g, model, p, g.constant(hist), c, model.phase, probabilistic ? &noise : nullptr);
    const auto& next = g.value(y).data;

    for (std::size_t b = 0; b < B; ++b) {
      double peak = 0.0;
      for (std::size_t d = 0; d < D; ++d) {
        frame[d] = model.normalization.inverse(next[b * D + d]);
        peak = std::isfinite(frame[d]) ? std::max(peak, std::abs(frame[d])) : INFINITY;
      }
      if (!(peak <= options.cap))
        throw DivergenceError("rollout diverged at step " + std::to_string(step + 1) + " (member " +
                                  std::to_string(b) + ", max|u| = " + std::to_string(peak) + ")",
                              static_cast<std::int64_t>(step + 1));
      out[b].append(frame);
      // Shift the window and append the forecast.
      for (std::size_t d = 0; d < D; ++d) {
        float* row = &hist.data[(b * D + d) * S];
        std::copy(row + 1, row + S, row);
        row[S - 1] = next[b * D + d];
      }
    }
  }
  return out;
}

Trajectory rollout(const emu::Model& model, const Trajectory& history, double conditioning,
                   const RolloutOptions& options) {
  return std::move(rollout_ensemble(model, history, conditioning, 1, options).front());
}

// ---------------------------------------------------------------------------
// Joint PDFs

std::vector<double> spectral_derivative(std::span<const double> u, double domain_length) {
  const std::size_t n = u.size();
  std::vector<Complex> X(n / 2 + 1);
  spectral::rfft(u, X);
  const double k0 = 2.0 * std::numbers::pi / domain_length;
  for (std::size_t k = 0; k < X.size(); ++k) X[k] *= Complex(0.0, k0 * static_cast<double>(k));
  if (n % 2 == 0) X.back() = 0.0;
  std::vector<double> out(n);
  spectral::irfft(X, out);
  for (double& v : out) v /= static_cast<double>(n);
  return out;
}

JointSamples joint_samples(const Trajectory& traj, double domain_length) {
  if (traj.frame_shape.size() != 1) throw ShapeError("joint_samples: frames must be 1D");
  if (traj.n_frames() < 3) throw ShapeError("joint_samples: need at least 3 frames");
  const std::size_t D = traj.frame_shape[0];
  JointSamples s;
  for (auto& v : s.values) v.reserve((traj.n_frames() - 2) * D);
  const double inv2dt = 0.5 / traj.snapshot_interval;
  for (std::size_t f = 1; f + 1 < traj.n_frames(); ++f) {
    const auto u = traj.frame(f), before = traj.frame(f - 1), after = traj.frame(f + 1);
    const auto ux = spectral_derivative(u, domain_length);
    for (std::size_t d = 0; d < D; ++d) {
      s.values[0].push_back(u[d]);
      s.values[1].push_back(ux[d]);
      s.values[2].push_back((after[d] - before[d]) * inv2dt);
    }
  }
  return s;
}

Binning reference_binning(const JointSamples& samples, std::size_t n_bins, double width) {
  if (n_bins < 1) throw ConfigError("binning: need at least one bin");
  if (samples.size() == 0) throw ShapeError("binning: no samples");
  Binning b;
  for (std::size_t a = 0; a < 3; ++a) {
    const auto& v = samples.values[a];
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    const double sd = std::sqrt(var / static_cast<double>(v.size()));
    const double half = sd > 1e-12 * std::max(1.0, std::abs(mean)) ? width * sd : 0.5;
    const double lo = mean - half, step = 2.0 * half / static_cast<double>(n_bins);
    b.edges[a].resize(n_bins + 1);
    for (std::size_t i = 0; i <= n_bins; ++i) b.edges[a][i] = lo + step * static_cast<double>(i);
    b.edges[a].back() = mean + half;
  }
  return b;
}

std::uint64_t Histogram3D::total_inside() const noexcept {
  std::uint64_t n = 0;
  for (auto c : counts) n += c;
  return n;
}

std::size_t Histogram3D::index(std::size_t i, std::size_t j, std::size_t k) const noexcept {
  return (i * binning.bins(1) + j) * binning.bins(2) + k;
}

std::vector<double> Histogram3D::mass() const {
  const double n = static_cast<double>(total_inside());
  std::vector<double> p(counts.size(), 0.0);
  if (n == 0.0) return p;
  for (std::size_t i = 0; i < counts.size(); ++i) p[i] = static_cast<double>(counts[i]) / n;
  return p;
}

std::vector<double> Histogram3D::density() const {
  std::vector<double> p = mass();
  const auto& e = binning.edges;
  for (std::size_t i = 0; i < binning.bins(0); ++i)
    for (std::size_t j = 0; j < binning.bins(1); ++j)
      for (std::size_t k = 0; k < binning.bins(2); ++k)
        p[index(i, j, k)] /= (e[0][i + 1] - e[0][i]) * (e[1][j + 1] - e[1][j]) * (e[2][k + 1] - e[2][k]);
  return p;
}

namespace {

/// Bin of x for ascending edges; the last edge belongs to the last bin.
std::optional<std::size_t> bin_of(const std::vector<double>& edges, double x) {
  if (!(x >= edges.front() && x <= edges.back())) return std::nullopt;
  const auto it = std::upper_bound(edges.begin(), edges.end(), x);
  const auto i = static_cast<std::size_t>(it - edges.begin());
  return std::min(i, edges.size() - 1) - 1;
}

}  // namespace

Histogram3D histogram(const JointSamples& samples, const Binning& binning) {
  for (const auto& e : binning.edges)
    if (e.size() < 2 || !std::is_sorted(e.begin(), e.end())) throw ConfigError("histogram: invalid edges");
  Histogram3D h;
  h.binning = binning;
  h.counts.assign(binning.bins(0) * binning.bins(1) * binning.bins(2), 0);
  for (std::size_t s = 0; s < samples.size(); ++s) {
    const auto i = bin_of(binning.edges[0], samples.values[0][s]);
    const auto j = bin_of(binning.edges[1], samples.values[1][s]);
    const auto k = bin_of(binning.edges[2], samples.values[2][s]);
    if (i && j && k)
      ++h.counts[h.index(*i, *j, *k)];
    else
      ++h.outside;
  }
  return h;
}

Histogram3D joint_pdf(const Trajectory& traj, double domain_length, std::size_t n_bins) {
  const auto s = joint_samples(traj, domain_length);
  return histogram(s, reference_binning(s, n_bins));
}

Histogram3D joint_pdf(const Trajectory& traj, double domain_length, const Binning& binning) {
  return histogram(joint_samples(traj, domain_length), binning);
}

std::vector<double> marginal_density(const Histogram3D& h, std::size_t axis) {
  if (axis > 2) throw ConfigError("marginal_density: axis must be 0, 1 or 2");
  const std::size_t a = axis == 0 ? 1 : 0, b = axis == 2 ? 1 : 2;
  const auto& e = h.binning.edges;
  const std::size_t na = h.binning.bins(a), nb = h.binning.bins(b);
  std::vector<double> out(na * nb, 0.0);
  const auto p = h.mass();
  for (std::size_t i = 0; i < h.binning.bins(0); ++i)
    for (std::size_t j = 0; j < h.binning.bins(1); ++j)
      for (std::size_t k = 0; k < h.binning.bins(2); ++k) {
        const std::size_t idx[3] = {i, j, k};
        out[idx[a] * nb + idx[b]] += p[h.index(i, j, k)];
      }
  for (std::size_t x = 0; x < na; ++x)
    for (std::size_t y = 0; y < nb; ++y)
      out[x * nb + y] /= (e[a][x + 1] - e[a][x]) * (e[b][y + 1] - e[b][y]);
  return out;
}

double hellinger(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw ShapeError("hellinger: distributions have different supports");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double d = std::sqrt(p[i]) - std::sqrt(q[i]);
    s += d * d;
  }
  return std::min(1.0, std::sqrt(0.5 * s));
}

double hellinger(const Histogram3D& a, const Histogram3D& b) {
  if (!(a.binning == b.binning)) throw ShapeError("hellinger: histograms use different binnings");
  return hellinger(a.mass(), b.mass());
}

Trajectory to_pdet(const Histogram3D& h) {
  Trajectory t({h.binning.bins(0), h.binning.bins(1), h.binning.bins(2)}, 1.0);
  t.metadata = {{"kind", "joint_pdf"},
                {"dims", 3},
                {"axes", {"u", "du/dx", "du/dt"}},
                {"frames", {"density", "counts"}},
                {"edges", {h.binning.edges[0], h.binning.edges[1], h.binning.edges[2]}},
                {"outside", h.outside}};
  t.append(h.density());
  std::vector<double> c(h.counts.begin(), h.counts.end());
  t.append(c);
  return t;
}

Histogram3D histogram_from_pdet(const Trajectory& t) {
  if (t.frame_shape.size() != 3 || t.n_frames() != 2 || t.metadata.value("kind", "") != "joint_pdf")
    throw FormatError("PDET1 file does not hold a joint PDF");
  Histogram3D h;
  try {
    for (std::size_t a = 0; a < 3; ++a) h.binning.edges[a] = t.metadata.at("edges").at(a).get<std::vector<double>>();
    h.outside = t.metadata.value("outside", std::uint64_t{0});
  } catch (const Json::exception& e) {
    throw FormatError(std::string("joint PDF header: ") + e.what());
  }
  for (std::size_t a = 0; a < 3; ++a)
    if (h.binning.bins(a) != t.frame_shape[a]) throw FormatError("joint PDF edges do not match the frame shape");
  const auto c = t.frame(1);
  h.counts.resize(c.size());
  for (std::size_t i = 0; i < c.size(); ++i) h.counts[i] = static_cast<std::uint64_t>(std::llround(c[i]));
  return h;
}

// ---------------------------------------------------------------------------
// Zonal spectra and jets

std::vector<double> zonal_psd(const Trajectory& traj) {
  if (traj.frame_shape.size() != 1) throw ShapeError("zonal_psd: frames must be 1D");
  const std::size_t n = traj.frame_shape[0];
  std::vector<double> psd(n / 2 + 1, 0.0);
  if (traj.n_frames() == 0) return psd;
  std::vector<Complex> X(psd.size());
  const double n2 = static_cast<double>(n) * static_cast<double>(n);
  for (std::size_t f = 0; f < traj.n_frames(); ++f) {
    spectral::rfft(traj.frame(f), X);
    for (std::size_t k = 0; k < X.size(); ++k) {
      const bool edge = k == 0 || 2 * k == n;
      psd[k] += (edge ? 1.0 : 2.0) * std::norm(X[k]) / n2;
    }
  }
  for (double& v : psd) v /= static_cast<double>(traj.n_frames());
  return psd;
}

int count_jets(std::span<const double> U, double prominence) {
  const std::size_t n = U.size();
  if (n < 3) return 0;
  double peak = 0.0;
  for (double v : U) peak = std::max(peak, std::abs(v));
  if (peak == 0.0) return 0;
  // Rotate so the profile starts at a global minimum and close the loop
  // with it; every peak is then interior.
  const std::size_t m = static_cast<std::size_t>(std::min_element(U.begin(), U.end()) - U.begin());
  std::vector<double> a(n + 1);
  for (std::size_t i = 0; i <= n; ++i) a[i] = U[(m + i) % n];
  const double threshold = prominence * peak;

  int jets = 0;
  std::size_t i = 1;
  while (i < n) {
    if (!(a[i] > a[i - 1])) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (a[j + 1] == a[i]) ++j;
    if (a[j + 1] < a[i]) {
      double left = a[i], right = a[i];
      for (std::size_t k = i; k-- > 0 && a[k] <= a[i];) left = std::min(left, a[k]);
      for (std::size_t k = j + 1; k <= n && a[k] <= a[i]; ++k) right = std::min(right, a[k]);
      if (a[i] - std::max(left, right) > threshold) ++jets;
    }
    i = j + 1;
  }
  return jets;
}

std::string to_string(EventKind k) { return k == EventKind::nucleation ? "nucleation" : "coalescence"; }

EventKind event_kind_from_string(const std::string& s) {
  if (s == "nucleation") return EventKind::nucleation;
  if (s == "coalescence") return EventKind::coalescence;
  throw ConfigError("unknown event kind '" + s + "' (nucleation|coalescence)");
}

std::vector<int> jet_counts(const Trajectory& traj, double prominence) {
  if (traj.frame_shape.size() != 1) throw ShapeError("jet_counts: frames must be 1D profiles");
  std::vector<int> c(traj.n_frames());
  for (std::size_t f = 0; f < c.size(); ++f) c[f] = count_jets(traj.frame(f), prominence);
  return c;
}

std::vector<EventRecord> detect_events(std::span<const int> counts, std::span<const double> times,
                                       std::size_t debounce) {
  if (counts.size() != times.size()) throw ShapeError("detect_events: counts and times differ in length");
  debounce = std::max<std::size_t>(debounce, 1);
  struct Run {
    int value;
    std::size_t first;
  };
  std::vector<Run> kept;
  for (std::size_t i = 0; i < counts.size();) {
    std::size_t j = i;
    while (j < counts.size() && counts[j] == counts[i]) ++j;
    if (j - i >= debounce && (kept.empty() || kept.back().value != counts[i])) kept.push_back({counts[i], i});
    i = j;
  }
  std::vector<EventRecord> events;
  for (std::size_t r = 1; r < kept.size(); ++r) {
    const int step = kept[r].value > kept[r - 1].value ? 1 : -1;
    for (int c = kept[r - 1].value; c != kept[r].value; c += step)
      events.push_back({step > 0 ? EventKind::nucleation : EventKind::coalescence, times[kept[r].first], c, c + step});
  }
  return events;
}

std::vector<EventRecord> detect_events(const Trajectory& traj, double prominence, std::size_t debounce) {
  if (traj.n_frames() < 2) throw ShapeError("detect_events: need at least 2 frames");
  const auto counts = jet_counts(traj, prominence);
  std::vector<double> times(counts.size());
  for (std::size_t i = 0; i < times.size(); ++i) times[i] = traj.time(i);
  return detect_events(counts, times, debounce);
}

std::optional<double> first_event_time(const std::vector<EventRecord>& events, EventKind kind, double t0) {
  for (const auto& e : events)
    if (e.kind == kind) return e.time - t0;
  return std::nullopt;
}

std::uint64_t EventTimeHistogram::total() const noexcept {
  std::uint64_t n = overflow;
  for (auto c : counts) n += c;
  return n;
}

std::vector<double> EventTimeHistogram::mass() const {
  std::vector<double> p(counts.begin(), counts.end());
  p.push_back(static_cast<double>(overflow));
  const double n = static_cast<double>(total());
  if (n > 0.0)
    for (double& v : p) v /= n;
  return p;
}

EventTimeHistogram event_time_histogram(std::span<const std::optional<double>> first_times,
                                        std::vector<double> edges) {
  if (edges.size() < 2 || !std::is_sorted(edges.begin(), edges.end()))
    throw ConfigError("event histogram: need at least two ascending edges");
  EventTimeHistogram h;
  h.edges = std::move(edges);
  h.counts.assign(h.edges.size() - 1, 0);
  for (const auto& t : first_times) {
    const auto bin = t ? bin_of(h.edges, *t) : std::nullopt;
    if (bin)
      ++h.counts[*bin];
    else
      ++h.overflow;
  }
  return h;
}

EventTimeHistogram event_time_pdf(const MemberRunner& run, std::size_t ensemble_size,
                                  const EventPdfOptions& options) {
  std::vector<std::optional<double>> first(ensemble_size);
  parallel_for(ensemble_size, options.threads, [&](std::size_t m) {
    const Trajectory traj = run(m);
    const auto t = first_event_time(detect_events(traj, options.prominence, options.debounce), options.kind, traj.t0);
    if (t && *t <= options.horizon) first[m] = t;
  });
  return event_time_histogram(first, options.edges);
}

MemberRunner beta_solver_member(const beta::BetaState& start, const beta::BetaConfig& config,
                                std::size_t n_frames, double interval, std::uint64_t seed) {
  const double ratio = interval / config.dt;
  if (!(interval > 0.0) || std::abs(ratio - std::round(ratio)) > 1e-9 * ratio)
    throw ConfigError("solver member: interval must be an integer multiple of dt");
  const auto per_frame = static_cast<std::size_t>(std::llround(ratio));
  auto plan = config.make_plan();
  return [=](std::size_t member) {
    beta::BetaState state = start;
    state.rng = make_rng(seed, {member});
    beta::Solver solver(config, plan, std::move(state));
    Trajectory t({static_cast<std::size_t>(config.n_points)}, interval, start.time);
    t.metadata = {{"equation", "beta"}, {"variable", "U"}, {"conditioning", config.beta}, {"member", member}};
    for (std::size_t f = 0; f < n_frames; ++f) {
      if (f > 0) solver.advance(per_frame);
      t.append(beta::zonal_velocity(solver.state().zeta_modes, solver.plan()));
    }
    return t;
  };
}

MemberRunner emulator_member(const emu::Model& model, const Trajectory& history, double conditioning,
                             std::size_t n_steps, std::uint64_t seed) {
  return [&model, &history, conditioning, n_steps, seed](std::size_t member) {
    RolloutOptions opt;
    opt.n_steps = n_steps;
    opt.noise_seed = stream_seed(seed, {member});
    const Trajectory r = rollout(model, history, conditioning, opt);
    Trajectory t(history.frame_shape, history.snapshot_interval, history.time(history.n_frames() - 1));
    t.metadata = r.metadata;
    t.metadata["member"] = member;
    t.append(history.frame(history.n_frames() - 1));
    t.data.insert(t.data.end(), r.data.begin(), r.data.end());
    return t;
  };
}

// ---------------------------------------------------------------------------
// Chaos

namespace {

double distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

}  // namespace

LyapunovResult lyapunov_exponent(const ks::KSConfig& config, const LyapunovOptions& options) {
  config.validate();
  if (!(options.perturbation > 0.0) || !(options.renormalize_every > 0.0) || !(options.averaging_time > 0.0))
    throw ConfigError("lyapunov: perturbation, interval and averaging time must be positive");
  const int n = config.resolved_n();
  auto plan = spectral::make_plan_1d(n, config.L);
  ks::Integrator base(plan, config.dt, ks::random_initial_field(n, config.init_std, config.seed),
                      config.contour_points);
  base.advance(static_cast<std::size_t>(std::llround(options.transient / config.dt)));

  std::vector<double> u = base.field(), twin(u.size());
  Rng rng = make_rng(config.seed, {0x1a7});
  std::normal_distribution<double> normal;
  std::vector<double> dir(u.size());
  for (double& v : dir) v = normal(rng);
  // A mean component would shift the Galilean frame and make the twin
  // drift linearly away.
  const double mean = std::accumulate(dir.begin(), dir.end(), 0.0) / static_cast<double>(dir.size());
  for (double& v : dir) v -= mean;
  const double norm = std::sqrt(std::inner_product(dir.begin(), dir.end(), dir.begin(), 0.0));
  for (std::size_t i = 0; i < u.size(); ++i) twin[i] = u[i] + options.perturbation * dir[i] / norm;
  ks::Integrator other(plan, config.dt, twin, config.contour_points);

  const auto per = static_cast<std::size_t>(std::max(1LL, std::llround(options.renormalize_every / config.dt)));
  const auto count = static_cast<std::size_t>(std::max(1.0, std::round(options.averaging_time / options.renormalize_every)));
  const double interval = static_cast<double>(per) * config.dt;
  double log_growth = 0.0;
  for (std::size_t r = 0; r < count; ++r) {
    base.advance(per);
    other.advance(per);
    u = base.field();
    twin = other.field();
    const double d = distance(u, twin);
    log_growth += std::log(d / options.perturbation);
    for (std::size_t i = 0; i < u.size(); ++i) twin[i] = u[i] + (twin[i] - u[i]) * options.perturbation / d;
    other.set_field(twin);
  }
  LyapunovResult out;
  out.renormalizations = count;
  out.exponent = log_growth / (static_cast<double>(count) * interval);
  out.chaotic = out.exponent > 0.0;
  return out;
}

double tracking_horizon(const Trajectory& truth, const Trajectory& forecast, double lyapunov_exponent,
                        double threshold) {
  if (truth.frame_shape != forecast.frame_shape) throw ShapeError("tracking_horizon: frame shapes differ");
  if (forecast.n_frames() > truth.n_frames()) throw ShapeError("tracking_horizon: forecast longer than truth");
  if (truth.empty()) throw ShapeError("tracking_horizon: empty reference");
  double mean = 0.0;
  for (double v : truth.data) mean += v;
  mean /= static_cast<double>(truth.data.size());
  double var = 0.0;
  for (double v : truth.data) var += (v - mean) * (v - mean);
  const double clim = std::sqrt(var / static_cast<double>(truth.data.size()));

  std::size_t good = forecast.n_frames();
  for (std::size_t f = 0; f < forecast.n_frames(); ++f) {
    const auto a = truth.frame(f), b = forecast.frame(f);
    const double rms = distance(a, b) / std::sqrt(static_cast<double>(a.size()));
    if (rms > threshold * clim) {
      good = f;
      break;
    }
  }
  return static_cast<double>(good) * forecast.snapshot_interval * lyapunov_exponent;
}

double tracking_horizon(const emu::Model& model, const Trajectory& truth, double conditioning,
                        double lyapunov_exponent, double threshold) {
  if (model.config().mode != emu::Mode::deterministic)
    throw ConfigError("tracking_horizon: needs a deterministic model");
  const std::size_t S = static_cast<std::size_t>(model.config().history);
  if (truth.n_frames() <= S) throw ShapeError("tracking_horizon: reference shorter than the history");
  RolloutOptions opt;
  opt.n_steps = truth.n_frames() - S;
  opt.cap = INFINITY;
  const Trajectory forecast = rollout(model, truth.slice(0, S), conditioning, opt);
  return tracking_horizon(truth.slice(S, opt.n_steps), forecast, lyapunov_exponent, threshold);
}

// ---------------------------------------------------------------------------
// Output

void write_psd_csv(std::ostream& os, std::span<const double> psd) {
  os << "wavenumber,psd\n";
  os.precision(12);
  for (std::size_t k = 0; k < psd.size(); ++k) os << k << ',' << psd[k] << '\n';
}

void write_events_csv(std::ostream& os, const std::vector<EventRecord>& events) {
  os << "kind,time,count_before,count_after\n";
  os.precision(12);
  for (const auto& e : events) os << to_string(e.kind) << ',' << e.time << ',' << e.count_before << ',' << e.count_after << '\n';
}

void write_event_histogram_csv(std::ostream& os, const EventTimeHistogram& h) {
  os << "lower,upper,count\n";
  os.precision(12);
  for (std::size_t i = 0; i < h.counts.size(); ++i) os << h.edges[i] << ',' << h.edges[i + 1] << ',' << h.counts[i] << '\n';
  os << h.edges.back() << ",inf," << h.overflow << '\n';
}

void write_marginal_csv(std::ostream& os, const Histogram3D& h) {
  const auto m = marginal_density(h, 2);
  const auto& e = h.binning.edges;
  os << "u,du_dx,density\n";
  os.precision(12);
  for (std::size_t i = 0; i < h.binning.bins(0); ++i)
    for (std::size_t j = 0; j < h.binning.bins(1); ++j)
      os << 0.5 * (e[0][i] + e[0][i + 1]) << ',' << 0.5 * (e[1][j] + e[1][j + 1]) << ','
         << m[i * h.binning.bins(1) + j] << '\n';
}

}  // namespace pdelab::diag
