// Acceptance runner: one PASS/FAIL line per criterion. With no arguments
// every criterion runs; otherwise only the numbers given. Exit status is 0
// only if every selected criterion passed.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <cstring>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <numbers>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>

#include "cli.hpp"
#include "emulator_support.hpp"
#include "pdelab/beta_plane.hpp"
#include "pdelab/diagnostics.hpp"
#include "pdelab/diff.hpp"
#include "pdelab/errors.hpp"
#include "pdelab/emulator.hpp"
#include "pdelab/ks.hpp"
#include "pdelab/parallel.hpp"
#include "pdelab/training.hpp"

using namespace pdelab;
namespace fs = std::filesystem;

namespace {

constexpr double kPi = std::numbers::pi;

struct Outcome {
  bool pass = false;
  std::string detail;
  std::string note;
};

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

double max_abs(std::span<const double> v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

// ---------------------------------------------------------------------------
// 1. Fourth-order convergence of the KS integrator.

Outcome solver_convergence() {
  Stopwatch clock;
  const double L = 22.0, T = 1.0;
  const int n = 56;
  std::vector<double> u0(n);
  for (int i = 0; i < n; ++i) {
    const double x = 2 * kPi * i / n;
    u0[static_cast<std::size_t>(i)] = std::cos(x) * (1.0 + std::sin(x));
  }
  const auto plan = spectral::make_plan_1d(n, L);
  auto solve = [&](double dt) {
    ks::Integrator integ(plan, dt, u0);
    integ.advance(static_cast<std::size_t>(std::llround(T / dt)));
    return integ.field();
  };
  const auto ref = solve(1.0 / 8192);
  const double e1 = max_abs_diff(solve(0.025), ref);
  const double e2 = max_abs_diff(solve(0.0125), ref);
  const double e3 = max_abs_diff(solve(0.00625), ref);
  const double ratio = e2 / e3, t = clock.seconds();
  Outcome o;
  o.pass = std::abs(ratio - 16.0) <= 4.0 && t < 10.0;
  o.detail = fmt("error ratio %.2f for dt 0.0125 -> 0.00625 (need 16 +- 4); %.1f s (need < 10 s)", ratio, t);
  o.note = fmt("coarser pair dt 0.025 -> 0.0125 gives %.2f (stiff pre-asymptotic range)", e1 / e2);
  return o;
}

// ---------------------------------------------------------------------------
// 2. Linear decay of single modes against exact exponentials.

Outcome linear_oracle() {
  double worst_ks = 0.0, worst_beta = 0.0;
  for (const auto& [L, j] : std::vector<std::pair<double, int>>{{2 * kPi, 2}, {22.0, 4}, {22.0, 5}}) {
    const int n = 56;
    const double k = 2 * kPi * j / L, amp = 1e-8;
    std::vector<double> u0(n);
    for (int i = 0; i < n; ++i) u0[static_cast<std::size_t>(i)] = amp * std::sin(2 * kPi * j * i / n);
    ks::Integrator integ(spectral::make_plan_1d(n, L), 0.025, u0);
    integ.advance(40);
    const double expect = std::exp(k * k - k * k * k * k);
    const auto u = integ.field();
    for (int i = 0; i < n; ++i) {
      const auto s = static_cast<std::size_t>(i);
      if (std::abs(u0[s]) > 0.5 * amp) worst_ks = std::max(worst_ks, std::abs(u[s] / u0[s] - expect) / expect);
    }
  }
  for (double beta_value : {0.0, 0.9}) {
    beta::BetaConfig c;
    c.beta = beta_value;
    c.epsilon = 0.0;
    const auto plan = c.make_plan();
    const int n = c.n_points;
    for (const auto& [jx, jy] : std::vector<std::pair<int, int>>{{2, 3}, {1, 1}, {5, -4}}) {
      auto s0 = beta::initial_state(c, *plan);
      const std::size_t m = plan->mode_offset(jx, jy >= 0 ? jy : jy + n);
      const spectral::Complex a0{0.6, -0.3};
      s0.zeta_modes[m] = a0;
      beta::Solver solver(c, plan, s0);
      solver.advance(static_cast<std::size_t>(std::llround(1.0 / c.dt)));
      const double t = solver.state().time, k2 = jx * jx + jy * jy;
      const auto expect = a0 * std::exp(spectral::Complex(-c.mu, beta_value * jx / k2) * t);
      worst_beta = std::max(worst_beta, std::abs(solver.state().zeta_modes[m] - expect) / std::abs(expect));
    }
  }
  Outcome o;
  o.pass = worst_ks <= 1e-6 && worst_beta <= 1e-6;
  o.detail = fmt("max relative error KS %.2e, beta-plane %.2e over t = 1 (need <= 1e-6)", worst_ks, worst_beta);
  return o;
}

// ---------------------------------------------------------------------------
// 3. Gradient checks.

Outcome gradcheck_suite() {
  Stopwatch clock;
  double worst_op = 0.0;
  std::string worst_name, failures;
  std::size_t checks = 0;
  for (const auto& [name, op] : ad::op_registry()) {
    for (std::uint64_t seed : {0u, 1u, 2u}) {
      ad::GradCheckOptions opt;
      opt.tolerance = 1e-6;
      opt.seed = seed;
      const auto r = ad::check_gradients(name, opt);
      ++checks;
      if (r.worst > worst_op) worst_op = r.worst, worst_name = name;
      if (!r.passed) failures += " " + name;
    }
  }
  double worst_model = 0.0;
  for (bool gates : {false, true})
    for (auto mode : {emu::Mode::deterministic, emu::Mode::probabilistic})
      for (auto phase : {emu::Phase::pretrain, emu::Phase::finetune}) {
        const auto r = test::check_tiny_model(gates, mode, phase, 5);
        ++checks;
        worst_model = std::max(worst_model, r.worst);
        if (!r.passed) failures += " model(" + emu::to_string(mode) + "," + emu::to_string(phase) + ")";
      }
  const double t = clock.seconds();
  Outcome o;
  o.pass = failures.empty() && worst_op <= 1e-6 && worst_model <= 1e-5 && t < 60.0;
  o.detail = fmt("%zu primitives x 3 seeds worst %.1e (%s, need <= 1e-6); tiny model x 8 worst %.1e (need <= 1e-5); "
                 "%.1f s (need < 60 s)",
                 ad::op_registry().size(), worst_op, worst_name.c_str(), worst_model, t);
  if (!failures.empty()) o.note = "failed:" + failures;
  return o;
}

// ---------------------------------------------------------------------------
// 4. Shift equivariance of the deterministic forward pass.

ad::Tensor<float> roll(const ad::Tensor<float>& in, std::size_t shift) {
  ad::Tensor<float> out(in.shape);
  const std::size_t B = in.shape[0], D = in.shape[1], inner = in.size() / (B * D);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t d = 0; d < D; ++d)
      for (std::size_t i = 0; i < inner; ++i)
        out.data[(b * D + (d + shift) % D) * inner + i] = in.data[(b * D + d) * inner + i];
  return out;
}

Outcome equivariance() {
  emu::Model model(emu::ModelConfig{}, 21);
  // Random values everywhere, including the positional bias and the
  // conditioning map, so no symmetry comes from the initialisation.
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<float> u(-0.3f, 0.3f);
  for (auto& p : model.parameters())
    for (float& v : p.value.data) v = u(rng);
  model.phase = emu::Phase::finetune;
  const std::vector<double> cond{0.4, -0.7};
  double worst = 0.0;
  for (std::size_t D : {56u, 90u, 246u}) {
    ad::Tensor<float> h({2, D, 2});
    std::normal_distribution<float> nd;
    for (float& v : h.data) v = nd(rng);
    const auto base = emu::predict(model, h, cond, nullptr);
    const ad::Tensor<float> y0({2, D}, base);
    for (std::size_t s : {std::size_t{1}, std::size_t{7}, D / 2}) {
      const auto shifted = emu::predict(model, roll(h, s), cond, nullptr);
      const auto expect = roll(y0, s);
      for (std::size_t i = 0; i < shifted.size(); ++i)
        worst = std::max(worst, static_cast<double>(std::abs(shifted[i] - expect.data[i])));
    }
  }
  Outcome o;
  o.pass = worst <= 1e-5;
  o.detail = fmt("max |f(shift x) - shift f(x)| = %.2e over D in {56, 90, 246}, shifts {1, 7, D/2} (need <= 1e-5)",
                 worst);
  return o;
}

// ---------------------------------------------------------------------------
// 5. One checkpoint on every KS grid size.

Outcome size_agnostic() {
  emu::ModelConfig mc;
  mc.channels = 32;
  mc.n_blocks = 4;
  emu::Model model(mc, 5);
  model.normalization = {0.0, 1.2};
  const auto path = fs::temp_directory_path() / "pdelab_acceptance_sizes.npec";
  emu::save_checkpoint(path, model);
  const auto loaded = emu::load_checkpoint(path);
  fs::remove(path);
  std::vector<std::uint64_t> hashes;
  for (const auto& p : loaded.parameters()) hashes.push_back(emu::parameter_hash(p));

  std::string sizes;
  bool ok = true;
  for (double L : {22.0, 36.0, 48.0, 64.0, 98.0, 128.0, 200.0}) {
    ks::KSConfig k;
    k.L = L;
    k.warmup_time = 20.0;
    k.n_snapshots = 3;
    const auto traj = ks::generate_dataset(k);
    const std::size_t D = traj.frame_size();
    diag::RolloutOptions ro;
    ro.n_steps = 5;
    const auto out = diag::rollout(loaded, traj.slice(1, 2), L, ro);
    const bool good = out.frame_size() == D && out.n_frames() == 5 &&
                      std::all_of(out.data.begin(), out.data.end(), [](double v) { return std::isfinite(v); });
    ok = ok && good;
    sizes += (sizes.empty() ? "" : ", ") + std::to_string(D) + (good ? "" : "(bad)");
  }
  for (std::size_t i = 0; i < hashes.size(); ++i) ok = ok && emu::parameter_hash(loaded.parameters()[i]) == hashes[i];
  Outcome o;
  o.pass = ok;
  o.detail = fmt("one checkpoint (%zu parameters) ran D = {%s}; parameters untouched", loaded.parameter_count(),
                 sizes.c_str());
  return o;
}

// ---------------------------------------------------------------------------
// 6. CRPS against a brute-force evaluator.

double crps_triple_loop(const std::vector<double>& y, const std::vector<std::vector<double>>& x) {
  const double m = static_cast<double>(x.size());
  double total = 0.0;
  for (std::size_t d = 0; d < y.size(); ++d) {
    double skill = 0.0, spread = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      skill += std::abs(x[i][d] - y[d]);
      for (std::size_t j = 0; j < x.size(); ++j) spread += std::abs(x[i][d] - x[j][d]);
    }
    total += skill / m - spread / (2.0 * m * m);
  }
  return total / static_cast<double>(y.size());
}

Outcome crps_oracle() {
  std::mt19937_64 rng(2024);
  std::normal_distribution<double> nd;
  double worst = 0.0;
  bool mae_exact = true;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t D = 1 + rng() % 40, m = 1 + rng() % 8;
    std::vector<double> y(D);
    for (double& v : y) v = 3.0 * nd(rng);
    std::vector<std::vector<double>> x(m, std::vector<double>(D));
    for (auto& member : x)
      for (double& v : member) v = 3.0 * nd(rng);
    worst = std::max(worst, std::abs(train::crps_loss(y, x) - crps_triple_loop(y, x)));
    double mae = 0.0;
    for (std::size_t d = 0; d < D; ++d) mae += std::abs(y[d] - x[0][d]);
    mae_exact = mae_exact && train::crps_loss(y, {x[0]}) == mae / static_cast<double>(D);
  }
  Outcome o;
  o.pass = worst <= 1e-10 && mae_exact;
  o.detail = fmt("max |crps - brute force| = %.1e over 100 instances (need <= 1e-10); m = 1 equals MAE exactly: %s",
                 worst, mae_exact ? "yes" : "no");
  return o;
}

// ---------------------------------------------------------------------------
// 7. Freeze contract.

Trajectory ks_run(double L, std::size_t snapshots, std::uint64_t seed, double warmup = 500.0) {
  ks::KSConfig k;
  k.L = L;
  k.n_snapshots = snapshots;
  k.warmup_time = warmup;
  k.seed = seed;
  return ks::generate_dataset(k);
}

Outcome freeze_contract() {
  emu::ModelConfig mc;
  mc.channels = 16;
  mc.n_blocks = 2;
  const emu::Model init(mc, 17);
  emu::Model model = init;
  const train::Dataset pre({train::Shard{22.0, {ks_run(22.0, 120, 1, 100.0)}}}, mc.history, 0.05);
  train::TrainConfig tc;
  tc.epochs = 5;
  tc.batch_size = 32;
  train::pretrain(model, pre, tc);

  std::size_t frozen = 0, identical = 0, trained_changed = 0, trained = 0;
  for (std::size_t i = 0; i < model.parameters().size(); ++i) {
    const auto& a = model.parameters()[i];
    const auto& b = init.parameters()[i];
    if (a.conditioning) {
      ++frozen;
      if (a.value.data.size() == b.value.data.size() &&
          std::memcmp(a.value.data.data(), b.value.data.data(), a.value.data.size() * sizeof(float)) == 0)
        ++identical;
    } else {
      ++trained;
      if (a.value.data != b.value.data) ++trained_changed;
    }
  }

  const auto batch = train::assemble_batch(pre, pre.train()[0], model.normalization, mc.cond_dim);
  const auto before = emu::predict(model, batch.history, {}, nullptr);
  const train::Dataset multi(
      {train::Shard{22.0, {ks_run(22.0, 60, 2, 100.0)}}, train::Shard{26.0, {ks_run(26.0, 60, 3, 100.0)}}}, mc.history,
      0.05);
  tc.epochs = 0;
  train::finetune(model, multi, tc);
  const auto after = emu::predict(model, batch.history, std::vector<double>(batch.size, 22.0), nullptr);
  double drift = 0.0;
  for (std::size_t i = 0; i < before.size(); ++i) drift = std::max(drift, double(std::abs(before[i] - after[i])));

  Outcome o;
  o.pass = frozen > 0 && identical == frozen && trained_changed > 0 && drift <= 1e-7;
  o.detail = fmt("conditioning tensors bit-identical after pretrain: %zu/%zu (%zu/%zu others moved); "
                 "zero-epoch finetune max output change %.1e (need <= 1e-7)",
                 identical, frozen, trained_changed, trained, drift);
  return o;
}

// ---------------------------------------------------------------------------
// 8 and 9 share the toy emulator.

struct Toy {
  emu::Model model;
  Trajectory data;
  train::Dataset dataset;
  double seconds = 0.0;
  double final_val_mse = 0.0;
};

const Toy& toy_model() {
  static std::optional<Toy> toy;
  if (toy) return *toy;
  Stopwatch clock;
  Toy t;
  t.data = ks_run(22.0, 500, 1);
  t.dataset = train::Dataset({train::Shard{22.0, {t.data}}}, 2, 0.05);
  emu::ModelConfig mc;
  mc.channels = 32;
  mc.n_blocks = 4;
  t.model = emu::Model(mc, 1);
  train::TrainConfig tc;
  tc.epochs = 200;
  tc.threads = resolve_threads(0);
  const auto history = train::pretrain(t.model, t.dataset, tc);
  t.final_val_mse = history.back().val_mse;
  t.seconds = clock.seconds();
  toy = std::move(t);
  return *toy;
}

Outcome desk_scale_learning() {
  const Toy& toy = toy_model();
  // One-step error in physical units on the held-out trailing pairs.
  const auto& val = toy.dataset.validation();
  const auto batch = train::assemble_batch(toy.dataset, val, toy.model.normalization, 1);
  const auto pred = emu::predict(toy.model, batch.history, {}, nullptr);
  const auto& norm = toy.model.normalization;
  double se = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double e = norm.inverse(pred[i]) - norm.inverse(batch.target.data[i]);
    se += e * e;
  }
  const double mse = se / static_cast<double>(pred.size());
  double mean = 0.0, var = 0.0;
  for (double v : toy.data.data) mean += v;
  mean /= static_cast<double>(toy.data.data.size());
  for (double v : toy.data.data) var += (v - mean) * (v - mean);
  var /= static_cast<double>(toy.data.data.size());

  Stopwatch clock;
  double peak = INFINITY;
  std::string rollout_note;
  try {
    diag::RolloutOptions ro;
    ro.n_steps = 10000;
    peak = max_abs(diag::rollout(toy.model, toy.data.slice(0, 2), 22.0, ro).data);
  } catch (const DivergenceError& e) {
    rollout_note = fmt("rollout diverged at step %lld", static_cast<long long>(e.step()));
  }
  Outcome o;
  o.pass = mse < 0.25 * var && peak < 5.0 && toy.seconds < 1800.0;
  o.detail = fmt("one-step MSE %.2e = %.4f x climatological variance %.3f (need < 0.25x); 10000-step max|u| %.2f "
                 "(need < 5); training %.0f s on %d thread(s) (need <= 1800 s)",
                 mse, mse / var, var, peak, toy.seconds, resolve_threads(0));
  o.note = rollout_note;
  return o;
}

Outcome statistical_null() {
  const Toy& toy = toy_model();
  const auto a = ks_run(22.0, 1001, 11), b = ks_run(22.0, 1001, 12);
  const auto samples_a = diag::joint_samples(a, 22.0);
  const auto binning = diag::reference_binning(samples_a, 50, 4.0);
  const auto ha = diag::histogram(samples_a, binning);
  const double eps0 = diag::hellinger(ha, diag::joint_pdf(b, 22.0, binning));
  Outcome o;
  double d = 1.0;
  std::optional<Trajectory> emulated;
  try {
    diag::RolloutOptions ro;
    ro.n_steps = 1000;
    emulated = diag::rollout(toy.model, a.slice(0, 2), 22.0, ro);
    d = diag::hellinger(ha, diag::joint_pdf(*emulated, 22.0, binning));
  } catch (const DivergenceError& e) {
    o.note = fmt("emulator rollout diverged at step %lld", static_cast<long long>(e.step()));
  }
  o.pass = emulated.has_value() && d < 3.0 * eps0;
  o.detail = fmt("eps0 (solver vs solver, 1000 time units, 50 bins) = %.3f; emulator %.3f (need < 3 eps0 = %.3f)",
                 eps0, d, 3.0 * eps0);
  if (emulated && 3.0 * eps0 >= 1.0) {
    const auto coarse = diag::reference_binning(samples_a, 20, 4.0);
    const auto hc = diag::histogram(samples_a, coarse);
    o.note = fmt("3 eps0 >= 1 bounds every Hellinger distance, so this threshold cannot discriminate; "
                 "at 20 bins eps0 = %.3f, emulator %.3f",
                 diag::hellinger(hc, diag::joint_pdf(b, 22.0, coarse)),
                 diag::hellinger(hc, diag::joint_pdf(*emulated, 22.0, coarse)));
  }
  return o;
}

// ---------------------------------------------------------------------------
// 10. Beta-plane spin-up and jets.

Outcome beta_physics() {
  Stopwatch clock;
  beta::BetaConfig c;
  c.seed = 1;
  beta::Solver solver(c, c.make_plan());
  const auto per_unit = static_cast<std::size_t>(std::llround(1.0 / c.dt));
  const int horizon = 300;  // mu t = 12
  std::vector<double> energy;
  Trajectory profiles({static_cast<std::size_t>(c.n_points)}, 1.0, 1.0);
  for (int t = 1; t <= horizon; ++t) {
    solver.advance(per_unit);
    energy.push_back(beta::kinetic_energy(solver.state().zeta_modes, solver.plan()));
    profiles.append(beta::zonal_velocity(solver.state().zeta_modes, solver.plan()));
  }
  auto window_mean = [&](double mu_t0, double mu_t1) {
    double s = 0.0;
    int n = 0;
    for (int t = 1; t <= horizon; ++t)
      if (c.mu * t >= mu_t0 && c.mu * t <= mu_t1) s += energy[static_cast<std::size_t>(t - 1)], ++n;
    return s / n;
  };
  const double at3 = window_mean(2.5, 3.5), plateau = window_mean(6.0, 12.0);
  const bool equilibrated = std::abs(at3 - plateau) <= 0.1 * plateau;

  const auto counts = diag::jet_counts(profiles.slice(profiles.n_frames() - 100, 100));
  std::map<int, int> freq;
  for (int n : counts) ++freq[n];
  const auto mode = std::max_element(freq.begin(), freq.end(),
                                     [](const auto& x, const auto& y) { return x.second < y.second; });
  const double mode_share = mode->second / 100.0;
  const double peak_u = max_abs(profiles.frame(profiles.n_frames() - 1));
  const double t = clock.seconds();

  Outcome o;
  o.pass = equilibrated && mode->first >= 1 && mode_share > 0.9 && t < 1200.0;
  o.detail = fmt("E(mu t 2.5-3.5) / E(mu t 6-12) = %.3f (need within 10%%); jet count mode %d in %.0f%% of the final "
                 "100 frames (need > 90%%); %.0f s (need < 1200 s)",
                 at3 / plateau, mode->first, 100 * mode_share, t);
  std::string spread;
  for (const auto& [k, v] : freq) spread += fmt(" %d:%d", k, v);
  o.note = fmt("final max|U| %.3f against rms eddy velocity %.3f; counts over the final 100 frames:%s", peak_u,
               std::sqrt(2.0 * plateau), spread.c_str());
  return o;
}

// ---------------------------------------------------------------------------
// 11. Event machinery.

Trajectory reversed(const Trajectory& t) {
  Trajectory r(t.frame_shape, t.snapshot_interval, t.t0);
  for (std::size_t i = t.n_frames(); i-- > 0;) r.append(t.frame(i));
  return r;
}

Outcome event_machinery() {
  Stopwatch clock;
  beta::BetaConfig c;
  c.seed = 3;
  beta::Solver spin(c, c.make_plan());
  spin.advance(static_cast<std::size_t>(std::llround(125.0 / c.dt)));
  const beta::BetaState start = spin.state();

  const std::size_t members = 50, frames = 51;
  const double horizon = 50.0;
  std::vector<double> edges;
  for (int i = 0; i <= 10; ++i) edges.push_back(5.0 * i);
  const int threads = resolve_threads(0);

  auto members_of = [&](std::uint64_t seed) {
    const auto run = diag::beta_solver_member(start, c, frames, 1.0, seed);
    std::vector<Trajectory> out(members);
    parallel_for(members, threads, [&](std::size_t m) { out[m] = run(m); });
    return out;
  };
  const std::uint64_t seed_a = stream_seed(99, {1}), seed_b = stream_seed(99, {2});
  const auto ens_a = members_of(seed_a), ens_b = members_of(seed_b);

  // Conservation and time reversal, member by member.
  bool chained = true, reversal = true;
  std::size_t n_events = 0;
  auto first_times = [&](const std::vector<Trajectory>& ens) {
    std::vector<std::optional<double>> times;
    for (const auto& traj : ens) {
      const auto ev = diag::detect_events(traj);
      n_events += ev.size();
      for (std::size_t i = 0; i < ev.size(); ++i) {
        const int step = ev[i].count_after - ev[i].count_before;
        chained = chained && std::abs(step) == 1 &&
                  (step > 0) == (ev[i].kind == diag::EventKind::nucleation) &&
                  (i == 0 || ev[i - 1].count_after == ev[i].count_before);
      }
      const auto back = diag::detect_events(reversed(traj));
      reversal = reversal && back.size() == ev.size();
      for (std::size_t i = 0; reversal && i < ev.size(); ++i) {
        const auto& f = ev[ev.size() - 1 - i];
        reversal = back[i].kind != f.kind && back[i].count_before == f.count_after &&
                   back[i].count_after == f.count_before;
      }
      auto t = diag::first_event_time(ev, diag::EventKind::coalescence, traj.t0);
      if (t && *t > horizon) t.reset();
      times.push_back(t);
    }
    return times;
  };
  const auto times_a = first_times(ens_a), times_b = first_times(ens_b);
  const auto hist_a = diag::event_time_histogram(times_a, edges);
  const auto hist_b = diag::event_time_histogram(times_b, edges);
  const bool totals = hist_a.total() == members && hist_b.total() == members;

  // The library path must reproduce the member-by-member histogram.
  diag::EventPdfOptions opt;
  opt.kind = diag::EventKind::coalescence;
  opt.horizon = horizon;
  opt.edges = edges;
  opt.threads = threads;
  const auto pdf_a = diag::event_time_pdf(diag::beta_solver_member(start, c, frames, 1.0, seed_a), members, opt);
  const bool consistent = pdf_a.counts == hist_a.counts && pdf_a.overflow == hist_a.overflow;

  // Null calibration: distances between random halves of ensemble A.
  std::mt19937_64 rng(7);
  std::vector<std::size_t> idx(members);
  std::vector<double> null;
  for (int k = 0; k < 500; ++k) {
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    std::vector<std::optional<double>> lo, hi;
    for (std::size_t i = 0; i < members; ++i) (i < members / 2 ? lo : hi).push_back(times_a[idx[i]]);
    null.push_back(diag::hellinger(diag::event_time_histogram(lo, edges).mass(),
                                   diag::event_time_histogram(hi, edges).mass()));
  }
  std::sort(null.begin(), null.end());
  const double eps1 = null[static_cast<std::size_t>(0.95 * (null.size() - 1))];
  const double d = diag::hellinger(hist_a.mass(), hist_b.mass());
  const double t = clock.seconds();

  Outcome o;
  o.pass = chained && reversal && totals && consistent && d <= eps1;
  o.detail = fmt("%zu events: counts chain %s, reversal swaps kinds %s, totals %s, event_time_pdf matches %s; "
                 "independent 50-member ensemble at %.3f vs eps1 %.3f (95th pct of 500 half-splits)",
                 n_events, chained ? "yes" : "no", reversal ? "yes" : "no", totals ? "yes" : "no",
                 consistent ? "yes" : "no", d, eps1);
  o.note = fmt("first-coalescence events within %.0f time units: %llu/50 and %llu/50; %.0f s", horizon,
               static_cast<unsigned long long>(members - hist_a.overflow),
               static_cast<unsigned long long>(members - hist_b.overflow), t);
  return o;
}

// ---------------------------------------------------------------------------
// 12. Determinism through the command line.

struct CliRun {
  fs::path dir;

  int operator()(std::vector<std::string> args) const {
    std::vector<const char*> argv{"pdelab"};
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
    if (code != 0) std::cerr << err.str();
    return code;
  }
  std::string p(const std::string& name) const { return (dir / name).string(); }
};

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

Outcome determinism() {
  CliRun cli{fs::temp_directory_path() / "pdelab_acceptance_determinism"};
  fs::remove_all(cli.dir);
  fs::create_directories(cli.dir);
  bool ok = true;
  ok = ok && cli({"simulate", "ks", "--L", "22", "--snapshots", "300", "--warmup", "100", "--seed", "1", "--out",
                  cli.p("a.pdet")}) == 0;
  ok = ok && cli({"simulate", "ks", "--L", "26", "--snapshots", "300", "--warmup", "100", "--seed", "2", "--out",
                  cli.p("b.pdet")}) == 0;
  ok = ok && cli({"pretrain", "--data", cli.p("a.pdet"), "--channels", "16", "--blocks", "2", "--epochs", "4",
                  "--batch-size", "32", "--seed", "5", "--out", cli.p("pre.npec")}) == 0;
  ok = ok && cli({"finetune", "--checkpoint", cli.p("pre.npec"), "--data", cli.p("a.pdet"), "--data",
                  cli.p("b.pdet"), "--epochs", "2", "--batch-size", "32", "--seed", "5", "--out",
                  cli.p("fine.npec")}) == 0;
  ok = ok && cli({"evaluate", "events", "--solver", "--warmup", "50", "--members", "6", "--horizon", "20",
                  "--seed", "5", "--out", cli.p("ev")}) == 0;
  ok = ok && cli({"evaluate", "pdf", "--truth", cli.p("a.pdet"), "--model", cli.p("fine.npec"), "--bins", "20",
                  "--out", cli.p("pdf")}) == 0;
  if (!ok) return {false, "reference runs failed", ""};

  // Rerun each from its manifest, whose "command" names the subcommand,
  // with 1 and 3 workers; every metric file must match the reference.
  struct Check {
    std::string out;
    std::vector<std::string> files;
  };
  const std::vector<Check> checks{{"pre.npec", {".metrics.csv", ""}},
                                  {"fine.npec", {".metrics.csv", ""}},
                                  {"ev", {".event_times.csv", ".summary.txt"}},
                                  {"pdf", {".marginal_truth.csv", ".marginal_candidate.csv", ".summary.txt"}}};
  std::size_t compared = 0, identical = 0;
  std::string mismatches;
  for (const auto& ch : checks) {
    const fs::path manifest = cli.p(ch.out + ".manifest.json");
    const auto command = Json::parse(slurp(manifest)).at("command").get<std::string>();
    for (const char* threads : {"1", "3"}) {
      const std::string rerun = "t" + std::string(threads) + "_" + ch.out;
      std::vector<std::string> args;
      std::istringstream words(command);
      for (std::string w; words >> w;) args.push_back(w);
      for (const std::string& a : {std::string("--config"), manifest.string(), std::string("--threads"),
                                   std::string(threads), std::string("--manifest"), cli.p(rerun + ".manifest.json")})
        args.push_back(a);
      args.push_back("--out");
      args.push_back(cli.p(rerun));
      if (cli(args) != 0) return {false, "rerun of " + ch.out + " failed", ""};
      for (const auto& f : ch.files) {
        ++compared;
        if (slurp(cli.p(ch.out + f)) == slurp(cli.p(rerun + f)) && !slurp(cli.p(ch.out + f)).empty())
          ++identical;
        else
          mismatches += " " + rerun + f;
      }
    }
  }
  fs::remove_all(cli.dir);
  Outcome o;
  o.pass = identical == compared;
  o.detail = fmt("%zu/%zu output files byte-identical across manifest reruns with --threads 1 and 3 "
                 "(pretrain, finetune, solver events, pdf)",
                 identical, compared);
  if (!mismatches.empty()) o.note = "differ:" + mismatches;
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"solver convergence", solver_convergence},
      {"linear-regime oracle", linear_oracle},
      {"gradcheck suite", gradcheck_suite},
      {"shift equivariance", equivariance},
      {"size agnosticism", size_agnostic},
      {"CRPS oracle", crps_oracle},
      {"freeze contract", freeze_contract},
      {"desk-scale learning", desk_scale_learning},
      {"statistical-null calibration", statistical_null},
      {"beta-plane physics", beta_physics},
      {"event machinery", event_machinery},
      {"determinism", determinism}};

  std::set<int> selected;
  for (int i = 1; i < argc; ++i) {
    const int n = std::atoi(argv[i]);
    if (n < 1 || n > static_cast<int>(criteria.size())) {
      std::cerr << "usage: " << argv[0] << " [criterion 1-" << criteria.size() << "]...\n";
      return 2;
    }
    selected.insert(n);
  }
  if (selected.empty())
    for (int n = 1; n <= static_cast<int>(criteria.size()); ++n) selected.insert(n);

  bool all = true;
  for (int n : selected) {
    const auto& [name, fn] = criteria[static_cast<std::size_t>(n - 1)];
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what(), ""};
    }
    all = all && o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  C" << n << (n < 10 ? "  " : " ") << name << ": " << o.detail
              << '\n';
    if (!o.note.empty()) std::cout << "          note: " << o.note << '\n';
    std::cout.flush();
  }
  return all ? 0 : 1;
}
