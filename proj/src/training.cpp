#include "pdelab/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <numbers>
#include <random>
#include <sstream>

#include "pdelab/errors.hpp"
#include "pdelab/parallel.hpp"
#include "pdelab/rng.hpp"
#include "pdelab/spectral.hpp"

namespace pdelab::train {

namespace {

void require_same_length(std::size_t a, std::size_t b, const char* what) {
  if (a != b) throw ShapeError(std::string(what) + ": length mismatch " + std::to_string(a) + " vs " + std::to_string(b));
}

std::vector<double> modulus(std::span<const double> x) {
  std::vector<spectral::Complex> X(x.size() / 2 + 1);
  spectral::rfft(x, X);
  std::vector<double> out(X.size());
  for (std::size_t k = 0; k < X.size(); ++k) out[k] = std::abs(X[k]);
  return out;
}

}  // namespace

double mse_loss(std::span<const double> truth, std::span<const double> pred) {
  require_same_length(truth.size(), pred.size(), "mse_loss");
  if (truth.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) s += (pred[i] - truth[i]) * (pred[i] - truth[i]);
  return s / static_cast<double>(truth.size());
}

double crps_loss(std::span<const double> truth, const std::vector<std::vector<double>>& members) {
  if (members.empty()) throw ConfigError("crps_loss: ensemble must have at least one member");
  for (const auto& m : members) require_same_length(truth.size(), m.size(), "crps_loss");
  if (truth.empty()) return 0.0;
  const double m = static_cast<double>(members.size());
  double total = 0.0;
  for (std::size_t d = 0; d < truth.size(); ++d) {
    double skill = 0.0, spread = 0.0;
    for (std::size_t i = 0; i < members.size(); ++i) {
      skill += std::abs(truth[d] - members[i][d]);
      for (std::size_t j = i + 1; j < members.size(); ++j) spread += std::abs(members[i][d] - members[j][d]);
    }
    // Each unordered pair appears twice in the double sum.
    total += skill / m - spread / (m * m);
  }
  return total / static_cast<double>(truth.size());
}

double spectral_loss(std::span<const double> truth, std::span<const double> pred) {
  require_same_length(truth.size(), pred.size(), "spectral_loss");
  if (truth.empty()) return 0.0;
  const auto a = modulus(truth), b = modulus(pred);
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += std::abs(a[k] - b[k]);
  return s / static_cast<double>(a.size());
}

double composite_loss(std::span<const double> truth, const std::vector<std::vector<double>>& members,
                      double lambda) {
  double spec = 0.0;
  if (lambda != 0.0) {
    for (const auto& m : members) spec += spectral_loss(truth, m);
    spec /= static_cast<double>(members.size());
  }
  return crps_loss(truth, members) + lambda * spec;
}

namespace {

/// Mean over members of the spectral MAE, or an invalid Var for lambda = 0.
template <class T>
Var spectral_term(Graph<T>& g, Var truth, std::span<const Var> members) {
  const Var ft = ad::dft_modulus(g, truth);
  Var sum;
  for (const Var& m : members) {
    const Var term = ad::mae(g, ad::dft_modulus(g, m), ft);
    sum = sum.valid() ? ad::add(g, sum, term) : term;
  }
  return sum;
}

}  // namespace

template <class T>
Var composite_loss(Graph<T>& g, Var truth, std::span<const Var> members, T lambda) {
  const Var c = ad::crps(g, truth, members);
  if (lambda == T(0)) return c;
  return ad::axpy(g, c, spectral_term(g, truth, members), lambda / static_cast<T>(members.size()));
}

template Var composite_loss<float>(Graph<float>&, Var, std::span<const Var>, float);
template Var composite_loss<double>(Graph<double>&, Var, std::span<const Var>, double);

// ---------------------------------------------------------------------------
// Configuration

std::string to_string(LossKind k) { return k == LossKind::mse ? "mse" : "crps_spectral"; }

LossKind loss_from_string(const std::string& s) {
  if (s == "mse") return LossKind::mse;
  if (s == "crps_spectral") return LossKind::crps_spectral;
  throw ConfigError("unknown loss '" + s + "' (mse|crps_spectral)");
}

namespace {

std::string schedule_to_string(Schedule s) { return s == Schedule::constant ? "constant" : "cosine"; }

Schedule schedule_from_string(const std::string& s) {
  if (s == "constant") return Schedule::constant;
  if (s == "cosine") return Schedule::cosine;
  throw ConfigError("unknown schedule '" + s + "' (constant|cosine)");
}

}  // namespace

void TrainConfig::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("train: lr must be positive");
  if (epochs < 0) throw ConfigError("train: epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (ensemble_m < 1) throw ConfigError("train: ensemble_m must be >= 1");
  if (loss == LossKind::crps_spectral && ensemble_m < 2)
    throw ConfigError("train: the crps_spectral loss needs ensemble_m >= 2");
  if (loss == LossKind::mse && ensemble_m != 1) throw ConfigError("train: the mse loss uses ensemble_m = 1");
  if (!(lambda >= 0.0)) throw ConfigError("train: lambda must be >= 0");
  if (!(validation_fraction >= 0.0 && validation_fraction < 1.0))
    throw ConfigError("train: validation_fraction must lie in [0, 1)");
  if (shard_size < 1) throw ConfigError("train: shard_size must be >= 1");
  if (!(max_loss > 0.0)) throw ConfigError("train: max_loss must be positive");
}

Json TrainConfig::to_json() const {
  return Json{{"phase", emu::to_string(phase)},
              {"loss", train::to_string(loss)},
              {"lr", lr},
              {"epochs", epochs},
              {"batch_size", batch_size},
              {"ensemble_m", ensemble_m},
              {"lambda", lambda},
              {"seed", seed},
              {"schedule", schedule_to_string(schedule)},
              {"validation_fraction", validation_fraction},
              {"shard_size", shard_size},
              {"max_loss", max_loss}};
}

TrainConfig TrainConfig::from_json(const Json& j) {
  TrainConfig c;
  try {
    c.phase = emu::phase_from_string(j.value("phase", emu::to_string(c.phase)));
    if (c.phase == emu::Phase::finetune) c.lr = finetune_lr(j.value("pretrain_lr", c.lr));
    c.loss = loss_from_string(j.value("loss", train::to_string(c.loss)));
    c.lr = j.value("lr", c.lr);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.ensemble_m = j.value("ensemble_m", c.loss == LossKind::crps_spectral ? 2 : 1);
    c.lambda = j.value("lambda", c.lambda);
    c.seed = j.value("seed", c.seed);
    c.schedule = schedule_from_string(j.value("schedule", schedule_to_string(c.schedule)));
    c.validation_fraction = j.value("validation_fraction", c.validation_fraction);
    c.shard_size = j.value("shard_size", c.shard_size);
    c.max_loss = j.value("max_loss", c.max_loss);
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Data

Dataset::Dataset(std::vector<Shard> shards, int history, double validation_fraction)
    : shards_(std::move(shards)), history_(history) {
  if (history < 1) throw ConfigError("dataset: history must be >= 1");
  if (shards_.empty()) throw ConfigError("dataset: no data");
  train_.resize(shards_.size());
  for (std::size_t s = 0; s < shards_.size(); ++s) {
    for (std::size_t t = 0; t < shards_[s].trajectories.size(); ++t) {
      const Trajectory& tr = shards_[s].trajectories[t];
      if (tr.frame_shape.size() != 1)
        throw ConfigError("dataset: expected 1D frames, got " + ad::shape_string(tr.frame_shape));
      const std::size_t S = static_cast<std::size_t>(history);
      if (tr.n_frames() <= S) continue;
      const std::size_t n = tr.n_frames() - S;
      const auto n_val = static_cast<std::size_t>(std::floor(validation_fraction * static_cast<double>(n)));
      for (std::size_t i = 0; i < n; ++i) {
        const Sample sample{s, t, S + i};
        (i < n - n_val ? train_[s] : validation_).push_back(sample);
      }
    }
  }
  if (train_size() == 0) throw ConfigError("dataset: no trajectory is longer than the history");
}

Dataset Dataset::load(const std::vector<DatasetEntry>& entries, int history, double validation_fraction) {
  std::vector<Shard> shards;
  std::map<double, std::size_t> index;
  for (const auto& e : entries) {
    if (!std::isfinite(e.conditioning)) throw ConfigError("dataset: conditioning value must be finite");
    auto [it, fresh] = index.try_emplace(e.conditioning, shards.size());
    if (fresh) shards.push_back(Shard{e.conditioning, {}});
    shards[it->second].trajectories.push_back(read_trajectory(e.path));
  }
  return Dataset(std::move(shards), history, validation_fraction);
}

std::size_t Dataset::train_size() const noexcept {
  std::size_t n = 0;
  for (const auto& s : train_) n += s.size();
  return n;
}

std::size_t Dataset::extent(const Sample& s) const { return shards_.at(s.shard).trajectories.at(s.trajectory).frame_shape[0]; }

std::vector<double> Dataset::conditioning_values() const {
  std::vector<double> v;
  for (const auto& s : shards_) v.push_back(s.conditioning);
  return v;
}

emu::Normalization Dataset::fit_normalization() const {
  double sum = 0.0, n = 0.0;
  for (const auto& s : shards_)
    for (const auto& t : s.trajectories)
      for (double v : t.data) sum += v, n += 1.0;
  const double mean = sum / n;
  double var = 0.0;
  for (const auto& s : shards_)
    for (const auto& t : s.trajectories)
      for (double v : t.data) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / n);
  return {mean, sd > 0.0 ? sd : 1.0};
}

Batch assemble_batch(const Dataset& data, std::span<const Sample> samples, const emu::Normalization& norm,
                     int cond_dim) {
  if (samples.empty()) throw BatchingError("empty batch");
  if (cond_dim != 1) throw ConfigError("datasets carry one conditioning value per sample (cond_dim = 1)");
  const std::size_t D = data.extent(samples[0]);
  for (const auto& s : samples)
    if (data.extent(s) != D)
      throw BatchingError("batch mixes spatial extents " + std::to_string(D) + " and " +
                          std::to_string(data.extent(s)));
  const std::size_t B = samples.size(), S = static_cast<std::size_t>(data.history());
  Batch b;
  b.size = B;
  b.extent = D;
  b.history = Tensor<float>({B, D, S});
  b.target = Tensor<float>({B, D});
  b.cond = Tensor<float>({B, 1});
  for (std::size_t i = 0; i < B; ++i) {
    const Shard& shard = data.shards()[samples[i].shard];
    const Trajectory& tr = shard.trajectories[samples[i].trajectory];
    for (std::size_t s = 0; s < S; ++s) {
      const auto frame = tr.frame(samples[i].target - S + s);
      for (std::size_t d = 0; d < D; ++d) b.history.data[(i * D + d) * S + s] = static_cast<float>(norm.forward(frame[d]));
    }
    const auto target = tr.frame(samples[i].target);
    for (std::size_t d = 0; d < D; ++d) b.target.data[i * D + d] = static_cast<float>(norm.forward(target[d]));
    b.cond.data[i] = static_cast<float>(shard.conditioning);
  }
  return b;
}

std::vector<std::vector<Sample>> epoch_batches(const Dataset& data, int batch_size, std::uint64_t seed,
                                               std::uint64_t epoch) {
  const auto bs = static_cast<std::size_t>(batch_size);
  std::vector<std::vector<std::vector<Sample>>> per_shard(data.train().size());
  for (std::size_t s = 0; s < data.train().size(); ++s) {
    std::vector<Sample> order = data.train()[s];
    Rng rng = make_rng(seed, {0x5a, epoch, s});
    std::shuffle(order.begin(), order.end(), rng);
    // Group by extent in first-seen order, keeping the shuffled order inside.
    std::vector<std::size_t> extents;
    std::map<std::size_t, std::vector<Sample>> groups;
    for (const auto& smp : order) {
      const std::size_t D = data.extent(smp);
      if (!groups.contains(D)) extents.push_back(D);
      groups[D].push_back(smp);
    }
    for (std::size_t D : extents) {
      const auto& grp = groups[D];
      for (std::size_t i = 0; i < grp.size(); i += bs)
        per_shard[s].emplace_back(grp.begin() + static_cast<std::ptrdiff_t>(i),
                                  grp.begin() + static_cast<std::ptrdiff_t>(std::min(grp.size(), i + bs)));
    }
  }
  std::vector<std::vector<Sample>> out;
  for (std::size_t round = 0;; ++round) {
    bool any = false;
    for (auto& shard : per_shard) {
      if (round < shard.size()) {
        out.push_back(std::move(shard[round]));
        any = true;
      }
    }
    if (!any) break;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Optimisation

AdamState::AdamState(const emu::Model& model) {
  for (const auto& p : model.parameters()) {
    m.emplace_back(p.value.size(), 0.0);
    v.emplace_back(p.value.size(), 0.0);
  }
}

AdamState::AdamState(std::span<const std::size_t> sizes) {
  for (std::size_t n : sizes) {
    m.emplace_back(n, 0.0);
    v.emplace_back(n, 0.0);
  }
}

void adam_step(std::vector<emu::Parameter>& params, const std::vector<std::vector<double>>& grads,
               AdamState& state, double lr) {
  if (grads.size() != params.size() || state.m.size() != params.size())
    throw ShapeError("adam_step: parameter, gradient and moment counts differ");
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].empty()) continue;
    auto& w = params[i].value.data;
    if (grads[i].size() != w.size() || state.m[i].size() != w.size())
      throw ShapeError("adam_step: shape mismatch for '" + params[i].name + "'");
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double gk = grads[i][k];
      m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * gk;
      v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * gk * gk;
      const double update = lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + state.eta);
      w[k] = static_cast<float>(static_cast<double>(w[k]) - update);
    }
  }
}

namespace {

Tensor<float> rows(const Tensor<float>& t, std::size_t first, std::size_t count) {
  std::vector<std::size_t> shape = t.shape;
  const std::size_t stride = t.size() / shape[0];
  shape[0] = count;
  std::vector<float> values(t.data.begin() + static_cast<std::ptrdiff_t>(first * stride),
                            t.data.begin() + static_cast<std::ptrdiff_t>((first + count) * stride));
  return Tensor<float>(std::move(shape), std::move(values));
}

}  // namespace

BatchResult evaluate_batch(const emu::Model& model, const Batch& batch, const TrainConfig& config,
                           std::uint64_t noise_seed, bool with_gradients) {
  const std::size_t B = batch.size, D = batch.extent;
  const std::size_t shard = static_cast<std::size_t>(config.shard_size);
  const std::size_t n_shards = (B + shard - 1) / shard;
  const std::size_t C = static_cast<std::size_t>(model.config().channels);
  const bool probabilistic = model.config().mode == emu::Mode::probabilistic;
  const int m = config.ensemble_m;

  std::vector<BatchResult> parts(n_shards);
  parallel_for(n_shards, config.threads, [&](std::size_t j) {
    const std::size_t first = j * shard, count = std::min(shard, B - first);
    Graph<float> g;
    const auto p = emu::bind(g, model, config.phase, with_gradients);
    const Var h = g.constant(rows(batch.history, first, count));
    const Var truth = g.constant(rows(batch.target, first, count));
    const Var cond = config.phase == emu::Phase::finetune ? g.constant(rows(batch.cond, first, count)) : Var{};

    std::vector<Var> members;
    std::vector<Tensor<float>> noise(static_cast<std::size_t>(m));
    for (int i = 0; i < m; ++i) {
      const Tensor<float>* eps = nullptr;
      if (probabilistic) {
        Rng rng = make_rng(noise_seed, {j, static_cast<std::uint64_t>(i)});
        noise[static_cast<std::size_t>(i)] = emu::draw_noise<float>(rng, count, D, C);
        eps = &noise[static_cast<std::size_t>(i)];
      }
      members.push_back(emu::forward(g, model, p, h, cond, config.phase, eps));
    }

    BatchResult& r = parts[j];
    Var total;
    if (config.loss == LossKind::mse) {
      total = ad::mse(g, members[0], truth);
      r.main_term = g.value(total).data[0];
    } else {
      const Var c = ad::crps(g, truth, std::span<const Var>(members));
      r.main_term = g.value(c).data[0];
      total = c;
      if (config.lambda != 0.0) {
        const Var spec = spectral_term(g, truth, std::span<const Var>(members));
        r.spectral_term = g.value(spec).data[0] / m;
        total = ad::axpy(g, c, spec, static_cast<float>(config.lambda / m));
      }
    }
    r.loss = g.value(total).data[0];

    double se = 0.0;
    const auto& tv = g.value(truth).data;
    for (std::size_t k = 0; k < tv.size(); ++k) {
      double mean = 0.0;
      for (const Var& mv : members) mean += g.value(mv).data[k];
      mean /= m;
      se += (mean - tv[k]) * (mean - tv[k]);
    }
    r.mean_mse = se / static_cast<double>(tv.size());

    if (with_gradients) {
      g.backward(total);
      r.grads.resize(p.vars.size());
      for (std::size_t i = 0; i < p.vars.size(); ++i) {
        if (!p.vars[i].valid()) continue;
        const auto gi = g.grad(p.vars[i]);
        r.grads[i].assign(gi.begin(), gi.end());
      }
    }
  });

  // Ordered reduction; every shard contributes in proportion to its size.
  BatchResult out;
  for (std::size_t j = 0; j < n_shards; ++j) {
    const double w = static_cast<double>(std::min(shard, B - j * shard)) / static_cast<double>(B);
    out.loss += w * parts[j].loss;
    out.main_term += w * parts[j].main_term;
    out.spectral_term += w * parts[j].spectral_term;
    out.mean_mse += w * parts[j].mean_mse;
    if (!with_gradients) continue;
    out.grads.resize(parts[j].grads.size());
    for (std::size_t i = 0; i < parts[j].grads.size(); ++i) {
      const auto& gi = parts[j].grads[i];
      if (gi.empty()) continue;
      auto& acc = out.grads[i];
      if (acc.empty()) acc.assign(gi.size(), 0.0);
      for (std::size_t k = 0; k < gi.size(); ++k) acc[k] += w * gi[k];
    }
  }
  return out;
}

std::string metrics_csv_header() { return "epoch,lr,loss,main_term,spectral_term,val_loss,val_mse"; }

std::string metrics_csv_row(const EpochMetrics& m) {
  std::ostringstream os;
  os.precision(17);
  os << m.epoch << ',' << m.lr << ',' << m.loss << ',' << m.main_term << ',' << m.spectral_term << ','
     << m.val_loss << ',' << m.val_mse;
  return os.str();
}

std::uint64_t conditioning_hash(const emu::Model& model) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& p : model.parameters())
    if (p.conditioning) h = mix64(h ^ emu::parameter_hash(p));
  return h;
}

EpochMetrics validate_model(const emu::Model& model, const Dataset& data, const TrainConfig& config) {
  EpochMetrics out;
  std::map<std::size_t, std::vector<Sample>> by_extent;
  for (const auto& s : data.validation()) by_extent[data.extent(s)].push_back(s);
  std::size_t n = 0, chunk = 0;
  const auto bs = static_cast<std::size_t>(config.batch_size);
  for (const auto& [D, samples] : by_extent) {
    for (std::size_t i = 0; i < samples.size(); i += bs, ++chunk) {
      const std::size_t count = std::min(bs, samples.size() - i);
      const Batch b = assemble_batch(data, std::span(samples).subspan(i, count), model.normalization,
                                     model.config().cond_dim);
      const auto r = evaluate_batch(model, b, config, stream_seed(config.seed, {0x7a, chunk}), false);
      out.val_loss += r.loss * static_cast<double>(count);
      out.val_mse += r.mean_mse * static_cast<double>(count);
      n += count;
    }
  }
  if (n > 0) {
    out.val_loss /= static_cast<double>(n);
    out.val_mse /= static_cast<double>(n);
  }
  return out;
}

namespace {

std::vector<EpochMetrics> run(emu::Model& model, const Dataset& data, const TrainConfig& config,
                              const EpochCallback& on_epoch) {
  config.validate();
  if (data.history() != model.config().history)
    throw ConfigError("dataset history " + std::to_string(data.history()) + " differs from the model's " +
                      std::to_string(model.config().history));
  AdamState state(model);
  std::vector<EpochMetrics> history;
  for (int e = 0; e < config.epochs; ++e) {
    const auto start = std::chrono::steady_clock::now();
    EpochMetrics em;
    em.epoch = e + 1;
    em.lr = config.schedule == Schedule::constant
                ? config.lr
                : 0.5 * config.lr * (1.0 + std::cos(std::numbers::pi * e / std::max(1, config.epochs)));
    const auto batches = epoch_batches(data, config.batch_size, config.seed, static_cast<std::uint64_t>(e));
    std::size_t seen = 0;
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      const Batch b = assemble_batch(data, batches[bi], model.normalization, model.config().cond_dim);
      const auto r =
          evaluate_batch(model, b, config, stream_seed(config.seed, {0x3b, static_cast<std::uint64_t>(e), bi}), true);
      if (!std::isfinite(r.loss) || r.loss > config.max_loss)
        throw DivergenceError("training diverged at epoch " + std::to_string(e + 1) + ", batch " +
                              std::to_string(bi) + ": loss " + std::to_string(r.loss) + " (main " +
                              std::to_string(r.main_term) + ", spectral " + std::to_string(r.spectral_term) + ")",
                            state.step);
      adam_step(model.parameters(), r.grads, state, em.lr);
      const double w = static_cast<double>(b.size);
      em.loss += w * r.loss;
      em.main_term += w * r.main_term;
      em.spectral_term += w * r.spectral_term;
      seen += b.size;
    }
    em.loss /= static_cast<double>(seen);
    em.main_term /= static_cast<double>(seen);
    em.spectral_term /= static_cast<double>(seen);
    const auto val = validate_model(model, data, config);
    em.val_loss = val.val_loss;
    em.val_mse = val.val_mse;
    em.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    history.push_back(em);
    if (on_epoch) on_epoch(em);
  }
  return history;
}

}  // namespace

std::vector<EpochMetrics> pretrain(emu::Model& model, const Dataset& data, TrainConfig config,
                                   const EpochCallback& on_epoch) {
  const auto values = data.conditioning_values();
  if (values.size() != 1)
    throw ConfigError("pretrain expects a single conditioning value, got " + std::to_string(values.size()));
  config.phase = emu::Phase::pretrain;
  model.phase = emu::Phase::pretrain;
  model.normalization = data.fit_normalization();
  const std::uint64_t before = conditioning_hash(model);
  auto history = run(model, data, config, on_epoch);
  if (conditioning_hash(model) != before)
    throw std::logic_error("pretrain modified the conditioning map");
  model.metadata["pretrain"] = {{"lr", config.lr}, {"epochs", config.epochs}, {"conditioning", values[0]}};
  return history;
}

std::vector<EpochMetrics> finetune(emu::Model& model, const Dataset& data, TrainConfig config,
                                   const EpochCallback& on_epoch) {
  config.phase = emu::Phase::finetune;
  model.phase = emu::Phase::finetune;
  auto history = run(model, data, config, on_epoch);
  model.metadata["finetune"] = {{"lr", config.lr}, {"epochs", config.epochs}, {"conditioning", data.conditioning_values()}};
  return history;
}

}  // namespace pdelab::train
