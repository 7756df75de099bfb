#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "pdelab/diff.hpp"
#include "pdelab/emulator.hpp"
#include "pdelab/trajectory.hpp"

namespace pdelab::train {

using ad::Graph;
using ad::Tensor;
using ad::Var;

// ---------------------------------------------------------------------------
// Losses on plain arrays (64-bit reference implementations).

double mse_loss(std::span<const double> truth, std::span<const double> pred);
/// Pointwise ensemble CRPS averaged over positions. members[i] has the
/// length of truth.
double crps_loss(std::span<const double> truth, const std::vector<std::vector<double>>& members);
/// Mean absolute difference of the unnormalised DFT moduli.
double spectral_loss(std::span<const double> truth, std::span<const double> pred);
/// crps + lambda * mean over members of spectral_loss(truth, member).
double composite_loss(std::span<const double> truth, const std::vector<std::vector<double>>& members,
                      double lambda);

/// Graph form of composite_loss for truth [B, D] and members [B, D].
template <class T>
Var composite_loss(Graph<T>& g, Var truth, std::span<const Var> members, T lambda);

// ---------------------------------------------------------------------------
// Configuration

enum class LossKind { mse, crps_spectral };
enum class Schedule { constant, cosine };

std::string to_string(LossKind k);
LossKind loss_from_string(const std::string& s);

struct TrainConfig {
  emu::Phase phase = emu::Phase::pretrain;
  LossKind loss = LossKind::mse;
  double lr = 5e-4;
  int epochs = 1000;
  int batch_size = 128;
  int ensemble_m = 1;
  double lambda = 1.0;
  std::uint64_t seed = 0;
  Schedule schedule = Schedule::constant;
  /// Trailing fraction of every trajectory held out for validation.
  double validation_fraction = 0.05;
  /// Samples per gradient shard. Shards are reduced in a fixed order, so
  /// results do not depend on the worker count.
  int shard_size = 8;
  int threads = 1;
  /// A batch loss above this, or a non-finite one, aborts training.
  double max_loss = 1e6;

  void validate() const;
  Json to_json() const;
  /// Missing keys keep their defaults.
  static TrainConfig from_json(const Json& j);
};

/// Fine-tuning rate derived from a pre-training rate.
constexpr double finetune_lr(double pretrain_lr) { return pretrain_lr / 50.0; }

// ---------------------------------------------------------------------------
// Data

struct DatasetEntry {
  std::filesystem::path path;
  double conditioning = 0.0;
};

/// Trajectories sharing one conditioning value.
struct Shard {
  double conditioning = 0.0;
  std::vector<Trajectory> trajectories;
};

/// One supervised pair: frames [target - S, target) predict frame `target`.
struct Sample {
  std::size_t shard = 0;
  std::size_t trajectory = 0;
  std::size_t target = 0;
};

class Dataset {
 public:
  Dataset() = default;
  Dataset(std::vector<Shard> shards, int history, double validation_fraction);

  static Dataset load(const std::vector<DatasetEntry>& entries, int history, double validation_fraction);

  const std::vector<Shard>& shards() const noexcept { return shards_; }
  /// Training samples grouped per shard.
  const std::vector<std::vector<Sample>>& train() const noexcept { return train_; }
  const std::vector<Sample>& validation() const noexcept { return validation_; }
  std::size_t train_size() const noexcept;
  std::size_t extent(const Sample& s) const;
  int history() const noexcept { return history_; }
  std::vector<double> conditioning_values() const;

  /// Mean and standard deviation over every value of every trajectory.
  emu::Normalization fit_normalization() const;

 private:
  std::vector<Shard> shards_;
  std::vector<std::vector<Sample>> train_;
  std::vector<Sample> validation_;
  int history_ = 1;
};

/// A batch with one spatial extent, in working units.
struct Batch {
  std::size_t size = 0;
  std::size_t extent = 0;
  Tensor<float> history;  ///< [B, D, S], oldest frame first
  Tensor<float> target;   ///< [B, D]
  Tensor<float> cond;     ///< [B, M]
};

/// Throws BatchingError if the samples differ in spatial extent.
Batch assemble_batch(const Dataset& data, std::span<const Sample> samples, const emu::Normalization& norm,
                     int cond_dim);

/// Per epoch: each shard is shuffled without replacement and cut into
/// batches, then batches are taken round-robin across shards. Every batch
/// holds samples of a single spatial extent.
std::vector<std::vector<Sample>> epoch_batches(const Dataset& data, int batch_size, std::uint64_t seed,
                                               std::uint64_t epoch);

// ---------------------------------------------------------------------------
// Optimisation

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eta = 1e-8;
  std::int64_t step = 0;
  std::vector<std::vector<double>> m, v;

  explicit AdamState(const emu::Model& model);
  AdamState(std::span<const std::size_t> sizes);
};

/// One bias-corrected Adam update. grads[i] is null for parameters that are
/// not trained; those keep their values and moments.
void adam_step(std::vector<emu::Parameter>& params, const std::vector<std::vector<double>>& grads,
               AdamState& state, double lr);

/// Objective value and parameter gradients for one batch.
struct BatchResult {
  double loss = 0.0;
  double main_term = 0.0;      ///< mse or crps
  double spectral_term = 0.0;  ///< 0 for the mse loss
  /// MSE of the ensemble mean against the target.
  double mean_mse = 0.0;
  /// Parallel to model.parameters(); empty entries were not in the graph.
  std::vector<std::vector<double>> grads;
};

BatchResult evaluate_batch(const emu::Model& model, const Batch& batch, const TrainConfig& config,
                           std::uint64_t noise_seed, bool with_gradients);

struct EpochMetrics {
  int epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  double main_term = 0.0;
  double spectral_term = 0.0;
  double val_loss = 0.0;
  /// One-step MSE of the ensemble mean on the validation split.
  double val_mse = 0.0;
  double wall_seconds = 0.0;
};

/// Columns of the metrics CSV; wall time is written separately so that the
/// metrics file is reproducible.
std::string metrics_csv_header();
std::string metrics_csv_row(const EpochMetrics& m);

using EpochCallback = std::function<void(const EpochMetrics&)>;

/// Pre-training. Fits the normalization, trains with the conditioning map
/// out of the graph and verifies that it is bit-identical afterwards.
/// Requires a dataset with one conditioning value.
std::vector<EpochMetrics> pretrain(emu::Model& model, const Dataset& data, TrainConfig config,
                                   const EpochCallback& on_epoch = {});

/// Fine-tuning of every parameter with per-sample conditioning. Reuses the
/// model's normalization.
std::vector<EpochMetrics> finetune(emu::Model& model, const Dataset& data, TrainConfig config,
                                   const EpochCallback& on_epoch = {});

/// Combined hash of every conditioning-map parameter.
std::uint64_t conditioning_hash(const emu::Model& model);

/// Validation one-step MSE and loss without training.
EpochMetrics validate_model(const emu::Model& model, const Dataset& data, const TrainConfig& config);

}  // namespace pdelab::train
