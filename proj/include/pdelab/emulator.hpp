#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "pdelab/diff.hpp"
#include "pdelab/rng.hpp"
#include "pdelab/trajectory.hpp"

namespace pdelab::emu {

using ad::Graph;
using ad::Tensor;
using ad::Var;

enum class Mode { deterministic, probabilistic };

/// Pretrain runs every block with fixed scale 1 and shift 0 and leaves the
/// conditioning map out of the graph; finetune feeds the conditioning value
/// through it.
enum class Phase { pretrain, finetune };

std::string to_string(Mode m);
std::string to_string(Phase p);
Mode mode_from_string(const std::string& s);
Phase phase_from_string(const std::string& s);

struct ModelConfig {
  int n_blocks = 8;
  int channels = 64;
  int window = 9;
  int history = 2;
  int cond_dim = 1;
  int heads = 1;
  int mlp_ratio = 4;
  Mode mode = Mode::deterministic;
  /// Multiplicative gates on both residual branches; the conditioning map
  /// then produces 6C values per block instead of 4C.
  bool gates = false;
  std::string equation = "ks";

  int mlp_channels() const noexcept { return mlp_ratio * channels; }
  /// Conditioning outputs per channel: 4, or 6 with gates.
  int cond_slots() const noexcept { return gates ? 6 : 4; }
  void validate() const;
  /// Closed-form parameter count.
  std::size_t parameter_count() const;

  Json to_json() const;
  static ModelConfig from_json(const Json& j);

  bool operator==(const ModelConfig&) const = default;
};

/// Affine map between physical values and the model's working units.
struct Normalization {
  double mean = 0.0;
  double std = 1.0;

  double forward(double x) const noexcept { return (x - mean) / std; }
  double inverse(double y) const noexcept { return y * std + mean; }
  bool operator==(const Normalization&) const = default;
};

struct Parameter {
  std::string name;
  Tensor<float> value;
  /// Part of the conditioning map (excluded from the pretrain graph).
  bool conditioning = false;
};

class Model {
 public:
  Model() = default;
  /// Uniform(+-sqrt(1/fan_in)) projections, zero positional bias, zero
  /// conditioning weights with scale biases 1 and shift biases 0.
  Model(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const noexcept { return config_; }
  std::vector<Parameter>& parameters() noexcept { return params_; }
  const std::vector<Parameter>& parameters() const noexcept { return params_; }
  std::size_t parameter_count() const noexcept;

  std::size_t index_of(const std::string& name) const;
  Parameter& parameter(const std::string& name) { return params_.at(index_of(name)); }
  const Parameter& parameter(const std::string& name) const { return params_.at(index_of(name)); }

  Normalization normalization;
  Phase phase = Phase::pretrain;
  /// Free-form provenance carried through checkpoints.
  Json metadata = Json::object();

 private:
  ModelConfig config_;
  std::vector<Parameter> params_;
};

/// Graph handles for a model's parameters, parallel to Model::parameters().
/// Conditioning parameters are left unbound (invalid Var) in pretrain.
template <class T>
struct Bound {
  std::vector<Var> vars;
};

template <class T>
Bound<T> bind(Graph<T>& g, const Model& model, Phase phase, bool trainable);

/// history: [B, D, S] -> latent [B, D, C].
template <class T>
Var encode(Graph<T>& g, const Model& model, const Bound<T>& p, Var history);

/// mu(z) + sigma(z) * noise with noise [B, D, C].
template <class T>
Var sample_latent(Graph<T>& g, const Model& model, const Bound<T>& p, Var z, const Tensor<T>& noise);

/// Local attention of block `block` on z: [B, D, C].
template <class T>
Var local_attention(Graph<T>& g, const Model& model, const Bound<T>& p, int block, Var h);

/// Conditioning outputs [B, slots*C] for per-sample values cond [B, M].
template <class T>
Var conditioning(Graph<T>& g, const Model& model, const Bound<T>& p, int block, Var cond);

/// One residual block. With an invalid `cond_out` the scales are 1 and
/// shifts 0 (pretrain form).
template <class T>
Var transformer_block(Graph<T>& g, const Model& model, const Bound<T>& p, int block, Var z, Var cond_out);

/// Full network: history [B, D, S] and per-sample conditioning [B, M] to
/// the next state [B, D]. `noise` ([B, D, C]) is required in probabilistic
/// mode and ignored otherwise.
template <class T>
Var forward(Graph<T>& g, const Model& model, const Bound<T>& p, Var history, Var cond, Phase phase,
            const Tensor<T>* noise);

/// Standard normal draws for one forward pass.
template <class T>
Tensor<T> draw_noise(Rng& rng, std::size_t batch, std::size_t extent, std::size_t channels);

/// Inference without gradients in 32-bit, using the model's own phase.
/// history: [B, D, S] in working units; cond: B*M values.
std::vector<float> predict(const Model& model, const Tensor<float>& history, std::span<const double> cond,
                           Rng* noise_rng);

/// NPEC1 checkpoint. Layout (little-endian):
///   0   5 bytes  "NPEC1"
///   5   u8       format version (1)
///   6   2 bytes  reserved, zero
///   8   u64      J = byte length of the JSON header
///   16  J bytes  JSON: {"architecture", "normalization", "phase", "metadata"}
///   ..  u32      number of parameter blobs P
///   then P times: u32 name length, name bytes, u32 rank, rank x u64 extents,
///                 prod(extents) x f32 values
inline constexpr std::uint8_t kNpecVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const Model& model);
Model load_checkpoint(const std::filesystem::path& path);
/// Loads and checks the stored architecture against `expected`.
Model load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected);
Json read_checkpoint_header(const std::filesystem::path& path);

/// Order-sensitive FNV-1a hash of a parameter's bytes.
std::uint64_t parameter_hash(const Parameter& p);

}  // namespace pdelab::emu
