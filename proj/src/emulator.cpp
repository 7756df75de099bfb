#include "pdelab/emulator.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

#include "pdelab/binary_io.hpp"
#include "pdelab/errors.hpp"

namespace pdelab::emu {

namespace {

constexpr char kMagic[5] = {'N', 'P', 'E', 'C', '1'};

std::size_t sz(int v) { return static_cast<std::size_t>(v); }

std::string block_name(int b, const char* what) { return "block" + std::to_string(b) + "." + what; }

}  // namespace

std::string to_string(Mode m) { return m == Mode::deterministic ? "deterministic" : "probabilistic"; }
std::string to_string(Phase p) { return p == Phase::pretrain ? "pretrain" : "finetune"; }

Mode mode_from_string(const std::string& s) {
  if (s == "deterministic") return Mode::deterministic;
  if (s == "probabilistic") return Mode::probabilistic;
  throw ConfigError("unknown mode '" + s + "' (deterministic|probabilistic)");
}

Phase phase_from_string(const std::string& s) {
  if (s == "pretrain") return Phase::pretrain;
  if (s == "finetune") return Phase::finetune;
  throw ConfigError("unknown phase '" + s + "' (pretrain|finetune)");
}

void ModelConfig::validate() const {
  if (n_blocks < 1) throw ConfigError("model: n_blocks must be >= 1");
  if (channels < 2) throw ConfigError("model: channels must be >= 2");
  if (window < 1 || window % 2 == 0) throw ConfigError("model: window K must be odd");
  if (history < 1) throw ConfigError("model: history S must be >= 1");
  if (cond_dim < 1) throw ConfigError("model: cond_dim M must be >= 1");
  if (mlp_ratio < 1) throw ConfigError("model: mlp_ratio must be >= 1");
  if (heads != 1) throw ConfigError("model: only heads = 1 is supported");
}

std::size_t ModelConfig::parameter_count() const {
  const std::size_t S = sz(history), C = sz(channels), N = sz(n_blocks), K = sz(window), M = sz(cond_dim);
  const std::size_t G = sz(cond_slots()), H = sz(mlp_channels());
  std::size_t n = S * C + N * (4 * C * C + K + M * G * C + G * C + 2 * C * H) + C;
  if (mode == Mode::probabilistic) n += 2 * C * C;
  return n;
}

Json ModelConfig::to_json() const {
  return Json{{"n_blocks", n_blocks}, {"channels", channels},   {"window", window},
              {"history", history},   {"cond_dim", cond_dim},   {"heads", heads},
              {"mlp_ratio", mlp_ratio}, {"mode", to_string(mode)}, {"gates", gates},
              {"equation", equation}};
}

ModelConfig ModelConfig::from_json(const Json& j) {
  ModelConfig c;
  try {
    c.n_blocks = j.value("n_blocks", c.n_blocks);
    c.channels = j.value("channels", c.channels);
    c.window = j.value("window", c.window);
    c.history = j.value("history", c.history);
    c.cond_dim = j.value("cond_dim", c.cond_dim);
    c.heads = j.value("heads", c.heads);
    c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
    c.mode = mode_from_string(j.value("mode", to_string(c.mode)));
    c.gates = j.value("gates", c.gates);
    c.equation = j.value("equation", c.equation);
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

Model::Model(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  const std::size_t S = sz(config_.history), C = sz(config_.channels), K = sz(config_.window);
  const std::size_t M = sz(config_.cond_dim), G = sz(config_.cond_slots()), H = sz(config_.mlp_channels());

  auto projection = [&](std::string name, std::size_t fan_in, std::size_t fan_out) {
    Tensor<float> w({fan_in, fan_out});
    Rng rng = make_rng(seed, {params_.size()});
    const float a = static_cast<float>(std::sqrt(1.0 / static_cast<double>(fan_in)));
    std::uniform_real_distribution<float> u(-a, a);
    for (float& v : w.data) v = u(rng);
    params_.push_back({std::move(name), std::move(w), false});
  };

  projection("encoder", S, C);
  for (int b = 0; b < config_.n_blocks; ++b) {
    projection(block_name(b, "wq"), C, C);
    projection(block_name(b, "wk"), C, C);
    projection(block_name(b, "wv"), C, C);
    projection(block_name(b, "wo"), C, C);
    params_.push_back({block_name(b, "pe"), Tensor<float>({K}), false});
    params_.push_back({block_name(b, "cond_w"), Tensor<float>({M, G * C}), true});
    // Scale slots start at 1, shift slots at 0.
    Tensor<float> bias({G * C});
    const std::vector<int> scale_slots = config_.gates ? std::vector<int>{0, 2, 3, 5} : std::vector<int>{0, 2};
    for (int s : scale_slots) std::fill_n(bias.data.begin() + static_cast<std::ptrdiff_t>(sz(s) * C), C, 1.0f);
    params_.push_back({block_name(b, "cond_b"), std::move(bias), true});
    projection(block_name(b, "mlp1"), C, H);
    projection(block_name(b, "mlp2"), H, C);
  }
  if (config_.mode == Mode::probabilistic) {
    projection("sample.mu", C, C);
    projection("sample.log_sigma", C, C);
  }
  projection("decoder", C, 1);
}

std::size_t Model::parameter_count() const noexcept {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

std::size_t Model::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < params_.size(); ++i)
    if (params_[i].name == name) return i;
  throw std::out_of_range("model has no parameter '" + name + "'");
}

// ---------------------------------------------------------------------------
// Forward pass

template <class T>
Bound<T> bind(Graph<T>& g, const Model& model, Phase phase, bool trainable) {
  Bound<T> out;
  for (const auto& p : model.parameters()) {
    if (p.conditioning && phase == Phase::pretrain) {
      out.vars.push_back(Var{});
      continue;
    }
    Tensor<T> t(p.value.shape);
    for (std::size_t i = 0; i < t.size(); ++i) t.data[i] = static_cast<T>(p.value.data[i]);
    out.vars.push_back(g.leaf(std::move(t), trainable));
  }
  return out;
}

namespace {

template <class T>
Var var(const Model& m, const Bound<T>& p, const std::string& name) {
  const Var v = p.vars.at(m.index_of(name));
  if (!v.valid()) throw ConfigError("parameter '" + name + "' is not bound in this phase");
  return v;
}

}  // namespace

template <class T>
Var encode(Graph<T>& g, const Model& model, const Bound<T>& p, Var history) {
  const auto& s = g.shape(history);
  if (s.size() != 3 || s[2] != sz(model.config().history))
    throw ShapeError("encode: history must be [B, D, " + std::to_string(model.config().history) + "], got " +
                     ad::shape_string(s));
  return ad::linear(g, history, var(model, p, "encoder"));
}

template <class T>
Var sample_latent(Graph<T>& g, const Model& model, const Bound<T>& p, Var z, const Tensor<T>& noise) {
  const Var mu = ad::linear(g, z, var(model, p, "sample.mu"));
  const Var log_sigma = ad::linear(g, z, var(model, p, "sample.log_sigma"));
  return ad::reparameterize(g, mu, log_sigma, noise);
}

template <class T>
Var local_attention(Graph<T>& g, const Model& model, const Bound<T>& p, int block, Var h) {
  const auto& cfg = model.config();
  const Var q = ad::linear(g, h, var(model, p, block_name(block, "wq")));
  const Var k = ad::linear(g, h, var(model, p, block_name(block, "wk")));
  const Var v = ad::linear(g, h, var(model, p, block_name(block, "wv")));
  const Var kw = ad::unfold_circular(g, k, cfg.window);
  const Var vw = ad::unfold_circular(g, v, cfg.window);
  const T scale = T(1) / std::sqrt(static_cast<T>(cfg.channels));
  Var logits = ad::window_dot(g, q, kw, scale);
  logits = ad::add_bias_lastaxis(g, logits, var(model, p, block_name(block, "pe")));
  const Var weights = ad::softmax_lastaxis(g, logits);
  return ad::linear(g, ad::window_sum(g, weights, vw), var(model, p, block_name(block, "wo")));
}

template <class T>
Var conditioning(Graph<T>& g, const Model& model, const Bound<T>& p, int block, Var cond) {
  return ad::linear(g, cond, var(model, p, block_name(block, "cond_w")), var(model, p, block_name(block, "cond_b")));
}

template <class T>
Var transformer_block(Graph<T>& g, const Model& model, const Bound<T>& p, int block, Var z, Var cond_out) {
  const auto& cfg = model.config();
  const bool conditioned = cond_out.valid();
  // Slot layout: (gamma1, delta1, gamma2, delta2) or, with gates,
  // (gamma1, delta1, phi1, gamma2, delta2, phi2).
  const int g2 = cfg.gates ? 3 : 2;

  Var h = ad::layer_normalize(g, z);
  if (conditioned) h = ad::modulate(g, h, cond_out, 0, 1);
  Var a = local_attention(g, model, p, block, h);
  if (conditioned && cfg.gates) a = ad::modulate(g, a, cond_out, 2, -1);
  z = ad::add(g, z, a);

  h = ad::layer_normalize(g, z);
  if (conditioned) h = ad::modulate(g, h, cond_out, g2, g2 + 1);
  Var m = ad::linear(g, h, var(model, p, block_name(block, "mlp1")));
  m = ad::linear(g, ad::gelu(g, m), var(model, p, block_name(block, "mlp2")));
  if (conditioned && cfg.gates) m = ad::modulate(g, m, cond_out, 5, -1);
  return ad::add(g, z, m);
}

template <class T>
Var forward(Graph<T>& g, const Model& model, const Bound<T>& p, Var history, Var cond, Phase phase,
            const Tensor<T>* noise) {
  const auto& cfg = model.config();
  const auto& hs = g.shape(history);
  if (hs.size() != 3) throw ShapeError("forward: history must be [B, D, S]");
  const std::size_t B = hs[0], D = hs[1];
  if (D < sz(cfg.window))
    throw ShapeError("forward: spatial extent " + std::to_string(D) + " is smaller than the window " +
                     std::to_string(cfg.window));

  Var z = encode(g, model, p, history);
  if (cfg.mode == Mode::probabilistic) {
    if (!noise) throw ConfigError("forward: probabilistic mode needs a noise tensor");
    if (noise->shape != std::vector<std::size_t>{B, D, sz(cfg.channels)})
      throw ShapeError("forward: noise must be [B, D, C]");
    z = sample_latent(g, model, p, z, *noise);
  }
  if (phase == Phase::finetune) {
    if (!cond.valid() || g.shape(cond) != std::vector<std::size_t>{B, sz(cfg.cond_dim)})
      throw ShapeError("forward: conditioning must be [B, M]");
  }
  for (int b = 0; b < cfg.n_blocks; ++b) {
    const Var c = phase == Phase::finetune ? conditioning(g, model, p, b, cond) : Var{};
    z = transformer_block(g, model, p, b, z, c);
  }
  const Var out = ad::linear(g, z, var(model, p, "decoder"));
  return ad::reshape(g, out, {B, D});
}

template <class T>
Tensor<T> draw_noise(Rng& rng, std::size_t batch, std::size_t extent, std::size_t channels) {
  Tensor<T> t({batch, extent, channels});
  std::normal_distribution<double> n(0.0, 1.0);
  for (T& v : t.data) v = static_cast<T>(n(rng));
  return t;
}

std::vector<float> predict(const Model& model, const Tensor<float>& history, std::span<const double> cond,
                           Rng* noise_rng) {
  Graph<float> g;
  const Bound<float> p = bind(g, model, model.phase, false);
  const Var h = g.constant(history);
  Var c;
  if (model.phase == Phase::finetune) {
    const std::size_t B = history.shape.at(0), M = sz(model.config().cond_dim);
    if (cond.size() != B * M) throw ShapeError("predict: need one conditioning vector per sample");
    Tensor<float> ct({B, M});
    for (std::size_t i = 0; i < ct.size(); ++i) ct.data[i] = static_cast<float>(cond[i]);
    c = g.constant(std::move(ct));
  }
  Tensor<float> noise;
  if (model.config().mode == Mode::probabilistic) {
    if (!noise_rng) throw ConfigError("predict: probabilistic mode needs a noise stream");
    noise = draw_noise<float>(*noise_rng, history.shape.at(0), history.shape.at(1), sz(model.config().channels));
  }
  const Var y = forward(g, model, p, h, c, model.phase, noise.data.empty() ? nullptr : &noise);
  return g.value(y).data;
}

#define PDELAB_EMU_INSTANTIATE(T)                                                                      \
  template Bound<T> bind<T>(Graph<T>&, const Model&, Phase, bool);                                     \
  template Var encode<T>(Graph<T>&, const Model&, const Bound<T>&, Var);                               \
  template Var sample_latent<T>(Graph<T>&, const Model&, const Bound<T>&, Var, const Tensor<T>&);      \
  template Var local_attention<T>(Graph<T>&, const Model&, const Bound<T>&, int, Var);                 \
  template Var conditioning<T>(Graph<T>&, const Model&, const Bound<T>&, int, Var);                    \
  template Var transformer_block<T>(Graph<T>&, const Model&, const Bound<T>&, int, Var, Var);          \
  template Var forward<T>(Graph<T>&, const Model&, const Bound<T>&, Var, Var, Phase, const Tensor<T>*); \
  template Tensor<T> draw_noise<T>(Rng&, std::size_t, std::size_t, std::size_t);

PDELAB_EMU_INSTANTIATE(float)
PDELAB_EMU_INSTANTIATE(double)

#undef PDELAB_EMU_INSTANTIATE

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

Json read_header(std::istream& is) {
  char magic[5];
  is.read(magic, 5);
  if (!is || std::memcmp(magic, kMagic, 5) != 0) throw FormatError("not an NPEC1 checkpoint (bad magic)");
  const auto version = io::read_le<std::uint8_t>(is);
  if (version != kNpecVersion) throw FormatError("unsupported NPEC1 version " + std::to_string(version));
  io::read_le<std::uint16_t>(is);
  const auto len = io::read_le<std::uint64_t>(is);
  if (len > (1ULL << 30)) throw FormatError("NPEC1 header too large");
  try {
    return Json::parse(io::read_bytes(is, len));
  } catch (const Json::exception& e) {
    throw FormatError(std::string("NPEC1 header is not valid JSON: ") + e.what());
  }
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Model& model) {
  const Json header{{"architecture", model.config().to_json()},
                    {"normalization", {{"mean", model.normalization.mean}, {"std", model.normalization.std}}},
                    {"phase", to_string(model.phase)},
                    {"parameter_count", model.parameter_count()},
                    {"metadata", model.metadata}};
  const std::string text = header.dump();
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  os.write(kMagic, 5);
  io::write_le<std::uint8_t>(os, kNpecVersion);
  io::write_le<std::uint16_t>(os, 0);
  io::write_le<std::uint64_t>(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(model.parameters().size()));
  for (const auto& p : model.parameters()) {
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(p.name.size()));
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(p.value.rank()));
    for (std::size_t e : p.value.shape) io::write_le<std::uint64_t>(os, e);
    io::write_f32_array(os, std::span<const float>(p.value.data));
  }
  if (!os) throw FormatError("write failed for " + path.string());
}

Json read_checkpoint_header(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  return read_header(is);
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  const Json header = read_header(is);
  ModelConfig cfg;
  try {
    cfg = ModelConfig::from_json(header.at("architecture"));
  } catch (const Json::exception& e) {
    throw FormatError(std::string("NPEC1 header: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("NPEC1 architecture: ") + e.what());
  }
  Model model(cfg, 0);
  try {
    model.normalization.mean = header.at("normalization").at("mean").get<double>();
    model.normalization.std = header.at("normalization").at("std").get<double>();
    model.phase = phase_from_string(header.at("phase").get<std::string>());
    model.metadata = header.value("metadata", Json::object());
  } catch (const std::exception& e) {
    throw FormatError(std::string("NPEC1 header: ") + e.what());
  }

  const auto count = io::read_le<std::uint32_t>(is);
  if (count != model.parameters().size())
    throw FormatError("NPEC1 holds " + std::to_string(count) + " parameters, architecture expects " +
                      std::to_string(model.parameters().size()));
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = io::read_le<std::uint32_t>(is);
    if (name_len > 4096) throw FormatError("NPEC1 parameter name too long");
    const std::string name = io::read_bytes(is, name_len);
    const auto rank = io::read_le<std::uint32_t>(is);
    if (rank > 8) throw FormatError("NPEC1 parameter rank too large");
    std::vector<std::size_t> shape(rank);
    for (auto& e : shape) e = io::read_le<std::uint64_t>(is);
    Parameter& p = model.parameters()[i];
    if (p.name != name || p.value.shape != shape)
      throw FormatError("NPEC1 parameter '" + name + "' " + ad::shape_string(shape) + " does not match expected '" +
                        p.name + "' " + ad::shape_string(p.value.shape));
    for (float& v : p.value.data) v = io::read_le<float>(is);
  }
  return model;
}

Model load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected) {
  Model m = load_checkpoint(path);
  if (!(m.config() == expected))
    throw ConfigError("checkpoint architecture " + m.config().to_json().dump() + " differs from requested " +
                      expected.to_json().dump());
  return m;
}

std::uint64_t parameter_hash(const Parameter& p) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&](const void* data, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) h = (h ^ b[i]) * 0x100000001b3ULL;
  };
  feed(p.name.data(), p.name.size());
  for (std::size_t e : p.value.shape) feed(&e, sizeof e);
  feed(p.value.data.data(), p.value.size() * sizeof(float));
  return h;
}

}  // namespace pdelab::emu
