#include "cli.hpp"

#include <openssl/evp.h>

#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <memory>
#include <sstream>

#include "CLI11.hpp"
#include "pdelab/beta_plane.hpp"
#include "pdelab/diagnostics.hpp"
#include "pdelab/emulator.hpp"
#include "pdelab/errors.hpp"
#include "pdelab/ks.hpp"
#include "pdelab/parallel.hpp"
#include "pdelab/rng.hpp"
#include "pdelab/training.hpp"
#include "pdelab/version.hpp"

namespace pdelab::cli {

namespace fs = std::filesystem;

namespace {

// Counters for the per-purpose streams derived from the run seed.
enum StreamId : std::uint64_t { kModelInit = 1, kTraining = 2, kRolloutNoise = 3, kEnsemble = 4 };

constexpr double kTwoPi = 6.283185307179586;

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

Json read_json_file(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path.string());
  try {
    return Json::parse(is);
  } catch (const Json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
}

/// A config file, or a manifest from an earlier run (its resolved config).
Json load_config(const fs::path& path) {
  Json j = read_json_file(path);
  if (!j.is_object()) throw ConfigError("config " + path.string() + " must be a JSON object");
  if (j.contains("pdelab_manifest")) return j.at("config");
  return j;
}

/// Collects flag values as a JSON patch over the config file; flags win.
class Overrides {
 public:
  template <class T>
  CLI::Option* option(CLI::App* app, const std::string& name, const std::string& pointer, const std::string& help) {
    return app->add_option_function<T>(
        name, [this, pointer](const T& v) { patch_[Json::json_pointer(pointer)] = v; }, help);
  }

  CLI::Option* flag(CLI::App* app, const std::string& name, const std::string& pointer, bool value,
                    const std::string& help) {
    return app->add_flag_callback(name, [this, pointer, value] { patch_[Json::json_pointer(pointer)] = value; },
                                  help);
  }

  CLI::Option* data(CLI::App* app, const std::string& help) {
    return app->add_option_function<std::vector<std::string>>(
        "--data",
        [this](const std::vector<std::string>& specs) {
          Json list = Json::array();
          for (const auto& s : specs) {
            const auto at = s.rfind('@');
            if (at == std::string::npos) {
              list.push_back({{"path", s}});
            } else {
              try {
                list.push_back({{"path", s.substr(0, at)}, {"conditioning", std::stod(s.substr(at + 1))}});
              } catch (const std::exception&) {
                throw CLI::ValidationError("--data", "bad conditioning value in '" + s + "'");
              }
            }
          }
          patch_["data"] = list;
        },
        help);
  }

  const Json& patch() const noexcept { return patch_; }

 private:
  Json patch_ = Json::object();
};

struct Common {
  std::string config_path;
  std::string manifest_path;
  int threads = 0;
};

void add_common(CLI::App* app, Common& common, Overrides& ov) {
  app->add_option("--config", common.config_path, "JSON config file or a previous run's manifest");
  app->add_option("--manifest", common.manifest_path, "Manifest path (default: <out>.manifest.json)");
  app->add_option("--threads", common.threads, "Worker threads (0: PDE_LAB_THREADS, then 1)")
      ->check(CLI::NonNegativeNumber);
  ov.option<std::uint64_t>(app, "--seed", "/seed", "Run seed; every random stream derives from it");
}

/// Manifest lifecycle: written once before the heavy work, completed at the end.
class Manifest {
 public:
  Manifest(fs::path path, std::string command, const std::vector<std::string>& argv, Json config, int threads)
      : path_(std::move(path)) {
    body_ = {{"pdelab_manifest", 1},
             {"command", std::move(command)},
             {"argv", argv},
             {"tool", {{"name", kToolName}, {"version", kVersion}}},
             {"config", std::move(config)},
             {"threads", threads},
             {"inputs", Json::array()},
             {"outputs", Json::array()},
             {"status", "running"},
             {"started_at", utc_now()}};
  }

  Json& config() { return body_["config"]; }
  void seeds(Json s) { body_["seeds"] = std::move(s); }
  void input(const fs::path& p) { body_["inputs"].push_back({{"path", p.string()}, {"sha256", sha256_file(p)}}); }
  void output(const fs::path& p) { outputs_.push_back(p); }

  void begin() {
    for (const auto& p : outputs_) body_["outputs"].push_back({{"path", p.string()}});
    write();
  }

  void complete() {
    body_["outputs"] = Json::array();
    for (const auto& p : outputs_) {
      Json o{{"path", p.string()}};
      if (fs::exists(p)) o["sha256"] = sha256_file(p);
      body_["outputs"].push_back(o);
    }
    body_["status"] = "completed";
    body_["finished_at"] = utc_now();
    write();
  }

  const fs::path& path() const noexcept { return path_; }

 private:
  void write() const {
    if (path_.has_parent_path()) fs::create_directories(path_.parent_path());
    std::ofstream os(path_);
    if (!os) throw FormatError("cannot write manifest " + path_.string());
    os << body_.dump(2) << '\n';
  }

  fs::path path_;
  Json body_;
  std::vector<fs::path> outputs_;
};

// ---------------------------------------------------------------------------
// Config plumbing

template <class T>
T get_or(const Json& j, const char* key, T fallback) {
  try {
    return j.is_object() ? j.value(key, fallback) : fallback;
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("config key '") + key + "': " + e.what());
  }
}

std::string require_string(const Json& cfg, const char* key, const char* flag) {
  if (!cfg.contains(key) || !cfg.at(key).is_string() || cfg.at(key).get<std::string>().empty())
    throw ConfigError(std::string("missing ") + flag);
  return cfg.at(key).get<std::string>();
}

ks::KSConfig ks_from_json(const Json& j, std::uint64_t seed) {
  ks::KSConfig c;
  c.L = get_or(j, "L", c.L);
  c.n_points = get_or(j, "n_points", c.n_points);
  c.dt = get_or(j, "dt", c.dt);
  c.snapshot_interval = get_or(j, "snapshot_interval", c.snapshot_interval);
  c.warmup_time = get_or(j, "warmup_time", c.warmup_time);
  c.n_snapshots = get_or(j, "n_snapshots", c.n_snapshots);
  c.init_std = get_or(j, "init_std", c.init_std);
  c.contour_points = get_or(j, "contour_points", c.contour_points);
  c.seed = seed;
  c.validate();
  return c;
}

struct BetaRun {
  beta::BetaConfig config;
  std::size_t n_snapshots = 100;
  double snapshot_interval = 1.0;
  double warmup = 125.0;

  Json to_json() const {
    Json j = beta::config_to_json(config);
    j.erase("seed");
    j["n_snapshots"] = n_snapshots;
    j["snapshot_interval"] = snapshot_interval;
    j["warmup"] = warmup;
    return j;
  }
};

BetaRun beta_from_json(const Json& j, std::uint64_t seed) {
  BetaRun r;
  auto& c = r.config;
  c.beta = get_or(j, "beta", c.beta);
  c.mu = get_or(j, "mu", c.mu);
  c.epsilon = get_or(j, "epsilon", c.epsilon);
  c.k_f = get_or(j, "k_f", c.k_f);
  c.delta_k = get_or(j, "delta_k", c.delta_k);
  c.dt = get_or(j, "dt", c.dt);
  c.n_points = get_or(j, "n_points", c.n_points);
  c.filter = get_or(j, "filter", c.filter);
  if (j.is_object() && j.contains("hyperviscosity") && !j.at("hyperviscosity").is_null()) {
    const auto& h = j.at("hyperviscosity");
    c.hyperviscosity = beta::Hyperviscosity{get_or(h, "coefficient", 0.0), get_or(h, "order", 2)};
  }
  c.seed = seed;
  r.n_snapshots = get_or(j, "n_snapshots", r.n_snapshots);
  r.snapshot_interval = get_or(j, "snapshot_interval", r.snapshot_interval);
  r.warmup = get_or(j, "warmup", r.warmup);
  c.validate();
  if (!(r.snapshot_interval > 0.0) || r.warmup < 0.0) throw ConfigError("beta: invalid snapshot_interval or warmup");
  return r;
}

/// Resolves dataset entries; a missing conditioning value comes from the
/// file header. Writes the resolved list back into the config.
std::vector<train::DatasetEntry> resolve_data(Json& cfg, Manifest* manifest) {
  if (!cfg.contains("data") || !cfg["data"].is_array() || cfg["data"].empty())
    throw ConfigError("missing --data (one or more trajectory files)");
  std::vector<train::DatasetEntry> entries;
  for (auto& item : cfg["data"]) {
    if (item.is_string()) item = Json{{"path", item}};
    train::DatasetEntry e;
    e.path = item.at("path").get<std::string>();
    if (item.contains("conditioning")) {
      e.conditioning = item.at("conditioning").get<double>();
    } else {
      const Json header = read_trajectory_header(e.path);
      if (!header.contains("conditioning"))
        throw ConfigError(e.path.string() + " has no conditioning value; pass it as --data FILE@VALUE");
      e.conditioning = header.at("conditioning").get<double>();
      item["conditioning"] = e.conditioning;
    }
    if (manifest) manifest->input(e.path);
    entries.push_back(e);
  }
  return entries;
}

double resolve_conditioning(const Json& cfg, const Trajectory& reference) {
  if (cfg.contains("conditioning")) return cfg.at("conditioning").get<double>();
  if (reference.metadata.contains("conditioning")) return reference.metadata.at("conditioning").get<double>();
  throw ConfigError("no conditioning value: pass --cond (or --L / --beta)");
}

double resolve_domain_length(const Json& cfg, const Trajectory& reference) {
  if (cfg.contains("domain_length")) return cfg.at("domain_length").get<double>();
  if (reference.metadata.contains("domain_length")) return reference.metadata.at("domain_length").get<double>();
  throw ConfigError("no domain length: pass --domain-length");
}

fs::path with_suffix(const fs::path& base, const std::string& suffix) { return fs::path(base.string() + suffix); }

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw FormatError("cannot write " + path.string());
  os << text;
}

template <class F>
void write_stream(const fs::path& path, F&& body) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw FormatError("cannot write " + path.string());
  body(os);
}

/// Packs an ensemble as frames of shape [members, D].
Trajectory pack_members(const std::vector<Trajectory>& members) {
  const auto& first = members.front();
  Trajectory out({members.size(), first.frame_size()}, first.snapshot_interval, first.t0);
  std::vector<double> frame(members.size() * first.frame_size());
  for (std::size_t f = 0; f < first.n_frames(); ++f) {
    for (std::size_t m = 0; m < members.size(); ++m)
      std::copy(members[m].frame(f).begin(), members[m].frame(f).end(),
                frame.begin() + static_cast<std::ptrdiff_t>(m * first.frame_size()));
    out.append(frame);
  }
  return out;
}

Trajectory model_rollout(const emu::Model& model, const Trajectory& history, double cond, std::size_t steps,
                         std::uint64_t seed, double cap) {
  diag::RolloutOptions o;
  o.n_steps = steps;
  o.noise_seed = stream_seed(seed, {kRolloutNoise});
  o.cap = cap;
  return diag::rollout(model, history, cond, o);
}

struct Summary {
  std::vector<std::pair<std::string, std::string>> rows;

  template <class T>
  void add(const std::string& key, const T& value) {
    std::ostringstream os;
    os << std::setprecision(10) << value;
    rows.emplace_back(key, os.str());
  }
  std::string text() const {
    std::ostringstream os;
    for (const auto& [k, v] : rows) os << k << ": " << v << '\n';
    return os.str();
  }
};

// ---------------------------------------------------------------------------
// Subcommands. Each receives the resolved config and returns nothing; errors
// propagate as exceptions.

struct Context {
  Json cfg;
  int threads = 1;
  std::uint64_t seed = 0;
  std::string command;
  std::vector<std::string> argv;
  Common common;
  std::ostream* out = nullptr;
  std::ostream* err = nullptr;

  Manifest manifest(const fs::path& primary) const {
    const fs::path path = common.manifest_path.empty() ? with_suffix(primary, ".manifest.json")
                                                       : fs::path(common.manifest_path);
    return Manifest(path, command, argv, cfg, threads);
  }
};

void simulate_ks(Context& ctx) {
  const fs::path out = require_string(ctx.cfg, "out", "--out");
  const auto config = ks_from_json(ctx.cfg.value("ks", Json::object()), ctx.seed);
  ctx.cfg["ks"] = ks::config_to_json(config);
  ctx.cfg["ks"].erase("seed");
  auto m = ctx.manifest(out);
  m.config() = ctx.cfg;
  m.seeds({{"base", ctx.seed}, {"initial_field", ctx.seed}});
  m.output(out);
  m.begin();
  const auto traj = ks::generate_dataset(config);
  write_trajectory(out, traj);
  m.complete();
  *ctx.out << "wrote " << traj.n_frames() << " frames x " << traj.frame_size() << " points to " << out.string()
           << '\n';
}

void simulate_beta(Context& ctx) {
  const fs::path out = require_string(ctx.cfg, "out", "--out");
  const auto run = beta_from_json(ctx.cfg.value("beta", Json::object()), ctx.seed);
  ctx.cfg["beta"] = run.to_json();
  auto m = ctx.manifest(out);
  m.config() = ctx.cfg;
  m.seeds({{"base", ctx.seed}, {"forcing", ctx.seed}});
  m.output(out);
  m.begin();
  const auto traj = beta::generate_dataset(run.config, run.n_snapshots, run.snapshot_interval, run.warmup);
  write_trajectory(out, traj);
  m.complete();
  *ctx.out << "wrote " << traj.n_frames() << " profiles x " << traj.frame_size() << " points to " << out.string()
           << '\n';
}

/// Streams metrics (deterministic) and wall time (not) to separate files.
struct MetricsLog {
  std::ofstream metrics, timing;
  std::ostream* progress = nullptr;
  int epochs = 0;

  MetricsLog(const fs::path& metrics_path, const fs::path& timing_path, std::ostream* progress_stream, int n_epochs)
      : metrics(metrics_path), timing(timing_path), progress(progress_stream), epochs(n_epochs) {
    if (!metrics || !timing) throw FormatError("cannot open metrics files next to " + metrics_path.string());
    metrics << train::metrics_csv_header() << '\n';
    timing << "epoch,wall_seconds\n";
  }

  void operator()(const train::EpochMetrics& e) {
    metrics << train::metrics_csv_row(e) << '\n';
    metrics.flush();
    timing << e.epoch << ',' << std::setprecision(6) << e.wall_seconds << '\n';
    timing.flush();
    const int every = std::max(1, epochs / 10);
    if (progress && (e.epoch % every == 0 || e.epoch == epochs))
      *progress << "epoch " << e.epoch << "/" << epochs << " loss " << e.loss << " val_mse " << e.val_mse << '\n';
  }
};

void metrics_paths(const Json& cfg, const fs::path& out, fs::path& metrics, fs::path& timing) {
  metrics = cfg.contains("metrics") ? fs::path(cfg.at("metrics").get<std::string>()) : with_suffix(out, ".metrics.csv");
  timing = with_suffix(metrics.parent_path() / metrics.stem(), ".timing.csv");
}

void pretrain_cmd(Context& ctx) {
  const fs::path out = require_string(ctx.cfg, "out", "--out");
  fs::path metrics_path, timing_path;
  metrics_paths(ctx.cfg, out, metrics_path, timing_path);

  auto m = ctx.manifest(out);
  const auto entries = resolve_data(ctx.cfg, &m);

  Json train_json = ctx.cfg.value("pretrain", Json::object());
  Json model_json = ctx.cfg.value("model", Json::object());
  if (!model_json.contains("equation")) {
    const Json header = read_trajectory_header(entries.front().path);
    model_json["equation"] = header.value("equation", std::string("ks"));
  }
  if (!model_json.contains("mode") && train_json.value("loss", std::string("mse")) == "crps_spectral")
    model_json["mode"] = "probabilistic";
  if (!train_json.contains("loss") && model_json.value("mode", std::string("deterministic")) == "probabilistic")
    train_json["loss"] = "crps_spectral";
  const auto model_config = emu::ModelConfig::from_json(model_json);
  train_json["phase"] = "pretrain";
  train_json.erase("seed");
  auto tc = train::TrainConfig::from_json(train_json);
  tc.seed = stream_seed(ctx.seed, {kTraining});
  tc.threads = ctx.threads;

  ctx.cfg["model"] = model_config.to_json();
  ctx.cfg["pretrain"] = tc.to_json();
  ctx.cfg["pretrain"].erase("seed");
  m.config() = ctx.cfg;
  m.seeds({{"base", ctx.seed},
           {"model_init", stream_seed(ctx.seed, {kModelInit})},
           {"training", tc.seed}});
  for (const auto& p : {out, metrics_path, timing_path}) m.output(p);
  m.begin();

  const auto data = train::Dataset::load(entries, model_config.history, tc.validation_fraction);
  emu::Model model(model_config, stream_seed(ctx.seed, {kModelInit}));
  MetricsLog log(metrics_path, timing_path, ctx.err, tc.epochs);
  const auto history = train::pretrain(model, data, tc, std::ref(log));
  save_checkpoint(out, model);
  m.complete();

  *ctx.out << "pretrained " << model.parameter_count() << " parameters for " << tc.epochs << " epochs";
  if (!history.empty()) *ctx.out << "; final loss " << history.back().loss << ", val_mse " << history.back().val_mse;
  *ctx.out << "\ncheckpoint: " << out.string() << '\n';
}

void finetune_cmd(Context& ctx) {
  const fs::path out = require_string(ctx.cfg, "out", "--out");
  const fs::path ckpt = require_string(ctx.cfg, "checkpoint", "--checkpoint");
  fs::path metrics_path, timing_path;
  metrics_paths(ctx.cfg, out, metrics_path, timing_path);

  auto m = ctx.manifest(out);
  m.input(ckpt);
  const auto entries = resolve_data(ctx.cfg, &m);
  auto model = emu::load_checkpoint(ckpt);

  Json train_json = ctx.cfg.value("finetune", Json::object());
  train_json["phase"] = "finetune";
  train_json.erase("seed");
  if (!train_json.contains("lr") && model.metadata.contains("pretrain"))
    train_json["pretrain_lr"] = model.metadata["pretrain"].value("lr", train::TrainConfig{}.lr);
  if (!train_json.contains("loss") && model.config().mode == emu::Mode::probabilistic)
    train_json["loss"] = "crps_spectral";
  auto tc = train::TrainConfig::from_json(train_json);
  tc.seed = stream_seed(ctx.seed, {kTraining});
  tc.threads = ctx.threads;

  ctx.cfg["finetune"] = tc.to_json();
  ctx.cfg["finetune"].erase("seed");
  m.config() = ctx.cfg;
  m.seeds({{"base", ctx.seed}, {"training", tc.seed}});
  for (const auto& p : {out, metrics_path, timing_path}) m.output(p);
  m.begin();

  const auto data = train::Dataset::load(entries, model.config().history, tc.validation_fraction);
  MetricsLog log(metrics_path, timing_path, ctx.err, tc.epochs);
  const auto history = train::finetune(model, data, tc, std::ref(log));
  save_checkpoint(out, model);
  m.complete();

  *ctx.out << "finetuned on " << data.shards().size() << " conditioning values for " << tc.epochs
           << " epochs at lr " << tc.lr;
  if (!history.empty()) *ctx.out << "; final loss " << history.back().loss << ", val_mse " << history.back().val_mse;
  *ctx.out << "\ncheckpoint: " << out.string() << '\n';
}

void rollout_cmd(Context& ctx) {
  const fs::path out = require_string(ctx.cfg, "out", "--out");
  const fs::path model_path = require_string(ctx.cfg, "model", "--model");
  const fs::path init_path = require_string(ctx.cfg, "init", "--init");
  const auto steps = get_or<std::size_t>(ctx.cfg, "steps", 100);
  const auto members = get_or<std::size_t>(ctx.cfg, "members", 1);
  const double cap = get_or(ctx.cfg, "cap", 1e3);
  if (members < 1) throw ConfigError("--members must be >= 1");

  auto m = ctx.manifest(out);
  m.input(model_path);
  m.input(init_path);
  const auto model = emu::load_checkpoint(model_path);
  const auto init = read_trajectory(init_path);
  const double cond = resolve_conditioning(ctx.cfg, init);
  const auto S = static_cast<std::size_t>(model.config().history);
  if (init.n_frames() < S) throw ShapeError("--init holds fewer frames than the model history");
  const std::size_t start = get_or<std::size_t>(ctx.cfg, "start", init.n_frames() - S);
  if (start + S > init.n_frames()) throw ConfigError("--start leaves fewer than history frames");
  const auto history = init.slice(start, S);

  ctx.cfg["conditioning"] = cond;
  ctx.cfg["steps"] = steps;
  ctx.cfg["members"] = members;
  ctx.cfg["start"] = start;
  m.config() = ctx.cfg;
  m.seeds({{"base", ctx.seed}, {"noise", stream_seed(ctx.seed, {kRolloutNoise})}});
  m.output(out);
  m.begin();

  diag::RolloutOptions o;
  o.n_steps = steps;
  o.cap = cap;
  o.noise_seed = stream_seed(ctx.seed, {kRolloutNoise});
  Trajectory result = members == 1 ? diag::rollout(model, history, cond, o)
                                   : pack_members(diag::rollout_ensemble(model, history, cond, members, o));
  result.metadata = {{"equation", model.config().equation},
                     {"source", "emulator"},
                     {"conditioning", cond},
                     {"members", members},
                     {"model_sha256", sha256_file(model_path)}};
  if (init.metadata.contains("domain_length")) result.metadata["domain_length"] = init.metadata["domain_length"];
  write_trajectory(out, result);
  m.complete();

  double peak = 0.0;
  for (double v : result.data) peak = std::max(peak, std::abs(v));
  *ctx.out << "rolled out " << steps << " steps x " << members << " member(s); max|u| " << peak << "\n";
}

/// Candidate trajectory for comparisons: a file, or a rollout of `--model`
/// seeded with the truth's first S frames and as long as the truth.
Trajectory comparison_candidate(Context& ctx, Manifest& m, const Trajectory& truth) {
  if (ctx.cfg.contains("candidate")) {
    const fs::path p = ctx.cfg["candidate"].get<std::string>();
    m.input(p);
    return read_trajectory(p);
  }
  if (ctx.cfg.contains("model")) {
    const fs::path p = ctx.cfg["model"].get<std::string>();
    m.input(p);
    const auto model = emu::load_checkpoint(p);
    const auto S = static_cast<std::size_t>(model.config().history);
    if (truth.n_frames() <= S) throw ShapeError("--truth is shorter than the model history");
    const double cond = resolve_conditioning(ctx.cfg, truth);
    const auto steps = get_or<std::size_t>(ctx.cfg, "steps", truth.n_frames() - S);
    ctx.cfg["conditioning"] = cond;
    auto t = model_rollout(model, truth.slice(0, S), cond, steps, ctx.seed, get_or(ctx.cfg, "cap", 1e3));
    t.metadata["conditioning"] = cond;
    return t;
  }
  throw ConfigError("need --candidate FILE or --model CHECKPOINT");
}

void evaluate_pdf(Context& ctx) {
  const fs::path out = require_string(ctx.cfg, "out", "--out");
  const fs::path truth_path = require_string(ctx.cfg, "truth", "--truth");
  const auto bins = get_or<std::size_t>(ctx.cfg, "bins", 50);
  const double width = get_or(ctx.cfg, "width", 4.0);

  auto m = ctx.manifest(out);
  m.input(truth_path);
  const auto truth = read_trajectory(truth_path);
  const double L = resolve_domain_length(ctx.cfg, truth);
  ctx.cfg["domain_length"] = L;
  ctx.cfg["bins"] = bins;
  const std::vector<std::string> suffixes{".truth.pdet", ".candidate.pdet", ".marginal_truth.csv",
                                          ".marginal_candidate.csv", ".summary.txt"};
  for (const auto& s : suffixes) m.output(with_suffix(out, s));
  m.seeds({{"base", ctx.seed}, {"noise", stream_seed(ctx.seed, {kRolloutNoise})}});
  m.config() = ctx.cfg;
  m.begin();

  const auto candidate = comparison_candidate(ctx, m, truth);
  const auto ts = diag::joint_samples(truth, L);
  const auto binning = diag::reference_binning(ts, bins, width);
  const auto ht = diag::histogram(ts, binning);
  const auto hc = diag::histogram(diag::joint_samples(candidate, L), binning);
  const double d = diag::hellinger(ht, hc);

  write_trajectory(with_suffix(out, ".truth.pdet"), diag::to_pdet(ht));
  write_trajectory(with_suffix(out, ".candidate.pdet"), diag::to_pdet(hc));
  write_stream(with_suffix(out, ".marginal_truth.csv"), [&](std::ostream& os) { diag::write_marginal_csv(os, ht); });
  write_stream(with_suffix(out, ".marginal_candidate.csv"),
               [&](std::ostream& os) { diag::write_marginal_csv(os, hc); });
  Summary s;
  s.add("evaluation", "joint pdf of (u, du/dx, du/dt)");
  s.add("truth", truth_path.string());
  s.add("bins_per_axis", bins);
  s.add("truth_samples", ts.size());
  s.add("candidate_frames", candidate.n_frames());
  s.add("candidate_outside_fraction",
        static_cast<double>(hc.outside) / static_cast<double>(std::max<std::uint64_t>(1, hc.outside + hc.total_inside())));
  s.add("hellinger", d);
  write_text(with_suffix(out, ".summary.txt"), s.text());
  m.config() = ctx.cfg;
  m.complete();
  *ctx.out << s.text();
}

void evaluate_psd(Context& ctx) {
  const fs::path out = require_string(ctx.cfg, "out", "--out");
  const fs::path truth_path = require_string(ctx.cfg, "truth", "--truth");
  auto m = ctx.manifest(out);
  m.input(truth_path);
  const bool compare = ctx.cfg.contains("candidate") || ctx.cfg.contains("model");
  m.output(with_suffix(out, ".truth.csv"));
  if (compare) m.output(with_suffix(out, ".candidate.csv"));
  m.output(with_suffix(out, ".summary.txt"));
  m.seeds({{"base", ctx.seed}, {"noise", stream_seed(ctx.seed, {kRolloutNoise})}});
  m.config() = ctx.cfg;
  m.begin();

  const auto truth = read_trajectory(truth_path);
  const auto pt = diag::zonal_psd(truth);
  write_stream(with_suffix(out, ".truth.csv"), [&](std::ostream& os) { diag::write_psd_csv(os, pt); });
  Summary s;
  s.add("evaluation", "time-mean zonal power spectrum");
  s.add("truth", truth_path.string());
  s.add("frames", truth.n_frames());
  const auto peak = std::max_element(pt.begin() + 1, pt.end()) - pt.begin();
  s.add("truth_peak_wavenumber", peak);
  if (compare) {
    const auto candidate = comparison_candidate(ctx, m, truth);
    const auto pc = diag::zonal_psd(candidate);
    write_stream(with_suffix(out, ".candidate.csv"), [&](std::ostream& os) { diag::write_psd_csv(os, pc); });
    // Modes at round-off level in the truth say nothing about the candidate.
    const double floor = 1e-10 * *std::max_element(pt.begin(), pt.end());
    double worst = 0.0;
    for (std::size_t k = 1; k < pt.size() && k < pc.size(); ++k)
      if (pt[k] > floor && pc[k] > 0.0) worst = std::max(worst, std::abs(std::log10(pc[k] / pt[k])));
    s.add("candidate_peak_wavenumber", std::max_element(pc.begin() + 1, pc.end()) - pc.begin());
    s.add("max_abs_log10_ratio", worst);
  }
  write_text(with_suffix(out, ".summary.txt"), s.text());
  m.config() = ctx.cfg;
  m.complete();
  *ctx.out << s.text();
}

std::vector<double> event_edges(const Json& cfg, double horizon) {
  if (cfg.contains("edges")) return cfg.at("edges").get<std::vector<double>>();
  const auto bins = get_or<std::size_t>(cfg, "bins", 20);
  std::vector<double> e(bins + 1);
  for (std::size_t i = 0; i <= bins; ++i) e[i] = horizon * static_cast<double>(i) / static_cast<double>(bins);
  return e;
}

void evaluate_events(Context& ctx) {
  const fs::path out = require_string(ctx.cfg, "out", "--out");
  auto m = ctx.manifest(out);
  const bool ensemble = ctx.cfg.contains("model") || get_or(ctx.cfg, "solver", false);
  const double prominence = get_or(ctx.cfg, "prominence", diag::kJetProminence);
  const auto debounce = get_or<std::size_t>(ctx.cfg, "debounce", diag::kEventDebounce);

  if (!ensemble) {
    const fs::path truth_path = require_string(ctx.cfg, "truth", "--truth");
    m.input(truth_path);
    m.output(with_suffix(out, ".events.csv"));
    m.output(with_suffix(out, ".summary.txt"));
    m.config() = ctx.cfg;
    m.seeds({{"base", ctx.seed}});
    m.begin();
    const auto truth = read_trajectory(truth_path);
    const auto counts = diag::jet_counts(truth, prominence);
    const auto events = diag::detect_events(truth, prominence, debounce);
    write_stream(with_suffix(out, ".events.csv"), [&](std::ostream& os) { diag::write_events_csv(os, events); });
    Summary s;
    s.add("evaluation", "jet events along one trajectory");
    s.add("frames", truth.n_frames());
    s.add("jets_first_frame", counts.front());
    s.add("jets_last_frame", counts.back());
    s.add("nucleations", std::count_if(events.begin(), events.end(), [](const auto& e) {
            return e.kind == diag::EventKind::nucleation;
          }));
    s.add("coalescences", std::count_if(events.begin(), events.end(), [](const auto& e) {
            return e.kind == diag::EventKind::coalescence;
          }));
    write_text(with_suffix(out, ".summary.txt"), s.text());
    m.complete();
    *ctx.out << s.text();
    return;
  }

  const auto members = get_or<std::size_t>(ctx.cfg, "members", 50);
  const double horizon = get_or(ctx.cfg, "horizon", 0.0);
  if (!(horizon > 0.0)) throw ConfigError("--horizon must be positive for ensemble events");
  diag::EventPdfOptions opt;
  opt.kind = diag::event_kind_from_string(get_or<std::string>(ctx.cfg, "kind", "coalescence"));
  opt.horizon = horizon;
  opt.edges = event_edges(ctx.cfg, horizon);
  opt.prominence = prominence;
  opt.debounce = debounce;
  opt.threads = ctx.threads;
  const std::uint64_t ensemble_seed = stream_seed(ctx.seed, {kEnsemble});

  diag::MemberRunner runner;
  std::unique_ptr<beta::BetaState> spun;
  std::unique_ptr<emu::Model> model;
  Trajectory history;
  BetaRun run;
  if (ctx.cfg.contains("model")) {
    const fs::path model_path = ctx.cfg["model"].get<std::string>();
    const fs::path truth_path = require_string(ctx.cfg, "truth", "--truth (initial history)");
    m.input(model_path);
    m.input(truth_path);
    model = std::make_unique<emu::Model>(emu::load_checkpoint(model_path));
    const auto truth = read_trajectory(truth_path);
    const auto S = static_cast<std::size_t>(model->config().history);
    if (truth.n_frames() < S) throw ShapeError("--truth holds fewer frames than the model history");
    history = truth.slice(truth.n_frames() - S, S);
    const double cond = resolve_conditioning(ctx.cfg, truth);
    ctx.cfg["conditioning"] = cond;
    const auto steps = static_cast<std::size_t>(std::llround(horizon / history.snapshot_interval));
    runner = diag::emulator_member(*model, history, cond, steps, ensemble_seed);
  } else {
    run = beta_from_json(ctx.cfg.value("beta", Json::object()), ctx.seed);
    ctx.cfg["beta"] = run.to_json();
  }
  m.config() = ctx.cfg;
  m.seeds({{"base", ctx.seed}, {"ensemble", ensemble_seed}});
  m.output(with_suffix(out, ".event_times.csv"));
  m.output(with_suffix(out, ".summary.txt"));
  m.begin();

  if (!runner) {
    beta::Solver solver(run.config, run.config.make_plan());
    solver.advance(static_cast<std::size_t>(std::llround(run.warmup / run.config.dt)));
    spun = std::make_unique<beta::BetaState>(solver.state());
    const auto frames = static_cast<std::size_t>(std::llround(horizon / run.snapshot_interval)) + 1;
    runner = diag::beta_solver_member(*spun, run.config, frames, run.snapshot_interval, ensemble_seed);
  }
  const auto h = diag::event_time_pdf(runner, members, opt);
  write_stream(with_suffix(out, ".event_times.csv"),
               [&](std::ostream& os) { diag::write_event_histogram_csv(os, h); });
  Summary s;
  s.add("evaluation", "first " + diag::to_string(opt.kind) + " time over an ensemble");
  s.add("source", ctx.cfg.contains("model") ? "emulator" : "solver");
  s.add("members", members);
  s.add("horizon", horizon);
  s.add("with_event", h.total() - h.overflow);
  s.add("overflow", h.overflow);
  write_text(with_suffix(out, ".summary.txt"), s.text());
  m.complete();
  *ctx.out << s.text();
}

diag::LyapunovOptions lyapunov_options(const Json& cfg) {
  diag::LyapunovOptions o;
  const Json j = cfg.value("lyapunov", Json::object());
  o.perturbation = get_or(j, "perturbation", o.perturbation);
  o.renormalize_every = get_or(j, "renormalize_every", o.renormalize_every);
  o.averaging_time = get_or(j, "averaging_time", o.averaging_time);
  o.transient = get_or(j, "transient", o.transient);
  return o;
}

Json lyapunov_json(const diag::LyapunovOptions& o) {
  return {{"perturbation", o.perturbation},
          {"renormalize_every", o.renormalize_every},
          {"averaging_time", o.averaging_time},
          {"transient", o.transient}};
}

void evaluate_horizon(Context& ctx) {
  const fs::path out = require_string(ctx.cfg, "out", "--out");
  const fs::path truth_path = require_string(ctx.cfg, "truth", "--truth");
  const fs::path model_path = require_string(ctx.cfg, "model", "--model");
  const double threshold = get_or(ctx.cfg, "threshold", 0.5);
  auto m = ctx.manifest(out);
  m.input(truth_path);
  m.input(model_path);
  m.output(with_suffix(out, ".summary.txt"));
  const auto truth = read_trajectory(truth_path);
  const double cond = resolve_conditioning(ctx.cfg, truth);
  ctx.cfg["conditioning"] = cond;
  const auto opts = lyapunov_options(ctx.cfg);
  if (!ctx.cfg.contains("lyapunov_exponent")) ctx.cfg["lyapunov"] = lyapunov_json(opts);
  m.config() = ctx.cfg;
  m.seeds({{"base", ctx.seed}});
  m.begin();

  double lambda = 0.0;
  if (ctx.cfg.contains("lyapunov_exponent")) {
    lambda = ctx.cfg["lyapunov_exponent"].get<double>();
  } else {
    ks::KSConfig k;
    k.L = resolve_domain_length(ctx.cfg, truth);
    k.n_points = static_cast<int>(truth.frame_size());
    k.seed = ctx.seed;
    lambda = diag::lyapunov_exponent(k, opts).exponent;
  }
  if (!(lambda > 0.0)) throw ConfigError("tracking horizon needs a positive Lyapunov exponent");
  const auto model = emu::load_checkpoint(model_path);
  const double h = diag::tracking_horizon(model, truth, cond, lambda, threshold);
  Summary s;
  s.add("evaluation", "tracking horizon");
  s.add("lyapunov_exponent", lambda);
  s.add("threshold", threshold);
  s.add("horizon_lyapunov_times", h);
  write_text(with_suffix(out, ".summary.txt"), s.text());
  m.complete();
  *ctx.out << s.text();
}

void evaluate_lyapunov(Context& ctx) {
  const fs::path out = require_string(ctx.cfg, "out", "--out");
  auto m = ctx.manifest(out);
  const auto k = ks_from_json(ctx.cfg.value("ks", Json::object()), ctx.seed);
  const auto opts = lyapunov_options(ctx.cfg);
  ctx.cfg["ks"] = ks::config_to_json(k);
  ctx.cfg["ks"].erase("seed");
  ctx.cfg["lyapunov"] = lyapunov_json(opts);
  m.config() = ctx.cfg;
  m.seeds({{"base", ctx.seed}});
  m.output(with_suffix(out, ".summary.txt"));
  m.begin();
  const auto r = diag::lyapunov_exponent(k, opts);
  Summary s;
  s.add("evaluation", "leading Lyapunov exponent");
  s.add("L", k.L);
  s.add("n_points", k.resolved_n());
  s.add("exponent", r.exponent);
  s.add("renormalizations", r.renormalizations);
  s.add("lyapunov_time", r.exponent > 0.0 ? 1.0 / r.exponent : INFINITY);
  s.add("chaotic", r.chaotic ? "yes" : "no");
  write_text(with_suffix(out, ".summary.txt"), s.text());
  m.complete();
  if (!r.chaotic) *ctx.err << "warning: non-positive exponent; the regime does not look chaotic\n";
  *ctx.out << s.text();
}

void inspect_cmd(const std::vector<std::string>& files, std::ostream& out) {
  for (const auto& f : files) {
    std::ifstream is(f, std::ios::binary);
    if (!is) throw FormatError("cannot open " + f);
    char magic[5] = {};
    is.read(magic, 5);
    const std::string tag(magic, static_cast<std::size_t>(is.gcount()));
    Json info;
    if (tag == "PDET1") {
      info = {{"format", "PDET1"}, {"header", read_trajectory_header(f)}};
    } else if (tag == "NPEC1") {
      const auto model = emu::load_checkpoint(f);
      info = {{"format", "NPEC1"},
              {"header", emu::read_checkpoint_header(f)},
              {"parameters", model.parameter_count()}};
    } else {
      throw FormatError(f + ": unknown format (expected PDET1 or NPEC1)");
    }
    info["file"] = f;
    out << info.dump(2) << '\n';
  }
}

// ---------------------------------------------------------------------------
// Grammar

void add_ks_flags(CLI::App* app, Overrides& ov) {
  ov.option<double>(app, "--L", "/ks/L", "Domain length");
  ov.option<int>(app, "--n-points", "/ks/n_points", "Grid points (default round_to_even(2.5 L))");
  ov.option<double>(app, "--dt", "/ks/dt", "Inner time step");
}

void add_beta_flags(CLI::App* app, Overrides& ov) {
  ov.option<double>(app, "--beta", "/beta/beta", "Planetary vorticity gradient");
  ov.option<double>(app, "--mu", "/beta/mu", "Linear damping rate");
  ov.option<double>(app, "--epsilon", "/beta/epsilon", "Energy injection rate");
  ov.option<int>(app, "--kf", "/beta/k_f", "Forcing wavenumber");
  ov.option<double>(app, "--delta-k", "/beta/delta_k", "Forcing annulus thickness");
  ov.option<double>(app, "--dt", "/beta/dt", "Time step");
  ov.option<int>(app, "--n-points", "/beta/n_points", "Grid points per axis");
  ov.flag(app, "--no-filter", "/beta/filter", false, "Disable the per-step spectral filter");
  ov.option<double>(app, "--interval", "/beta/snapshot_interval", "Time between recorded profiles");
  ov.option<double>(app, "--warmup", "/beta/warmup", "Spin-up time discarded before recording");
}

void add_model_flags(CLI::App* app, Overrides& ov) {
  ov.option<int>(app, "--blocks", "/model/n_blocks", "Transformer blocks");
  ov.option<int>(app, "--channels", "/model/channels", "Latent channels");
  ov.option<int>(app, "--window", "/model/window", "Attention window (odd)");
  ov.option<int>(app, "--history", "/model/history", "Input frames");
  ov.option<int>(app, "--mlp-ratio", "/model/mlp_ratio", "MLP width multiplier");
  ov.option<std::string>(app, "--mode", "/model/mode", "deterministic|probabilistic")
      ->check(CLI::IsMember({"deterministic", "probabilistic"}));
  ov.flag(app, "--gates", "/model/gates", true, "Gate both residual branches");
}

void add_train_flags(CLI::App* app, Overrides& ov, const std::string& section) {
  const std::string p = "/" + section + "/";
  ov.option<int>(app, "--epochs", p + "epochs", "Training epochs");
  ov.option<double>(app, "--lr", p + "lr", "Learning rate");
  ov.option<int>(app, "--batch-size", p + "batch_size", "Batch size");
  ov.option<std::string>(app, "--loss", p + "loss", "mse|crps_spectral")
      ->check(CLI::IsMember({"mse", "crps_spectral"}));
  ov.option<int>(app, "--ensemble", p + "ensemble_m", "Ensemble members per sample for the CRPS loss");
  ov.option<double>(app, "--lambda", p + "lambda", "Weight of the spectral term");
  ov.option<std::string>(app, "--schedule", p + "schedule", "constant|cosine")
      ->check(CLI::IsMember({"constant", "cosine"}));
  ov.option<double>(app, "--validation-fraction", p + "validation_fraction", "Trailing share held out");
  ov.option<std::string>(app, "--metrics", "/metrics", "Metrics CSV (default: <out>.metrics.csv)");
}

void add_cond_flags(CLI::App* app, Overrides& ov) {
  auto* c = ov.option<double>(app, "--cond", "/conditioning", "Conditioning value (default: from the input file)");
  auto* l = ov.option<double>(app, "--L", "/conditioning", "Alias of --cond for KS models");
  auto* b = ov.option<double>(app, "--beta", "/conditioning", "Alias of --cond for beta-plane models");
  c->excludes(l)->excludes(b);
  l->excludes(b);
}

}  // namespace

std::string sha256_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) throw FormatError("sha256 unavailable");
  std::vector<char> buf(1 << 16);
  while (is) {
    is.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (is.gcount() > 0) EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(is.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), md, &len);
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
  return os.str();
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Spectral PDE solvers, a conditioned local-attention emulator and its diagnostics", kToolName};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  Overrides ov;
  Common common;
  std::vector<std::string> inspect_files;

  auto* simulate = app.add_subcommand("simulate", "Generate solver trajectories");
  simulate->require_subcommand(1);
  auto* sim_ks = simulate->add_subcommand("ks", "Kuramoto-Sivashinsky trajectory (PDET1)");
  add_common(sim_ks, common, ov);
  add_ks_flags(sim_ks, ov);
  ov.option<std::size_t>(sim_ks, "--snapshots", "/ks/n_snapshots", "Recorded frames");
  ov.option<double>(sim_ks, "--interval", "/ks/snapshot_interval", "Time between frames");
  ov.option<double>(sim_ks, "--warmup", "/ks/warmup_time", "Spin-up time discarded before recording");
  ov.option<double>(sim_ks, "--init-std", "/ks/init_std", "Standard deviation of the initial field");
  ov.option<std::string>(sim_ks, "--out", "/out", "Output trajectory");

  auto* sim_beta = simulate->add_subcommand("beta", "Beta-plane zonal-mean profiles U(y, t) (PDET1)");
  add_common(sim_beta, common, ov);
  add_beta_flags(sim_beta, ov);
  ov.option<std::size_t>(sim_beta, "--snapshots", "/beta/n_snapshots", "Recorded profiles");
  ov.option<std::string>(sim_beta, "--out", "/out", "Output trajectory");

  auto* pretrain = app.add_subcommand("pretrain", "Train at a single conditioning value, conditioning map frozen");
  add_common(pretrain, common, ov);
  ov.data(pretrain, "Trajectory files, optionally FILE@VALUE to set the conditioning value");
  add_model_flags(pretrain, ov);
  add_train_flags(pretrain, ov, "pretrain");
  ov.option<std::string>(pretrain, "--out", "/out", "Output checkpoint (NPEC1)");

  auto* finetune = app.add_subcommand("finetune", "Continue training across conditioning values");
  add_common(finetune, common, ov);
  ov.option<std::string>(finetune, "--checkpoint", "/checkpoint", "Pretrained checkpoint");
  ov.data(finetune, "Trajectory files, optionally FILE@VALUE to set the conditioning value");
  add_train_flags(finetune, ov, "finetune");
  ov.option<std::string>(finetune, "--out", "/out", "Output checkpoint (NPEC1)");

  auto* rollout = app.add_subcommand("rollout", "Autoregressive emulator rollout");
  add_common(rollout, common, ov);
  ov.option<std::string>(rollout, "--model", "/model", "Checkpoint");
  ov.option<std::string>(rollout, "--init", "/init", "Trajectory supplying the initial history");
  ov.option<std::size_t>(rollout, "--start", "/start", "First history frame (default: the last frames)");
  ov.option<std::size_t>(rollout, "--steps", "/steps", "Forecast steps");
  ov.option<std::size_t>(rollout, "--members", "/members", "Ensemble members (probabilistic models)");
  ov.option<double>(rollout, "--cap", "/cap", "Abort once max|u| exceeds this");
  add_cond_flags(rollout, ov);
  ov.option<std::string>(rollout, "--out", "/out", "Output trajectory; ensembles use frames [members, D]");

  auto* evaluate = app.add_subcommand("evaluate", "Statistical diagnostics");
  evaluate->require_subcommand(1);
  auto compare_flags = [&](CLI::App* a) {
    add_common(a, common, ov);
    ov.option<std::string>(a, "--truth", "/truth", "Reference trajectory");
    ov.option<std::string>(a, "--candidate", "/candidate", "Trajectory to compare");
    ov.option<std::string>(a, "--model", "/model", "Checkpoint to roll out instead of --candidate");
    ov.option<std::size_t>(a, "--steps", "/steps", "Rollout length (default: as long as the truth)");
    add_cond_flags(a, ov);
    ov.option<std::string>(a, "--out", "/out", "Output prefix");
  };
  auto* ev_pdf = evaluate->add_subcommand("pdf", "Joint PDF of (u, du/dx, du/dt) and Hellinger distance");
  compare_flags(ev_pdf);
  ov.option<std::size_t>(ev_pdf, "--bins", "/bins", "Bins per axis");
  ov.option<double>(ev_pdf, "--width", "/width", "Bin range in reference standard deviations");
  ov.option<double>(ev_pdf, "--domain-length", "/domain_length", "Periodic domain length");
  auto* ev_psd = evaluate->add_subcommand("psd", "Time-mean zonal power spectrum");
  compare_flags(ev_psd);

  auto* ev_events = evaluate->add_subcommand("events", "Jet nucleation and coalescence events");
  add_common(ev_events, common, ov);
  ov.option<std::string>(ev_events, "--truth", "/truth", "Trajectory to scan, or the model's initial history");
  ov.option<std::string>(ev_events, "--model", "/model", "Emulator ensemble from --truth");
  ov.flag(ev_events, "--solver", "/solver", true, "Solver ensemble from a spun-up state");
  add_beta_flags(ev_events, ov);
  ov.option<double>(ev_events, "--cond", "/conditioning", "Conditioning value for --model");
  ov.option<std::size_t>(ev_events, "--members", "/members", "Ensemble size");
  ov.option<double>(ev_events, "--horizon", "/horizon", "Time window for the first event");
  ov.option<std::string>(ev_events, "--kind", "/kind", "nucleation|coalescence")
      ->check(CLI::IsMember({"nucleation", "coalescence"}));
  ov.option<std::size_t>(ev_events, "--bins", "/bins", "Histogram bins over [0, horizon]");
  ov.option<std::vector<double>>(ev_events, "--edges", "/edges", "Explicit histogram edges");
  ov.option<double>(ev_events, "--prominence", "/prominence", "Jet prominence as a fraction of max|U|");
  ov.option<std::size_t>(ev_events, "--debounce", "/debounce", "Frames a jet count must persist");
  ov.option<std::string>(ev_events, "--out", "/out", "Output prefix");

  auto* ev_horizon = evaluate->add_subcommand("horizon", "Tracking horizon in Lyapunov times");
  add_common(ev_horizon, common, ov);
  ov.option<std::string>(ev_horizon, "--truth", "/truth", "Solver trajectory");
  ov.option<std::string>(ev_horizon, "--model", "/model", "Deterministic checkpoint");
  add_cond_flags(ev_horizon, ov);
  ov.option<double>(ev_horizon, "--lyapunov-exponent", "/lyapunov_exponent",
                    "Known exponent (otherwise estimated from the truth's domain)");
  ov.option<double>(ev_horizon, "--threshold", "/threshold", "Error threshold in climatological RMS");
  ov.option<std::string>(ev_horizon, "--out", "/out", "Output prefix");

  auto* ev_lyap = evaluate->add_subcommand("lyapunov", "Leading Lyapunov exponent of the KS equation");
  add_common(ev_lyap, common, ov);
  add_ks_flags(ev_lyap, ov);
  ov.option<double>(ev_lyap, "--perturbation", "/lyapunov/perturbation", "Twin separation");
  ov.option<double>(ev_lyap, "--renormalize-every", "/lyapunov/renormalize_every", "Renormalisation interval");
  ov.option<double>(ev_lyap, "--averaging-time", "/lyapunov/averaging_time", "Averaging window");
  ov.option<double>(ev_lyap, "--transient", "/lyapunov/transient", "Discarded spin-up");
  ov.option<std::string>(ev_lyap, "--out", "/out", "Output prefix");

  auto* inspect = app.add_subcommand("inspect", "Print the headers of PDET1 / NPEC1 files");
  inspect->add_option("files", inspect_files, "Files to inspect")->required();

  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::Success& e) {
    // --help, --help-all and --version print through CLI11's own formatter.
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\nrun '" << kToolName << " --help' for the grammar\n";
    return kExitUsage;
  }

  try {
    if (inspect->parsed()) {
      inspect_cmd(inspect_files, out);
      return kExitOk;
    }

    Context ctx;
    ctx.common = common;
    ctx.out = &out;
    ctx.err = &err;
    ctx.argv = args;
    ctx.cfg = common.config_path.empty() ? Json::object() : load_config(common.config_path);
    ctx.cfg.merge_patch(ov.patch());
    ctx.seed = get_or<std::uint64_t>(ctx.cfg, "seed", 0);
    ctx.cfg["seed"] = ctx.seed;
    ctx.threads = resolve_threads(common.threads);

    const std::vector<std::pair<CLI::App*, void (*)(Context&)>> table{
        {sim_ks, simulate_ks},        {sim_beta, simulate_beta},   {pretrain, pretrain_cmd},
        {finetune, finetune_cmd},     {rollout, rollout_cmd},      {ev_pdf, evaluate_pdf},
        {ev_psd, evaluate_psd},       {ev_events, evaluate_events}, {ev_horizon, evaluate_horizon},
        {ev_lyap, evaluate_lyapunov}};
    for (const auto& [sub, fn] : table) {
      if (!sub->parsed()) continue;
      ctx.command = sub->get_parent() == &app ? sub->get_name()
                                              : sub->get_parent()->get_name() + " " + sub->get_name();
      fn(ctx);
      return kExitOk;
    }
    err << "usage error: no subcommand\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
}

}  // namespace pdelab::cli
