#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "cli.hpp"
#include "pdelab/emulator.hpp"
#include "pdelab/trajectory.hpp"

using namespace pdelab;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code = 0;
  std::string out, err;
};

Result invoke(std::vector<std::string> args) {
  std::vector<const char*> argv{"pdelab"};
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("pdelab_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  void make_ks(const std::string& name, double L, std::uint64_t seed) {
    const auto r = invoke({"simulate", "ks", "--L", std::to_string(L), "--snapshots", "120", "--warmup", "50",
                           "--seed", std::to_string(seed), "--out", path(name)});
    ASSERT_EQ(r.code, cli::kExitOk) << r.err;
  }

  Result pretrain(const std::string& out, const std::vector<std::string>& extra = {}) {
    std::vector<std::string> a{"pretrain", "--data",       path("ks.pdet"), "--blocks", "1",      "--channels",
                               "8",        "--epochs",     "2",             "--seed",   "7",      "--batch-size",
                               "16",       "--out",        path(out)};
    a.insert(a.end(), extra.begin(), extra.end());
    return invoke(a);
  }

  fs::path dir_;
};

}  // namespace

TEST(CliGrammar, HelpExitsZero) {
  for (const auto& args : std::vector<std::vector<std::string>>{
           {"--help"}, {"pretrain", "--help"}, {"evaluate", "pdf", "--help"}, {"--version"}}) {
    const auto r = invoke(args);
    EXPECT_EQ(r.code, cli::kExitOk);
    EXPECT_FALSE(r.out.empty());
  }
  EXPECT_NE(invoke({"--help"}).out.find("simulate"), std::string::npos);
}

TEST(CliGrammar, UsageErrorsExitTwo) {
  EXPECT_EQ(invoke({}).code, cli::kExitUsage);
  EXPECT_EQ(invoke({"simulate", "ks", "--bogus"}).code, cli::kExitUsage);
  EXPECT_EQ(invoke({"frobnicate"}).code, cli::kExitUsage);
  EXPECT_EQ(invoke({"pretrain", "--loss", "hinge"}).code, cli::kExitUsage);
  EXPECT_EQ(invoke({"rollout", "--cond", "1", "--L", "2"}).code, cli::kExitUsage);
  EXPECT_EQ(invoke({"pretrain", "--data", "x@notanumber"}).code, cli::kExitUsage);
}

TEST_F(Cli, RuntimeErrorsExitOne) {
  const auto r = invoke({"rollout", "--model", path("missing.npec"), "--init", path("missing.pdet"), "--out",
                         path("r.pdet")});
  EXPECT_EQ(r.code, cli::kExitFailure);
  EXPECT_NE(r.err.find("error:"), std::string::npos);
  EXPECT_EQ(invoke({"simulate", "ks", "--L", "-3", "--out", path("x.pdet")}).code, cli::kExitFailure);
  EXPECT_EQ(invoke({"simulate", "ks"}).code, cli::kExitFailure);  // no --out
}

TEST_F(Cli, SimulateWritesTrajectoryAndManifest) {
  make_ks("ks.pdet", 22.0, 1);
  const auto t = read_trajectory(path("ks.pdet"));
  EXPECT_EQ(t.n_frames(), 120u);
  EXPECT_EQ(t.frame_size(), 56u);
  const auto m = Json::parse(slurp(path("ks.pdet.manifest.json")));
  EXPECT_EQ(m.at("status"), "completed");
  EXPECT_EQ(m.at("command"), "simulate ks");
  EXPECT_EQ(m.at("config").at("ks").at("L"), 22.0);
  EXPECT_EQ(m.at("outputs").at(0).at("sha256"), cli::sha256_file(path("ks.pdet")));
  EXPECT_EQ(m.at("tool").at("name"), "pdelab");
}

TEST_F(Cli, FlagsOverrideConfigFile) {
  std::ofstream(path("cfg.json")) << R"({"seed": 3, "ks": {"L": 30, "n_snapshots": 10, "warmup_time": 5}})";
  ASSERT_EQ(invoke({"simulate", "ks", "--config", path("cfg.json"), "--L", "22", "--out", path("a.pdet")}).code, 0);
  const auto t = read_trajectory(path("a.pdet"));
  EXPECT_EQ(t.metadata.at("domain_length"), 22.0);
  EXPECT_EQ(t.n_frames(), 10u);
  EXPECT_EQ(t.metadata.at("seed"), 3);
}

TEST_F(Cli, DataConditioningComesFromHeaderOrSuffix) {
  make_ks("ks.pdet", 22.0, 1);
  ASSERT_EQ(pretrain("a.npec").code, 0);
  EXPECT_EQ(emu::load_checkpoint(path("a.npec")).metadata.at("pretrain").at("conditioning"), 22.0);
  std::vector<std::string> a{"pretrain", "--data", path("ks.pdet") + "@25", "--blocks", "1", "--channels", "8",
                             "--epochs", "1", "--out", path("b.npec")};
  ASSERT_EQ(invoke(a).code, 0);
  EXPECT_EQ(emu::load_checkpoint(path("b.npec")).metadata.at("pretrain").at("conditioning"), 25.0);
}

TEST_F(Cli, ManifestRerunReproducesOutputs) {
  make_ks("ks.pdet", 22.0, 1);
  ASSERT_EQ(pretrain("a.npec").code, 0);
  const auto r = invoke({"pretrain", "--config", path("a.npec.manifest.json"), "--out", path("b.npec")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(slurp(path("a.npec")), slurp(path("b.npec")));
  EXPECT_EQ(slurp(path("a.npec.metrics.csv")), slurp(path("b.npec.metrics.csv")));
}

TEST_F(Cli, ThreadCountDoesNotChangeResults) {
  make_ks("ks.pdet", 22.0, 1);
  ASSERT_EQ(pretrain("a.npec", {"--threads", "1"}).code, 0);
  ASSERT_EQ(pretrain("b.npec", {"--threads", "3"}).code, 0);
  EXPECT_EQ(slurp(path("a.npec")), slurp(path("b.npec")));
  EXPECT_EQ(slurp(path("a.npec.metrics.csv")), slurp(path("b.npec.metrics.csv")));
}

TEST_F(Cli, TrainRolloutEvaluatePipeline) {
  make_ks("ks.pdet", 22.0, 1);
  make_ks("ks26.pdet", 26.0, 2);
  ASSERT_EQ(pretrain("p.npec").code, 0);
  auto r = invoke({"finetune", "--checkpoint", path("p.npec"), "--data", path("ks.pdet"), "--data",
                   path("ks26.pdet"), "--epochs", "1", "--out", path("f.npec")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto f = emu::load_checkpoint(path("f.npec"));
  EXPECT_EQ(f.phase, emu::Phase::finetune);
  EXPECT_DOUBLE_EQ(f.metadata.at("finetune").at("lr").get<double>(), 5e-4 / 50);

  r = invoke({"rollout", "--model", path("f.npec"), "--init", path("ks26.pdet"), "--steps", "20", "--out",
              path("r.pdet")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto roll = read_trajectory(path("r.pdet"));
  EXPECT_EQ(roll.n_frames(), 20u);
  EXPECT_EQ(roll.metadata.at("conditioning"), 26.0);

  r = invoke({"evaluate", "pdf", "--truth", path("ks.pdet"), "--candidate", path("r.pdet"), "--bins", "10",
              "--out", path("ev")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("hellinger"), std::string::npos);
  for (const char* s : {".truth.pdet", ".candidate.pdet", ".marginal_truth.csv", ".summary.txt"})
    EXPECT_TRUE(fs::exists(path("ev") + s)) << s;

  r = invoke({"evaluate", "psd", "--truth", path("ks.pdet"), "--out", path("psd")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(path("psd.truth.csv")));

  r = invoke({"inspect", path("f.npec"), path("r.pdet")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("NPEC1"), std::string::npos);
  EXPECT_NE(r.out.find("PDET1"), std::string::npos);
}

TEST_F(Cli, InspectRejectsUnknownFiles) {
  std::ofstream(path("junk.bin")) << "hello world";
  EXPECT_EQ(invoke({"inspect", path("junk.bin")}).code, cli::kExitFailure);
}

TEST(CliHash, KnownDigest) {
  const auto p = fs::temp_directory_path() / "pdelab_sha_abc.txt";
  std::ofstream(p) << "abc";
  EXPECT_EQ(cli::sha256_file(p), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  fs::remove(p);
}
