#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

#ifndef D2AM_CLI_PATH
#error "D2AM_CLI_PATH must point at the d2am executable"
#endif

namespace {

// One scratch directory per test, so ctest may run them in parallel.
const fs::path& work() {
  static const fs::path dir = [] {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    auto d = fs::temp_directory_path() / "d2am_cli_test" / info->name();
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

struct Result {
  int code = -1;
  std::string output;
};

Result run(const std::string& args) {
  const auto log = work() / "last_output.txt";
  const std::string cmd = "cd '" + work().string() + "' && '" + D2AM_CLI_PATH + "' " + args + " > '" +
                          log.string() + "' 2>&1";
  const int status = std::system(cmd.c_str());
  Result r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(log);
  std::stringstream ss;
  ss << in.rdbuf();
  r.output = ss.str();
  return r;
}

json read_json(const fs::path& p) {
  json j;
  std::ifstream(p) >> j;
  return j;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Small data, default hyperparameters.
const char* kSmallData = "--samples-per-domain 40 --held-out 20";

}  // namespace

TEST(Cli, SynthTrainEvalPipeline) {
  auto r = run(std::string("synth --out data --seed 1 ") + kSmallData);
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_EQ(read_json(work() / "data" / "manifest.json")["command"], "synth");

  r = run("train --data data --out run");
  ASSERT_EQ(r.code, 0) << r.output;
  const auto man = read_json(work() / "run" / "manifest.json");
  EXPECT_EQ(man["command"], "train");
  EXPECT_EQ(man["hyper"]["epochs"], "20");
  EXPECT_TRUE(man.contains("version"));
  EXPECT_TRUE(fs::exists(work() / "run" / "train_log.csv"));
  EXPECT_TRUE(fs::exists(work() / "run" / "checkpoints" / "epoch_020" / "manifest.json"));
  EXPECT_TRUE(fs::exists(work() / "run" / "checkpoints" / "final" / "manifest.json"));

  r = run("eval --ckpt run/checkpoints/final --data data --out ev");
  ASSERT_EQ(r.code, 0) << r.output;
  const auto m = read_json(work() / "ev" / "metrics.json");
  for (const char* key : {"auc", "hter", "eer_threshold"}) EXPECT_TRUE(m.contains(key)) << key;
  EXPECT_EQ(slurp(work() / "ev" / "metrics.json"), slurp(work() / "run" / "metrics.json"));
  EXPECT_TRUE(fs::exists(work() / "ev" / "roc.csv"));
  EXPECT_EQ(read_json(work() / "ev" / "manifest.json")["threshold_source"], "checkpoint");
}

TEST(Cli, SameSeedRunsMatchBitwise) {
  ASSERT_EQ(run(std::string("synth --out det_data --seed 2 --image-size 16 ") + kSmallData).code, 0);
  for (const char* out : {"det_a", "det_b"})
    ASSERT_EQ(run(std::string("train --data det_data --set epochs=3 --seed 4 --out ") + out).code, 0);
  EXPECT_EQ(slurp(work() / "det_a" / "metrics.json"), slurp(work() / "det_b" / "metrics.json"));
  for (const auto& e : fs::directory_iterator(work() / "det_a" / "checkpoints" / "final"))
    EXPECT_EQ(slurp(e.path()), slurp(work() / "det_b" / "checkpoints" / "final" / e.path().filename()));
}

TEST(Cli, AblateRundirCarriesVariantTag) {
  const auto r = run(std::string("ablate --variant wo_mmd --image-size 16 --set epochs=1 --seed 7 --out abl ") + kSmallData);
  ASSERT_EQ(r.code, 0) << r.output;
  bool found = false;
  for (const auto& e : fs::directory_iterator(work() / "abl")) {
    if (e.path().filename().string().find("wo_mmd") == std::string::npos) continue;
    found = true;
    const auto man = read_json(e.path() / "manifest.json");
    EXPECT_EQ(man["variant"], "wo_mmd");
    EXPECT_EQ(man["hyper"]["lambda_m"], "0");
    EXPECT_TRUE(fs::exists(e.path() / "metrics.json"));
  }
  EXPECT_TRUE(found);
}

TEST(Cli, AnalyzeWritesReports) {
  ASSERT_EQ(run(std::string("synth --out an_data --seed 3 --image-size 16 ") + kSmallData).code, 0);
  ASSERT_EQ(run("train --data an_data --set epochs=2 --out an_run").code, 0);
  auto r = run("analyze clusters --run an_run");
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_EQ(read_json(work() / "an_run" / "clusters_summary.json")["epochs"], 2);

  r = run("analyze export-df --data an_data --out an_df");
  ASSERT_EQ(r.code, 0) << r.output;
  std::ifstream df(work() / "an_df" / "df.csv");
  std::string header;
  std::getline(df, header);
  EXPECT_EQ(header.rfind("sample_id,label,latent_domain,held_out,f0", 0), 0u);
  EXPECT_TRUE(fs::exists(work() / "an_df" / "manifest.json"));

  r = run("analyze mmd-report --data an_data --ckpt an_run/checkpoints/final --labels an_run/cluster_labels.csv "
          "--out an_mmd");
  ASSERT_EQ(r.code, 0) << r.output;
  const auto rep = read_json(work() / "an_mmd" / "mmd_report.json");
  EXPECT_TRUE(rep.contains("ground_truth"));
  EXPECT_TRUE(rep.contains("pseudo"));
  EXPECT_EQ(rep["ground_truth"]["domains"].size(), 3u);
}

TEST(Cli, BadInputGivesUsageAndNonzeroExit) {
  auto r = run("train --no-such-flag --out x");
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.output.find("Usage"), std::string::npos) << r.output;

  r = run("frobnicate");
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.output.find("Usage"), std::string::npos) << r.output;

  r = run("ablate --variant w/o_d --out bad");
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.output.find("unknown variant"), std::string::npos) << r.output;

  r = run("train --set learning_rate=1 --out bad");
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.output.find("learning_rate"), std::string::npos) << r.output;
}
