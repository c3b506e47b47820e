#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "mlab/analysis.hpp"
#include "mlab/checkpoint.hpp"

namespace fs = std::filesystem;

namespace {

struct CliRun {
  int code;
  std::string out;
};

CliRun run(const std::string& args) {
  const std::string cmd = std::string(MLAB_CLI_PATH) + " " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  std::string out;
  std::array<char, 4096> buf{};
  while (std::fgets(buf.data(), buf.size(), pipe)) out += buf.data();
  const int status = pclose(pipe);
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::size_t line_count(const fs::path& p) {
  std::ifstream is(p);
  std::size_t n = 0;
  for (std::string line; std::getline(is, line);) ++n;
  return n;
}

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = fs::temp_directory_path() / "mlab_cli_test";
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    std::ofstream(dir_ / "small.cfg") << "# tiny run\n"
                                         "iterations = 4\n"
                                         "log_every = 2\n"
                                         "inner_steps = 2\n"
                                         "val_episodes = 2\n"
                                         "protocol_iterations = 100\n";
  }
  static void TearDownTestSuite() { fs::remove_all(dir_); }

  static std::string cfg() { return "--config " + (dir_ / "small.cfg").string(); }
  static std::string at(const std::string& name) { return (dir_ / name).string(); }

  static fs::path dir_;
};

fs::path Cli::dir_;

}  // namespace

TEST_F(Cli, TrainWritesCheckpointLogAndProvenance) {
  const CliRun r = run("train " + cfg() + " --mode maml --seed 3 --out " + at("maml"));
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_TRUE(fs::exists(dir_ / "maml" / "checkpoint.mlab"));
  EXPECT_EQ(line_count(dir_ / "maml" / "train_log.csv"), 1u + 4 / 2);
  EXPECT_EQ(slurp(dir_ / "maml" / "train_log.csv").substr(0, 52),
            "iteration,meta_loss,val_accuracy,alpha_frac_negative");
  EXPECT_NE(slurp(dir_ / "maml" / "VERSION").find("seed 3"), std::string::npos);
  EXPECT_NE(slurp(dir_ / "maml" / "config.cfg").find("seed = 3"), std::string::npos);
  const auto ck = mlab::load_checkpoint(dir_ / "maml" / "checkpoint.mlab");
  EXPECT_FALSE(ck.alpha.has_value());
}

TEST_F(Cli, TrainIsByteIdenticalAndReproducibleFromResolvedConfig) {
  ASSERT_EQ(run("train " + cfg() + " --mode meta-sgd --out " + at("a")).code, 0);
  ASSERT_EQ(run("train " + cfg() + " --mode meta-sgd --out " + at("b")).code, 0);
  ASSERT_EQ(run("train --config " + at("a/config.cfg") + " --out " + at("c")).code, 0);
  const std::string a = slurp(dir_ / "a" / "checkpoint.mlab");
  EXPECT_EQ(a, slurp(dir_ / "b" / "checkpoint.mlab"));
  EXPECT_EQ(a, slurp(dir_ / "c" / "checkpoint.mlab"));
  EXPECT_NE(a.find("alpha.conv1.weight"), std::string::npos);
}

TEST_F(Cli, FirstOrderFlagIsRecorded) {
  ASSERT_EQ(run("train " + cfg() + " --first-order --out " + at("fo")).code, 0);
  EXPECT_NE(slurp(dir_ / "fo" / "config.cfg").find("first_order = true"), std::string::npos);
}

TEST_F(Cli, EvalProtocolRowsAndWorkerInvariance) {
  ASSERT_EQ(run("train " + cfg() + " --mode meta-sgd --out " + at("m")).code, 0);
  const std::string ck = "--checkpoint " + at("m/checkpoint.mlab");
  const CliRun r1 = run("eval-protocol " + cfg() + " " + ck + " --out " + at("p1"));
  ASSERT_EQ(r1.code, 0) << r1.out;
  ASSERT_EQ(run("eval-protocol " + cfg() + " " + ck + " --workers 4 --out " + at("p4")).code, 0);
  EXPECT_EQ(line_count(dir_ / "p1" / "records.csv"), 301u);
  EXPECT_EQ(slurp(dir_ / "p1" / "records.csv"), slurp(dir_ / "p4" / "records.csv"));
  EXPECT_TRUE(fs::exists(dir_ / "p1" / "config.cfg"));
}

TEST_F(Cli, EvalProtocolMissingCheckpointLeavesNoCsv) {
  const CliRun r = run("eval-protocol " + cfg() + " --checkpoint " + at("nope.mlab") + " --out " +
                    at("bad"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("nope.mlab"), std::string::npos);
  EXPECT_FALSE(fs::exists(dir_ / "bad" / "records.csv"));
  EXPECT_FALSE(fs::exists(dir_ / "bad" / "records.csv.partial"));
}

TEST_F(Cli, ReportLearningRateTable) {
  ASSERT_EQ(run("train " + cfg() + " --mode meta-sgd --out " + at("r")).code, 0);
  const CliRun r = run("report --checkpoint " + at("r/checkpoint.mlab") + " --out " + at("rep"));
  ASSERT_EQ(r.code, 0) << r.out;
  for (const char* layer : {"conv1", "conv2", "conv3", "conv4", "logits"}) {
    EXPECT_NE(r.out.find(layer), std::string::npos) << layer;
  }
  EXPECT_EQ(line_count(dir_ / "rep" / "lr_stats.csv"), 6u);
}

TEST_F(Cli, ReportComparesTwoModels) {
  ASSERT_EQ(run("train " + cfg() + " --mode maml --out " + at("x1")).code, 0);
  ASSERT_EQ(run("train " + cfg() + " --mode meta-sgd --out " + at("x2")).code, 0);
  ASSERT_EQ(run("eval-protocol " + cfg() + " --checkpoint " + at("x1/checkpoint.mlab") +
                " --out " + at("e1")).code, 0);
  ASSERT_EQ(run("eval-protocol " + cfg() + " --checkpoint " + at("x2/checkpoint.mlab") +
                " --out " + at("e2")).code, 0);
  const CliRun r = run("report --records " + at("e1/records.csv") + " " + at("e2/records.csv") +
                    " --out " + at("cmp"));
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("Welch maml vs meta-sgd"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("off-on"), std::string::npos);
  EXPECT_TRUE(fs::exists(dir_ / "cmp" / "comparison.csv"));
  EXPECT_TRUE(fs::exists(dir_ / "cmp" / "accuracy.csv"));
}

TEST_F(Cli, ReportEmptyCsvSaysNoRecords) {
  std::ofstream(dir_ / "empty.csv") << mlab::kRecordsHeader << '\n';
  const CliRun r = run("report --records " + at("empty.csv"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("no records"), std::string::npos) << r.out;
}

TEST_F(Cli, GradcheckPassesAndCatchesCorruption) {
  const CliRun ok = run("gradcheck");
  EXPECT_EQ(ok.code, 0) << ok.out;
  EXPECT_NE(ok.out.find("d/dalpha"), std::string::npos);
  EXPECT_EQ(ok.out.find("FAIL"), std::string::npos);
  const CliRun bad = run("gradcheck --corrupt-op maxpool2x2");
  EXPECT_EQ(bad.code, 2);
  EXPECT_NE(bad.out.find("FAIL maxpool2x2"), std::string::npos) << bad.out;
}

TEST_F(Cli, UsageErrorsExitOne) {
  EXPECT_EQ(run("").code, 1);
  EXPECT_EQ(run("fly").code, 1);
  EXPECT_EQ(run("train --mode reptile").code, 1);
  EXPECT_EQ(run("eval-protocol").code, 1);
  EXPECT_EQ(run("gradcheck --corrupt-op nosuch").code, 1);
  std::ofstream(dir_ / "bad.cfg") << "colour = blue\n";
  const CliRun r = run("train --config " + at("bad.cfg"));
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.out.find("colour"), std::string::npos);
  EXPECT_EQ(run("--version").code, 0);
}

TEST_F(Cli, MakeDatasetFeedsTraining) {
  ASSERT_EQ(run("make-dataset " + cfg() + " --per-class 12 --out " + at("ds")).code, 0);
  EXPECT_TRUE(fs::exists(dir_ / "ds" / "classes.txt"));
  std::ofstream(dir_ / "ds.cfg") << "iterations = 2\nlog_every = 1\ninner_steps = 1\n"
                                    "val_episodes = 1\nq_query = 5\ntask = dataset\n"
                                    "dataset_path = " << at("ds") << "\n";
  const CliRun r = run("train --config " + at("ds.cfg") + " --out " + at("dst"));
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(line_count(dir_ / "dst" / "train_log.csv"), 3u);
}
