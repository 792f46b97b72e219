#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "scenemixer/cli.hpp"
#include "scenemixer/data.hpp"

namespace scenemixer {
namespace {

namespace fs = std::filesystem;

struct CliResult {
  int code;
  std::string out;
  std::string err;
};

CliResult run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "scenemixer");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

TEST(Cli, HelpExitsZeroEverywhere) {
  EXPECT_EQ(run_cli({"--help"}).code, 0);
  for (const char* sub : {"analyze", "synth", "split", "train", "eval", "predict"}) {
    const auto r = run_cli({sub, "--help"});
    EXPECT_EQ(r.code, 0) << sub;
    EXPECT_NE(r.out.find("Usage"), std::string::npos) << sub;
  }
}

TEST(Cli, UsageErrorsExitOne) {
  EXPECT_EQ(run_cli({"analyze", "--bogus"}).code, 1);
  EXPECT_EQ(run_cli({"frobnicate"}).code, 1);
  EXPECT_EQ(run_cli({"train"}).code, 1);  // missing required options
  EXPECT_EQ(run_cli({}).code, 1);
}

TEST(Cli, AnalyzeReportsPublishedMacs) {
  const auto r = run_cli({"analyze"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("22,807,808"), std::string::npos);
  EXPECT_NE(r.out.find("46,041,610"), std::string::npos);
  EXPECT_NE(r.out.find("100,117"), std::string::npos);
  // Resolved configuration is echoed before the report.
  EXPECT_LT(r.out.find("embed_dim=128"), r.out.find("22,807,808"));

  const auto macs_only = run_cli({"analyze", "--no-bias-flops"});
  EXPECT_NE(macs_only.out.find("45,615,616"), std::string::npos);
}

class CliPipelineTest : public ::testing::Test {
 protected:
  fs::path dir = fs::temp_directory_path() / "scenemixer_cli_test";
  void SetUp() override {
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  void TearDown() override { fs::remove_all(dir); }
  std::string p(const std::string& name) const { return (dir / name).string(); }
};

TEST_F(CliPipelineTest, SynthSplitTrainEvalPredict) {
  {
    std::ofstream cfg(dir / "small.cfg");
    cfg << "input=16x16x3\npatch=4\nembed_dim=8\ndepth=1\nkernels=3,5\nnum_classes=3\n";
  }
  ASSERT_EQ(run_cli({"synth", "--out", p("data"), "--classes", "3", "--per-class", "12", "--side", "16"}).code, 0);
  EXPECT_TRUE(fs::is_directory(dir / "data" / "checkerboard"));

  const auto split = run_cli({"split", "--data", p("data"), "--out", p("split.csv")});
  ASSERT_EQ(split.code, 0) << split.err;
  const auto manifest = slurp(dir / "split.csv");
  EXPECT_EQ(manifest.rfind("path,class,split\n", 0), 0u);

  const auto train = run_cli({"train", "--data", p("data"), "--config", p("small.cfg"), "--manifest", p("split.csv"),
                              "--epochs", "2", "--batch", "8", "--out", p("m.smx"), "--history", p("h.csv")});
  ASSERT_EQ(train.code, 0) << train.err;
  EXPECT_TRUE(fs::exists(dir / "m.smx"));
  EXPECT_NE(slurp(dir / "h.csv").find("epoch,train_loss"), std::string::npos);

  const auto eval = run_cli({"eval", "--model", p("m.smx"), "--data", p("data"), "--manifest", p("split.csv"),
                             "--split", "test", "--confusion", p("cm.csv"), "--metrics", p("metrics.csv")});
  ASSERT_EQ(eval.code, 0) << eval.err;
  EXPECT_NE(eval.out.find("kappa_x100"), std::string::npos);
  EXPECT_EQ(slurp(dir / "metrics.csv").rfind("metric,value\n", 0), 0u);
  EXPECT_FALSE(slurp(dir / "cm.csv").empty());

  const auto image = (dir / "data" / "checkerboard" / "checkerboard_00000.ppm").string();
  const auto pred = run_cli({"predict", "--model", p("m.smx"), "--image", image});
  ASSERT_EQ(pred.code, 0) << pred.err;
  bool named = false;
  for (const char* name : {"checkerboard", "horizontal_stripes", "radial_gradient"}) named |= pred.out.find(name) != std::string::npos;
  EXPECT_TRUE(named) << pred.out;
}

TEST_F(CliPipelineTest, RuntimeFailuresExitTwo) {
  fs::create_directories(dir / "empty");
  const auto r = run_cli({"split", "--data", p("empty"), "--out", p("x.csv")});
  EXPECT_EQ(r.code, 2);
  EXPECT_FALSE(r.err.empty());

  {
    std::ofstream bad(dir / "bad.cfg");
    bad << "depth=0\n";
  }
  EXPECT_NE(run_cli({"analyze", "--config", p("bad.cfg")}).code, 0);
}

}  // namespace
}  // namespace scenemixer
