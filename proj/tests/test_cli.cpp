#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "meranet/cli.hpp"
#include "meranet/synthetic.hpp"

using namespace meranet;

namespace {

struct Run {
  int rc;
  std::string out, err;
};

Run run(std::vector<std::string> args) {
  args.insert(args.begin(), "meranet");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int rc = run_cli(int(argv.size()), argv.data(), out, err);
  return {rc, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("meranet_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

bool contains(const std::string& hay, const std::string& needle) {
  return hay.find(needle) != std::string::npos;
}

}  // namespace

TEST(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(run({}).rc, 2);
  EXPECT_EQ(run({"frobnicate"}).rc, 2);
  const auto r = run({"shapes", "--bogus"});
  EXPECT_EQ(r.rc, 2);
  EXPECT_TRUE(r.out.empty()) << r.out;
  EXPECT_TRUE(contains(r.err, "--bogus"));
  EXPECT_TRUE(contains(r.err, "Usage"));
  EXPECT_EQ(run({"train"}).rc, 2);  // --data is required
  EXPECT_EQ(run({"shapes", "--st-kernel", "4"}).rc, 2);
  EXPECT_EQ(run({"params", "--variant", "vgg"}).rc, 2);
}

TEST(Cli, HelpExitsZero) {
  const auto r = run({"--help"});
  EXPECT_EQ(r.rc, 0);
  for (const char* sub : {"train", "eval", "preprocess", "params", "shapes", "gradcheck", "saliency"})
    EXPECT_TRUE(contains(r.out, sub)) << sub;
}

TEST(Cli, ShapesTable) {
  const auto r = run({"shapes", "--t", "16"});
  ASSERT_EQ(r.rc, 0) << r.err;
  for (const char* s : {"64x16x56x56", "128x8x28x28", "256x4x14x14", "512x2x7x7", "512x1x1x1"})
    EXPECT_TRUE(contains(r.out, s)) << s;
  EXPECT_TRUE(contains(r.out, "effective config"));
}

TEST(Cli, ParamsReport) {
  const auto r = run({"params", "--variant", "meranet18"});
  ASSERT_EQ(r.rc, 0) << r.err;
  EXPECT_TRUE(contains(r.out, "33,167,811"));
  EXPECT_TRUE(contains(r.out, "33,258,899"));
  EXPECT_TRUE(contains(r.out, "published 33,547,552"));
  EXPECT_TRUE(contains(r.out, "counted 91,088   closed form 91,088   difference +0"));
}

TEST(Cli, ConfigFileAndFlagPrecedence) {
  const auto dir = scratch("cli_cfg");
  std::ofstream(dir / "c.json") << R"({"st_kernel": 3, "reduction": 8})";
  auto r = run({"shapes", "--config", (dir / "c.json").string(), "--st-kernel", "7"});
  ASSERT_EQ(r.rc, 0) << r.err;
  EXPECT_TRUE(contains(r.out, "\"st_kernel\": 7"));
  EXPECT_TRUE(contains(r.out, "\"reduction\": 8"));

  std::ofstream(dir / "bad.json") << R"({"st_kernal": 3})";
  r = run({"shapes", "--config", (dir / "bad.json").string()});
  EXPECT_EQ(r.rc, 2);
  EXPECT_TRUE(contains(r.err, "st_kernal"));
  EXPECT_EQ(run({"shapes", "--config", (dir / "missing.json").string()}).rc, 2);
}

TEST(Cli, EndToEndPipeline) {
  const auto dir = scratch("cli_e2e");
  SynthOptions so;
  so.clips_per_class = 3;
  so.val_per_class = 1;
  so.frames = 6;
  so.size = 24;
  generate_synthetic(dir / "raw", so);
  const std::vector<std::string> model{"--channels", "4,4,4,4,4,4,4,4", "--reduction", "4",
                                       "--st-kernel", "3"};

  auto r = run({"preprocess", "--data", (dir / "raw").string(), "--out", (dir / "prep").string(),
                "--t", "4", "--size", "16"});
  ASSERT_EQ(r.rc, 0) << r.err;

  std::vector<std::string> train{"train", "--data", (dir / "prep").string(), "--out",
                                 (dir / "run").string(), "--epochs", "2", "--batch", "3"};
  train.insert(train.end(), model.begin(), model.end());
  r = run(train);
  ASSERT_EQ(r.rc, 0) << r.err;
  EXPECT_TRUE(contains(r.out, "final train_acc"));
  EXPECT_TRUE(fs::exists(dir / "run" / "metrics.csv"));
  EXPECT_TRUE(fs::exists(dir / "run" / "config.json"));

  const auto ck = (dir / "run" / "checkpoints" / "final").string();
  r = run({"eval", "--data", (dir / "prep").string(), "--checkpoint", ck, "--split", "val"});
  ASSERT_EQ(r.rc, 0) << r.err;
  EXPECT_TRUE(contains(r.out, "val accuracy"));
  EXPECT_TRUE(fs::exists(fs::path(ck) / "eval_val.json"));

  r = run({"saliency", "--data", (dir / "prep").string(), "--checkpoint", ck, "--split", "val",
           "--class", "1", "--frame", "2", "--out", (dir / "sal").string()});
  ASSERT_EQ(r.rc, 0) << r.err;
  std::size_t pgms = 0;
  for (const auto& e : fs::directory_iterator(dir / "sal")) pgms += e.path().extension() == ".pgm";
  EXPECT_EQ(pgms, 1u);

  r = run({"saliency", "--data", (dir / "prep").string(), "--checkpoint", ck, "--layer",
           "nowhere", "--out", (dir / "sal").string()});
  EXPECT_NE(r.rc, 0);
  EXPECT_TRUE(contains(r.err, "nowhere"));
}
