#include <gtest/gtest.h>

#include "json.hpp"

#include "droppatch/checkpoint.hpp"
#include "droppatch/cli.hpp"
#include "test_util.hpp"

using namespace droppatch;
namespace fs = std::filesystem;
using Json = nlohmann::json;

namespace {

int run(std::vector<std::string> args) {
  args.insert(args.begin(), "droppatch");
  return cli::run(args);
}

// Shared small dataset and encoder, built once for the suite.
class CliTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = testutil::temp_dir("cli");
    ASSERT_EQ(run({"synth", "--kind", "sine-mix", "--length", "3000", "--channels", "2", "--seed", "5", "--out",
                   (root_ / "synth").string()}),
              0);
    ASSERT_EQ(pretrain_into("pre_a"), 0);
  }

  static int pretrain_into(const std::string& name) {
    return run({"pretrain", "--data", data(), "--model", "small", "--lookback", "96", "--epochs", "1",
                "--max-samples", "64", "--max-val-samples", "32", "--seed", "9", "--out", (root_ / name).string()});
  }

  static std::string data() { return (root_ / "synth" / "data.csv").string(); }
  static std::string encoder() { return (root_ / "pre_a" / "encoder").string(); }

  static inline fs::path root_;
};

}  // namespace

TEST_F(CliTest, SynthWritesCsvAndManifest) {
  const auto text = testutil::slurp(root_ / "synth" / "data.csv");
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 3001);
  auto m = Json::parse(testutil::slurp(root_ / "synth" / "manifest.json"));
  EXPECT_EQ(m["command"], "synth");
  bool listed = false;
  for (const auto& f : m["files"]) listed |= f["path"] == "data.csv";
  EXPECT_TRUE(listed);
}

TEST_F(CliTest, PretrainIsDeterministic) {
  ASSERT_EQ(pretrain_into("pre_b"), 0);
  for (auto name : {"encoder.bin", "encoder.manifest.json", "encoder.config.json", "loss_curve.csv"}) {
    const auto a = testutil::slurp(root_ / "pre_a" / name), b = testutil::slurp(root_ / "pre_b" / name);
    EXPECT_FALSE(a.empty()) << name;
    EXPECT_EQ(a, b) << name;
  }
  auto ca = Json::parse(testutil::slurp(root_ / "pre_a" / "config.json"));
  auto cb = Json::parse(testutil::slurp(root_ / "pre_b" / "config.json"));
  ca.erase("out");
  cb.erase("out");
  EXPECT_EQ(ca, cb);
}

TEST_F(CliTest, ResolvedConfigHasDefaults) {
  auto cfg = Json::parse(testutil::slurp(root_ / "pre_a" / "config.json"));
  EXPECT_DOUBLE_EQ(cfg["drop_ratio"].get<double>(), 0.6);
  EXPECT_DOUBLE_EQ(cfg["mask_ratio"].get<double>(), 0.4);
  EXPECT_EQ(cfg["lookback"], 96);
  EXPECT_EQ(cfg["model"], "small");
}

TEST_F(CliTest, ConfigFileAndOverrides) {
  auto dir = testutil::temp_dir("cli_cfg");
  ckpt::write_text(dir / "c.json", R"({"kind": "ar1", "length": 200, "channels": 1})");
  ASSERT_EQ(run({"synth", "--config", (dir / "c.json").string(), "--length", "150", "--out", (dir / "o").string()}), 0);
  auto cfg = Json::parse(testutil::slurp(dir / "o" / "config.json"));
  EXPECT_EQ(cfg["kind"], "ar1");
  EXPECT_EQ(cfg["length"], 150);

  ckpt::write_text(dir / "bad.json", R"({"kind": "ar1", "lenght": 200})");
  EXPECT_EQ(run({"synth", "--config", (dir / "bad.json").string(), "--out", (dir / "p").string()}), 2);
  ckpt::write_text(dir / "val.json", R"({"kind": "ar1", "length": "long"})");
  EXPECT_EQ(run({"synth", "--config", (dir / "val.json").string(), "--out", (dir / "q").string()}), 2);
}

TEST_F(CliTest, ExitCodes) {
  const auto out = (root_ / "err").string();
  EXPECT_EQ(run({"synth", "--kind", "noise", "--out", out}), 2);
  EXPECT_EQ(run({"synth", "--bogus", "--out", out}), 2);
  EXPECT_EQ(run({}), 2);
  EXPECT_EQ(run({"pretrain", "--data", "/nonexistent/x.csv", "--out", out}), 3);
  EXPECT_EQ(run({"pretrain", "--data", data(), "--mask-ratio", "1.0", "--out", out}), 2);
  EXPECT_EQ(run({"pretrain", "--data", data(), "--lookback", "96", "--drop-ratio", "0.9", "--out", out}), 2);
  EXPECT_EQ(run({"ranktheory", "flatness", "--L", "10", "--Lp", "20", "--out", out}), 2);
  EXPECT_EQ(run({"fewshot", "--data", data(), "--checkpoint", encoder(), "--n", "100000", "--horizons", "24",
                 "--out", out}),
            3);
}

TEST_F(CliTest, ColdstartAndEval) {
  const auto out = root_ / "cold";
  ASSERT_EQ(run({"coldstart", "--data", data(), "--checkpoint", encoder(), "--horizons", "24", "--epochs", "1",
                 "--stride", "16", "--eval-stride", "16", "--out", out.string()}),
            0);
  auto fc = ckpt::load_forecaster(out / "forecaster_h24");
  EXPECT_EQ(fc.n_patches(), 8u);
  EXPECT_EQ(fc.horizon(), 24u);
  const auto eval = testutil::slurp(out / "eval.csv");
  EXPECT_EQ(eval.substr(0, 15), "horizon,mse,mae");
  EXPECT_NE(eval.find("\navg,"), std::string::npos);

  ASSERT_EQ(run({"eval", "--data", data(), "--checkpoint", (out / "forecaster_h24").string(), "--stride", "16",
                 "--out", (root_ / "ev").string()}),
            0);
  EXPECT_EQ(testutil::slurp(root_ / "ev" / "eval.csv"), eval);
}

TEST_F(CliTest, EvalFollowsCheckpointInstanceNorm) {
  const auto out = root_ / "cold_in";
  ASSERT_EQ(run({"coldstart", "--data", data(), "--checkpoint", encoder(), "--horizons", "24", "--epochs", "1",
                 "--stride", "16", "--eval-stride", "16", "--instance-norm", "--out", out.string()}),
            0);
  auto rc = Json::parse(testutil::slurp(out / "forecaster_h24.config.json"));
  EXPECT_TRUE(rc["run"]["finetune"]["instance_norm"].get<bool>());
  ASSERT_EQ(run({"eval", "--data", data(), "--checkpoint", (out / "forecaster_h24").string(), "--stride", "16",
                 "--out", (root_ / "ev_in").string()}),
            0);
  EXPECT_EQ(testutil::slurp(root_ / "ev_in" / "eval.csv"), testutil::slurp(out / "eval.csv"));
}

TEST_F(CliTest, FewshotUsesRequestedSamples) {
  const auto out = root_ / "few";
  testing::internal::CaptureStderr();
  const int code = run({"fewshot", "--data", data(), "--checkpoint", encoder(), "--horizons", "24", "--epochs", "1",
                        "--n", "100", "--eval-stride", "16", "--out", out.string()});
  const std::string log = testing::internal::GetCapturedStderr();
  ASSERT_EQ(code, 0) << log;
  EXPECT_NE(log.find("100 training samples"), std::string::npos) << log;
}

TEST_F(CliTest, DiagnoseWritesReports) {
  const auto out = root_ / "diag";
  ASSERT_EQ(run({"diagnose", "--checkpoint", encoder(), "--probe", data(), "--max-samples", "8", "--out",
                 out.string()}),
            0);
  for (auto name : {"head_stats.csv", "head_kl_layer0.csv", "rank_trace.csv", "cka.json"}) {
    EXPECT_TRUE(fs::exists(out / name)) << name;
  }
  EXPECT_EQ(run({"diagnose", "--out", out.string()}), 2);
}

TEST_F(CliTest, RankTheoryCommands) {
  const auto out = root_ / "rk";
  ASSERT_EQ(run({"ranktheory", "bound", "--out", (out / "b").string()}), 0);
  auto b = Json::parse(testutil::slurp(out / "b" / "bound.json"));
  EXPECT_TRUE(b["convergent"].get<bool>());
  EXPECT_NEAR(b["bounds"][0].get<double>(), 0.256, 1e-12);

  ASSERT_EQ(run({"ranktheory", "flatness", "--seeds", "10", "--out", (out / "f").string()}), 0);
  auto f = Json::parse(testutil::slurp(out / "f" / "flatness.json"));
  EXPECT_NEAR(f["mean"]["row_gap_ratio"].get<double>(), 2.5, 0.25);

  ASSERT_EQ(run({"ranktheory", "witness", "--seeds", "5", "--out", (out / "w").string()}), 0);
  EXPECT_EQ(run({"ranktheory", "witness", "--gamma", "1.0", "--out", (out / "w2").string()}), 2);
}
