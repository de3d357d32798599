#include <fstream>
#include <sstream>

#include <gtest/gtest.h>
#include <json.hpp>

#include "helpers.hpp"
#include "mirror/cli.hpp"

using mirror::cli::run;
using mirror::test::TempDir;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<std::string> synth_args(const std::filesystem::path& out) {
  return {"synth", "--out", out.string(), "--samples", "40", "--patches-min", "20", "--patches-max", "30", "--seed", "9"};
}

std::vector<std::string> tiny_model_args() {
  return {"--dim", "16", "--rna-dim", "8", "--heads", "2", "--depth", "1", "--retention-depth", "1",
          "--n-fixed", "16", "--rna-groups", "8", "--style-dim", "8", "--clusters", "4"};
}

std::vector<std::string> cat(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

}  // namespace

TEST(Cli, SynthIsReproducible) {
  TempDir dir("cli");
  ASSERT_EQ(run(synth_args(dir / "a")), 0);
  ASSERT_EQ(run(synth_args(dir / "b")), 0);
  int files = 0;
  for (const auto& e : std::filesystem::recursive_directory_iterator(dir / "a")) {
    if (!e.is_regular_file() || e.path().filename() == "resolved_config.json") continue;
    const auto rel = std::filesystem::relative(e.path(), dir / "a");
    EXPECT_EQ(slurp(e.path()), slurp(dir.path() / "b" / rel)) << rel;
    ++files;
  }
  EXPECT_GT(files, 40);
}

TEST(Cli, ConfigFileAndPrecedence) {
  TempDir dir("cli");
  std::ofstream(dir / "c.cfg") << "samples=30\nseed=4\npatches-min=20\npatches-max=30\n";
  ASSERT_EQ(run({"synth", "--config", (dir / "c.cfg").string(), "--out", (dir / "x").string(), "--seed", "5"}), 0);
  const auto j = nlohmann::json::parse(slurp(dir / "x" / "resolved_config.json"));
  EXPECT_EQ(j.at("options").at("samples").get<int>(), 30);
  EXPECT_EQ(j.at("options").at("seed").get<int>(), 5);

  std::ofstream(dir / "bad.cfg") << "sampels=30\n";
  EXPECT_EQ(run({"synth", "--config", (dir / "bad.cfg").string(), "--out", (dir / "y").string()}), 1);
  EXPECT_EQ(run({"synth", "--out", (dir / "y").string(), "--no-such-flag", "1"}), 1);
}

TEST(Cli, ResolvedConfigReproducesRun) {
  TempDir dir("cli");
  ASSERT_EQ(run(synth_args(dir / "a")), 0);
  ASSERT_EQ(run({"synth", "--config", (dir / "a" / "resolved_config.json").string(), "--out", (dir / "b").string()}), 0);
  EXPECT_EQ(slurp(dir / "a" / "manifest.json"), slurp(dir / "b" / "manifest.json"));
}

TEST(Cli, MissingInputExitsTwo) {
  TempDir dir("cli");
  EXPECT_EQ(run({"probe", "--checkpoint", (dir / "none.mirc").string(), "--data", (dir / "none").string(), "--out",
                 (dir / "o").string()}),
            2);
}

TEST(Cli, PretrainProbeSurvivalAndAttention) {
  TempDir dir("cli");
  ASSERT_EQ(run(synth_args(dir / "data")), 0);
  ASSERT_EQ(run(cat({"pretrain", "--data", (dir / "data").string(), "--out", (dir / "run").string(), "--epochs", "1",
                     "--batch", "8", "--seed", "1"},
                    tiny_model_args())),
            0);
  ASSERT_TRUE(std::filesystem::exists(dir / "run" / "checkpoint.mirc"));
  ASSERT_TRUE(std::filesystem::exists(dir / "run" / "train_log.csv"));
  const std::string ckpt = (dir / "run" / "checkpoint.mirc").string();

  ASSERT_EQ(run({"probe", "--checkpoint", ckpt, "--data", (dir / "data").string(), "--out", (dir / "surv").string(),
                 "--task", "survival", "--setting", "all"}),
            0);
  const auto j = nlohmann::json::parse(slurp(dir / "surv" / "metrics.json"));
  int per_fold = 0;
  for (const auto& m : j.at("metrics"))
    if (m.at("metric") == "c_index" && m.at("fold").get<int>() >= 0) ++per_fold;
  EXPECT_EQ(per_fold, 5);
  EXPECT_EQ(run({"probe", "--checkpoint", ckpt, "--data", (dir / "data").string(), "--out", (dir / "s2").string(),
                 "--task", "survival", "--setting", "10shot"}),
            1);

  ASSERT_EQ(run({"probe", "--checkpoint", ckpt, "--data", (dir / "data").string(), "--out", (dir / "sub").string(),
                 "--setting", "10shot", "--shots", "4", "--folds", "2"}),
            0);
  EXPECT_EQ(run({"report", "--metrics", (dir / "sub").string(), (dir / "surv").string()}), 0);

  const std::string id =
      nlohmann::json::parse(slurp(dir / "data" / "manifest.json")).at("sample_ids").at(3).get<std::string>();
  ASSERT_EQ(run({"attn", "--checkpoint", ckpt, "--data", (dir / "data").string(), "--slide-id", id, "--out",
                 (dir / "attn" / "a.csv").string()}),
            0);
  EXPECT_TRUE(std::filesystem::exists(dir / "attn" / "a.csv"));
}

TEST(Cli, GradcheckExitCode) {
  TempDir dir("cli");
  EXPECT_EQ(run(cat({"gradcheck", "--coords", "3", "--out", (dir / "g").string()}, tiny_model_args())), 0);
  const auto j = nlohmann::json::parse(slurp(dir / "g" / "gradcheck.json"));
  EXPECT_TRUE(j.at("passed").get<bool>());
}
