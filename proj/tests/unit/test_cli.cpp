#include "test_support.hpp"

#include <gtest/gtest.h>
#include "json.hpp"

#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>
#include <sys/wait.h>

namespace {

namespace fs = std::filesystem;
using nlohmann::json;
using mnarrl::testing::TempDir;

const fs::path kSmoke = fs::path(MNARRL_SOURCE_DIR) / "configs" / "smoke.json";

struct Result {
  int code = -1;
  std::string out;
};

// Runs the CLI with the given arguments, capturing stdout and the exit status.
Result run(const std::string& args, const fs::path& scratch, const std::string& env = "") {
  const fs::path log = scratch / "stdout.txt";
  const std::string cmd = env + " '" + std::string(MNARRL_CLI_PATH) + "' " + args + " > '" + log.string() +
                          "' 2> '" + (scratch / "stderr.txt").string() + "'";
  const int status = std::system(cmd.c_str());
  Result r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(log);
  std::stringstream ss;
  ss << in.rdbuf();
  r.out = ss.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

TEST(Cli, UsageErrorsExitTwo) {
  TempDir dir("cli_usage");
  EXPECT_EQ(run("", dir.path()).code, 2);
  EXPECT_EQ(run("generate", dir.path()).code, 2);
  EXPECT_EQ(run("frobnicate", dir.path()).code, 2);
  EXPECT_EQ(run("generate --config " + q(dir.path() / "absent.json"), dir.path()).code, 2);
  std::ofstream(dir.path() / "bad.json") << R"({"model": {"hiddne": 4}})";
  EXPECT_EQ(run("generate --config " + q(dir.path() / "bad.json") + " --out " + q(dir.path() / "c"), dir.path()).code,
            2);
  EXPECT_FALSE(fs::exists(dir.path() / "c"));
  EXPECT_EQ(run("generate --config " + q(kSmoke) + " --n-episodes 0 --out " + q(dir.path() / "c"), dir.path()).code,
            2);
}

TEST(Cli, DataErrorsExitThree) {
  TempDir dir("cli_data");
  EXPECT_EQ(run("train --config " + q(kSmoke) + " --cohort " + q(dir.path() / "nowhere") + " --out " +
                    q(dir.path() / "t"),
                dir.path())
                .code,
            3);
  EXPECT_EQ(run("report --input " + q(dir.path() / "nothing.jsonl") + " --out " + q(dir.path() / "r"), dir.path())
                .code,
            3);
  const auto c = dir.path() / "c";
  ASSERT_EQ(run("generate --config " + q(kSmoke) + " --out " + q(c), dir.path()).code, 0);
  std::ofstream(dir.path() / "junk.ckpt") << "not a checkpoint";
  EXPECT_EQ(run("evaluate --config " + q(kSmoke) + " --cohort " + q(c) + " --checkpoint " +
                    q(dir.path() / "junk.ckpt") + " --out " + q(dir.path() / "e"),
                dir.path())
                .code,
            3);
}

TEST(Cli, GenerateIsDeterministic) {
  TempDir dir("cli_det");
  const auto a = dir.path() / "a";
  const auto b = dir.path() / "b";
  const auto c = dir.path() / "c";
  ASSERT_EQ(run("generate --config " + q(kSmoke) + " --out " + q(a), dir.path()).code, 0);
  ASSERT_EQ(run("generate --config " + q(kSmoke) + " --out " + q(b), dir.path()).code, 0);
  ASSERT_EQ(run("generate --config " + q(kSmoke) + " --seed 8 --out " + q(c), dir.path()).code, 0);
  for (const char* f : {"episodes.bin", "manifest.json"}) {
    ASSERT_TRUE(fs::exists(a / f)) << f;
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  }
  EXPECT_NE(slurp(a / "episodes.bin"), slurp(c / "episodes.bin"));
}

TEST(Cli, OutputRootFromEnvironment) {
  TempDir dir("cli_env");
  const auto root = dir.path() / "root";
  ASSERT_EQ(run("generate --config " + q(kSmoke), dir.path(), "MNARRL_OUTPUT_ROOT=" + q(root)).code, 0);
  EXPECT_TRUE(fs::exists(root / "cohort" / "episodes.bin"));
  EXPECT_TRUE(fs::exists(root / "cohort" / "run_manifest.json"));
}

TEST(Cli, SmokePipeline) {
  TempDir dir("cli_smoke");
  const auto c = dir.path() / "cohort";
  const auto t = dir.path() / "train";
  const auto e = dir.path() / "eval";
  const auto a = dir.path() / "ablate";
  const auto r = dir.path() / "report";
  const auto cfg = q(kSmoke);

  auto res = run("generate --config " + cfg + " --out " + q(c), dir.path());
  ASSERT_EQ(res.code, 0);
  EXPECT_NE(res.out.find("50 episodes"), std::string::npos) << res.out;

  ASSERT_EQ(run("train --config " + cfg + " --cohort " + q(c) + " --out " + q(t), dir.path()).code, 0);
  for (const char* f : {"model.ckpt", "metrics.jsonl", "config.json", "run_manifest.json",
                        "checkpoints/stage1.ckpt", "checkpoints/stage2.ckpt", "checkpoints/stage3.ckpt"}) {
    EXPECT_TRUE(fs::exists(t / f)) << f;
  }
  const json manifest = json::parse(slurp(t / "run_manifest.json"));
  EXPECT_EQ(manifest.at("command"), "train");
  EXPECT_EQ(manifest.at("config_hash").get<std::string>().size(), 16u);

  res = run("evaluate --config " + cfg + " --cohort " + q(c) + " --checkpoint " + q(t / "model.ckpt") + " --out " +
                q(e),
            dir.path());
  ASSERT_EQ(res.code, 0);
  EXPECT_NE(res.out.find("fqe_value = "), std::string::npos) << res.out;
  std::ifstream report(e / "eval_report.jsonl");
  std::string line;
  std::set<std::string> names;
  while (std::getline(report, line)) names.insert(json::parse(line).at("name").get<std::string>());
  for (const char* n : {"fqe_value", "wis_value", "ess", "auroc_outcome", "policy_entropy", "kl_mean"}) {
    EXPECT_TRUE(names.count(n)) << n;
  }

  res = run("ablate --config " + cfg + " --cohort " + q(c) + " --out " + q(a), dir.path());
  ASSERT_EQ(res.code, 0);
  EXPECT_EQ(res.out.rfind("variant,seeds,fqe", 0), 0u) << res.out;
  EXPECT_TRUE(fs::exists(a / "full" / "seed_0" / "model.ckpt"));
  EXPECT_TRUE(fs::exists(a / "no_mnar" / "seed_0" / "eval_report.jsonl"));

  ASSERT_EQ(run("report --input " + q(e / "eval_report.jsonl") + " --input " + q(a) + " --out " + q(r), dir.path())
                .code,
            0);
  for (const char* f : {"entropy.svg", "kl_per_dim.svg", "fqe_comparison.svg", "summary.md"}) {
    EXPECT_TRUE(fs::exists(r / f)) << f;
  }

  res = run("act --checkpoint " + q(t / "model.ckpt") + " --cohort " + q(c) +
                " --episode 3 --prefix 2 --mode argmax --seed 1",
            dir.path());
  ASSERT_EQ(res.code, 0);
  const json act = json::parse(res.out);
  const auto probs = act.at("probs").get<std::vector<double>>();
  ASSERT_FALSE(probs.empty());
  double sum = 0.0;
  for (double p : probs) sum += p;
  EXPECT_NEAR(sum, 1.0, 1e-9);
  const int action = act.at("action");
  EXPECT_GE(action, 0);
  EXPECT_LT(action, static_cast<int>(probs.size()));
  EXPECT_EQ(act.at("prefix"), 2);
  EXPECT_EQ(run("act --checkpoint " + q(t / "model.ckpt") + " --cohort " + q(c) +
                    " --episode 3 --prefix 2 --mode argmax --seed 1",
                dir.path())
                .out,
            res.out);
  EXPECT_EQ(run("act --checkpoint " + q(t / "model.ckpt") + " --cohort " + q(c) + " --episode 3 --mode bogus",
                dir.path())
                .code,
            2);
  EXPECT_EQ(run("act --checkpoint " + q(t / "model.ckpt") + " --cohort " + q(c) + " --episode 99999", dir.path())
                .code,
            3);
}

}  // namespace
