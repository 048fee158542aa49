#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>

#include <gtest/gtest.h>

#include "json.hpp"

namespace fs = std::filesystem;

namespace {

struct CliRun {
  int code = 0;
  std::string out;
};

// Runs the CLI with stderr folded into stdout.
CliRun run(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + " " + std::string(DISPATCHER_CLI_PATH) + " " + args + " 2>&1";
  CliRun r;
  FILE* pipe = popen(cmd.c_str(), "r");
  char buf[4096];
  while (std::size_t n = fread(buf, 1, sizeof buf, pipe)) r.out.append(buf, n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string corpus() { return std::string(DISPATCHER_SOURCE_DIR) + "/data/tiny"; }

fs::path fresh(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("dispatcher_cli_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

const std::string kSmall = "--d-model 16 --d-inner 16 --layers 1 --seq 32 --batch 2 --steps 20 --warmup 5";

}  // namespace

TEST(Cli, HelpListsDefaults) {
  for (const std::string sub : {"train", "bench", "generate", "check"}) {
    const CliRun r = run(sub + " --help");
    EXPECT_EQ(r.code, 0) << sub;
    EXPECT_NE(r.out.find("--seed"), std::string::npos) << sub;
  }
  const CliRun r = run("train --help");
  EXPECT_NE(r.out.find("[1000]"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("[dispatcher]"), std::string::npos);
}

TEST(Cli, UsageErrorsExitTwo) {
  const CliRun bad_layer = run("train --layer foo --corpus " + corpus());
  EXPECT_EQ(bad_layer.code, 2);
  EXPECT_NE(bad_layer.out.find("Usage"), std::string::npos);
  EXPECT_EQ(run("").code, 2);
  const CliRun missing = run("train --corpus /nonexistent/base --out " + fresh("missing").string());
  EXPECT_EQ(missing.code, 2);
  EXPECT_NE(missing.out.find("/nonexistent/base.train.txt"), std::string::npos);
  EXPECT_EQ(run("eval --checkpoint /nonexistent.ckpt --corpus " + corpus() + " --out " + fresh("e").string()).code, 2);
}

TEST(Cli, TrainIsDeterministicAndEvalReportsPerplexity) {
  std::string ckpt[2];
  for (int i = 0; i < 2; ++i) {
    const fs::path out = fresh("train" + std::to_string(i));
    const CliRun r = run("train --layer dispatcher --corpus " + corpus() + " " + kSmall + " --seed 7 --out " + out.string());
    ASSERT_EQ(r.code, 0) << r.out;
    for (const char* f : {"manifest.json", "vocab.txt", "model.ckpt", "loss.csv"}) EXPECT_TRUE(fs::exists(out / f)) << f;
    ckpt[i] = slurp(out / "model.ckpt");
    const auto manifest = nlohmann::json::parse(slurp(out / "manifest.json"));
    EXPECT_EQ(manifest.at("config").at("seed"), 7);
    EXPECT_EQ(manifest.at("config").at("steps"), 20);
    EXPECT_FALSE(manifest.at("inputs").empty());
  }
  EXPECT_EQ(ckpt[0], ckpt[1]);

  const fs::path dir = fresh("train0").parent_path() / "dispatcher_cli_train1";
  const fs::path eval_out = fresh("eval");
  const CliRun a = run("eval --checkpoint " + (dir / "model.ckpt").string() + " --corpus " + corpus() + " --out " + eval_out.string());
  const CliRun b = run("eval --checkpoint " + (dir / "model.ckpt").string() + " --corpus " + corpus() + " --out " + eval_out.string());
  ASSERT_EQ(a.code, 0) << a.out;
  EXPECT_NE(a.out.find("perplexity="), std::string::npos);
  EXPECT_EQ(a.out, b.out);
  EXPECT_TRUE(fs::exists(eval_out / "eval.json"));

  const CliRun mismatch = run("eval --checkpoint " + (dir / "model.ckpt").string() + " --corpus " + corpus() +
                           " --d-model 32 --out " + eval_out.string());
  EXPECT_EQ(mismatch.code, 2);
  EXPECT_NE(mismatch.out.find("d_model"), std::string::npos) << mismatch.out;

  const CliRun g1 = run("generate --checkpoint " + (dir / "model.ckpt").string() + " --prompt Alice --steps 10 --out " + eval_out.string());
  const CliRun g2 = run("generate --checkpoint " + (dir / "model.ckpt").string() + " --prompt Alice --steps 10 --out " + eval_out.string());
  EXPECT_EQ(g1.code, 0) << g1.out;
  EXPECT_EQ(g1.out, g2.out);
}

TEST(Cli, ConfigFileIsOverriddenByFlags) {
  const fs::path out = fresh("config");
  fs::create_directories(out);
  std::ofstream(out / "cfg.json") << R"({"layer": "msa", "steps": 3, "seed": 5, "d_model": 16, "d_inner": 16,
    "n_layers": 1, "seq_len": 16, "batch_size": 2, "warmup_steps": 1})";
  const CliRun r = run("train --config " + (out / "cfg.json").string() + " --steps 4 --corpus " + corpus() + " --out " + out.string());
  ASSERT_EQ(r.code, 0) << r.out;
  const auto manifest = nlohmann::json::parse(slurp(out / "manifest.json"));
  EXPECT_EQ(manifest.at("config").at("steps"), 4);
  EXPECT_EQ(manifest.at("config").at("layer"), "msa");
  EXPECT_EQ(manifest.at("config").at("seed"), 5);
  EXPECT_EQ(manifest.at("config").at("learning_rate"), 1e-3);
}

TEST(Cli, OutDirFromEnvironment) {
  const fs::path out = fresh("env");
  const CliRun r = run("train --corpus " + corpus() + " " + kSmall + " --steps 2 --warmup 1", "DISPATCHER_OUT_DIR=" + out.string());
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_TRUE(fs::exists(out / "model.ckpt"));
}

TEST(Cli, NanLossExitsThree) {
  const CliRun r = run("train --corpus " + corpus() + " " + kSmall + " --lr 1e300 --warmup 0 --clip 1e300 --out " +
                    fresh("nan").string());
  EXPECT_EQ(r.code, 3) << r.out;
}

TEST(Cli, BenchEmitsCsv) {
  const fs::path out = fresh("bench");
  const CliRun r = run("bench --layer both --n 8,16,32,128 --d-model 8 --d-inner 8 --batch 1 --out " + out.string());
  ASSERT_EQ(r.code, 0) << r.out;
  const std::string csv = slurp(out / "bench.csv");
  EXPECT_EQ(csv.rfind("layer_kind,N,repeats,mean_s,stddev_s,peak_bytes,macs\n", 0), 0u);
  EXPECT_NE(csv.find("msa,128,5,"), std::string::npos);
  EXPECT_NE(r.out.find("time exponent"), std::string::npos);
}

TEST(Cli, CheckPasses) {
  const CliRun r = run("check --out " + fresh("check").string());
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(r.out.find("FAIL"), std::string::npos);
}
