// Copyright 2026 The condcomp Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

namespace {

namespace fs = std::filesystem;

struct RunResult {
  int code = -1;
  std::string output;  // stdout and stderr interleaved
};

RunResult run_cli(const std::string& args) {
  const std::string cmd = std::string(CONDCOMP_CLI) + " " + args + " 2>&1";
  RunResult r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (pipe == nullptr) return r;
  char buf[4096];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof(buf), pipe)) > 0) r.output.append(buf, n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("condcomp_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  /// A depth-3 early-exit model small enough to train in a moment.
  fs::path write_config(const nlohmann::json& overrides = nlohmann::json::object()) {
    nlohmann::json j = {
        {"seed", 4},
        {"epochs", 1},
        {"batch_size", 8},
        {"model",
         {{"d_input", 4},
          {"d_model", 8},
          {"heads", 2},
          {"d_ff", 16},
          {"depth", 3},
          {"blocks", {{"exit-head"}, {"exit-head"}, nlohmann::json::array()}}}},
        {"dataset", {{"id", "difficulty-tiers"}, {"params", {{"n_tokens", 4}, {"d_input", 4}}}, {"train_size", 48}, {"test_size", 24}}},
        {"early_exit", {{"betas", {1.0, 1.0}}}},
        {"out_dir", (dir_ / "default_out").string()}};
    j.merge_patch(overrides);
    const fs::path p = dir_ / "config.json";
    std::ofstream(p) << j.dump(2);
    return p;
  }

  fs::path dir_;
};

std::size_t count_lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

TEST_F(CliTest, MissingConfigExitsOneAndNamesPath) {
  const std::string missing = (dir_ / "missing.toml").string();
  RunResult r = run_cli("train --config " + missing);
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find(missing), std::string::npos) << r.output;
}

TEST_F(CliTest, UsageErrorsExitOne) {
  EXPECT_EQ(run_cli("").code, 1);
  EXPECT_EQ(run_cli("frobnicate").code, 1);
  EXPECT_EQ(run_cli("train").code, 1);
  EXPECT_EQ(run_cli("--help").code, 0);
}

TEST_F(CliTest, InvalidConfigExitsOne) {
  const fs::path p = write_config({{"model", {{"depth", 0}}}});
  RunResult r = run_cli("train --config " + p.string());
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("depth"), std::string::npos) << r.output;
  const fs::path q = write_config({{"dataset", {{"id", "mnist"}}}});
  EXPECT_EQ(run_cli("train --config " + q.string()).code, 1);
}

TEST_F(CliTest, SweepWritesTenRows) {
  const fs::path p = write_config();
  const fs::path out = dir_ / "sweep";
  RunResult r = run_cli("sweep --config " + p.string() + " --out " + out.string() + " --knob ee-threshold --values 0.5:0.99:10");
  ASSERT_EQ(r.code, 0) << r.output;
  const std::string csv = slurp(out / "curve.csv");
  EXPECT_EQ(count_lines(csv), 11u);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "knob,value,mean_macs,accuracy,n_samples,seed");
  EXPECT_NE(csv.find("\nee-threshold,0.5,"), std::string::npos);
  EXPECT_NE(csv.find("\nee-threshold,0.98999999999999999,"), std::string::npos) << csv;
  EXPECT_EQ(run_cli("sweep --config " + p.string() + " --out " + out.string() + " --knob k --values 1,2").code, 1);
  EXPECT_EQ(run_cli("sweep --config " + p.string() + " --out " + out.string() + " --knob ee-threshold --values 1:2").code, 1);
}

TEST_F(CliTest, SampleTestReportsDeviation) {
  RunResult r = run_cli("sample-test --dims 8 --draws 200000 --seed 7");
  EXPECT_EQ(r.code, 0) << r.output;
  EXPECT_NE(r.output.find("max_abs_dev="), std::string::npos);
  EXPECT_EQ(r.output.substr(r.output.size() - 5), "PASS\n");
}

TEST_F(CliTest, TrainEvalFlopsWriteFiles) {
  const fs::path p = write_config();
  const fs::path out = dir_ / "run";
  ASSERT_EQ(run_cli("train --config " + p.string() + " --out " + out.string()).code, 0);
  for (const char* f : {"config.json", "metrics.jsonl", "checkpoint.json", "exits.jsonl"}) EXPECT_TRUE(fs::exists(out / f)) << f;
  RunResult e = run_cli("eval --config " + p.string() + " --out " + out.string());
  ASSERT_EQ(e.code, 0) << e.output;
  auto rec = nlohmann::json::parse(slurp(out / "eval.jsonl"));
  EXPECT_EQ(rec["split"], "test");
  EXPECT_TRUE(rec["mean_exit"].is_number());
  RunResult f = run_cli("flops --config " + p.string() + " --out " + out.string());
  ASSERT_EQ(f.code, 0) << f.output;
  auto flops = nlohmann::json::parse(slurp(out / "flops.json"));
  EXPECT_LE(flops["dynamic"]["max_macs"].get<double>(), flops["static"]["total_macs"].get<double>());
  EXPECT_EQ(run_cli("eval --config " + p.string() + " --out " + (dir_ / "nothing").string()).code, 1);
}

TEST_F(CliTest, SeedOverrideChangesOutputs) {
  const fs::path p = write_config();
  ASSERT_EQ(run_cli("train --config " + p.string() + " --out " + (dir_ / "a").string()).code, 0);
  ASSERT_EQ(run_cli("train --config " + p.string() + " --seed 99 --out " + (dir_ / "b").string()).code, 0);
  EXPECT_NE(slurp(dir_ / "a" / "checkpoint.json"), slurp(dir_ / "b" / "checkpoint.json"));
  EXPECT_NE(slurp(dir_ / "b" / "config.json").find("\"seed\": 99"), std::string::npos);
}

TEST_F(CliTest, RepeatedInvocationsAreByteIdentical) {
  const fs::path p = write_config();
  const std::string out = (dir_ / "run").string();
  auto run_all = [&] {
    fs::remove_all(out);
    EXPECT_EQ(run_cli("train --config " + p.string() + " --out " + out).code, 0);
    EXPECT_EQ(run_cli("eval --config " + p.string() + " --out " + out).code, 0);
    EXPECT_EQ(run_cli("sweep --config " + p.string() + " --checkpoint " + out + "/checkpoint.json --out " + out +
                      " --knob ee-threshold --values 0:1:5")
                  .code,
              0);
    EXPECT_EQ(run_cli("flops --config " + p.string() + " --out " + out).code, 0);
    std::map<std::string, std::string> files;
    for (const auto& entry : fs::directory_iterator(out)) files[entry.path().filename().string()] = slurp(entry.path());
    return files;
  };
  const auto first = run_all(), second = run_all();
  EXPECT_GE(first.size(), 7u);
  ASSERT_EQ(first.size(), second.size());
  for (const auto& [name, bytes] : first) EXPECT_EQ(bytes, second.at(name)) << name;
}

}  // namespace
