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

// Command-line entry point: train, eval, sweep, sample-test, flops.
// Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "condcomp.hpp"

namespace {

namespace fs = std::filesystem;
using namespace condcomp;

struct CommonArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string checkpoint;
};

ExperimentConfig resolve(const CommonArgs& a) {
  ExperimentConfig cfg = load_config(a.config);
  if (a.seed) cfg.seed = *a.seed;
  if (!a.out.empty()) cfg.out_dir = a.out;
  return cfg;
}

Model load_or_train(const ExperimentConfig& cfg, const CommonArgs& a) {
  if (!a.checkpoint.empty()) {
    Model m = load_checkpoint(a.checkpoint);
    if (to_json(m.spec()) != to_json(cfg.model)) throw ConfigError("checkpoint model does not match the config's model");
    return m;
  }
  return train(cfg).model;
}

/// "a:b:n" (n evenly spaced values, both ends included) or "v1,v2,...".
std::vector<double> parse_values(const std::string& s) {
  std::vector<double> out;
  auto num = [&](const std::string& t) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(t, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != t.size()) throw ConfigError("--values: cannot parse '" + t + "'");
    return v;
  };
  if (s.find(':') != std::string::npos) {
    std::vector<std::string> parts;
    std::stringstream ss(s);
    for (std::string p; std::getline(ss, p, ':');) parts.push_back(p);
    if (parts.size() != 3) throw ConfigError("--values: expected a:b:n");
    const double a = num(parts[0]), b = num(parts[1]), nd = num(parts[2]);
    if (!(nd >= 1) || nd != static_cast<double>(static_cast<long>(nd))) throw ConfigError("--values: n must be a positive integer");
    const auto n = static_cast<std::size_t>(nd);
    for (std::size_t i = 0; i < n; ++i) out.push_back(n == 1 ? a : a + (b - a) * static_cast<double>(i) / static_cast<double>(n - 1));
    return out;
  }
  std::stringstream ss(s);
  for (std::string p; std::getline(ss, p, ',');) out.push_back(num(p));
  if (out.empty()) throw ConfigError("--values: no values given");
  return out;
}

void add_common(CLI::App* cmd, CommonArgs& a, bool checkpoint) {
  cmd->add_option("--config", a.config, "experiment config (JSON)")->required();
  cmd->add_option("--seed", a.seed, "overrides the config seed");
  cmd->add_option("--out", a.out, "output directory (default: config out_dir)");
  if (checkpoint) cmd->add_option("--checkpoint", a.checkpoint, "checkpoint to load instead of training");
}

int run(int argc, char** argv) {
  CLI::App app{"Conditional computation toolkit"};
  app.require_subcommand(1);

  CommonArgs train_args, eval_args, sweep_args, flops_args;
  auto* train_cmd = app.add_subcommand("train", "train a model and write metrics, checkpoint and decision logs");
  add_common(train_cmd, train_args, false);

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
  add_common(eval_cmd, eval_args, true);

  std::string knob, values;
  auto* sweep_cmd = app.add_subcommand("sweep", "accuracy versus compute curve over one knob");
  add_common(sweep_cmd, sweep_args, true);
  sweep_cmd->add_option("--knob", knob, "ee-threshold, k or keep-ratio")->required();
  sweep_cmd->add_option("--values", values, "a:b:n or a comma list")->required();

  std::size_t dims = 8, draws = 200000, cases = 5;
  std::uint64_t sample_seed = 0;
  auto* sample_cmd = app.add_subcommand("sample-test", "Gumbel sampler frequency check");
  sample_cmd->add_option("--dims", dims, "candidates per logit vector")->check(CLI::Range(1, 1 << 20));
  sample_cmd->add_option("--draws", draws, "samples per vector")->check(CLI::PositiveNumber);
  sample_cmd->add_option("--cases", cases, "random logit vectors")->check(CLI::PositiveNumber);
  sample_cmd->add_option("--seed", sample_seed, "generator seed");

  std::size_t tokens = 0;
  auto* flops_cmd = app.add_subcommand("flops", "static and dynamic MAC reports");
  add_common(flops_cmd, flops_args, true);
  flops_cmd->add_option("--tokens", tokens, "token count for the static report (default: dataset)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (*train_cmd) {
      ExperimentConfig cfg = resolve(train_args);
      TrainResult r = train(cfg, fs::path(cfg.out_dir));
      std::cout << r.records.back().to_json().dump() << "\n";
    } else if (*eval_cmd) {
      ExperimentConfig cfg = resolve(eval_args);
      const fs::path out(cfg.out_dir);
      if (eval_args.checkpoint.empty()) eval_args.checkpoint = (out / "checkpoint.json").string();
      Model model = load_or_train(cfg, eval_args);
      DataSplits data = make_splits(cfg);
      EvalOptions opt;
      opt.logs = true;
      EvalResult r = evaluate(model, data.test, cfg, cfg.epochs, opt);
      fs::create_directories(out);
      write_text(out / "eval.jsonl", r.record.to_json().dump() + "\n");
      write_decision_logs(r, out);
      std::cout << r.record.to_json().dump() << "\n";
    } else if (*sweep_cmd) {
      ExperimentConfig cfg = resolve(sweep_args);
      const SweepKnob k = parse_sweep_knob(knob);
      const std::vector<double> vals = parse_values(values);
      Model model = load_or_train(cfg, sweep_args);
      DataSplits data = make_splits(cfg);
      const std::string csv = curve_csv(tradeoff_sweep(model, data.test, cfg, k, vals));
      const fs::path out(cfg.out_dir);
      fs::create_directories(out);
      write_text(out / "curve.csv", csv);
      std::cout << csv;
    } else if (*sample_cmd) {
      bool ok = true;
      for (const auto& c : sampler_suite(dims, draws, sample_seed, cases)) {
        std::printf("dims=%zu draws=%zu max_abs_dev=%.6f chi2=%.4f p_value=%.6f %s\n", c.logits.size(), c.draws, c.max_abs_dev,
                    c.chi2, c.p_value, c.passed ? "PASS" : "FAIL");
        ok = ok && c.passed;
      }
      std::printf("%s\n", ok ? "PASS" : "FAIL");
      return ok ? 0 : 2;
    } else if (*flops_cmd) {
      ExperimentConfig cfg = resolve(flops_args);
      DataSplits data = make_splits(cfg);
      const std::size_t n_tok = tokens ? tokens : data.test.n_tokens;
      Model model = flops_args.checkpoint.empty() ? Model(cfg.model, cfg.seed) : load_or_train(cfg, flops_args);
      EvalResult r = evaluate(model, data.test, cfg, cfg.epochs);
      std::uint64_t lo = r.macs.front(), hi = r.macs.front();
      for (auto m : r.macs) {
        lo = std::min(lo, m);
        hi = std::max(hi, m);
      }
      Json report{{"tokens", n_tok},
                  {"static", static_cost(cfg.model, n_tok).to_json()},
                  {"dynamic", {{"samples", r.macs.size()}, {"mean_macs", r.record.mean_macs}, {"min_macs", lo}, {"max_macs", hi}}}};
      const fs::path out(cfg.out_dir);
      fs::create_directories(out);
      write_text(out / "flops.json", report.dump(2) + "\n");
      std::cout << report.dump(2) << "\n";
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) { return run(argc, argv); }
