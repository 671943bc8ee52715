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

// Runs every acceptance criterion and prints one PASS/FAIL line per
// criterion. Exits nonzero when any criterion fails.

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "test_util.hpp"

namespace {

namespace fs = std::filesystem;
using namespace condcomp;
using testutil::randn;

struct Outcome {
  bool passed = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

int run_cli(const std::string& args, std::string* output = nullptr) {
  const std::string cmd = std::string(CONDCOMP_CLI) + " " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  if (pipe == nullptr) return -1;
  std::string out;
  char buf[4096];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof(buf), pipe)) > 0) out.append(buf, n);
  const int status = pclose(pipe);
  if (output) *output = out;
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path config_path(const std::string& name) { return fs::path(CONDCOMP_SOURCE_DIR) / "configs" / name; }

const fs::path kWork = fs::path("acceptance_out");

// 1 -----------------------------------------------------------------------

Outcome gradient_correctness() {
  const auto t0 = std::chrono::steady_clock::now();
  using Check = std::function<GradCheckResult(Rng&)>;
  std::vector<std::pair<std::string, Check>> suites;
  for (const auto& op : catalog_op_ids())
    suites.emplace_back("op:" + op, [op](Rng& r) { return testutil::check_catalog_case(op, r); });
  suites.emplace_back("soft-gumbel", [](Rng& r) { return testutil::check_soft_gumbel_case(r); });
  suites.emplace_back("moe-sparse-soft", [](Rng& r) { return testutil::check_moe_sparse_soft_case(r); });
  suites.emplace_back("moe-sparse-ste", [](Rng& r) { return testutil::check_moe_ste_case(r); });
  suites.emplace_back("moe-soft-dispatch", [](Rng& r) { return testutil::check_moe_soft_dispatch_case(r); });
  suites.emplace_back("moe-soft-weights", [](Rng& r) { return testutil::check_moe_soft_weights_case(r); });
  suites.emplace_back("branching", [](Rng& r) { return testutil::check_branching_case(r); });
  suites.emplace_back("token-score-masked", [](Rng& r) { return testutil::check_token_score_masked_case(r); });

  double worst = 0.0;
  std::string worst_suite, failure;
  std::size_t cases = 0;
  for (std::size_t s = 0; s < suites.size(); ++s) {
    Rng rng = derive_rng(1000 + s, 0);
    for (int c = 0; c < 100; ++c, ++cases) {
      GradCheckResult r = suites[s].second(rng);
      if (r.max_rel_error > worst) {
        worst = r.max_rel_error;
        worst_suite = suites[s].first;
      }
      if (!r.passed && failure.empty()) failure = suites[s].first + " case " + std::to_string(c) + ": " + r.message;
    }
  }
  const double secs = seconds_since(t0);
  Outcome o;
  o.passed = failure.empty() && secs < 60.0;
  o.detail = std::to_string(suites.size()) + " suites x 100 cases, max rel err " + fmt("%.2e", worst) + " (" + worst_suite +
             "), " + fmt("%.1f", secs) + " s";
  if (!failure.empty()) o.detail += "; first failure: " + failure;
  return o;
}

// 2 -----------------------------------------------------------------------

Outcome sampler_fidelity() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  bool ok = true;
  std::size_t vectors = 0;
  for (std::size_t dims : {2u, 4u, 8u, 16u}) {
    for (const auto& c : sampler_suite(dims, 200000, 17 + dims, 5)) {
      worst = std::max(worst, c.max_abs_dev);
      ok = ok && c.max_abs_dev <= 0.01;
      ++vectors;
    }
  }
  const double secs = seconds_since(t0);
  return {ok && secs < 10.0, std::to_string(vectors) + " logit vectors (dims 2..16) x 2e5 draws, max |freq - softmax| " +
                                 fmt("%.4f", worst) + ", " + fmt("%.1f", secs) + " s"};
}

// 3 -----------------------------------------------------------------------

Outcome ste_contract() {
  Rng meta = derive_rng(3, 0);
  std::size_t bad_forward = 0, bad_backward = 0;
  double max_diff = 0.0;
  for (int c = 0; c < 100; ++c) {
    const std::size_t n = testutil::rand_dim(meta, 1, 12), k = testutil::rand_dim(meta, 1, n);
    const double tau = std::exp(uniform(meta, -2, 2));
    const std::uint64_t seed = meta();
    Tensor p = randn({n}, meta), w = randn({n}, meta);
    auto cfg = [&](SampleMode m) { return SamplerConfig{tau, k, m, true}; };
    Rng r1(seed), r2(seed), r3(seed);
    auto hard = sample_hard(GateScores(p), cfg(SampleMode::hard), r1);
    Tensor p_ste = p.clone(true);
    auto ste = sample_ste(GateScores(p_ste), cfg(SampleMode::straight_through), r2);
    backward(sum(mul(ste.values, w)));
    Tensor p_soft = p.clone(true);
    auto soft = sample_soft(GateScores(p_soft), cfg(SampleMode::soft), r3);
    backward(sum(mul(soft.values, w)));
    if (ste.values.to_vector() != hard.values.to_vector() || ste.indices != hard.indices) ++bad_forward;
    const auto gs = p_ste.grad(), gf = p_soft.grad();
    for (std::size_t i = 0; i < n; ++i) max_diff = std::max(max_diff, std::abs(gs[i] - gf[i]));
    if (gs != gf) ++bad_backward;
  }
  return {bad_forward == 0 && max_diff <= 1e-12,
          "100 cases, forward mismatches " + std::to_string(bad_forward) + ", backward max |diff| " + fmt("%.1e", max_diff) +
              " (" + std::to_string(bad_backward) + " not bit-identical)"};
}

// 4 -----------------------------------------------------------------------

Outcome stick_breaking() {
  Rng rng = derive_rng(4, 0);
  double worst = 0.0;
  for (int c = 0; c < 10000; ++c) {
    std::vector<double> g(testutil::rand_dim(rng, 0, 7));  // b = |g| + 1 <= 8
    for (double& v : g) v = uniform01(rng);
    auto gv = gamma_vector(g);
    double total = gv.residual;
    for (double v : gv.gamma) total += v;
    worst = std::max(worst, std::abs(total - 1.0));
  }
  std::size_t patterns = 0, bad = 0;
  for (std::size_t b = 1; b <= 4; ++b) {
    std::vector<Tensor> probs;
    for (std::size_t i = 0; i < b; ++i) probs.push_back(softmax(randn({3}, rng), 0));
    for (std::size_t pattern = 0; pattern < (1u << (b - 1)); ++pattern, ++patterns) {
      std::vector<double> g;
      std::vector<Tensor> gates;
      for (std::size_t i = 0; i + 1 < b; ++i) {
        g.push_back((pattern >> i) & 1 ? 1.0 : 0.0);
        gates.push_back(Tensor::scalar(g.back()));
      }
      auto gv = gamma_vector(g);
      std::vector<double> w = gv.gamma;
      w.push_back(gv.residual);
      // Expected: the first exit whose gate is on, else the final one.
      std::size_t expect = b - 1;
      for (std::size_t i = 0; i + 1 < b; ++i)
        if (g[i] == 1.0) {
          expect = i;
          break;
        }
      bool one_hot = true;
      for (std::size_t j = 0; j < w.size(); ++j) one_hot = one_hot && w[j] == (j == expect ? 1.0 : 0.0);
      const Tensor mixed = mix_branches(probs, gates);
      if (!one_hot || mixed.to_vector() != probs[expect].to_vector()) ++bad;
    }
  }
  return {worst <= 1e-12 && bad == 0, "1e4 gate vectors, max |sum - 1| " + fmt("%.1e", worst) + "; " +
                                          std::to_string(patterns) + " binary patterns, " + std::to_string(bad) + " mismatches"};
}

// 5 -----------------------------------------------------------------------

Outcome oracle_equivalences() {
  Rng rng = derive_rng(5, 0);
  double top1 = 0.0, onehot = 0.0, masked = 0.0;
  for (int c = 0; c < 50; ++c) {
    MoELayer layer = testutil::random_moe_layer(rng, MoEVariant::sparse, 1, 4, 4, 6);
    Tensor x = randn({5, 4}, rng);
    MoEOutput out = forward_sparse(layer, x);
    for (std::size_t t = 0; t < 5; ++t) {
      const Tensor direct = layer.experts[out.assignment.per_token[t][0].expert](gather_rows(x, {t}));
      for (std::size_t j = 0; j < 4; ++j) top1 = std::max(top1, std::abs(out.y.at(t, j) - direct[j]));
    }
    MoELayer sw = testutil::random_moe_layer(rng, MoEVariant::soft_weights, 1, 3, 3, 4);
    const std::size_t e = uniform_index(rng, 3);
    std::vector<double> emb(9, 0.0);
    emb[e * 3] = 1000.0;
    sw.embeddings.weight = Tensor::matrix(3, 3, emb);
    Tensor xs = randn({4, 3}, rng);
    MoEOutput so = forward_soft_weights(sw, Tensor::matrix(1, 3, {1, 0, 0}), xs);
    const Tensor direct = sw.experts[e](xs);
    for (std::size_t i = 0; i < direct.numel(); ++i) onehot = std::max(onehot, std::abs(so.y[i] - direct[i]));
  }
  ModelSpec spec = testutil::tiny_spec({{{Mechanism::token_select}}, {{Mechanism::token_select}}}, 2);
  for (int c = 0; c < 50; ++c) {
    Model m(spec, rng());
    const std::size_t n = testutil::rand_dim(rng, 2, 8);
    Tensor x = randn({n, 3}, rng);
    std::vector<std::size_t> first, second;
    for (std::size_t t = 0; t < n; ++t)
      if (uniform01(rng) < 0.6) first.push_back(t);
    if (first.empty()) first.push_back(uniform_index(rng, n));
    for (std::size_t t : first)
      if (uniform01(rng) < 0.6) second.push_back(t);
    if (second.empty()) second.push_back(first.front());
    const std::vector<std::vector<std::size_t>> dec = {first, second};
    ForwardContext a, b;
    const Tensor ym = masked_forward(m, x, dec, a), yg = gather_forward(m, x, dec, b);
    for (std::size_t k = 0; k < ym.numel(); ++k) masked = std::max(masked, std::abs(ym[k] - yg[k]));
  }
  return {top1 == 0.0 && onehot <= 1e-12 && masked <= 1e-8,
          "top-1 max |diff| " + fmt("%.1e", top1) + ", one-hot soft-weights " + fmt("%.1e", onehot) +
              ", masked vs gathered (50 patterns) " + fmt("%.1e", masked)};
}

// 6 -----------------------------------------------------------------------

Outcome cost_consistency() {
  Rng rng = derive_rng(6, 0);
  std::size_t mismatches = 0, over_static = 0;
  for (int c = 0; c < 20; ++c) {
    ModelSpec spec = testutil::random_mechanism_spec(rng);
    Model m(spec, rng());
    const std::size_t n = testutil::rand_dim(rng, 1, 8);
    Tensor x = randn({n, 3}, rng, 2.0);
    Recorder rec;
    ForwardContext ctx;
    ctx.recorder = &rec;
    if (c % 2 == 0) {
      m.forward(x, ctx);
    } else {
      EENNConfig ee;
      ee.threshold = uniform01(rng);
      infer_threshold(m, x, ee, ctx);
    }
    const FlopReport analytic = dynamic_cost(spec, ctx.trace), actual = FlopReport::from(rec);
    bool same = actual.total_macs() == analytic.total_macs() && actual.total_elem_ops() == analytic.total_elem_ops() &&
                actual.layers.size() == analytic.layers.size();
    for (const auto& e : actual.layers) same = same && e.macs == analytic.macs(e.layer) && e.elem_ops == analytic.elem_ops(e.layer);
    mismatches += same ? 0 : 1;
    over_static += analytic.total_macs() > static_cost(spec, n).total_macs() ? 1 : 0;
  }
  return {mismatches == 0 && over_static == 0, "20 random specs, " + std::to_string(mismatches) + " recorder/analytic mismatches, " +
                                                   std::to_string(over_static) + " dynamic > static"};
}

// 7 -----------------------------------------------------------------------

Outcome tradeoff_curve() {
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path out = kWork / "tradeoff";
  fs::remove_all(out);
  const std::string cfg = config_path("difficulty_tiers_ee.json").string();
  std::string log;
  if (run_cli("train --config " + cfg + " --out " + out.string(), &log) != 0) return {false, "train failed: " + log};
  if (run_cli("sweep --config " + cfg + " --out " + out.string() + " --checkpoint " + (out / "checkpoint.json").string() +
                  " --knob ee-threshold --values 0.5:0.99:10",
              &log) != 0) {
    return {false, "sweep failed: " + log};
  }
  std::istringstream csv(slurp(out / "curve.csv"));
  std::string line;
  std::getline(csv, line);
  std::vector<double> macs, acc;
  while (std::getline(csv, line)) {
    std::string knob;
    double value, m, a;
    std::size_t n;
    unsigned long long seed;
    char kbuf[32];
    if (std::sscanf(line.c_str(), "%31[^,],%lf,%lf,%lf,%zu,%llu", kbuf, &value, &m, &a, &n, &seed) != 6) return {false, "bad row " + line};
    macs.push_back(m);
    acc.push_back(a);
  }
  bool increasing = macs.size() == 10;
  for (std::size_t i = 1; i < macs.size(); ++i) increasing = increasing && macs[i] > macs[i - 1];
  const double secs = seconds_since(t0);
  const bool acc_ok = !acc.empty() && acc.back() >= acc.front() - 0.02;
  return {increasing && acc_ok && secs <= 300.0,
          std::to_string(macs.size()) + " rows in " + (out / "curve.csv").string() + ", MACs " + fmt("%.0f", macs.front()) + " -> " +
              fmt("%.0f", macs.back()) + (increasing ? " strictly increasing" : " NOT strictly increasing") + ", accuracy " +
              fmt("%.3f", acc.front()) + " -> " + fmt("%.3f", acc.back()) + ", " + fmt("%.0f", secs) + " s"};
}

// 8, 9, 10 ----------------------------------------------------------------

struct SeedRuns {
  std::vector<MetricsRecord> finals;
  double seconds = 0.0;
};

SeedRuns train_seeds(const std::string& config) {
  const auto t0 = std::chrono::steady_clock::now();
  SeedRuns s;
  const ExperimentConfig base = load_config(config_path(config));
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    ExperimentConfig c = base;
    c.seed = seed;
    s.finals.push_back(train(c).records.back());
  }
  s.seconds = seconds_since(t0);
  return s;
}

std::string list(const std::vector<double>& v) {
  std::string out = "[";
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? " " : "") + fmt("%.3f", v[i]);
  return out + "]";
}

Outcome specialization(const SeedRuns& balanced, const SeedRuns& random) {
  std::vector<double> nmi, ctrl;
  for (const auto& r : balanced.finals) nmi.push_back(r.nmi.value_or(0.0));
  for (const auto& r : random.finals) ctrl.push_back(r.nmi.value_or(1.0));
  const double secs = balanced.seconds + random.seconds;
  const double m = median(nmi), mc = median(ctrl);
  return {m >= 0.5 && mc <= 0.1 && secs <= 600.0, "median NMI " + fmt("%.3f", m) + " " + list(nmi) + " vs random routing " +
                                                        fmt("%.3f", mc) + " " + list(ctrl) + ", " + fmt("%.0f", secs) + " s"};
}

Outcome balancing_effect(const SeedRuns& balanced, const SeedRuns& unbalanced) {
  std::vector<double> on, off;
  for (const auto& r : balanced.finals) on.push_back(r.load_cv.value_or(1e9));
  for (const auto& r : unbalanced.finals) off.push_back(r.load_cv.value_or(0.0));
  const double a = median(on), b = median(off);
  return {a < b, "median load CV " + fmt("%.3f", a) + " " + list(on) + " with balancing vs " + fmt("%.3f", b) + " " + list(off) + " without"};
}

Outcome token_selection_utility() {
  const auto t0 = std::chrono::steady_clock::now();
  const ExperimentConfig base = load_config(config_path("needle_tokens_drop.json"));
  std::vector<double> recall, ratio;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    ExperimentConfig c = base;
    c.seed = seed;
    TrainResult r = train(c);
    recall.push_back(r.records.back().token_recall.value_or(0.0));
    ratio.push_back(r.records.back().mean_macs / static_cast<double>(static_cost(c.model, r.data.test.n_tokens).total_macs()));
  }
  const double worst_ratio = *std::max_element(ratio.begin(), ratio.end());
  return {median(recall) >= 0.9 && worst_ratio <= 0.5, "median recall " + fmt("%.3f", median(recall)) + " " + list(recall) +
                                                           ", dynamic/dense MACs " + list(ratio) + ", " +
                                                           fmt("%.0f", seconds_since(t0)) + " s"};
}

// 11 ----------------------------------------------------------------------

Outcome determinism() {
  const fs::path out = kWork / "determinism";
  const std::string cfg = config_path("cluster_experts_moe.json").string();
  const std::string ee = config_path("difficulty_tiers_ee.json").string();
  const std::string needle = config_path("needle_tokens_drop.json").string();
  const std::vector<std::string> commands = {
      "train --config " + cfg + " --seed 11 --out " + (out / "moe").string(),
      "eval --config " + cfg + " --seed 11 --out " + (out / "moe").string(),
      "sweep --config " + cfg + " --seed 11 --out " + (out / "moe").string() + " --checkpoint " + (out / "moe" / "checkpoint.json").string() +
          " --knob k --values 1:4:4",
      "flops --config " + cfg + " --seed 11 --out " + (out / "moe").string(),
      "train --config " + needle + " --out " + (out / "needle").string(),
      "sweep --config " + ee + " --out " + (out / "ee").string() + " --knob ee-threshold --values 0.6,0.9",
      "sample-test --dims 8 --draws 200000 --seed 7",
  };
  auto run_all = [&](std::map<std::string, std::string>& files) {
    fs::remove_all(out);
    for (std::size_t i = 0; i < commands.size(); ++i) {
      std::string stdout_text;
      if (run_cli(commands[i], &stdout_text) != 0) return "command failed: " + commands[i] + "\n" + stdout_text;
      files["stdout." + std::to_string(i)] = stdout_text;
    }
    for (const auto& e : fs::recursive_directory_iterator(out))
      if (e.is_regular_file()) files[fs::relative(e.path(), out).string()] = slurp(e.path());
    return std::string();
  };
  std::map<std::string, std::string> first, second;
  std::string err = run_all(first);
  if (err.empty()) err = run_all(second);
  if (!err.empty()) return {false, err};
  std::size_t differ = 0;
  std::string names;
  for (const auto& [name, bytes] : first) {
    auto it = second.find(name);
    if (it == second.end() || it->second != bytes) {
      ++differ;
      names += " " + name;
    }
  }
  differ += second.size() > first.size() ? second.size() - first.size() : 0;
  return {differ == 0, std::to_string(commands.size()) + " commands run twice, " + std::to_string(first.size()) +
                           " outputs compared, " + std::to_string(differ) + " differ" + names};
}

}  // namespace

int main() {
  fs::create_directories(kWork);
  int failed = 0;
  auto report = [&](int id, const char* name, const Outcome& o) {
    std::printf("[%s] criterion %2d %-28s %s\n", o.passed ? "PASS" : "FAIL", id, name, o.detail.c_str());
    std::fflush(stdout);
    failed += o.passed ? 0 : 1;
  };
  auto guarded = [&](const std::function<Outcome()>& f) {
    try {
      return f();
    } catch (const std::exception& e) {
      return Outcome{false, std::string("exception: ") + e.what()};
    }
  };
  report(1, "gradient correctness", guarded(gradient_correctness));
  report(2, "sampler fidelity", guarded(sampler_fidelity));
  report(3, "straight-through contract", guarded(ste_contract));
  report(4, "stick-breaking", guarded(stick_breaking));
  report(5, "oracle equivalences", guarded(oracle_equivalences));
  report(6, "cost model consistency", guarded(cost_consistency));
  report(7, "trade-off curve", guarded(tradeoff_curve));
  SeedRuns balanced, unbalanced, random;
  const Outcome runs = guarded([&] {
    balanced = train_seeds("cluster_experts_moe.json");
    unbalanced = train_seeds("cluster_experts_nobalance.json");
    random = train_seeds("cluster_experts_random.json");
    return Outcome{true, ""};
  });
  report(8, "expert specialization", runs.passed ? guarded([&] { return specialization(balanced, random); }) : runs);
  report(9, "balancing effect", runs.passed ? guarded([&] { return balancing_effect(balanced, unbalanced); }) : runs);
  report(10, "token selection utility", guarded(token_selection_utility));
  report(11, "determinism", guarded(determinism));
  std::printf("%d of 11 criteria failed\n", failed);
  return failed == 0 ? 0 : 1;
}
