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

#ifndef CONDCOMP_HARNESS_HPP_
#define CONDCOMP_HARNESS_HPP_

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "condcomp/accounting.hpp"
#include "condcomp/data.hpp"
#include "condcomp/early_exit.hpp"
#include "condcomp/metrics.hpp"
#include "condcomp/optim.hpp"
#include "condcomp/spec_json.hpp"
#include "condcomp/transformer.hpp"

namespace condcomp {

struct DatasetConfig {
  std::string id = "difficulty-tiers";
  Json params = Json::object();
  std::size_t train_size = 1000;
  std::size_t test_size = 500;
};

/// Geometric annealing of the Gumbel-Softmax temperature over all steps.
struct TauSchedule {
  double start = 5.0;
  double end = 0.5;

  double at(std::size_t step, std::size_t total_steps) const {
    if (total_steps <= 1) return end;
    const double frac = static_cast<double>(step) / static_cast<double>(total_steps - 1);
    return start * std::pow(end / start, frac);
  }
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::size_t epochs = 10;
  std::size_t batch_size = 16;
  OptimizerKind optimizer = OptimizerKind::adam;
  double lr = 3e-3;
  TauSchedule tau;
  ModelSpec model;
  DatasetConfig dataset;
  EENNConfig early_exit;
  double starvation_threshold = 0.05;
  std::string out_dir = "out";

  void validate() const {
    model.validate();
    if (batch_size == 0) throw ConfigError("config: batch_size must be positive");
    if (!(lr > 0)) throw ConfigError("config: lr must be positive");
    if (!(tau.start > 0 && tau.end > 0)) throw ConfigError("config: tau schedule must be positive");
    if (dataset.train_size == 0 || dataset.test_size == 0) throw ConfigError("config: dataset sizes must be positive");
    if (starvation_threshold < 0) throw ConfigError("config: starvation_threshold must be nonnegative");
    std::size_t early = 0;
    for (std::size_t i = 0; i + 1 < model.depth; ++i) early += model.has(i, Mechanism::exit_head) ? 1 : 0;
    try {
      early_exit.validate(early);
    } catch (const ConfigError&) {
      throw;
    } catch (const Error& e) {
      throw ConfigError(std::string("config: ") + e.what());
    }
  }
};

inline Json to_json(const EENNConfig& c) {
  return Json{{"alpha", c.alpha},
              {"betas", c.betas},
              {"rule", to_string(c.rule)},
              {"threshold", c.threshold},
              {"gate_mode", to_string(c.gate_mode)},
              {"straight_through_gates", c.straight_through_gates}};
}

inline Json to_json(const ExperimentConfig& c) {
  return Json{{"seed", c.seed},
              {"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"optimizer", {{"kind", c.optimizer == OptimizerKind::adam ? "adam" : "sgd"}, {"lr", c.lr}}},
              {"tau", {{"start", c.tau.start}, {"end", c.tau.end}}},
              {"model", to_json(c.model)},
              {"dataset",
               {{"id", c.dataset.id},
                {"params", c.dataset.params},
                {"train_size", c.dataset.train_size},
                {"test_size", c.dataset.test_size}}},
              {"early_exit", to_json(c.early_exit)},
              {"eval", {{"starvation_threshold", c.starvation_threshold}}},
              {"out_dir", c.out_dir}};
}

inline ExperimentConfig experiment_config_from_json(const Json& j) {
  using detail::read_field;
  detail::check_keys(j, {"seed", "epochs", "batch_size", "optimizer", "tau", "model", "dataset", "early_exit", "eval", "out_dir"},
                     "config");
  if (!j.contains("seed")) throw ConfigError("config: 'seed' is required");
  ExperimentConfig c;
  read_field(j, "seed", c.seed, "config");
  read_field(j, "epochs", c.epochs, "config");
  read_field(j, "batch_size", c.batch_size, "config");
  read_field(j, "out_dir", c.out_dir, "config");
  if (j.contains("optimizer")) {
    const Json& o = j.at("optimizer");
    detail::check_keys(o, {"kind", "lr"}, "config.optimizer");
    std::string kind = "adam";
    read_field(o, "kind", kind, "config.optimizer");
    try {
      c.optimizer = parse_optimizer_kind(kind);
    } catch (const Error& e) {
      throw ConfigError(std::string("config.optimizer: ") + e.what());
    }
    read_field(o, "lr", c.lr, "config.optimizer");
  }
  if (j.contains("tau")) {
    detail::check_keys(j.at("tau"), {"start", "end"}, "config.tau");
    read_field(j.at("tau"), "start", c.tau.start, "config.tau");
    read_field(j.at("tau"), "end", c.tau.end, "config.tau");
  }
  if (j.contains("model")) {
    try {
      c.model = model_spec_from_json(j.at("model"));
    } catch (const ConfigError&) {
      throw;
    } catch (const Error& e) {
      throw ConfigError(std::string("config.model: ") + e.what());
    }
  }
  if (j.contains("dataset")) {
    const Json& d = j.at("dataset");
    detail::check_keys(d, {"id", "params", "train_size", "test_size"}, "config.dataset");
    read_field(d, "id", c.dataset.id, "config.dataset");
    if (d.contains("params")) c.dataset.params = d.at("params");
    read_field(d, "train_size", c.dataset.train_size, "config.dataset");
    read_field(d, "test_size", c.dataset.test_size, "config.dataset");
  }
  if (j.contains("early_exit")) {
    const Json& e = j.at("early_exit");
    detail::check_keys(e, {"alpha", "betas", "rule", "threshold", "gate_mode", "straight_through_gates"}, "config.early_exit");
    read_field(e, "alpha", c.early_exit.alpha, "config.early_exit");
    read_field(e, "betas", c.early_exit.betas, "config.early_exit");
    read_field(e, "threshold", c.early_exit.threshold, "config.early_exit");
    read_field(e, "straight_through_gates", c.early_exit.straight_through_gates, "config.early_exit");
    std::string rule = to_string(c.early_exit.rule), mode = to_string(c.early_exit.gate_mode);
    read_field(e, "rule", rule, "config.early_exit");
    read_field(e, "gate_mode", mode, "config.early_exit");
    try {
      c.early_exit.rule = parse_halt_rule(rule);
      c.early_exit.gate_mode = parse_gate_mode(mode);
    } catch (const Error& err) {
      throw ConfigError(std::string("config.early_exit: ") + err.what());
    }
  }
  if (j.contains("eval")) {
    detail::check_keys(j.at("eval"), {"starvation_threshold"}, "config.eval");
    read_field(j.at("eval"), "starvation_threshold", c.starvation_threshold, "config.eval");
  }
  c.validate();
  return c;
}

/// Reads and validates a JSON config file.
inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path.string() + "'");
  Json j;
  try {
    j = Json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config file '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return experiment_config_from_json(j);
}

struct DataSplits {
  SyntheticDataset train;
  SyntheticDataset test;
};

/// Train and test draws share one latent layout; the model shape must fit it.
inline DataSplits make_splits(const ExperimentConfig& cfg) {
  DataSplits s{generate(cfg.dataset.id, cfg.dataset.train_size, cfg.dataset.params, cfg.seed, 0),
               generate(cfg.dataset.id, cfg.dataset.test_size, cfg.dataset.params, cfg.seed, 1)};
  if (s.train.d_input != cfg.model.d_input) {
    throw ConfigError("config: dataset has d_input=" + std::to_string(s.train.d_input) + " but model.d_input=" +
                      std::to_string(cfg.model.d_input));
  }
  if (s.train.n_classes != cfg.model.n_classes) throw ConfigError("config: dataset and model disagree on n_classes");
  if (cfg.model.positional && s.train.n_tokens > cfg.model.max_tokens) {
    throw ConfigError("config: dataset has " + std::to_string(s.train.n_tokens) + " tokens but model.max_tokens=" +
                      std::to_string(cfg.model.max_tokens));
  }
  return s;
}

/// One line of the metrics file. Optional fields are null when the
/// mechanism they describe is absent.
struct MetricsRecord {
  std::size_t epoch = 0;
  std::string split;
  double loss_task = 0.0;
  double loss_balance = 0.0;
  double accuracy = 0.0;
  double mean_macs = 0.0;
  std::optional<double> load_cv;
  std::optional<double> nmi;
  std::optional<double> mean_exit;
  std::optional<double> token_recall;

  Json to_json() const {
    auto opt = [](const std::optional<double>& v) { return v ? Json(*v) : Json(nullptr); };
    return Json{{"epoch", epoch},        {"split", split},           {"loss_task", loss_task},
                {"loss_balance", loss_balance}, {"accuracy", accuracy}, {"mean_macs", mean_macs},
                {"load_cv", opt(load_cv)}, {"nmi", opt(nmi)},         {"mean_exit", opt(mean_exit)},
                {"token_recall", opt(token_recall)}};
  }
};

/// Inference-time overrides used by sweeps.
struct EvalOptions {
  std::optional<double> threshold;
  std::optional<std::size_t> k;
  std::optional<double> keep_ratio;
  bool logs = false;
};

struct EvalResult {
  MetricsRecord record;
  std::vector<std::uint64_t> macs;      // per sample
  std::vector<std::size_t> predictions;
  std::vector<ExitTrace> exits;
  std::vector<double> recall;           // per sample, needle-tokens with selection
  std::string routing_log;
  std::string exit_log;
  std::string alive_log;
};

inline bool has_exits(const ModelSpec& spec) {
  for (std::size_t i = 0; i + 1 < spec.depth; ++i)
    if (spec.has(i, Mechanism::exit_head)) return true;
  return false;
}

/// Mean over MoE blocks of the balancing loss of each block's assignments
/// stacked across samples; undefined when no router ran.
inline Tensor batch_balancing_loss(const std::vector<std::vector<RoutingAssignment>>& per_sample) {
  std::size_t blocks = 0;
  for (const auto& r : per_sample) blocks = std::max(blocks, r.size());
  if (blocks == 0) return {};
  Tensor total;
  for (std::size_t k = 0; k < blocks; ++k) {
    std::vector<const RoutingAssignment*> parts;
    for (const auto& r : per_sample)
      if (k < r.size()) parts.push_back(&r[k]);
    Tensor l = balancing_loss(concat_assignments(parts));
    total = total.defined() ? add(total, l) : l;
  }
  return scale(total, 1.0 / static_cast<double>(blocks));
}

/// Evaluates every sample with inference semantics: greedy routing and
/// selection, hard skip gates, threshold or gated halting when exits exist.
inline EvalResult evaluate(const Model& model, const SyntheticDataset& ds, const ExperimentConfig& cfg,
                           std::size_t epoch, const EvalOptions& opt = {}) {
  EvalResult res;
  res.record.epoch = epoch;
  res.record.split = "test";
  Rng rng = derive_rng(cfg.seed, 3);
  EENNConfig ee = cfg.early_exit;
  if (opt.threshold) ee.threshold = *opt.threshold;
  const bool exits = has_exits(model.spec());
  std::vector<double> load;           // dispatches per expert, first MoE block
  std::vector<long> primary, cluster;  // per token, for NMI
  double task = 0.0, correct = 0.0, macs = 0.0, exit_sum = 0.0;
  std::vector<std::vector<RoutingAssignment>> routes;  // graph-free copies
  for (std::size_t i = 0; i < ds.size(); ++i) {
    ForwardContext ctx;
    Recorder rec;
    ctx.recorder = &rec;
    ctx.rng = &rng;
    ctx.keep_ratio = opt.keep_ratio;
    ctx.moe_k = opt.k;
    Tensor logits;
    if (exits) {
      ExitDecision d = ee.gate_mode == GateMode::threshold ? infer_threshold(model, ds.inputs[i], ee, ctx)
                                                           : infer_gated(model, ds.inputs[i], ctx);
      d.trace.sample = i;
      logits = d.logits;
      exit_sum += static_cast<double>(d.trace.exit_index);
      if (opt.logs) res.exit_log += d.trace.jsonl();
      res.exits.push_back(std::move(d.trace));
    } else {
      logits = model.forward(ds.inputs[i], ctx);
    }
    const std::size_t pred = argmax(logits);
    res.predictions.push_back(pred);
    correct += pred == ds.labels[i] ? 1.0 : 0.0;
    task += cross_entropy(logits, {ds.labels[i]}).item();
    res.macs.push_back(rec.total_macs());
    macs += static_cast<double>(rec.total_macs());
    for (std::size_t r = 0; r < ctx.routing.size(); ++r) {
      if (opt.logs) res.routing_log += routing_jsonl(ctx.routing[r], i, ctx.routing_blocks[r]);
    }
    for (auto& a : ctx.routing) {
      a.probs = a.probs.detach();
      a.gates = a.gates.detach();
    }
    if (!ctx.routing.empty()) {
      const RoutingAssignment& a = ctx.routing.front();
      if (load.empty()) load.assign(a.n_experts, 0.0);
      for (std::size_t e = 0; e < a.n_experts; ++e) load[e] += static_cast<double>(a.per_expert[e].size());
      for (long p : a.primary_expert()) {
        primary.push_back(p);
        cluster.push_back(ds.meta[i].cluster);
      }
    }
    routes.push_back(std::move(ctx.routing));
    if (!ctx.alive.kept.empty()) {
      if (opt.logs) res.alive_log += ctx.alive.jsonl(i);
      if (!ds.meta[i].informative.empty()) res.recall.push_back(informative_recall(ctx.alive.kept.back(), ds.meta[i].informative));
    }
  }
  const double n = static_cast<double>(ds.size());
  res.record.loss_task = task / n;
  const Tensor bal = batch_balancing_loss(routes);
  res.record.loss_balance = bal.defined() ? bal.item() : 0.0;
  res.record.accuracy = correct / n;
  res.record.mean_macs = macs / n;
  if (!load.empty()) res.record.load_cv = coefficient_of_variation(load);
  if (!primary.empty() && ds.id == "cluster-experts") res.record.nmi = normalized_mutual_information(primary, cluster);
  if (exits) res.record.mean_exit = exit_sum / n;
  if (!res.recall.empty()) {
    double r = 0.0;
    for (double v : res.recall) r += v;
    res.record.token_recall = r / static_cast<double>(res.recall.size());
  }
  return res;
}

/// Loss of one training sample: task loss (the joint exit loss when exits
/// exist, plus the branching loss in branching mode) and the weighted
/// balancing loss. Returns {total, task, final logits}.
struct SampleLoss {
  Tensor total;
  Tensor task;
  Tensor logits;
};

inline SampleLoss training_loss(const Model& model, const Tensor& x, std::size_t y, const ExperimentConfig& cfg,
                                ForwardContext& ctx) {
  auto s = model.stem(x, ctx);
  std::vector<Tensor> logits, gates;
  const bool branching = cfg.early_exit.gate_mode == GateMode::branching;
  for (std::size_t i = 0; i < model.num_blocks(); ++i) {
    model.run_block(i, s, ctx);
    const bool last = i + 1 == model.num_blocks();
    if (!last && !model.has_exit(i)) continue;
    logits.push_back(model.exit_logits(i, s, ctx));
    if (!last && branching) {
      Tensor l = model.gate_logit(i, s, ctx);
      if (cfg.early_exit.straight_through_gates) {
        SamplerConfig sc{ctx.tau, 1, SampleMode::straight_through, true};
        SampleResult r = sample_ste(GateScores(concat({reshape(l, {1}), Tensor::zeros({1})}, 0)), sc, *ctx.rng);
        gates.push_back(reshape(gather_rows(r.values, {0}), {}));
      } else {
        gates.push_back(sigmoid(l));
      }
    }
  }
  SampleLoss out;
  out.logits = logits.back();
  out.task = logits.size() > 1 ? joint_loss(logits, y, cfg.early_exit) : cross_entropy(logits.back(), {y});
  if (branching && logits.size() > 1) {
    std::vector<Tensor> probs;
    for (const auto& l : logits) probs.push_back(softmax(l, 0));
    out.task = add(out.task, nll(mix_branches(probs, gates), {y}));
  }
  out.total = ctx.aux_loss.defined() ? add(out.task, ctx.aux_loss) : out.task;
  return out;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << text;
}

inline void append_line(const std::filesystem::path& path, const std::string& line) {
  std::ofstream out(path, std::ios::binary | std::ios::app);
  if (!out) throw Error("cannot append to '" + path.string() + "'");
  out << line << '\n';
}

inline Json checkpoint_json(const Model& model) {
  Json params = Json::array();
  for (const auto& e : model.params().entries()) {
    params.push_back({{"name", e.name}, {"shape", e.value.shape()}, {"data", e.value.to_vector()}});
  }
  return Json{{"format", "condcomp-checkpoint"}, {"version", 1}, {"model", to_json(model.spec())}, {"params", params}};
}

inline void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  write_text(path, checkpoint_json(model).dump() + "\n");
}

inline Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read checkpoint '" + path.string() + "'");
  Json j;
  try {
    j = Json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("checkpoint '" + path.string() + "' is not valid JSON: " + e.what());
  }
  if (j.value("format", "") != "condcomp-checkpoint" || j.value("version", 0) != 1) {
    throw ConfigError("checkpoint '" + path.string() + "' has an unsupported format or version");
  }
  Model model(model_spec_from_json(j.at("model")), 0);
  std::size_t loaded = 0;
  for (const auto& p : j.at("params")) {
    const std::string name = p.at("name").get<std::string>();
    if (!model.params().contains(name)) throw ConfigError("checkpoint: unknown parameter '" + name + "'");
    Tensor& t = model.params().get(name);
    if (p.at("shape").get<Shape>() != t.shape()) throw ConfigError("checkpoint: shape mismatch for '" + name + "'");
    const auto data = p.at("data").get<std::vector<double>>();
    if (data.size() != t.numel()) throw ConfigError("checkpoint: data length mismatch for '" + name + "'");
    std::copy(data.begin(), data.end(), t.mutable_data().begin());
    ++loaded;
  }
  if (loaded != model.params().size()) throw ConfigError("checkpoint: missing parameters");
  return model;
}

/// routing.jsonl, exits.jsonl and alive.jsonl, each only when the model
/// produced that kind of decision.
inline void write_decision_logs(const EvalResult& r, const std::filesystem::path& dir) {
  if (!r.routing_log.empty()) write_text(dir / "routing.jsonl", r.routing_log);
  if (!r.exit_log.empty()) write_text(dir / "exits.jsonl", r.exit_log);
  if (!r.alive_log.empty()) write_text(dir / "alive.jsonl", r.alive_log);
}

enum class SweepKnob { ee_threshold, k, keep_ratio };

inline SweepKnob parse_sweep_knob(std::string_view s) {
  if (s == "ee-threshold") return SweepKnob::ee_threshold;
  if (s == "k") return SweepKnob::k;
  if (s == "keep-ratio") return SweepKnob::keep_ratio;
  throw ConfigError("unknown sweep knob '" + std::string(s) + "' (expected ee-threshold, k or keep-ratio)");
}

inline std::string to_string(SweepKnob k) {
  switch (k) {
    case SweepKnob::ee_threshold: return "ee-threshold";
    case SweepKnob::k: return "k";
    case SweepKnob::keep_ratio: return "keep-ratio";
  }
  return "?";
}

/// Evaluates the model at each knob value and returns one curve row per value.
inline std::vector<CurvePoint> tradeoff_sweep(const Model& model, const SyntheticDataset& ds, const ExperimentConfig& cfg,
                                              SweepKnob knob, const std::vector<double>& values) {
  const ModelSpec& spec = model.spec();
  if (knob == SweepKnob::ee_threshold && !has_exits(spec)) throw ConfigError("sweep: ee-threshold needs exit heads");
  if (knob == SweepKnob::ee_threshold && cfg.early_exit.gate_mode != GateMode::threshold) {
    throw ConfigError("sweep: ee-threshold needs gate_mode 'threshold'");
  }
  if (knob == SweepKnob::k && !(spec.any(Mechanism::moe) && spec.moe.variant == MoEVariant::sparse)) {
    throw ConfigError("sweep: k needs a sparse MoE block");
  }
  if (knob == SweepKnob::keep_ratio && !spec.any(Mechanism::token_select)) {
    throw ConfigError("sweep: keep-ratio needs a token-select block");
  }
  std::vector<CurvePoint> rows;
  for (double v : values) {
    EvalOptions opt;
    switch (knob) {
      case SweepKnob::ee_threshold: opt.threshold = v; break;
      case SweepKnob::k: {
        if (!(v >= 1) || v != std::floor(v)) throw ConfigError("sweep: k values must be positive integers");
        opt.k = static_cast<std::size_t>(v);
        break;
      }
      case SweepKnob::keep_ratio:
        if (!(v > 0 && v <= 1)) throw ConfigError("sweep: keep-ratio values must be in (0, 1]");
        opt.keep_ratio = v;
        break;
    }
    EvalResult r = evaluate(model, ds, cfg, cfg.epochs, opt);
    rows.push_back(CurvePoint{to_string(knob), v, r.record.mean_macs, r.record.accuracy, ds.size(), cfg.seed});
  }
  return rows;
}

struct TrainResult {
  Model model;
  DataSplits data;
  std::vector<MetricsRecord> records;
  EvalResult final_eval;
};

/// Trains per the config. When `out_dir` is given, writes config.json,
/// metrics.jsonl (one record per epoch and split), checkpoint.json and the
/// decision logs of the final test evaluation.
inline TrainResult train(const ExperimentConfig& cfg, const std::optional<std::filesystem::path>& out_dir = std::nullopt) {
  cfg.validate();
  TrainResult res{Model(cfg.model, cfg.seed), make_splits(cfg), {}, {}};
  std::filesystem::path metrics_path;
  if (out_dir) {
    std::filesystem::create_directories(*out_dir);
    write_text(*out_dir / "config.json", to_json(cfg).dump(2) + "\n");
    metrics_path = *out_dir / "metrics.jsonl";
    write_text(metrics_path, "");
  }
  auto emit = [&](const MetricsRecord& r) {
    res.records.push_back(r);
    if (out_dir) append_line(metrics_path, r.to_json().dump());
  };
  Model& model = res.model;
  const auto& train_set = res.data.train;
  Rng rng = derive_rng(cfg.seed, 2);
  emit(evaluate(model, res.data.test, cfg, 0).record);

  const std::size_t n = train_set.size();
  const std::size_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_steps = steps_per_epoch * cfg.epochs;
  std::size_t step = 0;
  std::vector<std::size_t> order(n);
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    shuffle(order, rng);
    MetricsRecord tr;
    tr.epoch = epoch;
    tr.split = "train";
    double task = 0.0, bal = 0.0, correct = 0.0, macs = 0.0;
    for (std::size_t b = 0; b < n; b += cfg.batch_size, ++step) {
      const std::size_t end = std::min(n, b + cfg.batch_size);
      const double inv = 1.0 / static_cast<double>(end - b);
      const double tau = cfg.tau.at(step, total_steps);
      model.params().zero_grad();
      std::vector<std::vector<RoutingAssignment>> routes;  // per sample, per sparse MoE block
      for (std::size_t p = b; p < end; ++p) {
        const std::size_t i = order[p];
        ForwardContext ctx;
        Recorder rec;
        ctx.training = true;
        ctx.rng = &rng;
        ctx.tau = tau;
        ctx.recorder = &rec;
        ctx.masked_tokens = true;
        ctx.defer_balance = true;
        SampleLoss l = training_loss(model, train_set.inputs[i], train_set.labels[i], cfg, ctx);
        const double v = l.total.item();
        if (!std::isfinite(v)) {
          throw Error("training diverged: non-finite loss " + std::to_string(v) + " at epoch " + std::to_string(epoch) +
                      ", sample " + std::to_string(i));
        }
        task += l.task.item();
        routes.push_back(std::move(ctx.routing));
        correct += argmax(l.logits) == train_set.labels[i] ? 1.0 : 0.0;
        macs += static_cast<double>(rec.total_macs());
        if (l.total.requires_grad()) backward(scale(l.total, inv));
      }
      // Balancing is measured over the whole batch: a single sample often
      // comes from one input mode, and balancing it alone would push its
      // tokens apart instead of letting experts specialize.
      Tensor batch_bal = batch_balancing_loss(routes);
      if (batch_bal.defined()) {
        bal += batch_bal.item() * static_cast<double>(end - b);
        const double lambda = cfg.model.moe.balance_weight;
        if (lambda > 0 && batch_bal.requires_grad()) backward(scale(batch_bal, lambda));
      }
      model.params().step(cfg.optimizer, cfg.lr);
    }
    const double dn = static_cast<double>(n);
    tr.loss_task = task / dn;
    tr.loss_balance = bal / dn;
    tr.accuracy = correct / dn;
    tr.mean_macs = macs / dn;
    emit(tr);
    emit(evaluate(model, res.data.test, cfg, epoch).record);
  }
  if (out_dir) {
    save_checkpoint(model, *out_dir / "checkpoint.json");
    EvalOptions opt;
    opt.logs = true;
    res.final_eval = evaluate(model, res.data.test, cfg, cfg.epochs, opt);
    write_decision_logs(res.final_eval, *out_dir);
  }
  return res;
}

}  // namespace condcomp

#endif  // CONDCOMP_HARNESS_HPP_
