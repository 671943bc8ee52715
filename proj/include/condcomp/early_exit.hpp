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

#ifndef CONDCOMP_EARLY_EXIT_HPP_
#define CONDCOMP_EARLY_EXIT_HPP_

#include <cmath>
#include <concepts>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "condcomp/context.hpp"
#include "condcomp/gumbel.hpp"
#include "condcomp/ops.hpp"

namespace condcomp {

/// A backbone that can be advanced one block at a time, with classifier
/// heads after some blocks and a final head after the last one.
template <class Net>
concept ExitNetwork = requires(const Net& net, typename Net::State& s, const Tensor& x, ForwardContext& ctx,
                               std::size_t i) {
  { net.num_blocks() } -> std::convertible_to<std::size_t>;
  { net.has_exit(i) } -> std::convertible_to<bool>;
  { net.stem(x, ctx) } -> std::same_as<typename Net::State>;
  net.run_block(i, s, ctx);
  { net.exit_logits(i, s, ctx) } -> std::same_as<Tensor>;
  { net.gate_logit(i, s, ctx) } -> std::same_as<Tensor>;
};

enum class HaltRule { max_prob, entropy };
enum class GateMode { threshold, branching };

inline HaltRule parse_halt_rule(std::string_view s) {
  if (s == "max-prob") return HaltRule::max_prob;
  if (s == "entropy") return HaltRule::entropy;
  throw Error("unknown halting rule '" + std::string(s) + "'");
}

inline std::string to_string(HaltRule r) { return r == HaltRule::max_prob ? "max-prob" : "entropy"; }

inline GateMode parse_gate_mode(std::string_view s) {
  if (s == "threshold") return GateMode::threshold;
  if (s == "branching") return GateMode::branching;
  throw Error("unknown gate mode '" + std::string(s) + "'");
}

inline std::string to_string(GateMode m) { return m == GateMode::threshold ? "threshold" : "branching"; }

struct EENNConfig {
  double alpha = 1.0;
  std::vector<double> betas;  // one per early exit; empty means all 1
  HaltRule rule = HaltRule::max_prob;
  double threshold = 0.9;
  GateMode gate_mode = GateMode::threshold;
  bool straight_through_gates = false;  // branching: Bernoulli STE gates instead of logistic values

  double beta(std::size_t i) const { return betas.empty() ? 1.0 : betas.at(i); }

  void validate(std::size_t early_exits) const {
    if (alpha < 0) throw Error("early exit: alpha must be nonnegative");
    if (!betas.empty() && betas.size() != early_exits) {
      throw Error("early exit: " + std::to_string(betas.size()) + " beta weights for " + std::to_string(early_exits) +
                  " early exits");
    }
    double total = alpha;
    for (std::size_t i = 0; i < early_exits; ++i) {
      if (beta(i) < 0) throw Error("early exit: beta weights must be nonnegative");
      total += beta(i);
    }
    if (!(total > 0)) throw Error("early exit: loss weights sum to zero");
    if (!std::isfinite(threshold)) throw Error("early exit: threshold must be finite");
  }
};

struct ExitTrace {
  std::size_t sample = 0;
  std::size_t exit_index = 0;  // 1-based; the final head has the largest index
  double confidence = 0.0;
  std::vector<double> gates;   // gate values evaluated before halting
  std::uint64_t macs = 0;
  std::size_t prediction = 0;

  std::string jsonl() const {
    nlohmann::json j;
    j["sample"] = sample;
    j["exit"] = exit_index;
    j["confidence"] = confidence;
    j["gates"] = gates;
    j["macs"] = macs;
    j["prediction"] = prediction;
    return j.dump() + "\n";
  }
};

/// Block index of every exit in evaluation order; the final head comes last.
template <ExitNetwork Net>
std::vector<std::size_t> exit_blocks(const Net& net) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i + 1 < net.num_blocks(); ++i)
    if (net.has_exit(i)) out.push_back(i);
  out.push_back(net.num_blocks() - 1);
  return out;
}

/// Confidence of a prediction: max softmax probability, or 1 - H / ln C.
inline double confidence(const Tensor& logits, HaltRule rule) {
  Tensor p = softmax(reshape(logits, {logits.numel()}), 0);
  auto v = p.data();
  if (rule == HaltRule::max_prob) {
    double m = 0.0;
    for (double x : v) m = std::max(m, x);
    return m;
  }
  double h = 0.0;
  for (double x : v)
    if (x > 0) h -= x * std::log(x);
  return 1.0 - h / std::log(static_cast<double>(v.size()));
}

inline std::size_t argmax(const Tensor& t) { return top_k_ranked(t.data(), 1).front(); }

/// Logits of every exit from one pass; each block runs once.
template <ExitNetwork Net>
std::vector<Tensor> forward_all_exits(const Net& net, const Tensor& x, ForwardContext& ctx) {
  auto s = net.stem(x, ctx);
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < net.num_blocks(); ++i) {
    net.run_block(i, s, ctx);
    if (i + 1 == net.num_blocks() || net.has_exit(i)) out.push_back(net.exit_logits(i, s, ctx));
  }
  return out;
}

/// alpha * CE(final) + sum_i beta_i * CE(exit i).
inline Tensor joint_loss(const std::vector<Tensor>& exit_logits, std::size_t target, const EENNConfig& cfg) {
  if (exit_logits.empty()) throw Error("joint_loss: no predictions");
  const std::size_t early = exit_logits.size() - 1;
  cfg.validate(early);
  Tensor loss = scale(cross_entropy(exit_logits.back(), {target}), cfg.alpha);
  for (std::size_t i = 0; i < early; ++i) loss = add(loss, scale(cross_entropy(exit_logits[i], {target}), cfg.beta(i)));
  return loss;
}

struct ExitDecision {
  std::size_t prediction = 0;
  Tensor logits;
  ExitTrace trace;
};

namespace detail {

/// Routes recording into a local recorder for the duration of a call.
class ScopedRecorder {
 public:
  explicit ScopedRecorder(ForwardContext& ctx) : ctx_(ctx), outer_(ctx.recorder) { ctx_.recorder = &local_; }
  ~ScopedRecorder() {
    ctx_.recorder = outer_;
    if (outer_ != nullptr) {
      for (const auto& e : local_.entries()) outer_->add(e.layer, e.macs, e.elem_ops);
      for (const auto& e : local_.expert_evals()) outer_->note_expert_eval(e.layer, e.expert, e.rows);
    }
  }
  ScopedRecorder(const ScopedRecorder&) = delete;
  ScopedRecorder& operator=(const ScopedRecorder&) = delete;

  std::uint64_t macs() const { return local_.total_macs(); }

 private:
  ForwardContext& ctx_;
  Recorder* outer_;
  Recorder local_;
};

}  // namespace detail

/// Evaluates blocks in order and halts at the first exit whose confidence
/// reaches the threshold; the final exit always accepts. Later blocks are
/// never run.
template <ExitNetwork Net>
ExitDecision infer_threshold(const Net& net, const Tensor& x, const EENNConfig& cfg, ForwardContext& ctx) {
  detail::ScopedRecorder scope(ctx);
  ExitDecision d;
  auto s = net.stem(x, ctx);
  std::size_t exit_no = 0;
  for (std::size_t i = 0; i < net.num_blocks(); ++i) {
    net.run_block(i, s, ctx);
    const bool last = i + 1 == net.num_blocks();
    if (!last && !net.has_exit(i)) continue;
    ++exit_no;
    Tensor logits = net.exit_logits(i, s, ctx);
    const double c = confidence(logits, cfg.rule);
    if (last || c >= cfg.threshold) {
      d.logits = logits;
      d.prediction = argmax(logits);
      d.trace.exit_index = exit_no;
      d.trace.confidence = c;
      break;
    }
  }
  d.trace.prediction = d.prediction;
  d.trace.macs = scope.macs();
  return d;
}

/// Exits at the first gate with value >= 0.5, else at the final head.
template <ExitNetwork Net>
ExitDecision infer_gated(const Net& net, const Tensor& x, ForwardContext& ctx) {
  detail::ScopedRecorder scope(ctx);
  ExitDecision d;
  auto s = net.stem(x, ctx);
  std::size_t exit_no = 0;
  for (std::size_t i = 0; i < net.num_blocks(); ++i) {
    net.run_block(i, s, ctx);
    const bool last = i + 1 == net.num_blocks();
    if (!last && !net.has_exit(i)) continue;
    ++exit_no;
    bool halt = last;
    if (!last) {
      const double g = sigmoid(net.gate_logit(i, s, ctx)).item();
      d.trace.gates.push_back(g);
      halt = g >= 0.5;
    }
    if (halt) {
      d.logits = net.exit_logits(i, s, ctx);
      d.prediction = argmax(d.logits);
      d.trace.exit_index = exit_no;
      d.trace.confidence = confidence(d.logits, HaltRule::max_prob);
      break;
    }
  }
  d.trace.prediction = d.prediction;
  d.trace.macs = scope.macs();
  return d;
}

struct BranchOutput {
  Tensor probs;                    // y~_1, [n_classes]
  std::vector<Tensor> gates;       // gamma_i, scalars
  std::vector<Tensor> exit_probs;  // softmax of each exit, final last
};

/// y~_i = gamma_i y_i + (1 - gamma_i) y~_{i+1}, starting from the final exit.
inline Tensor mix_branches(const std::vector<Tensor>& exit_probs, const std::vector<Tensor>& gates) {
  if (exit_probs.empty() || gates.size() + 1 != exit_probs.size()) {
    throw Error("branch_output: need one gate per early exit");
  }
  Tensor acc = exit_probs.back();
  for (std::size_t i = gates.size(); i-- > 0;) {
    Tensor g = reshape(gates[i], {});
    acc = add(mul(exit_probs[i], g), mul(acc, add_scalar(neg(g), 1.0)));
  }
  return acc;
}

/// Soft composition of all exits. Predictions are class probabilities, so
/// the result is a convex combination of them. Gates are logistic values, or
/// Bernoulli straight-through samples from a two-way Gumbel-Softmax over [l, 0].
template <ExitNetwork Net>
BranchOutput branch_output(const Net& net, const Tensor& x, ForwardContext& ctx, bool straight_through = false) {
  BranchOutput out;
  auto s = net.stem(x, ctx);
  for (std::size_t i = 0; i < net.num_blocks(); ++i) {
    net.run_block(i, s, ctx);
    const bool last = i + 1 == net.num_blocks();
    if (!last && !net.has_exit(i)) continue;
    Tensor logits = net.exit_logits(i, s, ctx);
    out.exit_probs.push_back(softmax(logits, 0));
    if (last) break;
    Tensor l = net.gate_logit(i, s, ctx);
    if (straight_through) {
      if (ctx.rng == nullptr) throw Error("branch_output: straight-through gates need a generator");
      SamplerConfig cfg{ctx.tau, 1, SampleMode::straight_through, true};
      SampleResult r = sample_ste(GateScores(concat({reshape(l, {1}), Tensor::zeros({1})}, 0)), cfg, *ctx.rng);
      out.gates.push_back(reshape(gather_rows(r.values, {0}), {}));
    } else {
      out.gates.push_back(sigmoid(l));
    }
  }
  out.probs = mix_branches(out.exit_probs, out.gates);
  return out;
}

struct GammaVector {
  std::vector<double> gamma;  // Gamma_j = prod_{i<j} (1 - g_i) * g_j
  double residual = 1.0;      // prod_i (1 - g_i)
};

/// Stick-breaking weights of the exits from their gate values.
inline GammaVector gamma_vector(const std::vector<double>& gates) {
  GammaVector out;
  double stick = 1.0;
  for (double g : gates) {
    if (!(g >= 0.0 && g <= 1.0)) throw Error("gamma_vector: gate value " + std::to_string(g) + " outside [0, 1]");
    out.gamma.push_back(stick * g);
    stick *= 1.0 - g;
  }
  out.residual = stick;
  return out;
}

}  // namespace condcomp

#endif  // CONDCOMP_EARLY_EXIT_HPP_
