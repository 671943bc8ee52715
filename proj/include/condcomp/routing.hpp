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

#ifndef CONDCOMP_ROUTING_HPP_
#define CONDCOMP_ROUTING_HPP_

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "condcomp/gumbel.hpp"
#include "condcomp/ops.hpp"
#include "condcomp/rng.hpp"

namespace condcomp {

enum class RoutingStrategy { token_choice, expert_choice, random };
enum class RouteMode { greedy, stochastic };

inline RoutingStrategy parse_routing_strategy(std::string_view s) {
  if (s == "token-choice") return RoutingStrategy::token_choice;
  if (s == "expert-choice") return RoutingStrategy::expert_choice;
  if (s == "random") return RoutingStrategy::random;
  throw Error("unknown routing strategy '" + std::string(s) + "'");
}

inline std::string to_string(RoutingStrategy s) {
  switch (s) {
    case RoutingStrategy::token_choice: return "token-choice";
    case RoutingStrategy::expert_choice: return "expert-choice";
    case RoutingStrategy::random: return "random";
  }
  return "?";
}

struct RouterConfig {
  std::size_t n_experts = 4;
  std::size_t k = 1;
  RoutingStrategy strategy = RoutingStrategy::token_choice;
  RouteMode mode = RouteMode::greedy;
  double balance_weight = 0.0;  // lambda
  double temperature = 1.0;     // gate softmax temperature

  void validate(std::size_t n_tokens) const {
    if (n_experts < 1) throw Error("router: need at least one expert");
    if (k < 1) throw Error("router: k must be at least 1");
    if (balance_weight < 0) throw Error("router: balancing weight must be nonnegative");
    if (!(temperature > 0)) throw Error("router: temperature must be positive");
    if (strategy != RoutingStrategy::expert_choice && k > n_experts) {
      throw Error("router: k=" + std::to_string(k) + " exceeds " + std::to_string(n_experts) + " experts");
    }
    if (strategy == RoutingStrategy::expert_choice && k > n_tokens) {
      throw Error("router: expert-choice k=" + std::to_string(k) + " exceeds " + std::to_string(n_tokens) + " tokens");
    }
  }
};

/// One trainable vector per expert, same dimension as the routed tokens.
struct ExpertEmbeddings {
  Tensor weight;  // [n_experts, d]

  std::size_t n_experts() const { return weight.dim(0); }
  std::size_t dim() const { return weight.dim(1); }
};

struct Route {
  std::size_t expert = 0;
  double weight = 0.0;
};

struct RoutingAssignment {
  std::size_t n_tokens = 0;
  std::size_t n_experts = 0;
  std::vector<std::vector<Route>> per_token;        // ascending expert ids
  std::vector<std::vector<std::size_t>> per_expert;  // ascending token ids
  Tensor probs;                                     // [n_tokens, n_experts], rows sum to 1
  Tensor gates;                                     // [n_tokens, n_experts], zero off the support

  std::size_t dispatch_count() const {
    std::size_t n = 0;
    for (const auto& e : per_expert) n += e.size();
    return n;
  }

  /// Tokens dispatched to each expert divided by the token count.
  std::vector<double> dispatch_fractions() const {
    std::vector<double> f(n_experts, 0.0);
    for (std::size_t e = 0; e < n_experts; ++e)
      f[e] = static_cast<double>(per_expert[e].size()) / static_cast<double>(n_tokens);
    return f;
  }

  /// Highest-weight expert of each token (ties to the lower id), or -1 when unrouted.
  std::vector<long> primary_expert() const {
    std::vector<long> out(n_tokens, -1);
    for (std::size_t t = 0; t < n_tokens; ++t) {
      double best = -1.0;
      for (const auto& r : per_token[t])
        if (r.weight > best) {
          best = r.weight;
          out[t] = static_cast<long>(r.expert);
        }
    }
    return out;
  }
};

/// entry (t, e) = token_t . emb_e
inline Tensor affinity_scores(const Tensor& tokens, const ExpertEmbeddings& emb) {
  if (tokens.rank() != 2 || tokens.dim(1) != emb.dim()) {
    throw ShapeError("affinity_scores: tokens " + shape_str(tokens.shape()) + " do not match expert embeddings " +
                     shape_str(emb.weight.shape()));
  }
  return matmul(tokens, transpose(emb.weight));
}

namespace detail {

inline RoutingAssignment assemble_assignment(const std::vector<std::uint8_t>& support, Tensor gates, Tensor probs,
                                             std::size_t n_tok, std::size_t n_exp) {
  RoutingAssignment a;
  a.n_tokens = n_tok;
  a.n_experts = n_exp;
  a.per_token.assign(n_tok, {});
  a.per_expert.assign(n_exp, {});
  auto g = gates.data();
  for (std::size_t t = 0; t < n_tok; ++t)
    for (std::size_t e = 0; e < n_exp; ++e)
      if (support[t * n_exp + e]) {
        a.per_token[t].push_back(Route{e, g[t * n_exp + e]});
        a.per_expert[e].push_back(t);
      }
  a.gates = std::move(gates);
  a.probs = std::move(probs);
  return a;
}

inline Tensor support_tensor(const std::vector<std::uint8_t>& support, std::size_t rows, std::size_t cols) {
  std::vector<double> v(support.begin(), support.end());
  return Tensor::matrix(rows, cols, std::move(v));
}

}  // namespace detail

/// Each token picks its k highest-affinity experts. Gate weights are the
/// softmax of the selected affinities renormalized over the selected support.
///
/// Stochastic mode perturbs the affinities with Gumbel noise before the top-k
/// and routes the gate gradient through softmax((aff/T + g)/tau)
/// straight-through; greedy mode is deterministic with ties to lower indices.
inline RoutingAssignment route_token_choice(const Tensor& aff, std::size_t k, Rng* rng = nullptr,
                                            RouteMode mode = RouteMode::greedy, double temperature = 1.0,
                                            double tau = 1.0) {
  if (aff.rank() != 2) throw ShapeError("route_token_choice: affinities must be a matrix, got " + shape_str(aff.shape()));
  const std::size_t n_tok = aff.dim(0), n_exp = aff.dim(1);
  if (k < 1 || k > n_exp) throw Error("route_token_choice: k=" + std::to_string(k) + " outside [1, " + std::to_string(n_exp) + "]");
  if (mode == RouteMode::stochastic && rng == nullptr) throw Error("route_token_choice: stochastic mode needs a generator");
  Tensor logits = scale(aff, 1.0 / temperature);
  auto lv = logits.data();
  std::vector<std::uint8_t> support(n_tok * n_exp, 0);
  std::vector<double> noise(n_tok * n_exp, 0.0);
  for (std::size_t t = 0; t < n_tok; ++t) {
    std::vector<double> row(lv.begin() + static_cast<std::ptrdiff_t>(t * n_exp),
                            lv.begin() + static_cast<std::ptrdiff_t>((t + 1) * n_exp));
    if (mode == RouteMode::stochastic) {
      auto g = gumbel_noise(n_exp, *rng);
      for (std::size_t e = 0; e < n_exp; ++e) {
        noise[t * n_exp + e] = g[e];
        row[e] += g[e];
      }
    }
    for (std::size_t e : top_k_indices(row, k)) support[t * n_exp + e] = 1;
  }
  Tensor probs = softmax(logits, 1);
  Tensor renorm = weighted_softmax(logits, detail::support_tensor(support, n_tok, n_exp));
  Tensor gates = renorm;
  if (mode == RouteMode::stochastic) {
    Tensor soft = softmax(add(logits, Tensor::matrix(n_tok, n_exp, noise)), 1, tau);
    gates = straight_through(renorm.detach(), soft);
  }
  return detail::assemble_assignment(support, gates, probs, n_tok, n_exp);
}

/// Each expert picks its k highest-affinity tokens; tokens may be picked by
/// several experts or by none. Gate weight of (t, e) is the softmax over the
/// expert's selected column entries.
inline RoutingAssignment route_expert_choice(const Tensor& aff, std::size_t k, double temperature = 1.0) {
  if (aff.rank() != 2) throw ShapeError("route_expert_choice: affinities must be a matrix, got " + shape_str(aff.shape()));
  const std::size_t n_tok = aff.dim(0), n_exp = aff.dim(1);
  if (k < 1 || k > n_tok) throw Error("route_expert_choice: k=" + std::to_string(k) + " outside [1, " + std::to_string(n_tok) + "]");
  Tensor logits = scale(aff, 1.0 / temperature);
  auto lv = logits.data();
  std::vector<std::uint8_t> support(n_tok * n_exp, 0);
  std::vector<std::uint8_t> support_t(n_exp * n_tok, 0);
  for (std::size_t e = 0; e < n_exp; ++e) {
    std::vector<double> col(n_tok);
    for (std::size_t t = 0; t < n_tok; ++t) col[t] = lv[t * n_exp + e];
    for (std::size_t t : top_k_indices(col, k)) {
      support[t * n_exp + e] = 1;
      support_t[e * n_tok + t] = 1;
    }
  }
  Tensor gates = transpose(weighted_softmax(transpose(logits), detail::support_tensor(support_t, n_exp, n_tok)));
  return detail::assemble_assignment(support, gates, softmax(logits, 1), n_tok, n_exp);
}

/// k experts per token drawn uniformly without replacement, weights 1/k.
inline RoutingAssignment route_random(std::size_t n_tok, std::size_t n_exp, std::size_t k, Rng& rng) {
  if (k < 1 || k > n_exp) throw Error("route_random: k=" + std::to_string(k) + " outside [1, " + std::to_string(n_exp) + "]");
  std::vector<std::uint8_t> support(n_tok * n_exp, 0);
  std::vector<double> gates(n_tok * n_exp, 0.0);
  std::vector<std::size_t> perm(n_exp);
  for (std::size_t t = 0; t < n_tok; ++t) {
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    for (std::size_t i = 0; i < k; ++i) {
      std::swap(perm[i], perm[i + uniform_index(rng, n_exp - i)]);
      support[t * n_exp + perm[i]] = 1;
      gates[t * n_exp + perm[i]] = 1.0 / static_cast<double>(k);
    }
  }
  return detail::assemble_assignment(support, Tensor::matrix(n_tok, n_exp, gates),
                                     Tensor::full({n_tok, n_exp}, 1.0 / static_cast<double>(n_exp)), n_tok, n_exp);
}

/// Dispatches to the configured strategy.
inline RoutingAssignment route(const Tensor& aff, const RouterConfig& cfg, Rng* rng, double tau = 1.0) {
  cfg.validate(aff.dim(0));
  if (aff.dim(1) != cfg.n_experts) {
    throw ShapeError("route: affinities " + shape_str(aff.shape()) + " for " + std::to_string(cfg.n_experts) + " experts");
  }
  switch (cfg.strategy) {
    case RoutingStrategy::token_choice: return route_token_choice(aff, cfg.k, rng, cfg.mode, cfg.temperature, tau);
    case RoutingStrategy::expert_choice: return route_expert_choice(aff, cfg.k, cfg.temperature);
    case RoutingStrategy::random:
      if (rng == nullptr) throw Error("route: random routing needs a generator");
      return route_random(aff.dim(0), cfg.n_experts, cfg.k, *rng);
  }
  throw Error("route: unknown strategy");
}

/// Switch-style balancing loss n * sum_i fhat_i * Pbar_i, where fhat_i is
/// expert i's share of all dispatches (held constant) and Pbar_i the mean
/// router probability. Equals 1 for uniform dispatch and probability.
inline Tensor balancing_loss(const RoutingAssignment& a) {
  const std::size_t total = a.dispatch_count();
  if (total == 0) return Tensor::scalar(0.0);
  std::vector<double> share(a.n_experts);
  for (std::size_t e = 0; e < a.n_experts; ++e)
    share[e] = static_cast<double>(a.per_expert[e].size()) / static_cast<double>(total);
  Tensor pbar = mean(a.probs, 0);
  return scale(sum(mul(pbar, Tensor::vector(share))), static_cast<double>(a.n_experts));
}

/// Stacks assignments of several samples into one over all their tokens, so
/// a batch can be balanced as a whole. Token ids are offset per part.
inline RoutingAssignment concat_assignments(const std::vector<const RoutingAssignment*>& parts) {
  if (parts.empty()) throw Error("concat_assignments: no assignments");
  RoutingAssignment out;
  out.n_experts = parts.front()->n_experts;
  out.per_expert.resize(out.n_experts);
  std::vector<Tensor> probs, gates;
  for (const RoutingAssignment* a : parts) {
    if (a->n_experts != out.n_experts) throw Error("concat_assignments: expert counts differ");
    for (std::size_t e = 0; e < out.n_experts; ++e)
      for (std::size_t t : a->per_expert[e]) out.per_expert[e].push_back(out.n_tokens + t);
    out.per_token.insert(out.per_token.end(), a->per_token.begin(), a->per_token.end());
    out.n_tokens += a->n_tokens;
    probs.push_back(a->probs);
    gates.push_back(a->gates);
  }
  out.probs = concat(probs, 0);
  out.gates = concat(gates, 0);
  return out;
}

struct LoadStats {
  std::vector<double> dispatch_fraction;  // f_i
  std::vector<double> mean_prob;          // Pbar_i
  double cv = 0.0;                        // std(f) / mean(f), population std
  std::vector<bool> starved;              // f_i < threshold
};

inline double coefficient_of_variation(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double mu = 0.0;
  for (double x : v) mu += x;
  mu /= static_cast<double>(v.size());
  if (mu == 0.0) return 0.0;
  double var = 0.0;
  for (double x : v) var += (x - mu) * (x - mu);
  var /= static_cast<double>(v.size());
  return std::sqrt(var) / mu;
}

inline LoadStats load_stats(const RoutingAssignment& a, double starvation_threshold) {
  LoadStats s;
  s.dispatch_fraction = a.dispatch_fractions();
  s.mean_prob.assign(a.n_experts, 0.0);
  auto p = a.probs.data();
  for (std::size_t t = 0; t < a.n_tokens; ++t)
    for (std::size_t e = 0; e < a.n_experts; ++e) s.mean_prob[e] += p[t * a.n_experts + e];
  for (double& v : s.mean_prob) v /= static_cast<double>(a.n_tokens);
  s.cv = coefficient_of_variation(s.dispatch_fraction);
  for (double f : s.dispatch_fraction) s.starved.push_back(f < starvation_threshold);
  return s;
}

/// One JSON object per token: {"sample", "layer", "token", "experts", "weights"}.
inline std::string routing_jsonl(const RoutingAssignment& a, std::size_t sample_id = 0, std::size_t layer = 0) {
  std::string out;
  for (std::size_t t = 0; t < a.n_tokens; ++t) {
    nlohmann::json j;
    j["sample"] = sample_id;
    j["layer"] = layer;
    j["token"] = t;
    std::vector<std::size_t> experts;
    std::vector<double> weights;
    for (const auto& r : a.per_token[t]) {
      experts.push_back(r.expert);
      weights.push_back(r.weight);
    }
    j["experts"] = experts;
    j["weights"] = weights;
    out += j.dump();
    out += '\n';
  }
  return out;
}

}  // namespace condcomp

#endif  // CONDCOMP_ROUTING_HPP_
