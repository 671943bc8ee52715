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

#ifndef CONDCOMP_MOE_HPP_
#define CONDCOMP_MOE_HPP_

#include <string>
#include <string_view>
#include <vector>

#include "condcomp/cost_trace.hpp"
#include "condcomp/nn.hpp"
#include "condcomp/routing.hpp"

namespace condcomp {

enum class MoEVariant { sparse, soft_dispatch, soft_weights };

inline MoEVariant parse_moe_variant(std::string_view s) {
  if (s == "sparse") return MoEVariant::sparse;
  if (s == "soft-dispatch") return MoEVariant::soft_dispatch;
  if (s == "soft-weights") return MoEVariant::soft_weights;
  throw Error("unknown MoE variant '" + std::string(s) + "'");
}

inline std::string to_string(MoEVariant v) {
  switch (v) {
    case MoEVariant::sparse: return "sparse";
    case MoEVariant::soft_dispatch: return "soft-dispatch";
    case MoEVariant::soft_weights: return "soft-weights";
  }
  return "?";
}

/// Experts are two-layer perceptrons; all experts of a layer share one topology.
using Expert = Mlp;

struct MoELayer {
  std::vector<Expert> experts;
  ExpertEmbeddings embeddings;
  RouterConfig router;
  MoEVariant variant = MoEVariant::sparse;

  MoELayer() = default;
  MoELayer(std::size_t d_in, std::size_t d_hidden, std::size_t d_out, RouterConfig cfg, MoEVariant v, Rng& rng,
           Activation act = Activation::gelu)
      : router(cfg), variant(v) {
    if (cfg.n_experts < 1) throw Error("moe: need at least one expert");
    for (std::size_t e = 0; e < cfg.n_experts; ++e) experts.emplace_back(d_in, d_hidden, d_out, rng, act);
    embeddings.weight = normal_tensor({cfg.n_experts, d_in}, 1.0 / std::sqrt(static_cast<double>(d_in)), rng);
  }

  std::size_t n_experts() const { return experts.size(); }
  std::size_t d_in() const { return experts.front().fc1.in_features(); }
  std::size_t d_out() const { return experts.front().fc2.out_features(); }

  void validate() const {
    if (experts.empty()) throw Error("moe: no experts");
    if (embeddings.weight.dim(0) != experts.size() || embeddings.dim() != d_in()) {
      throw ShapeError("moe: expert embeddings " + shape_str(embeddings.weight.shape()) + " do not match " +
                       std::to_string(experts.size()) + " experts of input size " + std::to_string(d_in()));
    }
    for (const auto& e : experts) {
      if (e.fc1.weight.shape() != experts.front().fc1.weight.shape() ||
          e.fc2.weight.shape() != experts.front().fc2.weight.shape() || e.act != experts.front().act) {
        throw Error("moe: experts are not topologically identical");
      }
    }
  }

  void register_params(ParameterSet& ps, const std::string& prefix) {
    for (std::size_t e = 0; e < experts.size(); ++e) experts[e].register_params(ps, prefix + ".expert" + std::to_string(e));
    embeddings.weight = ps.add(prefix + ".router.embeddings", embeddings.weight);
  }
};

struct MoEOutput {
  Tensor y;
  RoutingAssignment assignment;  // sparse variant
  Tensor dispatch;               // soft-dispatch: [n_experts, n_tok]
  Tensor combine;                // soft-dispatch: [n_tok, n_experts]
  Tensor gamma;                  // soft-weights: [n_experts]
};

inline std::string sublabel(std::string_view label, std::string_view part) {
  return std::string(label) + "." + std::string(part);
}

/// y_t = sum over the experts routed to token t of gate(t, e) * expert_e(x_t).
/// Each expert runs once on the batch of its own tokens and never on others.
inline MoEOutput forward_sparse(const MoELayer& layer, const Tensor& tokens, Rng* rng = nullptr,
                                Recorder* rec = nullptr, std::string_view label = "moe", double tau = 1.0) {
  layer.validate();
  if (layer.variant != MoEVariant::sparse) throw Error("forward_sparse: layer variant is " + to_string(layer.variant));
  const std::size_t n_tok = tokens.dim(0);
  Tensor aff = affinity_scores(tokens, layer.embeddings);
  record(rec, sublabel(label, "router"), static_cast<std::uint64_t>(n_tok) * layer.d_in() * layer.n_experts(),
         aff.numel());
  MoEOutput out;
  out.assignment = route(aff, layer.router, rng, tau);
  std::vector<Tensor> parts;
  std::vector<std::size_t> rows;
  const std::string expert_label = sublabel(label, "experts");
  for (std::size_t e = 0; e < layer.n_experts(); ++e) {
    const auto& toks = out.assignment.per_expert[e];
    if (toks.empty()) continue;
    if (rec) rec->note_expert_eval(expert_label, e, toks.size());
    Tensor ye = layer.experts[e](gather_rows(tokens, toks), rec, expert_label);
    Tensor ge = slice_cols(gather_rows(out.assignment.gates, toks), e, e + 1);
    parts.push_back(mul(ye, ge));
    rows.insert(rows.end(), toks.begin(), toks.end());
  }
  if (parts.empty()) {
    out.y = Tensor::zeros({n_tok, layer.d_out()});
  } else {
    out.y = scatter_add_rows(parts.size() == 1 ? parts.front() : concat(parts, 0), rows, n_tok);
  }
  return out;
}

/// Soft token dispatch: every expert runs exactly once on a convex mix of
/// the tokens, and each token mixes the expert outputs.
///
/// dispatch D = per-expert softmax over token affinities, x~_e = sum_t D_et x_t;
/// combine C = per-token softmax over expert affinities, y_t = sum_e C_te f_e(x~_e).
inline MoEOutput forward_soft_dispatch(const MoELayer& layer, const Tensor& tokens, Recorder* rec = nullptr,
                                       std::string_view label = "moe") {
  layer.validate();
  if (layer.variant != MoEVariant::soft_dispatch) {
    throw Error("forward_soft_dispatch: layer variant is " + to_string(layer.variant));
  }
  const std::size_t n_tok = tokens.dim(0), n_exp = layer.n_experts();
  Tensor logits = scale(affinity_scores(tokens, layer.embeddings), 1.0 / layer.router.temperature);
  record(rec, sublabel(label, "router"), static_cast<std::uint64_t>(n_tok) * layer.d_in() * n_exp, 2 * logits.numel());
  MoEOutput out;
  out.dispatch = softmax(transpose(logits), 1);
  out.combine = softmax(logits, 1);
  Tensor mixed = matmul(out.dispatch, tokens);
  record(rec, sublabel(label, "dispatch"), static_cast<std::uint64_t>(n_exp) * n_tok * layer.d_in());
  const std::string expert_label = sublabel(label, "experts");
  std::vector<Tensor> ys;
  for (std::size_t e = 0; e < n_exp; ++e) {
    if (rec) rec->note_expert_eval(expert_label, e, 1);
    ys.push_back(layer.experts[e](gather_rows(mixed, {e}), rec, expert_label));
  }
  Tensor y_experts = n_exp == 1 ? ys.front() : concat(ys, 0);
  out.y = matmul(out.combine, y_experts);
  record(rec, sublabel(label, "combine"), static_cast<std::uint64_t>(n_tok) * n_exp * layer.d_out());
  return out;
}

/// Soft weight merging: gamma = softmax(affinity(x_c) / T), the expert
/// parameters are averaged with weights gamma and the merged expert is
/// applied to `tokens`.
inline MoEOutput forward_soft_weights(const MoELayer& layer, const Tensor& conditioning, const Tensor& tokens,
                                      Recorder* rec = nullptr, std::string_view label = "moe") {
  layer.validate();
  if (layer.variant != MoEVariant::soft_weights) {
    throw Error("forward_soft_weights: layer variant is " + to_string(layer.variant));
  }
  if (conditioning.rank() != 2 || conditioning.dim(0) != 1) {
    throw ShapeError("forward_soft_weights: conditioning input must be [1, d], got " + shape_str(conditioning.shape()));
  }
  const std::size_t n_exp = layer.n_experts();
  Tensor logits = scale(affinity_scores(conditioning, layer.embeddings), 1.0 / layer.router.temperature);
  record(rec, sublabel(label, "router"), static_cast<std::uint64_t>(layer.d_in()) * n_exp, n_exp);
  MoEOutput out;
  out.gamma = reshape(softmax(logits, 1), {n_exp});
  auto merge = [&](auto member) {
    Tensor acc;
    for (std::size_t e = 0; e < n_exp; ++e) {
      Tensor term = mul(member(layer.experts[e]), reshape(gather_rows(out.gamma, {e}), {}));
      acc = e == 0 ? term : add(acc, term);
    }
    return acc;
  };
  Expert merged;
  merged.act = layer.experts.front().act;
  merged.fc1.weight = merge([](const Expert& x) { return x.fc1.weight; });
  merged.fc1.bias = merge([](const Expert& x) { return x.fc1.bias; });
  merged.fc2.weight = merge([](const Expert& x) { return x.fc2.weight; });
  merged.fc2.bias = merge([](const Expert& x) { return x.fc2.bias; });
  const auto& f = layer.experts.front();
  const std::uint64_t params = f.fc1.weight.numel() + f.fc1.bias.numel() + f.fc2.weight.numel() + f.fc2.bias.numel();
  record(rec, sublabel(label, "merge"), params * n_exp);
  const std::string expert_label = sublabel(label, "experts");
  if (rec) rec->note_expert_eval(expert_label, 0, tokens.dim(0));
  out.y = merged(tokens, rec, expert_label);
  return out;
}

/// gate * block(x) + (1 - gate) * x. A gate that is exactly 0 and carries no
/// gradient skips the block entirely.
template <class Block>
Tensor depth_skip(const Block& block, const Tensor& x, const Tensor& gate) {
  if (gate.numel() != 1) throw ShapeError("depth_skip: gate must be a scalar, got " + shape_str(gate.shape()));
  const double g = gate.data()[0];
  if (!(g >= 0.0 && g <= 1.0)) throw Error("depth_skip: gate value " + std::to_string(g) + " outside [0, 1]");
  if (g == 0.0 && !gate.requires_grad()) return x;
  Tensor y = block(x);
  if (y.shape() != x.shape()) {
    throw ShapeError("depth_skip: block maps " + shape_str(x.shape()) + " to " + shape_str(y.shape()) +
                     "; a skippable block must preserve shape");
  }
  Tensor gs = reshape(gate, {});
  return add(mul(y, gs), mul(x, add_scalar(neg(gs), 1.0)));
}

}  // namespace condcomp

#endif  // CONDCOMP_MOE_HPP_
