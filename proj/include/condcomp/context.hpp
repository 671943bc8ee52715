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

#ifndef CONDCOMP_CONTEXT_HPP_
#define CONDCOMP_CONTEXT_HPP_

#include <optional>
#include <vector>

#include "condcomp/cost_trace.hpp"
#include "condcomp/rng.hpp"
#include "condcomp/routing.hpp"
#include "condcomp/token_selection.hpp"

namespace condcomp {

/// What one block actually executed, in counts. Filled by the model during
/// a forward pass and consumed by the analytic cost model.
struct BlockTrace {
  std::size_t block = 0;
  std::size_t rows_in = 0;             // rows entering the block
  std::size_t rows = 0;                // rows processed by attention and feed-forward
  bool selection_head = false;         // token scores computed on rows_in rows
  bool skip_gate_head = false;         // depth-skip gate evaluated
  bool ffn_evaluated = true;           // false when the feed-forward was skipped
  std::vector<std::size_t> expert_rows;  // sparse MoE: rows routed to each expert
  bool exit_head = false;
  bool exit_gate_head = false;
};

struct DecisionTrace {
  std::size_t n_tokens = 0;
  std::vector<BlockTrace> blocks;  // blocks that ran, in order
  bool final_head = false;
};

/// Per-call switches and outputs of a model forward pass. One context per
/// sample; not shared between threads.
struct ForwardContext {
  bool training = false;       // stochastic samplers, soft gates
  Rng* rng = nullptr;
  double tau = 1.0;            // Gumbel-Softmax temperature
  Recorder* recorder = nullptr;
  bool masked_tokens = false;  // keep all rows and mask instead of gathering

  /// Forced kept original token ids, one list per selection point.
  const std::vector<std::vector<std::size_t>>* keep_decisions = nullptr;
  std::optional<double> keep_ratio;  // overrides the configured keep ratio
  std::optional<std::size_t> moe_k;  // overrides the configured router k
  /// Masked mode only: replaces the keep vector after selection point i.
  const std::vector<Tensor>* keep_override = nullptr;
  /// Leaves the balancing loss to the caller, which balances over a batch.
  bool defer_balance = false;

  // Outputs.
  std::vector<RoutingAssignment> routing;
  std::vector<std::size_t> routing_blocks;
  AliveTrace alive;
  std::vector<double> skip_gates;
  std::vector<Tensor> selection_soft;  // relaxed keep weights of sampled selections, [n_tokens]
  Tensor aux_loss;  // lambda-weighted balancing loss, undefined when no router ran
  DecisionTrace trace;

  void add_aux(const Tensor& t) { aux_loss = aux_loss.defined() ? add(aux_loss, t) : t; }
};

}  // namespace condcomp

#endif  // CONDCOMP_CONTEXT_HPP_
