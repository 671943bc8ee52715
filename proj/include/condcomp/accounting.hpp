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

#ifndef CONDCOMP_ACCOUNTING_HPP_
#define CONDCOMP_ACCOUNTING_HPP_

#include <cstdint>
#include <cstdio>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "condcomp/context.hpp"
#include "condcomp/cost_trace.hpp"
#include "condcomp/transformer.hpp"

namespace condcomp {

/// Per-layer and total cost of one forward pass. Layer labels match the ones
/// the model records while running, so the two can be compared entry by entry.
struct FlopReport {
  std::vector<CostEntry> layers;

  void add(std::string_view layer, std::uint64_t macs, std::uint64_t elem_ops = 0) {
    for (auto& e : layers) {
      if (e.layer == layer) {
        e.macs += macs;
        e.elem_ops += elem_ops;
        return;
      }
    }
    layers.push_back(CostEntry{std::string(layer), macs, elem_ops});
  }

  std::uint64_t total_macs() const {
    std::uint64_t t = 0;
    for (const auto& e : layers) t += e.macs;
    return t;
  }
  std::uint64_t total_elem_ops() const {
    std::uint64_t t = 0;
    for (const auto& e : layers) t += e.elem_ops;
    return t;
  }
  std::uint64_t macs(std::string_view layer) const {
    for (const auto& e : layers)
      if (e.layer == layer) return e.macs;
    return 0;
  }
  std::uint64_t elem_ops(std::string_view layer) const {
    for (const auto& e : layers)
      if (e.layer == layer) return e.elem_ops;
    return 0;
  }

  static FlopReport from(const Recorder& rec) {
    FlopReport r;
    for (const auto& e : rec.entries()) r.add(e.layer, e.macs, e.elem_ops);
    return r;
  }

  nlohmann::json to_json() const {
    nlohmann::json layers_json = nlohmann::json::array();
    for (const auto& e : layers) layers_json.push_back({{"layer", e.layer}, {"macs", e.macs}, {"elem_ops", e.elem_ops}});
    return {{"layers", layers_json}, {"total_macs", total_macs()}, {"total_elem_ops", total_elem_ops()}};
  }
};

/// The trace of a pass that skips nothing: every block on every token, every
/// expert on every token, every selection, skip, exit and gate head evaluated.
inline DecisionTrace dense_trace(const ModelSpec& spec, std::size_t n_tok) {
  DecisionTrace t;
  t.n_tokens = n_tok;
  for (std::size_t i = 0; i < spec.depth; ++i) {
    BlockTrace b;
    b.block = i;
    b.rows_in = b.rows = n_tok;
    b.selection_head = spec.has(i, Mechanism::token_select);
    b.skip_gate_head = spec.has(i, Mechanism::skip);
    if (spec.has(i, Mechanism::moe) && spec.moe.variant == MoEVariant::sparse) b.expert_rows.assign(spec.moe.n_experts, n_tok);
    b.exit_head = b.exit_gate_head = spec.has(i, Mechanism::exit_head);
    t.blocks.push_back(std::move(b));
  }
  t.final_head = true;
  return t;
}

namespace detail {

inline std::string block_label(std::size_t i, std::string_view part) {
  return "block" + std::to_string(i) + "." + std::string(part);
}

inline void check_trace(const ModelSpec& spec, const DecisionTrace& t) {
  auto fail = [](const std::string& why) { throw Error("dynamic_cost: trace inconsistent with spec: " + why); };
  if (t.n_tokens == 0) fail("zero tokens");
  if (t.blocks.empty()) fail("no block ran");
  if (t.blocks.size() > spec.depth) fail("more blocks than the model has");
  if (t.final_head && t.blocks.size() != spec.depth) fail("final head evaluated before the last block");
  std::size_t rows = t.n_tokens;
  for (std::size_t i = 0; i < t.blocks.size(); ++i) {
    const BlockTrace& b = t.blocks[i];
    const std::string at = "block " + std::to_string(i);
    if (b.block != i) fail("blocks out of order at " + at);
    if (b.rows_in != rows) fail(at + " receives " + std::to_string(b.rows_in) + " rows, expected " + std::to_string(rows));
    if (b.rows == 0 || b.rows > b.rows_in) fail(at + " processes " + std::to_string(b.rows) + " rows");
    const bool select = spec.has(i, Mechanism::token_select);
    if (b.selection_head != select) fail(at + " selection head does not match the spec");
    if (!select && b.rows != b.rows_in) fail(at + " drops tokens without a selection point");
    const bool skip = spec.has(i, Mechanism::skip);
    if (b.skip_gate_head != skip) fail(at + " skip gate does not match the spec");
    if (!skip && !b.ffn_evaluated) fail(at + " skips its feed-forward without a skip gate");
    const bool sparse = spec.has(i, Mechanism::moe) && spec.moe.variant == MoEVariant::sparse;
    if (sparse && b.ffn_evaluated) {
      if (b.expert_rows.size() != spec.moe.n_experts) fail(at + " expert row counts do not match the expert count");
      for (std::size_t r : b.expert_rows)
        if (r > b.rows) fail(at + " routes more rows to an expert than it processes");
    } else if (!b.expert_rows.empty()) {
      fail(at + " reports expert rows without running a sparse MoE");
    }
    const bool exit = spec.has(i, Mechanism::exit_head);
    if ((b.exit_head || b.exit_gate_head) && !exit) fail(at + " evaluates an exit head the spec does not have");
    rows = b.rows;
  }
}

}  // namespace detail

/// Analytic cost of the work described by a decision trace.
inline FlopReport dynamic_cost(const ModelSpec& spec, const DecisionTrace& t) {
  spec.validate();
  detail::check_trace(spec, t);
  using u64 = std::uint64_t;
  FlopReport r;
  const u64 d = spec.d_model, n = t.n_tokens, c = spec.n_classes;
  r.add("embed", n * spec.d_input * d);
  u64 rows = n;
  for (const BlockTrace& b : t.blocks) {
    auto L = [&](std::string_view part) { return detail::block_label(b.block, part); };
    const u64 r0 = b.rows_in, rr = b.rows;
    if (b.selection_head) {
      const u64 hs = spec.token_select.score_hidden;
      if (hs == 0) {
        r.add(L("select"), r0 * d);
      } else {
        r.add(L("select"), r0 * (d * hs + hs), r0 * hs);
      }
    }
    r.add(L("ln1"), 0, rr * d);
    r.add(L("attn"), 4 * rr * d * d + 2 * rr * rr * d, spec.heads * rr * rr);
    if (b.skip_gate_head) r.add(L("skip"), d, rr * d + 1);
    if (b.ffn_evaluated) {
      r.add(L("ln2"), 0, rr * d);
      if (!spec.has(b.block, Mechanism::moe)) {
        r.add(L("ffn"), rr * 2 * d * spec.d_ff, rr * spec.d_ff);
      } else {
        const u64 e = spec.moe.n_experts, h = spec.moe.d_hidden;
        const std::string m = L("moe");
        switch (spec.moe.variant) {
          case MoEVariant::sparse: {
            r.add(m + ".router", rr * d * e, rr * e);
            u64 routed = 0;
            for (std::size_t x : b.expert_rows) routed += x;
            if (routed > 0) r.add(m + ".experts", routed * 2 * d * h, routed * h);
            break;
          }
          case MoEVariant::soft_dispatch:
            r.add(m + ".router", rr * d * e, 2 * rr * e);
            r.add(m + ".dispatch", e * rr * d);
            r.add(m + ".experts", e * 2 * d * h, e * h);
            r.add(m + ".combine", rr * e * d);
            break;
          case MoEVariant::soft_weights: {
            const u64 params = d * h + h + h * d + d;
            r.add(m + ".pool", 0, rr * d);
            r.add(m + ".router", d * e, e);
            r.add(m + ".merge", params * e);
            r.add(m + ".experts", rr * 2 * d * h, rr * h);
            break;
          }
        }
      }
    }
    if (b.exit_head) r.add(L("exit"), d * c, rr * d);
    if (b.exit_gate_head) r.add(L("gate"), d, rr * d + 1);
    rows = rr;
  }
  if (t.final_head) r.add("head", d * c, rows * d);
  return r;
}

/// Cost of the dense path on n_tok tokens: no conditional savings at all.
inline FlopReport static_cost(const ModelSpec& spec, std::size_t n_tok) {
  return dynamic_cost(spec, dense_trace(spec, n_tok));
}

/// One row of an accuracy-versus-compute curve.
struct CurvePoint {
  std::string knob;
  double value = 0.0;
  double mean_macs = 0.0;
  double accuracy = 0.0;
  std::size_t n_samples = 0;
  std::uint64_t seed = 0;
};

inline constexpr std::string_view kCurveHeader = "knob,value,mean_macs,accuracy,n_samples,seed";

inline std::string curve_csv_row(const CurvePoint& p) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%s,%.17g,%.17g,%.17g,%zu,%llu", p.knob.c_str(), p.value, p.mean_macs, p.accuracy,
                p.n_samples, static_cast<unsigned long long>(p.seed));
  return buf;
}

inline std::string curve_csv(const std::vector<CurvePoint>& rows) {
  std::string out(kCurveHeader);
  out += '\n';
  for (const auto& p : rows) {
    out += curve_csv_row(p);
    out += '\n';
  }
  return out;
}

}  // namespace condcomp

#endif  // CONDCOMP_ACCOUNTING_HPP_
