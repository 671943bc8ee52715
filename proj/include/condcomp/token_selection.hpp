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

#ifndef CONDCOMP_TOKEN_SELECTION_HPP_
#define CONDCOMP_TOKEN_SELECTION_HPP_

#include <algorithm>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "condcomp/gumbel.hpp"
#include "condcomp/nn.hpp"

namespace condcomp {

enum class MaskKind { drop, merge };
enum class SelectMode { greedy, stochastic };

/// Per-token keep-score network: Linear, or Linear-act-Linear when a hidden
/// width is given.
struct ScoreHead {
  std::vector<Linear> layers;
  Activation act = Activation::gelu;

  ScoreHead() = default;
  ScoreHead(std::size_t d, std::size_t hidden, Rng& rng) {
    if (hidden == 0) {
      layers.emplace_back(d, 1, rng);
    } else {
      layers.emplace_back(d, hidden, rng);
      layers.emplace_back(hidden, 1, rng);
    }
  }

  std::size_t in_features() const { return layers.front().in_features(); }

  void register_params(ParameterSet& ps, const std::string& prefix) {
    for (std::size_t i = 0; i < layers.size(); ++i) layers[i].register_params(ps, prefix + ".l" + std::to_string(i));
  }
};

/// One score per token, shape [n].
inline Tensor score_tokens(const ScoreHead& head, const Tensor& x, Recorder* rec = nullptr,
                           std::string_view label = "select") {
  if (x.rank() != 2 || x.dim(1) != head.in_features()) {
    throw ShapeError("score_tokens: tokens " + shape_str(x.shape()) + " do not match head input size " +
                     std::to_string(head.in_features()));
  }
  Tensor h = x;
  for (std::size_t i = 0; i < head.layers.size(); ++i) {
    h = head.layers[i](h, rec, label);
    if (i + 1 < head.layers.size()) {
      record(rec, label, 0, h.numel());
      h = activate(h, head.act);
    }
  }
  return reshape(h, {x.dim(0)});
}

struct SelectionMask {
  MaskKind kind = MaskKind::drop;
  Tensor matrix;                       // M, [n_out, n]
  std::vector<std::size_t> kept;       // drop: kept token ids, ascending
  std::vector<std::size_t> slot;       // merge: output slot of every input token
  std::vector<std::size_t> empty_slots;
  Tensor keep;                         // drop: [n] k-hot keep vector (STE-valued when stochastic)
  Tensor soft;                         // drop, stochastic: relaxed keep weights the STE backward uses

  std::size_t n_out() const { return matrix.dim(0); }
  std::size_t n_in() const { return matrix.dim(1); }
};

/// Keeps n_out tokens: top scores (greedy) or a Gumbel top-k sample with a
/// straight-through keep vector (stochastic). Rows follow original order.
inline SelectionMask build_drop_mask(const Tensor& scores, std::size_t n_out, SelectMode mode, Rng* rng = nullptr,
                                     double tau = 1.0) {
  if (scores.rank() != 1) throw ShapeError("build_drop_mask: scores must be a vector, got " + shape_str(scores.shape()));
  const std::size_t n = scores.numel();
  if (n_out < 1 || n_out > n) {
    throw Error("build_drop_mask: keep count " + std::to_string(n_out) + " outside [1, " + std::to_string(n) + "]");
  }
  SelectionMask m;
  m.kind = MaskKind::drop;
  if (mode == SelectMode::greedy) {
    m.kept = top_k_indices(scores.data(), n_out);
    std::vector<double> khot(n, 0.0);
    for (std::size_t i : m.kept) khot[i] = 1.0;
    m.keep = Tensor::vector(khot);
  } else {
    if (rng == nullptr) throw Error("build_drop_mask: stochastic mode needs a generator");
    SamplerConfig cfg{tau, n_out, SampleMode::straight_through, true};
    SampleResult r = sample_ste(GateScores(scores), cfg, *rng);
    m.kept = r.indices;
    m.keep = r.values;
    m.soft = r.soft;
  }
  std::vector<double> sel(n_out * n, 0.0);
  for (std::size_t r = 0; r < n_out; ++r) sel[r * n + m.kept[r]] = 1.0;
  Tensor selector = Tensor::matrix(n_out, n, sel);
  m.matrix = m.keep.requires_grad() ? mul(selector, reshape(m.keep, {1, n})) : selector;
  return m;
}

/// Assigns every token to its highest-affinity output slot (ties to the lower
/// slot). `slot_affinity` is [n, n_out]. M is binary with unit column sums;
/// with `average` each nonempty row is divided by its token count instead.
/// Slots that receive no token have zero rows and are listed in empty_slots.
inline SelectionMask build_merge_mask(const Tensor& slot_affinity, std::size_t n_out, bool average = false) {
  if (slot_affinity.rank() != 2 || slot_affinity.dim(1) != n_out) {
    throw ShapeError("build_merge_mask: affinities " + shape_str(slot_affinity.shape()) + " for " +
                     std::to_string(n_out) + " slots");
  }
  const std::size_t n = slot_affinity.dim(0);
  if (n_out < 1 || n_out > n) {
    throw Error("build_merge_mask: slot count " + std::to_string(n_out) + " outside [1, " + std::to_string(n) + "]");
  }
  SelectionMask m;
  m.kind = MaskKind::merge;
  auto a = slot_affinity.data();
  std::vector<double> mat(n_out * n, 0.0);
  std::vector<std::size_t> count(n_out, 0);
  for (std::size_t t = 0; t < n; ++t) {
    std::span<const double> row(a.data() + t * n_out, n_out);
    const std::size_t s = top_k_ranked(row, 1).front();
    m.slot.push_back(s);
    mat[s * n + t] = 1.0;
    ++count[s];
  }
  for (std::size_t s = 0; s < n_out; ++s) {
    if (count[s] == 0) {
      m.empty_slots.push_back(s);
    } else if (average) {
      for (std::size_t t = 0; t < n; ++t) mat[s * n + t] /= static_cast<double>(count[s]);
    }
  }
  m.matrix = Tensor::matrix(n_out, n, std::move(mat));
  return m;
}

/// X' = M X
inline Tensor apply_mask(const SelectionMask& mask, const Tensor& x) {
  if (x.rank() != 2 || x.dim(0) != mask.n_in()) {
    throw ShapeError("apply_mask: mask " + shape_str(mask.matrix.shape()) + " cannot be applied to tokens " +
                     shape_str(x.shape()));
  }
  return matmul(mask.matrix, x);
}

/// Kept original token ids at each selection point of one forward pass.
struct AliveTrace {
  std::vector<std::size_t> layers;                 // block index of each selection point
  std::vector<std::vector<std::size_t>> kept;       // ascending original ids

  /// Throws when `next` contains a token that is not in `alive`.
  static void check_monotone(const std::vector<std::size_t>& alive, const std::vector<std::size_t>& next) {
    for (std::size_t t : next) {
      if (!std::binary_search(alive.begin(), alive.end(), t)) {
        throw Error("token selection: token " + std::to_string(t) + " was dropped earlier and cannot be revived");
      }
    }
  }

  std::string jsonl(std::size_t sample_id) const {
    std::string out;
    for (std::size_t i = 0; i < kept.size(); ++i) {
      nlohmann::json j;
      j["sample"] = sample_id;
      j["layer"] = layers[i];
      j["kept"] = kept[i];
      out += j.dump();
      out += '\n';
    }
    return out;
  }
};

/// Keep count for a ratio: round(ratio * n), at least 1.
inline std::size_t keep_count(double ratio, std::size_t n) {
  const auto k = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n)));
  return std::clamp<std::size_t>(k, 1, n);
}

}  // namespace condcomp

#endif  // CONDCOMP_TOKEN_SELECTION_HPP_
