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

#ifndef CONDCOMP_GUMBEL_HPP_
#define CONDCOMP_GUMBEL_HPP_

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "condcomp/ops.hpp"
#include "condcomp/rng.hpp"

namespace condcomp {

inline constexpr double kUniformClamp = 1e-12;

/// Candidate logits p(S, x): one real score per element of S.
struct GateScores {
  Tensor logits;  // [|S|]

  GateScores() = default;
  explicit GateScores(Tensor p) : logits(std::move(p)) {
    if (logits.rank() != 1) throw ShapeError("gate scores: expected a vector, got " + shape_str(logits.shape()));
    for (double v : logits.data())
      if (!std::isfinite(v)) throw Error("gate scores: non-finite logit");
  }

  std::size_t size() const { return logits.numel(); }
};

enum class SampleMode { hard, soft, straight_through };

struct SamplerConfig {
  double temperature = 1.0;
  std::size_t k = 1;
  SampleMode mode = SampleMode::hard;
  bool noise = true;

  void validate(std::size_t candidates) const {
    if (!(temperature > 0)) throw Error("sampler: temperature must be positive, got " + std::to_string(temperature));
    if (k < 1 || k > candidates) {
      throw Error("sampler: k=" + std::to_string(k) + " outside [1, " + std::to_string(candidates) + "]");
    }
  }
};

struct SampleResult {
  std::vector<std::size_t> indices;  // selected elements, ascending
  Tensor values;                     // what the caller consumes: k-hot, soft weights, or STE output
  Tensor soft;                       // relaxed weights; undefined for hard sampling
  std::vector<double> noise;         // Gumbel perturbation that was used

  /// k-hot indicator of the selection.
  std::vector<double> hard() const {
    std::vector<double> h(values.numel(), 0.0);
    for (std::size_t i : indices) h[i] = 1.0;
    return h;
  }
};

/// -log(-log(u)) with u clamped to [1e-12, 1 - 1e-12].
inline double gumbel_from_uniform(double u) {
  u = std::clamp(u, kUniformClamp, 1.0 - kUniformClamp);
  return -std::log(-std::log(u));
}

inline std::vector<double> gumbel_noise(std::size_t count, Rng& rng) {
  if (count == 0) throw Error("gumbel_noise: count must be at least 1");
  std::vector<double> g(count);
  for (double& v : g) v = gumbel_from_uniform(uniform01(rng));
  return g;
}

/// Indices of the k largest values, best first; ties go to the lower index.
inline std::vector<std::size_t> top_k_ranked(std::span<const double> v, std::size_t k) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] > v[b]; });
  idx.resize(std::min(k, idx.size()));
  return idx;
}

/// Same selection as top_k_ranked, returned in ascending index order.
inline std::vector<std::size_t> top_k_indices(std::span<const double> v, std::size_t k) {
  auto idx = top_k_ranked(v, k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

namespace detail {

inline SampleResult sample_impl(const GateScores& scores, const SamplerConfig& cfg, std::vector<double> noise,
                                SampleMode mode) {
  const std::size_t n = scores.size();
  cfg.validate(n);
  if (noise.size() != n) {
    throw ShapeError("sampler: noise of length " + std::to_string(noise.size()) + " for " + std::to_string(n) + " candidates");
  }
  SampleResult r;
  auto p = scores.logits.data();
  std::vector<double> perturbed(n);
  for (std::size_t i = 0; i < n; ++i) perturbed[i] = p[i] + noise[i];
  r.indices = top_k_indices(perturbed, cfg.k);
  std::vector<double> khot(n, 0.0);
  for (std::size_t i : r.indices) khot[i] = 1.0;
  Tensor hard = Tensor::vector(khot);
  if (mode != SampleMode::hard) {
    r.soft = softmax(add(scores.logits, Tensor::vector(noise)), 0, cfg.temperature);
  }
  switch (mode) {
    case SampleMode::hard: r.values = hard; break;
    case SampleMode::soft: r.values = r.soft; break;
    case SampleMode::straight_through: r.values = straight_through(hard, r.soft); break;
  }
  r.noise = std::move(noise);
  return r;
}

inline std::vector<double> draw_noise(std::size_t n, const SamplerConfig& cfg, Rng& rng) {
  return cfg.noise ? gumbel_noise(n, rng) : std::vector<double>(n, 0.0);
}

inline void require_mode(const SamplerConfig& cfg, SampleMode mode, const char* op) {
  if (cfg.mode != mode) throw Error(std::string(op) + ": sampler configured for a different mode");
}

}  // namespace detail

/// argmax / top-k of p + g. No gradient flows.
inline SampleResult sample_hard(const GateScores& scores, const SamplerConfig& cfg, Rng& rng) {
  detail::require_mode(cfg, SampleMode::hard, "sample_hard");
  return detail::sample_impl(scores, cfg, detail::draw_noise(scores.size(), cfg, rng), SampleMode::hard);
}

/// softmax((p + g) / tau), differentiable in p.
inline SampleResult sample_soft(const GateScores& scores, const SamplerConfig& cfg, Rng& rng) {
  detail::require_mode(cfg, SampleMode::soft, "sample_soft");
  return detail::sample_impl(scores, cfg, detail::draw_noise(scores.size(), cfg, rng), SampleMode::soft);
}

/// Hard k-hot forward, soft-path gradient. For k > 1 all k selections share
/// the one softmax.
inline SampleResult sample_ste(const GateScores& scores, const SamplerConfig& cfg, Rng& rng) {
  detail::require_mode(cfg, SampleMode::straight_through, "sample_ste");
  return detail::sample_impl(scores, cfg, detail::draw_noise(scores.size(), cfg, rng), SampleMode::straight_through);
}

inline SampleResult sample(const GateScores& scores, const SamplerConfig& cfg, Rng& rng) {
  return detail::sample_impl(scores, cfg, detail::draw_noise(scores.size(), cfg, rng), cfg.mode);
}

/// Replays a sample with recorded noise.
inline SampleResult sample_with_noise(const GateScores& scores, const SamplerConfig& cfg, std::vector<double> noise) {
  return detail::sample_impl(scores, cfg, std::move(noise), cfg.mode);
}

/// Channel-selection scores: v = head(sum_{i,j} x_ij), score_k = v . c_k.
///
/// `x` is an [h, w, d] feature map, `channel_embeddings` is [m, e] and
/// `head` maps a [1, d] row to a [1, e] row.
template <class Head>
GateScores pooled_conditioning_scores(const Tensor& x, const Tensor& channel_embeddings, const Head& head) {
  if (x.rank() != 3) throw ShapeError("pooled_conditioning_scores: expected [h, w, d] input, got " + shape_str(x.shape()));
  if (channel_embeddings.rank() != 2) {
    throw ShapeError("pooled_conditioning_scores: embeddings must be [m, e], got " + shape_str(channel_embeddings.shape()));
  }
  Tensor pooled = reshape(sum(sum(x, 0), 0), {1, x.dim(2)});
  Tensor v = head(pooled);
  if (v.rank() != 2 || v.dim(0) != 1 || v.dim(1) != channel_embeddings.dim(1)) {
    throw ShapeError("pooled_conditioning_scores: head output " + shape_str(v.shape()) +
                     " does not match embedding dimension of " + shape_str(channel_embeddings.shape()));
  }
  Tensor s = matmul(v, transpose(channel_embeddings));
  return GateScores(reshape(s, {channel_embeddings.dim(0)}));
}

}  // namespace condcomp

#endif  // CONDCOMP_GUMBEL_HPP_
