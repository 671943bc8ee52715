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

#ifndef CONDCOMP_DATA_HPP_
#define CONDCOMP_DATA_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "condcomp/rng.hpp"
#include "condcomp/spec_json.hpp"
#include "condcomp/tensor.hpp"

namespace condcomp {

/// Latent generation facts kept for evaluation only. Models never see them.
struct SampleMeta {
  long tier = -1;                        // difficulty-tiers: 0 easy, 1 medium, 2 hard
  long cluster = -1;                     // cluster-experts
  std::vector<std::size_t> informative;  // needle-tokens: ascending token ids
};

struct SyntheticDataset {
  std::string id;
  std::size_t n_tokens = 0;
  std::size_t d_input = 0;
  std::size_t n_classes = 2;
  std::vector<Tensor> inputs;       // [n_tokens, d_input] each
  std::vector<std::size_t> labels;
  std::vector<SampleMeta> meta;     // separate channel, parallel to inputs

  std::size_t size() const { return inputs.size(); }
};

struct DifficultyTiersParams {
  std::size_t n_tokens = 8;
  std::size_t d_input = 8;
  std::vector<double> margins = {1.0, 0.3, 0.05};  // per tier, along the class direction
  double noise = 1.0;
};

struct ClusterExpertsParams {
  std::size_t n_tokens = 8;
  std::size_t d_input = 8;
  std::size_t clusters = 4;
  double separation = 3.0;  // norm of each cluster center
  double noise = 1.0;
};

struct NeedleTokensParams {
  std::size_t n_tokens = 16;
  std::size_t informative = 2;
  std::size_t d_input = 8;
  double signal = 2.0;      // size of the marker and class components
  double noise = 0.5;       // standard deviation around informative tokens
  double distractor = 1.0;  // standard deviation of noise tokens
};

namespace detail {

inline std::vector<double> unit_vector(std::size_t d, Rng& rng) {
  std::vector<double> v(d);
  double n2 = 0.0;
  for (double& x : v) {
    x = normal01(rng);
    n2 += x * x;
  }
  const double inv = 1.0 / std::sqrt(n2);
  for (double& x : v) x *= inv;
  return v;
}

/// Labels 0,1,0,1,... in a shuffled order: balanced within one.
inline std::vector<std::size_t> balanced_labels(std::size_t n, std::size_t classes, Rng& rng) {
  std::vector<std::size_t> y(n);
  for (std::size_t i = 0; i < n; ++i) y[i] = i % classes;
  shuffle(y, rng);
  return y;
}

}  // namespace detail

/// Two classes; every token carries +-margin along a fixed direction plus
/// isotropic noise. The tier fixes the margin.
inline SyntheticDataset make_difficulty_tiers(std::size_t n, const DifficultyTiersParams& p, std::uint64_t seed, std::uint64_t stream = 0) {
  if (p.margins.empty()) throw ConfigError("difficulty-tiers: need at least one margin tier");
  Rng layout = derive_rng(seed, 1);
  Rng rng = derive_rng(seed, 2 + stream);
  SyntheticDataset ds;
  ds.id = "difficulty-tiers";
  ds.n_tokens = p.n_tokens;
  ds.d_input = p.d_input;
  const auto dir = detail::unit_vector(p.d_input, layout);
  ds.labels = detail::balanced_labels(n, 2, rng);
  for (std::size_t i = 0; i < n; ++i) {
    SampleMeta m;
    m.tier = static_cast<long>(uniform_index(rng, p.margins.size()));
    const double sign = ds.labels[i] == 1 ? 1.0 : -1.0;
    const double margin = p.margins[static_cast<std::size_t>(m.tier)];
    std::vector<double> x(p.n_tokens * p.d_input);
    for (std::size_t t = 0; t < p.n_tokens; ++t)
      for (std::size_t k = 0; k < p.d_input; ++k) x[t * p.d_input + k] = sign * margin * dir[k] + p.noise * normal01(rng);
    ds.inputs.push_back(Tensor::matrix(p.n_tokens, p.d_input, std::move(x)));
    ds.meta.push_back(std::move(m));
  }
  return ds;
}

/// Samples come from one of m clusters; tokens scatter around the cluster
/// center and the label is the sign of a cluster-specific linear map of the
/// mean offset. Noise is reflected when needed so labels stay balanced.
inline SyntheticDataset make_cluster_experts(std::size_t n, const ClusterExpertsParams& p, std::uint64_t seed, std::uint64_t stream = 0) {
  if (p.clusters < 1) throw ConfigError("cluster-experts: need at least one cluster");
  Rng layout = derive_rng(seed, 1);
  Rng rng = derive_rng(seed, 2 + stream);
  SyntheticDataset ds;
  ds.id = "cluster-experts";
  ds.n_tokens = p.n_tokens;
  ds.d_input = p.d_input;
  std::vector<std::vector<double>> centers, maps;
  for (std::size_t c = 0; c < p.clusters; ++c) {
    auto u = detail::unit_vector(p.d_input, layout);
    for (double& v : u) v *= p.separation;
    centers.push_back(std::move(u));
    maps.push_back(detail::unit_vector(p.d_input, layout));
  }
  ds.labels = detail::balanced_labels(n, 2, rng);
  for (std::size_t i = 0; i < n; ++i) {
    SampleMeta m;
    const std::size_t c = uniform_index(rng, p.clusters);
    m.cluster = static_cast<long>(c);
    std::vector<double> eps(p.n_tokens * p.d_input);
    for (double& v : eps) v = p.noise * normal01(rng);
    double proj = 0.0;
    for (std::size_t t = 0; t < p.n_tokens; ++t)
      for (std::size_t k = 0; k < p.d_input; ++k) proj += maps[c][k] * eps[t * p.d_input + k];
    const bool positive = proj > 0;
    if (positive != (ds.labels[i] == 1))
      for (double& v : eps) v = -v;
    std::vector<double> x(eps.size());
    for (std::size_t t = 0; t < p.n_tokens; ++t)
      for (std::size_t k = 0; k < p.d_input; ++k) x[t * p.d_input + k] = centers[c][k] + eps[t * p.d_input + k];
    ds.inputs.push_back(Tensor::matrix(p.n_tokens, p.d_input, std::move(x)));
    ds.meta.push_back(std::move(m));
  }
  return ds;
}

/// j informative tokens at random positions carry a shared marker direction
/// plus a class-signed direction; the other tokens are pure noise.
inline SyntheticDataset make_needle_tokens(std::size_t n, const NeedleTokensParams& p, std::uint64_t seed, std::uint64_t stream = 0) {
  if (p.informative < 1 || p.informative > p.n_tokens) throw ConfigError("needle-tokens: informative count outside [1, n_tokens]");
  if (p.d_input < 2) throw ConfigError("needle-tokens: d_input must be at least 2");
  Rng layout = derive_rng(seed, 1);
  Rng rng = derive_rng(seed, 2 + stream);
  SyntheticDataset ds;
  ds.id = "needle-tokens";
  ds.n_tokens = p.n_tokens;
  ds.d_input = p.d_input;
  auto marker = detail::unit_vector(p.d_input, layout);
  auto cls = detail::unit_vector(p.d_input, layout);
  // Make the class direction orthogonal to the marker.
  double dot = 0.0;
  for (std::size_t k = 0; k < p.d_input; ++k) dot += marker[k] * cls[k];
  double n2 = 0.0;
  for (std::size_t k = 0; k < p.d_input; ++k) {
    cls[k] -= dot * marker[k];
    n2 += cls[k] * cls[k];
  }
  for (double& v : cls) v /= std::sqrt(n2);
  ds.labels = detail::balanced_labels(n, 2, rng);
  std::vector<std::size_t> order(p.n_tokens);
  for (std::size_t i = 0; i < n; ++i) {
    SampleMeta m;
    for (std::size_t t = 0; t < p.n_tokens; ++t) order[t] = t;
    shuffle(order, rng);
    m.informative.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(p.informative));
    std::sort(m.informative.begin(), m.informative.end());
    const double sign = ds.labels[i] == 1 ? 1.0 : -1.0;
    std::vector<double> x(p.n_tokens * p.d_input);
    for (std::size_t t = 0; t < p.n_tokens; ++t) {
      const bool info = std::binary_search(m.informative.begin(), m.informative.end(), t);
      for (std::size_t k = 0; k < p.d_input; ++k) {
        x[t * p.d_input + k] = info ? p.signal * (marker[k] + sign * cls[k]) + p.noise * normal01(rng)
                                    : p.distractor * normal01(rng);
      }
    }
    ds.inputs.push_back(Tensor::matrix(p.n_tokens, p.d_input, std::move(x)));
    ds.meta.push_back(std::move(m));
  }
  return ds;
}

/// Builds a dataset from its id and a JSON parameter object.
///
/// The layout (directions, centers) depends only on the seed; `stream`
/// selects an independent draw of samples from it, e.g. a test split.
inline SyntheticDataset generate(std::string_view id, std::size_t n, const Json& params, std::uint64_t seed,
                                 std::uint64_t stream = 0) {
  using detail::read_field;
  const Json p = params.is_null() ? Json::object() : params;
  if (n == 0) throw ConfigError("dataset: sample count must be positive");
  if (id == "difficulty-tiers") {
    DifficultyTiersParams q;
    detail::check_keys(p, {"n_tokens", "d_input", "margins", "noise"}, "dataset.params");
    read_field(p, "n_tokens", q.n_tokens, "dataset.params");
    read_field(p, "d_input", q.d_input, "dataset.params");
    read_field(p, "margins", q.margins, "dataset.params");
    read_field(p, "noise", q.noise, "dataset.params");
    return make_difficulty_tiers(n, q, seed, stream);
  }
  if (id == "cluster-experts") {
    ClusterExpertsParams q;
    detail::check_keys(p, {"n_tokens", "d_input", "clusters", "separation", "noise"}, "dataset.params");
    read_field(p, "n_tokens", q.n_tokens, "dataset.params");
    read_field(p, "d_input", q.d_input, "dataset.params");
    read_field(p, "clusters", q.clusters, "dataset.params");
    read_field(p, "separation", q.separation, "dataset.params");
    read_field(p, "noise", q.noise, "dataset.params");
    return make_cluster_experts(n, q, seed, stream);
  }
  if (id == "needle-tokens") {
    NeedleTokensParams q;
    detail::check_keys(p, {"n_tokens", "informative", "d_input", "signal", "noise", "distractor"}, "dataset.params");
    read_field(p, "n_tokens", q.n_tokens, "dataset.params");
    read_field(p, "informative", q.informative, "dataset.params");
    read_field(p, "d_input", q.d_input, "dataset.params");
    read_field(p, "signal", q.signal, "dataset.params");
    read_field(p, "noise", q.noise, "dataset.params");
    read_field(p, "distractor", q.distractor, "dataset.params");
    return make_needle_tokens(n, q, seed, stream);
  }
  throw ConfigError("unknown dataset id '" + std::string(id) + "'");
}

}  // namespace condcomp

#endif  // CONDCOMP_DATA_HPP_
