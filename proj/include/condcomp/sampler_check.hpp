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

#ifndef CONDCOMP_SAMPLER_CHECK_HPP_
#define CONDCOMP_SAMPLER_CHECK_HPP_

#include <cmath>
#include <cstdint>
#include <vector>

#include <boost/math/distributions/chi_squared.hpp>

#include "condcomp/gumbel.hpp"
#include "condcomp/rng.hpp"

namespace condcomp {

/// Empirical frequencies of hard Gumbel samples against softmax(p).
struct FrequencyCheck {
  std::vector<double> logits;
  std::vector<double> expected;
  std::vector<double> observed;
  std::size_t draws = 0;
  double max_abs_dev = 0.0;
  double chi2 = 0.0;
  double p_value = 1.0;
  bool passed = false;
};

/// Compares observed category counts with softmax(logits): max absolute
/// frequency deviation plus a Pearson chi-square goodness-of-fit p-value.
inline FrequencyCheck compare_frequencies(const std::vector<double>& logits, const std::vector<std::size_t>& counts,
                                          double tolerance = 0.01, double min_p_value = 1e-3) {
  if (logits.empty() || counts.size() != logits.size()) throw Error("sampler check: counts must match logits");
  const std::size_t n = logits.size();
  FrequencyCheck c;
  c.logits = logits;
  for (std::size_t k : counts) c.draws += k;
  if (c.draws == 0) throw Error("sampler check: need at least one draw");
  c.expected = softmax(Tensor::vector(logits), 0).to_vector();
  const double dn = static_cast<double>(c.draws);
  for (std::size_t i = 0; i < n; ++i) {
    c.observed.push_back(static_cast<double>(counts[i]) / dn);
    c.max_abs_dev = std::max(c.max_abs_dev, std::abs(c.observed[i] - c.expected[i]));
    const double e = c.expected[i] * dn;
    c.chi2 += (static_cast<double>(counts[i]) - e) * (static_cast<double>(counts[i]) - e) / e;
  }
  if (n > 1) {
    boost::math::chi_squared dist(static_cast<double>(n - 1));
    c.p_value = boost::math::cdf(boost::math::complement(dist, c.chi2));
  }
  c.passed = c.max_abs_dev < tolerance && c.p_value > min_p_value;
  return c;
}

inline FrequencyCheck check_sampler_frequencies(const std::vector<double>& logits, std::size_t draws, Rng& rng,
                                                double tolerance = 0.01, double min_p_value = 1e-3) {
  if (logits.empty() || draws == 0) throw Error("sampler check: need logits and at least one draw");
  std::vector<std::size_t> counts(logits.size(), 0);
  GateScores scores(Tensor::vector(logits));
  SamplerConfig cfg{1.0, 1, SampleMode::hard, true};
  for (std::size_t d = 0; d < draws; ++d) ++counts[sample_hard(scores, cfg, rng).indices.front()];
  return compare_frequencies(logits, counts, tolerance, min_p_value);
}

/// `cases` random logit vectors of length `dims` (standard normal entries),
/// each checked with `draws` samples.
inline std::vector<FrequencyCheck> sampler_suite(std::size_t dims, std::size_t draws, std::uint64_t seed,
                                                 std::size_t cases = 5) {
  Rng rng = derive_rng(seed, 11);
  std::vector<FrequencyCheck> out;
  for (std::size_t c = 0; c < cases; ++c) {
    std::vector<double> p(dims);
    for (double& v : p) v = normal01(rng);
    out.push_back(check_sampler_frequencies(p, draws, rng));
  }
  return out;
}

}  // namespace condcomp

#endif  // CONDCOMP_SAMPLER_CHECK_HPP_
