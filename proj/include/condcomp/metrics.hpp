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

#ifndef CONDCOMP_METRICS_HPP_
#define CONDCOMP_METRICS_HPP_

#include <algorithm>
#include <cmath>
#include <map>
#include <utility>
#include <vector>

#include "condcomp/tensor.hpp"

namespace condcomp {

/// Normalized mutual information with arithmetic-mean normalization,
/// 2 I(a; b) / (H(a) + H(b)). Two constant labelings score 1.
inline double normalized_mutual_information(const std::vector<long>& a, const std::vector<long>& b) {
  if (a.size() != b.size()) throw Error("nmi: labelings of different length");
  if (a.empty()) throw Error("nmi: empty labelings");
  const double n = static_cast<double>(a.size());
  std::map<long, double> pa, pb;
  std::map<std::pair<long, long>, double> pab;
  for (std::size_t i = 0; i < a.size(); ++i) {
    pa[a[i]] += 1.0;
    pb[b[i]] += 1.0;
    pab[{a[i], b[i]}] += 1.0;
  }
  auto entropy = [n](const auto& counts) {
    double h = 0.0;
    for (const auto& [k, c] : counts) h -= (c / n) * std::log(c / n);
    return h;
  };
  const double ha = entropy(pa), hb = entropy(pb);
  if (ha + hb == 0.0) return 1.0;
  double mi = 0.0;
  for (const auto& [key, c] : pab) {
    const double pxy = c / n;
    mi += pxy * std::log(pxy / ((pa[key.first] / n) * (pb[key.second] / n)));
  }
  return std::clamp(2.0 * mi / (ha + hb), 0.0, 1.0);
}

/// Fraction of `informative` ids that appear in `kept` (both ascending).
inline double informative_recall(const std::vector<std::size_t>& kept, const std::vector<std::size_t>& informative) {
  if (informative.empty()) return 1.0;
  std::size_t hit = 0;
  for (std::size_t t : informative)
    if (std::binary_search(kept.begin(), kept.end(), t)) ++hit;
  return static_cast<double>(hit) / static_cast<double>(informative.size());
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw Error("median: empty input");
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

}  // namespace condcomp

#endif  // CONDCOMP_METRICS_HPP_
