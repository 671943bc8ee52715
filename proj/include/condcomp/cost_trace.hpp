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

#ifndef CONDCOMP_COST_TRACE_HPP_
#define CONDCOMP_COST_TRACE_HPP_

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace condcomp {

// Counting conventions shared by the recorder and the analytic model:
//  - one MAC per multiply-accumulate; a linear map on n rows costs n*d_in*d_out
//    (bias adds are not counted);
//  - softmax, normalization, pooling and nonlinearities are element-ops, one
//    per element touched, reported separately from MACs;
//  - residual adds and positional-embedding adds are free.

struct CostEntry {
  std::string layer;
  std::uint64_t macs = 0;
  std::uint64_t elem_ops = 0;
};

struct ExpertEval {
  std::string layer;
  std::size_t expert = 0;
  std::size_t rows = 0;
};

/// Accumulates the work actually executed by forward passes, derived from
/// the shapes of the tensors that were really computed.
class Recorder {
 public:
  void add(std::string_view layer, std::uint64_t macs, std::uint64_t elem_ops = 0) {
    for (auto& e : entries_) {
      if (e.layer == layer) {
        e.macs += macs;
        e.elem_ops += elem_ops;
        return;
      }
    }
    entries_.push_back(CostEntry{std::string(layer), macs, elem_ops});
  }

  void note_expert_eval(std::string_view layer, std::size_t expert, std::size_t rows) {
    experts_.push_back(ExpertEval{std::string(layer), expert, rows});
  }

  std::uint64_t total_macs() const {
    std::uint64_t t = 0;
    for (const auto& e : entries_) t += e.macs;
    return t;
  }
  std::uint64_t total_elem_ops() const {
    std::uint64_t t = 0;
    for (const auto& e : entries_) t += e.elem_ops;
    return t;
  }
  std::uint64_t macs(std::string_view layer) const {
    for (const auto& e : entries_)
      if (e.layer == layer) return e.macs;
    return 0;
  }

  const std::vector<CostEntry>& entries() const noexcept { return entries_; }
  const std::vector<ExpertEval>& expert_evals() const noexcept { return experts_; }

  void clear() {
    entries_.clear();
    experts_.clear();
  }

 private:
  std::vector<CostEntry> entries_;
  std::vector<ExpertEval> experts_;
};

inline void record(Recorder* rec, std::string_view layer, std::uint64_t macs, std::uint64_t elem_ops = 0) {
  if (rec) rec->add(layer, macs, elem_ops);
}

}  // namespace condcomp

#endif  // CONDCOMP_COST_TRACE_HPP_
