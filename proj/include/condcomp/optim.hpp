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

#ifndef CONDCOMP_OPTIM_HPP_
#define CONDCOMP_OPTIM_HPP_

#include <cmath>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "condcomp/tensor.hpp"

namespace condcomp {

enum class OptimizerKind { sgd, adam };

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEps = 1e-8;

/// Named trainable tensors plus per-parameter Adam moments.
class ParameterSet {
 public:
  struct Entry {
    std::string name;
    Tensor value;
    std::vector<double> m;
    std::vector<double> v;
  };

  /// Registers `t` (aliased, not copied) under a unique name.
  Tensor& add(std::string name, Tensor t) {
    if (index_.count(name)) throw Error("parameter set: duplicate name '" + name + "'");
    t.set_requires_grad(true);
    index_[name] = entries_.size();
    const std::size_t n = t.numel();
    entries_.push_back(Entry{std::move(name), std::move(t), std::vector<double>(n, 0.0), std::vector<double>(n, 0.0)});
    return entries_.back().value;
  }

  bool contains(std::string_view name) const { return index_.count(std::string(name)) != 0; }

  const Tensor& get(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) throw Error("parameter set: no parameter named '" + std::string(name) + "'");
    return entries_[it->second].value;
  }
  Tensor& get(std::string_view name) { return const_cast<Tensor&>(std::as_const(*this).get(name)); }

  const std::vector<Entry>& entries() const noexcept { return entries_; }
  std::vector<Entry>& entries() noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }
  long step_count() const noexcept { return t_; }

  std::vector<Tensor> tensors() const {
    std::vector<Tensor> out;
    for (const auto& e : entries_) out.push_back(e.value);
    return out;
  }

  std::size_t total_numel() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.numel();
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_) e.value.zero_grad();
  }

  /// One update with the accumulated gradients. Parameters that never
  /// received a gradient are left unchanged.
  void step(OptimizerKind kind, double lr) {
    if (!(lr > 0)) throw Error("optimizer: learning rate must be positive, got " + std::to_string(lr));
    ++t_;
    const double bc1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(t_));
    for (auto& e : entries_) {
      auto g = e.value.grad_view();
      if (g.empty()) continue;
      auto w = e.value.mutable_data();
      if (kind == OptimizerKind::sgd) {
        for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * g[i];
        continue;
      }
      for (std::size_t i = 0; i < w.size(); ++i) {
        e.m[i] = kAdamBeta1 * e.m[i] + (1.0 - kAdamBeta1) * g[i];
        e.v[i] = kAdamBeta2 * e.v[i] + (1.0 - kAdamBeta2) * g[i] * g[i];
        const double mhat = e.m[i] / bc1;
        const double vhat = e.v[i] / bc2;
        w[i] -= lr * mhat / (std::sqrt(vhat) + kAdamEps);
      }
    }
  }

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
  long t_ = 0;
};

inline void optimizer_step(ParameterSet& params, double lr, OptimizerKind kind) { params.step(kind, lr); }

inline OptimizerKind parse_optimizer_kind(std::string_view s) {
  if (s == "sgd") return OptimizerKind::sgd;
  if (s == "adam") return OptimizerKind::adam;
  throw Error("unknown optimizer '" + std::string(s) + "'");
}

}  // namespace condcomp

#endif  // CONDCOMP_OPTIM_HPP_
