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

#ifndef CONDCOMP_GRADCHECK_HPP_
#define CONDCOMP_GRADCHECK_HPP_

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "condcomp/tensor.hpp"

namespace condcomp {

struct GradCheckResult {
  bool passed = true;
  double max_rel_error = 0.0;
  std::size_t worst_tensor = 0;  // index into the checked tensor list
  std::size_t worst_index = 0;   // flat index inside that tensor
  std::string message;
};

/// Relative error used by every gradient comparison in the library.
inline double grad_rel_error(double a, double b) {
  return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

/// Compares reverse-mode gradients of the scalar `f()` with respect to each
/// tensor in `params` against central differences (f(x+he) - f(x-he)) / 2h.
/// Parameter values are restored afterwards; existing grads are cleared.
inline GradCheckResult gradient_check_params(const std::function<Tensor()>& f, std::vector<Tensor> params,
                                             double h = 1e-6, double tol = 1e-5) {
  if (!(h > 0)) throw Error("gradient_check: step must be positive");
  GradCheckResult result;
  for (auto& p : params) p.zero_grad();
  Tensor out = f();
  if (out.numel() != 1) throw ShapeError("gradient_check: function output must be scalar, got " + shape_str(out.shape()));
  if (!std::isfinite(out.item())) {
    result.passed = false;
    result.message = "non-finite function value at the base point";
    return result;
  }
  if (out.requires_grad()) backward(out);
  for (std::size_t t = 0; t < params.size(); ++t) {
    const std::vector<double> analytic = params[t].grad();
    auto values = params[t].mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double orig = values[i];
      values[i] = orig + h;
      const double fp = f().item();
      values[i] = orig - h;
      const double fm = f().item();
      values[i] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      if (!std::isfinite(numeric) || !std::isfinite(analytic[i])) {
        result.passed = false;
        result.worst_tensor = t;
        result.worst_index = i;
        result.message = "non-finite gradient at tensor " + std::to_string(t) + " index " + std::to_string(i);
        return result;
      }
      const double err = grad_rel_error(analytic[i], numeric);
      if (err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_tensor = t;
        result.worst_index = i;
      }
    }
  }
  result.passed = result.max_rel_error < tol;
  if (!result.passed) {
    result.message = "max relative error " + std::to_string(result.max_rel_error) + " at tensor " +
                     std::to_string(result.worst_tensor) + " index " + std::to_string(result.worst_index);
  }
  for (auto& p : params) p.zero_grad();
  return result;
}

/// Single-input form: checks d f(x) / dx at a copy of `x`.
inline GradCheckResult gradient_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                                      double h = 1e-6, double tol = 1e-5) {
  Tensor leaf = x.clone(true);
  return gradient_check_params([&] { return f(leaf); }, {leaf}, h, tol);
}

}  // namespace condcomp

#endif  // CONDCOMP_GRADCHECK_HPP_
