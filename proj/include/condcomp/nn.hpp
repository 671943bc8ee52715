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

#ifndef CONDCOMP_NN_HPP_
#define CONDCOMP_NN_HPP_

#include <cmath>
#include <string>
#include <string_view>

#include "condcomp/cost_trace.hpp"
#include "condcomp/ops.hpp"
#include "condcomp/optim.hpp"
#include "condcomp/rng.hpp"

namespace condcomp {

inline Tensor uniform_tensor(Shape shape, double bound, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = uniform(rng, -bound, bound);
  return Tensor(std::move(shape), std::move(v));
}

inline Tensor normal_tensor(Shape shape, double stddev, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = stddev * normal01(rng);
  return Tensor(std::move(shape), std::move(v));
}

/// y = x W + b on row-stacked inputs.
struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng)
      : weight(uniform_tensor({in, out}, 1.0 / std::sqrt(static_cast<double>(in)), rng)),
        bias(Tensor::zeros({out})) {}

  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }

  Tensor operator()(const Tensor& x, Recorder* rec = nullptr, std::string_view label = "linear") const {
    if (x.rank() != 2 || x.dim(1) != in_features()) {
      throw ShapeError(std::string(label) + ": input " + shape_str(x.shape()) + " does not match weight " +
                       shape_str(weight.shape()));
    }
    record(rec, label, static_cast<std::uint64_t>(x.dim(0)) * in_features() * out_features());
    return add(matmul(x, weight), bias);
  }

  void register_params(ParameterSet& ps, const std::string& prefix) {
    weight = ps.add(prefix + ".weight", weight);
    bias = ps.add(prefix + ".bias", bias);
  }
};

struct LayerNorm {
  Tensor gamma;
  Tensor beta;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t d) : gamma(Tensor::full({d}, 1.0)), beta(Tensor::zeros({d})) {}

  Tensor operator()(const Tensor& x, Recorder* rec = nullptr, std::string_view label = "norm") const {
    record(rec, label, 0, x.numel());
    return layer_norm(x, gamma, beta);
  }

  void register_params(ParameterSet& ps, const std::string& prefix) {
    gamma = ps.add(prefix + ".gamma", gamma);
    beta = ps.add(prefix + ".beta", beta);
  }
};

enum class Activation { gelu, relu, identity };

inline Tensor activate(const Tensor& x, Activation act) {
  switch (act) {
    case Activation::gelu: return gelu(x);
    case Activation::relu: return relu(x);
    case Activation::identity: return x;
  }
  return x;
}

/// Two-layer perceptron d_in -> d_hidden -> d_out.
struct Mlp {
  Linear fc1;
  Linear fc2;
  Activation act = Activation::gelu;

  Mlp() = default;
  Mlp(std::size_t d_in, std::size_t d_hidden, std::size_t d_out, Rng& rng, Activation a = Activation::gelu)
      : fc1(d_in, d_hidden, rng), fc2(d_hidden, d_out, rng), act(a) {}

  Tensor operator()(const Tensor& x, Recorder* rec = nullptr, std::string_view label = "mlp") const {
    Tensor h = fc1(x, rec, label);
    if (act != Activation::identity) record(rec, label, 0, h.numel());
    return fc2(activate(h, act), rec, label);
  }

  /// MACs of one evaluation on `rows` rows.
  std::uint64_t macs(std::size_t rows) const {
    return static_cast<std::uint64_t>(rows) *
           (fc1.in_features() * fc1.out_features() + fc2.in_features() * fc2.out_features());
  }

  void register_params(ParameterSet& ps, const std::string& prefix) {
    fc1.register_params(ps, prefix + ".fc1");
    fc2.register_params(ps, prefix + ".fc2");
  }
};

/// Mean over rows, optionally weighted by a per-row keep vector:
/// sum_t w_t x_t / sum_t w_t. Output shape [1, d].
inline Tensor mean_pool(const Tensor& x, Recorder* rec = nullptr, std::string_view label = "pool") {
  record(rec, label, 0, x.numel());
  return mean(x, 0, true);
}

inline Tensor weighted_mean_pool(const Tensor& x, const Tensor& keep, Recorder* rec = nullptr,
                                 std::string_view label = "pool") {
  record(rec, label, 0, x.numel());
  Tensor w = reshape(keep, {keep.numel(), 1});
  Tensor total = sum(keep);
  if (!(total.item() > 0)) throw Error("pool: no alive rows");
  Tensor num = sum(mul(x, w), 0, true);
  return div(num, total);
}

}  // namespace condcomp

#endif  // CONDCOMP_NN_HPP_
