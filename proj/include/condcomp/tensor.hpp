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

#ifndef CONDCOMP_TENSOR_HPP_
#define CONDCOMP_TENSOR_HPP_

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace condcomp {

using Shape = std::vector<std::size_t>;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

struct Node;
using BackwardFn = std::function<void(const Node& self)>;

/// One recorded value. Leaves have no backward rule; results of ops that
/// touch a gradient-requiring input keep their inputs alive through `inputs`.
struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;     // persistent accumulator, allocated lazily
  std::vector<double> pending;  // scratch buffer used during one backward pass
  bool requires_grad = false;
  std::string op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn backward;

  Node() = default;
  Node(const Node&) = delete;
  Node& operator=(const Node&) = delete;

  // Releases long input chains iteratively; the default recursive teardown
  // overflows the stack on graphs a few hundred thousand nodes deep.
  ~Node() {
    std::vector<std::shared_ptr<Node>> stack = std::move(inputs);
    backward = nullptr;  // drops the closures' references to the same inputs
    while (!stack.empty()) {
      std::shared_ptr<Node> n = std::move(stack.back());
      stack.pop_back();
      if (n.use_count() == 1) {
        for (auto& in : n->inputs) stack.push_back(std::move(in));
        n->inputs.clear();
        n->backward = nullptr;
      }
    }
  }
};

#ifdef NDEBUG
inline constexpr bool kFiniteChecksDefault = false;
#else
inline constexpr bool kFiniteChecksDefault = true;
#endif

inline bool& finite_checks_flag() {
  thread_local bool enabled = kFiniteChecksDefault;
  return enabled;
}

}  // namespace detail

/// Enables or disables the non-finite value check run on every op result.
/// On by default in debug builds.
inline void set_finite_checks(bool enabled) { detail::finite_checks_flag() = enabled; }
inline bool finite_checks_enabled() { return detail::finite_checks_flag(); }

/// Dense row-major float64 array with an optional reverse-mode graph.
///
/// Tensor is a shared handle: copies alias the same storage, which is how
/// parameters are shared between a model and its ParameterSet.
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    if (shape_numel(shape) != data.size()) {
      throw ShapeError("tensor: data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    }
    for (std::size_t d : shape) {
      if (d == 0) throw ShapeError("tensor: zero-sized dimension in " + shape_str(shape));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return Tensor(Shape{}, {value}, requires_grad);
  }

  static Tensor vector(std::vector<double> values, bool requires_grad = false) {
    const std::size_t n = values.size();
    return Tensor(Shape{n}, std::move(values), requires_grad);
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                       bool requires_grad = false) {
    return Tensor(Shape{rows, cols}, std::move(values), requires_grad);
  }

  bool defined() const noexcept { return node_ != nullptr; }

  const Shape& shape() const { return checked().shape; }
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t i) const {
    const Shape& s = shape();
    if (i >= s.size()) throw ShapeError("tensor: axis " + std::to_string(i) + " out of range for " + shape_str(s));
    return s[i];
  }
  std::size_t numel() const { return checked().data.size(); }

  std::span<const double> data() const { return checked().data; }
  /// Direct write access. Only meaningful on leaves (parameters, inputs);
  /// writing into an op result does not invalidate recorded backward rules.
  std::span<double> mutable_data() { return checked().data; }
  std::vector<double> to_vector() const { return checked().data; }

  double item() const {
    if (numel() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
    return checked().data[0];
  }
  double operator[](std::size_t i) const { return checked().data.at(i); }
  double at(std::size_t r, std::size_t c) const {
    const Shape& s = shape();
    if (s.size() != 2) throw ShapeError("at: expected rank-2 tensor, got " + shape_str(s));
    return checked().data.at(r * s[1] + c);
  }

  bool requires_grad() const { return checked().requires_grad; }
  void set_requires_grad(bool value) { checked().requires_grad = value; }

  bool has_grad() const { return !checked().grad.empty(); }
  /// Accumulated gradient; all zeros when backward never reached this tensor.
  std::vector<double> grad() const {
    const auto& n = checked();
    return n.grad.empty() ? std::vector<double>(n.data.size(), 0.0) : n.grad;
  }
  std::span<const double> grad_view() const { return checked().grad; }
  void zero_grad() { checked().grad.clear(); }

  /// Same values, no graph.
  Tensor detach() const { return Tensor(shape(), checked().data, false); }
  Tensor clone(bool requires_grad = false) const { return Tensor(shape(), checked().data, requires_grad); }

  const std::string& op() const { return checked().op; }
  detail::Node* node() const noexcept { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const noexcept { return node_; }

  /// Builds an op result. The backward rule and inputs are recorded only
  /// when at least one input requires a gradient.
  static Tensor make_result(std::string op, Shape shape, std::vector<double> data,
                            const std::vector<Tensor>& inputs, detail::BackwardFn backward) {
    if (finite_checks_enabled()) {
      for (std::size_t i = 0; i < data.size(); ++i) {
        if (!std::isfinite(data[i])) {
          throw Error(op + ": non-finite value " + std::to_string(data[i]) + " at flat index " +
                      std::to_string(i) + " of result " + shape_str(shape));
        }
      }
    }
    Tensor out;
    out.node_ = std::make_shared<detail::Node>();
    out.node_->shape = std::move(shape);
    out.node_->data = std::move(data);
    out.node_->op = std::move(op);
    bool any = false;
    for (const auto& t : inputs) any = any || t.requires_grad();
    if (any) {
      out.node_->requires_grad = true;
      out.node_->inputs.reserve(inputs.size());
      for (const auto& t : inputs) out.node_->inputs.push_back(t.node_);
      out.node_->backward = std::move(backward);
    }
    return out;
  }

 private:
  detail::Node& checked() const {
    if (!node_) throw Error("tensor: use of undefined tensor");
    return *node_;
  }

  std::shared_ptr<detail::Node> node_;
};

/// Gradient sink of `t` during backward, or nullptr when `t` needs no gradient.
inline std::vector<double>* grad_sink(const Tensor& t) {
  auto* n = t.node();
  return (n != nullptr && n->requires_grad) ? &n->pending : nullptr;
}

/// Topologically ordered list of the recorded nodes reachable from an output.
/// Every node's inputs appear before it; each node appears once.
class ComputationTape {
 public:
  explicit ComputationTape(const Tensor& output) {
    if (!output.defined() || !output.requires_grad()) return;
    std::unordered_set<const detail::Node*> seen;
    // Iterative post-order DFS so deep graphs do not exhaust the stack.
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(output.node(), 0);
    seen.insert(output.node());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        detail::Node* child = node->inputs[next++].get();
        if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
      } else {
        order_.push_back(node);
        stack.pop_back();
      }
    }
  }

  const std::vector<detail::Node*>& nodes() const noexcept { return order_; }
  std::size_t size() const noexcept { return order_.size(); }
  bool empty() const noexcept { return order_.empty(); }

 private:
  std::vector<detail::Node*> order_;
};

/// Reverse-mode pass from a scalar output. Gradients are added to any
/// existing `grad` contents, so calling twice without `zero_grad`
/// accumulates twice.
inline void backward(const Tensor& output) {
  if (!output.defined()) throw Error("backward: undefined output");
  if (output.numel() != 1) {
    throw ShapeError("backward: output must be a scalar, got shape " + shape_str(output.shape()));
  }
  ComputationTape tape(output);
  if (tape.empty()) throw Error("backward: output does not depend on any tensor requiring a gradient");
  for (auto* n : tape.nodes()) n->pending.assign(n->data.size(), 0.0);
  output.node()->pending[0] = 1.0;
  const auto& order = tape.nodes();
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward) (*it)->backward(**it);
  }
  for (auto* n : order) {
    if (n->grad.empty()) {
      n->grad = std::move(n->pending);
    } else {
      for (std::size_t i = 0; i < n->grad.size(); ++i) n->grad[i] += n->pending[i];
    }
    n->pending.clear();
    n->pending.shrink_to_fit();
  }
}

}  // namespace condcomp

#endif  // CONDCOMP_TENSOR_HPP_
