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

#ifndef CONDCOMP_OPS_HPP_
#define CONDCOMP_OPS_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "condcomp/tensor.hpp"

namespace condcomp {

namespace detail {

inline Shape broadcast_shape(const Shape& a, const Shape& b, std::string_view op) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                       " are not broadcast-compatible");
    }
    out[i] = std::max(da, db);
  }
  return out;
}

/// For every flat index of `out`, the flat index of the broadcast source `in`.
inline std::vector<std::size_t> broadcast_index_map(const Shape& out, const Shape& in) {
  const std::size_t rank = out.size();
  const std::size_t offset = rank - in.size();
  std::vector<std::size_t> in_strides(rank, 0);
  std::size_t stride = 1;
  for (std::size_t i = rank; i-- > offset;) {
    const std::size_t d = in[i - offset];
    in_strides[i] = d == 1 ? 0 : stride;
    stride *= d;
  }
  const std::size_t n = shape_numel(out);
  std::vector<std::size_t> map(n);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t src = 0;
  for (std::size_t flat = 0; flat < n; ++flat) {
    map[flat] = src;
    for (std::size_t ax = rank; ax-- > 0;) {
      ++idx[ax];
      src += in_strides[ax];
      if (idx[ax] < out[ax]) break;
      src -= in_strides[ax] * idx[ax];
      idx[ax] = 0;
    }
  }
  return map;
}

struct AxisSplit {
  std::size_t outer, len, inner;
};

inline AxisSplit split_axis(const Shape& s, std::size_t axis, std::string_view op) {
  if (axis >= s.size()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for shape " + shape_str(s));
  }
  AxisSplit r{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

inline void require_rank(const Tensor& t, std::size_t rank, std::string_view op) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank-" + std::to_string(rank) + " tensor, got " +
                     shape_str(t.shape()));
  }
}

template <class F, class DF>
Tensor unary(const char* name, const Tensor& a, F f, DF df) {
  std::vector<double> out(a.numel());
  auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i]);
  return Tensor::make_result(name, a.shape(), std::move(out), {a}, [a, df](const Node& self) {
    if (auto* g = grad_sink(a)) {
      auto x = a.data();
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.pending[i] * df(x[i], self.data[i]);
    }
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and broadcasting arithmetic

inline Tensor add(const Tensor& a, const Tensor& b) {
  Shape out_shape = detail::broadcast_shape(a.shape(), b.shape(), "add");
  auto ma = detail::broadcast_index_map(out_shape, a.shape());
  auto mb = detail::broadcast_index_map(out_shape, b.shape());
  std::vector<double> out(ma.size());
  auto xa = a.data();
  auto xb = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xa[ma[i]] + xb[mb[i]];
  return Tensor::make_result("add", std::move(out_shape), std::move(out), {a, b},
                             [a, b, ma, mb](const detail::Node& self) {
                               if (auto* g = grad_sink(a))
                                 for (std::size_t i = 0; i < ma.size(); ++i) (*g)[ma[i]] += self.pending[i];
                               if (auto* g = grad_sink(b))
                                 for (std::size_t i = 0; i < mb.size(); ++i) (*g)[mb[i]] += self.pending[i];
                             });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  Shape out_shape = detail::broadcast_shape(a.shape(), b.shape(), "sub");
  auto ma = detail::broadcast_index_map(out_shape, a.shape());
  auto mb = detail::broadcast_index_map(out_shape, b.shape());
  std::vector<double> out(ma.size());
  auto xa = a.data();
  auto xb = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xa[ma[i]] - xb[mb[i]];
  return Tensor::make_result("sub", std::move(out_shape), std::move(out), {a, b},
                             [a, b, ma, mb](const detail::Node& self) {
                               if (auto* g = grad_sink(a))
                                 for (std::size_t i = 0; i < ma.size(); ++i) (*g)[ma[i]] += self.pending[i];
                               if (auto* g = grad_sink(b))
                                 for (std::size_t i = 0; i < mb.size(); ++i) (*g)[mb[i]] -= self.pending[i];
                             });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  Shape out_shape = detail::broadcast_shape(a.shape(), b.shape(), "mul");
  auto ma = detail::broadcast_index_map(out_shape, a.shape());
  auto mb = detail::broadcast_index_map(out_shape, b.shape());
  std::vector<double> out(ma.size());
  auto xa = a.data();
  auto xb = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xa[ma[i]] * xb[mb[i]];
  return Tensor::make_result("mul", std::move(out_shape), std::move(out), {a, b},
                             [a, b, ma, mb](const detail::Node& self) {
                               auto xa = a.data();
                               auto xb = b.data();
                               if (auto* g = grad_sink(a))
                                 for (std::size_t i = 0; i < ma.size(); ++i) (*g)[ma[i]] += self.pending[i] * xb[mb[i]];
                               if (auto* g = grad_sink(b))
                                 for (std::size_t i = 0; i < mb.size(); ++i) (*g)[mb[i]] += self.pending[i] * xa[ma[i]];
                             });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  Shape out_shape = detail::broadcast_shape(a.shape(), b.shape(), "div");
  auto ma = detail::broadcast_index_map(out_shape, a.shape());
  auto mb = detail::broadcast_index_map(out_shape, b.shape());
  std::vector<double> out(ma.size());
  auto xa = a.data();
  auto xb = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (xb[mb[i]] == 0.0) throw Error("div: division by zero");
    out[i] = xa[ma[i]] / xb[mb[i]];
  }
  return Tensor::make_result("div", std::move(out_shape), std::move(out), {a, b},
                             [a, b, ma, mb](const detail::Node& self) {
                               auto xb = b.data();
                               if (auto* g = grad_sink(a))
                                 for (std::size_t i = 0; i < ma.size(); ++i) (*g)[ma[i]] += self.pending[i] / xb[mb[i]];
                               if (auto* g = grad_sink(b))
                                 for (std::size_t i = 0; i < mb.size(); ++i)
                                   (*g)[mb[i]] -= self.pending[i] * self.data[i] / xb[mb[i]];
                             });
}

inline Tensor scale(const Tensor& a, double s) {
  return detail::unary("scale", a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

inline Tensor add_scalar(const Tensor& a, double s) {
  return detail::unary("add_scalar", a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }

inline Tensor broadcast_to(const Tensor& a, const Shape& shape) {
  Shape out_shape = detail::broadcast_shape(a.shape(), shape, "broadcast");
  if (out_shape != shape) {
    throw ShapeError("broadcast: cannot broadcast " + shape_str(a.shape()) + " to " + shape_str(shape));
  }
  auto map = detail::broadcast_index_map(out_shape, a.shape());
  std::vector<double> out(map.size());
  auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[map[i]];
  return Tensor::make_result("broadcast", std::move(out_shape), std::move(out), {a},
                             [a, map](const detail::Node& self) {
                               if (auto* g = grad_sink(a))
                                 for (std::size_t i = 0; i < map.size(); ++i) (*g)[map[i]] += self.pending[i];
                             });
}

// ---------------------------------------------------------------------------
// Nonlinearities

inline Tensor relu(const Tensor& a) {
  return detail::unary("relu", a, [](double x) { return x > 0 ? x : 0.0; },
                       [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

inline constexpr double kGeluCoeff = 0.044715;

/// gelu with the tanh approximation.
inline Tensor gelu(const Tensor& a) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  return detail::unary(
      "gelu", a,
      [](double x) { return 0.5 * x * (1.0 + std::tanh(c * (x + kGeluCoeff * x * x * x))); },
      [](double x, double) {
        const double t = std::tanh(c * (x + kGeluCoeff * x * x * x));
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * kGeluCoeff * x * x);
      });
}

inline Tensor sigmoid(const Tensor& a) {
  return detail::unary(
      "sigmoid", a,
      [](double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); },
      [](double, double y) { return y * (1.0 - y); });
}

inline Tensor exp(const Tensor& a) {
  return detail::unary("exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& a) {
  for (double v : a.data()) {
    if (!(v > 0)) throw Error("log: non-positive input " + std::to_string(v));
  }
  return detail::unary("log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

// ---------------------------------------------------------------------------
// Linear algebra and reshaping

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: cannot multiply " + shape_str(a.shape()) + " by " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  auto xa = a.data();
  auto xb = b.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double av = xa[i * k + p];
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += av * xb[p * n + j];
    }
  return Tensor::make_result("matmul", Shape{m, n}, std::move(out), {a, b}, [a, b, m, k, n](const detail::Node& self) {
    const auto& g = self.pending;
    auto xa = a.data();
    auto xb = b.data();
    if (auto* ga = grad_sink(a))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * xb[p * n + j];
          (*ga)[i * k + p] += acc;
        }
    if (auto* gb = grad_sink(b))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double av = xa[i * k + p];
          for (std::size_t j = 0; j < n; ++j) (*gb)[p * n + j] += av * g[i * n + j];
        }
  });
}

inline Tensor transpose(const Tensor& a) {
  detail::require_rank(a, 2, "transpose");
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<double> out(r * c);
  auto x = a.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x[i * c + j];
  return Tensor::make_result("transpose", Shape{c, r}, std::move(out), {a}, [a, r, c](const detail::Node& self) {
    if (auto* g = grad_sink(a))
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) (*g)[i * c + j] += self.pending[j * r + i];
  });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  return Tensor::make_result("reshape", std::move(shape), a.to_vector(), {a}, [a](const detail::Node& self) {
    if (auto* g = grad_sink(a))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.pending[i];
  });
}

/// Columns [begin, end) of a matrix.
inline Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  detail::require_rank(a, 2, "slice_cols");
  const std::size_t r = a.dim(0), c = a.dim(1);
  if (begin >= end || end > c) {
    throw ShapeError("slice_cols: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") invalid for " + shape_str(a.shape()));
  }
  const std::size_t w = end - begin;
  std::vector<double> out(r * w);
  auto x = a.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = x[i * c + begin + j];
  return Tensor::make_result("slice_cols", Shape{r, w}, std::move(out), {a},
                             [a, r, c, w, begin](const detail::Node& self) {
                               if (auto* g = grad_sink(a))
                                 for (std::size_t i = 0; i < r; ++i)
                                   for (std::size_t j = 0; j < w; ++j) (*g)[i * c + begin + j] += self.pending[i * w + j];
                             });
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts.front().shape();
  Shape out_shape = first;
  if (axis >= first.size()) throw ShapeError("concat: axis " + std::to_string(axis) + " out of range for " + shape_str(first));
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == first[i];
    if (!ok) throw ShapeError("concat: shape " + shape_str(s) + " does not conform to " + shape_str(first) + " along axis " + std::to_string(axis));
    out_shape[axis] += s[axis];
  }
  const auto split = detail::split_axis(out_shape, axis, "concat");
  std::vector<double> out(shape_numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t len = p.dim(axis);
    auto x = p.data();
    for (std::size_t o = 0; o < split.outer; ++o)
      for (std::size_t l = 0; l < len; ++l)
        for (std::size_t in = 0; in < split.inner; ++in)
          out[(o * split.len + off + l) * split.inner + in] = x[(o * len + l) * split.inner + in];
    off += len;
  }
  return Tensor::make_result("concat", out_shape, std::move(out), parts,
                             [parts, offsets, split, axis](const detail::Node& self) {
                               for (std::size_t pi = 0; pi < parts.size(); ++pi) {
                                 auto* g = grad_sink(parts[pi]);
                                 if (!g) continue;
                                 const std::size_t len = parts[pi].dim(axis);
                                 for (std::size_t o = 0; o < split.outer; ++o)
                                   for (std::size_t l = 0; l < len; ++l)
                                     for (std::size_t in = 0; in < split.inner; ++in)
                                       (*g)[(o * len + l) * split.inner + in] +=
                                           self.pending[(o * split.len + offsets[pi] + l) * split.inner + in];
                               }
                             });
}

// ---------------------------------------------------------------------------
// Row selection

/// Rows `indices` of `a` (first axis), in the given order; repeats allowed.
inline Tensor gather_rows(const Tensor& a, const std::vector<std::size_t>& indices) {
  if (a.rank() == 0) throw ShapeError("row-gather: scalar input");
  if (indices.empty()) throw ShapeError("row-gather: empty index list");
  const std::size_t rows = a.dim(0);
  const std::size_t width = a.numel() / rows;
  for (std::size_t idx : indices)
    if (idx >= rows) throw ShapeError("row-gather: index " + std::to_string(idx) + " out of range for " + shape_str(a.shape()));
  Shape out_shape = a.shape();
  out_shape[0] = indices.size();
  std::vector<double> out(indices.size() * width);
  auto x = a.data();
  for (std::size_t r = 0; r < indices.size(); ++r)
    std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(indices[r] * width), width,
                out.begin() + static_cast<std::ptrdiff_t>(r * width));
  return Tensor::make_result("row-gather", std::move(out_shape), std::move(out), {a},
                             [a, indices, width](const detail::Node& self) {
                               if (auto* g = grad_sink(a))
                                 for (std::size_t r = 0; r < indices.size(); ++r)
                                   for (std::size_t c = 0; c < width; ++c)
                                     (*g)[indices[r] * width + c] += self.pending[r * width + c];
                             });
}

/// Inverse of gather_rows: row i of `a` is added into row indices[i] of a
/// zero tensor with `rows` rows.
inline Tensor scatter_add_rows(const Tensor& a, const std::vector<std::size_t>& indices, std::size_t rows) {
  if (a.rank() == 0 || a.dim(0) != indices.size()) {
    throw ShapeError("scatter-add: " + std::to_string(indices.size()) + " indices for source " + shape_str(a.shape()));
  }
  const std::size_t width = a.numel() / a.dim(0);
  for (std::size_t idx : indices)
    if (idx >= rows) throw ShapeError("scatter-add: index " + std::to_string(idx) + " out of range for " + std::to_string(rows) + " rows");
  Shape out_shape = a.shape();
  out_shape[0] = rows;
  std::vector<double> out(rows * width, 0.0);
  auto x = a.data();
  for (std::size_t r = 0; r < indices.size(); ++r)
    for (std::size_t c = 0; c < width; ++c) out[indices[r] * width + c] += x[r * width + c];
  return Tensor::make_result("scatter-add", std::move(out_shape), std::move(out), {a},
                             [a, indices, width](const detail::Node& self) {
                               if (auto* g = grad_sink(a))
                                 for (std::size_t r = 0; r < indices.size(); ++r)
                                   for (std::size_t c = 0; c < width; ++c)
                                     (*g)[r * width + c] += self.pending[indices[r] * width + c];
                             });
}

/// Zeroes every row whose `keep` flag is 0. Kept rows are copied bit-exactly.
inline Tensor mask_rows(const Tensor& a, const std::vector<std::uint8_t>& keep) {
  if (a.rank() == 0 || a.dim(0) != keep.size()) {
    throw ShapeError("row-mask: mask of length " + std::to_string(keep.size()) + " for " + shape_str(a.shape()));
  }
  const std::size_t width = a.numel() / a.dim(0);
  std::vector<double> out(a.numel(), 0.0);
  auto x = a.data();
  for (std::size_t r = 0; r < keep.size(); ++r)
    if (keep[r])
      for (std::size_t c = 0; c < width; ++c) out[r * width + c] = x[r * width + c];
  return Tensor::make_result("row-mask", a.shape(), std::move(out), {a}, [a, keep, width](const detail::Node& self) {
    if (auto* g = grad_sink(a))
      for (std::size_t r = 0; r < keep.size(); ++r)
        if (keep[r])
          for (std::size_t c = 0; c < width; ++c) (*g)[r * width + c] += self.pending[r * width + c];
  });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return Tensor::make_result("sum", Shape{}, {s}, {a}, [a](const detail::Node& self) {
    if (auto* g = grad_sink(a))
      for (double& v : *g) v += self.pending[0];
  });
}

inline Tensor sum(const Tensor& a, std::size_t axis, bool keepdim = false) {
  const auto sp = detail::split_axis(a.shape(), axis, "sum");
  Shape out_shape = a.shape();
  if (keepdim) out_shape[axis] = 1; else out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  std::vector<double> out(sp.outer * sp.inner, 0.0);
  auto x = a.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t l = 0; l < sp.len; ++l)
      for (std::size_t i = 0; i < sp.inner; ++i) out[o * sp.inner + i] += x[(o * sp.len + l) * sp.inner + i];
  return Tensor::make_result("sum", std::move(out_shape), std::move(out), {a}, [a, sp](const detail::Node& self) {
    if (auto* g = grad_sink(a))
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t l = 0; l < sp.len; ++l)
          for (std::size_t i = 0; i < sp.inner; ++i) (*g)[(o * sp.len + l) * sp.inner + i] += self.pending[o * sp.inner + i];
  });
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

inline Tensor mean(const Tensor& a, std::size_t axis, bool keepdim = false) {
  return scale(sum(a, axis, keepdim), 1.0 / static_cast<double>(a.dim(axis)));
}

// ---------------------------------------------------------------------------
// Softmax family

/// softmax(a / temperature) along `axis`, with max-subtraction.
inline Tensor softmax(const Tensor& a, std::size_t axis, double temperature = 1.0) {
  if (!(temperature > 0)) throw Error("softmax: temperature must be positive, got " + std::to_string(temperature));
  const auto sp = detail::split_axis(a.shape(), axis, "softmax");
  std::vector<double> out(a.numel());
  auto x = a.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      auto at = [&](std::size_t l) { return (o * sp.len + l) * sp.inner + i; };
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < sp.len; ++l) m = std::max(m, x[at(l)]);
      double z = 0.0;
      for (std::size_t l = 0; l < sp.len; ++l) z += (out[at(l)] = std::exp((x[at(l)] - m) / temperature));
      for (std::size_t l = 0; l < sp.len; ++l) out[at(l)] /= z;
    }
  return Tensor::make_result("softmax", a.shape(), std::move(out), {a}, [a, sp, temperature](const detail::Node& self) {
    auto* g = grad_sink(a);
    if (!g) return;
    const auto& s = self.data;
    const auto& go = self.pending;
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < sp.inner; ++i) {
        auto at = [&](std::size_t l) { return (o * sp.len + l) * sp.inner + i; };
        double dot = 0.0;
        for (std::size_t l = 0; l < sp.len; ++l) dot += go[at(l)] * s[at(l)];
        for (std::size_t l = 0; l < sp.len; ++l) (*g)[at(l)] += s[at(l)] * (go[at(l)] - dot) / temperature;
      }
  });
}

/// Row softmax of a matrix with nonnegative per-entry weights:
/// out_ij = w_ij exp(x_ij) / sum_k w_ik exp(x_ik).
///
/// Weights broadcast from [cols], [1, cols] or [rows, cols]. Binary weights
/// give masked softmax with masked entries exactly zero; fractional weights
/// are differentiable. A row whose weights are all zero is an error.
inline Tensor weighted_softmax(const Tensor& x, const Tensor& w) {
  detail::require_rank(x, 2, "weighted-softmax");
  const std::size_t r = x.dim(0), c = x.dim(1);
  Shape ws = w.shape();
  const bool per_row = ws == Shape{r, c};
  if (!per_row && ws != Shape{c} && ws != Shape{1, c}) {
    throw ShapeError("weighted-softmax: weights " + shape_str(ws) + " do not match scores " + shape_str(x.shape()));
  }
  auto xv = x.data();
  auto wv = w.data();
  auto widx = [per_row, c](std::size_t i, std::size_t j) { return per_row ? i * c + j : j; };
  for (double v : wv)
    if (v < 0) throw Error("weighted-softmax: negative weight " + std::to_string(v));
  std::vector<double> out(r * c, 0.0);
  std::vector<double> expz(r * c, 0.0);  // exp(x - m) / Z, needed for the weight gradient
  for (std::size_t i = 0; i < r; ++i) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j)
      if (wv[widx(i, j)] > 0) m = std::max(m, xv[i * c + j]);
    if (!std::isfinite(m)) throw Error("weighted-softmax: row " + std::to_string(i) + " has no positive weight");
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      expz[i * c + j] = std::exp(xv[i * c + j] - m);
      z += wv[widx(i, j)] * expz[i * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) {
      expz[i * c + j] /= z;
      out[i * c + j] = wv[widx(i, j)] * expz[i * c + j];
    }
  }
  return Tensor::make_result("weighted-softmax", x.shape(), std::move(out), {x, w},
                             [x, w, r, c, per_row, expz](const detail::Node& self) {
                               const auto& s = self.data;
                               const auto& go = self.pending;
                               auto* gx = grad_sink(x);
                               auto* gw = grad_sink(w);
                               for (std::size_t i = 0; i < r; ++i) {
                                 double dot = 0.0;
                                 for (std::size_t j = 0; j < c; ++j) dot += go[i * c + j] * s[i * c + j];
                                 for (std::size_t j = 0; j < c; ++j) {
                                   const double centered = go[i * c + j] - dot;
                                   if (gx) (*gx)[i * c + j] += s[i * c + j] * centered;
                                   if (gw) (*gw)[per_row ? i * c + j : j] += expz[i * c + j] * centered;
                                 }
                               }
                             });
}

inline Tensor log_softmax(const Tensor& a, std::size_t axis) {
  const auto sp = detail::split_axis(a.shape(), axis, "log-softmax");
  std::vector<double> out(a.numel());
  auto x = a.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      auto at = [&](std::size_t l) { return (o * sp.len + l) * sp.inner + i; };
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < sp.len; ++l) m = std::max(m, x[at(l)]);
      double z = 0.0;
      for (std::size_t l = 0; l < sp.len; ++l) z += std::exp(x[at(l)] - m);
      const double lse = m + std::log(z);
      for (std::size_t l = 0; l < sp.len; ++l) out[at(l)] = x[at(l)] - lse;
    }
  return Tensor::make_result("log-softmax", a.shape(), std::move(out), {a}, [a, sp](const detail::Node& self) {
    auto* g = grad_sink(a);
    if (!g) return;
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < sp.inner; ++i) {
        auto at = [&](std::size_t l) { return (o * sp.len + l) * sp.inner + i; };
        double gs = 0.0;
        for (std::size_t l = 0; l < sp.len; ++l) gs += self.pending[at(l)];
        for (std::size_t l = 0; l < sp.len; ++l) (*g)[at(l)] += self.pending[at(l)] - std::exp(self.data[at(l)]) * gs;
      }
  });
}

/// Mean cross-entropy of rows of `logits` ([C] or [N, C]) against class ids.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& targets) {
  if (logits.rank() != 1 && logits.rank() != 2) throw ShapeError("cross-entropy: logits must be rank 1 or 2, got " + shape_str(logits.shape()));
  const std::size_t n = logits.rank() == 1 ? 1 : logits.dim(0);
  const std::size_t classes = logits.shape().back();
  if (targets.size() != n) {
    throw ShapeError("cross-entropy: " + std::to_string(targets.size()) + " targets for logits " + shape_str(logits.shape()));
  }
  for (std::size_t t : targets)
    if (t >= classes) throw Error("cross-entropy: target class " + std::to_string(t) + " out of range for " + std::to_string(classes) + " classes");
  auto x = logits.data();
  std::vector<double> probs(logits.numel());
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < classes; ++j) m = std::max(m, x[i * classes + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < classes; ++j) z += (probs[i * classes + j] = std::exp(x[i * classes + j] - m));
    for (std::size_t j = 0; j < classes; ++j) probs[i * classes + j] /= z;
    loss -= x[i * classes + targets[i]] - m - std::log(z);
  }
  loss /= static_cast<double>(n);
  return Tensor::make_result("cross-entropy", Shape{}, {loss}, {logits},
                             [logits, targets, probs, n, classes](const detail::Node& self) {
                               if (auto* g = grad_sink(logits)) {
                                 const double s = self.pending[0] / static_cast<double>(n);
                                 for (std::size_t i = 0; i < n; ++i)
                                   for (std::size_t j = 0; j < classes; ++j)
                                     (*g)[i * classes + j] += s * (probs[i * classes + j] - (j == targets[i] ? 1.0 : 0.0));
                               }
                             });
}

/// Mean negative log-likelihood of rows of a probability table.
inline Tensor nll(const Tensor& probs, const std::vector<std::size_t>& targets) {
  if (probs.rank() != 1 && probs.rank() != 2) throw ShapeError("nll: probabilities must be rank 1 or 2, got " + shape_str(probs.shape()));
  const std::size_t n = probs.rank() == 1 ? 1 : probs.dim(0);
  const std::size_t classes = probs.shape().back();
  if (targets.size() != n) throw ShapeError("nll: " + std::to_string(targets.size()) + " targets for " + shape_str(probs.shape()));
  auto p = probs.data();
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] >= classes) throw Error("nll: target class " + std::to_string(targets[i]) + " out of range");
    const double v = p[i * classes + targets[i]];
    if (!(v > 0)) throw Error("nll: non-positive probability for target at row " + std::to_string(i));
    loss -= std::log(v);
  }
  loss /= static_cast<double>(n);
  return Tensor::make_result("nll", Shape{}, {loss}, {probs}, [probs, targets, n, classes](const detail::Node& self) {
    if (auto* g = grad_sink(probs)) {
      auto p = probs.data();
      for (std::size_t i = 0; i < n; ++i)
        (*g)[i * classes + targets[i]] -= self.pending[0] / (static_cast<double>(n) * p[i * classes + targets[i]]);
    }
  });
}

/// Layer normalization over the last axis of a matrix.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
  detail::require_rank(x, 2, "layer-norm");
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
    throw ShapeError("layer-norm: scale " + shape_str(gamma.shape()) + "/shift " + shape_str(beta.shape()) +
                     " do not match feature size of " + shape_str(x.shape()));
  }
  auto xv = x.data();
  auto gv = gamma.data();
  auto bv = beta.data();
  std::vector<double> xhat(n * d), inv_std(n), out(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xv[i * d + j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xv[i * d + j] - mu) * (xv[i * d + j] - mu);
    var /= static_cast<double>(d);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[i * d + j] = (xv[i * d + j] - mu) * inv_std[i];
      out[i * d + j] = gv[j] * xhat[i * d + j] + bv[j];
    }
  }
  return Tensor::make_result("layer-norm", x.shape(), std::move(out), {x, gamma, beta},
                             [x, gamma, beta, xhat, inv_std, n, d](const detail::Node& self) {
                               const auto& go = self.pending;
                               auto gv = gamma.data();
                               auto* gx = grad_sink(x);
                               auto* gg = grad_sink(gamma);
                               auto* gb = grad_sink(beta);
                               for (std::size_t i = 0; i < n; ++i) {
                                 double m1 = 0.0, m2 = 0.0;
                                 for (std::size_t j = 0; j < d; ++j) {
                                   const double dxh = go[i * d + j] * gv[j];
                                   m1 += dxh;
                                   m2 += dxh * xhat[i * d + j];
                                   if (gg) (*gg)[j] += go[i * d + j] * xhat[i * d + j];
                                   if (gb) (*gb)[j] += go[i * d + j];
                                 }
                                 m1 /= static_cast<double>(d);
                                 m2 /= static_cast<double>(d);
                                 if (gx)
                                   for (std::size_t j = 0; j < d; ++j)
                                     (*gx)[i * d + j] += inv_std[i] * (go[i * d + j] * gv[j] - m1 - xhat[i * d + j] * m2);
                               }
                             });
}

/// Forward value of `hard`, gradient routed unchanged into `soft`.
inline Tensor straight_through(const Tensor& hard, const Tensor& soft) {
  if (hard.shape() != soft.shape()) {
    throw ShapeError("straight-through: hard " + shape_str(hard.shape()) + " and soft " + shape_str(soft.shape()) + " differ");
  }
  return Tensor::make_result("straight-through", hard.shape(), hard.to_vector(), {soft}, [soft](const detail::Node& self) {
    if (auto* g = grad_sink(soft))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.pending[i];
  });
}

// ---------------------------------------------------------------------------
// Catalog dispatch by operation id

struct OpAttrs {
  std::size_t axis = 0;
  double temperature = 1.0;
  double scalar = 1.0;
  std::vector<std::size_t> indices;
  std::vector<std::uint8_t> mask;
  Shape shape;
};

inline const std::vector<std::string>& catalog_op_ids() {
  static const std::vector<std::string> ids = {
      "matmul", "add",     "elementwise-mul", "scalar-mul",  "sum",  "mean",          "concat", "row-gather",
      "row-mask", "softmax", "log-softmax",   "relu",        "gelu", "cross-entropy", "broadcast"};
  return ids;
}

/// Applies a catalog operation by id. Unknown ids are an error.
inline Tensor apply_op(std::string_view op, const std::vector<Tensor>& in, const OpAttrs& attrs = {}) {
  auto arity = [&](std::size_t n) {
    if (in.size() != n) {
      throw Error(std::string(op) + ": expected " + std::to_string(n) + " inputs, got " + std::to_string(in.size()));
    }
  };
  if (op == "matmul") { arity(2); return matmul(in[0], in[1]); }
  if (op == "add") { arity(2); return add(in[0], in[1]); }
  if (op == "elementwise-mul") { arity(2); return mul(in[0], in[1]); }
  if (op == "scalar-mul") { arity(1); return scale(in[0], attrs.scalar); }
  if (op == "sum") { arity(1); return sum(in[0], attrs.axis); }
  if (op == "mean") { arity(1); return mean(in[0], attrs.axis); }
  if (op == "concat") { return concat(in, attrs.axis); }
  if (op == "row-gather") { arity(1); return gather_rows(in[0], attrs.indices); }
  if (op == "row-mask") { arity(1); return mask_rows(in[0], attrs.mask); }
  if (op == "softmax") { arity(1); return softmax(in[0], attrs.axis, attrs.temperature); }
  if (op == "log-softmax") { arity(1); return log_softmax(in[0], attrs.axis); }
  if (op == "relu") { arity(1); return relu(in[0]); }
  if (op == "gelu") { arity(1); return gelu(in[0]); }
  if (op == "cross-entropy") { arity(1); return cross_entropy(in[0], attrs.indices); }
  if (op == "broadcast") { arity(1); return broadcast_to(in[0], attrs.shape); }
  throw Error("unknown op id '" + std::string(op) + "'");
}

}  // namespace condcomp

#endif  // CONDCOMP_OPS_HPP_
