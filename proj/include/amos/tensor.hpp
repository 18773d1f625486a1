/*
 * Copyright (c) 2026, the AttentiveMOS authors. All rights reserved.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// Dense row-major tensors with a dynamically recorded reverse-mode tape.
// Every op allocates its output; data buffers are never mutated after
// creation, except parameter values updated by the optimizer between steps.
// Gradients accumulate into `grad`; callers zero them between steps.

#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <unordered_set>
#include <vector>

#include "amos/common.hpp"

namespace amos {

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) {
    if (d <= 0) throw ShapeError("tensor extents must be positive");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// Grad recording is on by default; NoGradGuard switches it off for inference.
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

struct NoGradGuard {
  NoGradGuard() : prev_(grad_mode()) { grad_mode() = false; }
  ~NoGradGuard() { grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// NaN/Inf screening at op boundaries; off by default, tests and debugging
// flip it on.
inline std::atomic<bool>& finite_checks_flag() {
  static std::atomic<bool> flag{false};
  return flag;
}
inline void set_finite_checks(bool on) { finite_checks_flag().store(on); }
inline bool finite_checks_enabled() { return finite_checks_flag().load(); }

template <typename T>
struct Tensor;

template <typename T>
struct Node {
  std::vector<Tensor<T>> parents;
  std::function<void(const Tensor<T>&)> backward;
};

// A Tensor is a cheap handle: shape plus shared data/grad buffers and an
// optional tape node linking it to its parents.
template <typename T>
struct Tensor {
  Shape shape;
  std::shared_ptr<std::vector<T>> data;
  std::shared_ptr<std::vector<T>> grad;  // allocated iff requires_grad
  bool requires_grad = false;
  std::shared_ptr<Node<T>> node;

  Tensor() = default;

  std::size_t numel() const { return data ? data->size() : 0; }
  bool defined() const { return static_cast<bool>(data); }

  static Tensor zeros(Shape s, bool req = false) {
    Tensor t;
    std::size_t n = shape_numel(s);
    t.shape = std::move(s);
    t.data = std::make_shared<std::vector<T>>(n, T(0));
    t.requires_grad = req && grad_mode();
    if (t.requires_grad) t.grad = std::make_shared<std::vector<T>>(n, T(0));
    return t;
  }

  static Tensor full(Shape s, T v, bool req = false) {
    Tensor t = zeros(std::move(s), req);
    std::fill(t.data->begin(), t.data->end(), v);
    return t;
  }

  static Tensor from_vector(Shape s, std::vector<T> values, bool req = false) {
    if (shape_numel(s) != values.size())
      throw ShapeError("from_vector: shape " + shape_str(s) + " does not match " +
                       std::to_string(values.size()) + " values");
    Tensor t;
    t.shape = std::move(s);
    t.data = std::make_shared<std::vector<T>>(std::move(values));
    t.requires_grad = req && grad_mode();
    if (t.requires_grad)
      t.grad = std::make_shared<std::vector<T>>(t.data->size(), T(0));
    return t;
  }

  static Tensor scalar(T v) { return from_vector({1}, {v}); }

  T item() const {
    if (numel() != 1) throw ShapeError("item(): tensor is not scalar");
    return (*data)[0];
  }

  T at(std::initializer_list<int> idx) const {
    if (idx.size() != shape.size()) throw ShapeError("at(): rank mismatch");
    std::size_t off = 0;
    std::size_t i = 0;
    for (int v : idx) {
      off = off * static_cast<std::size_t>(shape[i]) + static_cast<std::size_t>(v);
      ++i;
    }
    return (*data)[off];
  }

  void zero_grad() {
    if (grad) std::fill(grad->begin(), grad->end(), T(0));
  }
};

// Boolean mask, kept outside the differentiable tensor type. true = allow.
struct BoolMask {
  Shape shape;
  std::vector<std::uint8_t> allow;

  static BoolMask full(Shape s, bool value) {
    BoolMask m;
    m.allow.assign(shape_numel(s), value ? 1 : 0);
    m.shape = std::move(s);
    return m;
  }
};

namespace detail {

template <typename T>
inline void check_finite(const Tensor<T>& t, const char* op) {
  if (!finite_checks_enabled()) return;
  for (T v : *t.data) {
    if (!std::isfinite(static_cast<double>(v)))
      throw NumericError(std::string(op) + ": non-finite value produced");
  }
}

template <typename T>
inline bool result_requires(const Tensor<T>& a) {
  return grad_mode() && a.requires_grad;
}
template <typename T>
inline bool result_requires(const Tensor<T>& a, const Tensor<T>& b) {
  return grad_mode() && (a.requires_grad || b.requires_grad);
}
template <typename T>
inline bool result_requires(const Tensor<T>& a, const Tensor<T>& b,
                            const Tensor<T>& c) {
  return grad_mode() && (a.requires_grad || b.requires_grad || c.requires_grad);
}

template <typename T>
inline Tensor<T> make_result(Shape s, bool req) {
  Tensor<T> t;
  std::size_t n = shape_numel(s);
  t.shape = std::move(s);
  t.data = std::make_shared<std::vector<T>>(n, T(0));
  t.requires_grad = req;
  if (req) t.grad = std::make_shared<std::vector<T>>(n, T(0));
  return t;
}

template <typename T>
inline void attach(Tensor<T>& out, std::vector<Tensor<T>> parents,
                   std::function<void(const Tensor<T>&)> backward) {
  if (!out.requires_grad) return;
  out.node = std::make_shared<Node<T>>();
  out.node->parents = std::move(parents);
  out.node->backward = std::move(backward);
}

// numpy-style broadcasting: shapes aligned at the trailing axis, each pair of
// extents must be equal or one of them 1 (missing counts as 1).
inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  Shape out(std::max(a.size(), b.size()));
  for (std::size_t i = 0; i < out.size(); ++i) {
    int da = i < out.size() - a.size() ? 1 : a[i - (out.size() - a.size())];
    int db = i < out.size() - b.size() ? 1 : b[i - (out.size() - b.size())];
    if (da != db && da != 1 && db != 1)
      throw ShapeError("broadcast: incompatible shapes " + shape_str(a) + " and " +
                       shape_str(b));
    out[i] = std::max(da, db);
  }
  return out;
}

// Row-major strides of `shape` embedded in `out_shape`, 0 on broadcast axes.
inline std::vector<std::size_t> broadcast_strides(const Shape& shape,
                                                  const Shape& out_shape) {
  std::vector<std::size_t> strides(out_shape.size(), 0);
  std::size_t run = 1;
  for (std::size_t k = 0; k < shape.size(); ++k) {
    std::size_t si = shape.size() - 1 - k;     // axis in `shape`
    std::size_t oi = out_shape.size() - 1 - k; // matching axis in out
    strides[oi] = (shape[si] == 1 && out_shape[oi] != 1) ? 0 : run;
    run *= static_cast<std::size_t>(shape[si]);
  }
  return strides;
}

// Walks every coordinate of `out_shape`, handing (out_index, a_index, b_index)
// to `fn`. An odometer over the coordinates; stride 0 freezes broadcast axes.
template <typename Fn>
inline void for_each_broadcast(const Shape& out_shape,
                               const std::vector<std::size_t>& sa,
                               const std::vector<std::size_t>& sb, Fn&& fn) {
  const std::size_t rank = out_shape.size();
  const std::size_t total = shape_numel(out_shape);
  std::vector<std::size_t> coord(rank, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t i = 0; i < total; ++i) {
    fn(i, ia, ib);
    for (std::size_t k = rank; k-- > 0;) {
      ++coord[k];
      ia += sa[k];
      ib += sb[k];
      if (coord[k] < static_cast<std::size_t>(out_shape[k])) break;
      ia -= sa[k] * coord[k];
      ib -= sb[k] * coord[k];
      coord[k] = 0;
    }
  }
}

// Sums `src` (shaped `src_shape`) into the possibly-smaller `dst_shape`
// buffer; used to push gradients back through a broadcast.
template <typename T>
inline void reduce_into(const std::vector<T>& src, const Shape& src_shape,
                        std::vector<T>& dst, const Shape& dst_shape) {
  auto sd = broadcast_strides(dst_shape, src_shape);
  std::vector<std::size_t> zero(src_shape.size(), 0);
  for_each_broadcast(src_shape, sd, zero,
                     [&](std::size_t i, std::size_t id, std::size_t) {
                       dst[id] += src[i];
                     });
}

template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapM = Eigen::Map<EMat<T>>;
template <typename T>
using MapC = Eigen::Map<const EMat<T>>;

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic (with broadcasting)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  using namespace detail;
  Tensor<T> out;
  if (a.shape == b.shape) {
    out = make_result<T>(a.shape, result_requires(a, b));
    for (std::size_t i = 0; i < out.numel(); ++i)
      (*out.data)[i] = (*a.data)[i] + (*b.data)[i];
  } else {
    Shape os = broadcast_shape(a.shape, b.shape);
    out = make_result<T>(os, result_requires(a, b));
    auto sa = broadcast_strides(a.shape, os);
    auto sb = broadcast_strides(b.shape, os);
    for_each_broadcast(os, sa, sb, [&](std::size_t i, std::size_t ia, std::size_t ib) {
      (*out.data)[i] = (*a.data)[ia] + (*b.data)[ib];
    });
  }
  check_finite(out, "add");
  attach(out, {a, b}, [](const Tensor<T>& o) {
    const Tensor<T>& pa = o.node->parents[0];
    const Tensor<T>& pb = o.node->parents[1];
    if (pa.requires_grad) detail::reduce_into(*o.grad, o.shape, *pa.grad, pa.shape);
    if (pb.requires_grad) detail::reduce_into(*o.grad, o.shape, *pb.grad, pb.shape);
  });
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  using namespace detail;
  Shape os = broadcast_shape(a.shape, b.shape);
  Tensor<T> out = make_result<T>(os, result_requires(a, b));
  auto sa = broadcast_strides(a.shape, os);
  auto sb = broadcast_strides(b.shape, os);
  for_each_broadcast(os, sa, sb, [&](std::size_t i, std::size_t ia, std::size_t ib) {
    (*out.data)[i] = (*a.data)[ia] - (*b.data)[ib];
  });
  check_finite(out, "sub");
  attach(out, {a, b}, [](const Tensor<T>& o) {
    const Tensor<T>& pa = o.node->parents[0];
    const Tensor<T>& pb = o.node->parents[1];
    if (pa.requires_grad) detail::reduce_into(*o.grad, o.shape, *pa.grad, pa.shape);
    if (pb.requires_grad) {
      std::vector<T> neg(o.grad->size());
      for (std::size_t i = 0; i < neg.size(); ++i) neg[i] = -(*o.grad)[i];
      detail::reduce_into(neg, o.shape, *pb.grad, pb.shape);
    }
  });
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  using namespace detail;
  Shape os = broadcast_shape(a.shape, b.shape);
  Tensor<T> out = make_result<T>(os, result_requires(a, b));
  auto sa = broadcast_strides(a.shape, os);
  auto sb = broadcast_strides(b.shape, os);
  for_each_broadcast(os, sa, sb, [&](std::size_t i, std::size_t ia, std::size_t ib) {
    (*out.data)[i] = (*a.data)[ia] * (*b.data)[ib];
  });
  check_finite(out, "mul");
  attach(out, {a, b}, [sa, sb, os](const Tensor<T>& o) {
    const Tensor<T>& pa = o.node->parents[0];
    const Tensor<T>& pb = o.node->parents[1];
    for_each_broadcast(os, sa, sb, [&](std::size_t i, std::size_t ia, std::size_t ib) {
      if (pa.requires_grad) (*pa.grad)[ia] += (*o.grad)[i] * (*pb.data)[ib];
      if (pb.requires_grad) (*pb.grad)[ib] += (*o.grad)[i] * (*pa.data)[ia];
    });
  });
  return out;
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  using namespace detail;
  Tensor<T> out = make_result<T>(a.shape, result_requires(a));
  for (std::size_t i = 0; i < out.numel(); ++i) (*out.data)[i] = (*a.data)[i] + s;
  attach(out, {a}, [](const Tensor<T>& o) {
    const Tensor<T>& pa = o.node->parents[0];
    if (!pa.requires_grad) return;
    for (std::size_t i = 0; i < o.numel(); ++i) (*pa.grad)[i] += (*o.grad)[i];
  });
  return out;
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T s) {
  using namespace detail;
  Tensor<T> out = make_result<T>(a.shape, result_requires(a));
  for (std::size_t i = 0; i < out.numel(); ++i) (*out.data)[i] = (*a.data)[i] * s;
  attach(out, {a}, [s](const Tensor<T>& o) {
    const Tensor<T>& pa = o.node->parents[0];
    if (!pa.requires_grad) return;
    for (std::size_t i = 0; i < o.numel(); ++i) (*pa.grad)[i] += (*o.grad)[i] * s;
  });
  return out;
}

template <typename T>
Tensor<T> abs(const Tensor<T>& a) {
  using namespace detail;
  Tensor<T> out = make_result<T>(a.shape, result_requires(a));
  for (std::size_t i = 0; i < out.numel(); ++i)
    (*out.data)[i] = std::fabs((*a.data)[i]);
  // subgradient at 0 is 0
  attach(out, {a}, [](const Tensor<T>& o) {
    const Tensor<T>& pa = o.node->parents[0];
    if (!pa.requires_grad) return;
    for (std::size_t i = 0; i < o.numel(); ++i) {
      T x = (*pa.data)[i];
      T sign = x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0));
      (*pa.grad)[i] += (*o.grad)[i] * sign;
    }
  });
  return out;
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
  using namespace detail;
  Tensor<T> out = make_result<T>(a.shape, result_requires(a));
  for (std::size_t i = 0; i < out.numel(); ++i)
    (*out.data)[i] = std::log((*a.data)[i]);
  check_finite(out, "log");
  attach(out, {a}, [](const Tensor<T>& o) {
    const Tensor<T>& pa = o.node->parents[0];
    if (!pa.requires_grad) return;
    for (std::size_t i = 0; i < o.numel(); ++i)
      (*pa.grad)[i] += (*o.grad)[i] / (*pa.data)[i];
  });
  return out;
}

// Exact GELU, x * Phi(x) with the normal CDF written via erf.
template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  using namespace detail;
  Tensor<T> out = make_result<T>(a.shape, result_requires(a));
  for (std::size_t i = 0; i < out.numel(); ++i) {
    T x = (*a.data)[i];
    T phi = T(0.5) * (T(1) + std::erf(x * T(M_SQRT1_2)));
    (*out.data)[i] = x * phi;
  }
  check_finite(out, "gelu");
  attach(out, {a}, [](const Tensor<T>& o) {
    const Tensor<T>& pa = o.node->parents[0];
    if (!pa.requires_grad) return;
    const T inv_sqrt_2pi = T(0.3989422804014327);
    for (std::size_t i = 0; i < o.numel(); ++i) {
      T x = (*pa.data)[i];
      T phi = T(0.5) * (T(1) + std::erf(x * T(M_SQRT1_2)));
      T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * x * x);
      (*pa.grad)[i] += (*o.grad)[i] * (phi + x * pdf);
    }
  });
  return out;
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
  using namespace detail;
  Tensor<T> out = make_result<T>({1}, result_requires(a));
  T acc = T(0);
  for (T v : *a.data) acc += v;
  (*out.data)[0] = acc;
  attach(out, {a}, [](const Tensor<T>& o) {
    const Tensor<T>& pa = o.node->parents[0];
    if (!pa.requires_grad) return;
    T g = (*o.grad)[0];
    for (std::size_t i = 0; i < pa.numel(); ++i) (*pa.grad)[i] += g;
  });
  return out;
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& a) {
  return mul_scalar(sum_all(a), T(1) / static_cast<T>(a.numel()));
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

// Shares the data buffer; only the shape changes.
template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape s) {
  using namespace detail;
  if (shape_numel(s) != a.numel())
    throw ShapeError("reshape: cannot view " + shape_str(a.shape) + " as " +
                     shape_str(s));
  Tensor<T> out;
  out.shape = std::move(s);
  out.data = a.data;
  out.requires_grad = result_requires(a);
  if (out.requires_grad)
    out.grad = std::make_shared<std::vector<T>>(a.numel(), T(0));
  attach(out, {a}, [](const Tensor<T>& o) {
    const Tensor<T>& pa = o.node->parents[0];
    if (!pa.requires_grad) return;
    for (std::size_t i = 0; i < o.numel(); ++i) (*pa.grad)[i] += (*o.grad)[i];
  });
  return out;
}

template <typename T>
Tensor<T> permute_axes(const Tensor<T>& a, const std::vector<int>& axes) {
  using namespace detail;
  const std::size_t rank = a.shape.size();
  if (axes.size() != rank) throw ShapeError("permute: axes rank mismatch");
  Shape os(rank);
  for (std::size_t i = 0; i < rank; ++i) os[i] = a.shape[axes[i]];

  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t i = rank - 1; i-- > 0;)
    in_strides[i] = in_strides[i + 1] * static_cast<std::size_t>(a.shape[i + 1]);
  std::vector<std::size_t> gather(rank);
  for (std::size_t i = 0; i < rank; ++i) gather[i] = in_strides[axes[i]];

  Tensor<T> out = make_result<T>(os, result_requires(a));
  std::vector<std::size_t> zero(rank, 0);
  for_each_broadcast(os, gather, zero, [&](std::size_t i, std::size_t ia, std::size_t) {
    (*out.data)[i] = (*a.data)[ia];
  });
  attach(out, {a}, [os, gather, zero](const Tensor<T>& o) {
    const Tensor<T>& pa = o.node->parents[0];
    if (!pa.requires_grad) return;
    for_each_broadcast(os, gather, zero, [&](std::size_t i, std::size_t ia, std::size_t) {
      (*pa.grad)[ia] += (*o.grad)[i];
    });
  });
  return out;
}

template <typename T>
Tensor<T> transpose_last2(const Tensor<T>& a) {
  std::vector<int> axes(a.shape.size());
  std::iota(axes.begin(), axes.end(), 0);
  std::swap(axes[axes.size() - 1], axes[axes.size() - 2]);
  return permute_axes(a, axes);
}

// ---------------------------------------------------------------------------
// Matrix products (Eigen handles the inner kernels)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  using namespace detail;
  if (a.shape.size() != 2 || b.shape.size() != 2)
    throw ShapeError("matmul: expected rank-2 operands");
  if (a.shape[1] != b.shape[0])
    throw ShapeError("matmul: inner dimensions disagree, " + shape_str(a.shape) +
                     " x " + shape_str(b.shape));
  const int m = a.shape[0], k = a.shape[1], n = b.shape[1];
  Tensor<T> out = make_result<T>({m, n}, result_requires(a, b));
  MapC<T> A(a.data->data(), m, k);
  MapC<T> B(b.data->data(), k, n);
  MapM<T> C(out.data->data(), m, n);
  C.noalias() = A * B;
  check_finite(out, "matmul");
  attach(out, {a, b}, [m, k, n](const Tensor<T>& o) {
    const Tensor<T>& pa = o.node->parents[0];
    const Tensor<T>& pb = o.node->parents[1];
    MapC<T> G(o.grad->data(), m, n);
    if (pa.requires_grad) {
      MapC<T> B(pb.data->data(), k, n);
      MapM<T> dA(pa.grad->data(), m, k);
      dA.noalias() += G * B.transpose();
    }
    if (pb.requires_grad) {
      MapC<T> A(pa.data->data(), m, k);
      MapM<T> dB(pb.grad->data(), k, n);
      dB.noalias() += A.transpose() * G;
    }
  });
  return out;
}

// Batched product over the last two axes; leading axes must match exactly.
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b) {
  using namespace detail;
  if (a.shape.size() < 3 || a.shape.size() != b.shape.size())
    throw ShapeError("bmm: expected equal-rank operands of rank >= 3");
  const std::size_t rank = a.shape.size();
  std::size_t batch = 1;
  for (std::size_t i = 0; i + 2 < rank; ++i) {
    if (a.shape[i] != b.shape[i]) throw ShapeError("bmm: batch dimensions disagree");
    batch *= static_cast<std::size_t>(a.shape[i]);
  }
  const int m = a.shape[rank - 2], k = a.shape[rank - 1];
  if (b.shape[rank - 2] != k) throw ShapeError("bmm: inner dimensions disagree");
  const int n = b.shape[rank - 1];
  Shape os(a.shape.begin(), a.shape.end() - 1);
  os.back() = m;
  os.push_back(n);
  Tensor<T> out = make_result<T>(os, result_requires(a, b));
  const std::size_t sa = static_cast<std::size_t>(m) * k;
  const std::size_t sb = static_cast<std::size_t>(k) * n;
  const std::size_t sc = static_cast<std::size_t>(m) * n;
  for (std::size_t g = 0; g < batch; ++g) {
    MapC<T> A(a.data->data() + g * sa, m, k);
    MapC<T> B(b.data->data() + g * sb, k, n);
    MapM<T> C(out.data->data() + g * sc, m, n);
    C.noalias() = A * B;
  }
  check_finite(out, "bmm");
  attach(out, {a, b}, [batch, m, k, n, sa, sb, sc](const Tensor<T>& o) {
    const Tensor<T>& pa = o.node->parents[0];
    const Tensor<T>& pb = o.node->parents[1];
    for (std::size_t g = 0; g < batch; ++g) {
      MapC<T> G(o.grad->data() + g * sc, m, n);
      if (pa.requires_grad) {
        MapC<T> B(pb.data->data() + g * sb, k, n);
        MapM<T> dA(pa.grad->data() + g * sa, m, k);
        dA.noalias() += G * B.transpose();
      }
      if (pb.requires_grad) {
        MapC<T> A(pa.data->data() + g * sa, m, k);
        MapM<T> dB(pb.grad->data() + g * sb, k, n);
        dB.noalias() += A.transpose() * G;
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Softmax with optional boolean mask over the last axis
// ---------------------------------------------------------------------------

// Blocked positions behave as -inf logits: they receive probability exactly 0
// and contribute nothing to the normalization. Rows are stabilized by
// subtracting the row max over allowed entries.
template <typename T>
Tensor<T> softmax_masked(const Tensor<T>& logits, const BoolMask* mask = nullptr) {
  using namespace detail;
  if (logits.shape.empty()) throw ShapeError("softmax_masked: scalar input");
  const int L = logits.shape.back();
  const std::size_t rows = logits.numel() / static_cast<std::size_t>(L);

  std::vector<std::size_t> ms;
  if (mask) {
    // mask must broadcast onto the logits shape
    Shape bs = broadcast_shape(logits.shape, mask->shape);
    if (bs != logits.shape)
      throw ShapeError("softmax_masked: mask shape " + shape_str(mask->shape) +
                       " does not broadcast to " + shape_str(logits.shape));
    ms = broadcast_strides(mask->shape, logits.shape);
  }
  std::vector<std::size_t> full_strides(logits.shape.size(), 1);
  for (std::size_t i = logits.shape.size() - 1; i-- > 0;)
    full_strides[i] =
        full_strides[i + 1] * static_cast<std::size_t>(logits.shape[i + 1]);

  auto mask_index = [&](std::size_t flat) -> bool {
    if (!mask) return true;
    std::size_t mi = 0;
    std::size_t rem = flat;
    for (std::size_t d = 0; d < logits.shape.size(); ++d) {
      std::size_t c = rem / full_strides[d];
      rem %= full_strides[d];
      mi += c * ms[d];
    }
    return mask->allow[mi] != 0;
  };

  Tensor<T> out = make_result<T>(logits.shape, result_requires(logits));
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t base = r * static_cast<std::size_t>(L);
    T max_v = -std::numeric_limits<T>::infinity();
    bool any = false;
    for (int j = 0; j < L; ++j) {
      if (mask_index(base + j)) {
        any = true;
        max_v = std::max(max_v, (*logits.data)[base + j]);
      }
    }
    if (!any)
      throw NumericError("softmax_masked: fully masked row " + std::to_string(r));
    T denom = T(0);
    for (int j = 0; j < L; ++j) {
      if (mask_index(base + j)) {
        T e = std::exp((*logits.data)[base + j] - max_v);
        (*out.data)[base + j] = e;
        denom += e;
      } else {
        (*out.data)[base + j] = T(0);
      }
    }
    for (int j = 0; j < L; ++j) (*out.data)[base + j] /= denom;
  }
  check_finite(out, "softmax_masked");
  // dL/dz_i = p_i * (g_i - sum_j g_j p_j); masked entries have p == 0.
  attach(out, {logits}, [L, rows](const Tensor<T>& o) {
    const Tensor<T>& pa = o.node->parents[0];
    if (!pa.requires_grad) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t base = r * static_cast<std::size_t>(L);
      T dot = T(0);
      for (int j = 0; j < L; ++j) dot += (*o.grad)[base + j] * (*o.data)[base + j];
      for (int j = 0; j < L; ++j) {
        T p = (*o.data)[base + j];
        (*pa.grad)[base + j] += p * ((*o.grad)[base + j] - dot);
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Layer normalization over the last axis, with affine gain/bias
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain,
                     const Tensor<T>& bias, T eps) {
  using namespace detail;
  if (x.shape.empty()) throw ShapeError("layer_norm: scalar input");
  const int D = x.shape.back();
  if (gain.shape != Shape{D} || bias.shape != Shape{D})
    throw ShapeError("layer_norm: gain/bias must have shape [" + std::to_string(D) +
                     "]");
  const std::size_t rows = x.numel() / static_cast<std::size_t>(D);

  Tensor<T> out = make_result<T>(x.shape, result_requires(x, gain, bias));
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto inv_std = std::make_shared<std::vector<T>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t base = r * static_cast<std::size_t>(D);
    T mean = T(0);
    for (int j = 0; j < D; ++j) mean += (*x.data)[base + j];
    mean /= static_cast<T>(D);
    T var = T(0);
    for (int j = 0; j < D; ++j) {
      T d = (*x.data)[base + j] - mean;
      var += d * d;
    }
    var /= static_cast<T>(D);
    T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (int j = 0; j < D; ++j) {
      T xh = ((*x.data)[base + j] - mean) * is;
      (*xhat)[base + j] = xh;
      (*out.data)[base + j] = (*gain.data)[j] * xh + (*bias.data)[j];
    }
  }
  check_finite(out, "layer_norm");
  // With u = g .* dy per row:
  //   dx = inv_std * (u - mean(u) - xhat * mean(u .* xhat))
  attach(out, {x, gain, bias}, [D, rows, xhat, inv_std](const Tensor<T>& o) {
    const Tensor<T>& px = o.node->parents[0];
    const Tensor<T>& pg = o.node->parents[1];
    const Tensor<T>& pb = o.node->parents[2];
    std::vector<T> u(static_cast<std::size_t>(D));
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t base = r * static_cast<std::size_t>(D);
      T mean_u = T(0), mean_ux = T(0);
      for (int j = 0; j < D; ++j) {
        T dy = (*o.grad)[base + j];
        u[j] = (*pg.data)[j] * dy;
        mean_u += u[j];
        mean_ux += u[j] * (*xhat)[base + j];
        if (pg.requires_grad) (*pg.grad)[j] += dy * (*xhat)[base + j];
        if (pb.requires_grad) (*pb.grad)[j] += dy;
      }
      mean_u /= static_cast<T>(D);
      mean_ux /= static_cast<T>(D);
      if (px.requires_grad) {
        T is = (*inv_std)[r];
        for (int j = 0; j < D; ++j)
          (*px.grad)[base + j] +=
              is * (u[j] - mean_u - (*xhat)[base + j] * mean_ux);
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// 1D pooling over rows of an F x D matrix, disjoint windows, stride == kernel
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> max_pool1d(const Tensor<T>& x, int kernel) {
  using namespace detail;
  if (x.shape.size() != 2) throw ShapeError("max_pool1d: expected F x D input");
  const int F = x.shape[0], D = x.shape[1];
  if (kernel <= 0 || F % kernel != 0)
    throw ConfigError("max_pool1d: frame count " + std::to_string(F) +
                      " not divisible by kernel " + std::to_string(kernel));
  const int Fo = F / kernel;
  Tensor<T> out = make_result<T>({Fo, D}, result_requires(x));
  // ties break to the first index in the window so backward is deterministic
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.numel());
  for (int w = 0; w < Fo; ++w) {
    for (int d = 0; d < D; ++d) {
      std::size_t best = static_cast<std::size_t>(w * kernel) * D + d;
      T best_v = (*x.data)[best];
      for (int j = 1; j < kernel; ++j) {
        std::size_t idx = static_cast<std::size_t>(w * kernel + j) * D + d;
        if ((*x.data)[idx] > best_v) {
          best_v = (*x.data)[idx];
          best = idx;
        }
      }
      (*out.data)[static_cast<std::size_t>(w) * D + d] = best_v;
      (*argmax)[static_cast<std::size_t>(w) * D + d] = best;
    }
  }
  attach(out, {x}, [argmax](const Tensor<T>& o) {
    const Tensor<T>& pa = o.node->parents[0];
    if (!pa.requires_grad) return;
    for (std::size_t i = 0; i < o.numel(); ++i)
      (*pa.grad)[(*argmax)[i]] += (*o.grad)[i];
  });
  return out;
}

template <typename T>
Tensor<T> avg_pool1d(const Tensor<T>& x, int kernel) {
  using namespace detail;
  if (x.shape.size() != 2) throw ShapeError("avg_pool1d: expected F x D input");
  const int F = x.shape[0], D = x.shape[1];
  if (kernel <= 0 || F % kernel != 0)
    throw ConfigError("avg_pool1d: frame count " + std::to_string(F) +
                      " not divisible by kernel " + std::to_string(kernel));
  const int Fo = F / kernel;
  Tensor<T> out = make_result<T>({Fo, D}, result_requires(x));
  const T inv = T(1) / static_cast<T>(kernel);
  for (int w = 0; w < Fo; ++w)
    for (int d = 0; d < D; ++d) {
      T acc = T(0);
      for (int j = 0; j < kernel; ++j)
        acc += (*x.data)[static_cast<std::size_t>(w * kernel + j) * D + d];
      (*out.data)[static_cast<std::size_t>(w) * D + d] = acc * inv;
    }
  attach(out, {x}, [kernel, inv, D, Fo](const Tensor<T>& o) {
    const Tensor<T>& pa = o.node->parents[0];
    if (!pa.requires_grad) return;
    for (int w = 0; w < Fo; ++w)
      for (int d = 0; d < D; ++d) {
        T g = (*o.grad)[static_cast<std::size_t>(w) * D + d] * inv;
        for (int j = 0; j < kernel; ++j)
          (*pa.grad)[static_cast<std::size_t>(w * kernel + j) * D + d] += g;
      }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Row rearrangement: circular shift, permutation, concat, slice
// ---------------------------------------------------------------------------

// out[j] = x[(j + s) mod F]; a left shift by s rows. Inverted by shifting F-s.
template <typename T>
Tensor<T> circular_shift(const Tensor<T>& x, int s) {
  using namespace detail;
  if (x.shape.size() != 2) throw ShapeError("circular_shift: expected F x D input");
  const int F = x.shape[0], D = x.shape[1];
  if (s < 0 || s >= F) throw ShapeError("circular_shift: shift out of range");
  Tensor<T> out = make_result<T>(x.shape, result_requires(x));
  for (int j = 0; j < F; ++j) {
    const int src = (j + s) % F;
    std::copy_n(x.data->data() + static_cast<std::size_t>(src) * D, D,
                out.data->data() + static_cast<std::size_t>(j) * D);
  }
  attach(out, {x}, [F, D, s](const Tensor<T>& o) {
    const Tensor<T>& pa = o.node->parents[0];
    if (!pa.requires_grad) return;
    for (int j = 0; j < F; ++j) {
      const int src = (j + s) % F;
      for (int d = 0; d < D; ++d)
        (*pa.grad)[static_cast<std::size_t>(src) * D + d] +=
            (*o.grad)[static_cast<std::size_t>(j) * D + d];
    }
  });
  return out;
}

// out[i] = x[perm[i]]; perm must be a permutation of 0..F-1.
template <typename T>
Tensor<T> permute_rows(const Tensor<T>& x, const std::vector<int>& perm) {
  using namespace detail;
  if (x.shape.size() != 2) throw ShapeError("permute_rows: expected F x D input");
  const int F = x.shape[0], D = x.shape[1];
  if (static_cast<int>(perm.size()) != F)
    throw ShapeError("permute_rows: permutation length mismatch");
  Tensor<T> out = make_result<T>(x.shape, result_requires(x));
  for (int j = 0; j < F; ++j) {
    if (perm[j] < 0 || perm[j] >= F) throw ShapeError("permute_rows: index out of range");
    std::copy_n(x.data->data() + static_cast<std::size_t>(perm[j]) * D, D,
                out.data->data() + static_cast<std::size_t>(j) * D);
  }
  attach(out, {x}, [perm, F, D](const Tensor<T>& o) {
    const Tensor<T>& pa = o.node->parents[0];
    if (!pa.requires_grad) return;
    for (int j = 0; j < F; ++j)
      for (int d = 0; d < D; ++d)
        (*pa.grad)[static_cast<std::size_t>(perm[j]) * D + d] +=
            (*o.grad)[static_cast<std::size_t>(j) * D + d];
  });
  return out;
}

template <typename T>
Tensor<T> concat_rows(const Tensor<T>& a, const Tensor<T>& b) {
  using namespace detail;
  if (a.shape.size() != 2 || b.shape.size() != 2 || a.shape[1] != b.shape[1])
    throw ShapeError("concat_rows: column counts must match");
  const int ra = a.shape[0], rb = b.shape[0], D = a.shape[1];
  Tensor<T> out = make_result<T>({ra + rb, D}, result_requires(a, b));
  std::copy(a.data->begin(), a.data->end(), out.data->begin());
  std::copy(b.data->begin(), b.data->end(),
            out.data->begin() + static_cast<std::ptrdiff_t>(a.numel()));
  attach(out, {a, b}, [](const Tensor<T>& o) {
    const Tensor<T>& pa = o.node->parents[0];
    const Tensor<T>& pb = o.node->parents[1];
    if (pa.requires_grad)
      for (std::size_t i = 0; i < pa.numel(); ++i) (*pa.grad)[i] += (*o.grad)[i];
    if (pb.requires_grad)
      for (std::size_t i = 0; i < pb.numel(); ++i)
        (*pb.grad)[i] += (*o.grad)[pa.numel() + i];
  });
  return out;
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, int start, int len) {
  using namespace detail;
  if (x.shape.size() != 2) throw ShapeError("slice_rows: expected F x D input");
  const int F = x.shape[0], D = x.shape[1];
  if (start < 0 || len <= 0 || start + len > F)
    throw ShapeError("slice_rows: range out of bounds");
  Tensor<T> out = make_result<T>({len, D}, result_requires(x));
  std::copy_n(x.data->data() + static_cast<std::size_t>(start) * D,
              static_cast<std::size_t>(len) * D, out.data->data());
  attach(out, {x}, [start, D](const Tensor<T>& o) {
    const Tensor<T>& pa = o.node->parents[0];
    if (!pa.requires_grad) return;
    const std::size_t off = static_cast<std::size_t>(start) * D;
    for (std::size_t i = 0; i < o.numel(); ++i) (*pa.grad)[off + i] += (*o.grad)[i];
  });
  return out;
}

// ---------------------------------------------------------------------------
// Reverse pass
// ---------------------------------------------------------------------------

// Seeds d(root)/d(root) = 1 and accumulates gradients into every recorded
// tensor that requires them. Traversal is a deterministic depth-first
// postorder over the tape.
template <typename T>
void backward(const Tensor<T>& root) {
  if (root.numel() != 1)
    throw ShapeError("backward: root must be scalar, got " + shape_str(root.shape));
  if (!root.requires_grad || !root.node) {
    // Constant or detached root: nothing reachable, all grads stay as-is.
    if (root.grad) (*root.grad)[0] += T(1);
    return;
  }

  std::vector<Tensor<T>> order;
  std::unordered_set<const Node<T>*> seen;
  struct Frame {
    Tensor<T> t;
    std::size_t next_parent;
  };
  std::vector<Frame> stack;
  stack.push_back({root, 0});
  seen.insert(root.node.get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.t.node->parents.size()) {
      Tensor<T> p = f.t.node->parents[f.next_parent++];
      if (p.node && !seen.count(p.node.get())) {
        seen.insert(p.node.get());
        stack.push_back({std::move(p), 0});
      }
    } else {
      order.push_back(f.t);
      stack.pop_back();
    }
  }

  (*root.grad)[0] += T(1);
  for (std::size_t i = order.size(); i-- > 0;) {
    if (order[i].node->backward) order[i].node->backward(order[i]);
  }
}

}  // namespace amos
