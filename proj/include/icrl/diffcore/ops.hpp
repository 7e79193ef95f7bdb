#pragma once

#include <Eigen/Core>

#include <array>
#include <cmath>
#include <limits>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "icrl/diffcore/graph.hpp"

namespace icrl::diff {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using CMatMap = Eigen::Map<const RowMat<T>>;

template <typename T>
MatMap<T> mat(T* p, std::size_t r, std::size_t c) {
  return MatMap<T>(p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
template <typename T>
CMatMap<T> cmat(const T* p, std::size_t r, std::size_t c) {
  return CMatMap<T>(p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

/// Sums in a fixed lane order. Eigen reductions on unaligned maps peel by
/// address, which would make results depend on where a buffer landed.
template <typename T>
T ordered_dot(const T* a, const T* b, std::size_t n) {
  T acc[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (std::size_t k = 0; k < 8; ++k) acc[k] += a[i + k] * b[i + k];
  for (; i < n; ++i) acc[0] += a[i] * b[i];
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

template <typename T>
T ordered_sum(const T* a, std::size_t n) {
  T acc[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (std::size_t k = 0; k < 8; ++k) acc[k] += a[i + k];
  for (; i < n; ++i) acc[0] += a[i];
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

[[noreturn]] inline void shape_fail(const char* op, const std::string& what) {
  throw ShapeError(std::string(op) + ": " + what);
}

template <typename T>
void same_graph(const char* op, Var<T> a, Var<T> b) {
  if (a.graph != b.graph) throw GraphError(std::string(op) + ": operands from different graphs");
}

template <typename T>
Tensor<T>& val(Graph<T>& g, int id) { return g.node(id).value; }

template <typename T>
const Tensor<T>& in_val(Graph<T>& g, int self, std::size_t k) {
  return g.node(g.node(self).inputs[k]).value;
}

/// Elementwise unary op helper: y = f(x), dx += dy * df(x, y).
template <typename T, typename F, typename DF>
Var<T> unary(OpKind op, Var<T> x, F f, DF df) {
  auto& g = *x.graph;
  return g.add_op(
      op, {x.id}, x.shape(),
      [f](Graph<T>& gr, int self) {
        const auto& a = in_val(gr, self, 0);
        Tensor<T> out(a.shape());
        for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
        gr.node(self).value = std::move(out);
      },
      [df](Graph<T>& gr, int self) {
        int in = gr.node(self).inputs[0];
        if (!gr.wants_grad(in)) return;
        const auto& a = gr.node(in).value;
        const auto& y = gr.node(self).value;
        const auto& dy = gr.node(self).grad;
        auto& dx = gr.grad_of(in);
        for (std::size_t i = 0; i < a.size(); ++i) dx[i] += dy[i] * df(a[i], y[i]);
      });
}

}  // namespace detail

template <typename T>
Var<T> constant(Graph<T>& g, Tensor<T> value) { return g.constant(std::move(value)); }

/// a[..., m, k] x b[k, n] -> [..., m, n]
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  detail::same_graph("matmul", a, b);
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.empty() || sb.size() != 2 || sa.back() != sb[0]) {
    detail::shape_fail("matmul", "incompatible shapes " + shape_str(sa) + " x " + shape_str(sb));
  }
  Shape out = sa;
  out.back() = sb[1];
  auto& g = *a.graph;
  return g.add_op(
      OpKind::MatMul, {a.id, b.id}, out,
      [](Graph<T>& gr, int self) {
        const auto& A = detail::in_val(gr, self, 0);
        const auto& B = detail::in_val(gr, self, 1);
        Tensor<T> C(gr.node(self).shape);
        std::size_t m = A.rows(), k = A.last_dim(), n = B.dim(1);
        detail::mat(C.data(), m, n).noalias() = detail::cmat(A.data(), m, k) * detail::cmat(B.data(), k, n);
        gr.node(self).value = std::move(C);
      },
      [](Graph<T>& gr, int self) {
        auto& nd = gr.node(self);
        int ia = nd.inputs[0], ib = nd.inputs[1];
        const auto& A = gr.node(ia).value;
        const auto& B = gr.node(ib).value;
        std::size_t m = A.rows(), k = A.last_dim(), n = B.dim(1);
        auto dC = detail::cmat(nd.grad.data(), m, n);
        if (gr.wants_grad(ia)) {
          detail::mat(gr.grad_of(ia).data(), m, k).noalias() += dC * detail::cmat(B.data(), k, n).transpose();
        }
        if (gr.wants_grad(ib)) {
          detail::mat(gr.grad_of(ib).data(), k, n).noalias() += detail::cmat(A.data(), m, k).transpose() * dC;
        }
      });
}

/// Batched product over the leading axis: a[b, m, k] x op(b)[b, k, n], where
/// op transposes the last two axes of the right operand when `transpose_b`.
template <typename T>
Var<T> bmm(Var<T> a, Var<T> b, bool transpose_b = false) {
  detail::same_graph("bmm", a, b);
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  bool ok = sa.size() == 3 && sb.size() == 3 && sa[0] == sb[0] &&
            (transpose_b ? sa[2] == sb[2] : sa[2] == sb[1]);
  if (!ok) {
    detail::shape_fail("bmm", "incompatible shapes " + shape_str(sa) + " x " + shape_str(sb) +
                                  (transpose_b ? " (transposed)" : ""));
  }
  std::size_t n = transpose_b ? sb[1] : sb[2];
  Shape out{sa[0], sa[1], n};
  auto& g = *a.graph;
  return g.add_op(
      OpKind::BatchMatMul, {a.id, b.id}, out,
      [transpose_b](Graph<T>& gr, int self) {
        const auto& A = detail::in_val(gr, self, 0);
        const auto& B = detail::in_val(gr, self, 1);
        Tensor<T> C(gr.node(self).shape);
        std::size_t bs = A.dim(0), m = A.dim(1), k = A.dim(2);
        std::size_t br = B.dim(1), bc = B.dim(2), n = C.dim(2);
        for (std::size_t i = 0; i < bs; ++i) {
          auto Am = detail::cmat(A.data() + i * m * k, m, k);
          auto Bm = detail::cmat(B.data() + i * br * bc, br, bc);
          auto Cm = detail::mat(C.data() + i * m * n, m, n);
          if (transpose_b) Cm.noalias() = Am * Bm.transpose();
          else Cm.noalias() = Am * Bm;
        }
        gr.node(self).value = std::move(C);
      },
      [transpose_b](Graph<T>& gr, int self) {
        auto& nd = gr.node(self);
        int ia = nd.inputs[0], ib = nd.inputs[1];
        const auto& A = gr.node(ia).value;
        const auto& B = gr.node(ib).value;
        std::size_t bs = A.dim(0), m = A.dim(1), k = A.dim(2);
        std::size_t br = B.dim(1), bc = B.dim(2), n = nd.shape[2];
        bool ga = gr.wants_grad(ia), gb = gr.wants_grad(ib);
        T* dA = ga ? gr.grad_of(ia).data() : nullptr;
        T* dB = gb ? gr.grad_of(ib).data() : nullptr;
        for (std::size_t i = 0; i < bs; ++i) {
          auto Am = detail::cmat(A.data() + i * m * k, m, k);
          auto Bm = detail::cmat(B.data() + i * br * bc, br, bc);
          auto dC = detail::cmat(nd.grad.data() + i * m * n, m, n);
          if (transpose_b) {
            if (ga) detail::mat(dA + i * m * k, m, k).noalias() += dC * Bm;
            if (gb) detail::mat(dB + i * br * bc, br, bc).noalias() += dC.transpose() * Am;
          } else {
            if (ga) detail::mat(dA + i * m * k, m, k).noalias() += dC * Bm.transpose();
            if (gb) detail::mat(dB + i * br * bc, br, bc).noalias() += Am.transpose() * dC;
          }
        }
      });
}

namespace detail {

template <typename T>
Var<T> binary_same(OpKind op, const char* name, Var<T> a, Var<T> b, int sign_b, bool multiply) {
  same_graph(name, a, b);
  if (a.shape() != b.shape()) {
    shape_fail(name, "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  auto& g = *a.graph;
  return g.add_op(
      op, {a.id, b.id}, a.shape(),
      [sign_b, multiply](Graph<T>& gr, int self) {
        const auto& A = in_val(gr, self, 0);
        const auto& B = in_val(gr, self, 1);
        Tensor<T> C(A.shape());
        if (multiply) {
          for (std::size_t i = 0; i < C.size(); ++i) C[i] = A[i] * B[i];
        } else {
          for (std::size_t i = 0; i < C.size(); ++i) C[i] = A[i] + T(sign_b) * B[i];
        }
        gr.node(self).value = std::move(C);
      },
      [sign_b, multiply](Graph<T>& gr, int self) {
        auto& nd = gr.node(self);
        int ia = nd.inputs[0], ib = nd.inputs[1];
        const auto& dC = nd.grad;
        if (gr.wants_grad(ia)) {
          auto& dA = gr.grad_of(ia);
          if (multiply) {
            const auto& B = gr.node(ib).value;
            for (std::size_t i = 0; i < dC.size(); ++i) dA[i] += dC[i] * B[i];
          } else {
            for (std::size_t i = 0; i < dC.size(); ++i) dA[i] += dC[i];
          }
        }
        if (gr.wants_grad(ib)) {
          auto& dB = gr.grad_of(ib);
          if (multiply) {
            const auto& A = gr.node(ia).value;
            for (std::size_t i = 0; i < dC.size(); ++i) dB[i] += dC[i] * A[i];
          } else {
            for (std::size_t i = 0; i < dC.size(); ++i) dB[i] += T(sign_b) * dC[i];
          }
        }
      });
}

}  // namespace detail

template <typename T>
Var<T> add(Var<T> a, Var<T> b) { return detail::binary_same(OpKind::Add, "add", a, b, 1, false); }
template <typename T>
Var<T> sub(Var<T> a, Var<T> b) { return detail::binary_same(OpKind::Sub, "sub", a, b, -1, false); }
template <typename T>
Var<T> mul(Var<T> a, Var<T> b) { return detail::binary_same(OpKind::Mul, "mul", a, b, 1, true); }

template <typename T>
Var<T> scale(Var<T> x, T s) {
  return detail::unary<T>(
      OpKind::Scale, x, [s](T a) { return a * s; }, [s](T, T) { return s; });
}

/// x[..., tail] + y[tail]: y's shape must equal the trailing axes of x.
template <typename T>
Var<T> add_broadcast(Var<T> x, Var<T> y) {
  detail::same_graph("add_broadcast", x, y);
  const auto& sx = x.shape();
  const auto& sy = y.shape();
  bool ok = sy.size() <= sx.size() &&
            std::equal(sy.begin(), sy.end(), sx.end() - static_cast<std::ptrdiff_t>(sy.size()));
  if (!ok) detail::shape_fail("add_broadcast", shape_str(sy) + " is not a suffix of " + shape_str(sx));
  auto& g = *x.graph;
  return g.add_op(
      OpKind::AddBroadcast, {x.id, y.id}, sx,
      [](Graph<T>& gr, int self) {
        const auto& X = detail::in_val(gr, self, 0);
        const auto& Y = detail::in_val(gr, self, 1);
        Tensor<T> out = X;
        std::size_t inner = Y.size(), rows = out.size() / inner;
        detail::mat(out.data(), rows, inner).rowwise() += detail::cmat(Y.data(), 1, inner).row(0);
        gr.node(self).value = std::move(out);
      },
      [](Graph<T>& gr, int self) {
        auto& nd = gr.node(self);
        int ix = nd.inputs[0], iy = nd.inputs[1];
        if (gr.wants_grad(ix)) {
          auto& dx = gr.grad_of(ix);
          for (std::size_t i = 0; i < nd.grad.size(); ++i) dx[i] += nd.grad[i];
        }
        if (gr.wants_grad(iy)) {
          auto& dy = gr.grad_of(iy);
          std::size_t inner = dy.size(), rows = nd.grad.size() / inner;
          detail::mat(dy.data(), 1, inner) += detail::cmat(nd.grad.data(), rows, inner).colwise().sum();
        }
      });
}

inline constexpr double kLayerNormEps = 1e-5;

/// Normalizes over the last axis, then applies gamma * xhat + beta.
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta) {
  detail::same_graph("layer_norm", x, gamma);
  std::size_t d = x.shape().empty() ? 0 : x.shape().back();
  if (d == 0 || gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
    detail::shape_fail("layer_norm", "input " + shape_str(x.shape()) + " with gamma " +
                                         shape_str(gamma.shape()) + ", beta " + shape_str(beta.shape()));
  }
  struct Cache {
    std::vector<T> xhat;
    std::vector<T> rstd;
  };
  auto cache = std::make_shared<Cache>();
  auto& g = *x.graph;
  return g.add_op(
      OpKind::LayerNorm, {x.id, gamma.id, beta.id}, x.shape(),
      [cache](Graph<T>& gr, int self) {
        const auto& X = detail::in_val(gr, self, 0);
        const auto& G = detail::in_val(gr, self, 1);
        const auto& B = detail::in_val(gr, self, 2);
        std::size_t d = X.last_dim(), rows = X.rows();
        Tensor<T> out(X.shape());
        cache->xhat.assign(X.size(), T(0));
        cache->rstd.assign(rows, T(0));
        for (std::size_t r = 0; r < rows; ++r) {
          const T* xr = X.data() + r * d;
          T mean = 0;
          for (std::size_t i = 0; i < d; ++i) mean += xr[i];
          mean /= T(d);
          T var = 0;
          for (std::size_t i = 0; i < d; ++i) var += (xr[i] - mean) * (xr[i] - mean);
          var /= T(d);
          T rstd = T(1) / std::sqrt(var + T(kLayerNormEps));
          cache->rstd[r] = rstd;
          for (std::size_t i = 0; i < d; ++i) {
            T xh = (xr[i] - mean) * rstd;
            cache->xhat[r * d + i] = xh;
            out[r * d + i] = G[i] * xh + B[i];
          }
        }
        gr.node(self).value = std::move(out);
      },
      [cache](Graph<T>& gr, int self) {
        auto& nd = gr.node(self);
        int ix = nd.inputs[0], ig = nd.inputs[1], ib = nd.inputs[2];
        const auto& G = gr.node(ig).value;
        std::size_t d = G.size(), rows = nd.grad.size() / d;
        const auto& dy = nd.grad;
        if (gr.wants_grad(ig)) {
          auto& dg = gr.grad_of(ig);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t i = 0; i < d; ++i) dg[i] += dy[r * d + i] * cache->xhat[r * d + i];
        }
        if (gr.wants_grad(ib)) {
          auto& db = gr.grad_of(ib);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t i = 0; i < d; ++i) db[i] += dy[r * d + i];
        }
        if (gr.wants_grad(ix)) {
          auto& dx = gr.grad_of(ix);
          for (std::size_t r = 0; r < rows; ++r) {
            T mean_dxh = 0, mean_dxh_xh = 0;
            for (std::size_t i = 0; i < d; ++i) {
              T dxh = dy[r * d + i] * G[i];
              mean_dxh += dxh;
              mean_dxh_xh += dxh * cache->xhat[r * d + i];
            }
            mean_dxh /= T(d);
            mean_dxh_xh /= T(d);
            for (std::size_t i = 0; i < d; ++i) {
              T dxh = dy[r * d + i] * G[i];
              dx[r * d + i] += cache->rstd[r] * (dxh - mean_dxh - cache->xhat[r * d + i] * mean_dxh_xh);
            }
          }
        }
      });
}

namespace detail {

template <typename T>
Var<T> softmax_impl(Var<T> x, bool causal) {
  const auto& s = x.shape();
  const char* name = causal ? "causal_softmax" : "softmax";
  if (s.empty()) shape_fail(name, "scalar input");
  if (causal && (s.size() < 2 || s[s.size() - 1] != s[s.size() - 2])) {
    shape_fail(name, "expects [..., T, T], got " + shape_str(s));
  }
  auto& g = *x.graph;
  return g.add_op(
      causal ? OpKind::CausalSoftmax : OpKind::Softmax, {x.id}, s,
      [causal](Graph<T>& gr, int self) {
        const auto& X = in_val(gr, self, 0);
        std::size_t d = X.last_dim(), rows = X.rows();
        Tensor<T> out(X.shape());
        using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
        for (std::size_t r = 0; r < rows; ++r) {
          auto len = static_cast<Eigen::Index>(causal ? (r % d) + 1 : d);
          Eigen::Map<const Arr> xr(X.data() + r * d, len);
          Eigen::Map<Arr> yr(out.data() + r * d, len);
          yr = (xr - xr.maxCoeff()).exp();
          yr /= ordered_sum(yr.data(), std::size_t(len));
        }
        gr.node(self).value = std::move(out);
      },
      [](Graph<T>& gr, int self) {
        auto& nd = gr.node(self);
        int ix = nd.inputs[0];
        if (!gr.wants_grad(ix)) return;
        const auto& Y = nd.value;
        const auto& dy = nd.grad;
        auto& dx = gr.grad_of(ix);
        std::size_t d = Y.last_dim(), rows = Y.rows();
        using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
        auto n = static_cast<Eigen::Index>(d);
        for (std::size_t r = 0; r < rows; ++r) {
          Eigen::Map<const Arr> yr(Y.data() + r * d, n), gr_(dy.data() + r * d, n);
          T dot = ordered_dot(yr.data(), gr_.data(), d);
          Eigen::Map<Arr>(dx.data() + r * d, n) += yr * (gr_ - dot);
        }
      });
}

}  // namespace detail

template <typename T>
Var<T> softmax(Var<T> x) { return detail::softmax_impl(x, false); }

/// Softmax over the last axis of [..., T, T] where row i only sees columns j <= i.
template <typename T>
Var<T> causal_softmax(Var<T> x) { return detail::softmax_impl(x, true); }

/// Row lookup: table[V, d], ids reshaped to `lead` -> lead + [d].
template <typename T>
Var<T> embedding(Var<T> table, std::vector<int> ids, Shape lead) {
  const auto& st = table.shape();
  if (st.size() != 2) detail::shape_fail("embedding", "table must be 2-D, got " + shape_str(st));
  if (shape_numel(lead) != ids.size()) {
    detail::shape_fail("embedding", std::to_string(ids.size()) + " ids for lead shape " + shape_str(lead));
  }
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= st[0]) {
      throw std::out_of_range("embedding: id " + std::to_string(id) + " outside table of " +
                              std::to_string(st[0]) + " rows");
    }
  }
  Shape out = lead;
  out.push_back(st[1]);
  auto idx = std::make_shared<const std::vector<int>>(std::move(ids));
  auto& g = *table.graph;
  return g.add_op(
      OpKind::Embedding, {table.id}, out,
      [idx](Graph<T>& gr, int self) {
        const auto& W = detail::in_val(gr, self, 0);
        std::size_t d = W.dim(1);
        Tensor<T> Y(gr.node(self).shape);
        for (std::size_t r = 0; r < idx->size(); ++r) {
          std::copy_n(W.data() + static_cast<std::size_t>((*idx)[r]) * d, d, Y.data() + r * d);
        }
        gr.node(self).value = std::move(Y);
      },
      [idx](Graph<T>& gr, int self) {
        auto& nd = gr.node(self);
        int it = nd.inputs[0];
        if (!gr.wants_grad(it)) return;
        auto& dW = gr.grad_of(it);
        std::size_t d = dW.dim(1);
        for (std::size_t r = 0; r < idx->size(); ++r) {
          T* row = dW.data() + static_cast<std::size_t>((*idx)[r]) * d;
          for (std::size_t i = 0; i < d; ++i) row[i] += nd.grad[r * d + i];
        }
      });
}

/// tanh-approximated GELU
template <typename T>
Var<T> gelu(Var<T> x) {
  using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
  using Map = Eigen::Map<Arr>;
  using CMap = Eigen::Map<const Arr>;
  static constexpr T c = T(0.7978845608028654);  // sqrt(2/pi)
  static constexpr T k = T(0.044715);
  auto tanh_cache = std::make_shared<Tensor<T>>();
  auto& g = *x.graph;
  return g.add_op(
      OpKind::Gelu, {x.id}, x.shape(),
      [tanh_cache](Graph<T>& gr, int self) {
        const auto& X = detail::in_val(gr, self, 0);
        auto n = static_cast<Eigen::Index>(X.size());
        CMap a(X.data(), n);
        *tanh_cache = Tensor<T>(X.shape());
        Map t(tanh_cache->data(), n);
        t = (c * (a + k * a.cube())).tanh();
        Tensor<T> Y(X.shape());
        Map(Y.data(), n) = T(0.5) * a * (T(1) + t);
        gr.node(self).value = std::move(Y);
      },
      [tanh_cache](Graph<T>& gr, int self) {
        auto& nd = gr.node(self);
        int ix = nd.inputs[0];
        if (!gr.wants_grad(ix)) return;
        const auto& X = gr.node(ix).value;
        auto n = static_cast<Eigen::Index>(X.size());
        CMap a(X.data(), n), t(tanh_cache->data(), n), dy(nd.grad.data(), n);
        Map(gr.grad_of(ix).data(), n) +=
            dy * (T(0.5) * (T(1) + t) + T(0.5) * a * (T(1) - t.square()) * c * (T(1) + T(3) * k * a.square()));
      });
}

template <typename T>
Var<T> relu(Var<T> x) {
  return detail::unary<T>(
      OpKind::Relu, x, [](T a) { return a > T(0) ? a : T(0); },
      [](T a, T) { return a > T(0) ? T(1) : T(0); });
}

template <typename T>
Var<T> tanh(Var<T> x) {
  return detail::unary<T>(
      OpKind::Tanh, x, [](T a) { return std::tanh(a); }, [](T, T y) { return T(1) - y * y; });
}

/// Inverted dropout. The keep mask is drawn from `rng` when the node is built,
/// so graph construction order fixes the random stream. Identity when
/// `training` is false or `rate` is 0.
template <typename T, typename Rng>
Var<T> dropout(Var<T> x, double rate, Rng& rng, bool training) {
  if (rate < 0.0 || rate >= 1.0) {
    throw std::invalid_argument("dropout: rate must be in [0, 1), got " + std::to_string(rate));
  }
  if (!training || rate == 0.0) return x;
  std::size_t n = shape_numel(x.shape());
  auto keep = std::make_shared<std::vector<T>>(n);
  std::bernoulli_distribution coin(1.0 - rate);
  T s = T(1.0 / (1.0 - rate));
  for (auto& k : *keep) k = coin(rng) ? s : T(0);
  auto& g = *x.graph;
  return g.add_op(
      OpKind::Dropout, {x.id}, x.shape(),
      [keep](Graph<T>& gr, int self) {
        const auto& X = detail::in_val(gr, self, 0);
        Tensor<T> Y(X.shape());
        for (std::size_t i = 0; i < Y.size(); ++i) Y[i] = X[i] * (*keep)[i];
        gr.node(self).value = std::move(Y);
      },
      [keep](Graph<T>& gr, int self) {
        auto& nd = gr.node(self);
        int ix = nd.inputs[0];
        if (!gr.wants_grad(ix)) return;
        auto& dx = gr.grad_of(ix);
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += nd.grad[i] * (*keep)[i];
      });
}

/// out[b, i, :] = sum_j mask[b, i, j] * h[b, j, :]. The mask is data, not a
/// differentiable input, so gradient reaches h[b, j] only through nonzero
/// mask entries.
template <typename T>
Var<T> mask_aggregate(std::shared_ptr<const Tensor<T>> mask, Var<T> h) {
  const auto& sh = h.shape();
  const auto& sm = mask->shape();
  if (sh.size() != 3 || sm.size() != 3 || sm[0] != sh[0] || sm[1] != sh[1] || sm[2] != sh[1]) {
    detail::shape_fail("mask_aggregate", "mask " + shape_str(sm) + " incompatible with activations " + shape_str(sh));
  }
  auto& g = *h.graph;
  return g.add_op(
      OpKind::MaskAggregate, {h.id}, sh,
      [mask](Graph<T>& gr, int self) {
        const auto& H = detail::in_val(gr, self, 0);
        std::size_t bs = H.dim(0), t = H.dim(1), d = H.dim(2);
        Tensor<T> Y(H.shape());
        for (std::size_t b = 0; b < bs; ++b) {
          detail::mat(Y.data() + b * t * d, t, d).noalias() =
              detail::cmat(mask->data() + b * t * t, t, t) * detail::cmat(H.data() + b * t * d, t, d);
        }
        gr.node(self).value = std::move(Y);
      },
      [mask](Graph<T>& gr, int self) {
        auto& nd = gr.node(self);
        int ih = nd.inputs[0];
        if (!gr.wants_grad(ih)) return;
        auto& dH = gr.grad_of(ih);
        std::size_t bs = dH.dim(0), t = dH.dim(1), d = dH.dim(2);
        for (std::size_t b = 0; b < bs; ++b) {
          detail::mat(dH.data() + b * t * d, t, d).noalias() +=
              detail::cmat(mask->data() + b * t * t, t, t).transpose() *
              detail::cmat(nd.grad.data() + b * t * d, t, d);
        }
      });
}

/// Multi-head causal self-attention on q, k, v of shape [B, T, H * dh]:
/// per head, softmax(scale * q k^T) over columns j <= i, applied to v.
/// Heads are read in place with strided maps; probabilities are cached for
/// the reverse pass.
template <typename T>
Var<T> causal_attention(Var<T> q, Var<T> k, Var<T> v, std::size_t heads, T scale) {
  detail::same_graph("causal_attention", q, k);
  detail::same_graph("causal_attention", q, v);
  const auto& s = q.shape();
  if (s.size() != 3 || k.shape() != s || v.shape() != s || heads == 0 || s[2] % heads != 0) {
    detail::shape_fail("causal_attention", "q " + shape_str(s) + ", k " + shape_str(k.shape()) + ", v " +
                                               shape_str(v.shape()) + " with " + std::to_string(heads) + " heads");
  }
  if (!(scale > T(0))) detail::shape_fail("causal_attention", "scale must be positive");
  using Stride = Eigen::OuterStride<>;
  using HMap = Eigen::Map<detail::RowMat<T>, 0, Stride>;
  using CHMap = Eigen::Map<const detail::RowMat<T>, 0, Stride>;
  const std::size_t B = s[0], Tn = s[1], d = s[2], dh = d / heads;
  const auto ti = static_cast<Eigen::Index>(Tn), di = static_cast<Eigen::Index>(dh);
  auto probs = std::make_shared<AlignedVector<T>>();
  auto head_of = [=](const T* base, std::size_t b, std::size_t h) {
    return CHMap(base + b * Tn * d + h * dh, ti, di, Stride(static_cast<Eigen::Index>(d)));
  };
  auto& g = *q.graph;
  return g.add_op(
      OpKind::CausalAttention, {q.id, k.id, v.id}, s,
      [=](Graph<T>& gr, int self) {
        const auto& Q = detail::in_val(gr, self, 0);
        const auto& K = detail::in_val(gr, self, 1);
        const auto& V = detail::in_val(gr, self, 2);
        Tensor<T> out(s);
        probs->assign(B * heads * Tn * Tn, T(0));
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            auto P = detail::mat(probs->data() + (b * heads + h) * Tn * Tn, Tn, Tn);
            P.noalias() = head_of(Q.data(), b, h) * head_of(K.data(), b, h).transpose();
            for (Eigen::Index i = 0; i < ti; ++i) {
              auto row = P.row(i).array();
              auto live = row.head(i + 1);
              live = (scale * (live - live.maxCoeff())).exp();
              live /= detail::ordered_sum(P.row(i).data(), std::size_t(i + 1));
              row.tail(ti - i - 1).setZero();
            }
            HMap(out.data() + b * Tn * d + h * dh, ti, di, Stride(static_cast<Eigen::Index>(d))).noalias() =
                P * head_of(V.data(), b, h);
          }
        }
        gr.node(self).value = std::move(out);
      },
      [=](Graph<T>& gr, int self) {
        auto& nd = gr.node(self);
        const int iq = nd.inputs[0], ik = nd.inputs[1], iv = nd.inputs[2];
        const auto& Q = gr.node(iq).value;
        const auto& K = gr.node(ik).value;
        const auto& V = gr.node(iv).value;
        const bool gq = gr.wants_grad(iq), gk = gr.wants_grad(ik), gv = gr.wants_grad(iv);
        T* dQ = gq ? gr.grad_of(iq).data() : nullptr;
        T* dK = gk ? gr.grad_of(ik).data() : nullptr;
        T* dV = gv ? gr.grad_of(iv).data() : nullptr;
        detail::RowMat<T> dP(ti, ti);
        auto strided = [&](T* base, std::size_t b, std::size_t h) {
          return HMap(base + b * Tn * d + h * dh, ti, di, Stride(static_cast<Eigen::Index>(d)));
        };
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            auto P = detail::cmat(probs->data() + (b * heads + h) * Tn * Tn, Tn, Tn);
            auto dO = head_of(nd.grad.data(), b, h);
            if (gv) strided(dV, b, h).noalias() += P.transpose() * dO;
            if (!gq && !gk) continue;
            dP.noalias() = dO * head_of(V.data(), b, h).transpose();
            for (Eigen::Index i = 0; i < ti; ++i) {
              auto p = P.row(i).array();
              auto dp = dP.row(i).array();
              T dot = detail::ordered_dot(P.row(i).data(), dP.row(i).data(), Tn);
              dP.row(i).array() = scale * p * (dp - dot);
            }
            if (gq) strided(dQ, b, h).noalias() += dP * head_of(K.data(), b, h);
            if (gk) strided(dK, b, h).noalias() += dP.transpose() * head_of(Q.data(), b, h);
          }
        }
      });
}

/// Concatenates along the last axis; all leading axes must agree.
template <typename T>
Var<T> concat_last(const std::vector<Var<T>>& parts) {
  if (parts.empty()) detail::shape_fail("concat", "no inputs");
  Shape lead = parts[0].shape();
  if (lead.empty()) detail::shape_fail("concat", "scalar input");
  lead.pop_back();
  std::vector<int> ids;
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    detail::same_graph("concat", parts[0], p);
    Shape s = p.shape();
    if (s.empty()) detail::shape_fail("concat", "scalar input");
    std::size_t w = s.back();
    s.pop_back();
    if (s != lead) detail::shape_fail("concat", "leading axes " + shape_str(s) + " vs " + shape_str(lead));
    ids.push_back(p.id);
    widths.push_back(w);
    total += w;
  }
  Shape out = lead;
  out.push_back(total);
  auto& g = *parts[0].graph;
  return g.add_op(
      OpKind::Concat, ids, out,
      [widths, total](Graph<T>& gr, int self) {
        Tensor<T> Y(gr.node(self).shape);
        std::size_t rows = Y.rows(), off = 0;
        for (std::size_t k = 0; k < widths.size(); ++k) {
          const auto& X = detail::in_val(gr, self, k);
          for (std::size_t r = 0; r < rows; ++r) {
            std::copy_n(X.data() + r * widths[k], widths[k], Y.data() + r * total + off);
          }
          off += widths[k];
        }
        gr.node(self).value = std::move(Y);
      },
      [widths, total](Graph<T>& gr, int self) {
        auto& nd = gr.node(self);
        std::size_t rows = nd.grad.rows(), off = 0;
        for (std::size_t k = 0; k < widths.size(); ++k) {
          int in = nd.inputs[k];
          if (gr.wants_grad(in)) {
            auto& dx = gr.grad_of(in);
            for (std::size_t r = 0; r < rows; ++r)
              for (std::size_t i = 0; i < widths[k]; ++i)
                dx[r * widths[k] + i] += nd.grad[r * total + off + i];
          }
          off += widths[k];
        }
      });
}

/// Axis permutation for rank <= 4: out axis a takes input axis perm[a].
template <typename T>
Var<T> permute(Var<T> x, std::vector<std::size_t> perm) {
  const auto& s = x.shape();
  std::size_t r = s.size();
  if (perm.size() != r || r == 0 || r > 4) {
    detail::shape_fail("permute", "perm of length " + std::to_string(perm.size()) + " for " + shape_str(s));
  }
  std::vector<char> used(r, 0);
  for (auto p : perm) {
    if (p >= r || used[p]) detail::shape_fail("permute", "invalid axis permutation");
    used[p] = 1;
  }
  Shape out(r);
  for (std::size_t a = 0; a < r; ++a) out[a] = s[perm[a]];

  // Maps each output flat index to its input flat index.
  auto index = std::make_shared<std::vector<std::size_t>>(shape_numel(s));
  {
    std::array<std::size_t, 4> in_stride{};
    std::size_t st = 1;
    for (std::size_t a = r; a-- > 0;) {
      in_stride[a] = st;
      st *= s[a];
    }
    std::array<std::size_t, 4> os{1, 1, 1, 1}, ist{0, 0, 0, 0};
    for (std::size_t a = 0; a < r; ++a) {
      os[4 - r + a] = out[a];
      ist[4 - r + a] = in_stride[perm[a]];
    }
    std::size_t o = 0;
    for (std::size_t i0 = 0; i0 < os[0]; ++i0)
      for (std::size_t i1 = 0; i1 < os[1]; ++i1)
        for (std::size_t i2 = 0; i2 < os[2]; ++i2)
          for (std::size_t i3 = 0; i3 < os[3]; ++i3)
            (*index)[o++] = i0 * ist[0] + i1 * ist[1] + i2 * ist[2] + i3 * ist[3];
  }
  auto& g = *x.graph;
  return g.add_op(
      OpKind::Permute, {x.id}, out,
      [index](Graph<T>& gr, int self) {
        const auto& X = detail::in_val(gr, self, 0);
        Tensor<T> Y(gr.node(self).shape);
        for (std::size_t o = 0; o < Y.size(); ++o) Y[o] = X[(*index)[o]];
        gr.node(self).value = std::move(Y);
      },
      [index](Graph<T>& gr, int self) {
        auto& nd = gr.node(self);
        int ix = nd.inputs[0];
        if (!gr.wants_grad(ix)) return;
        auto& dx = gr.grad_of(ix);
        for (std::size_t o = 0; o < nd.grad.size(); ++o) dx[(*index)[o]] += nd.grad[o];
      });
}

template <typename T>
Var<T> reshape(Var<T> x, Shape shape) {
  if (shape_numel(shape) != shape_numel(x.shape())) {
    detail::shape_fail("reshape", shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  auto& g = *x.graph;
  return g.add_op(
      OpKind::Reshape, {x.id}, shape,
      [](Graph<T>& gr, int self) {
        Tensor<T> Y = detail::in_val(gr, self, 0);
        Y.reshape(gr.node(self).shape);
        gr.node(self).value = std::move(Y);
      },
      [](Graph<T>& gr, int self) {
        auto& nd = gr.node(self);
        int ix = nd.inputs[0];
        if (!gr.wants_grad(ix)) return;
        auto& dx = gr.grad_of(ix);
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += nd.grad[i];
      });
}

/// x / sqrt(|x|^2 + eps) over the last axis.
template <typename T>
Var<T> l2_normalize(Var<T> x, double eps = 1e-12) {
  if (x.shape().empty()) detail::shape_fail("l2_normalize", "scalar input");
  auto norms = std::make_shared<std::vector<T>>();
  auto& g = *x.graph;
  return g.add_op(
      OpKind::L2Normalize, {x.id}, x.shape(),
      [norms, eps](Graph<T>& gr, int self) {
        const auto& X = detail::in_val(gr, self, 0);
        std::size_t d = X.last_dim(), rows = X.rows();
        norms->assign(rows, T(0));
        Tensor<T> Y(X.shape());
        for (std::size_t r = 0; r < rows; ++r) {
          T ss = 0;
          for (std::size_t i = 0; i < d; ++i) ss += X[r * d + i] * X[r * d + i];
          T n = std::sqrt(ss + T(eps));
          (*norms)[r] = n;
          for (std::size_t i = 0; i < d; ++i) Y[r * d + i] = X[r * d + i] / n;
        }
        gr.node(self).value = std::move(Y);
      },
      [norms](Graph<T>& gr, int self) {
        auto& nd = gr.node(self);
        int ix = nd.inputs[0];
        if (!gr.wants_grad(ix)) return;
        const auto& Y = nd.value;
        auto& dx = gr.grad_of(ix);
        std::size_t d = Y.last_dim(), rows = Y.rows();
        for (std::size_t r = 0; r < rows; ++r) {
          T dot = 0;
          for (std::size_t i = 0; i < d; ++i) dot += nd.grad[r * d + i] * Y[r * d + i];
          for (std::size_t i = 0; i < d; ++i)
            dx[r * d + i] += (nd.grad[r * d + i] - Y[r * d + i] * dot) / (*norms)[r];
        }
      });
}

namespace detail {

template <typename T>
Var<T> reduce(Var<T> x, bool average) {
  auto& g = *x.graph;
  return g.add_op(
      average ? OpKind::Mean : OpKind::Sum, {x.id}, Shape{},
      [average](Graph<T>& gr, int self) {
        const auto& X = in_val(gr, self, 0);
        T s = 0;
        for (std::size_t i = 0; i < X.size(); ++i) s += X[i];
        if (average && X.size()) s /= T(X.size());
        gr.node(self).value = Tensor<T>::scalar(s);
      },
      [average](Graph<T>& gr, int self) {
        auto& nd = gr.node(self);
        int ix = nd.inputs[0];
        if (!gr.wants_grad(ix)) return;
        auto& dx = gr.grad_of(ix);
        T gval = nd.grad[0];
        if (average && dx.size()) gval /= T(dx.size());
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += gval;
      });
}

}  // namespace detail

template <typename T>
Var<T> sum(Var<T> x) { return detail::reduce(x, false); }
template <typename T>
Var<T> mean(Var<T> x) { return detail::reduce(x, true); }

/// Mean over rows of -sum_c q_c log softmax(z)_c, where q puts 1 - s on the
/// target class and s / (C - 1) on every other class. Targets equal to
/// `ignore_index` contribute nothing and are excluded from the mean.
template <typename T>
Var<T> cross_entropy_label_smoothed(Var<T> logits, std::vector<int> targets, double smoothing,
                                    int ignore_index = -1) {
  const auto& s = logits.shape();
  if (s.empty() || s.back() < 2) detail::shape_fail("cross_entropy", "logits " + shape_str(s) + " need >= 2 classes");
  if (!(smoothing >= 0.0 && smoothing < 1.0)) {
    throw std::invalid_argument("cross_entropy: smoothing must be in [0, 1), got " + std::to_string(smoothing));
  }
  std::size_t c = s.back(), rows = shape_numel(s) / c;
  if (targets.size() != rows) {
    detail::shape_fail("cross_entropy", std::to_string(targets.size()) + " targets for " + std::to_string(rows) + " rows");
  }
  std::size_t counted = 0;
  for (int t : targets) {
    if (t == ignore_index) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= c) {
      throw std::out_of_range("cross_entropy: target " + std::to_string(t) + " outside [0, " + std::to_string(c) + ")");
    }
    ++counted;
  }
  auto tg = std::make_shared<const std::vector<int>>(std::move(targets));
  auto probs = std::make_shared<std::vector<T>>();
  T on = T(1.0 - smoothing), off = T(smoothing / double(c - 1));
  T denom = T(counted ? counted : 1);
  auto& g = *logits.graph;
  return g.add_op(
      OpKind::CrossEntropy, {logits.id}, Shape{},
      [=](Graph<T>& gr, int self) {
        const auto& Z = detail::in_val(gr, self, 0);
        probs->assign(Z.size(), T(0));
        T total = 0;
        for (std::size_t r = 0; r < rows; ++r) {
          int t = (*tg)[r];
          if (t == ignore_index) continue;
          const T* z = Z.data() + r * c;
          T mx = z[0];
          for (std::size_t i = 1; i < c; ++i) mx = std::max(mx, z[i]);
          T se = 0;
          for (std::size_t i = 0; i < c; ++i) se += std::exp(z[i] - mx);
          T lse = mx + std::log(se);
          for (std::size_t i = 0; i < c; ++i) {
            T logp = z[i] - lse;
            (*probs)[r * c + i] = std::exp(logp);
            T q = (static_cast<std::size_t>(t) == i) ? on : off;
            total -= q * logp;
          }
        }
        gr.node(self).value = Tensor<T>::scalar(total / denom);
      },
      [=](Graph<T>& gr, int self) {
        auto& nd = gr.node(self);
        int iz = nd.inputs[0];
        if (!gr.wants_grad(iz)) return;
        auto& dz = gr.grad_of(iz);
        T scale_ = nd.grad[0] / denom;
        for (std::size_t r = 0; r < rows; ++r) {
          int t = (*tg)[r];
          if (t == ignore_index) continue;
          for (std::size_t i = 0; i < c; ++i) {
            T q = (static_cast<std::size_t>(t) == i) ? on : off;
            dz[r * c + i] += scale_ * ((*probs)[r * c + i] - q);
          }
        }
      });
}

/// mean((a - b)^2)
template <typename T>
Var<T> mse(Var<T> a, Var<T> b) {
  detail::same_graph("mse", a, b);
  if (a.shape() != b.shape()) {
    detail::shape_fail("mse", "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  auto& g = *a.graph;
  return g.add_op(
      OpKind::Mse, {a.id, b.id}, Shape{},
      [](Graph<T>& gr, int self) {
        const auto& A = detail::in_val(gr, self, 0);
        const auto& B = detail::in_val(gr, self, 1);
        T s = 0;
        for (std::size_t i = 0; i < A.size(); ++i) s += (A[i] - B[i]) * (A[i] - B[i]);
        gr.node(self).value = Tensor<T>::scalar(A.size() ? s / T(A.size()) : T(0));
      },
      [](Graph<T>& gr, int self) {
        auto& nd = gr.node(self);
        int ia = nd.inputs[0], ib = nd.inputs[1];
        const auto& A = gr.node(ia).value;
        const auto& B = gr.node(ib).value;
        T k = T(2) * nd.grad[0] / T(A.size());
        if (gr.wants_grad(ia)) {
          auto& da = gr.grad_of(ia);
          for (std::size_t i = 0; i < A.size(); ++i) da[i] += k * (A[i] - B[i]);
        }
        if (gr.wants_grad(ib)) {
          auto& db = gr.grad_of(ib);
          for (std::size_t i = 0; i < A.size(); ++i) db[i] -= k * (A[i] - B[i]);
        }
      });
}

/// Stop-gradient: forwards the value, blocks the backward pass.
template <typename T>
Var<T> detach(Var<T> x) {
  auto& g = *x.graph;
  Var<T> out = g.add_op(
      OpKind::Detach, {x.id}, x.shape(),
      [](Graph<T>& gr, int self) { gr.node(self).value = detail::in_val(gr, self, 0); },
      nullptr);
  g.node(out.id).needs_grad = false;
  return out;
}

/// NCHW convolution with square kernels: x[B, C, H, W], w[O, C, k, k], b[O].
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> bias, std::size_t stride, std::size_t pad) {
  detail::same_graph("conv2d", x, w);
  const auto& sx = x.shape();
  const auto& sw = w.shape();
  if (sx.size() != 4 || sw.size() != 4 || sw[1] != sx[1] || sw[2] != sw[3] ||
      bias.shape() != Shape{sw[0]} || stride == 0) {
    detail::shape_fail("conv2d", "input " + shape_str(sx) + ", weight " + shape_str(sw) +
                                     ", bias " + shape_str(bias.shape()));
  }
  std::size_t k = sw[2];
  if (sx[2] + 2 * pad < k || sx[3] + 2 * pad < k) detail::shape_fail("conv2d", "kernel larger than padded input");
  std::size_t ho = (sx[2] + 2 * pad - k) / stride + 1;
  std::size_t wo = (sx[3] + 2 * pad - k) / stride + 1;
  Shape out{sx[0], sw[0], ho, wo};

  struct Geom {
    std::size_t n, c, h, w, o, k, ho, wo, stride, pad;
  };
  Geom geo{sx[0], sx[1], sx[2], sx[3], sw[0], k, ho, wo, stride, pad};
  // col index (c*k*k + ki*k + kj, oy*wo + ox) -> input offset within one image, or npos.
  auto cols_index = std::make_shared<std::vector<std::size_t>>(geo.c * k * k * ho * wo);
  constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();
  for (std::size_t c = 0; c < geo.c; ++c)
    for (std::size_t ki = 0; ki < k; ++ki)
      for (std::size_t kj = 0; kj < k; ++kj)
        for (std::size_t oy = 0; oy < ho; ++oy)
          for (std::size_t ox = 0; ox < wo; ++ox) {
            long iy = long(oy * stride + ki) - long(pad);
            long ix = long(ox * stride + kj) - long(pad);
            std::size_t row = (c * k + ki) * k + kj;
            std::size_t idx = npos;
            if (iy >= 0 && ix >= 0 && iy < long(geo.h) && ix < long(geo.w)) {
              idx = (c * geo.h + std::size_t(iy)) * geo.w + std::size_t(ix);
            }
            (*cols_index)[row * ho * wo + oy * wo + ox] = idx;
          }
  auto& g = *x.graph;
  return g.add_op(
      OpKind::Conv2d, {x.id, w.id, bias.id}, out,
      [geo, cols_index](Graph<T>& gr, int self) {
        const auto& X = detail::in_val(gr, self, 0);
        const auto& W = detail::in_val(gr, self, 1);
        const auto& B = detail::in_val(gr, self, 2);
        std::size_t ckk = geo.c * geo.k * geo.k, hw = geo.ho * geo.wo, in_sz = geo.c * geo.h * geo.w;
        Tensor<T> Y(gr.node(self).shape);
        std::vector<T> cols(ckk * hw);
        for (std::size_t b = 0; b < geo.n; ++b) {
          const T* xb = X.data() + b * in_sz;
          for (std::size_t i = 0; i < cols.size(); ++i) {
            std::size_t src = (*cols_index)[i];
            cols[i] = src == npos ? T(0) : xb[src];
          }
          auto Yb = detail::mat(Y.data() + b * geo.o * hw, geo.o, hw);
          Yb.noalias() = detail::cmat(W.data(), geo.o, ckk) * detail::cmat(cols.data(), ckk, hw);
          for (std::size_t o = 0; o < geo.o; ++o) Yb.row(Eigen::Index(o)).array() += B[o];
        }
        gr.node(self).value = std::move(Y);
      },
      [geo, cols_index](Graph<T>& gr, int self) {
        auto& nd = gr.node(self);
        int ix = nd.inputs[0], iw = nd.inputs[1], ib = nd.inputs[2];
        const auto& X = gr.node(ix).value;
        const auto& W = gr.node(iw).value;
        std::size_t ckk = geo.c * geo.k * geo.k, hw = geo.ho * geo.wo, in_sz = geo.c * geo.h * geo.w;
        bool gx = gr.wants_grad(ix), gw = gr.wants_grad(iw), gb = gr.wants_grad(ib);
        std::vector<T> cols(ckk * hw), dcols(ckk * hw);
        for (std::size_t b = 0; b < geo.n; ++b) {
          auto dY = detail::cmat(nd.grad.data() + b * geo.o * hw, geo.o, hw);
          if (gb) {
            auto& dB = gr.grad_of(ib);
            for (std::size_t o = 0; o < geo.o; ++o) dB[o] += detail::ordered_sum(dY.row(Eigen::Index(o)).data(), std::size_t(dY.cols()));
          }
          if (gw) {
            const T* xb = X.data() + b * in_sz;
            for (std::size_t i = 0; i < cols.size(); ++i) {
              std::size_t src = (*cols_index)[i];
              cols[i] = src == npos ? T(0) : xb[src];
            }
            detail::mat(gr.grad_of(iw).data(), geo.o, ckk).noalias() +=
                dY * detail::cmat(cols.data(), ckk, hw).transpose();
          }
          if (gx) {
            detail::mat(dcols.data(), ckk, hw).noalias() = detail::cmat(W.data(), geo.o, ckk).transpose() * dY;
            T* dxb = gr.grad_of(ix).data() + b * in_sz;
            for (std::size_t i = 0; i < dcols.size(); ++i) {
              std::size_t dst = (*cols_index)[i];
              if (dst != npos) dxb[dst] += dcols[i];
            }
          }
        }
      });
}

/// Nearest-neighbour 2x upsampling of NCHW input.
template <typename T>
Var<T> upsample2x(Var<T> x) {
  const auto& s = x.shape();
  if (s.size() != 4) detail::shape_fail("upsample2x", "expects NCHW, got " + shape_str(s));
  Shape out{s[0], s[1], 2 * s[2], 2 * s[3]};
  auto& g = *x.graph;
  return g.add_op(
      OpKind::Upsample2x, {x.id}, out,
      [](Graph<T>& gr, int self) {
        const auto& X = detail::in_val(gr, self, 0);
        Tensor<T> Y(gr.node(self).shape);
        std::size_t planes = X.dim(0) * X.dim(1), h = X.dim(2), w = X.dim(3);
        for (std::size_t p = 0; p < planes; ++p)
          for (std::size_t y = 0; y < 2 * h; ++y)
            for (std::size_t xx = 0; xx < 2 * w; ++xx)
              Y[(p * 2 * h + y) * 2 * w + xx] = X[(p * h + y / 2) * w + xx / 2];
        gr.node(self).value = std::move(Y);
      },
      [](Graph<T>& gr, int self) {
        auto& nd = gr.node(self);
        int ix = nd.inputs[0];
        if (!gr.wants_grad(ix)) return;
        auto& dx = gr.grad_of(ix);
        std::size_t planes = dx.dim(0) * dx.dim(1), h = dx.dim(2), w = dx.dim(3);
        for (std::size_t p = 0; p < planes; ++p)
          for (std::size_t y = 0; y < 2 * h; ++y)
            for (std::size_t xx = 0; xx < 2 * w; ++xx)
              dx[(p * h + y / 2) * w + xx / 2] += nd.grad[(p * 2 * h + y) * 2 * w + xx];
      });
}

}  // namespace icrl::diff
