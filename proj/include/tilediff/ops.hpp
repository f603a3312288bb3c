#pragma once

// Differentiable tensor ops recorded on a Tape. Matrix products and reductions
// accumulate in double regardless of the element type.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <type_traits>
#include <vector>

#include <Eigen/Dense>

#include "tilediff/autodiff.hpp"
#include "tilediff/error.hpp"
#include "tilediff/tensor.hpp"

namespace tilediff::ad {

using Acc = double;

namespace kernel {

template <class T>
inline Acc dot(const T* __restrict a, const T* __restrict b, std::size_t k) {
  Acc s0 = 0, s1 = 0, s2 = 0, s3 = 0;
  std::size_t i = 0;
  for (; i + 4 <= k; i += 4) {
    s0 += Acc(a[i]) * Acc(b[i]);
    s1 += Acc(a[i + 1]) * Acc(b[i + 1]);
    s2 += Acc(a[i + 2]) * Acc(b[i + 2]);
    s3 += Acc(a[i + 3]) * Acc(b[i + 3]);
  }
  for (; i < k; ++i) s0 += Acc(a[i]) * Acc(b[i]);
  return (s0 + s1) + (s2 + s3);
}

/// C (+)= op(A) * op(B) where op transposes when requested. A is stored
/// row-major [ar, ac], B row-major [br, bc]. Products run in double.
template <class T>
void gemm(const T* a, std::size_t ar, std::size_t ac, bool ta, const T* b, std::size_t br, std::size_t bc, bool tb,
          T* c, bool accumulate) {
  using MatD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatT = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const auto ai = Eigen::Index(ar), aj = Eigen::Index(ac), bi = Eigen::Index(br), bj = Eigen::Index(bc);
  const Eigen::Index m = ta ? aj : ai, n = tb ? bi : bj;
  Eigen::Map<MatT> cm(c, m, n);
  auto run = [&](const auto& am, const auto& bm) {
    MatD prod(m, n);
    if (ta && tb) prod.noalias() = am.transpose() * bm.transpose();
    else if (ta) prod.noalias() = am.transpose() * bm;
    else if (tb) prod.noalias() = am * bm.transpose();
    else prod.noalias() = am * bm;
    if (accumulate) prod += cm.template cast<double>();
    cm = prod.template cast<T>();
  };
  if constexpr (std::is_same_v<T, double>) {
    run(Eigen::Map<const MatD>(a, ai, aj), Eigen::Map<const MatD>(b, bi, bj));
  } else {
    const MatD am = Eigen::Map<const MatT>(a, ai, aj).template cast<double>();
    const MatD bm = Eigen::Map<const MatT>(b, bi, bj).template cast<double>();
    run(am, bm);
  }
}

}  // namespace kernel

namespace detail {

template <class T>
Tape<T>& tape_of(Var<T> a) {
  if (!a.tape) throw ConfigError("Var is not attached to a tape");
  return *a.tape;
}

template <class T>
void same_tape(Var<T> a, Var<T> b) {
  if (a.tape != b.tape) throw ConfigError("operands recorded on different tapes");
}

template <class T>
void require_same_shape(const char* op, Var<T> a, Var<T> b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

template <class T>
void accumulate(Tape<T>& tape, Var<T> target, std::span<const T> g) {
  if (!tape.requires_grad(target)) return;
  auto dst = tape.grad(target.id);
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::same_tape(a, b);
  detail::require_same_shape("add", a, b);
  auto& tape = detail::tape_of(a);
  Tensor<T> out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += bv[i];
  return tape.record(std::move(out), a.requires_grad() || b.requires_grad(), [a, b](Tape<T>& t, std::size_t self) {
    auto g = t.grad(self);
    detail::accumulate<T>(t, a, g);
    detail::accumulate<T>(t, b, g);
  });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
  detail::same_tape(a, b);
  detail::require_same_shape("sub", a, b);
  auto& tape = detail::tape_of(a);
  Tensor<T> out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bv[i];
  return tape.record(std::move(out), a.requires_grad() || b.requires_grad(), [a, b](Tape<T>& t, std::size_t self) {
    auto g = t.grad(self);
    detail::accumulate<T>(t, a, g);
    if (t.requires_grad(b)) {
      auto gb = t.grad(b.id);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::same_tape(a, b);
  detail::require_same_shape("mul", a, b);
  auto& tape = detail::tape_of(a);
  Tensor<T> out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bv[i];
  return tape.record(std::move(out), a.requires_grad() || b.requires_grad(), [a, b](Tape<T>& t, std::size_t self) {
    auto g = t.grad(self);
    if (t.requires_grad(a)) {
      auto ga = t.grad(a.id);
      auto bv = t.value(b).data();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.requires_grad(b)) {
      auto gb = t.grad(b.id);
      auto av = t.value(a).data();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

template <class T>
Var<T> scale(Var<T> a, double s) {
  auto& tape = detail::tape_of(a);
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v = T(v * s);
  return tape.record(std::move(out), a.requires_grad(), [a, s](Tape<T>& t, std::size_t self) {
    auto g = t.grad(self);
    auto ga = t.grad(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += T(g[i] * s);
  });
}

template <class T>
Var<T> add_scalar(Var<T> a, double s) {
  auto& tape = detail::tape_of(a);
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v = T(v + s);
  return tape.record(std::move(out), a.requires_grad(), [a](Tape<T>& t, std::size_t self) {
    detail::accumulate<T>(t, a, t.grad(self));
  });
}

namespace detail {

template <class T, class F, class DF>
Var<T> unary(Var<T> a, F f, DF df) {
  auto& tape = tape_of(a);
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v = T(f(Acc(v)));
  return tape.record(std::move(out), a.requires_grad(), [a, df](Tape<T>& t, std::size_t self) {
    auto g = t.grad(self);
    auto ga = t.grad(a.id);
    auto x = t.value(a).data();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += T(Acc(g[i]) * df(Acc(x[i])));
  });
}

}  // namespace detail

template <class T>
Var<T> tanh(Var<T> a) {
  return detail::unary(
      a, [](Acc x) { return std::tanh(x); },
      [](Acc x) {
        const Acc y = std::tanh(x);
        return 1 - y * y;
      });
}

template <class T>
Var<T> silu(Var<T> a) {
  return detail::unary(
      a, [](Acc x) { return x / (1 + std::exp(-x)); },
      [](Acc x) {
        const Acc s = 1 / (1 + std::exp(-x));
        return s * (1 + x * (1 - s));
      });
}

/// Tanh-approximated GELU.
template <class T>
Var<T> gelu(Var<T> a) {
  constexpr Acc c = 0.7978845608028654;  // sqrt(2/pi)
  return detail::unary(
      a, [](Acc x) { return 0.5 * x * (1 + std::tanh(c * (x + 0.044715 * x * x * x))); },
      [](Acc x) {
        const Acc u = c * (x + 0.044715 * x * x * x);
        const Acc th = std::tanh(u);
        const Acc du = c * (1 + 3 * 0.044715 * x * x);
        return 0.5 * (1 + th) + 0.5 * x * (1 - th * th) * du;
      });
}

// ---------------------------------------------------------------------------
// Broadcasts. Only leading-batch broadcasting is supported.

/// x[B, ..., D] + y[B, D]: y broadcast over the middle axes of each batch element.
template <class T>
Var<T> add_per_batch(Var<T> x, Var<T> y) {
  detail::same_tape(x, y);
  const auto& xs = x.shape();
  const auto& ys = y.shape();
  if (xs.size() < 2 || ys.size() != 2 || ys[0] != xs[0] || ys[1] != xs.back()) {
    throw DimensionError("add_per_batch: cannot broadcast " + shape_str(ys) + " onto " + shape_str(xs));
  }
  const std::size_t batch = xs[0], d = xs.back(), inner = x.value().size() / batch;
  Tensor<T> out = x.value();
  auto o = out.data();
  auto yv = y.value().data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < inner; ++i) o[b * inner + i] += yv[b * d + i % d];
  return detail::tape_of(x).record(
      std::move(out), x.requires_grad() || y.requires_grad(), [x, y, batch, d, inner](Tape<T>& t, std::size_t self) {
        auto g = t.grad(self);
        detail::accumulate<T>(t, x, g);
        if (t.requires_grad(y)) {
          auto gy = t.grad(y.id);
          for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t i = 0; i < inner; ++i) gy[b * d + i % d] += g[b * inner + i];
        }
      });
}

/// x[B, ..., D] * y[B, D]
template <class T>
Var<T> mul_per_batch(Var<T> x, Var<T> y) {
  detail::same_tape(x, y);
  const auto& xs = x.shape();
  const auto& ys = y.shape();
  if (xs.size() < 2 || ys.size() != 2 || ys[0] != xs[0] || ys[1] != xs.back()) {
    throw DimensionError("mul_per_batch: cannot broadcast " + shape_str(ys) + " onto " + shape_str(xs));
  }
  const std::size_t batch = xs[0], d = xs.back(), inner = x.value().size() / batch;
  Tensor<T> out = x.value();
  auto o = out.data();
  auto yv = y.value().data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < inner; ++i) o[b * inner + i] *= yv[b * d + i % d];
  return detail::tape_of(x).record(
      std::move(out), x.requires_grad() || y.requires_grad(), [x, y, batch, d, inner](Tape<T>& t, std::size_t self) {
        auto g = t.grad(self);
        auto xv = t.value(x).data();
        auto yv = t.value(y).data();
        if (t.requires_grad(x)) {
          auto gx = t.grad(x.id);
          for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t i = 0; i < inner; ++i) gx[b * inner + i] += g[b * inner + i] * yv[b * d + i % d];
        }
        if (t.requires_grad(y)) {
          std::vector<Acc> acc(batch * d, 0.0);
          for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t i = 0; i < inner; ++i) acc[b * d + i % d] += Acc(g[b * inner + i]) * Acc(xv[b * inner + i]);
          auto gy = t.grad(y.id);
          for (std::size_t i = 0; i < acc.size(); ++i) gy[i] += T(acc[i]);
        }
      });
}

/// x[..., N, D] + y[N, D]: y repeated over all leading axes.
template <class T>
Var<T> add_trailing(Var<T> x, Var<T> y) {
  detail::same_tape(x, y);
  const auto& xs = x.shape();
  const auto& ys = y.shape();
  if (ys.size() > xs.size() || !std::equal(ys.begin(), ys.end(), xs.end() - ys.size())) {
    throw DimensionError("add_trailing: cannot broadcast " + shape_str(ys) + " onto " + shape_str(xs));
  }
  const std::size_t inner = y.value().size(), outer = x.value().size() / inner;
  Tensor<T> out = x.value();
  auto o = out.data();
  auto yv = y.value().data();
  for (std::size_t b = 0; b < outer; ++b)
    for (std::size_t i = 0; i < inner; ++i) o[b * inner + i] += yv[i];
  return detail::tape_of(x).record(std::move(out), x.requires_grad() || y.requires_grad(),
                                   [x, y, inner, outer](Tape<T>& t, std::size_t self) {
                                     auto g = t.grad(self);
                                     detail::accumulate<T>(t, x, g);
                                     if (t.requires_grad(y)) {
                                       auto gy = t.grad(y.id);
                                       for (std::size_t b = 0; b < outer; ++b)
                                         for (std::size_t i = 0; i < inner; ++i) gy[i] += g[b * inner + i];
                                     }
                                   });
}

// ---------------------------------------------------------------------------
// Matrix products

/// Standard product of rank-2 tensors a[m,k] * b[k,n].
template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  detail::same_tape(a, b);
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (as.size() != 2 || bs.size() != 2 || as[1] != bs[0]) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(as) + " and " + shape_str(bs));
  }
  const std::size_t m = as[0], k = as[1], n = bs[1];
  Tensor<T> out({m, n});
  kernel::gemm(a.value().data().data(), m, k, false, b.value().data().data(), k, n, false, out.data().data(), false);
  return detail::tape_of(a).record(
      std::move(out), a.requires_grad() || b.requires_grad(), [a, b, m, k, n](Tape<T>& t, std::size_t self) {
        auto g = t.grad(self);
        if (t.requires_grad(a)) {
          // dA = dC B^T
          kernel::gemm(g.data(), m, n, false, t.value(b).data().data(), k, n, true, t.grad(a.id).data(), true);
        }
        if (t.requires_grad(b)) {
          // dB = A^T dC
          kernel::gemm(t.value(a).data().data(), m, k, true, g.data(), m, n, false, t.grad(b.id).data(), true);
        }
      });
}

namespace detail {

template <class T>
Var<T> linear_impl(Var<T> x, Var<T> w, std::optional<Var<T>> bias) {
  same_tape(x, w);
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  if (ws.size() != 2 || xs.back() != ws[1]) {
    throw DimensionError("linear: input " + shape_str(xs) + " does not match weight " + shape_str(ws));
  }
  const std::size_t in = ws[1], out_f = ws[0], rows = x.value().size() / in;
  if (bias && (bias->shape().size() != 1 || bias->shape()[0] != out_f)) {
    throw DimensionError("linear: bias " + shape_str(bias->shape()) + " does not match weight " + shape_str(ws));
  }
  Shape os = xs;
  os.back() = out_f;
  Tensor<T> out(os);
  kernel::gemm(x.value().data().data(), rows, in, false, w.value().data().data(), out_f, in, true, out.data().data(), false);
  if (bias) {
    auto o = out.data();
    auto bv = bias->value().data();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < out_f; ++j) o[r * out_f + j] += bv[j];
  }
  const bool rg = x.requires_grad() || w.requires_grad() || (bias && bias->requires_grad());
  return detail::tape_of(x).record(std::move(out), rg, [x, w, bias, in, out_f, rows](Tape<T>& t, std::size_t self) {
    auto g = t.grad(self);
    if (t.requires_grad(x)) {
      // dX = dY W
      kernel::gemm(g.data(), rows, out_f, false, t.value(w).data().data(), out_f, in, false, t.grad(x.id).data(), true);
    }
    if (t.requires_grad(w)) {
      // dW = dY^T X
      kernel::gemm(g.data(), rows, out_f, true, t.value(x).data().data(), rows, in, false, t.grad(w.id).data(), true);
    }
    if (bias && t.requires_grad(*bias)) {
      std::vector<Acc> acc(out_f, 0.0);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < out_f; ++j) acc[j] += g[r * out_f + j];
      auto gb = t.grad(bias->id);
      for (std::size_t j = 0; j < out_f; ++j) gb[j] += T(acc[j]);
    }
  });
}

}  // namespace detail

/// y[..., out] = x[..., in] * W^T + bias, with W stored [out, in].
template <class T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> bias) {
  return detail::linear_impl<T>(x, w, bias);
}

template <class T>
Var<T> linear(Var<T> x, Var<T> w) {
  return detail::linear_impl<T>(x, w, std::nullopt);
}

// ---------------------------------------------------------------------------
// Normalization and attention

/// Softmax along `axis`, max-subtracted.
template <class T>
Var<T> softmax(Var<T> x, std::size_t axis) {
  const auto& xs = x.shape();
  if (axis >= xs.size()) throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for " + shape_str(xs));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= xs[i];
  for (std::size_t i = axis + 1; i < xs.size(); ++i) inner *= xs[i];
  const std::size_t len = xs[axis];
  Tensor<T> out(xs);
  auto o = out.data();
  auto xv = x.value().data();
  for (std::size_t a = 0; a < outer; ++a)
    for (std::size_t c = 0; c < inner; ++c) {
      const std::size_t base = a * len * inner + c;
      Acc mx = xv[base];
      for (std::size_t i = 1; i < len; ++i) mx = std::max<Acc>(mx, xv[base + i * inner]);
      Acc z = 0;
      for (std::size_t i = 0; i < len; ++i) z += std::exp(Acc(xv[base + i * inner]) - mx);
      for (std::size_t i = 0; i < len; ++i) o[base + i * inner] = T(std::exp(Acc(xv[base + i * inner]) - mx) / z);
    }
  return detail::tape_of(x).record(std::move(out), x.requires_grad(), [x, outer, inner, len](Tape<T>& t, std::size_t self) {
    auto g = t.grad(self);
    auto gx = t.grad(x.id);
    auto y = t.value(Var<T>{&t, self}).data();
    for (std::size_t a = 0; a < outer; ++a)
      for (std::size_t c = 0; c < inner; ++c) {
        const std::size_t base = a * len * inner + c;
        Acc s = 0;
        for (std::size_t i = 0; i < len; ++i) s += Acc(g[base + i * inner]) * Acc(y[base + i * inner]);
        for (std::size_t i = 0; i < len; ++i) {
          const std::size_t k = base + i * inner;
          gx[k] += T(Acc(y[k]) * (Acc(g[k]) - s));
        }
      }
  });
}

namespace detail {

template <class T>
Var<T> layer_norm_impl(Var<T> x, std::optional<Var<T>> gamma, std::optional<Var<T>> beta, double eps) {
  if (!(eps > 0)) throw ConfigError("layer_norm: eps must be positive");
  const auto& xs = x.shape();
  const std::size_t d = xs.back(), rows = x.value().size() / d;
  if (gamma && gamma->shape() != Shape{d}) throw DimensionError("layer_norm: gamma " + shape_str(gamma->shape()));
  if (beta && beta->shape() != Shape{d}) throw DimensionError("layer_norm: beta " + shape_str(beta->shape()));
  Tensor<T> out(xs);
  std::vector<T> xhat(x.value().size());
  std::vector<Acc> inv_std(rows);
  auto xv = x.value().data();
  auto o = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * d;
    Acc mu = 0;
    for (std::size_t i = 0; i < d; ++i) mu += row[i];
    mu /= Acc(d);
    Acc var = 0;
    for (std::size_t i = 0; i < d; ++i) var += (row[i] - mu) * (row[i] - mu);
    var /= Acc(d);
    inv_std[r] = 1 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < d; ++i) {
      const Acc h = (row[i] - mu) * inv_std[r];
      xhat[r * d + i] = T(h);
      Acc y = h;
      if (gamma) y *= Acc(gamma->value()[i]);
      if (beta) y += Acc(beta->value()[i]);
      o[r * d + i] = T(y);
    }
  }
  const bool rg = x.requires_grad() || (gamma && gamma->requires_grad()) || (beta && beta->requires_grad());
  return tape_of(x).record(
      std::move(out), rg,
      [x, gamma, beta, d, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<T>& t, std::size_t self) {
        auto g = t.grad(self);
        if (gamma && t.requires_grad(*gamma)) {
          auto gg = t.grad(gamma->id);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t i = 0; i < d; ++i) gg[i] += g[r * d + i] * xhat[r * d + i];
        }
        if (beta && t.requires_grad(*beta)) {
          auto gb = t.grad(beta->id);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t i = 0; i < d; ++i) gb[i] += g[r * d + i];
        }
        if (t.requires_grad(x)) {
          auto gx = t.grad(x.id);
          std::vector<Acc> dh(d);
          for (std::size_t r = 0; r < rows; ++r) {
            Acc mean_dh = 0, mean_dh_h = 0;
            for (std::size_t i = 0; i < d; ++i) {
              dh[i] = Acc(g[r * d + i]) * (gamma ? Acc(t.value(*gamma)[i]) : 1.0);
              mean_dh += dh[i];
              mean_dh_h += dh[i] * Acc(xhat[r * d + i]);
            }
            mean_dh /= Acc(d);
            mean_dh_h /= Acc(d);
            for (std::size_t i = 0; i < d; ++i)
              gx[r * d + i] += T(inv_std[r] * (dh[i] - mean_dh - Acc(xhat[r * d + i]) * mean_dh_h));
          }
        }
      });
}

}  // namespace detail

/// Normalizes over the last axis without an affine transform.
template <class T>
Var<T> layer_norm(Var<T> x, double eps = 1e-6) {
  return detail::layer_norm_impl<T>(x, std::nullopt, std::nullopt, eps);
}

template <class T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, double eps = 1e-6) {
  return detail::layer_norm_impl<T>(x, gamma, beta, eps);
}

/// Multi-head scaled dot-product attention. q[B,Nq,D], k/v[B,Nk,D] (rank-2 inputs
/// are treated as B=1). D is split into `heads` contiguous groups.
template <class T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, double scale, std::size_t heads = 1) {
  detail::same_tape(q, k);
  detail::same_tape(q, v);
  auto as3 = [](const Shape& s) { return s.size() == 2 ? Shape{1, s[0], s[1]} : s; };
  const Shape qs = as3(q.shape()), ks = as3(k.shape()), vs = as3(v.shape());
  if (qs.size() != 3 || ks.size() != 3 || vs.size() != 3 || q.shape().size() != k.shape().size() ||
      q.shape().size() != v.shape().size()) {
    throw DimensionError("attention: expected rank-2 or rank-3 inputs of equal rank");
  }
  if (qs[0] != ks[0] || qs[0] != vs[0] || qs[2] != ks[2] || ks[1] != vs[1]) {
    throw DimensionError("attention: shape mismatch q" + shape_str(q.shape()) + " k" + shape_str(k.shape()) + " v" +
                         shape_str(v.shape()));
  }
  if (heads == 0 || qs[2] % heads != 0) throw DimensionError("attention: head count must divide the feature width");
  const std::size_t batch = qs[0], nq = qs[1], nk = ks[1], d = qs[2], dv = vs[2];
  if (dv % heads != 0) throw DimensionError("attention: head count must divide the value width");
  const std::size_t dh = d / heads, dvh = dv / heads;

  Shape os = q.shape();
  os.back() = dv;
  Tensor<T> out(os);
  std::vector<T> probs(batch * heads * nq * nk);
  auto qv = q.value().data();
  auto kv = k.value().data();
  auto vv = v.value().data();
  auto o = out.data();
  std::vector<Acc> row(nk);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < nq; ++i) {
        const T* qi = qv.data() + (b * nq + i) * d + h * dh;
        Acc mx = -std::numeric_limits<Acc>::infinity();
        for (std::size_t j = 0; j < nk; ++j) {
          row[j] = kernel::dot(qi, kv.data() + (b * nk + j) * d + h * dh, dh) * scale;
          mx = std::max(mx, row[j]);
        }
        Acc z = 0;
        for (std::size_t j = 0; j < nk; ++j) z += (row[j] = std::exp(row[j] - mx));
        T* p = probs.data() + ((b * heads + h) * nq + i) * nk;
        for (std::size_t j = 0; j < nk; ++j) p[j] = T(row[j] / z);
        for (std::size_t e = 0; e < dvh; ++e) {
          Acc s = 0;
          for (std::size_t j = 0; j < nk; ++j) s += Acc(p[j]) * Acc(vv[(b * nk + j) * dv + h * dvh + e]);
          o[(b * nq + i) * dv + h * dvh + e] = T(s);
        }
      }

  const bool rg = q.requires_grad() || k.requires_grad() || v.requires_grad();
  return detail::tape_of(q).record(
      std::move(out), rg,
      [q, k, v, scale, batch, heads, nq, nk, d, dv, dh, dvh, probs = std::move(probs)](Tape<T>& t, std::size_t self) {
        auto g = t.grad(self);
        auto qv = t.value(q).data();
        auto kv = t.value(k).data();
        auto vv = t.value(v).data();
        const bool gq_on = t.requires_grad(q), gk_on = t.requires_grad(k), gv_on = t.requires_grad(v);
        std::vector<Acc> gq(gq_on ? qv.size() : 0, 0.0), gk(gk_on ? kv.size() : 0, 0.0), gvv(gv_on ? vv.size() : 0, 0.0);
        std::vector<Acc> dp(nk), ds(nk);
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t i = 0; i < nq; ++i) {
              const T* p = probs.data() + ((b * heads + h) * nq + i) * nk;
              const T* gi = g.data() + (b * nq + i) * dv + h * dvh;
              Acc sum_pdp = 0;
              for (std::size_t j = 0; j < nk; ++j) {
                const T* vj = vv.data() + (b * nk + j) * dv + h * dvh;
                dp[j] = kernel::dot(gi, vj, dvh);
                sum_pdp += Acc(p[j]) * dp[j];
                if (gv_on)
                  for (std::size_t e = 0; e < dvh; ++e) gvv[(b * nk + j) * dv + h * dvh + e] += Acc(p[j]) * Acc(gi[e]);
              }
              for (std::size_t j = 0; j < nk; ++j) ds[j] = Acc(p[j]) * (dp[j] - sum_pdp) * scale;
              const std::size_t qoff = (b * nq + i) * d + h * dh;
              for (std::size_t j = 0; j < nk; ++j) {
                const std::size_t koff = (b * nk + j) * d + h * dh;
                for (std::size_t e = 0; e < dh; ++e) {
                  if (gq_on) gq[qoff + e] += ds[j] * Acc(kv[koff + e]);
                  if (gk_on) gk[koff + e] += ds[j] * Acc(qv[qoff + e]);
                }
              }
            }
        auto flush = [&t](Var<T> target, const std::vector<Acc>& acc) {
          if (acc.empty()) return;
          auto dst = t.grad(target.id);
          for (std::size_t i = 0; i < acc.size(); ++i) dst[i] += T(acc[i]);
        };
        flush(q, gq);
        flush(k, gk);
        flush(v, gvv);
      });
}

// ---------------------------------------------------------------------------
// Shape plumbing

template <class T>
Var<T> reshape(Var<T> x, Shape shape) {
  auto out = x.value().reshaped(std::move(shape));
  return detail::tape_of(x).record(std::move(out), x.requires_grad(), [x](Tape<T>& t, std::size_t self) {
    detail::accumulate<T>(t, x, t.grad(self));
  });
}

/// Slice [start, start+count) of the last axis.
template <class T>
Var<T> columns(Var<T> x, std::size_t start, std::size_t count) {
  const auto& xs = x.shape();
  const std::size_t d = xs.back();
  if (count == 0 || start + count > d) throw DimensionError("columns: slice out of range for " + shape_str(xs));
  const std::size_t rows = x.value().size() / d;
  Shape os = xs;
  os.back() = count;
  Tensor<T> out(os);
  auto xv = x.value().data();
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(xv.data() + r * d + start, count, out.data().data() + r * count);
  return detail::tape_of(x).record(std::move(out), x.requires_grad(), [x, start, count, d, rows](Tape<T>& t, std::size_t self) {
    auto g = t.grad(self);
    auto gx = t.grad(x.id);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t i = 0; i < count; ++i) gx[r * d + start + i] += g[r * count + i];
  });
}

/// Concatenates along the last axis; leading shapes must match.
template <class T>
Var<T> concat_last(Var<T> a, Var<T> b) {
  detail::same_tape(a, b);
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (as.size() != bs.size() || !std::equal(as.begin(), as.end() - 1, bs.begin())) {
    throw DimensionError("concat_last: leading shapes differ " + shape_str(as) + " vs " + shape_str(bs));
  }
  const std::size_t da = as.back(), db = bs.back(), rows = a.value().size() / da;
  Shape os = as;
  os.back() = da + db;
  Tensor<T> out(os);
  auto o = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(a.value().data().data() + r * da, da, o.data() + r * (da + db));
    std::copy_n(b.value().data().data() + r * db, db, o.data() + r * (da + db) + da);
  }
  return detail::tape_of(a).record(std::move(out), a.requires_grad() || b.requires_grad(),
                                   [a, b, da, db, rows](Tape<T>& t, std::size_t self) {
                                     auto g = t.grad(self);
                                     if (t.requires_grad(a)) {
                                       auto ga = t.grad(a.id);
                                       for (std::size_t r = 0; r < rows; ++r)
                                         for (std::size_t i = 0; i < da; ++i) ga[r * da + i] += g[r * (da + db) + i];
                                     }
                                     if (t.requires_grad(b)) {
                                       auto gb = t.grad(b.id);
                                       for (std::size_t r = 0; r < rows; ++r)
                                         for (std::size_t i = 0; i < db; ++i) gb[r * db + i] += g[r * (da + db) + da + i];
                                     }
                                   });
}

/// Replaces all token rows of batch element b with `fill` where use_fill[b] is set.
/// tokens[B, M, D], fill[1, D] or [D].
template <class T>
Var<T> substitute_rows(Var<T> tokens, Var<T> fill, std::vector<bool> use_fill) {
  detail::same_tape(tokens, fill);
  const auto& ts = tokens.shape();
  if (ts.size() != 3 || fill.value().size() != ts[2] || use_fill.size() != ts[0]) {
    throw DimensionError("substitute_rows: fill " + shape_str(fill.shape()) + " vs tokens " + shape_str(ts));
  }
  const std::size_t batch = ts[0], m = ts[1], d = ts[2];
  Tensor<T> out = tokens.value();
  auto o = out.data();
  for (std::size_t b = 0; b < batch; ++b)
    if (use_fill[b])
      for (std::size_t j = 0; j < m; ++j) std::copy_n(fill.value().data().data(), d, o.data() + (b * m + j) * d);
  const bool rg = tokens.requires_grad() || fill.requires_grad();
  return detail::tape_of(tokens).record(
      std::move(out), rg, [tokens, fill, use_fill = std::move(use_fill), batch, m, d](Tape<T>& t, std::size_t self) {
        auto g = t.grad(self);
        const bool gt_on = t.requires_grad(tokens), gf_on = t.requires_grad(fill);
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t j = 0; j < m; ++j) {
            const std::size_t off = (b * m + j) * d;
            if (use_fill[b]) {
              if (gf_on) {
                auto gf = t.grad(fill.id);
                for (std::size_t i = 0; i < d; ++i) gf[i] += g[off + i];
              }
            } else if (gt_on) {
              auto gtk = t.grad(tokens.id);
              for (std::size_t i = 0; i < d; ++i) gtk[off + i] += g[off + i];
            }
          }
      });
}

// ---------------------------------------------------------------------------
// Reductions

template <class T>
Var<T> sum(Var<T> x) {
  Acc s = 0;
  for (auto v : x.value().data()) s += v;
  return detail::tape_of(x).record(Tensor<T>({1}, {T(s)}), x.requires_grad(), [x](Tape<T>& t, std::size_t self) {
    const T g = t.grad(self)[0];
    for (auto& gx : t.grad(x.id)) gx += g;
  });
}

template <class T>
Var<T> mean(Var<T> x) {
  return scale(sum(x), 1.0 / double(x.value().size()));
}

/// mean((a - b)^2) over all elements.
template <class T>
Var<T> mse(Var<T> a, Var<T> b) {
  detail::same_tape(a, b);
  detail::require_same_shape("mse", a, b);
  const std::size_t n = a.value().size();
  Acc s = 0;
  auto av = a.value().data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < n; ++i) s += (Acc(av[i]) - Acc(bv[i])) * (Acc(av[i]) - Acc(bv[i]));
  return detail::tape_of(a).record(Tensor<T>({1}, {T(s / Acc(n))}), a.requires_grad() || b.requires_grad(),
                                   [a, b, n](Tape<T>& t, std::size_t self) {
                                     const Acc g = t.grad(self)[0] * 2.0 / Acc(n);
                                     auto av = t.value(a).data();
                                     auto bv = t.value(b).data();
                                     if (t.requires_grad(a)) {
                                       auto ga = t.grad(a.id);
                                       for (std::size_t i = 0; i < n; ++i) ga[i] += T(g * (Acc(av[i]) - Acc(bv[i])));
                                     }
                                     if (t.requires_grad(b)) {
                                       auto gb = t.grad(b.id);
                                       for (std::size_t i = 0; i < n; ++i) gb[i] -= T(g * (Acc(av[i]) - Acc(bv[i])));
                                     }
                                   });
}

}  // namespace tilediff::ad
