#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <initializer_list>
#include <string>
#include <vector>

#include "evdepth/core/tensor.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace evdepth {

// ---------------------------------------------------------------------------
// helpers

template <typename T>
inline void maybe_check_finite(const char* op, const Tensor<T>& t) {
  if (!debug_check_finite()) return;
  const T* v = t.data();
  const int64_t n = t.numel();
  for (int64_t i = 0; i < n; ++i) {
    if (!std::isfinite(static_cast<double>(v[i])))
      throw NumericError(std::string(op) + ": non-finite value at flat index " +
                         std::to_string(i));
  }
}

template <typename T>
inline bool grad_enabled(std::initializer_list<const Tensor<T>*> ins) {
  if (!Tape<T>::current()) return false;
  for (const Tensor<T>* p : ins)
    if (p->defined() && p->requires_grad()) return true;
  return false;
}

inline Shape broadcast_shapes(const char* op, const Shape& a, const Shape& b) {
  const size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (size_t i = 0; i < r; ++i) {
    const int64_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const int64_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1)
      throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " +
                       shape_str(b) + " are not broadcastable");
    out[i] = std::max(da, db);
  }
  return out;
}

// Calls body(i_out, i_a, i_b) for every element of `out_shape` in row-major
// order; i_a/i_b follow numpy broadcasting of the two operand shapes.
template <typename Body>
inline void for_each_broadcast(const Shape& out_shape, const Shape& a_shape,
                               const Shape& b_shape, Body&& body) {
  const int r = static_cast<int>(out_shape.size());
  Shape sa(r, 0), sb(r, 0);
  {
    const Shape ast = strides_of(a_shape);
    const Shape bst = strides_of(b_shape);
    const int oa = r - static_cast<int>(a_shape.size());
    const int ob = r - static_cast<int>(b_shape.size());
    for (int i = 0; i < r; ++i) {
      if (i >= oa && a_shape[i - oa] != 1) sa[i] = ast[i - oa];
      if (i >= ob && b_shape[i - ob] != 1) sb[i] = bst[i - ob];
    }
  }
  std::vector<int64_t> idx(r, 0);
  const int64_t n = numel_of(out_shape);
  int64_t ia = 0, ib = 0;
  for (int64_t io = 0; io < n; ++io) {
    body(io, ia, ib);
    for (int ax = r - 1; ax >= 0; --ax) {
      ++idx[ax];
      ia += sa[ax];
      ib += sb[ax];
      if (idx[ax] < out_shape[ax]) break;
      idx[ax] = 0;
      ia -= sa[ax] * out_shape[ax];
      ib -= sb[ax] * out_shape[ax];
    }
  }
}

// ---------------------------------------------------------------------------
// elementwise unary

// f: value -> value; df: (x, y) -> dy/dx
template <typename T, typename F, typename DF>
inline Tensor<T> unary_elementwise(const char* name, const Tensor<T>& x, F f,
                                   DF df) {
  Tensor<T> y(x.shape());
  const T* xv = x.data();
  T* yv = y.data();
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) yv[i] = f(xv[i]);
  maybe_check_finite(name, y);
  if (grad_enabled<T>({&x})) {
    y.set_requires_grad(true);
    Tensor<T> xc = x, yc = y;
    Tape<T>::current()->record([xc, yc, df]() mutable {
      if (!yc.has_grad()) return;
      const T* gy = yc.grad();
      const T* xv2 = xc.data();
      const T* yv2 = yc.data();
      T* gx = xc.grad();
      const int64_t m = xc.numel();
      for (int64_t i = 0; i < m; ++i) gx[i] += gy[i] * df(xv2[i], yv2[i]);
    });
  }
  return y;
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  return unary_elementwise<T>(
      "exp", x, [](T v) { return std::exp(v); },
      [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
  return unary_elementwise<T>(
      "log", x, [](T v) { return std::log(v); },
      [](T v, T) { return T(1) / v; });
}

template <typename T>
Tensor<T> abs(const Tensor<T>& x) {
  return unary_elementwise<T>(
      "abs", x, [](T v) { return std::abs(v); },
      [](T v, T) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return unary_elementwise<T>(
      "sigmoid", x,
      [](T v) {
        if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

// elu(x) = x for x >= 0, exp(x) - 1 for x < 0
template <typename T>
Tensor<T> elu(const Tensor<T>& x) {
  return unary_elementwise<T>(
      "elu", x, [](T v) { return v >= T(0) ? v : std::exp(v) - T(1); },
      [](T v, T y) { return v >= T(0) ? T(1) : y + T(1); });
}

// exact gelu: x * Phi(x) with Phi the standard normal CDF
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  return unary_elementwise<T>(
      "gelu", x,
      [=](T v) {
        const double d = static_cast<double>(v);
        return static_cast<T>(d * 0.5 * (1.0 + std::erf(d * kInvSqrt2)));
      },
      [=](T v, T) {
        const double d = static_cast<double>(v);
        const double cdf = 0.5 * (1.0 + std::erf(d * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * d * d);
        return static_cast<T>(cdf + d * pdf);
      });
}

// y = mul * x + add
template <typename T>
Tensor<T> affine(const Tensor<T>& x, T mul, T add) {
  return unary_elementwise<T>(
      "affine", x, [=](T v) { return mul * v + add; },
      [=](T, T) { return mul; });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T c) {
  return affine(x, c, T(0));
}

template <typename T>
Tensor<T> neg(const Tensor<T>& x) {
  return affine(x, T(-1), T(0));
}

// ---------------------------------------------------------------------------
// elementwise binary with numpy-style broadcasting

// f(av, bv) -> y; dfa(av, bv) and dfb(av, bv) are the partials.
template <typename T, typename F, typename DFA, typename DFB>
inline Tensor<T> binary_elementwise(const char* name, const Tensor<T>& a,
                                    const Tensor<T>& b, F f, DFA dfa, DFB dfb) {
  const Shape os = broadcast_shapes(name, a.shape(), b.shape());
  Tensor<T> y(os);
  const T* av = a.data();
  const T* bv = b.data();
  T* yv = y.data();
  if (a.shape() == b.shape()) {
    const int64_t n = y.numel();
    for (int64_t i = 0; i < n; ++i) yv[i] = f(av[i], bv[i]);
  } else {
    for_each_broadcast(os, a.shape(), b.shape(),
                       [&](int64_t io, int64_t ia, int64_t ib) {
                         yv[io] = f(av[ia], bv[ib]);
                       });
  }
  maybe_check_finite(name, y);
  if (grad_enabled<T>({&a, &b})) {
    y.set_requires_grad(true);
    Tensor<T> ac = a, bc = b, yc = y;
    Tape<T>::current()->record([ac, bc, yc, dfa, dfb]() mutable {
      if (!yc.has_grad()) return;
      const T* gy = yc.grad();
      const T* av2 = ac.data();
      const T* bv2 = bc.data();
      const bool need_a = ac.requires_grad();
      const bool need_b = bc.requires_grad();
      T* ga = need_a ? ac.grad() : nullptr;
      T* gb = need_b ? bc.grad() : nullptr;
      if (ac.shape() == bc.shape()) {
        const int64_t n = yc.numel();
        for (int64_t i = 0; i < n; ++i) {
          if (need_a) ga[i] += gy[i] * dfa(av2[i], bv2[i]);
          if (need_b) gb[i] += gy[i] * dfb(av2[i], bv2[i]);
        }
      } else {
        for_each_broadcast(yc.shape(), ac.shape(), bc.shape(),
                           [&](int64_t io, int64_t ia, int64_t ib) {
                             if (need_a) ga[ia] += gy[io] * dfa(av2[ia], bv2[ib]);
                             if (need_b) gb[ib] += gy[io] * dfb(av2[ia], bv2[ib]);
                           });
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_elementwise<T>(
      "add", a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
      [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_elementwise<T>(
      "sub", a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
      [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_elementwise<T>(
      "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; },
      [](T x, T) { return x; });
}

// ---------------------------------------------------------------------------
// matmul

namespace detail {

// c[B,M,N] += a[.,M,K] * b[.,K,N]; broadcast flags select a/b batch stride 0.
template <typename T>
inline void bmm_nn(const T* a, const T* b, T* c, int64_t B, int64_t M,
                   int64_t K, int64_t N, bool abc, bool bbc) {
  const int64_t rows = B * M;
  const bool par = rows * K * N > (int64_t(1) << 15);
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (par)
#endif
  for (int64_t rm = 0; rm < rows; ++rm) {
    const int64_t batch = rm / M, m = rm % M;
    const T* arow = a + (abc ? 0 : batch * M * K) + m * K;
    const T* bb = b + (bbc ? 0 : batch * K * N);
    T* crow = c + rm * N;
    for (int64_t k = 0; k < K; ++k) {
      const T av = arow[k];
      const T* brow = bb + k * N;
      for (int64_t n = 0; n < N; ++n) crow[n] += av * brow[n];
    }
  }
  (void)par;
}

// da[B,M,K] += dc[B,M,N] * b[.,K,N]^T  (da has full batch)
template <typename T>
inline void bmm_nt_full(const T* dc, const T* b, T* da, int64_t B, int64_t M,
                        int64_t N, int64_t K, bool bbc) {
  const int64_t rows = B * M;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (rows * K * N > (int64_t(1) << 15))
#endif
  for (int64_t rm = 0; rm < rows; ++rm) {
    const int64_t batch = rm / M, m = rm % M;
    const T* crow = dc + rm * N;
    const T* bb = b + (bbc ? 0 : batch * K * N);
    T* arow = da + (batch * M + m) * K;
    for (int64_t k = 0; k < K; ++k) {
      const T* brow = bb + k * N;
      T acc = T(0);
      for (int64_t n = 0; n < N; ++n) acc += crow[n] * brow[n];
      arow[k] += acc;
    }
  }
}

// da[M,K] += sum_b dc[B,M,N] * b[B,K,N]^T  (a was broadcast over batches)
template <typename T>
inline void bmm_nt_reduce(const T* dc, const T* b, T* da, int64_t B, int64_t M,
                          int64_t N, int64_t K) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (B * M * K * N > (int64_t(1) << 15))
#endif
  for (int64_t m = 0; m < M; ++m) {
    T* arow = da + m * K;
    for (int64_t batch = 0; batch < B; ++batch) {
      const T* crow = dc + (batch * M + m) * N;
      const T* bb = b + batch * K * N;
      for (int64_t k = 0; k < K; ++k) {
        const T* brow = bb + k * N;
        T acc = T(0);
        for (int64_t n = 0; n < N; ++n) acc += crow[n] * brow[n];
        arow[k] += acc;
      }
    }
  }
}

// db[B,K,N] += a[.,M,K]^T * dc[B,M,N]  (db has full batch)
template <typename T>
inline void bmm_tn_full(const T* a, const T* dc, T* db, int64_t B, int64_t M,
                        int64_t K, int64_t N, bool abc) {
  const int64_t rows = B * K;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (rows * M * N > (int64_t(1) << 15))
#endif
  for (int64_t rk = 0; rk < rows; ++rk) {
    const int64_t batch = rk / K, k = rk % K;
    const T* ab = a + (abc ? 0 : batch * M * K);
    const T* cb = dc + batch * M * N;
    T* brow = db + rk * N;
    for (int64_t m = 0; m < M; ++m) {
      const T av = ab[m * K + k];
      const T* crow = cb + m * N;
      for (int64_t n = 0; n < N; ++n) brow[n] += av * crow[n];
    }
  }
}

// db[K,N] += sum_b a[B,M,K]^T * dc[B,M,N]  (b was broadcast over batches)
template <typename T>
inline void bmm_tn_reduce(const T* a, const T* dc, T* db, int64_t B, int64_t M,
                          int64_t K, int64_t N) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (B * M * K * N > (int64_t(1) << 15))
#endif
  for (int64_t k = 0; k < K; ++k) {
    T* brow = db + k * N;
    for (int64_t bm = 0; bm < B * M; ++bm) {
      const T av = a[bm * K + k];
      const T* crow = dc + bm * N;
      for (int64_t n = 0; n < N; ++n) brow[n] += av * crow[n];
    }
  }
}

}  // namespace detail

// a[..,M,K] x b[..,K,N] -> [..,M,N]. Batch dims must match exactly, or one
// operand is rank-2 and is broadcast over the other's batch dims.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2)
    throw ShapeError("matmul: operands must have rank >= 2, got " +
                     shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const int64_t M = a.dim(a.rank() - 2);
  const int64_t K = a.dim(a.rank() - 1);
  const int64_t Kb = b.dim(b.rank() - 2);
  const int64_t N = b.dim(b.rank() - 1);
  if (K != Kb)
    throw ShapeError("matmul: inner dimensions disagree: " +
                     shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Shape batch;
  bool abc = false, bbc = false;  // broadcast flags
  if (a.rank() > 2 && b.rank() > 2) {
    Shape ba(a.shape().begin(), a.shape().end() - 2);
    Shape bb(b.shape().begin(), b.shape().end() - 2);
    if (ba != bb)
      throw ShapeError("matmul: batch dimensions disagree: " +
                       shape_str(a.shape()) + " x " + shape_str(b.shape()));
    batch = ba;
  } else if (a.rank() > 2) {
    batch = Shape(a.shape().begin(), a.shape().end() - 2);
    bbc = batch.size() > 0;
  } else if (b.rank() > 2) {
    batch = Shape(b.shape().begin(), b.shape().end() - 2);
    abc = batch.size() > 0;
  }
  const int64_t B = numel_of(batch);
  Shape os = batch;
  os.push_back(M);
  os.push_back(N);
  Tensor<T> y(os);
  detail::bmm_nn(a.data(), b.data(), y.data(), B, M, K, N, abc, bbc);
  maybe_check_finite("matmul", y);
  if (grad_enabled<T>({&a, &b})) {
    y.set_requires_grad(true);
    Tensor<T> ac = a, bc = b, yc = y;
    Tape<T>::current()->record([ac, bc, yc, B, M, K, N, abc, bbc]() mutable {
      if (!yc.has_grad()) return;
      const T* gy = yc.grad();
      if (ac.requires_grad()) {
        T* ga = ac.grad();
        if (abc)
          detail::bmm_nt_reduce(gy, bc.data(), ga, B, M, N, K);
        else
          detail::bmm_nt_full(gy, bc.data(), ga, B, M, N, K, bbc);
      }
      if (bc.requires_grad()) {
        T* gb = bc.grad();
        if (bbc)
          detail::bmm_tn_reduce(ac.data(), gy, gb, B, M, K, N);
        else
          detail::bmm_tn_full(ac.data(), gy, gb, B, M, K, N, abc);
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// softmax over the last axis, with optional additive mask (0 / -LARGE)

template <typename T>
Tensor<T> softmax_lastaxis(const Tensor<T>& x, const Tensor<T>& mask = {}) {
  const int64_t C = x.dim(x.rank() - 1);
  const int64_t rows = x.numel() / C;
  Tensor<T> z = x;
  if (mask.defined()) {
    broadcast_shapes("softmax mask", x.shape(), mask.shape());
    const Shape bs = broadcast_shapes("softmax mask", x.shape(), mask.shape());
    if (bs != x.shape())
      throw ShapeError("softmax: mask " + shape_str(mask.shape()) +
                       " must broadcast to input " + shape_str(x.shape()));
    Tensor<T> zm(x.shape());
    const T* xv = x.data();
    const T* mv = mask.data();
    T* zv = zm.data();
    for_each_broadcast(x.shape(), x.shape(), mask.shape(),
                       [&](int64_t io, int64_t ia, int64_t ib) {
                         zv[io] = xv[ia] + mv[ib];
                       });
    z = zm;
  }
  Tensor<T> y(x.shape());
  const T* zv = z.data();
  T* yv = y.data();
  for (int64_t r = 0; r < rows; ++r) {
    const T* zr = zv + r * C;
    T* yr = yv + r * C;
    T mx = zr[0];
    for (int64_t i = 1; i < C; ++i) mx = std::max(mx, zr[i]);
    T s = T(0);
    for (int64_t i = 0; i < C; ++i) {
      yr[i] = std::exp(zr[i] - mx);
      s += yr[i];
    }
    const T inv = T(1) / s;
    for (int64_t i = 0; i < C; ++i) yr[i] *= inv;
  }
  maybe_check_finite("softmax", y);
  if (grad_enabled<T>({&x})) {
    y.set_requires_grad(true);
    Tensor<T> xc = x, yc = y;
    Tape<T>::current()->record([xc, yc, rows, C]() mutable {
      if (!yc.has_grad()) return;
      const T* gy = yc.grad();
      const T* yv2 = yc.data();
      T* gx = xc.grad();
      for (int64_t r = 0; r < rows; ++r) {
        const T* yr = yv2 + r * C;
        const T* gr = gy + r * C;
        T* xr = gx + r * C;
        T dot = T(0);
        for (int64_t i = 0; i < C; ++i) dot += gr[i] * yr[i];
        for (int64_t i = 0; i < C; ++i) xr[i] += yr[i] * (gr[i] - dot);
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// layer norm over the last axis (biased variance), then affine

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain,
                     const Tensor<T>& bias, T eps) {
  if (eps <= T(0)) throw ValueError("layer_norm: eps must be > 0");
  const int64_t C = x.dim(x.rank() - 1);
  if (gain.numel() != C || bias.numel() != C)
    throw ShapeError("layer_norm: gain/bias length " +
                     std::to_string(gain.numel()) + "/" +
                     std::to_string(bias.numel()) +
                     " does not match last axis of " + shape_str(x.shape()));
  const int64_t rows = x.numel() / C;
  Tensor<T> y(x.shape());
  const T* xv = x.data();
  const T* gv = gain.data();
  const T* bv = bias.data();
  T* yv = y.data();
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = xv + r * C;
    T* yr = yv + r * C;
    T mu = T(0);
    for (int64_t i = 0; i < C; ++i) mu += xr[i];
    mu /= static_cast<T>(C);
    T var = T(0);
    for (int64_t i = 0; i < C; ++i) var += (xr[i] - mu) * (xr[i] - mu);
    var /= static_cast<T>(C);
    const T inv = T(1) / std::sqrt(var + eps);
    for (int64_t i = 0; i < C; ++i) yr[i] = (xr[i] - mu) * inv * gv[i] + bv[i];
  }
  maybe_check_finite("layer_norm", y);
  if (grad_enabled<T>({&x, &gain, &bias})) {
    y.set_requires_grad(true);
    Tensor<T> xc = x, gc = gain, bc = bias, yc = y;
    Tape<T>::current()->record([xc, gc, bc, yc, rows, C, eps]() mutable {
      if (!yc.has_grad()) return;
      const T* gy = yc.grad();
      const T* xv2 = xc.data();
      const T* gv2 = gc.data();
      const bool need_x = xc.requires_grad();
      const bool need_g = gc.requires_grad();
      const bool need_b = bc.requires_grad();
      T* gx = need_x ? xc.grad() : nullptr;
      T* gg = need_g ? gc.grad() : nullptr;
      T* gb = need_b ? bc.grad() : nullptr;
      for (int64_t r = 0; r < rows; ++r) {
        const T* xr = xv2 + r * C;
        const T* gr = gy + r * C;
        T mu = T(0);
        for (int64_t i = 0; i < C; ++i) mu += xr[i];
        mu /= static_cast<T>(C);
        T var = T(0);
        for (int64_t i = 0; i < C; ++i) var += (xr[i] - mu) * (xr[i] - mu);
        var /= static_cast<T>(C);
        const T inv = T(1) / std::sqrt(var + eps);
        if (need_g || need_b) {
          for (int64_t i = 0; i < C; ++i) {
            if (need_g) gg[i] += gr[i] * (xr[i] - mu) * inv;
            if (need_b) gb[i] += gr[i];
          }
        }
        if (need_x) {
          T sum_dxhat = T(0), sum_dxhat_xhat = T(0);
          for (int64_t i = 0; i < C; ++i) {
            const T dxhat = gr[i] * gv2[i];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * (xr[i] - mu) * inv;
          }
          for (int64_t i = 0; i < C; ++i) {
            const T xhat = (xr[i] - mu) * inv;
            const T dxhat = gr[i] * gv2[i];
            gx[r * C + i] += inv * (dxhat - sum_dxhat / static_cast<T>(C) -
                                    xhat * sum_dxhat_xhat / static_cast<T>(C));
          }
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// shape ops

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel_of(shape) != x.numel())
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                     shape_str(shape));
  Tensor<T> y = Tensor<T>::from(std::move(shape), x.values());
  if (grad_enabled<T>({&x})) {
    y.set_requires_grad(true);
    Tensor<T> xc = x, yc = y;
    Tape<T>::current()->record([xc, yc]() mutable {
      if (!yc.has_grad()) return;
      const T* gy = yc.grad();
      T* gx = xc.grad();
      const int64_t n = xc.numel();
      for (int64_t i = 0; i < n; ++i) gx[i] += gy[i];
    });
  }
  return y;
}

namespace detail {

// out[o] = in[map(o)] where map permutes axes; runs body over all elements.
inline void permute_map(const Shape& in_shape, const std::vector<int>& perm,
                        Shape* out_shape, Shape* in_stride_for_out_axis) {
  const int r = static_cast<int>(in_shape.size());
  const Shape ist = strides_of(in_shape);
  out_shape->resize(r);
  in_stride_for_out_axis->resize(r);
  for (int i = 0; i < r; ++i) {
    (*out_shape)[i] = in_shape[perm[i]];
    (*in_stride_for_out_axis)[i] = ist[perm[i]];
  }
}

template <typename Body>
inline void for_each_strided(const Shape& out_shape, const Shape& in_strides,
                             Body&& body) {
  const int r = static_cast<int>(out_shape.size());
  std::vector<int64_t> idx(r, 0);
  const int64_t n = numel_of(out_shape);
  int64_t ii = 0;
  for (int64_t io = 0; io < n; ++io) {
    body(io, ii);
    for (int ax = r - 1; ax >= 0; --ax) {
      ++idx[ax];
      ii += in_strides[ax];
      if (idx[ax] < out_shape[ax]) break;
      idx[ax] = 0;
      ii -= in_strides[ax] * out_shape[ax];
    }
  }
}

}  // namespace detail

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<int>& perm) {
  const int r = x.rank();
  if (static_cast<int>(perm.size()) != r)
    throw ShapeError("permute: perm size " + std::to_string(perm.size()) +
                     " vs rank " + std::to_string(r));
  std::vector<char> seen(r, 0);
  for (int p : perm) {
    if (p < 0 || p >= r || seen[p])
      throw ShapeError("permute: invalid permutation for rank " +
                       std::to_string(r));
    seen[p] = 1;
  }
  Shape os, ist;
  detail::permute_map(x.shape(), perm, &os, &ist);
  Tensor<T> y(os);
  const T* xv = x.data();
  T* yv = y.data();
  detail::for_each_strided(os, ist,
                           [&](int64_t io, int64_t ii) { yv[io] = xv[ii]; });
  if (grad_enabled<T>({&x})) {
    y.set_requires_grad(true);
    Tensor<T> xc = x, yc = y;
    Tape<T>::current()->record([xc, yc, os, ist]() mutable {
      if (!yc.has_grad()) return;
      const T* gy = yc.grad();
      T* gx = xc.grad();
      detail::for_each_strided(
          os, ist, [&](int64_t io, int64_t ii) { gx[ii] += gy[io]; });
    });
  }
  return y;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x, int ax0, int ax1) {
  std::vector<int> perm(static_cast<size_t>(x.rank()));
  for (int i = 0; i < x.rank(); ++i) perm[static_cast<size_t>(i)] = i;
  if (ax0 < 0 || ax0 >= x.rank() || ax1 < 0 || ax1 >= x.rank())
    throw ShapeError("transpose: axis out of range for rank " +
                     std::to_string(x.rank()));
  std::swap(perm[static_cast<size_t>(ax0)], perm[static_cast<size_t>(ax1)]);
  return permute(x, perm);
}

// cyclic shift along one axis; shift may be negative
template <typename T>
Tensor<T> roll(const Tensor<T>& x, int axis, int64_t shift) {
  if (axis < 0 || axis >= x.rank())
    throw ShapeError("roll: axis " + std::to_string(axis) +
                     " out of range for " + shape_str(x.shape()));
  const int64_t D = x.dim(axis);
  const int64_t sh = ((shift % D) + D) % D;
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  for (int i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  Tensor<T> y(x.shape());
  const T* xv = x.data();
  T* yv = y.data();
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t d = 0; d < D; ++d) {
      const int64_t src = (d - sh + D) % D;
      std::memcpy(yv + (o * D + d) * inner, xv + (o * D + src) * inner,
                  sizeof(T) * static_cast<size_t>(inner));
    }
  }
  if (grad_enabled<T>({&x})) {
    y.set_requires_grad(true);
    Tensor<T> xc = x, yc = y;
    Tape<T>::current()->record([xc, yc, outer, D, inner, sh]() mutable {
      if (!yc.has_grad()) return;
      const T* gy = yc.grad();
      T* gx = xc.grad();
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t d = 0; d < D; ++d) {
          const int64_t src = (d - sh + D) % D;
          const T* gyr = gy + (o * D + d) * inner;
          T* gxr = gx + (o * D + src) * inner;
          for (int64_t i = 0; i < inner; ++i) gxr[i] += gyr[i];
        }
    });
  }
  return y;
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, int axis, int64_t start, int64_t len) {
  if (axis < 0 || axis >= x.rank())
    throw ShapeError("slice: axis " + std::to_string(axis) +
                     " out of range for " + shape_str(x.shape()));
  const int64_t D = x.dim(axis);
  if (start < 0 || len < 0 || start + len > D)
    throw ShapeError("slice: range [" + std::to_string(start) + "," +
                     std::to_string(start + len) + ") out of bounds for axis " +
                     std::to_string(axis) + " of " + shape_str(x.shape()));
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  for (int i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  Shape os = x.shape();
  os[static_cast<size_t>(axis)] = len;
  Tensor<T> y(os);
  const T* xv = x.data();
  T* yv = y.data();
  for (int64_t o = 0; o < outer; ++o)
    std::memcpy(yv + o * len * inner, xv + (o * D + start) * inner,
                sizeof(T) * static_cast<size_t>(len * inner));
  if (grad_enabled<T>({&x})) {
    y.set_requires_grad(true);
    Tensor<T> xc = x, yc = y;
    Tape<T>::current()->record([xc, yc, outer, D, inner, start, len]() mutable {
      if (!yc.has_grad()) return;
      const T* gy = yc.grad();
      T* gx = xc.grad();
      for (int64_t o = 0; o < outer; ++o) {
        const T* gyr = gy + o * len * inner;
        T* gxr = gx + (o * D + start) * inner;
        for (int64_t i = 0; i < len * inner; ++i) gxr[i] += gyr[i];
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const int r = parts[0].rank();
  if (axis < 0 || axis >= r)
    throw ShapeError("concat: axis " + std::to_string(axis) +
                     " out of range for " + shape_str(parts[0].shape()));
  int64_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != r)
      throw ShapeError("concat: rank mismatch between " +
                       shape_str(parts[0].shape()) + " and " +
                       shape_str(p.shape()));
    for (int i = 0; i < r; ++i)
      if (i != axis && p.dim(i) != parts[0].dim(i))
        throw ShapeError("concat: incompatible shapes " +
                         shape_str(parts[0].shape()) + " and " +
                         shape_str(p.shape()) + " on axis " +
                         std::to_string(axis));
    total += p.dim(axis);
  }
  Shape os = parts[0].shape();
  os[static_cast<size_t>(axis)] = total;
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= os[static_cast<size_t>(i)];
  for (int i = axis + 1; i < r; ++i) inner *= os[static_cast<size_t>(i)];
  Tensor<T> y(os);
  T* yv = y.data();
  int64_t off = 0;
  for (const auto& p : parts) {
    const int64_t d = p.dim(axis);
    const T* pv = p.data();
    for (int64_t o = 0; o < outer; ++o)
      std::memcpy(yv + (o * total + off) * inner, pv + o * d * inner,
                  sizeof(T) * static_cast<size_t>(d * inner));
    off += d;
  }
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (Tape<T>::current() && any) {
    y.set_requires_grad(true);
    std::vector<Tensor<T>> pc = parts;
    Tensor<T> yc = y;
    Tape<T>::current()->record([pc, yc, outer, inner, total, axis]() mutable {
      if (!yc.has_grad()) return;
      const T* gy = yc.grad();
      int64_t off2 = 0;
      for (auto& p : pc) {
        const int64_t d = p.shape()[static_cast<size_t>(axis)];
        if (p.requires_grad()) {
          T* gp = p.grad();
          for (int64_t o = 0; o < outer; ++o) {
            const T* gyr = gy + (o * total + off2) * inner;
            T* gpr = gp + o * d * inner;
            for (int64_t i = 0; i < d * inner; ++i) gpr[i] += gyr[i];
          }
        }
        off2 += d;
      }
    });
  }
  return y;
}

template <typename T>
std::vector<Tensor<T>> split(const Tensor<T>& x, int axis, int64_t parts) {
  if (axis < 0 || axis >= x.rank())
    throw ShapeError("split: axis " + std::to_string(axis) +
                     " out of range for " + shape_str(x.shape()));
  const int64_t D = x.dim(axis);
  if (parts <= 0 || D % parts != 0)
    throw ShapeError("split: axis length " + std::to_string(D) +
                     " not divisible into " + std::to_string(parts) +
                     " parts");
  const int64_t step = D / parts;
  std::vector<Tensor<T>> out;
  out.reserve(static_cast<size_t>(parts));
  for (int64_t p = 0; p < parts; ++p)
    out.push_back(slice(x, axis, p * step, step));
  return out;
}

// out[i, :] = table[idx[i], :]; differentiable w.r.t. table
template <typename T>
Tensor<T> take_rows(const Tensor<T>& table, const std::vector<int64_t>& idx) {
  if (table.rank() != 2)
    throw ShapeError("take_rows: table must be rank 2, got " +
                     shape_str(table.shape()));
  const int64_t R = table.dim(0), C = table.dim(1);
  for (int64_t i : idx)
    if (i < 0 || i >= R)
      throw ShapeError("take_rows: index " + std::to_string(i) +
                       " out of range [0," + std::to_string(R) + ")");
  Tensor<T> y({static_cast<int64_t>(idx.size()), C});
  const T* tv = table.data();
  T* yv = y.data();
  for (size_t i = 0; i < idx.size(); ++i)
    std::memcpy(yv + static_cast<int64_t>(i) * C, tv + idx[i] * C,
                sizeof(T) * static_cast<size_t>(C));
  if (grad_enabled<T>({&table})) {
    y.set_requires_grad(true);
    Tensor<T> tc = table, yc = y;
    std::vector<int64_t> ic = idx;
    Tape<T>::current()->record([tc, yc, ic, C]() mutable {
      if (!yc.has_grad()) return;
      const T* gy = yc.grad();
      T* gt = tc.grad();
      for (size_t i = 0; i < ic.size(); ++i) {
        const T* gyr = gy + static_cast<int64_t>(i) * C;
        T* gtr = gt + ic[i] * C;
        for (int64_t c = 0; c < C; ++c) gtr[c] += gyr[c];
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = T(0);
  const T* xv = x.data();
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) acc += xv[i];
  Tensor<T> y = Tensor<T>::scalar(acc);
  maybe_check_finite("sum", y);
  if (grad_enabled<T>({&x})) {
    y.set_requires_grad(true);
    Tensor<T> xc = x, yc = y;
    Tape<T>::current()->record([xc, yc]() mutable {
      if (!yc.has_grad()) return;
      const T g = yc.grad()[0];
      T* gx = xc.grad();
      const int64_t m = xc.numel();
      for (int64_t i = 0; i < m; ++i) gx[i] += g;
    });
  }
  return y;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

// ---------------------------------------------------------------------------
// 2-D spatial ops on [H, W] maps

// Fixed integer factor, half-pixel centers (align_corners = false).
template <typename T>
Tensor<T> bilinear_upsample2d(const Tensor<T>& x, int factor) {
  if (x.rank() != 2)
    throw ShapeError("bilinear_upsample2d: need [H,W], got " +
                     shape_str(x.shape()));
  if (factor < 1) throw ValueError("bilinear_upsample2d: factor must be >= 1");
  const int64_t H = x.dim(0), W = x.dim(1);
  const int64_t Ho = H * factor, Wo = W * factor;
  // Precompute 1-D sample positions and weights.
  auto axis_map = [factor](int64_t out, int64_t size, int64_t* i0, int64_t* i1,
                           T* w1) {
    const double src =
        (static_cast<double>(out) + 0.5) / static_cast<double>(factor) - 0.5;
    double f = std::floor(src);
    double frac = src - f;
    int64_t a = static_cast<int64_t>(f);
    if (a < 0) {
      a = 0;
      frac = 0.0;
    }
    if (a >= size - 1) {
      a = size - 1;
      frac = 0.0;
    }
    *i0 = a;
    *i1 = std::min(a + 1, size - 1);
    *w1 = static_cast<T>(frac);
  };
  Tensor<T> y({Ho, Wo});
  const T* xv = x.data();
  T* yv = y.data();
  for (int64_t oy = 0; oy < Ho; ++oy) {
    int64_t y0, y1;
    T wy;
    axis_map(oy, H, &y0, &y1, &wy);
    for (int64_t ox = 0; ox < Wo; ++ox) {
      int64_t x0, x1;
      T wx;
      axis_map(ox, W, &x0, &x1, &wx);
      const T v00 = xv[y0 * W + x0], v01 = xv[y0 * W + x1];
      const T v10 = xv[y1 * W + x0], v11 = xv[y1 * W + x1];
      yv[oy * Wo + ox] = (T(1) - wy) * ((T(1) - wx) * v00 + wx * v01) +
                         wy * ((T(1) - wx) * v10 + wx * v11);
    }
  }
  if (grad_enabled<T>({&x})) {
    y.set_requires_grad(true);
    Tensor<T> xc = x, yc = y;
    Tape<T>::current()->record([xc, yc, H, W, Ho, Wo, axis_map]() mutable {
      if (!yc.has_grad()) return;
      const T* gy = yc.grad();
      T* gx = xc.grad();
      for (int64_t oy = 0; oy < Ho; ++oy) {
        int64_t y0, y1;
        T wy;
        axis_map(oy, H, &y0, &y1, &wy);
        for (int64_t ox = 0; ox < Wo; ++ox) {
          int64_t x0, x1;
          T wx;
          axis_map(ox, W, &x0, &x1, &wx);
          const T g = gy[oy * Wo + ox];
          gx[y0 * W + x0] += g * (T(1) - wy) * (T(1) - wx);
          gx[y0 * W + x1] += g * (T(1) - wy) * wx;
          gx[y1 * W + x0] += g * wy * (T(1) - wx);
          gx[y1 * W + x1] += g * wy * wx;
        }
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> avg_pool2d_2x2(const Tensor<T>& x) {
  if (x.rank() != 2 || x.dim(0) % 2 != 0 || x.dim(1) % 2 != 0)
    throw ShapeError("avg_pool2d_2x2: need even [H,W], got " +
                     shape_str(x.shape()));
  const int64_t H = x.dim(0), W = x.dim(1);
  const int64_t Ho = H / 2, Wo = W / 2;
  Tensor<T> y({Ho, Wo});
  const T* xv = x.data();
  T* yv = y.data();
  for (int64_t oy = 0; oy < Ho; ++oy)
    for (int64_t ox = 0; ox < Wo; ++ox) {
      const int64_t iy = oy * 2, ix = ox * 2;
      yv[oy * Wo + ox] = (xv[iy * W + ix] + xv[iy * W + ix + 1] +
                          xv[(iy + 1) * W + ix] + xv[(iy + 1) * W + ix + 1]) *
                         T(0.25);
    }
  if (grad_enabled<T>({&x})) {
    y.set_requires_grad(true);
    Tensor<T> xc = x, yc = y;
    Tape<T>::current()->record([xc, yc, H, W, Ho, Wo]() mutable {
      if (!yc.has_grad()) return;
      const T* gy = yc.grad();
      T* gx = xc.grad();
      for (int64_t oy = 0; oy < Ho; ++oy)
        for (int64_t ox = 0; ox < Wo; ++ox) {
          const T g = gy[oy * Wo + ox] * T(0.25);
          const int64_t iy = oy * 2, ix = ox * 2;
          gx[iy * W + ix] += g;
          gx[iy * W + ix + 1] += g;
          gx[(iy + 1) * W + ix] += g;
          gx[(iy + 1) * W + ix + 1] += g;
        }
    });
  }
  return y;
}

}  // namespace evdepth
