#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "evdepth/core/ops.hpp"
#include "evdepth/core/rng.hpp"
#include "evdepth/core/tensor.hpp"

namespace evdepth {

template <typename T>
struct GradCheckReport {
  T max_rel_err = T(0);
  int64_t worst_index = -1;
  T analytic_at_worst = T(0);
  T numeric_at_worst = T(0);
  int64_t coords_checked = 0;
};

// Central finite-difference check of d f(x) / dx against the tape gradient.
// f must be a deterministic scalar function of x. When max_coords >= 0 and
// the tensor is larger, a deterministic random subset of coordinates is
// probed (seeded so repeated runs check the same subset).
template <typename T, typename F>
GradCheckReport<T> grad_check(F&& f, Tensor<T> x, T h,
                              int64_t max_coords = -1, uint64_t seed = 7) {
  // Analytic pass.
  Tensor<T> xg = x.detach();
  xg.set_requires_grad(true);
  std::vector<T> analytic;
  {
    Tape<T> tape;
    TapeScope<T> scope(tape);
    Tensor<T> y = f(xg);
    if (y.numel() != 1)
      throw ShapeError("grad_check: f must return a scalar, got " +
                       shape_str(y.shape()));
    if (!std::isfinite(static_cast<double>(y.item())))
      throw NumericError("grad_check: non-finite output in analytic pass");
    tape.backward(y);
    analytic.assign(xg.grad(), xg.grad() + xg.numel());
  }

  // Coordinate subset.
  const int64_t n = x.numel();
  std::vector<int64_t> coords;
  if (max_coords < 0 || n <= max_coords) {
    coords.resize(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) coords[static_cast<size_t>(i)] = i;
  } else {
    Rng rng(seed);
    std::vector<int64_t> all(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) all[static_cast<size_t>(i)] = i;
    for (int64_t i = 0; i < max_coords; ++i) {
      const int64_t j = i + rng.next_index(n - i);
      std::swap(all[static_cast<size_t>(i)], all[static_cast<size_t>(j)]);
    }
    coords.assign(all.begin(), all.begin() + max_coords);
  }

  GradCheckReport<T> rep;
  rep.coords_checked = static_cast<int64_t>(coords.size());
  Tensor<T> xp = x.detach();
  for (int64_t ci : coords) {
    const T keep = xp.data()[ci];
    xp.data()[ci] = keep + h;
    const T fp = f(xp).item();
    xp.data()[ci] = keep - h;
    const T fm = f(xp).item();
    xp.data()[ci] = keep;
    if (!std::isfinite(static_cast<double>(fp)) ||
        !std::isfinite(static_cast<double>(fm)))
      throw NumericError("grad_check: non-finite output at coordinate " +
                         std::to_string(ci));
    const T numeric = (fp - fm) / (T(2) * h);
    const T a = analytic[static_cast<size_t>(ci)];
    const T denom = std::max(
        {std::abs(a), std::abs(numeric), static_cast<T>(1e-8)});
    const T rel = std::abs(a - numeric) / denom;
    if (rel > rep.max_rel_err) {
      rep.max_rel_err = rel;
      rep.worst_index = ci;
      rep.analytic_at_worst = a;
      rep.numeric_at_worst = numeric;
    }
  }
  return rep;
}

}  // namespace evdepth
