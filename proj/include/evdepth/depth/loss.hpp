#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "evdepth/core/ops.hpp"
#include "evdepth/core/tensor.hpp"

namespace evdepth {

// Scale-invariant log-depth loss. With d_i = pred_log_i - gt_log_i over the
// n valid pixels:
//   L = (1/n) sum d_i^2 - (lambda/n^2) (sum d_i)^2
// lambda = 1 is fully scale-invariant; 0 is plain mean squared log error.
template <typename T>
Tensor<T> scale_invariant_loss(const Tensor<T>& pred_log,
                               const Tensor<T>& gt_log, const Tensor<T>& mask,
                               T lambda) {
  if (pred_log.shape() != gt_log.shape() || pred_log.shape() != mask.shape())
    throw ShapeError("scale_invariant_loss: shape mismatch " +
                     shape_str(pred_log.shape()) + " vs " +
                     shape_str(gt_log.shape()) + " vs " +
                     shape_str(mask.shape()));
  T n = T(0);
  for (int64_t i = 0; i < mask.numel(); ++i) n += mask.data()[i];
  if (n < T(1)) throw ValueError("scale_invariant_loss: empty mask");
  auto d = mul(sub(pred_log, gt_log), mask);
  auto sq_term = scale(sum(mul(d, d)), T(1) / n);
  auto s = sum(d);
  auto mean_term = scale(mul(s, s), lambda / (n * n));
  return sub(sq_term, mean_term);
}

// Multi-scale gradient matching on the masked log-depth difference. At each
// dyadic scale the mean of |∇x d| and |∇y d| is taken over pixel pairs whose
// two endpoints are both valid; coarser scales only keep 2x2 blocks that were
// fully valid. Scale contributions are summed.
template <typename T>
Tensor<T> gradient_matching_loss(const Tensor<T>& pred_log,
                                 const Tensor<T>& gt_log,
                                 const Tensor<T>& mask, int scales = 4) {
  if (pred_log.rank() != 2)
    throw ShapeError("gradient_matching_loss: need [H,W], got " +
                     shape_str(pred_log.shape()));
  if (pred_log.shape() != gt_log.shape() || pred_log.shape() != mask.shape())
    throw ShapeError("gradient_matching_loss: shape mismatch");
  {
    T n = T(0);
    for (int64_t i = 0; i < mask.numel(); ++i) n += mask.data()[i];
    if (n < T(1)) throw ValueError("gradient_matching_loss: empty mask");
  }
  auto d = mul(sub(pred_log, gt_log), mask);
  Tensor<T> m = mask.detach();
  Tensor<T> total = Tensor<T>::scalar(T(0));
  for (int s = 0; s < scales; ++s) {
    const int64_t H = d.dim(0), W = d.dim(1);
    for (int axis : {1, 0}) {
      const int64_t len = d.dim(axis) - 1;
      if (len < 1) continue;
      auto hi = slice(d, axis, 1, len);
      auto lo = slice(d, axis, 0, len);
      // both endpoints of a pair must be valid
      Tensor<T> pair_mask(hi.shape());
      {
        const T* mv = m.data();
        T* pv = pair_mask.data();
        const int64_t stride = axis == 1 ? 1 : W;
        int64_t k = 0;
        const int64_t rows = axis == 1 ? H : 1;
        const int64_t cols_h = axis == 1 ? len : len * W;
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t c = 0; c < cols_h; ++c, ++k) {
            const int64_t base = axis == 1 ? r * W + c : c;
            pv[k] = mv[base] * mv[base + stride];
          }
      }
      T pairs = T(0);
      for (int64_t i = 0; i < pair_mask.numel(); ++i)
        pairs += pair_mask.data()[i];
      if (pairs < T(1)) continue;
      auto g = mul(evdepth::abs(sub(hi, lo)), pair_mask);
      total = add(total, scale(sum(g), T(1) / pairs));
    }
    if (s + 1 < scales) {
      if (H % 2 != 0 || W % 2 != 0) break;
      auto dm = avg_pool2d_2x2(d);
      Tensor<T> m2({H / 2, W / 2});
      const T* mv = m.data();
      T* m2v = m2.data();
      for (int64_t y = 0; y < H / 2; ++y)
        for (int64_t x = 0; x < W / 2; ++x) {
          const T q = mv[(2 * y) * W + 2 * x] + mv[(2 * y) * W + 2 * x + 1] +
                      mv[(2 * y + 1) * W + 2 * x] +
                      mv[(2 * y + 1) * W + 2 * x + 1];
          m2v[y * (W / 2) + x] = q == T(4) ? T(1) : T(0);
        }
      d = mul(dm, m2);
      m = m2;
    }
  }
  return total;
}

}  // namespace evdepth
