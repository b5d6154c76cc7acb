#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "evdepth/core/error.hpp"

namespace evdepth {

enum class DepthScale { kMetric, kNormalizedLog };

// Per-pixel depth with a validity mask. `values` is row-major, row 0 at the
// top. Metric maps are meters; normalized maps live in (0,1) log space.
template <typename T>
struct DepthMap {
  int width = 0;
  int height = 0;
  DepthScale scale = DepthScale::kMetric;
  std::vector<T> values;
  std::vector<uint8_t> mask;

  DepthMap() = default;
  DepthMap(int w, int h, DepthScale s = DepthScale::kMetric)
      : width(w), height(h), scale(s),
        values(static_cast<size_t>(w) * h, T(0)),
        mask(static_cast<size_t>(w) * h, 0) {}

  int64_t numel() const { return static_cast<int64_t>(values.size()); }
  T& at(int y, int x) { return values[static_cast<size_t>(y) * width + x]; }
  T at(int y, int x) const { return values[static_cast<size_t>(y) * width + x]; }
};

// Depth codec between normalized (0,1) log space and meters:
//   D = d_max * exp(alpha * (v - 1)),   v = 1 + ln(D / d_max) / alpha
// With alpha = ln(40) the normalized range [0,1] spans [d_max/40, d_max].
struct DepthCodec {
  double d_max = 80.0;
  double alpha = std::log(40.0);

  double decode(double v) const {
    if (!(v >= 0.0 && v <= 1.0))
      throw ValueError("depth decode: normalized value " + std::to_string(v) +
                       " outside [0,1]");
    return d_max * std::exp(alpha * (v - 1.0));
  }

  double encode(double meters) const {
    if (!(meters > 0.0))
      throw ValueError("depth encode: metric depth must be > 0, got " +
                       std::to_string(meters));
    return 1.0 + std::log(meters / d_max) / alpha;
  }

  // log(D) as an affine map of the normalized value: log(decode(v)).
  double log_depth_mul() const { return alpha; }
  double log_depth_add() const { return std::log(d_max) - alpha; }
};

// Validity rule for ground truth: finite, deeper than 0.1 m, within d_max.
template <typename T>
std::vector<uint8_t> valid_depth_mask(const DepthMap<T>& gt,
                                      double d_max = 80.0) {
  std::vector<uint8_t> m(gt.values.size(), 0);
  for (size_t i = 0; i < gt.values.size(); ++i) {
    const double v = static_cast<double>(gt.values[i]);
    m[i] = gt.mask[i] && std::isfinite(v) && v > 0.1 && v <= d_max;
  }
  return m;
}

}  // namespace evdepth
