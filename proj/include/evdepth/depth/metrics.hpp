#pragma once

#include <cmath>
#include <cstdint>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "evdepth/core/error.hpp"
#include "evdepth/depth/depth_map.hpp"

namespace evdepth {

// Standard monocular depth evaluation suite plus mean absolute error at
// 10/20/30 m ground-truth cut-offs. Cut-off entries are absent (not zero)
// when no pixel falls inside the bucket.
struct MetricReport {
  double abs_rel = 0.0;
  double rmse_log = 0.0;
  double silog = 0.0;
  double delta1 = 0.0;
  double delta2 = 0.0;
  double delta3 = 0.0;
  std::optional<double> err10, err20, err30;
  int64_t n = 0;
  int64_t n10 = 0, n20 = 0, n30 = 0;
};

template <typename T>
MetricReport compute_metrics(const DepthMap<T>& pred, const DepthMap<T>& gt,
                             const std::vector<uint8_t>& mask) {
  if (pred.width != gt.width || pred.height != gt.height ||
      mask.size() != gt.values.size())
    throw ShapeError("compute_metrics: resolution mismatch");
  MetricReport r;
  double sum_abs_rel = 0, sum_sq_log = 0, sum_log = 0;
  int64_t k1 = 0, k2 = 0, k3 = 0;
  double e10 = 0, e20 = 0, e30 = 0;
  for (size_t i = 0; i < mask.size(); ++i) {
    if (!mask[i]) continue;
    const double d = static_cast<double>(pred.values[i]);
    const double g = static_cast<double>(gt.values[i]);
    if (!(d > 0.0) || !(g > 0.0))
      throw ValueError("compute_metrics: non-positive depth on a valid pixel");
    ++r.n;
    const double abs_err = std::abs(d - g);
    sum_abs_rel += abs_err / g;
    const double dl = std::log(d) - std::log(g);
    sum_sq_log += dl * dl;
    sum_log += dl;
    const double ratio = std::max(d / g, g / d);
    if (ratio < 1.25) ++k1;
    if (ratio < 1.25 * 1.25) ++k2;
    if (ratio < 1.25 * 1.25 * 1.25) ++k3;
    if (g <= 10.0) {
      e10 += abs_err;
      ++r.n10;
    }
    if (g <= 20.0) {
      e20 += abs_err;
      ++r.n20;
    }
    if (g <= 30.0) {
      e30 += abs_err;
      ++r.n30;
    }
  }
  if (r.n == 0) throw ValueError("compute_metrics: empty mask");
  const double n = static_cast<double>(r.n);
  r.abs_rel = sum_abs_rel / n;
  r.rmse_log = std::sqrt(sum_sq_log / n);
  const double mean_log = sum_log / n;
  r.silog = sum_sq_log / n - mean_log * mean_log;
  r.delta1 = static_cast<double>(k1) / n;
  r.delta2 = static_cast<double>(k2) / n;
  r.delta3 = static_cast<double>(k3) / n;
  if (r.n10 > 0) r.err10 = e10 / static_cast<double>(r.n10);
  if (r.n20 > 0) r.err20 = e20 / static_cast<double>(r.n20);
  if (r.n30 > 0) r.err30 = e30 / static_cast<double>(r.n30);
  return r;
}

// Equal-weight mean over per-bin reports; absent cut-offs are averaged over
// the reports where they exist.
inline MetricReport aggregate_metrics(const std::vector<MetricReport>& reports) {
  if (reports.empty()) throw ValueError("aggregate_metrics: no reports");
  MetricReport agg;
  double s10 = 0, s20 = 0, s30 = 0;
  int64_t c10 = 0, c20 = 0, c30 = 0;
  for (const auto& r : reports) {
    agg.abs_rel += r.abs_rel;
    agg.rmse_log += r.rmse_log;
    agg.silog += r.silog;
    agg.delta1 += r.delta1;
    agg.delta2 += r.delta2;
    agg.delta3 += r.delta3;
    agg.n += r.n;
    agg.n10 += r.n10;
    agg.n20 += r.n20;
    agg.n30 += r.n30;
    if (r.err10) {
      s10 += *r.err10;
      ++c10;
    }
    if (r.err20) {
      s20 += *r.err20;
      ++c20;
    }
    if (r.err30) {
      s30 += *r.err30;
      ++c30;
    }
  }
  const double m = static_cast<double>(reports.size());
  agg.abs_rel /= m;
  agg.rmse_log /= m;
  agg.silog /= m;
  agg.delta1 /= m;
  agg.delta2 /= m;
  agg.delta3 /= m;
  if (c10) agg.err10 = s10 / static_cast<double>(c10);
  if (c20) agg.err20 = s20 / static_cast<double>(c20);
  if (c30) agg.err30 = s30 / static_cast<double>(c30);
  return agg;
}

// Machine-readable `metric=value` lines.
inline std::string format_metric_lines(const MetricReport& r,
                                       const std::string& prefix = "") {
  std::ostringstream os;
  os << std::setprecision(9);
  os << prefix << "abs_rel=" << r.abs_rel << "\n";
  os << prefix << "rmse_log=" << r.rmse_log << "\n";
  os << prefix << "silog=" << r.silog << "\n";
  os << prefix << "delta1=" << r.delta1 << "\n";
  os << prefix << "delta2=" << r.delta2 << "\n";
  os << prefix << "delta3=" << r.delta3 << "\n";
  if (r.err10) os << prefix << "err10m=" << *r.err10 << "\n";
  if (r.err20) os << prefix << "err20m=" << *r.err20 << "\n";
  if (r.err30) os << prefix << "err30m=" << *r.err30 << "\n";
  os << prefix << "valid_pixels=" << r.n << "\n";
  return os.str();
}

inline std::string format_metric_table(
    const std::vector<std::pair<std::string, MetricReport>>& rows) {
  std::ostringstream os;
  os << std::left << std::setw(18) << "sequence" << std::right << std::setw(10)
     << "abs_rel" << std::setw(10) << "rmse_log" << std::setw(10) << "silog"
     << std::setw(8) << "d1" << std::setw(8) << "d2" << std::setw(8) << "d3"
     << std::setw(9) << "10m" << std::setw(9) << "20m" << std::setw(9) << "30m"
     << "\n";
  auto opt = [](const std::optional<double>& v) {
    if (!v) return std::string("   -");
    std::ostringstream o;
    o << std::fixed << std::setprecision(3) << *v;
    return o.str();
  };
  for (const auto& [name, r] : rows) {
    os << std::left << std::setw(18) << name << std::right << std::fixed
       << std::setprecision(4) << std::setw(10) << r.abs_rel << std::setw(10)
       << r.rmse_log << std::setw(10) << r.silog << std::setprecision(3)
       << std::setw(8) << r.delta1 << std::setw(8) << r.delta2 << std::setw(8)
       << r.delta3 << std::setw(9) << opt(r.err10) << std::setw(9)
       << opt(r.err20) << std::setw(9) << opt(r.err30) << "\n";
  }
  return os.str();
}

}  // namespace evdepth
