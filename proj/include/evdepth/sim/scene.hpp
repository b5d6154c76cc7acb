#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "evdepth/core/error.hpp"
#include "evdepth/core/rng.hpp"
#include "evdepth/depth/depth_map.hpp"
#include "evdepth/io/events.hpp"

namespace evdepth {

// Fronto-parallel textured plane at fixed metric depth. Extents and centers
// are world meters at that depth.
struct PlaneSpec {
  double depth_m = 5.0;
  uint64_t texture_seed = 0;
  double center_x = 0.0;
  double center_y = 0.0;
  double extent_x = 10.0;
  double extent_y = 10.0;
};

// Deterministic scene: planes under lateral camera translation, viewed by a
// pinhole camera with focal length in pixels (0 = sensor width).
struct SceneSpec {
  int width = 64;
  int height = 64;
  int64_t duration_us = 400000;
  double vel_x = 0.5;  // camera translation, m/s
  double vel_y = 0.0;
  std::vector<PlaneSpec> planes;
  double contrast_threshold = 0.2;  // log-intensity units
  double focal_px = 0.0;
  int frame_rate_hz = 1000;  // internal sampling rate for event generation
  int64_t bin_us = 50000;
  uint64_t seed = 0;
};

struct LabeledSequence {
  EventStream stream;
  int64_t bin_us = 0;
  std::vector<DepthMap<double>> depth;  // one metric map per bin, at bin end
};

namespace detail {

struct TextureWave {
  double kx, ky, phase, amp;
};

// Smooth band-limited texture: a few sinusoids whose pixel-space wavelength
// at the plane's depth stays in [8, 40] px.
inline std::vector<TextureWave> make_texture(const PlaneSpec& plane,
                                             double focal_px) {
  Rng rng = Rng::for_name(plane.texture_seed, "plane-texture");
  std::vector<TextureWave> waves(4);
  double amp_total = 0.0;
  for (auto& w : waves) {
    const double wavelength_px = rng.next_uniform(8.0, 40.0);
    const double wavelength_m = wavelength_px * plane.depth_m / focal_px;
    const double angle = rng.next_uniform(0.0, 3.14159265358979323846);
    const double k = 2.0 * 3.14159265358979323846 / wavelength_m;
    w.kx = k * std::cos(angle);
    w.ky = k * std::sin(angle);
    w.phase = rng.next_uniform(0.0, 6.28318530717958647692);
    w.amp = rng.next_uniform(0.5, 1.0);
    amp_total += w.amp;
  }
  for (auto& w : waves) w.amp *= 0.42 / amp_total;
  return waves;
}

inline double texture_value(const std::vector<TextureWave>& waves, double x,
                            double y) {
  double v = 0.55;
  for (const auto& w : waves)
    v += w.amp * std::sin(w.kx * x + w.ky * y + w.phase);
  return v;
}

inline void validate_spec(const SceneSpec& spec) {
  if (spec.width % 32 != 0 || spec.height % 32 != 0)
    throw ValueError("scene: sensor sides must be divisible by 32, got " +
                     std::to_string(spec.width) + "x" +
                     std::to_string(spec.height));
  if (spec.contrast_threshold <= 0.0)
    throw ValueError("scene: contrast threshold must be > 0");
  if (spec.duration_us <= 0) throw ValueError("scene: duration must be > 0");
  if (spec.bin_us <= 0) throw ValueError("scene: bin duration must be > 0");
  if (spec.frame_rate_hz <= 0 || 1000000 % spec.frame_rate_hz != 0)
    throw ValueError("scene: frame rate must divide 1 MHz");
  for (const auto& p : spec.planes)
    if (p.depth_m <= 0.0) throw ValueError("scene: plane depths must be > 0");
}

inline double focal_of(const SceneSpec& spec) {
  return spec.focal_px > 0.0 ? spec.focal_px : static_cast<double>(spec.width);
}

}  // namespace detail

// Intensity image in (0,1] at time t: per pixel, the texture of the nearest
// covering plane, or a constant background.
inline std::vector<double> render_intensity(const SceneSpec& spec,
                                            int64_t t_us) {
  detail::validate_spec(spec);
  if (t_us < 0 || t_us > spec.duration_us)
    throw ValueError("render_intensity: t outside [0, duration]");
  const double f = detail::focal_of(spec);
  const double t_s = static_cast<double>(t_us) * 1e-6;
  const double cam_x = spec.vel_x * t_s;
  const double cam_y = spec.vel_y * t_s;

  std::vector<const PlaneSpec*> order;
  for (const auto& p : spec.planes) order.push_back(&p);
  std::stable_sort(order.begin(), order.end(),
                   [](const PlaneSpec* a, const PlaneSpec* b) {
                     return a->depth_m < b->depth_m;
                   });
  std::vector<std::vector<detail::TextureWave>> textures;
  for (const auto* p : order) textures.push_back(detail::make_texture(*p, f));

  std::vector<double> img(static_cast<size_t>(spec.width) * spec.height, 0.5);
  for (int y = 0; y < spec.height; ++y) {
    const double ry = (y + 0.5 - spec.height / 2.0) / f;
    for (int x = 0; x < spec.width; ++x) {
      const double rx = (x + 0.5 - spec.width / 2.0) / f;
      for (size_t k = 0; k < order.size(); ++k) {
        const PlaneSpec& p = *order[k];
        const double wx = cam_x + rx * p.depth_m;
        const double wy = cam_y + ry * p.depth_m;
        if (std::abs(wx - p.center_x) <= p.extent_x * 0.5 &&
            std::abs(wy - p.center_y) <= p.extent_y * 0.5) {
          img[static_cast<size_t>(y) * spec.width + x] =
              detail::texture_value(textures[k], wx, wy);
          break;
        }
      }
    }
  }
  return img;
}

// Exact metric depth from the plane geometry at time t; mask=0 where no
// plane projects.
inline DepthMap<double> render_depth(const SceneSpec& spec, int64_t t_us) {
  detail::validate_spec(spec);
  const double f = detail::focal_of(spec);
  const double t_s = static_cast<double>(t_us) * 1e-6;
  const double cam_x = spec.vel_x * t_s;
  const double cam_y = spec.vel_y * t_s;
  std::vector<const PlaneSpec*> order;
  for (const auto& p : spec.planes) order.push_back(&p);
  std::stable_sort(order.begin(), order.end(),
                   [](const PlaneSpec* a, const PlaneSpec* b) {
                     return a->depth_m < b->depth_m;
                   });
  DepthMap<double> map(spec.width, spec.height);
  for (int y = 0; y < spec.height; ++y) {
    const double ry = (y + 0.5 - spec.height / 2.0) / f;
    for (int x = 0; x < spec.width; ++x) {
      const double rx = (x + 0.5 - spec.width / 2.0) / f;
      for (const PlaneSpec* p : order) {
        const double wx = cam_x + rx * p->depth_m;
        const double wy = cam_y + ry * p->depth_m;
        if (std::abs(wx - p->center_x) <= p->extent_x * 0.5 &&
            std::abs(wy - p->center_y) <= p->extent_y * 0.5) {
          map.at(y, x) = p->depth_m;
          map.mask[static_cast<size_t>(y) * spec.width + x] = 1;
          break;
        }
      }
    }
  }
  return map;
}

// Per-pixel reference-level contrast-threshold event generation with linear
// interpolation of crossing times between internally rendered frames, then a
// stable global time sort. Ground truth depth is rendered at every bin end.
inline LabeledSequence emit_events(const SceneSpec& spec) {
  detail::validate_spec(spec);
  const int64_t step = 1000000 / spec.frame_rate_hz;
  std::vector<int64_t> times;
  for (int64_t t = 0; t <= spec.duration_us; t += step) times.push_back(t);
  if (times.back() != spec.duration_us) times.push_back(spec.duration_us);

  const size_t npx = static_cast<size_t>(spec.width) * spec.height;
  std::vector<double> ref(npx), last(npx);
  {
    auto img0 = render_intensity(spec, 0);
    for (size_t i = 0; i < npx; ++i) {
      ref[i] = std::log(img0[i]);
      last[i] = ref[i];
    }
  }

  constexpr double kTol = 1e-9;
  constexpr int64_t kMaxEvents = 100000000;
  std::vector<Event> events;
  const double theta = spec.contrast_threshold;
  for (size_t fi = 1; fi < times.size(); ++fi) {
    const int64_t t0 = times[fi - 1], t1 = times[fi];
    auto img = render_intensity(spec, t1);
    for (int y = 0; y < spec.height; ++y) {
      for (int x = 0; x < spec.width; ++x) {
        const size_t i = static_cast<size_t>(y) * spec.width + x;
        const double cur = std::log(img[i]);
        const double prev = last[i];
        if (std::abs(cur - prev) > kTol) {
          const double pol = cur > prev ? 1.0 : -1.0;
          double cross = ref[i];
          while (true) {
            cross += pol * theta;
            const bool hit = pol > 0 ? (cross > prev && cross <= cur)
                                     : (cross < prev && cross >= cur);
            if (!hit) break;
            const double frac = (cross - prev) / (cur - prev);
            int64_t te = t0 + static_cast<int64_t>(
                                  frac * static_cast<double>(t1 - t0));
            te = std::min(te, spec.duration_us - 1);
            events.push_back(Event{te, x, y, pol > 0 ? +1 : -1});
            if (static_cast<int64_t>(events.size()) > kMaxEvents)
              throw NumericError(
                  "emit_events: event count exceeded 1e8; lower the scene "
                  "dynamics or raise the contrast threshold");
            ref[i] = cross;
          }
        }
        last[i] = cur;
      }
    }
  }
  std::stable_sort(events.begin(), events.end(),
                   [](const Event& a, const Event& b) {
                     if (a.t_us != b.t_us) return a.t_us < b.t_us;
                     if (a.y != b.y) return a.y < b.y;
                     if (a.x != b.x) return a.x < b.x;
                     return a.p < b.p;
                   });

  LabeledSequence seq;
  seq.bin_us = spec.bin_us;
  seq.stream.width = spec.width;
  seq.stream.height = spec.height;
  seq.stream.t_start = 0;
  seq.stream.t_end = spec.duration_us;
  seq.stream.events = std::move(events);
  const int64_t nbins = (spec.duration_us + spec.bin_us - 1) / spec.bin_us;
  for (int64_t b = 1; b <= nbins; ++b)
    seq.depth.push_back(
        render_depth(spec, std::min(b * spec.bin_us, spec.duration_us)));
  return seq;
}

}  // namespace evdepth
