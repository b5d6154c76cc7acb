#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "evdepth/sim/scene.hpp"

using namespace evdepth;

namespace {

SceneSpec basic_spec() {
  SceneSpec spec;
  spec.width = 64;
  spec.height = 64;
  spec.duration_us = 200000;
  spec.vel_x = 0.5;
  spec.vel_y = 0.0;
  spec.contrast_threshold = 0.2;
  spec.planes.push_back(PlaneSpec{2.0, 11, 0.0, 0.0, 100.0, 100.0});
  return spec;
}

}  // namespace

TEST_CASE("static scenes render identically and emit nothing") {
  auto spec = basic_spec();
  spec.vel_x = 0.0;
  auto a = render_intensity(spec, 0);
  auto b = render_intensity(spec, 150000);
  REQUIRE(a == b);
  auto seq = emit_events(spec);
  REQUIRE(seq.stream.events.empty());
  REQUIRE(seq.depth.size() == 4);
}

TEST_CASE("translation shifts the image by the pinhole disparity") {
  auto spec = basic_spec();
  // disparity = v * dt * f / depth = 0.5 * 0.125 * 64 / 2 = 2 px
  const int64_t t0 = 0, dt = 125000;
  auto img0 = render_intensity(spec, t0);
  auto img1 = render_intensity(spec, t0 + dt);
  const int disp = 2;
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x + disp < 64; ++x) {
      const double expected = img0[static_cast<size_t>(y) * 64 + x + disp];
      const double got = img1[static_cast<size_t>(y) * 64 + x];
      REQUIRE(got == Catch::Approx(expected).margin(1e-9));
    }
}

TEST_CASE("near planes occlude far planes") {
  SceneSpec spec;
  spec.width = spec.height = 64;
  spec.duration_us = 100000;
  spec.vel_x = 0.0;
  // near plane covers the central patch only; far plane covers everything
  spec.planes.push_back(PlaneSpec{2.0, 5, 0.0, 0.0, 1.0, 1.0});
  spec.planes.push_back(PlaneSpec{10.0, 6, 0.0, 0.0, 1000.0, 1000.0});
  auto depth = render_depth(spec, 0);
  REQUIRE(depth.at(32, 32) == 2.0);
  REQUIRE(depth.at(0, 0) == 10.0);
  REQUIRE(depth.mask[0] == 1);
}

TEST_CASE("single-plane depth maps are exact with masked background") {
  SceneSpec spec;
  spec.width = spec.height = 64;
  spec.duration_us = 100000;
  spec.vel_x = 0.0;
  spec.planes.push_back(PlaneSpec{3.5, 9, 0.0, 0.0, 0.08, 0.08});
  auto depth = render_depth(spec, 0);
  int covered = 0;
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x) {
      if (depth.mask[static_cast<size_t>(y) * 64 + x]) {
        REQUIRE(depth.at(y, x) == 3.5);
        ++covered;
      } else {
        REQUIRE(depth.at(y, x) == 0.0);
      }
    }
  REQUIRE(covered > 0);
  REQUIRE(covered < 64 * 64);
}

TEST_CASE("doubling the contrast threshold reduces the event count") {
  auto spec = basic_spec();
  auto lo = emit_events(spec);
  auto hi_spec = spec;
  hi_spec.contrast_threshold = 0.4;
  auto hi = emit_events(hi_spec);
  REQUIRE(lo.stream.events.size() > 0);
  REQUIRE(hi.stream.events.size() < lo.stream.events.size());

  // monotone non-increasing across a ladder of thresholds
  size_t prev = lo.stream.events.size();
  for (double theta : {0.3, 0.5, 0.8, 1.4}) {
    auto s2 = spec;
    s2.contrast_threshold = theta;
    const size_t n = emit_events(s2).stream.events.size();
    REQUIRE(n <= prev);
    prev = n;
  }
}

TEST_CASE("emission is deterministic") {
  auto spec = basic_spec();
  auto a = emit_events(spec);
  auto b = emit_events(spec);
  REQUIRE(a.stream.events.size() == b.stream.events.size());
  for (size_t i = 0; i < a.stream.events.size(); ++i)
    REQUIRE(a.stream.events[i] == b.stream.events[i]);
  REQUIRE(a.depth.size() == b.depth.size());
  for (size_t i = 0; i < a.depth.size(); ++i) {
    REQUIRE(a.depth[i].values == b.depth[i].values);
    REQUIRE(a.depth[i].mask == b.depth[i].mask);
  }
}

TEST_CASE("events are time-sorted and inside the window") {
  auto spec = basic_spec();
  auto seq = emit_events(spec);
  REQUIRE(seq.stream.events.size() > 100);
  for (size_t i = 0; i < seq.stream.events.size(); ++i) {
    const auto& e = seq.stream.events[i];
    REQUIRE(e.t_us >= 0);
    REQUIRE(e.t_us < spec.duration_us);
    if (i) REQUIRE(e.t_us >= seq.stream.events[i - 1].t_us);
  }
}

TEST_CASE("reversing translation flips per-pixel polarity majorities") {
  // Displacement kept under the shortest texture wavelength so the sign of
  // the temporal derivative, and with it the dominant polarity, reverses.
  auto spec = basic_spec();
  spec.duration_us = 100000;
  spec.contrast_threshold = 0.05;
  auto fwd = emit_events(spec);
  auto rev_spec = spec;
  rev_spec.vel_x = -spec.vel_x;
  auto rev = emit_events(rev_spec);

  auto majorities = [](const LabeledSequence& seq) {
    std::vector<int> m(64 * 64, 0);
    for (const auto& e : seq.stream.events)
      m[static_cast<size_t>(e.y) * 64 + e.x] += e.p;
    return m;
  };
  auto mf = majorities(fwd);
  auto mr = majorities(rev);
  int clear = 0, flipped = 0;
  for (size_t i = 0; i < mf.size(); ++i) {
    if (std::abs(mf[i]) >= 3 && std::abs(mr[i]) >= 3) {
      ++clear;
      if ((mf[i] > 0) != (mr[i] > 0)) ++flipped;
    }
  }
  REQUIRE(clear > 200);
  REQUIRE(static_cast<double>(flipped) / clear > 0.9);
}

TEST_CASE("scene spec validation") {
  auto spec = basic_spec();
  spec.width = 60;
  REQUIRE_THROWS_AS(emit_events(spec), ValueError);
  spec = basic_spec();
  spec.contrast_threshold = 0.0;
  REQUIRE_THROWS_AS(emit_events(spec), ValueError);
  spec = basic_spec();
  spec.planes[0].depth_m = -1.0;
  REQUIRE_THROWS_AS(emit_events(spec), ValueError);
}
