#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>

namespace evdepth {

// Splittable counter-based generator. Every consumer derives its own stream
// from (seed, name), so initialization order never affects the values a
// given tensor or subsystem receives.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(mix(seed ^ 0x9e3779b97f4a7c15ull)) {}

  static uint64_t mix(uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  static uint64_t hash_name(std::string_view name) {
    uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a
    for (unsigned char c : name) {
      h ^= c;
      h *= 0x100000001b3ull;
    }
    return h;
  }

  static Rng for_name(uint64_t seed, std::string_view name) {
    Rng r(0);
    r.state_ = mix(mix(seed) ^ hash_name(name));
    return r;
  }

  Rng split(std::string_view name) const {
    Rng r(0);
    r.state_ = mix(state_ ^ hash_name(name));
    return r;
  }

  uint64_t next_u64() {
    counter_ += 1;
    return mix(state_ + counter_ * 0xd1342543de82ef95ull);
  }

  // Uniform in [0, 1).
  double next_uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double next_uniform(double lo, double hi) {
    return lo + (hi - lo) * next_uniform();
  }

  int64_t next_index(int64_t n) {
    return static_cast<int64_t>(next_u64() % static_cast<uint64_t>(n));
  }

  // Standard normal via Box-Muller.
  double next_normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    do {
      u1 = next_uniform();
    } while (u1 <= 0.0);
    const double u2 = next_uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  // Normal(0, sigma) truncated to [-limit*sigma, limit*sigma] by rejection.
  double next_trunc_normal(double sigma, double limit = 2.0) {
    double z = next_normal();
    while (std::abs(z) > limit) z = next_normal();
    return z * sigma;
  }

 private:
  uint64_t state_ = 0;
  uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace evdepth
