#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace artsurf {

// Counter-based random numbers: every draw is a pure hash of (seed, stream, counter),
// so results do not depend on evaluation order or thread count.
inline uint64_t mix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline uint64_t hash_str(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (char c : s) h = (h ^ static_cast<uint8_t>(c)) * 0x100000001b3ull;
  return h;
}

class Rng {
 public:
  Rng() = default;
  explicit Rng(uint64_t seed) : state_(mix64(seed)) {}
  Rng(uint64_t seed, std::string_view stream) : state_(mix64(mix64(seed) ^ hash_str(stream))) {}

  Rng fork(std::string_view stream) const {
    Rng r;
    r.state_ = mix64(state_ ^ hash_str(stream));
    return r;
  }
  Rng fork(uint64_t key) const {
    Rng r;
    r.state_ = mix64(state_ ^ mix64(key ^ 0xa0761d6478bd642full));
    return r;
  }

  uint64_t next_u64() {
    counter_++;
    return mix64(state_ + counter_ * 0x9e3779b97f4a7c15ull);
  }
  // Stateless draw: value i of this stream, independent of prior calls.
  uint64_t at(uint64_t i) const { return mix64(state_ + (i + 1) * 0x9e3779b97f4a7c15ull); }

  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  double double_at(uint64_t i) const { return static_cast<double>(at(i) >> 11) * 0x1.0p-53; }

  // Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }
  // Uniform integer in [0, n).
  uint64_t index(uint64_t n) { return next_u64() % n; }

  // Standard normal via Box-Muller (two draws per call, no caching for determinism).
  double normal() {
    double u1 = next_double();
    double u2 = next_double();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

 private:
  uint64_t state_ = 0x853c49e6748fea9bull;
  uint64_t counter_ = 0;
};

}  // namespace artsurf
