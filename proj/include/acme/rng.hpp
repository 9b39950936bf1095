#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace acme {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

// Counter-based stream: draws depend only on (seed, stream name, counter),
// never on what other streams consumed. Creating parameters or datasets in a
// different order therefore cannot perturb values drawn elsewhere.
class CounterRng {
 public:
  CounterRng(std::uint64_t seed, std::string_view stream)
      : key_(splitmix64(seed ^ splitmix64(fnv1a64(stream)))) {}

  std::uint64_t next_u64() { return splitmix64(key_ + 0x632be59bd9b4e019ull * ++ctr_); }

  // [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double normal() {
    // Box-Muller; consumes exactly two uniforms per draw (no cached spare, so
    // the stream position stays a pure function of the draw count).
    double u1 = uniform();
    double u2 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  double trunc_normal(double stddev, double lo, double hi) {
    for (;;) {
      double z = normal() * stddev;
      if (z >= lo && z <= hi) return z;
    }
  }

  std::uint32_t uniform_int(std::uint32_t n) {
    return static_cast<std::uint32_t>(next_u64() % n);
  }

 private:
  std::uint64_t key_;
  std::uint64_t ctr_ = 0;
};

}  // namespace acme
