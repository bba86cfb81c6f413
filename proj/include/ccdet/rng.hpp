#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace ccdet {

/// SplitMix64 generator. The i-th output is a pure function of (seed, i),
/// so identical seeds reproduce identical streams on every platform.
/// Parallel streams are derived by seeding with `seed ^ index`.
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  /// Uniform in [0, 1).
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) {
    return lo + (hi - lo) * next_double();
  }

  /// Uniform integer in [lo, hi], inclusive.
  int uniform_int(int lo, int hi) {
    return lo + static_cast<int>(next_u64() %
                                 static_cast<std::uint64_t>(hi - lo + 1));
  }

  // Box-Muller on explicit uniforms; std::normal_distribution is not
  // reproducible across standard libraries.
  double gaussian(double mean, double stddev) {
    const double u1 =
        static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;  // (0, 1]
    const double u2 = next_double();
    return mean + stddev * std::sqrt(-2.0 * std::log(u1)) *
                      std::cos(2.0 * std::numbers::pi * u2);
  }

  // Knuth inversion; fine for the small rates used here.
  int poisson(double mean) {
    if (mean <= 0.0) return 0;
    const double limit = std::exp(-mean);
    int k = 0;
    double p = 1.0;
    do {
      ++k;
      p *= next_double();
    } while (p > limit);
    return k - 1;
  }

 private:
  std::uint64_t state_;
};

/// Mixes a salt into a base seed to obtain an independent stream family.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t salt) {
  return SplitMix64(base ^ salt).next_u64();
}

}  // namespace ccdet
