#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace mega {

// Seeded random stream. The std engine is bit-specified, but the std
// distributions are not, so the conversions to reals live here.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform in (0, 1); never returns 0.
  double uniform_open() {
    double u;
    do {
      u = uniform();
    } while (u == 0.0);
    return u;
  }

  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  bool bernoulli(double p) { return uniform() < p; }

  double normal() {
    const double u1 = uniform_open();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  // Standard Gumbel(0, 1).
  double gumbel() { return -std::log(-std::log(uniform_open())); }

  // Independent child stream, stable for a given (seed, index).
  static Rng substream(std::uint64_t seed, std::uint64_t index) {
    return Rng(splitmix64(seed ^ splitmix64(index + 0x9E3779B97F4A7C15ULL)));
  }

  static std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace mega
