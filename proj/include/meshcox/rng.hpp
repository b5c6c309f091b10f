#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace meshcox {

/// Counter-based generator built on the splitmix64 finalizer. A stream is
/// derived by hashing a key tuple, so every draw depends only on
/// (seed, key, position within the stream) and never on scheduling order.
/// This is what makes parallel MCMC updates reproducible across any number
/// of worker threads.
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t seed) : state_(seed) {
    mix_in(0x9e3779b97f4a7c15ull);
  }

  static CounterRng stream(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0,
                           std::uint64_t c = 0, std::uint64_t d = 0) {
    CounterRng r(seed);
    r.mix_in(a);
    r.mix_in(b);
    r.mix_in(c);
    r.mix_in(d);
    return r;
  }

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    return finalize(state_);
  }

  /// Uniform on the open interval (0, 1).
  double uniform01() {
    return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  /// Standard normal via Box-Muller; consumes two uniforms per draw and
  /// carries no state between calls.
  double normal() {
    const double u1 = uniform01();
    const double u2 = uniform01();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Poisson draw. Multiplicative inversion for small means, additivity over
  /// chunks of 30 for moderate ones, rounded normal approximation above 1e4.
  long poisson(double mean) {
    if (mean <= 0.0) return 0;
    if (mean > 1e4) {
      const double draw = mean + std::sqrt(mean) * normal();
      return draw > 0.0 ? static_cast<long>(std::llround(draw)) : 0;
    }
    long count = 0;
    while (mean > 30.0) {
      count += poisson_small(30.0);
      mean -= 30.0;
    }
    return count + poisson_small(mean);
  }

 private:
  long poisson_small(double mean) {
    const double limit = std::exp(-mean);
    long count = -1;
    double prod = 1.0;
    do {
      prod *= uniform01();
      ++count;
    } while (prod > limit);
    return count;
  }

  void mix_in(std::uint64_t v) {
    state_ = finalize(state_ ^ finalize(v + 0x9e3779b97f4a7c15ull));
  }

  static std::uint64_t finalize(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  std::uint64_t state_;
};

}  // namespace meshcox
