#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <stdexcept>

namespace lstsd {

// Counter-based PRNG: every draw is a hash of (key, counter), so a stream's
// output depends only on its key tuple and how many values it has produced.
// Distinct key tuples give independent streams; nothing is shared globally.
class RngStream {
 public:
  // Stream kinds keep the key space of unrelated consumers disjoint.
  enum Kind : std::uint64_t { kInit = 1, kShuffle = 2, kAugment = 3, kSpiral = 4 };

  RngStream(std::uint64_t seed, std::uint64_t stream, std::uint64_t k1 = 0,
            std::uint64_t k2 = 0)
      : key_(mix(mix(mix(mix(seed) ^ stream) ^ k1) ^ k2)) {}

  std::uint64_t next_u64() { return mix(key_ + kGolden * ++counter_); }

  // Uniform in [0, 1) with 53 random bits.
  double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform in [0, n). n == 1 consumes no randomness.
  std::uint64_t next_below(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("RngStream::next_below: n must be positive");
    if (n == 1) return 0;
    const std::uint64_t mask = ~std::uint64_t{0} >> std::countl_zero(n - 1);
    for (;;) {
      const std::uint64_t v = next_u64() & mask;
      if (v < n) return v;
    }
  }

  // Standard normal via Box-Muller; the second value of each pair is cached.
  double next_gaussian() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    const double u1 = 1.0 - next_unit();  // (0, 1], keeps log finite
    const double u2 = next_unit();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * kPi * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

 private:
  static constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ull;
  static constexpr double kPi = 3.141592653589793238462643383279502884;

  static std::uint64_t mix(std::uint64_t x) {
    x += kGolden;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
  }

  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace lstsd
