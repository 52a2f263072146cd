#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

namespace twinbed {

/// Seeded Gaussian noise source.
///
/// std::normal_distribution is implementation-defined, so the Gaussian is
/// drawn here with the Box-Muller transform on top of std::mt19937_64 (whose
/// output sequence the standard fixes). Runs are reproducible bit-for-bit
/// across standard libraries.
class NoiseSource {
 public:
  explicit NoiseSource(std::uint64_t seed = 0) : engine_(seed) {}

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double gaussian(double sigma) {
    if (has_spare_) {
      has_spare_ = false;
      return sigma * spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return sigma * radius * std::cos(angle);
  }

  std::uint64_t next_u64() { return engine_(); }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace twinbed
