#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace slm {

// Shape/contract violations in numeric code.
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid genomes, configs, file contents.
struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A command was run before the artifact it needs exists.
struct PrerequisiteError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// SplitMix64. Deterministic across platforms, cheap to split into
// independent streams (unlike std::mt19937 + std distributions, whose
// output is implementation-defined).
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // in [0, 1)
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // in [0, n)
  uint64_t next_below(uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

  // Box-Muller, spare cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    while (u1 <= 1e-300) u1 = uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  // Normal truncated at +-2 sigma (rejection).
  double trunc_normal(double mean, double stddev) {
    double z = normal();
    while (std::fabs(z) > 2.0) z = normal();
    return mean + stddev * z;
  }

 private:
  uint64_t state_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// Stable derivation of per-task seeds from a base seed.
inline uint64_t derive_seed(uint64_t base, uint64_t tag) {
  Rng r(base ^ (0x6a09e667f3bcc909ULL + tag * 0x9e3779b97f4a7c15ULL));
  return r.next_u64();
}

inline uint64_t derive_seed(uint64_t base, uint64_t tag_a, uint64_t tag_b) {
  return derive_seed(derive_seed(base, tag_a), tag_b);
}

}  // namespace slm
