#pragma once

#include <cstdint>
#include <string>

namespace jemha {

// Deterministic random stream based on splitmix64. Produces identical
// sequences on every platform, which the dataset split hashing and the
// reproducibility contracts rely on. Do not swap for std:: distributions;
// their output is implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [lo, hi).
  int randint(int lo, int hi) {
    const auto span = static_cast<std::uint64_t>(hi - lo);
    return lo + static_cast<int>(next_u64() % span);
  }

  bool bernoulli(double p) { return uniform() < p; }

  double normal(double mean = 0.0, double sd = 1.0);

  // Independent child stream; children with distinct tags never collide
  // with the parent sequence.
  Rng split(std::uint64_t tag) const {
    Rng child(mix(state_, 0x2545f4914f6cdd1dULL ^ tag));
    return child;
  }

  static std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

 private:
  std::uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// FNV-1a, used for stable train/val/test assignment from scene ids.
std::uint64_t fnv1a64(const std::string& s);

}  // namespace jemha
