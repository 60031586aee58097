#pragma once

#include <cstdint>

namespace pele {

// Counter-based pseudo-random generator built on the SplitMix64 scramble.
// The n-th output is scramble(seed + (n+1) * GOLDEN_GAMMA), so a stream is a
// pure function of (seed, counter) and reproduces bit-identically on every
// platform. Forked sub-streams re-seed through the same scramble.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed) {}

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64() {
    std::uint64_t z = seed_ + (++counter_) * kGoldenGamma;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Uniform double in [0, 1), 53 mantissa bits.
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Uniform integer in [0, n), n >= 1. Multiply-shift mapping; the tiny
  // modulo bias is irrelevant at the stream lengths used here.
  std::uint64_t uniform_int(std::uint64_t n) {
    return static_cast<std::uint64_t>(
        (static_cast<__uint128_t>(next_u64()) * n) >> 64);
  }

  // Box-Muller transform; consumes two raw draws per sample.
  double normal(double mean, double stddev);

  // Independent stream derived from (seed, tag). Does not advance this one.
  Rng fork(std::uint64_t tag) const;

 private:
  static constexpr std::uint64_t kGoldenGamma = 0x9E3779B97F4A7C15ULL;

  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
};

}  // namespace pele
