#include "pele/rng.hpp"

#include <cmath>

namespace pele {

double Rng::normal(double mean, double stddev) {
  // 1 - u keeps the log argument in (0, 1].
  double u1 = 1.0 - uniform();
  double u2 = uniform();
  double r = std::sqrt(-2.0 * std::log(u1));
  return mean + stddev * r * std::cos(2.0 * M_PI * u2);
}

Rng Rng::fork(std::uint64_t tag) const {
  std::uint64_t z = seed_ ^ (tag + kGoldenGamma + (seed_ << 6) + (seed_ >> 2));
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return Rng(z ^ (z >> 31));
}

}  // namespace pele
