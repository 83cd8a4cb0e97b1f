#pragma once

#include <cstdint>
#include <random>

namespace fesvibs {

// splitmix64 finalizer; used to derive independent seed streams from
// (base seed, purpose, id) tuples so that e.g. per-client shuffles never
// alias the server's sampling stream.
inline std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a,
                                 std::uint64_t b = 0) {
  return mix64(mix64(base ^ mix64(a)) ^ mix64(b + 0x517cc1b727220a95ULL));
}

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t seed) { return Rng(seed); }

// Normal(0, sigma) truncated to +/- 2 sigma by rejection.
inline double truncated_normal(Rng& rng, double sigma) {
  std::normal_distribution<double> dist(0.0, sigma);
  for (;;) {
    double v = dist(rng);
    if (v >= -2.0 * sigma && v <= 2.0 * sigma) return v;
  }
}

}  // namespace fesvibs
