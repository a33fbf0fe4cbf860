#pragma once

// Portable draws on top of std::mt19937_64. The standard distributions are
// implementation-defined, so generated data would differ between standard
// libraries; these helpers pin the arithmetic.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

namespace mcsc {

inline double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double uniform(std::mt19937_64& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

// Box-Muller; one draw per call.
inline double normal(std::mt19937_64& rng, double mean = 0.0, double stddev = 1.0) {
  double u1 = uniform01(rng);
  while (u1 <= 0.0) u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  return mean + stddev * std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

inline bool bernoulli(std::mt19937_64& rng, double p) { return uniform01(rng) < p; }

// Independent stream for (seed, stream id).
inline std::mt19937_64 derive_rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32), 0x6d637363u};
  return std::mt19937_64(seq);
}

}  // namespace mcsc
