#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace eurobert {

using Rng = std::mt19937_64;

/// Independent stream for (seed, a, b, ...); std::seed_seq is fully specified,
/// so streams are reproducible across platforms.
inline Rng derive_rng(std::uint64_t seed, std::initializer_list<std::uint64_t> keys) {
  std::vector<std::uint32_t> words{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)};
  for (auto k : keys) {
    words.push_back(static_cast<std::uint32_t>(k));
    words.push_back(static_cast<std::uint32_t>(k >> 32));
  }
  std::seed_seq seq(words.begin(), words.end());
  return Rng(seq);
}

/// Uniform integer in [lo, hi].
inline std::uint64_t uniform_index(Rng& rng, std::uint64_t lo, std::uint64_t hi) {
  return std::uniform_int_distribution<std::uint64_t>(lo, hi)(rng);
}

inline double uniform_real(Rng& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

}  // namespace eurobert
