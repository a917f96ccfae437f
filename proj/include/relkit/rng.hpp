#pragma once

#include <cstdint>
#include <random>

namespace relkit {

/// Independent generator for (seed, stream); used to derive per-member,
/// per-round and per-step streams from one user seed.
inline std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t stream = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  return std::mt19937_64(seq);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) { return make_rng(seed, stream)(); }

}  // namespace relkit
