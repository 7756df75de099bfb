#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace pdelab {

using Rng = std::mt19937_64;

/// splitmix64 finaliser; good avalanche for counter-style inputs.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Derives an independent stream seed from a base seed and a tuple of
/// counters (epoch, sample, member, ...). Every random draw in the project
/// goes through this so results do not depend on which worker ran what.
inline std::uint64_t stream_seed(std::uint64_t base, std::initializer_list<std::uint64_t> counters) {
  std::uint64_t h = mix64(base);
  for (std::uint64_t c : counters) h = mix64(h ^ mix64(c + 0x632be59bd9b4e019ULL));
  return h;
}

inline Rng make_rng(std::uint64_t base, std::initializer_list<std::uint64_t> counters = {}) {
  return Rng(stream_seed(base, counters));
}

}  // namespace pdelab
