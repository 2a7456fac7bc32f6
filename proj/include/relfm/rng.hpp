#pragma once

#include <algorithm>
#include <cstdint>
#include <initializer_list>
#include <random>

namespace relfm {

using Rng = std::mt19937_64;

/// splitmix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Independent stream seed for (base, k1, k2, ...), so per-row and per-batch
/// generators do not depend on processing order.
inline std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> keys) {
  std::uint64_t h = mix64(base);
  for (auto k : keys) h = mix64(h ^ mix64(k + 0x632BE59BD9B4E019ULL));
  return h;
}

template <typename Container>
void shuffle(Container& c, Rng& rng) {
  std::shuffle(c.begin(), c.end(), rng);
}

}  // namespace relfm
