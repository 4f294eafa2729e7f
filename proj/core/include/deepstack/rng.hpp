#pragma once

#include <cstdint>

namespace deepstack {

inline constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline constexpr std::uint64_t mix_keys(std::uint64_t a, std::uint64_t b) {
  return splitmix64(a ^ splitmix64(b + 0x632BE59BD9B4E019ULL));
}

/// Counter-based random stream. Draw i depends only on the key tuple and i,
/// so a recomputed forward pass sees exactly the same dropout masks.
struct RngStream {
  std::uint64_t seed = 0;
  std::uint64_t layer = 0;
  std::uint64_t step = 0;
  std::uint64_t site = 0;

  constexpr std::uint64_t key() const {
    return mix_keys(mix_keys(mix_keys(seed, layer), step), site);
  }

  constexpr std::uint64_t bits(std::uint64_t counter) const {
    return splitmix64(key() ^ splitmix64(counter));
  }

  /// Uniform in [0, 1) with 53 bits of resolution.
  constexpr double uniform(std::uint64_t counter) const {
    return static_cast<double>(bits(counter) >> 11) * 0x1.0p-53;
  }

  constexpr RngStream with_site(std::uint64_t s) const {
    return RngStream{seed, layer, step, s};
  }
};

}  // namespace deepstack
