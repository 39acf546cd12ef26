#pragma once

#include <cstdint>
#include <random>

namespace ccm {

/// Named random streams. Every random draw in the toolkit comes from an engine seeded
/// by derive_seed(user_seed, stream, index) so results never depend on scheduling.
enum class Stream : std::uint64_t {
  mode_field = 1,
  coupling_field = 2,
  forward_noise = 3,
  phantom = 4,
  dataset_noise = 5,
  split = 6,
  net_init = 7,
  shuffle = 8,
  calibration_noise = 9,
};

constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t seed, Stream stream, std::uint64_t index = 0) noexcept {
  return splitmix64(splitmix64(splitmix64(seed) ^ static_cast<std::uint64_t>(stream)) ^ index);
}

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t seed, Stream stream, std::uint64_t index = 0) {
  return Rng(derive_seed(seed, stream, index));
}

}  // namespace ccm
