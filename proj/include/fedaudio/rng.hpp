// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <type_traits>

namespace fedaudio {

/// All randomness flows through one engine type so a seed fully determines
/// a run within one build.
using Rng = std::mt19937_64;

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

namespace detail {

template <class T>
constexpr std::uint64_t seed_part(const T& part) {
  if constexpr (std::is_integral_v<T>) {
    return static_cast<std::uint64_t>(part);
  } else {
    return fnv1a64(std::string_view(part));
  }
}

}  // namespace detail

/// Derives an independent stream seed from a base seed and a path of
/// integer / string components, e.g. derive_seed(master, "client", round, id).
template <class... Parts>
constexpr std::uint64_t derive_seed(std::uint64_t base, const Parts&... parts) {
  std::uint64_t h = splitmix64(base);
  ((h = splitmix64(h ^ splitmix64(detail::seed_part(parts)))), ...);
  return h;
}

}  // namespace fedaudio
