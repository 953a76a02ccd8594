#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace fedrbn {

using Rng = std::mt19937_64;

// splitmix64 finalizer; used to derive independent stream seeds.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Folds a seed and any number of stream coordinates (user id, round, ...)
/// into one 64-bit seed. Different coordinate tuples give unrelated streams.
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> coords) noexcept {
  std::uint64_t h = mix64(seed);
  for (auto c : coords) h = mix64(h ^ mix64(c + 0x632be59bd9b4e019ULL));
  return h;
}

inline Rng make_rng(std::uint64_t seed, std::initializer_list<std::uint64_t> coords = {}) {
  return Rng(derive_seed(seed, coords));
}

// Stream tags so derived seeds for different purposes never collide.
namespace stream {
inline constexpr std::uint64_t init = 1;
inline constexpr std::uint64_t data = 2;
inline constexpr std::uint64_t partition = 3;
inline constexpr std::uint64_t train = 4;
inline constexpr std::uint64_t eval = 5;
inline constexpr std::uint64_t detector = 6;
}  // namespace stream

}  // namespace fedrbn
