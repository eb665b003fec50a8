#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>

namespace mkdiff {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Derives an independent stream seed from a master seed, a purpose tag and
/// any number of integer coordinates (epoch, shape id, ...).
inline std::uint64_t derive_seed(std::uint64_t master, std::string_view tag,
                                 std::initializer_list<std::uint64_t> coords = {}) {
  std::uint64_t h = splitmix64(master);
  for (char c : tag) h = splitmix64(h ^ static_cast<unsigned char>(c));
  for (auto v : coords) h = splitmix64(h ^ v);
  return h;
}

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t master, std::string_view tag,
                    std::initializer_list<std::uint64_t> coords = {}) {
  return Rng(derive_seed(master, tag, coords));
}

}  // namespace mkdiff
