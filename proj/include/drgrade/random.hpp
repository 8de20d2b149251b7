#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace drgrade {

using Rng = std::mt19937_64;

// 64-bit FNV-1a.
std::uint64_t fnv1a(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);

// splitmix64 finalizer; used to derive independent child seeds.
std::uint64_t mix64(std::uint64_t x);

inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t a) { return mix64(master ^ mix64(a + 0x9e3779b97f4a7c15ULL)); }
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t a, std::uint64_t b) {
  return derive_seed(derive_seed(master, a), b);
}
inline std::uint64_t derive_seed(std::uint64_t master, std::string_view id, std::uint64_t b) {
  return derive_seed(master, fnv1a(id), b);
}

}  // namespace drgrade
