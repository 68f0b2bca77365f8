#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace wsikit::rng {

// splitmix64 finalizer; decorrelates seeds derived from one root.
inline std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// One root seed per run; every component draws from its own named stream so
// adding a consumer never shifts the others.
inline std::uint64_t derive_seed(std::uint64_t root, std::string_view component) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a over the component name
  for (char c : component) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return mix(root ^ h);
}

inline std::mt19937_64 make_engine(std::uint64_t root, std::string_view component) {
  return std::mt19937_64(derive_seed(root, component));
}

}  // namespace wsikit::rng
