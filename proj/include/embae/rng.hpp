#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace embae {

// Seed for every source of randomness in the library. Equal seeds give
// bit-identical sampling, initialization and training trajectories on the
// same platform and precision.
struct RngSeed {
  std::uint64_t seed = 0;
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Derives an independent sub-stream seed from a base seed and a purpose tag,
// so unrelated consumers (init, sampling, stages) never share a stream.
inline RngSeed derive_seed(RngSeed base, std::string_view tag) {
  std::uint64_t h = 1469598103934665603ull;  // FNV-1a
  for (unsigned char c : tag) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return RngSeed{splitmix64(base.seed ^ h)};
}

inline RngSeed derive_seed(RngSeed base, std::string_view tag, std::uint64_t index) {
  return RngSeed{splitmix64(derive_seed(base, tag).seed + splitmix64(index))};
}

inline std::mt19937_64 make_rng(RngSeed s) { return std::mt19937_64(s.seed); }

}  // namespace embae
