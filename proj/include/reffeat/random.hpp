#pragma once

#include <cstdint>
#include <random>

#include "reffeat/tensor.hpp"

namespace reffeat {

// The standard distributions are implementation-defined, so draws go
// through these helpers to keep seeded runs identical across toolchains.
using Rng = std::mt19937_64;

inline double uniform01(Rng& rng) { return double(rng() >> 11) * 0x1.0p-53; }

inline double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

// Uniform integer in [0, n).
inline uint64_t uniform_index(Rng& rng, uint64_t n) {
  const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  uint64_t v;
  do {
    v = rng();
  } while (v >= limit);
  return v % n;
}

// Independent stream seed for (base, stream, index), via splitmix64.
inline uint64_t derive_seed(uint64_t base, uint64_t stream, uint64_t index = 0) {
  auto mix = [](uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(base) ^ stream) ^ index);
}

Tensor random_uniform(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0);

}  // namespace reffeat
