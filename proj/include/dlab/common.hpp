// SPDX-License-Identifier: Apache-2.0
#pragma once

// Shared domain primitives: token sequences, vocabulary, error taxonomy,
// and the deterministic RNG/hash kit every seeded component builds on.
// All randomness in the library flows through Rng so runs replay
// bit-identically across platforms (no std::uniform_* distributions,
// which are implementation-defined).

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace dlab {

using Token = std::int32_t;
using Tokens = std::vector<Token>;

// Error taxonomy, mapped to CLI exit codes 1/2/3.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct InternalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Vocab {
  int size = 0;
  Token mask_id = 0;
  Token eos_id = 0;

  void validate() const {
    if (size < 4) throw ConfigError("vocab size must be >= 4");
    if (mask_id == eos_id) throw ConfigError("mask_id must differ from eos_id");
    if (mask_id < 0 || mask_id >= size || eos_id < 0 || eos_id >= size)
      throw ConfigError("mask_id/eos_id must lie in [0, size)");
  }
};

// 64-bit mixing (splitmix64 finalizer). Stable across platforms.
inline std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ull;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b) {
  return mix64(a ^ (b + 0x9e3779b97f4a7c15ull + (a << 6) + (a >> 2)));
}

inline std::uint64_t fnv1a64(const void* data, std::size_t len) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t hash_tokens(const Tokens& t, std::uint64_t seed = 0) {
  std::uint64_t h = mix64(seed ^ 0x746f6b656e735full);
  for (Token v : t) h = hash_combine(h, static_cast<std::uint64_t>(static_cast<std::uint32_t>(v)));
  return h;
}

// splitmix64 stream; deterministic and cheap to fork.
struct Rng {
  std::uint64_t state = 0;

  explicit Rng(std::uint64_t seed = 0) : state(seed) {}

  std::uint64_t next_u64() {
    state += 0x9e3779b97f4a7c15ull;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 53 bits of resolution.
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [lo, hi], inclusive. Lemire reduction, unbiased enough
  // for simulation purposes and exactly reproducible.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    if (lo > hi) throw InternalError("uniform_int: empty range");
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    const auto wide = static_cast<unsigned __int128>(next_u64()) * span;
    return lo + static_cast<std::int64_t>(static_cast<std::uint64_t>(wide >> 64));
  }

  Rng fork(std::uint64_t stream) const { return Rng(hash_combine(state, mix64(stream))); }
};

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace dlab
