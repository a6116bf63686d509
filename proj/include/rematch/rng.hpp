// Copyright 2026 The ReMatch Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <string_view>

namespace rematch {

// Counter-based randomness built on splitmix64. Every consumer derives its
// own stream from (seed, purpose tag, indices), so draws never depend on
// program order: changing how many numbers one component consumes cannot
// shift any other component's stream. That property is what makes paired-seed
// ablations and resume-equivalence byte-exact.

namespace detail {

inline constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ULL;

inline constexpr std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace detail

// FNV-1a, used to turn purpose tags into key material.
inline constexpr std::uint64_t hash_tag(std::string_view tag) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : tag) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  // Derives an independent stream from a root seed plus arbitrary key parts.
  static Rng keyed(std::uint64_t seed, std::string_view tag,
                   std::initializer_list<std::uint64_t> indices = {}) {
    std::uint64_t h = detail::mix64(seed + detail::kGolden);
    h = combine(h, hash_tag(tag));
    for (std::uint64_t ix : indices) h = combine(h, ix);
    return Rng(h);
  }

  std::uint64_t next_u64() {
    state_ += detail::kGolden;
    return detail::mix64(state_);
  }

  // Uniform in [0, 1).
  double next_unit() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Uniform in (0, 1]; safe as a log() argument.
  double next_unit_open() {
    return (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
  }

  // Unbiased integer in [0, n). n must be > 0.
  std::uint64_t next_below(std::uint64_t n) {
    const std::uint64_t limit = n * ((~std::uint64_t{0}) / n);
    std::uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return x % n;
  }

  bool next_bool() { return (next_u64() >> 63) != 0; }

  // Standard normal via Box-Muller; the pair's second value is cached.
  double next_gaussian() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = next_unit_open();
    const double u2 = next_unit();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

 private:
  static constexpr std::uint64_t combine(std::uint64_t h, std::uint64_t k) {
    return detail::mix64(h ^ (k + detail::kGolden + (h << 6) + (h >> 2)));
  }

  std::uint64_t state_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace rematch
