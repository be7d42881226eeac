#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <string_view>

namespace ngvi {

namespace detail {

// SplitMix64 (Steele et al.). Used only to expand (seed, stream) into the
// xoshiro state; constants are the published ones and must never change,
// golden tests depend on the exact sequences.
inline std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t rotl(std::uint64_t x, int k) {
  return (x << k) | (x >> (64 - k));
}

}  // namespace detail

// Combine key parts into a single 64-bit stream id. Order matters.
inline std::uint64_t derive_stream(std::initializer_list<std::uint64_t> parts) {
  std::uint64_t h = 0x9e3779b97f4a7c15ULL;
  for (std::uint64_t p : parts) {
    std::uint64_t s = h ^ (p * 0xff51afd7ed558ccdULL);
    h = detail::splitmix64(s);
  }
  return h;
}

// FNV-1a over a tag string, for naming streams ("init", "shuffle", ...).
inline constexpr std::uint64_t stream_tag(std::string_view name) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : name) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Deterministic random stream: xoshiro256++ seeded through SplitMix64 from
// (seed, stream_id). Identical (seed, stream_id) reproduces the identical
// sequence; distinct stream ids give statistically independent sequences.
// Single-owner by convention: never share a stream across threads.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t stream_id)
      : seed_(seed), stream_id_(stream_id) {
    std::uint64_t sm = seed ^ (stream_id * 0xa24baed4963ee407ULL);
    for (auto& word : state_) word = detail::splitmix64(sm);
    // all-zero state is the one forbidden xoshiro state
    if ((state_[0] | state_[1] | state_[2] | state_[3]) == 0) state_[0] = 1;
  }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream_id() const { return stream_id_; }

  std::uint64_t next_u64() {
    const std::uint64_t result = detail::rotl(state_[0] + state_[3], 23) + state_[0];
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = detail::rotl(state_[3], 45);
    return result;
  }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform in (0, 1]; safe under log().
  double uniform01_open_low() {
    return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
  }

  // Standard normal via Box-Muller; the pair's second value is cached.
  double normal() {
    if (has_cached_) {
      has_cached_ = false;
      return cached_;
    }
    const double u1 = uniform01_open_low();
    const double u2 = uniform01();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    cached_ = r * std::sin(a);
    has_cached_ = true;
    return r * std::cos(a);
  }

  // Uniform integer in [0, n). Lemire's method with rejection: exactly uniform.
  std::int64_t uniform_int(std::int64_t n) {
    const std::uint64_t bound = static_cast<std::uint64_t>(n);
    while (true) {
      const std::uint64_t x = next_u64();
      const __uint128_t m = static_cast<__uint128_t>(x) * bound;
      const std::uint64_t low = static_cast<std::uint64_t>(m);
      if (low >= bound || low >= (-bound) % bound) {
        return static_cast<std::int64_t>(m >> 64);
      }
    }
  }

  bool bernoulli(double p) { return uniform01() < p; }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_id_;
  std::uint64_t state_[4];
  double cached_ = 0.0;
  bool has_cached_ = false;
};

}  // namespace ngvi
