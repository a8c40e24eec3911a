#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "distaudit/error.hpp"

namespace distaudit {

namespace detail {

// 64-bit finalizer (splitmix64). Bijective, so distinct inputs never collide.
inline std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace detail

// Counter-based generator: draw i is a pure function of (key, i), so a
// stream is reproducible from its seed alone and independent of how many
// values other streams consumed. split(stream_id) derives an independent
// child stream; the derivation is mix64 over (key, stream_id) and is the
// documented seed-splitting scheme used everywhere in the toolkit.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : key_(detail::mix64(seed)) {}

  std::uint64_t next_u64() { return detail::mix64(key_ + counter_++ * 0x9e3779b97f4a7c15ULL); }

  // Uniform in [0, 1) with 53 bits of precision.
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n). Modulo bias is negligible for n << 2^64.
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw ContractError("Rng::below: n must be positive");
    return next_u64() % n;
  }

  // Standard normal via Box-Muller. Both variates are drawn fresh each
  // call (no cached spare), so the draw count per call is always two.
  double next_gaussian() {
    double u1 = next_double();
    double u2 = next_double();
    // Guard u1 == 0 so the log stays finite.
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
  }

  // Independent child stream. Children with distinct ids never overlap
  // because the key derivation is injective in (key, id).
  Rng split(std::uint64_t stream_id) const {
    Rng child(0);
    child.key_ = detail::mix64(key_ ^ detail::mix64(stream_id ^ 0xd6e8feb86659fd93ULL));
    child.counter_ = 0;
    return child;
  }

  // Fisher-Yates. Deterministic for a given stream state.
  template <typename T>
  void shuffle(std::vector<T>& xs) {
    for (std::size_t i = xs.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(xs[i - 1], xs[j]);
    }
  }

 private:
  static constexpr double kPi = 3.14159265358979323846;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

// Stable 64-bit hash for strings, used to derive per-run seeds from run ids.
inline std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace distaudit
