#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string>
#include <vector>

namespace csaw {

/// Deterministic RNG used everywhere randomness is needed. Wraps mt19937_64
/// but draws uniforms/normals with fixed arithmetic (std distributions are
/// implementation-defined, which would break cross-toolchain determinism).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  /// splitmix64-based mixing for deriving independent substreams from
  /// (seed, stream tag, epoch, sample id, ...).
  static std::uint64_t mix(std::initializer_list<std::uint64_t> parts);

  std::uint64_t next_u64() { return eng_(); }

  /// Uniform in [0, 1) with 53-bit resolution.
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller (no cached spare, keeps state = engine state).
  double normal();

  /// Unbiased integer in [0, n) by rejection.
  std::uint64_t below(std::uint64_t n);

  /// Fisher-Yates shuffle.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  std::string state() const;
  void set_state(const std::string& s);

 private:
  std::mt19937_64 eng_;
};

}  // namespace csaw
