#pragma once

// Deterministic randomness: a mt19937_64 engine plus hand-rolled draw
// helpers, so sequences are reproducible across standard-library
// implementations and the whole state serializes as the engine alone.

#include <cstdint>
#include <iosfwd>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace cmnas {

/// Stable sub-seed for a named stream: splitmix64(master ^ fnv1a(name)).
std::uint64_t sub_seed(std::uint64_t master, std::string_view name);

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  /// Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller (stateless across calls).
  double gaussian();

  /// Uniform integer in [0, n), rejection sampled (n > 0).
  std::uint64_t below(std::uint64_t n);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i)
      std::swap(v[i - 1], v[static_cast<std::size_t>(below(i))]);
  }

  std::string serialize() const;
  void deserialize(const std::string& text);

 private:
  std::mt19937_64 engine_;
};

}  // namespace cmnas
