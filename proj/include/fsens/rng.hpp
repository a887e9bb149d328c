#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

namespace fsens {

/// Seeded generator with platform-stable derived draws.
///
/// The engine (mt19937_64) has a standardized output sequence, but the
/// standard distributions do not, so bounded integers, uniforms and normals
/// are derived here by hand. Every sampling routine in the project goes
/// through this type; there is no global generator.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  /// Uniform integer in [0, bound). bound must be > 0.
  std::uint64_t below(std::uint64_t bound);

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform();

  /// Standard normal via Box-Muller (no cached second value).
  double normal();

  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

/// Mixes a tag into a seed. Used to derive independent sub-streams
/// (e.g. per task, per format) from one master seed.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag);

/// `k` distinct indices from [0, n) in draw order (sparse partial
/// Fisher-Yates, O(k) memory).
std::vector<std::uint64_t> sample_without_replacement(std::uint64_t n, std::uint64_t k, Rng& rng);

}  // namespace fsens
