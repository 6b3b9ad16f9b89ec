#pragma once

#include <cstdint>
#include <random>
#include <utility>
#include <vector>

namespace atmoe {

/// Deterministic generator: the raw stream is std::mt19937_64, whose output
/// sequence is fixed by the C++ standard. All derived draws (uniform, normal,
/// bounded integers) are computed here rather than through <random>
/// distributions, whose algorithms differ between standard libraries.
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Standard normal via Box-Muller; both variates of each pair are used.
  double normal();

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  /// Uniform integer in [0, n) by rejection sampling (no modulo bias).
  std::uint64_t index(std::uint64_t n);

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(index(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// SplitMix64 finaliser; used to derive independent stream seeds.
std::uint64_t mix_seed(std::uint64_t value);

/// Derives a child seed from a parent seed and a sequence of tags.
template <typename... Tags>
std::uint64_t derive_seed(std::uint64_t parent, Tags... tags) {
  std::uint64_t s = mix_seed(parent);
  ((s = mix_seed(s ^ (static_cast<std::uint64_t>(tags) + 0x9e3779b97f4a7c15ULL))), ...);
  return s;
}

/// Stable 64-bit FNV-1a hash of a byte range, used for seed tags and checksums.
std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t state = 0xcbf29ce484222325ULL);

}  // namespace atmoe
