#pragma once

#include <cstdint>
#include <random>

namespace vlmprobe {

/// Seeded generator with platform-independent draws.
///
/// std::uniform_int_distribution and std::normal_distribution are
/// implementation-defined, so corpus bytes and toy weights would differ between
/// standard libraries. Only the raw mt19937_64 stream is standardized; every
/// draw here is derived from it explicitly.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, bound). bound must be > 0.
  std::uint64_t below(std::uint64_t bound);

  /// Standard normal via Box-Muller (one value per call, no caching).
  double normal();

  /// Independent child seed for stream `index` (splitmix64 of seed and index).
  static std::uint64_t derive(std::uint64_t seed, std::uint64_t index);

 private:
  std::mt19937_64 engine_;
};

}  // namespace vlmprobe
