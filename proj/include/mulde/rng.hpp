#pragma once

#include <array>
#include <cstdint>

namespace mulde {

/// xoshiro256** seeded through splitmix64. The output stream depends only on
/// the seed, so runs are reproducible across platforms and standard libraries
/// (unlike std::normal_distribution).
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform();

  /// Uniform integer in [0, bound). `bound` must be positive.
  std::uint64_t uniform_index(std::uint64_t bound);

  /// Standard normal via Box-Muller. Consumes exactly two uniforms per call
  /// and returns the cosine branch; no value is cached between calls.
  double normal();

  /// Derive an independent stream, e.g. one per subsystem.
  Rng fork(std::uint64_t stream_id) const;

 private:
  std::array<std::uint64_t, 4> state_;
};

}  // namespace mulde
