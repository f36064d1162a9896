#pragma once

#include <cstdint>
#include <random>

#include "baseq/tensor.hpp"

namespace baseq {

/// Seeded generator. Every stochastic routine in the library takes one of
/// these (or a seed) so runs are reproducible.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }
  double uniform(double lo = 0.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
  }
  /// +1 or −1 with equal probability.
  double sign() { return (engine_() >> 63) ? 1.0 : -1.0; }
  std::uint64_t next() { return engine_(); }

  Tensor normal_tensor(Shape shape, double mean = 0.0, double stddev = 1.0);
  Tensor uniform_tensor(Shape shape, double lo, double hi);

 private:
  std::mt19937_64 engine_;
};

/// Derives an independent stream seed from a base seed and a salt.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt);

}  // namespace baseq
