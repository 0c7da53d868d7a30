#pragma once

#include <cstdint>
#include <string_view>

#include "rgflow/tensor.hpp"

namespace rgflow {

// xoshiro256** seeded through SplitMix64. Normals use the Box-Muller transform
// and return both variates of each pair in order. The stream depends only on
// the seed, never on the platform or standard library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();
  // Uniform on [0, 1) with 53 random bits.
  double uniform();
  double normal();
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

 private:
  std::uint64_t s_[4];
  double spare_ = 0.0;
  bool has_spare_ = false;
};

std::uint64_t splitmix64(std::uint64_t& state);

// Deterministic per-consumer seed: "init", "shuffle", "noise", "sample", ...
std::uint64_t sub_seed(std::uint64_t seed, std::string_view label);

// I.i.d. standard normal draws in row-major order.
Tensor normal_sample(Rng& rng, const Shape& shape);

}  // namespace rgflow
