#pragma once

#include <cstdint>
#include <random>

#include "stanet/numerics/tensor.hpp"

namespace stanet {

using Rng = std::mt19937_64;

// SplitMix64 finaliser; derives independent stream seeds from (seed, index).
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index);

Tensor randn(Shape shape, Rng& rng, double stddev = 1.0);
Tensor rand_uniform(Shape shape, Rng& rng, double lo, double hi);

}  // namespace stanet
