#include "stanet/numerics/random.hpp"

namespace stanet {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

Tensor randn(Shape shape, Rng& rng, double stddev) {
  Tensor t = Tensor::zeros(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : t.data()) v = dist(rng);
  return t;
}

Tensor rand_uniform(Shape shape, Rng& rng, double lo, double hi) {
  Tensor t = Tensor::zeros(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (double& v : t.data()) v = dist(rng);
  return t;
}

}  // namespace stanet
