#include "stanet/numerics/optim.hpp"

#include <cmath>
#include <string>

#include "stanet/errors.hpp"

namespace stanet {

void sgd_step(std::vector<Tensor>& params, double lr) {
  if (!(lr >= 0.0)) throw ContractError("sgd_step: learning rate must be non-negative");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].has_grad()) {
      throw ContractError("sgd_step: parameter " + std::to_string(i) + " " + shape_to_string(params[i].shape()) +
                          " has no gradient");
    }
  }
  for (Tensor& p : params) {
    auto values = p.data();
    auto grad = p.grad();
    for (std::size_t i = 0; i < values.size(); ++i) values[i] -= lr * grad[i];
    p.clear_grad();
  }
}

double clip_grad_norm(std::vector<Tensor>& params, double max_norm) {
  double sq = 0.0;
  for (const Tensor& p : params) {
    if (!p.has_grad()) continue;
    for (double g : p.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double factor = max_norm / norm;
    for (Tensor& p : params) {
      if (!p.has_grad()) continue;
      for (double& g : p.mutable_grad()) g *= factor;
    }
  }
  return norm;
}

}  // namespace stanet
