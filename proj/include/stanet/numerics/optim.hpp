#pragma once

#include <vector>

#include "stanet/numerics/tensor.hpp"

namespace stanet {

// p <- p - lr * grad(p), then clears each gradient. Every parameter must
// carry a gradient (ContractError otherwise); lr must be non-negative.
void sgd_step(std::vector<Tensor>& params, double lr);

// Rescales all gradients so their joint L2 norm is at most max_norm.
// Returns the norm before clipping.
double clip_grad_norm(std::vector<Tensor>& params, double max_norm);

}  // namespace stanet
