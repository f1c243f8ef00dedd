#pragma once

#include <functional>
#include <vector>

#include "stanet/numerics/random.hpp"
#include "stanet/numerics/tensor.hpp"

namespace stanet {

using ScalarFn = std::function<double(const Tensor&)>;

// Central differences (fn(x + h e_i) - fn(x - h e_i)) / 2h for every element
// of x. fn is evaluated on perturbed copies; x itself is never modified.
// Throws NumericError when any evaluation is non-finite.
Tensor finite_diff_grad(const ScalarFn& fn, const Tensor& x, double h = 1e-4);

// |analytic - numeric| / max(|analytic|, |numeric|, floor). The floor keeps
// entries that are both ~0 from reporting noise as large relative error.
double relative_error(double analytic, double numeric, double floor = 1e-6);
double max_relative_error(const Tensor& analytic, const Tensor& numeric, double floor = 1e-6);

using TensorFn = std::function<Tensor(const std::vector<Tensor>&)>;

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::vector<double> per_input;  // worst entry for each input
};

// Compares reverse-mode gradients of sum(op(inputs) * R), with R a fixed
// random projection, against finite_diff_grad for every input.
GradCheckResult check_gradients(const TensorFn& op, const std::vector<Tensor>& inputs, Rng& rng, double h = 1e-4,
                                double floor = 1e-6);

}  // namespace stanet
