#include "stanet/numerics/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "stanet/errors.hpp"
#include "stanet/numerics/graph.hpp"
#include "stanet/numerics/ops.hpp"

namespace stanet {

Tensor finite_diff_grad(const ScalarFn& fn, const Tensor& x, double h) {
  if (!(h > 0.0)) throw ContractError("finite_diff_grad: step must be positive");
  NoGradScope no_grad;
  Tensor probe = x.clone();
  Tensor grad = Tensor::zeros(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double original = probe[i];
    probe[i] = original + h;
    const double up = fn(probe);
    probe[i] = original - h;
    const double down = fn(probe);
    probe[i] = original;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericError("finite_diff_grad: non-finite evaluation at element " + std::to_string(i));
    }
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

double relative_error(double analytic, double numeric, double floor) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / scale;
}

double max_relative_error(const Tensor& analytic, const Tensor& numeric, double floor) {
  if (analytic.shape() != numeric.shape()) {
    throw DimensionError("max_relative_error: " + shape_to_string(analytic.shape()) + " vs " +
                         shape_to_string(numeric.shape()));
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.numel(); ++i) {
    worst = std::max(worst, relative_error(analytic[i], numeric[i], floor));
  }
  return worst;
}

GradCheckResult check_gradients(const TensorFn& op, const std::vector<Tensor>& inputs, Rng& rng, double h,
                                double floor) {
  std::vector<Tensor> base;
  base.reserve(inputs.size());
  for (const Tensor& t : inputs) base.push_back(t.clone());

  Tensor projection;
  {
    NoGradScope no_grad;
    projection = randn(op(base).shape(), rng);
  }
  auto objective = [&](const std::vector<Tensor>& xs) { return ops::sum(ops::mul(op(xs), projection)); };

  std::vector<Tensor> tracked;
  for (const Tensor& t : base) tracked.push_back(t.clone().set_requires_grad(true));
  Graph graph;
  {
    GraphScope scope(graph);
    Tensor loss = objective(tracked);
    graph.backward(loss);
  }

  GradCheckResult result;
  for (std::size_t i = 0; i < base.size(); ++i) {
    Tensor analytic = tracked[i].has_grad() ? Tensor(base[i].shape(), std::vector<double>(tracked[i].grad().begin(),
                                                                                            tracked[i].grad().end()))
                                            : Tensor::zeros(base[i].shape());
    Tensor numeric = finite_diff_grad(
        [&](const Tensor& x) {
          std::vector<Tensor> xs = base;
          xs[i] = x;
          return objective(xs).item();
        },
        base[i], h);
    const double err = max_relative_error(analytic, numeric, floor);
    result.per_input.push_back(err);
    result.max_relative_error = std::max(result.max_relative_error, err);
  }
  return result;
}

}  // namespace stanet
