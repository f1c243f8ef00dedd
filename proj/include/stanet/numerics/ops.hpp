#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "stanet/numerics/tensor.hpp"

// Differentiable tensor operations. Every function records itself on the
// active graph when any input requires gradients.
namespace stanet::ops {

// ---- linear algebra -------------------------------------------------------

// [m x k] * [k x n] -> [m x n]
Tensor matmul(const Tensor& a, const Tensor& b);
// [m x k] * [n x k]^T -> [m x n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);
// [m x n] -> [n x m]
Tensor transpose(const Tensor& a);

// ---- elementwise ----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double offset);
Tensor relu(const Tensor& a);
Tensor log(const Tensor& a);
Tensor square(const Tensor& a);
Tensor reciprocal(const Tensor& a);
// Sum of a non-empty list of equally shaped tensors.
Tensor add_n(const std::vector<Tensor>& terms);

// ---- reductions -----------------------------------------------------------

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// ---- row-wise ([m x n]) ---------------------------------------------------

// Softmax over each row, stabilised by subtracting the row maximum.
Tensor softmax_rows(const Tensor& x);
Tensor log_softmax_rows(const Tensor& x);
// Mean negative log-likelihood of labels[i] under row i of logits.
Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels);
// x[m x n] + bias[n] on every row.
Tensor add_row_bias(const Tensor& x, const Tensor& bias);
// Row i of x[p x c] scaled by s[i].
Tensor scale_rows(const Tensor& x, const Tensor& s);
// Zero-mean, unit-variance normalisation of each row (no affine terms).
Tensor layer_norm_rows(const Tensor& x, double eps = 1e-5);

// Cosine similarity of each row pair of q, a [p x c] -> [p]. The norm product
// is floored at 1e-12 so all-zero rows score 0 rather than NaN.
Tensor patch_cosine(const Tensor& q, const Tensor& a);
inline constexpr double kCosineEps = 1e-12;

// ---- feature maps ([c x h x w]) -------------------------------------------

// Every channel of f multiplied positionwise by s ([h x w] or [h*w]).
Tensor broadcast_mul_spatial(const Tensor& f, const Tensor& s);
// Channel i of f scaled by v[i].
Tensor broadcast_mul_channel(const Tensor& f, const Tensor& v);
// [c x h x w] -> [c]
Tensor global_avg_pool(const Tensor& f);
// x[ci x H x W] (*) w[co x ci x k x k] + b[co], stride 1, zero padding.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t padding);
// Non-overlapping 2x2 max pooling; odd trailing rows/columns are dropped.
Tensor max_pool2(const Tensor& x);

// ---- shape ----------------------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape);
// Concatenation along axis 0; trailing extents must agree.
Tensor concat(const std::vector<Tensor>& parts);
// [c x h x w] -> [h*w x c]
Tensor to_positions(const Tensor& f);
// [h*w x c] -> [c x h x w]
Tensor from_positions(const Tensor& x, std::size_t h, std::size_t w);

// ---- vectors --------------------------------------------------------------

// v / ||v||_2; throws NumericError for a zero vector.
Tensor l2_normalize(const Tensor& v);

// ---- non-differentiable helpers -------------------------------------------

// Copy of row i of a matrix, detached.
Tensor row(const Tensor& m, std::size_t i);
// Counter-clockwise rotation of the two trailing (spatial) axes by
// quarter_turns * 90 degrees. Detached.
Tensor rot90(const Tensor& x, int quarter_turns);

}  // namespace stanet::ops
