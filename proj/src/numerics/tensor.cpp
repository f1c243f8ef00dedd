#include "stanet/numerics/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

#include "stanet/errors.hpp"

namespace stanet {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t extent : shape) n *= extent;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, std::vector<double> data) : node_(std::make_shared<TensorNode>()) {
  for (std::size_t extent : shape) {
    if (extent == 0) throw DimensionError("tensor extents must be positive, got " + shape_to_string(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("shape " + shape_to_string(shape) + " needs " + std::to_string(shape_numel(shape)) +
                         " values, got " + std::to_string(data.size()));
  }
  node_->shape = std::move(shape);
  node_->data = std::move(data);
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  const std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

Tensor Tensor::vector(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor({n}, std::move(values));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t m = rows.size();
  const std::size_t n = m ? rows.begin()->size() : 0;
  std::vector<double> values;
  values.reserve(m * n);
  for (const auto& row : rows) {
    if (row.size() != n) throw DimensionError("ragged matrix literal");
    values.insert(values.end(), row.begin(), row.end());
  }
  return Tensor({m, n}, std::move(values));
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t = zeros({n, n});
  for (std::size_t i = 0; i < n; ++i) t[i * n + i] = 1.0;
  return t;
}

void Tensor::require_defined() const {
  if (!node_) throw ContractError("use of an undefined tensor");
}

const Shape& Tensor::shape() const {
  require_defined();
  return node_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_to_string(s));
  }
  return s[axis];
}

std::size_t Tensor::numel() const {
  require_defined();
  return node_->data.size();
}

std::span<double> Tensor::data() {
  require_defined();
  return node_->data;
}

std::span<const double> Tensor::data() const {
  require_defined();
  return node_->data;
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  const Shape& s = shape();
  if (index.size() != s.size()) throw DimensionError("index rank does not match " + shape_to_string(s));
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (std::size_t i : index) {
    if (i >= s[axis]) throw DimensionError("index out of range for " + shape_to_string(s));
    flat = flat * s[axis] + i;
    ++axis;
  }
  return node_->data[flat];
}

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_to_string(shape()));
  return node_->data[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool value) {
  require_defined();
  node_->requires_grad = value;
  return *this;
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw ContractError("tensor " + shape_to_string(shape()) + " has no gradient");
  return node_->grad;
}

std::span<double> Tensor::mutable_grad() {
  require_defined();
  if (node_->grad.empty()) node_->grad.assign(node_->data.size(), 0.0);
  return node_->grad;
}

void Tensor::zero_grad() {
  require_defined();
  node_->grad.assign(node_->data.size(), 0.0);
}

void Tensor::clear_grad() {
  require_defined();
  node_->grad.clear();
}

Tensor Tensor::clone() const {
  require_defined();
  return Tensor(node_->shape, node_->data);
}

bool Tensor::all_finite() const {
  return std::all_of(data().begin(), data().end(), [](double v) { return std::isfinite(v); });
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  return std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(double)) == 0;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("max_abs_diff: " + shape_to_string(a.shape()) + " vs " + shape_to_string(b.shape()));
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

}  // namespace stanet
