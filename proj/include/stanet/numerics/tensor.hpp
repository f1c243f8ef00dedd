#pragma once

#include <cstddef>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace stanet {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

// Storage shared by every handle to the same tensor. The graph keeps these
// alive until it is reset.
struct TensorNode {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty means "no gradient yet"
  bool requires_grad = false;
};

// Dense row-major array of doubles with an optional gradient buffer.
//
// Tensor is a handle: copies alias the same storage, which is what lets the
// tape write gradients back into parameters. Use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor vector(std::vector<double> values);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor identity(std::size_t n);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<double> data();
  std::span<const double> data() const;
  double& operator[](std::size_t i) { return node_->data[i]; }
  double operator[](std::size_t i) const { return node_->data[i]; }
  double at(std::initializer_list<std::size_t> index) const;
  // Value of a one-element tensor.
  double item() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool value);

  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();
  void clear_grad();

  // Deep copy with no gradient and requires_grad off.
  Tensor clone() const;
  // Same values, new storage, never recorded.
  Tensor detach() const { return clone(); }

  bool all_finite() const;
  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

  const std::shared_ptr<TensorNode>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}

 private:
  void require_defined() const;

  std::shared_ptr<TensorNode> node_;
};

// Bitwise equality of shape and data.
bool bit_equal(const Tensor& a, const Tensor& b);
// Largest absolute elementwise difference; shapes must match.
double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace stanet
