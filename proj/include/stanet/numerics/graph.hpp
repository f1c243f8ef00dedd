#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "stanet/numerics/tensor.hpp"

namespace stanet {

// Tape of differentiable operations, replayed in reverse by backward().
//
// Operations record onto the graph installed for the current thread by a
// GraphScope. With no active graph nothing is recorded, which is how frozen
// inference runs.
class Graph {
 public:
  // Reads the output node's gradient and accumulates into the inputs.
  using BackwardFn = std::function<void(const TensorNode& output)>;

  struct Entry {
    std::string op;
    std::vector<std::shared_ptr<TensorNode>> inputs;
    std::shared_ptr<TensorNode> output;
    BackwardFn backward;
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  void record(std::string op, std::vector<std::shared_ptr<TensorNode>> inputs, std::shared_ptr<TensorNode> output,
              BackwardFn backward);

  // Seeds d(loss)/d(loss) = 1 and replays the tape once. Throws ContractError
  // for a non-scalar or unrecorded loss, or when called twice without reset().
  void backward(const Tensor& loss);

  // Drops every entry and re-arms backward(). Leaf gradients are untouched.
  void reset();

  std::size_t size() const { return entries_.size(); }
  const std::vector<Entry>& entries() const { return entries_; }
  bool consumed() const { return consumed_; }

  // Graph installed on the calling thread, or nullptr.
  static Graph* active();

 private:
  friend class GraphScope;

  std::vector<Entry> entries_;
  bool consumed_ = false;
};

// Installs a graph as the calling thread's recording target for its lifetime.
// Passing nullptr suspends recording (used for frozen inference).
class GraphScope {
 public:
  explicit GraphScope(Graph* graph);
  explicit GraphScope(Graph& graph) : GraphScope(&graph) {}
  ~GraphScope();
  GraphScope(const GraphScope&) = delete;
  GraphScope& operator=(const GraphScope&) = delete;

 private:
  Graph* previous_;
};

// Suspends recording on this thread.
class NoGradScope : public GraphScope {
 public:
  NoGradScope() : GraphScope(nullptr) {}
};

namespace detail {

// True when an op with these inputs must be recorded.
bool should_record(std::initializer_list<const Tensor*> inputs);
bool should_record(const std::vector<Tensor>& inputs);

// Gradient buffer of an input, allocated on first use; nullptr for inputs
// that do not require gradients.
std::vector<double>* grad_sink(TensorNode& node);

}  // namespace detail

}  // namespace stanet
