#include "stanet/numerics/graph.hpp"

#include "stanet/errors.hpp"

namespace stanet {

namespace {
thread_local Graph* t_active_graph = nullptr;
}

Graph* Graph::active() { return t_active_graph; }

void Graph::record(std::string op, std::vector<std::shared_ptr<TensorNode>> inputs,
                   std::shared_ptr<TensorNode> output, BackwardFn backward) {
  if (consumed_) throw ContractError("recording '" + op + "' onto a graph that was already differentiated");
  output->requires_grad = true;
  entries_.push_back(Entry{std::move(op), std::move(inputs), std::move(output), std::move(backward)});
}

void Graph::backward(const Tensor& loss) {
  if (consumed_) throw ContractError("backward() called twice on the same graph without reset()");
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got " +
                        (loss.defined() ? shape_to_string(loss.shape()) : std::string("undefined")));
  }
  std::size_t last = entries_.size();
  for (std::size_t i = entries_.size(); i-- > 0;) {
    if (entries_[i].output == loss.node()) {
      last = i;
      break;
    }
  }
  if (last == entries_.size()) throw ContractError("backward() loss was not produced by this graph");

  consumed_ = true;
  loss.node()->grad.assign(1, 1.0);
  for (std::size_t i = last + 1; i-- > 0;) {
    Entry& e = entries_[i];
    if (e.output->grad.empty()) continue;
    e.backward(*e.output);
  }
}

void Graph::reset() {
  entries_.clear();
  consumed_ = false;
}

GraphScope::GraphScope(Graph* graph) : previous_(t_active_graph) { t_active_graph = graph; }

GraphScope::~GraphScope() { t_active_graph = previous_; }

namespace detail {

bool should_record(std::initializer_list<const Tensor*> inputs) {
  if (!Graph::active()) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

bool should_record(const std::vector<Tensor>& inputs) {
  if (!Graph::active()) return false;
  for (const Tensor& t : inputs) {
    if (t.requires_grad()) return true;
  }
  return false;
}

std::vector<double>* grad_sink(TensorNode& node) {
  if (!node.requires_grad) return nullptr;
  if (node.grad.empty()) node.grad.assign(node.data.size(), 0.0);
  return &node.grad;
}

}  // namespace detail

}  // namespace stanet
