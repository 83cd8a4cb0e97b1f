#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "fesvibs/error.hpp"

namespace fesvibs {

// Dynamic (define-by-run) reverse-mode autodiff. Every op records a node
// holding the forward value, its parents and a backward rule; the graph is
// rebuilt per batch and freed when the last tensor handle referencing it
// goes out of scope. Gradients accumulate: repeated backward() calls without
// zero_grad() sum their contributions.
//
// A graph and its tensors belong to one execution context at a time; no
// internal locking.

template <typename S>
struct NodeT {
  std::vector<std::size_t> shape;
  std::vector<S> value;
  std::vector<S> grad;  // sized lazily, same length as value
  bool requires_grad = false;
  std::vector<std::shared_ptr<NodeT>> parents;
  // Reads this node's grad and accumulates into parents' grads.
  std::function<void(NodeT&)> backprop;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), S(0));
  }
};

// When false, ops compute values without recording the graph (evaluation
// paths). Thread-local so concurrent forward passes stay independent.
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_mode()) { grad_mode() = false; }
  ~NoGradGuard() { grad_mode() = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline std::size_t shape_product(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

inline std::string shape_str(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

template <typename S>
class TensorT {
 public:
  using Node = NodeT<S>;
  using scalar_type = S;

  TensorT() = default;

  static TensorT zeros(std::vector<std::size_t> shape,
                       bool requires_grad = false) {
    return filled(std::move(shape), S(0), requires_grad);
  }

  static TensorT filled(std::vector<std::size_t> shape, S v,
                        bool requires_grad = false) {
    auto node = std::make_shared<Node>();
    node->value.assign(shape_product(shape), v);
    node->shape = std::move(shape);
    node->requires_grad = requires_grad;
    return TensorT(std::move(node));
  }

  static TensorT from_data(std::vector<std::size_t> shape, std::vector<S> data,
                           bool requires_grad = false) {
    if (shape_product(shape) != data.size()) {
      throw DimensionError("tensor: shape " + shape_str(shape) +
                           " does not match data length " +
                           std::to_string(data.size()));
    }
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(data);
    node->requires_grad = requires_grad;
    return TensorT(std::move(node));
  }

  static TensorT scalar(S v, bool requires_grad = false) {
    return from_data({1}, {v}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const std::vector<std::size_t>& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }

  std::span<const S> data() const& { return node_->value; }
  // Spans must not outlive the tensor that owns the storage.
  std::span<const S> data() const&& = delete;
  // Leaf mutation for optimizers and initialization; using this on an
  // interior graph node invalidates recorded backward rules.
  std::span<S> mutable_data() & { return node_->value; }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  std::span<const S> grad() const& {
    if (!has_grad())
      throw ValidationError("tensor has no gradient populated");
    return node_->grad;
  }
  std::span<const S> grad() const&& = delete;
  std::vector<S> grad_copy() const {
    return {grad().begin(), grad().end()};
  }

  void zero_grad() { node_->grad.clear(); }

  // A leaf copy of the values, detached from any recorded graph.
  TensorT detached(bool requires_grad = false) const {
    auto node = std::make_shared<Node>();
    node->shape = node_->shape;
    node->value = node_->value;
    node->requires_grad = requires_grad;
    return TensorT(std::move(node));
  }

  S item() const {
    if (size() != 1)
      throw ValidationError("item() on tensor of size " +
                            std::to_string(size()));
    return node_->value[0];
  }

  std::shared_ptr<Node> node() const { return node_; }

  explicit TensorT(std::shared_ptr<Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<Node> node_;
};

// Seeds the root with `seed` (tensor-shaped) and runs reverse-topological
// accumulation. Every requires_grad leaf reachable from the root ends up
// with a populated grad; each node's rule fires exactly once.
template <typename S>
void backward(const TensorT<S>& root, std::vector<S> seed) {
  auto root_node = root.node();
  if (!root_node || !root_node->requires_grad) {
    throw ValidationError(
        "backward: tensor is not attached to a recorded graph");
  }
  if (seed.size() != root_node->value.size()) {
    throw DimensionError("backward: seed gradient length " +
                         std::to_string(seed.size()) +
                         " does not match tensor size " +
                         std::to_string(root_node->value.size()));
  }

  // Iterative post-order over requires_grad nodes.
  std::vector<NodeT<S>*> order;
  std::unordered_set<NodeT<S>*> visited;
  struct Frame {
    NodeT<S>* node;
    std::size_t next_parent;
  };
  std::vector<Frame> stack;
  stack.push_back({root_node.get(), 0});
  visited.insert(root_node.get());
  while (!stack.empty()) {
    Frame& top = stack.back();
    if (top.next_parent < top.node->parents.size()) {
      NodeT<S>* parent = top.node->parents[top.next_parent++].get();
      if (parent->requires_grad && !visited.count(parent)) {
        visited.insert(parent);
        stack.push_back({parent, 0});
      }
    } else {
      order.push_back(top.node);
      stack.pop_back();
    }
  }

  root_node->ensure_grad();
  for (std::size_t i = 0; i < seed.size(); ++i)
    root_node->grad[i] += seed[i];

  // `order` is post-order, so iterating backwards visits each node before
  // any of its parents.
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodeT<S>* node = *it;
    if (node->backprop) {
      node->ensure_grad();
      node->backprop(*node);
    }
  }
}

// Scalar-loss entry point.
template <typename S>
void backward(const TensorT<S>& loss) {
  auto node = loss.node();
  if (!node || node->value.size() != 1) {
    throw ValidationError("backward: loss must be a scalar tensor");
  }
  backward(loss, std::vector<S>{S(1)});
}

using Tensor = TensorT<double>;

}  // namespace fesvibs
