#pragma once

// Minimal tape-free reverse-mode automatic differentiation. Every operation
// produces a Var that owns its value and, when any input requires a gradient,
// a closure that propagates the incoming gradient to its parents.

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dda/tensor.hpp"

namespace dda {

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<NodePtr> parents;
  std::function<void(Node&)> backward_fn;

  Tensor& grad_buffer() {
    if (grad.size() != value.size()) grad = Tensor(value.shape());
    return grad;
  }
  bool has_grad() const { return grad.size() == value.size() && !value.empty(); }
};

namespace detail {
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode(); }

/// Disables graph recording for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false) : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(NodePtr node) : node_(std::move(node)) {}

  bool defined() const noexcept { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t size() const { return node_->value.size(); }
  double item() const { return node_->value[0]; }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  /// Gradient accumulated by the last backward pass(es); zeros if none reached this node.
  Tensor grad() const {
    if (node_->has_grad()) return node_->grad;
    return Tensor(node_->value.shape());
  }
  void zero_grad() {
    if (node_->has_grad()) node_->grad.fill(0.0);
  }

  /// Leaf copy of the value, cut from the graph.
  Var detach() const { return Var(node_->value, false); }

  /// Back-propagates from this scalar.
  void backward() const;

  const NodePtr& node() const noexcept { return node_; }

 private:
  NodePtr node_;
};

/// Builds the output node of an operation. `fn` is only kept when gradient
/// recording is on and at least one parent needs a gradient.
inline Var make_result(Tensor value, std::vector<Var> parents, std::function<void(Node&)> fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (grad_enabled()) {
    bool needs = false;
    for (const auto& p : parents) needs = needs || p.requires_grad();
    if (needs) {
      node->requires_grad = true;
      node->parents.reserve(parents.size());
      for (auto& p : parents) node->parents.push_back(p.node());
      node->backward_fn = std::move(fn);
    }
  }
  return Var(std::move(node));
}

inline void Var::backward() const {
  if (!node_->requires_grad) return;
  if (node_->value.size() != 1) throw ShapeError("backward() requires a scalar root, got " + to_string(shape()));

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && n->has_grad()) n->backward_fn(*n);
  }
}

}  // namespace dda
