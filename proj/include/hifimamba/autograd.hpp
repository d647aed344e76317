/*
 * SPDX-License-Identifier: Apache-2.0
 */
#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "hifimamba/tensor.hpp"

/// Minimal tape-free reverse-mode differentiation over whole tensors.
///
/// Every operation produces a Node that remembers its inputs and a closure that
/// pushes the node's gradient back into them. The graph is owned by the result
/// Var, so dropping the result releases the forward activations.
namespace hifi::ag {

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  Tensor& grad_buffer() {
    if (grad.empty() && !value.empty()) grad = Tensor(value.shape());
    return grad;
  }
  void zero_grad() { grad = Tensor(); }
};

namespace detail {
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode(); }

/// Disables graph recording for the lifetime of the guard.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false) : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t dim(std::size_t i) const { return node_->value.dim(i); }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  /// Gradient accumulated by the last backward pass (zeros if never touched).
  Tensor grad() const {
    if (node_->grad.empty()) return Tensor(node_->value.shape());
    return node_->grad;
  }
  void zero_grad() { node_->zero_grad(); }
  const std::shared_ptr<Node>& node() const { return node_; }

  /// Leaf copy of the current value, cut from the graph.
  Var detach() const { return Var(node_->value, false); }

 private:
  std::shared_ptr<Node> node_;
};

/// Builds an op result. `bw` is only kept when some input needs a gradient.
inline Var make_result(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> bw) {
  auto out = std::make_shared<Node>();
  out->value = std::move(value);
  if (!grad_enabled()) return Var(out);
  bool any = false;
  for (const auto& v : inputs) any = any || v.requires_grad();
  if (!any) return Var(out);
  out->requires_grad = true;
  out->inputs.reserve(inputs.size());
  for (const auto& v : inputs) out->inputs.push_back(v.node());
  out->backward = std::move(bw);
  return Var(out);
}

/// Runs reverse accumulation from `root`. Without a seed, root must be a scalar.
inline void backward(const Var& root, const Tensor* seed = nullptr) {
  if (!root.requires_grad()) return;
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.node().get(), 0}};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->inputs.size()) {
      Node* child = n->inputs[i++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  Node& r = *root.node();
  if (seed) {
    r.value.require_same(*seed);
    r.grad = *seed;
  } else {
    if (r.value.size() != 1) throw ShapeMismatch("backward() without seed needs a scalar root");
    r.grad = Tensor(r.value.shape(), 1.0);
  }
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
  // Interior gradients are not needed after the sweep.
  for (Node* n : order)
    if (n->backward) n->grad = Tensor();
}

}  // namespace hifi::ag
