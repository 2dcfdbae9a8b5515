#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "effiseg/tensor.hpp"

namespace effiseg {

namespace detail {

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

template <typename Scalar>
struct Node {
  Tensor4<Scalar> value;
  Tensor4<Scalar> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this->grad and accumulates into the parents' grads.
  std::function<void(const Tensor4<Scalar>&)> backward;

  Tensor4<Scalar>& grad_buffer() {
    if (grad.empty()) grad = Tensor4<Scalar>::zeros(value.shape());
    return grad;
  }
};

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables graph recording for its lifetime (inference, evaluation, optimizer updates).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Handle to a value in a reverse-mode autodiff graph. Copies share the node.
template <typename Scalar>
class Var {
 public:
  using NodePtr = std::shared_ptr<detail::Node<Scalar>>;

  Var() = default;
  explicit Var(NodePtr node) : node_(std::move(node)) {}

  static Var constant(Tensor4<Scalar> value) {
    auto node = std::make_shared<detail::Node<Scalar>>();
    node->value = std::move(value);
    return Var(std::move(node));
  }

  static Var parameter(Tensor4<Scalar> value) {
    auto node = std::make_shared<detail::Node<Scalar>>();
    node->value = std::move(value);
    node->requires_grad = true;
    return Var(std::move(node));
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor4<Scalar>& value() const { return node_->value; }
  Tensor4<Scalar>& value() { return node_->value; }
  const Shape4& shape() const { return node_->value.shape(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }

  /// Accumulated gradient; zero-filled if nothing has flowed back yet.
  const Tensor4<Scalar>& grad() const { return node_->grad_buffer(); }
  Tensor4<Scalar>& grad() { return node_->grad_buffer(); }
  void zero_grad() {
    if (!node_->grad.empty()) node_->grad.array().setZero();
  }

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

/// Creates the result node of an operation. The backward closure is kept only
/// when recording is enabled and some parent requires a gradient.
template <typename Scalar, typename Backward>
Var<Scalar> record(Tensor4<Scalar> value, std::vector<Var<Scalar>> parents, Backward&& backward) {
  auto node = std::make_shared<detail::Node<Scalar>>();
  node->value = std::move(value);
  if (grad_enabled()) {
    for (const auto& p : parents) {
      if (p.requires_grad()) {
        node->requires_grad = true;
        break;
      }
    }
  }
  if (node->requires_grad) {
    node->parents.reserve(parents.size());
    for (const auto& p : parents) node->parents.push_back(p.node());
    node->backward = std::forward<Backward>(backward);
  }
  return Var<Scalar>(std::move(node));
}

/// Adds `delta` into the gradient of `parent` if it participates in differentiation.
template <typename Scalar, typename Expr>
void accumulate(const typename Var<Scalar>::NodePtr& parent, const Expr& delta) {
  if (!parent->requires_grad) return;
  parent->grad_buffer().array() += delta;
}

/// Reverse-mode sweep from a scalar (1,1,1,1) root, seeding d(root)/d(root) = 1.
template <typename Scalar>
void backward(const Var<Scalar>& root) {
  if (root.shape().size() != 1) {
    throw ShapeError("backward() needs a scalar root, got " + root.shape().str());
  }
  if (!root.requires_grad()) return;

  using NodePtr = typename Var<Scalar>::NodePtr;
  std::vector<detail::Node<Scalar>*> order;
  std::unordered_set<detail::Node<Scalar>*> seen;
  // Iterative post-order DFS: parents land before children in `order`.
  std::vector<std::pair<detail::Node<Scalar>*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      const NodePtr& parent = node->parents[next++];
      if (parent->requires_grad && seen.insert(parent.get()).second) {
        stack.emplace_back(parent.get(), 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->grad_buffer().array() += Scalar(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node<Scalar>* node = *it;
    if (node->backward && !node->grad.empty()) node->backward(node->grad);
  }
}

}  // namespace effiseg
