// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode autodiff value type. A Tensor is a shared handle to a Node
// holding row-major data, an optional gradient buffer and, for results of
// differentiable ops, the parents plus a closure that pushes the node's
// gradient into them.
#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "textfuse/errors.hpp"

namespace textfuse {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

namespace detail {
inline thread_local bool grad_enabled = true;
}

inline bool grad_enabled() { return detail::grad_enabled; }

// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <class T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  bool is_leaf = true;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  // Lazily allocates the gradient buffer.
  T* grad_buffer() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    return grad.data();
  }
};

template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    for (std::size_t d : shape)
      if (d == 0) throw DimensionError("tensor dimensions must be positive: " + shape_str(shape));
    if (shape_numel(shape) != data.size())
      throw DimensionError("data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }
  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
  }
  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor({1}, {value}, requires_grad);
  }

  static Tensor from_node(std::shared_ptr<Node<T>> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  // Direct write access; reserved for optimizers and initializers acting on
  // leaves outside any recorded graph.
  std::span<T> mutable_data() { return node_->data; }
  // Rvalue overload copies so range-for over a temporary stays valid.
  const std::vector<T>& values() const& { return node_->data; }
  std::vector<T> values() const&& { return node_->data; }

  bool has_grad() const { return node_->grad.size() == node_->data.size(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return {node_->grad_buffer(), node_->data.size()}; }
  void zero_grad() { node_->grad.assign(node_->data.size(), T(0)); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) {
    if (!node_->is_leaf) throw ContractError("requires_grad can only be set on leaf tensors");
    node_->requires_grad = on;
  }
  bool is_leaf() const { return node_->is_leaf; }

  T item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }
  T operator[](std::size_t i) const { return node_->data[i]; }

  // Fresh leaf with copied values and no history.
  Tensor detach() const { return Tensor(shape(), node_->data, false); }
  // Fresh leaf with copied values that records gradients.
  Tensor clone_leaf() const { return Tensor(shape(), node_->data, true); }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

// Builds an op result; attaches history only when recording is on and some
// parent needs gradients.
template <class T>
Tensor<T> make_result(Shape shape, std::vector<T> data, const char* op,
                      std::initializer_list<const Tensor<T>*> parents,
                      std::function<void(Node<T>&)> backward_fn) {
  Tensor<T> out(std::move(shape), std::move(data), false);
  bool any = false;
  for (const Tensor<T>* p : parents) any = any || p->requires_grad();
  if (any && grad_enabled()) {
    Node<T>* n = out.node();
    n->requires_grad = true;
    n->is_leaf = false;
    n->op = op;
    for (const Tensor<T>* p : parents) n->parents.push_back(p->node_ptr());
    n->backward_fn = std::move(backward_fn);
  }
  return out;
}

template <class T>
Tensor<T> make_result(Shape shape, std::vector<T> data, const char* op,
                      const std::vector<Tensor<T>>& parents,
                      std::function<void(Node<T>&)> backward_fn) {
  Tensor<T> out(std::move(shape), std::move(data), false);
  bool any = false;
  for (const auto& p : parents) any = any || p.requires_grad();
  if (any && grad_enabled()) {
    Node<T>* n = out.node();
    n->requires_grad = true;
    n->is_leaf = false;
    n->op = op;
    for (const auto& p : parents) n->parents.push_back(p.node_ptr());
    n->backward_fn = std::move(backward_fn);
  }
  return out;
}

// Topologically ordered record of every node reachable from a root that
// requires gradients. Parents precede children.
template <class T>
class GradTape {
 public:
  static GradTape record(const Tensor<T>& root) {
    GradTape tape;
    if (!root.requires_grad()) return tape;
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    std::unordered_map<const Node<T>*, bool> seen;
    stack.emplace_back(root.node(), 0);
    seen[root.node()] = true;
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        Node<T>* p = node->parents[next++].get();
        if (p->requires_grad && !seen.count(p)) {
          seen[p] = true;
          stack.emplace_back(p, 0);
        }
      } else {
        tape.index_[node] = tape.order_.size();
        tape.order_.push_back(node);
        stack.pop_back();
      }
    }
    return tape;
  }

  std::span<Node<T>* const> nodes() const { return order_; }
  std::size_t size() const { return order_.size(); }
  std::size_t index_of(const Node<T>* n) const { return index_.at(n); }

  // Seeds d(root)/d(root) = 1 and walks the tape backwards. Leaf gradients
  // accumulate across calls; interior gradients are scratch per replay.
  template <class Visitor>
  void replay(Visitor&& visit) {
    if (order_.empty()) return;
    // Interior buffers are allocated on first write by a child and released
    // once the node has propagated, so peak memory tracks the frontier.
    for (Node<T>* n : order_)
      if (!n->is_leaf) std::vector<T>().swap(n->grad);
    Node<T>* root = order_.back();
    root->grad_buffer()[0] += T(1);
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      Node<T>* n = *it;
      n->grad_buffer();
      visit(*n);
      if (n->backward_fn) n->backward_fn(*n);
      if (!n->is_leaf) std::vector<T>().swap(n->grad);
    }
  }
  void replay() {
    replay([](Node<T>&) {});
  }

 private:
  std::vector<Node<T>*> order_;
  std::unordered_map<const Node<T>*, std::size_t> index_;
};

template <class T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw ContractError("backward() requires a scalar loss");
  GradTape<T>::record(loss).replay();
}

}  // namespace textfuse
