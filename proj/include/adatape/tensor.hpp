// SPDX-License-Identifier: Apache-2.0
//
// Dense rank-<=3 tensors with a dynamic reverse-mode tape. Every differentiable
// op creates a node that remembers its inputs and a backward closure; the graph
// is rebuilt on each forward pass, which is what lets the number of halting
// iterations vary per sample.
#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "adatape/errors.hpp"

namespace adatape {

class Shape {
 public:
  static constexpr std::size_t kMaxRank = 3;

  Shape() = default;
  Shape(std::initializer_list<std::size_t> dims) {
    if (dims.size() > kMaxRank) throw ShapeError("tensor rank exceeds 3");
    for (std::size_t d : dims) dims_[rank_++] = d;
  }

  std::size_t rank() const { return rank_; }
  std::size_t operator[](std::size_t i) const { return dims_[i]; }
  std::size_t back() const { return rank_ == 0 ? 1 : dims_[rank_ - 1]; }

  std::size_t numel() const {
    std::size_t n = 1;
    for (std::size_t i = 0; i < rank_; ++i) n *= dims_[i];
    return n;
  }

  bool operator==(const Shape&) const = default;

  std::string str() const {
    std::string s = "[";
    for (std::size_t i = 0; i < rank_; ++i) {
      if (i) s += ", ";
      s += std::to_string(dims_[i]);
    }
    return s + "]";
  }

 private:
  std::array<std::size_t, kMaxRank> dims_{};
  std::size_t rank_ = 0;
};

namespace detail {
inline thread_local bool grad_enabled = true;
}  // namespace detail

// Disables graph recording for its lifetime (evaluation, optimizer updates).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_enabled; }

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a gradient reaches this node
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward_fn;

  T* grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T{0});
    return grad.data();
  }
};

template <typename T>
class Tensor {
 public:
  using Node = TensorNode<T>;
  using BackwardFn = std::function<void(Node&)>;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(shape, T{0}, requires_grad);
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    return from_vector(shape, std::vector<T>(shape.numel(), value), requires_grad);
  }

  static Tensor from_vector(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (shape.numel() != data.size()) {
      throw ShapeError("shape " + shape.str() + " does not match " + std::to_string(data.size()) +
                       " values");
    }
    auto node = std::make_shared<Node>();
    node->shape = shape;
    node->data = std::move(data);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor scalar(T value) { return from_vector(Shape{}, {value}); }

  // Builds an op output. Parents and the backward closure are kept only when
  // recording is enabled and at least one input needs a gradient.
  static Tensor make_result(Shape shape, std::vector<T> data, std::initializer_list<Tensor> inputs,
                            BackwardFn fn) {
    return make_result(shape, std::move(data), std::vector<Tensor>(inputs), std::move(fn));
  }

  static Tensor make_result(Shape shape, std::vector<T> data, const std::vector<Tensor>& inputs,
                            BackwardFn fn) {
    Tensor out = from_vector(shape, std::move(data));
    if (!grad_enabled()) return out;
    bool needs = std::any_of(inputs.begin(), inputs.end(),
                             [](const Tensor& t) { return t.requires_grad(); });
    if (!needs) return out;
    out.node_->requires_grad = true;
    out.node_->parents.reserve(inputs.size());
    for (const Tensor& t : inputs) out.node_->parents.push_back(t.node_);
    out.node_->backward_fn = std::move(fn);
    return out;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t numel() const { return node_->data.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape[i]; }
  std::size_t rank() const { return node_->shape.rank(); }

  std::span<T> data() { return node_->data; }
  std::span<const T> data() const { return node_->data; }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return std::span<T>(node_->grad_buffer(), node_->data.size()); }
  bool has_grad() const { return !node_->grad.empty(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool value) { node_->requires_grad = value; }

  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape().str());
    return node_->data[0];
  }

  void zero_grad() { node_->grad.clear(); }

  // Reverse pass from a scalar root. Every reachable node is visited exactly
  // once, in reverse topological order; leaf gradients accumulate into existing
  // buffers.
  void backward() const {
    if (numel() != 1) throw ShapeError("backward() needs a scalar root, got " + shape().str());
    if (!node_->requires_grad) return;

    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        Node* parent = node->parents[next++].get();
        if (parent->requires_grad && seen.insert(parent).second) stack.push_back({parent, 0});
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }

    // interior gradients from an earlier pass would be propagated twice
    for (Node* node : order) {
      if (node->backward_fn) node->grad.clear();
    }
    node_->grad_buffer()[0] += T{1};
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* node = *it;
      if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
    }
  }

  const std::shared_ptr<Node>& node() const { return node_; }

  // Copy of the values with no graph attached.
  Tensor detach() const { return from_vector(shape(), node_->data); }

 private:
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  std::shared_ptr<Node> node_;
};

}  // namespace adatape
