#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "tagforge/core/error.hpp"

namespace tagforge {

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& s) {
  check(!s.empty(), "tensor: empty shape");
  std::size_t n = 1;
  for (int d : s) {
    check(d > 0, "tensor: nonpositive extent");
    n *= std::size_t(d);
  }
  return n;
}

/// Row-major offsets. Layout conventions across the library: activations are
/// {N,H,W,C}, single images {H,W,C}, conv weights {KH,KW,IC,OC}.
inline std::size_t idx3(int h, int w, int c, int W, int C) {
  return (std::size_t(h) * W + w) * C + c;
}
inline std::size_t idx4(int n, int h, int w, int c, int H, int W, int C) {
  return ((std::size_t(n) * H + h) * std::size_t(W) + w) * C + c;
}

/// Autograd graph node. An op's output node points at the nodes of its tracked
/// inputs; backward reads the node's own grad and accumulates into parents'.
/// The graph is a DAG kept alive by the op outputs.
template <typename T>
struct Node {
  std::vector<T> grad;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(const std::vector<T>&)> backward;  // null for leaves
};

/// Dense row-major tensor with shared storage and optional gradient tracking.
/// Copies are shallow; ops return fresh tensors. Instantiated at float for
/// training and double for finite-difference oracles.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<T>>(shape_numel(shape_), T(0))) {}

  Tensor(Shape shape, std::vector<T> values)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<T>>(std::move(values))) {
    check(data_->size() == shape_numel(shape_), "tensor: data/shape mismatch");
  }

  static Tensor scalar(T v) { return Tensor({1}, {v}); }

  const Shape& shape() const { return shape_; }
  int dim(std::size_t i) const {
    check(i < shape_.size(), "tensor: dim index out of range");
    return shape_[i];
  }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_ ? data_->size() : 0; }
  bool empty() const { return !data_; }

  T* data() { return data_->data(); }
  const T* data() const { return data_->data(); }
  std::vector<T>& vec() { return *data_; }
  const std::vector<T>& vec() const { return *data_; }
  T value() const {
    check(size() == 1, "tensor: value() needs a single element");
    return (*data_)[0];
  }

  bool tracked() const { return node_ != nullptr; }

  /// Marks this tensor as a differentiable leaf (gradient accumulator).
  void set_requires_grad() {
    if (!node_) {
      node_ = std::make_shared<Node<T>>();
      node_->grad.assign(size(), T(0));
    }
  }

  const std::shared_ptr<Node<T>>& node() const { return node_; }

  std::vector<T>& grad() {
    check(node_ != nullptr, "tensor: grad on untracked tensor");
    return node_->grad;
  }
  const std::vector<T>& grad() const {
    check(node_ != nullptr, "tensor: grad on untracked tensor");
    return node_->grad;
  }
  void zero_grad() {
    if (node_) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  /// Internal: wires an op-result node. Library code uses make_tracked().
  void attach_node(std::shared_ptr<Node<T>> n) { node_ = std::move(n); }

 private:
  Shape shape_;
  std::shared_ptr<std::vector<T>> data_;
  std::shared_ptr<Node<T>> node_;
};

/// Attaches a backward closure to an op result. `parents` lists the nodes of
/// the tracked inputs only; when empty the result stays untracked and the
/// closure is dropped.
template <typename T, typename Fn>
Tensor<T> make_tracked(Tensor<T> result,
                       std::vector<std::shared_ptr<Node<T>>> parents, Fn&& bw) {
  if (!parents.empty()) {
    auto n = std::make_shared<Node<T>>();
    n->grad.assign(result.size(), T(0));
    n->parents = std::move(parents);
    n->backward = std::forward<Fn>(bw);
    result.attach_node(std::move(n));
  }
  return result;
}

/// Reverse-mode sweep from a scalar root. Seeds the root grad with 1, walks
/// the DAG in reverse topological order (DFS postorder), and runs each node's
/// backward once. Single-shot per graph: intermediate grads are not rezeroed.
template <typename T>
void backward(Tensor<T>& root) {
  check(root.tracked(), "backward: root is untracked");
  check(root.size() == 1, "backward: root must be scalar");

  Node<T>* rootn = root.node().get();
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  visited.insert(rootn);
  stack.push_back({rootn, 0});
  while (!stack.empty()) {
    auto& top = stack.back();
    if (top.second < top.first->parents.size()) {
      Node<T>* p = top.first->parents[top.second].get();
      ++top.second;  // advance before push: push_back may invalidate `top`
      if (visited.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(top.first);
      stack.pop_back();
    }
  }

  rootn->grad.assign(1, T(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward) n->backward(n->grad);
  }
}

}  // namespace tagforge
