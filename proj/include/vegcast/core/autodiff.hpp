#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "vegcast/core/tensor.hpp"

namespace vegcast {

/// One value in a reverse-mode computation graph.
///
/// Non-leaf nodes keep shared ownership of their parents, so holding the root
/// of a graph keeps every intermediate alive until backward() has run and the
/// root is dropped. Nodes that do not depend on any trainable leaf carry no
/// parents and no backward closure.
template <typename S>
struct Node {
  Tensor<S> value;
  Tensor<S> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  bool has_grad() const { return grad.size() == value.size() && !value.empty(); }

  Tensor<S>& grad_ref() {
    if (grad.shape() != value.shape()) grad = Tensor<S>(value.shape());
    return grad;
  }

  Node& parent(std::size_t i) { return *parents[i]; }
};

template <typename S>
using Var = std::shared_ptr<Node<S>>;

template <typename S>
Var<S> constant(Tensor<S> value) {
  auto n = std::make_shared<Node<S>>();
  n->value = std::move(value);
  return n;
}

template <typename S>
Var<S> leaf(Tensor<S> value, bool requires_grad = true) {
  auto n = std::make_shared<Node<S>>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  return n;
}

/// Creates an op result. The backward closure receives the result node and
/// accumulates into the grads of those parents that require them.
template <typename S>
Var<S> make_result(Tensor<S> value, std::vector<Var<S>> parents, std::function<void(Node<S>&)> backward_fn) {
  auto n = std::make_shared<Node<S>>();
  n->value = std::move(value);
  for (const auto& p : parents) {
    if (p && p->requires_grad) {
      n->requires_grad = true;
      break;
    }
  }
  if (n->requires_grad) {
    n->parents = std::move(parents);
    n->backward_fn = std::move(backward_fn);
  }
  return n;
}

/// Back-propagates from `root`. The seed defaults to ones (d root / d root).
/// Gradients of intermediate nodes are released once consumed; leaves keep
/// theirs accumulated until the caller clears them.
template <typename S>
void backward(const Var<S>& root, const Tensor<S>* seed = nullptr) {
  if (!root->requires_grad) return;
  std::vector<Node<S>*> order;
  std::unordered_set<Node<S>*> visited;
  std::vector<std::pair<Node<S>*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<S>* p = node->parents[next++].get();
      if (p && p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  Tensor<S>& g = root->grad_ref();
  if (seed) {
    require(seed->shape() == root->value.shape(), "backward seed shape mismatch");
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += (*seed)[i];
  } else {
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += S(1);
  }
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<S>* node = *it;
    if (!node->backward_fn || !node->has_grad()) continue;
    node->backward_fn(*node);
    node->grad = Tensor<S>();
  }
}

}  // namespace vegcast
