#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "cdaug/nn/tensor.hpp"

namespace cdaug::nn {

struct Var {
  int id = -1;
};

// Reverse-mode autodiff record. Ops append nodes during the forward pass;
// backward() replays their adjoint closures in reverse. Gradients are only
// materialized for nodes that depend on a variable leaf.
template <typename T>
class Tape {
 public:
  using Adjoint = std::function<void(Tape&)>;

  Var constant(Tensor<T> value) { return push(std::move(value), false, nullptr); }
  Var variable(Tensor<T> value) { return push(std::move(value), true, nullptr); }

  Var push(Tensor<T> value, bool requires_grad, Adjoint adjoint) {
    nodes_.push_back(Node{std::move(value), {}, requires_grad, std::move(adjoint)});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  const Tensor<T>& value(Var v) const { return nodes_[v.id].value; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  bool has_grad(Var v) const { return !nodes_[v.id].grad.data.empty(); }

  // Gradient of v; an all-zero tensor if nothing flowed into it.
  Tensor<T> grad(Var v) const {
    const Node& node = nodes_[v.id];
    if (!node.grad.data.empty()) return node.grad;
    return Tensor<T>(node.value.n, node.value.c, node.value.h, node.value.w);
  }

  // Adjoint accumulator of v, allocated on first use.
  Tensor<T>& grad_mut(Var v) {
    Node& node = nodes_[v.id];
    if (node.grad.data.empty()) {
      node.grad = Tensor<T>(node.value.n, node.value.c, node.value.h, node.value.w);
    }
    return node.grad;
  }

  void backward(Var out) {
    if (nodes_[out.id].value.size() != 1) throw ShapeError("backward: output is not a scalar");
    Tensor<T> seed(1, 1, 1, 1, T(1));
    backward(out, seed);
  }

  void backward(Var out, const Tensor<T>& seed) {
    if (!seed.same_shape(nodes_[out.id].value)) throw ShapeError("backward: seed shape mismatch");
    if (!nodes_[out.id].requires_grad) return;
    Tensor<T>& g = grad_mut(out);
    for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += seed.data[i];
    for (int id = out.id; id >= 0; --id) {
      Node& node = nodes_[id];
      if (node.adjoint && !node.grad.data.empty()) node.adjoint(*this);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    Adjoint adjoint;
  };
  std::vector<Node> nodes_;
};

}  // namespace cdaug::nn
