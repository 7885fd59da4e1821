#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "arlab/nn/tensor.hpp"

namespace arlab::nn {

class Graph;
using NodeId = std::size_t;

// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
class Var {
 public:
  Var() = default;
  Var(Graph* graph, NodeId id) : graph_(graph), id_(id) {}

  Graph& graph() const { return *graph_; }
  NodeId id() const { return id_; }
  const Tensor& value() const;
  bool requires_grad() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }

 private:
  Graph* graph_ = nullptr;
  NodeId id_ = 0;
};

// Tape of primitive applications in creation (= topological) order.
//
// Nodes created while grad mode is off, or whose inputs do not require
// gradients, carry no backward closure and never receive an adjoint. That is
// the whole stop-gradient mechanism: no post-hoc zeroing anywhere.
class Graph {
 public:
  // Backward closure: reads grad(self) and accumulates into input grads.
  using BackwardFn = std::function<void(Graph&, NodeId self)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value) { return push(std::move(value), nullptr, false, {}); }

  Var leaf(Tensor value, bool requires_grad = true) {
    return push(std::move(value), nullptr, requires_grad && grad_enabled_, {});
  }

  // Non-owning leaf; `value` must outlive the graph.
  Var parameter(const Tensor& value) {
    return push(Tensor{}, &value, grad_enabled_, {});
  }

  // Non-owning constant; `value` must outlive the graph.
  Var reference(const Tensor& value) { return push(Tensor{}, &value, false, {}); }

  // Records an op output. It is tracked iff grad mode is on and some input
  // is tracked; otherwise the closure is dropped.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn,
             const char* op_name) {
    if (!value.all_finite()) {
      throw NumericError(std::string("non-finite output from ") + op_name);
    }
    bool tracked = false;
    if (grad_enabled_) {
      for (const Var& v : inputs) tracked = tracked || nodes_[v.id()].requires_grad;
    }
    return push(std::move(value), nullptr, tracked, tracked ? std::move(fn) : BackwardFn{});
  }

  const Tensor& value(NodeId id) const {
    const Node& n = nodes_[id];
    return n.external ? *n.external : n.owned;
  }
  bool requires_grad(NodeId id) const { return nodes_[id].requires_grad; }

  // Gradient buffer for a tracked node, allocated zeroed on first use.
  Tensor& grad_buffer(NodeId id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = Tensor(value(id).shape(), 0.0);
    return n.grad;
  }

  // nullptr when the node never received an adjoint.
  const Tensor* grad(const Var& v) const {
    const Node& n = nodes_[v.id()];
    return n.grad.empty() ? nullptr : &n.grad;
  }

  // Reverse sweep from a scalar loss. Every tracked node is visited once.
  void backward(const Var& loss) {
    const Tensor& lv = value(loss.id());
    if (lv.size() != 1) {
      throw ShapeError("backward requires a scalar loss, got shape " + shape_string(lv.shape()));
    }
    if (!lv.all_finite()) throw NumericError("backward from non-finite loss");
    if (!nodes_[loss.id()].requires_grad) return;
    grad_buffer(loss.id())[0] = 1.0;
    for (NodeId id = loss.id() + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
      n.backward(*this, id);
      n.backward = nullptr;
    }
    for (Node& n : nodes_) {
      if (!n.grad.empty() && !n.grad.all_finite()) {
        throw NumericError("non-finite gradient during backward");
      }
    }
  }

  bool grad_enabled() const { return grad_enabled_; }
  void set_grad_enabled(bool on) { grad_enabled_ = on; }

  std::size_t node_count() const { return nodes_.size(); }

  // Number of scalars held by tracked nodes: the values whose adjoints the
  // reverse sweep may need, used as an activation-memory estimate.
  std::size_t tracked_scalars() const {
    std::size_t total = 0;
    for (const Node& n : nodes_) {
      if (n.requires_grad && !n.external) total += n.owned.size();
    }
    return total;
  }

 private:
  struct Node {
    Tensor owned;
    const Tensor* external = nullptr;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var push(Tensor owned, const Tensor* external, bool requires_grad, BackwardFn fn) {
    nodes_.push_back(Node{std::move(owned), external, Tensor{}, requires_grad, std::move(fn)});
    return Var(this, nodes_.size() - 1);
  }

  std::deque<Node> nodes_;
  bool grad_enabled_ = true;
};

inline const Tensor& Var::value() const { return graph_->value(id_); }
inline bool Var::requires_grad() const { return graph_->requires_grad(id_); }

// Scoped no-grad mode.
class NoGradGuard {
 public:
  explicit NoGradGuard(Graph& graph) : graph_(graph), previous_(graph.grad_enabled()) {
    graph_.set_grad_enabled(false);
  }
  ~NoGradGuard() { graph_.set_grad_enabled(previous_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Graph& graph_;
  bool previous_;
};

}  // namespace arlab::nn
