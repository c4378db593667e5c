#pragma once

// Reverse-mode automatic differentiation over Tensor<S>. A Graph owns nodes
// in creation order (a topological order by construction); backward() walks
// that order once in reverse, each node pushing gradient into its inputs via
// a stored closure. Leaves bound to a Parameter accumulate into the
// parameter's grad buffer so optimizer state survives graph destruction.

#include "scanenc/params.hpp"
#include "scanenc/tensor.hpp"

#include <functional>
#include <memory>
#include <unordered_map>
#include <vector>

namespace scanenc {

template <class S>
class Graph;

template <class S>
struct GraphNode {
  Tensor<S> value;
  Tensor<S> grad;  // lazily allocated on first accumulation
  bool requires_grad = false;
  Parameter<S>* param = nullptr;  // non-null only for parameter leaves
  std::function<void()> backward;  // null for leaves
  Graph<S>* graph = nullptr;

  void accumulate(const Tensor<S>& g) {
    Tensor<S>& dst = check_incoming(g);
    if (dst.empty())
      dst = g;
    else
      dst.arr() += g.arr();
  }

  // Most nodes receive exactly one contribution; taking it by move skips the
  // zero-fill and the add entirely.
  void accumulate(Tensor<S>&& g) {
    Tensor<S>& dst = check_incoming(g);
    if (dst.empty())
      dst = std::move(g);
    else
      dst.arr() += g.arr();
  }

  // Gradient seen by this node's backward closure. For parameter leaves the
  // closure is never consulted, so node-local grad is the right view.
  const Tensor<S>& out_grad() const { return grad; }
};

template <class S>
using Var = std::shared_ptr<GraphNode<S>>;

template <class S>
class Graph {
 public:
  explicit Graph(bool recording = true) : recording_(recording) {}

  bool recording() const { return recording_; }

  Var<S> leaf(Tensor<S> value, bool requires_grad = false) {
    auto n = std::make_shared<GraphNode<S>>();
    n->value = std::move(value);
    n->requires_grad = recording_ && requires_grad;
    n->graph = this;
    nodes_.push_back(n);
    return n;
  }

  Var<S> constant(Tensor<S> value) { return leaf(std::move(value), false); }

  // Parameter leaves are cached so every use of a parameter in one forward
  // pass shares a node and gradient contributions sum naturally.
  Var<S> param(Parameter<S>& p) {
    auto it = param_cache_.find(&p);
    if (it != param_cache_.end()) return it->second;
    auto n = leaf(p.value, true);
    if (recording_) n->param = &p;
    param_cache_.emplace(&p, n);
    return n;
  }

  // Register an interior node produced by an op.
  Var<S> make(Tensor<S> value, bool requires_grad, std::function<void()> backward) {
    auto n = std::make_shared<GraphNode<S>>();
    n->value = std::move(value);
    n->requires_grad = recording_ && requires_grad;
    n->graph = this;
    if (n->requires_grad) n->backward = std::move(backward);
    nodes_.push_back(n);
    return n;
  }

  // Reverse sweep from a scalar root. Each node is visited exactly once;
  // nodes that received no gradient are skipped.
  void backward(const Var<S>& root) {
    if (root->value.size() != 1)
      throw ValueError("backward root must be a scalar, got " + shape_str(root->value.shape()));
    if (!recording_) throw ValueError("backward on a non-recording graph");
    root->accumulate(Tensor<S>::full({1}, S(1)));
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      GraphNode<S>& n = **it;
      if (n.backward && !n.grad.empty()) n.backward();
    }
  }

  size_t node_count() const { return nodes_.size(); }

 private:
  bool recording_;
  std::vector<Var<S>> nodes_;
  std::unordered_map<const Parameter<S>*, Var<S>> param_cache_;
};

}  // namespace scanenc
