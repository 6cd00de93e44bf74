#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "ssmvdm/core/errors.hpp"
#include "ssmvdm/core/tensor.hpp"

namespace ssmvdm {

// Reverse-mode tape. Ops build a DAG of Nodes when grad mode is on and any
// input requires grad; otherwise they return bare values and the graph (and
// its retained activations) never exists.

struct GradMode {
  static bool& flag() {
    thread_local bool on = true;
    return on;
  }
  static bool enabled() { return flag(); }
};

struct NoGradGuard {
  NoGradGuard() : prev_(GradMode::flag()) { GradMode::flag() = false; }
  ~NoGradGuard() { GradMode::flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <typename Scalar>
struct Node {
  Tensor<Scalar> value;
  Tensor<Scalar> grad;  // allocated on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Pulls this node's grad into its parents. Empty for leaves.
  std::function<void(Node&)> backward;
  const char* op = "leaf";
};

// Zeroed-on-demand gradient buffer; closures accumulate straight into it.
template <typename Scalar>
inline Tensor<Scalar>& grad_buf(Node<Scalar>& n) {
  if (!n.grad.defined()) n.grad = Tensor<Scalar>::zeros(n.value.shape());
  return n.grad;
}

template <typename Scalar>
class Var {
 public:
  Var() = default;

  explicit Var(Tensor<Scalar> value, bool requires_grad = false)
      : node_(std::make_shared<Node<Scalar>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  explicit Var(std::shared_ptr<Node<Scalar>> n) : node_(std::move(n)) {}

  bool defined() const { return node_ != nullptr; }
  const Tensor<Scalar>& value() const { return node_->value; }
  Tensor<Scalar>& value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  Index numel() const { return node_->value.numel(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const std::shared_ptr<Node<Scalar>>& node() const { return node_; }

  const Tensor<Scalar>& grad() const {
    if (!node_->grad.defined()) node_->grad = Tensor<Scalar>::zeros(node_->value.shape());
    return node_->grad;
  }

  void zero_grad() { node_->grad = Tensor<Scalar>(); }

 private:
  std::shared_ptr<Node<Scalar>> node_;
};

template <typename Scalar>
inline Var<Scalar> make_param(Tensor<Scalar> value) {
  return Var<Scalar>(std::move(value), true);
}

template <typename Scalar>
inline Var<Scalar> make_const(Tensor<Scalar> value) {
  return Var<Scalar>(std::move(value), false);
}

// Central op constructor. `backward` may capture saved tensors by value;
// shallow tensor copies keep the buffers alive without duplicating data.
template <typename Scalar>
inline Var<Scalar> make_op(const char* op, Tensor<Scalar> value,
                           std::vector<std::shared_ptr<Node<Scalar>>> parents,
                           std::function<void(Node<Scalar>&)> backward) {
  bool track = GradMode::enabled();
  if (track) {
    track = false;
    for (const auto& p : parents)
      if (p && p->requires_grad) {
        track = true;
        break;
      }
  }
  if (!track) return Var<Scalar>(std::move(value), false);
  auto n = std::make_shared<Node<Scalar>>();
  n->value = std::move(value);
  n->requires_grad = true;
  n->parents = std::move(parents);
  n->backward = std::move(backward);
  n->op = op;
  return Var<Scalar>(n);
}

// Reverse topological order, iterative so deep tapes cannot overflow the
// stack (training graphs reach ~1e5 nodes).
template <typename Scalar>
inline std::vector<Node<Scalar>*> topo_order(Node<Scalar>* root) {
  std::vector<Node<Scalar>*> order;
  std::unordered_set<Node<Scalar>*> seen;
  std::vector<std::pair<Node<Scalar>*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<Scalar>* p = node->parents[next++].get();
      if (p && p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;  // parents before children; traverse in reverse for backprop
}

template <typename Scalar>
inline void backward(const Var<Scalar>& loss) {
  if (loss.numel() != 1) throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  if (!loss.requires_grad()) throw UnsupportedOpError("backward: loss does not depend on any parameter");
  Node<Scalar>* root = loss.node().get();
  grad_buf(*root).flat().setConstant(Scalar(1));
  auto order = topo_order(root);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<Scalar>* n = *it;
    if (n->backward && n->grad.defined()) n->backward(*n);
    // Interior grads are dead once propagated; dropping them caps tape memory.
    if (n != root && n->backward) n->grad = Tensor<Scalar>();
  }
}

}  // namespace ssmvdm
