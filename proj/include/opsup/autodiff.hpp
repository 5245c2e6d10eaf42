#pragma once

#include <algorithm>
#include <functional>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "opsup/ops.hpp"

namespace opsup {

struct GradOptions {
  /// Record the backward sweep itself so the returned gradients can be
  /// differentiated again.
  bool create_graph = false;
};

namespace detail {

// Nodes reachable from `root` that take part in differentiation, ordered
// children-first (descending tape id).
inline std::vector<Node*> reverse_order(Node* root) {
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{root};
  seen.insert(root);
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& p : n->parents) {
      Node* pn = p.node().get();
      if (pn->requires_grad && seen.insert(pn).second) stack.push_back(pn);
    }
  }
  std::sort(order.begin(), order.end(), [](const Node* a, const Node* b) { return a->id > b->id; });
  return order;
}

inline std::unordered_map<Node*, Tensor> sweep(const Tensor& out, bool create_graph) {
  std::unordered_map<Node*, Tensor> grads;
  std::optional<NoGradGuard> guard;
  if (!create_graph) guard.emplace();
  ForwardModeGuard no_tangents(false);
  grads.emplace(out.node().get(), Tensor::ones(out.shape()));
  for (Node* n : reverse_order(out.node().get())) {
    auto it = grads.find(n);
    if (it == grads.end() || !n->backward) continue;
    const Tensor g = it->second;
    std::vector<Tensor> pg = n->backward(g);
    for (std::size_t i = 0; i < n->parents.size(); ++i) {
      Node* pn = n->parents[i].node().get();
      if (!pn->requires_grad) continue;
      auto pit = grads.find(pn);
      if (pit == grads.end()) {
        grads.emplace(pn, pg[i]);
      } else {
        pit->second = add(pit->second, pg[i]);
      }
    }
  }
  return grads;
}

inline void check_scalar_on_tape(const Tensor& out) {
  if (!out.defined()) throw ContractError("grad of an undefined tensor");
  if (out.numel() != 1) throw ContractError("grad needs a scalar output, got shape " + shape_str(out.shape()));
  if (!out.requires_grad()) throw ContractError("grad output is not on the tape");
}

}  // namespace detail

/// Exact reverse-mode gradients of a scalar with respect to each tensor in
/// `wrt`. Tensors the output does not depend on get zeros.
inline std::vector<Tensor> grad(const Tensor& out, const std::vector<Tensor>& wrt, GradOptions opts = {}) {
  detail::check_scalar_on_tape(out);
  for (const auto& w : wrt) {
    if (!w.defined() || !w.requires_grad()) throw ContractError("grad wrt a tensor that is not on the tape");
  }
  auto grads = detail::sweep(out, opts.create_graph);
  std::vector<Tensor> result;
  result.reserve(wrt.size());
  for (const auto& w : wrt) {
    auto it = grads.find(w.node().get());
    result.push_back(it == grads.end() ? Tensor::zeros(w.shape()) : it->second);
  }
  return result;
}

/// Accumulates d(out)/d(leaf) into the grad() buffer of every leaf that
/// requires gradient.
inline void backward(const Tensor& out) {
  detail::check_scalar_on_tape(out);
  auto grads = detail::sweep(out, false);
  for (auto& [node, g] : grads) {
    if (!node->parents.empty() || !node->requires_grad) continue;
    auto gd = g.data();
    if (!node->grad) node->grad.emplace(gd.begin(), gd.end());
    else
      for (std::size_t i = 0; i < gd.size(); ++i) (*node->grad)[i] += gd[i];
  }
}

/// A view of `at` carrying `direction` as its forward-mode tangent.
inline Tensor make_dual(const Tensor& at, const Tensor& direction) {
  if (at.shape() != direction.shape()) {
    throw DimensionError("jvp direction " + shape_str(direction.shape()) + " does not match point " +
                         shape_str(at.shape()));
  }
  auto values = at.to_vector();
  auto dual = detail::make_result(
      "dual", at.shape(), std::move(values), {at},
      [](const Tensor& g) { return std::vector<Tensor>{g}; }, nullptr);
  dual.node()->tangent = direction.node();
  return dual;
}

struct JvpResult {
  Tensor value;
  Tensor tangent;
};

/// Evaluates f at `at` and pushes `direction` forward through it, giving
/// f(at) and J_f(at)·direction. Both stay on the reverse tape, so the
/// directional derivative can itself be differentiated (e.g. wrt weights).
template <class F>
JvpResult jvp_with_value(F&& f, const Tensor& at, const Tensor& direction) {
  if (forward_ad_enabled()) throw ContractError("nested jvp is not supported");
  ForwardModeGuard recording(true);
  Tensor dual = make_dual(at, direction);
  Tensor y = f(dual);
  auto t = y.tangent();
  return {y, t ? *t : Tensor::zeros(y.shape())};
}

template <class F>
Tensor jvp(F&& f, const Tensor& at, const Tensor& direction) {
  return jvp_with_value(std::forward<F>(f), at, direction).tangent;
}

}  // namespace opsup
