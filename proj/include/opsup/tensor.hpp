#pragma once

// Dense float64 tensors participating in a dynamic autodiff tape.
//
// The tape is implicit: every node gets a monotonically increasing id at
// creation, so parents always precede children and a reverse sweep in
// descending id order is a valid topological order. Nodes are kept alive by
// the tensors that reference them; dropping the last handle to a loss frees
// its whole graph.
//
// Forward-mode (JVP) runs on top of the same tape: while forward recording is
// active, each op also builds the tangent of its output out of ordinary
// differentiable ops. The tangent therefore lives on the reverse tape and can
// be differentiated again with respect to the parameters.

#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "opsup/errors.hpp"

namespace opsup {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace detail {
struct Node;
}

class Tensor {
 public:
  Tensor() = default;

  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor vector(std::vector<double> values, bool requires_grad = false);
  static Tensor full(Shape shape, double value);
  static Tensor zeros(Shape shape) { return full(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return full(std::move(shape), 1.0); }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Shape& shape() const;
  std::size_t dim() const { return shape().size(); }
  std::size_t size(std::size_t axis) const;
  std::size_t numel() const;
  std::span<const double> data() const;
  std::vector<double> to_vector() const;
  double at(std::size_t flat_index) const;
  /// Value of a single-element tensor.
  double item() const;

  bool requires_grad() const;
  bool is_leaf() const;
  /// Flip gradient participation of a leaf (used to freeze parameters).
  void set_requires_grad(bool on);
  std::uint64_t tape_id() const;
  const char* op_name() const;

  /// Forward-mode tangent attached while a JVP is being recorded.
  std::optional<Tensor> tangent() const;

  /// Same values, new leaf, no tape history; never receives gradient.
  Tensor detach() const;

  /// In-place write access, leaves only (optimizer updates).
  std::span<double> mutable_data();

  /// Gradient buffer filled by backward(); empty until then.
  const std::optional<std::vector<double>>& grad() const;
  void zero_grad();

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

enum class TapeMode { records_reverse, records_forward_over_reverse };

namespace detail {

using BackwardFn = std::function<std::vector<Tensor>(const Tensor& grad_out)>;

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<Tensor> parents;
  BackwardFn backward;
  std::shared_ptr<Node> tangent;
  std::optional<std::vector<double>> grad;
  std::uint64_t id = 0;
  const char* op = "leaf";
  bool requires_grad = false;
};

inline std::uint64_t next_node_id() {
  thread_local std::uint64_t counter = 0;
  return ++counter;
}

inline bool& grad_recording() {
  thread_local bool on = true;
  return on;
}

inline bool& forward_recording() {
  thread_local bool on = false;
  return on;
}

inline std::shared_ptr<Node> new_node(Shape shape, std::vector<double> data, const char* op) {
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("data length " + std::to_string(data.size()) + " does not match shape " +
                         shape_str(shape));
  }
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->id = next_node_id();
  n->op = op;
  return n;
}

inline const Node& checked(const std::shared_ptr<Node>& n) {
  if (!n) throw ContractError("use of an undefined tensor");
  return *n;
}

}  // namespace detail

inline bool grad_enabled() { return detail::grad_recording(); }
inline bool forward_ad_enabled() { return detail::forward_recording(); }
inline TapeMode tape_mode() {
  return forward_ad_enabled() ? TapeMode::records_forward_over_reverse : TapeMode::records_reverse;
}

/// Disables reverse recording for its lifetime (results are plain values).
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_recording()) { detail::grad_recording() = false; }
  ~NoGradGuard() { detail::grad_recording() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// Sets forward (tangent) recording on or off for its lifetime.
class ForwardModeGuard {
 public:
  explicit ForwardModeGuard(bool on) : prev_(detail::forward_recording()) {
    detail::forward_recording() = on;
  }
  ~ForwardModeGuard() { detail::forward_recording() = prev_; }
  ForwardModeGuard(const ForwardModeGuard&) = delete;
  ForwardModeGuard& operator=(const ForwardModeGuard&) = delete;

 private:
  bool prev_;
};

// ---- Tensor members -------------------------------------------------------

inline Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  auto n = detail::new_node(std::move(shape), std::move(data), "leaf");
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

inline Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({}, {value}, requires_grad);
}

inline Tensor Tensor::vector(std::vector<double> values, bool requires_grad) {
  const std::size_t n = values.size();
  return from_data({n}, std::move(values), requires_grad);
}

inline Tensor Tensor::full(Shape shape, double value) {
  std::vector<double> d(shape_numel(shape), value);
  return from_data(std::move(shape), std::move(d));
}

inline const Shape& Tensor::shape() const { return detail::checked(node_).shape; }

inline std::size_t Tensor::size(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  return s[axis];
}

inline std::size_t Tensor::numel() const { return detail::checked(node_).data.size(); }

inline std::span<const double> Tensor::data() const { return detail::checked(node_).data; }

inline std::vector<double> Tensor::to_vector() const { return detail::checked(node_).data; }

inline double Tensor::at(std::size_t i) const {
  const auto& d = detail::checked(node_).data;
  if (i >= d.size()) throw DimensionError("index " + std::to_string(i) + " out of range");
  return d[i];
}

inline double Tensor::item() const {
  const auto& n = detail::checked(node_);
  if (n.data.size() != 1) throw ContractError("item() on tensor of shape " + shape_str(n.shape));
  return n.data[0];
}

inline bool Tensor::requires_grad() const { return detail::checked(node_).requires_grad; }

inline bool Tensor::is_leaf() const { return detail::checked(node_).parents.empty(); }

inline void Tensor::set_requires_grad(bool on) {
  detail::checked(node_);
  if (!is_leaf()) throw ContractError("set_requires_grad on a non-leaf tensor");
  node_->requires_grad = on;
}

inline std::uint64_t Tensor::tape_id() const { return detail::checked(node_).id; }

inline const char* Tensor::op_name() const { return detail::checked(node_).op; }

inline std::optional<Tensor> Tensor::tangent() const {
  const auto& n = detail::checked(node_);
  if (!n.tangent) return std::nullopt;
  return Tensor(n.tangent);
}

inline Tensor Tensor::detach() const {
  const auto& n = detail::checked(node_);
  return from_data(n.shape, n.data, false);
}

inline std::span<double> Tensor::mutable_data() {
  detail::checked(node_);
  if (!node_->parents.empty() || node_->backward) {
    throw ContractError("mutable_data() is only available on leaf tensors");
  }
  return node_->data;
}

inline const std::optional<std::vector<double>>& Tensor::grad() const {
  return detail::checked(node_).grad;
}

inline void Tensor::zero_grad() {
  detail::checked(node_);
  node_->grad.reset();
}

}  // namespace opsup
