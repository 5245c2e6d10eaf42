#pragma once

// Named parameter storage and the few layer primitives the models share.

#include <cmath>
#include <string>
#include <vector>

#include "opsup/ops.hpp"
#include "opsup/rng.hpp"

namespace opsup {

/// Ordered, named learnable tensors. Order is the checkpoint order.
class ParamSet {
 public:
  Tensor& add(std::string name, Tensor t) {
    for (const auto& n : names_)
      if (n == name) throw ContractError("duplicate parameter " + name);
    t.set_requires_grad(true);
    names_.push_back(std::move(name));
    tensors_.push_back(std::move(t));
    return tensors_.back();
  }

  const Tensor& operator[](const std::string& name) const {
    for (std::size_t i = 0; i < names_.size(); ++i)
      if (names_[i] == name) return tensors_[i];
    throw ContractError("no parameter named " + name);
  }

  bool contains(const std::string& name) const {
    for (const auto& n : names_)
      if (n == name) return true;
    return false;
  }

  std::size_t size() const { return tensors_.size(); }
  const std::vector<std::string>& names() const { return names_; }
  const std::vector<Tensor>& tensors() const { return tensors_; }
  std::vector<Tensor>& tensors() { return tensors_; }

  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += t.numel();
    return n;
  }

  /// Deep copy: fresh leaves with the same names, values and grad flags.
  ParamSet clone() const {
    ParamSet out;
    for (std::size_t i = 0; i < names_.size(); ++i) {
      out.names_.push_back(names_[i]);
      out.tensors_.push_back(Tensor::from_data(tensors_[i].shape(), tensors_[i].to_vector(), tensors_[i].requires_grad()));
    }
    return out;
  }

  void set_requires_grad(bool on) {
    for (auto& t : tensors_) t.set_requires_grad(on);
  }

  /// Tensors whose name starts with `prefix`.
  std::vector<Tensor> with_prefix(const std::string& prefix) const {
    std::vector<Tensor> out;
    for (std::size_t i = 0; i < names_.size(); ++i)
      if (names_[i].rfind(prefix, 0) == 0) out.push_back(tensors_[i]);
    return out;
  }

  /// All values, flattened in order.
  std::vector<double> flat() const {
    std::vector<double> out;
    out.reserve(numel());
    for (const auto& t : tensors_) out.insert(out.end(), t.data().begin(), t.data().end());
    return out;
  }

  void load_flat(const std::vector<double>& values) {
    if (values.size() != numel()) {
      throw DimensionError("parameter vector of length " + std::to_string(values.size()) + ", expected " +
                           std::to_string(numel()));
    }
    std::size_t off = 0;
    for (auto& t : tensors_) {
      auto d = t.mutable_data();
      std::copy(values.begin() + off, values.begin() + off + d.size(), d.begin());
      off += d.size();
    }
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> tensors_;
};

inline double xavier_bound(std::size_t fan_in, std::size_t fan_out) {
  return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

/// Xavier-uniform: 2-D [out, in] matrices or 4-D [co, ci, kh, kw] kernels.
inline Tensor xavier_uniform(const Shape& shape, Rng& rng) {
  std::size_t fan_in = 0, fan_out = 0;
  if (shape.size() == 2) {
    fan_out = shape[0];
    fan_in = shape[1];
  } else if (shape.size() == 4) {
    const std::size_t field = shape[2] * shape[3];
    fan_out = shape[0] * field;
    fan_in = shape[1] * field;
  } else {
    throw DimensionError("xavier_uniform needs a matrix or kernel, got " + shape_str(shape));
  }
  const double bound = xavier_bound(fan_in, fan_out);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(-bound, bound);
  return Tensor::from_data(shape, std::move(v));
}

/// W x + b for a vector x.
inline Tensor linear(const Tensor& w, const Tensor& b, const Tensor& x) {
  const std::size_t in = w.size(1), out = w.size(0);
  if (x.numel() != in) throw DimensionError("linear layer " + shape_str(w.shape()) + " got input " + shape_str(x.shape()));
  return add(reshape(matmul(w, reshape(x, {in, 1})), {out}), b);
}

/// Adds "<prefix>.w" [out, in] and "<prefix>.b" [out] to `ps`.
inline void add_linear(ParamSet& ps, const std::string& prefix, std::size_t in, std::size_t out, Rng& rng) {
  ps.add(prefix + ".w", xavier_uniform({out, in}, rng));
  ps.add(prefix + ".b", Tensor::zeros({out}));
}

inline Tensor apply_linear(const ParamSet& ps, const std::string& prefix, const Tensor& x) {
  return linear(ps[prefix + ".w"], ps[prefix + ".b"], x);
}

/// x / ||x|| for a vector.
inline Tensor l2_normalize(const Tensor& x) {
  Tensor inv = pow_scalar(sum(square(x)), -0.5);
  return mul(x, expand(inv, x.shape()));
}

inline void check_finite(const Tensor& t, const std::string& where) {
  for (std::size_t i = 0; i < t.numel(); ++i) {
    if (!std::isfinite(t.at(i))) throw NumericError("non-finite value in " + where + " at index " + std::to_string(i));
  }
}

}  // namespace opsup
