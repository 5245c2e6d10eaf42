#pragma once

// First-order optimizers over a ParamSet. Updates are applied in place to
// leaf tensors, outside the tape.

#include <cmath>
#include <string>
#include <vector>

#include "opsup/nn.hpp"

namespace opsup {

struct AdamState {
  std::vector<std::vector<double>> m, v;
  std::size_t t = 0;
};

inline void require_grad_shapes(const std::vector<Tensor>& params, const std::vector<Tensor>& grads) {
  if (params.size() != grads.size()) {
    throw DimensionError(std::to_string(grads.size()) + " gradients for " + std::to_string(params.size()) + " parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].shape() != grads[i].shape()) {
      throw DimensionError("gradient " + shape_str(grads[i].shape()) + " for parameter " + shape_str(params[i].shape()));
    }
  }
}

/// Adam (0.9, 0.999, 1e-8) with bias correction; lrs[i] applies to params[i].
inline void adam_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, AdamState& st,
                      const std::vector<double>& lrs) {
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  require_grad_shapes(params, grads);
  if (lrs.size() != params.size()) throw DimensionError("one learning rate per parameter tensor expected");
  if (st.m.empty()) {
    for (const auto& p : params) {
      st.m.emplace_back(p.numel(), 0.0);
      st.v.emplace_back(p.numel(), 0.0);
    }
  }
  ++st.t;
  const double c1 = 1.0 - std::pow(b1, double(st.t));
  const double c2 = 1.0 - std::pow(b2, double(st.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].mutable_data();
    const auto g = grads[i].data();
    auto& m = st.m[i];
    auto& v = st.v[i];
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = b1 * m[k] + (1.0 - b1) * g[k];
      v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
      p[k] -= lrs[i] * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps);
    }
  }
}

inline void adam_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, AdamState& st, double lr) {
  adam_step(params, grads, st, std::vector<double>(params.size(), lr));
}

inline void sgd_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, const std::vector<double>& lrs) {
  require_grad_shapes(params, grads);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].mutable_data();
    const auto g = grads[i].data();
    for (std::size_t k = 0; k < p.size(); ++k) p[k] -= lrs[i] * g[k];
  }
}

enum class OptimizerKind { sgd, adam };

inline std::string to_string(OptimizerKind k) { return k == OptimizerKind::sgd ? "sgd" : "adam"; }

inline OptimizerKind optimizer_kind_from_string(const std::string& s) {
  if (s == "sgd") return OptimizerKind::sgd;
  if (s == "adam") return OptimizerKind::adam;
  throw ConfigError("unknown optimizer '" + s + "' (expected sgd or adam)");
}

/// Steps every parameter of a ParamSet; tensors of the adversarial norm path
/// (names containing ".ln_adv.") use their own learning rate.
class Optimizer {
 public:
  Optimizer(const ParamSet& ps, OptimizerKind kind, double lr, double lr_adv) : kind_(kind) {
    if (!(lr > 0.0) || !(lr_adv > 0.0)) throw ConfigError("learning rates must be positive");
    for (const auto& name : ps.names()) lrs_.push_back(name.find(".ln_adv.") != std::string::npos ? lr_adv : lr);
  }

  void step(ParamSet& ps, const std::vector<Tensor>& grads) {
    auto& params = ps.tensors();
    if (kind_ == OptimizerKind::adam) adam_step(params, grads, state_, lrs_);
    else sgd_step(params, grads, lrs_);
  }

 private:
  OptimizerKind kind_;
  std::vector<double> lrs_;
  AdamState state_;
};

}  // namespace opsup
