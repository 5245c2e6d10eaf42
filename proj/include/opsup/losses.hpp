#pragma once

// Training objectives: regression, Taylor consistency, PGD inputs,
// supervised contrastive alignment and the composite losses built from them.

#include <cmath>
#include <concepts>
#include <optional>
#include <string>
#include <vector>

#include "opsup/autodiff.hpp"
#include "opsup/models.hpp"

namespace opsup {

struct LossWeights {
  double gamma = 1.0;           // physics weight, PITN losses
  double lambda_physics = 1.0;  // physics weight, operator loss
  double beta = 1.0;            // operator supervision weight
  double eta = 0.2;             // PGD step
  double epsilon = 0.2;         // PGD bound (L-infinity)
  double tau = 0.1;             // contrastive temperature
  double y_shift = 2.0;         // positive-pair threshold, mmHg
  std::size_t pgd_steps = 1;
  bool include_self = false;    // literal A(i)/P(i): anchor counts as its own candidate and positive
  double signal_bound = 4.0;    // normalized inputs live in [-bound, bound]

  void check() const {
    for (double v : {gamma, lambda_physics, beta, eta, epsilon, y_shift, signal_bound}) {
      if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError("loss weights must be finite and non-negative");
    }
    if (!(tau > 0.0)) throw ConfigError("contrastive temperature tau must be positive, got " + std::to_string(tau));
  }
};

enum class JvpMode { exact, finite_difference };

inline std::string to_string(JvpMode m) { return m == JvpMode::exact ? "exact" : "finite_difference"; }

inline JvpMode jvp_mode_from_string(const std::string& s) {
  if (s == "exact") return JvpMode::exact;
  if (s == "finite_difference") return JvpMode::finite_difference;
  throw ConfigError("unknown jvp_mode '" + s + "' (expected exact or finite_difference)");
}

struct PhysicsOptions {
  JvpMode mode = JvpMode::exact;
  double fd_step = 1e-5;  // central difference step along u_{i+1} - u_i
};

/// Two samples of one subject, `from` earlier in time than `to`.
struct ConsecutivePair {
  const Sample* from = nullptr;
  const Sample* to = nullptr;
};

inline Tensor mse(const Tensor& pred, const Tensor& target) {
  if (pred.numel() == 0) throw ContractError("mse of an empty batch");
  if (pred.shape() != target.shape()) {
    throw DimensionError("mse of " + shape_str(pred.shape()) + " against " + shape_str(target.shape()));
  }
  return mean(square(sub(pred, target)));
}

struct PhysicsLoss {
  Tensor value;
  bool empty = false;  // no pairs; value is 0 and carries no gradient
};

/// Mean squared gap between f's first-order extrapolation from u_i to
/// u_{i+1} and f(u_{i+1}). `f(u, sample)` must return a scalar.
template <class F>
  requires std::invocable<F&, const Tensor&, const Sample&>
PhysicsLoss taylor_physics_loss(F&& f, const std::vector<ConsecutivePair>& pairs, PhysicsOptions opt = {}) {
  if (pairs.empty()) return {Tensor::scalar(0.0), true};
  std::vector<Tensor> residuals;
  residuals.reserve(pairs.size());
  for (const auto& pr : pairs) {
    if (pr.from->subject_id != pr.to->subject_id) {
      throw ContractError("physics pair spans subjects " + pr.from->subject_id + " and " + pr.to->subject_id);
    }
    Tensor ui = Tensor::vector(pr.from->u_window);
    Tensor un = Tensor::vector(pr.to->u_window);
    Tensor du = sub(un, ui);
    Tensor extrapolated;
    if (opt.mode == JvpMode::exact) {
      auto [value, tangent] = jvp_with_value([&](const Tensor& u) { return f(u, *pr.from); }, ui, du);
      extrapolated = add(value, tangent);
    } else {
      const double h = opt.fd_step;
      Tensor up = f(add(ui, scale(du, h)), *pr.from);
      Tensor dn = f(sub(ui, scale(du, h)), *pr.from);
      extrapolated = add(f(ui, *pr.from), scale(sub(up, dn), 0.5 / h));
    }
    residuals.push_back(reshape(sub(extrapolated, f(un, *pr.to)), {1}));
  }
  return {mean(square(concat(residuals))), false};
}

inline PhysicsLoss taylor_physics_loss(const ModelHandle& m, const std::vector<ConsecutivePair>& pairs,
                                       PhysicsOptions opt = {}) {
  return taylor_physics_loss([&](const Tensor& u, const Sample& s) { return m.predict(u, s); }, pairs, opt);
}

/// Sign-gradient ascent on f from x0, projected onto the eps-ball around x0
/// intersected with [-bound, bound]. The result is a detached constant.
template <class F>
Tensor pgd_perturb(F&& f, const Tensor& x0, const LossWeights& w, std::size_t n_steps) {
  if (!(w.eta >= 0.0) || !(w.epsilon >= 0.0)) throw ConfigError("PGD step and bound must be non-negative");
  const auto origin = x0.to_vector();
  std::vector<double> x = origin;
  if (w.eta == 0.0) return Tensor::from_data(x0.shape(), x);
  for (std::size_t step = 0; step < n_steps; ++step) {
    Tensor xt = Tensor::from_data(x0.shape(), x, true);
    Tensor g = grad(f(xt), {xt})[0];
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double gi = g.at(i);
      const double s = gi > 0.0 ? 1.0 : (gi < 0.0 ? -1.0 : 0.0);
      // clamping into the signal range first and the ball second keeps the
      // point in both whenever they intersect, and always in the ball
      double v = std::clamp(x[i] + w.eta * s, -w.signal_bound, w.signal_bound);
      x[i] = std::clamp(v, origin[i] - w.epsilon, origin[i] + w.epsilon);
    }
  }
  return Tensor::from_data(x0.shape(), std::move(x));
}

/// Supervised contrastive loss over L2-normalized rows of `features` [S, d].
inline Tensor contrastive_loss(const Tensor& features, const std::vector<double>& targets, const LossWeights& w) {
  if (features.dim() != 2) throw DimensionError("contrastive features must be [S, d], got " + shape_str(features.shape()));
  const std::size_t S = features.size(0), d = features.size(1);
  if (S < 2) throw ContractError("contrastive loss needs at least 2 samples, got " + std::to_string(S));
  if (targets.size() != S) {
    throw DimensionError(std::to_string(targets.size()) + " targets for " + std::to_string(S) + " feature rows");
  }
  for (std::size_t i = 0; i < S; ++i) {
    double n2 = 0.0;
    for (std::size_t k = 0; k < d; ++k) n2 += features.at(i * d + k) * features.at(i * d + k);
    if (std::abs(std::sqrt(n2) - 1.0) > 1e-6) {
      throw ContractError("contrastive feature row " + std::to_string(i) + " has norm " + std::to_string(std::sqrt(n2)));
    }
  }
  Tensor sim = scale(matmul(features, transpose2d(features)), 1.0 / w.tau);
  std::vector<Tensor> terms;
  for (std::size_t i = 0; i < S; ++i) {
    std::vector<std::int64_t> cand, pos;
    for (std::size_t j = 0; j < S; ++j) {
      if (j == i && !w.include_self) continue;
      cand.push_back(static_cast<std::int64_t>(i * S + j));
      if (std::abs(targets[i] - targets[j]) < w.y_shift) pos.push_back(static_cast<std::int64_t>(i * S + j));
    }
    if (pos.empty() || cand.empty()) continue;
    const std::size_t np = pos.size(), nc = cand.size();
    Tensor lse = logsumexp(gather(sim, make_index_map(std::move(cand)), {nc}));
    Tensor pos_logits = gather(sim, make_index_map(std::move(pos)), {np});
    // -(1/|P|) sum_p (s_ip - lse) = lse - mean_p s_ip
    terms.push_back(reshape(sub(lse, mean(pos_logits)), {1}));
  }
  if (terms.empty()) return mul(sum(features), Tensor::scalar(0.0));
  return sum(concat(terms));
}

/// Loss value plus its components (as plain numbers for history logging).
struct LossParts {
  Tensor total;
  double mse = 0.0;
  double physics = 0.0;
  double adv = 0.0;
  double con = 0.0;
  double sup = 0.0;
  bool physics_empty = false;
};

namespace detail {

inline Tensor stack_scalars(const std::vector<Tensor>& xs) {
  std::vector<Tensor> parts;
  parts.reserve(xs.size());
  for (const auto& x : xs) parts.push_back(reshape(x, {1}));
  return concat(parts);
}

inline Tensor targets_of(const std::vector<const Sample*>& batch) {
  std::vector<double> t;
  t.reserve(batch.size());
  for (const auto* s : batch) t.push_back(s->target);
  return Tensor::vector(std::move(t));
}

inline void require_batch(const std::vector<const Sample*>& batch) {
  if (batch.empty()) throw ContractError("empty training batch");
}

/// mse + weight * physics, shared by the PITN-Base and operator objectives.
inline LossParts regression_with_physics(const ModelHandle& m, const std::vector<const Sample*>& batch,
                                         const std::vector<ConsecutivePair>& pairs, double weight,
                                         const PhysicsOptions& opt, std::vector<Tensor>* preds_out = nullptr) {
  require_batch(batch);
  std::vector<Tensor> preds;
  preds.reserve(batch.size());
  for (const auto* s : batch) preds.push_back(m.predict(*s));
  Tensor l_mse = mse(stack_scalars(preds), targets_of(batch));
  LossParts out;
  out.mse = l_mse.item();
  out.total = l_mse;
  if (weight != 0.0) {
    auto phys = taylor_physics_loss(m, pairs, opt);
    out.physics = phys.value.item();
    out.physics_empty = phys.empty;
    if (!phys.empty) out.total = add(out.total, scale(phys.value, weight));
  }
  if (preds_out) *preds_out = std::move(preds);
  return out;
}

}  // namespace detail

inline LossParts loss_pitn_base(const ModelHandle& m, const std::vector<const Sample*>& batch,
                                const std::vector<ConsecutivePair>& pairs, const LossWeights& w,
                                const PhysicsOptions& opt = {}) {
  return detail::regression_with_physics(m, batch, pairs, w.gamma, opt);
}

inline LossParts loss_pi_deeponet(const ModelHandle& m, const std::vector<const Sample*>& batch,
                                  const std::vector<ConsecutivePair>& pairs, const LossWeights& w,
                                  const PhysicsOptions& opt = {}) {
  return detail::regression_with_physics(m, batch, pairs, w.lambda_physics, opt);
}

/// Clean MSE + adversarial MSE (PGD inputs through the adversarial norm
/// path) + contrastive term on normalized head features + gamma * physics.
inline LossParts loss_pitn_full(const ModelHandle& m, const std::vector<const Sample*>& batch,
                                const std::vector<ConsecutivePair>& pairs, const LossWeights& w,
                                const PhysicsOptions& opt = {}) {
  if (m.kind() != ModelKind::pitn) throw ConfigError("the adversarial/contrastive objective needs a PITN model");
  detail::require_batch(batch);
  const auto& net = m.pitn();
  std::vector<Tensor> clean, adv, feats;
  std::vector<double> ys;
  for (const auto* s : batch) {
    Tensor svec = Tensor::vector(s->subject_vec);
    Tensor u = Tensor::vector(s->u_window);
    auto out = pitn_forward(net, u, svec, NormPath::clean);
    clean.push_back(out.pred);
    feats.push_back(reshape(l2_normalize(out.features), {1, out.features.numel()}));
    Tensor u_adv = pgd_perturb([&](const Tensor& x) { return pitn_forward(net, x, svec, NormPath::clean).pred; }, u, w,
                               w.pgd_steps);
    adv.push_back(pitn_forward(net, u_adv, svec, NormPath::adversarial).pred);
    ys.push_back(s->target);
  }
  Tensor targets = detail::targets_of(batch);
  Tensor l_clean = mse(detail::stack_scalars(clean), targets);
  Tensor l_adv = mse(detail::stack_scalars(adv), targets);
  LossParts out;
  out.mse = l_clean.item();
  out.adv = l_adv.item();
  out.total = add(l_clean, l_adv);
  if (batch.size() >= 2) {
    Tensor l_con = contrastive_loss(concat(feats), ys, w);
    out.con = l_con.item();
    out.total = add(out.total, l_con);
  }
  if (w.gamma != 0.0) {
    auto phys = taylor_physics_loss(m, pairs, opt);
    out.physics = phys.value.item();
    out.physics_empty = phys.empty;
    if (!phys.empty) out.total = add(out.total, scale(phys.value, w.gamma));
  }
  return out;
}

enum class SupVariant { A, B };

inline std::string to_string(SupVariant v) { return v == SupVariant::A ? "A" : "B"; }

inline SupVariant sup_variant_from_string(const std::string& s) {
  if (s == "A" || s == "a") return SupVariant::A;
  if (s == "B" || s == "b") return SupVariant::B;
  throw ConfigError("unknown supervision variant '" + s + "' (expected A or B)");
}

/// PITN-Base objective plus beta times supervision from a frozen operator.
///  B: mse(base prediction, operator prediction), operator output detached.
///  A: mse(operator(adapter(base features)), target); with `literal_a` the
///     operator sees the raw window instead, which carries no gradient.
inline LossParts loss_aug_pitn(const ModelHandle& base, const ModelHandle& osm, const std::vector<const Sample*>& batch,
                               const std::vector<ConsecutivePair>& pairs, const LossWeights& w, SupVariant variant,
                               bool literal_a = false, const PhysicsOptions& opt = {}) {
  if (!osm.frozen()) throw ContractError("the supervising operator must be frozen before distillation");
  if (base.kind() != ModelKind::pitn) throw ConfigError("distillation trains a PITN base model");
  std::vector<Tensor> preds;
  LossParts out = detail::regression_with_physics(base, batch, pairs, w.gamma, opt, &preds);
  const bool grad_path = w.beta != 0.0;
  Tensor l_sup;
  if (variant == SupVariant::B) {
    std::vector<double> teacher;
    {
      NoGradGuard ng;
      for (const auto* s : batch) teacher.push_back(osm.predict(*s).item());
    }
    Tensor student = detail::stack_scalars(preds);
    l_sup = mse(grad_path ? student : student.detach(), Tensor::vector(std::move(teacher)));
  } else if (literal_a) {
    std::vector<Tensor> op;
    {
      NoGradGuard ng;
      for (const auto* s : batch) op.push_back(osm.predict(*s));
    }
    l_sup = mse(detail::stack_scalars(op), detail::targets_of(batch));
  } else {
    if (osm.kind() != ModelKind::deeponet) throw ConfigError("variant A feeds base features into an operator branch");
    const auto& net = base.pitn();
    const auto& op = osm.deeponet();
    if (net.cfg.adapter_out != op.cfg.branch_in()) {
      throw ConfigError("variant A needs a base adapter of width " + std::to_string(op.cfg.branch_in()) + ", have " +
                        std::to_string(net.cfg.adapter_out));
    }
    std::optional<NoGradGuard> ng;
    if (!grad_path) ng.emplace();
    std::vector<Tensor> op_out;
    for (const auto* s : batch) {
      auto feats = pitn_forward(net, Tensor::vector(s->u_window), Tensor::vector(s->subject_vec)).features;
      op_out.push_back(deeponet_from_branch_input(op, apply_linear(net.params, "adapter", feats), s->y_query));
    }
    l_sup = mse(detail::stack_scalars(op_out), detail::targets_of(batch));
  }
  out.sup = l_sup.item();
  if (grad_path) out.total = add(out.total, scale(l_sup, w.beta));
  return out;
}

}  // namespace opsup
