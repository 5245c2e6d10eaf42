#pragma once

// The two network families.
//
// PITN: the window is folded into a (period x frequency) map, lifted to C
// channels, passed through residual inception blocks (1x1, 3x3, 5x5 branches,
// concatenated and projected back to C), layer-normalized over channels with
// either the clean or the adversarial parameter set, average-pooled, joined
// with the subject vector and regressed by a small tanh MLP.
//
// DeepONet: branch MLP on (window, subject vector), trunk MLP on the query
// coordinate y, prediction = <branch, trunk> + b0.
//
// Both end in a fixed affine map (offset + scale * raw) so the raw network
// output lives on a unit scale while predictions are in mmHg.

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "opsup/config.hpp"
#include "opsup/nn.hpp"
#include "opsup/signals.hpp"

namespace opsup {

enum class NormPath { clean, adversarial };

struct OutputAffine {
  double offset = 0.0;
  double scale = 1.0;
};

struct PitnConfig {
  std::size_t window = 256;
  std::size_t channels = 16;
  std::size_t branch_channels = 16;
  std::size_t n_blocks = 2;
  std::vector<std::size_t> head_hidden{64, 32};
  std::size_t subject_dim = 2;
  bool residual = true;
  // width of the trainable adapter from penultimate features to a frozen
  // operator's branch input; 0 = no adapter
  std::size_t adapter_out = 0;
};

struct DeepOnetConfig {
  std::size_t window = 256;
  std::size_t subject_dim = 2;
  std::vector<std::size_t> branch_hidden{128};
  std::vector<std::size_t> trunk_hidden{64};
  std::size_t latent = 64;

  std::size_t branch_in() const { return window + subject_dim; }
};

inline Json to_json(const PitnConfig& c) {
  return Json{{"window", c.window},           {"channels", c.channels},       {"branch_channels", c.branch_channels},
              {"n_blocks", c.n_blocks},       {"head_hidden", c.head_hidden}, {"subject_dim", c.subject_dim},
              {"residual", c.residual},       {"adapter_out", c.adapter_out}};
}

inline Json to_json(const DeepOnetConfig& c) {
  return Json{{"window", c.window},
              {"subject_dim", c.subject_dim},
              {"branch_hidden", c.branch_hidden},
              {"trunk_hidden", c.trunk_hidden},
              {"latent", c.latent}};
}

/// Missing keys keep their defaults; unknown keys are rejected.
inline PitnConfig pitn_config_from_json(const Json& j) {
  const std::string w = "pitn";
  require_known_keys(j, {"window", "channels", "branch_channels", "n_blocks", "head_hidden", "subject_dim", "residual",
                         "adapter_out"}, w);
  PitnConfig c;
  read_key(j, "window", c.window, w);
  read_key(j, "channels", c.channels, w);
  read_key(j, "branch_channels", c.branch_channels, w);
  read_key(j, "n_blocks", c.n_blocks, w);
  read_key(j, "head_hidden", c.head_hidden, w);
  read_key(j, "subject_dim", c.subject_dim, w);
  read_key(j, "residual", c.residual, w);
  read_key(j, "adapter_out", c.adapter_out, w);
  return c;
}

inline DeepOnetConfig deeponet_config_from_json(const Json& j) {
  const std::string w = "deeponet";
  require_known_keys(j, {"window", "subject_dim", "branch_hidden", "trunk_hidden", "latent"}, w);
  DeepOnetConfig c;
  read_key(j, "window", c.window, w);
  read_key(j, "subject_dim", c.subject_dim, w);
  read_key(j, "branch_hidden", c.branch_hidden, w);
  read_key(j, "trunk_hidden", c.trunk_hidden, w);
  read_key(j, "latent", c.latent, w);
  return c;
}

struct PitnModel {
  PitnConfig cfg;
  ParamSet params;
  OutputAffine affine;
};

struct DeepOnetModel {
  DeepOnetConfig cfg;
  ParamSet params;
  OutputAffine affine;
};

// ---- PITN -------------------------------------------------------------------------

inline std::string block_name(std::size_t k) { return "block" + std::to_string(k); }

inline PitnModel init_pitn(const PitnConfig& cfg, std::uint64_t seed) {
  if (cfg.n_blocks == 0 || cfg.channels == 0 || cfg.branch_channels == 0 || cfg.head_hidden.empty()) {
    throw ConfigError("PITN needs at least one block, one channel and one head layer");
  }
  PitnModel m{cfg, {}, {}};
  Rng rng(derive_seed(seed, 1));
  const std::size_t C = cfg.channels, B = cfg.branch_channels;
  auto& ps = m.params;
  ps.add("stem.k", xavier_uniform({C, 1, 1, 1}, rng));
  ps.add("stem.b", Tensor::zeros({C}));
  for (std::size_t k = 0; k < cfg.n_blocks; ++k) {
    const std::string b = block_name(k);
    for (std::size_t ks : {1u, 3u, 5u}) {
      const std::string n = b + ".c" + std::to_string(ks);
      ps.add(n + ".k", xavier_uniform({B, C, ks, ks}, rng));
      ps.add(n + ".b", Tensor::zeros({B}));
    }
    ps.add(b + ".proj.k", xavier_uniform({C, 3 * B, 1, 1}, rng));
    ps.add(b + ".proj.b", Tensor::zeros({C}));
    ps.add(b + ".ln_clean.g", Tensor::ones({C}));
    ps.add(b + ".ln_clean.b", Tensor::zeros({C}));
    ps.add(b + ".ln_adv.g", Tensor::ones({C}));
    ps.add(b + ".ln_adv.b", Tensor::zeros({C}));
  }
  std::size_t width = C + cfg.subject_dim;
  for (std::size_t i = 0; i < cfg.head_hidden.size(); ++i) {
    add_linear(ps, "head" + std::to_string(i), width, cfg.head_hidden[i], rng);
    width = cfg.head_hidden[i];
  }
  add_linear(ps, "out", width, 1, rng);
  if (cfg.adapter_out > 0) {
    // own stream, so the rest of the network initializes identically with or without it
    Rng adapter_rng(derive_seed(seed, 2));
    add_linear(ps, "adapter", width, cfg.adapter_out, adapter_rng);
  }
  return m;
}

struct PitnOutput {
  Tensor pred;      // scalar, mmHg
  Tensor features;  // penultimate activations
};

namespace detail {

/// Layer norm over channels at every position of a [C, H, W] map.
inline Tensor channel_layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  const std::size_t C = x.size(0), hw = x.size(1) * x.size(2);
  Tensor rows = transpose2d(reshape(x, {C, hw}));
  Tensor normed = layer_norm(rows, gain, bias);
  return reshape(transpose2d(normed), x.shape());
}

inline Tensor conv_bias(const Tensor& x, const ParamSet& ps, const std::string& name) {
  return add_channel_bias(conv2d(x, ps[name + ".k"]), ps[name + ".b"]);
}

}  // namespace detail

inline PitnOutput pitn_forward(const PitnModel& m, const Tensor& u_window, const Tensor& subject_vec,
                               NormPath path = NormPath::clean) {
  const auto& cfg = m.cfg;
  const auto& ps = m.params;
  if (u_window.dim() != 1) throw DimensionError("PITN expects a window vector, got " + shape_str(u_window.shape()));
  if (u_window.numel() != cfg.window) {
    throw DimensionError("PITN configured for window " + std::to_string(cfg.window) + ", got " +
                         std::to_string(u_window.numel()));
  }
  if (subject_vec.numel() != cfg.subject_dim) {
    throw DimensionError("subject vector of length " + std::to_string(subject_vec.numel()) + ", expected " +
                         std::to_string(cfg.subject_dim));
  }
  const std::size_t f = dominant_frequency(u_window);
  Tensor h = detail::conv_bias(fold_to_2d(u_window, f), ps, "stem");
  const char* ln = path == NormPath::clean ? ".ln_clean" : ".ln_adv";
  for (std::size_t k = 0; k < cfg.n_blocks; ++k) {
    const std::string b = block_name(k);
    Tensor y = concat({tanh(detail::conv_bias(h, ps, b + ".c1")), tanh(detail::conv_bias(h, ps, b + ".c3")),
                       tanh(detail::conv_bias(h, ps, b + ".c5"))});
    y = detail::conv_bias(y, ps, b + ".proj");
    h = cfg.residual ? add(h, y) : y;
    h = detail::channel_layer_norm(h, ps[b + ln + ".g"], ps[b + ln + ".b"]);
    check_finite(h, "temporal block " + std::to_string(k));
  }
  const std::size_t C = h.size(0), hw = h.size(1) * h.size(2);
  Tensor pooled =
      reshape(matmul(reshape(h, {C, hw}), Tensor::full({hw, 1}, 1.0 / static_cast<double>(hw))), {C});
  Tensor z = concat({pooled, subject_vec.detach()});
  for (std::size_t i = 0; i < cfg.head_hidden.size(); ++i) {
    z = tanh(apply_linear(ps, "head" + std::to_string(i), z));
    check_finite(z, "head layer " + std::to_string(i));
  }
  Tensor raw = reshape(apply_linear(ps, "out", z), {});
  check_finite(raw, "output layer");
  return {add_scalar(scale(raw, m.affine.scale), m.affine.offset), z};
}

// ---- DeepONet ------------------------------------------------------------------------

inline DeepOnetModel init_deeponet(const DeepOnetConfig& cfg, std::uint64_t seed) {
  if (cfg.latent == 0) throw ConfigError("DeepONet latent width must be positive");
  DeepOnetModel m{cfg, {}, {}};
  Rng rng(derive_seed(seed, 1));
  auto& ps = m.params;
  std::size_t width = cfg.branch_in();
  for (std::size_t i = 0; i < cfg.branch_hidden.size(); ++i) {
    add_linear(ps, "branch" + std::to_string(i), width, cfg.branch_hidden[i], rng);
    width = cfg.branch_hidden[i];
  }
  add_linear(ps, "branch_out", width, cfg.latent, rng);
  width = 1;
  for (std::size_t i = 0; i < cfg.trunk_hidden.size(); ++i) {
    add_linear(ps, "trunk" + std::to_string(i), width, cfg.trunk_hidden[i], rng);
    width = cfg.trunk_hidden[i];
  }
  add_linear(ps, "trunk_out", width, cfg.latent, rng);
  ps.add("b0", Tensor::scalar(0.0));
  return m;
}

/// sum_k b_k t_k + b0
inline Tensor deeponet_combine(const Tensor& branch, const Tensor& trunk, const Tensor& b0) {
  if (branch.numel() != trunk.numel()) {
    throw DimensionError("branch width " + std::to_string(branch.numel()) + " != trunk width " +
                         std::to_string(trunk.numel()));
  }
  return add(dot(branch, trunk), reshape(b0, {}));
}

/// Branch features of an already assembled branch input.
inline Tensor deeponet_branch(const DeepOnetModel& m, const Tensor& branch_input) {
  if (branch_input.numel() != m.cfg.branch_in()) {
    throw DimensionError("DeepONet branch expects " + std::to_string(m.cfg.branch_in()) + " inputs, got " +
                         std::to_string(branch_input.numel()));
  }
  Tensor z = branch_input;
  for (std::size_t i = 0; i < m.cfg.branch_hidden.size(); ++i)
    z = tanh(apply_linear(m.params, "branch" + std::to_string(i), z));
  return apply_linear(m.params, "branch_out", z);
}

inline Tensor deeponet_trunk(const DeepOnetModel& m, double y) {
  Tensor z = Tensor::vector({y});
  for (std::size_t i = 0; i < m.cfg.trunk_hidden.size(); ++i)
    z = tanh(apply_linear(m.params, "trunk" + std::to_string(i), z));
  return apply_linear(m.params, "trunk_out", z);
}

/// Prediction (mmHg) from an assembled branch input and query coordinate.
inline Tensor deeponet_from_branch_input(const DeepOnetModel& m, const Tensor& branch_input, double y) {
  Tensor raw = deeponet_combine(deeponet_branch(m, branch_input), deeponet_trunk(m, y), m.params["b0"]);
  check_finite(raw, "operator output");
  return add_scalar(scale(raw, m.affine.scale), m.affine.offset);
}

inline Tensor deeponet_forward(const DeepOnetModel& m, const Tensor& u, const Tensor& subject_vec, double y) {
  if (u.numel() != m.cfg.window || subject_vec.numel() != m.cfg.subject_dim) {
    throw DimensionError("DeepONet expects window " + std::to_string(m.cfg.window) + " and subject vector " +
                         std::to_string(m.cfg.subject_dim) + ", got " + shape_str(u.shape()) + " and " +
                         shape_str(subject_vec.shape()));
  }
  return deeponet_from_branch_input(m, concat({reshape(u, {u.numel()}), subject_vec.detach()}), y);
}

// ---- handle ------------------------------------------------------------------------------

enum class ModelKind { pitn, deeponet };

inline std::string to_string(ModelKind k) { return k == ModelKind::pitn ? "pitn" : "deeponet"; }

inline ModelKind model_kind_from_string(const std::string& s) {
  if (s == "pitn") return ModelKind::pitn;
  if (s == "deeponet") return ModelKind::deeponet;
  throw ConfigError("unknown model kind '" + s + "' (expected pitn or deeponet)");
}

/// A network of either family plus its seed and freeze state.
class ModelHandle {
 public:
  ModelHandle() = default;
  ModelHandle(PitnModel m, std::uint64_t seed) : net_(std::move(m)), seed_(seed) {}
  ModelHandle(DeepOnetModel m, std::uint64_t seed) : net_(std::move(m)), seed_(seed) {}

  ModelKind kind() const { return net_.index() == 0 ? ModelKind::pitn : ModelKind::deeponet; }
  std::uint64_t seed() const { return seed_; }
  bool frozen() const { return frozen_; }

  const PitnModel& pitn() const { return std::get<PitnModel>(net_); }
  PitnModel& pitn() { return std::get<PitnModel>(net_); }
  const DeepOnetModel& deeponet() const { return std::get<DeepOnetModel>(net_); }
  DeepOnetModel& deeponet() { return std::get<DeepOnetModel>(net_); }

  const ParamSet& params() const { return std::visit([](const auto& m) -> const ParamSet& { return m.params; }, net_); }
  ParamSet& params() { return std::visit([](auto& m) -> ParamSet& { return m.params; }, net_); }
  const OutputAffine& affine() const {
    return std::visit([](const auto& m) -> const OutputAffine& { return m.affine; }, net_);
  }
  void set_affine(OutputAffine a) {
    std::visit([&](auto& m) { m.affine = a; }, net_);
  }

  Json config() const {
    return std::visit([](const auto& m) { return to_json(m.cfg); }, net_);
  }
  std::size_t window() const {
    return std::visit([](const auto& m) { return m.cfg.window; }, net_);
  }

  /// Stops gradient flow into every parameter; irreversible for the handle.
  void freeze() {
    params().set_requires_grad(false);
    frozen_ = true;
  }

  /// Scalar prediction in mmHg for window u of `s` (u may carry a tape or tangent).
  Tensor predict(const Tensor& u, const Sample& s, NormPath path = NormPath::clean) const {
    Tensor svec = Tensor::vector(s.subject_vec);
    if (kind() == ModelKind::pitn) return pitn_forward(pitn(), u, svec, path).pred;
    return deeponet_forward(deeponet(), u, svec, s.y_query);
  }

  Tensor predict(const Sample& s, NormPath path = NormPath::clean) const {
    return predict(Tensor::vector(s.u_window), s, path);
  }

  /// Deep copy with independent parameters.
  ModelHandle clone() const {
    ModelHandle h = *this;
    std::visit([](auto& m) { m.params = m.params.clone(); }, h.net_);
    return h;
  }

 private:
  std::variant<PitnModel, DeepOnetModel> net_;
  std::uint64_t seed_ = 0;
  bool frozen_ = false;
};

inline ModelHandle init_params(ModelKind kind, std::uint64_t seed, const Json& config) {
  if (kind == ModelKind::pitn) return ModelHandle(init_pitn(pitn_config_from_json(config), seed), seed);
  return ModelHandle(init_deeponet(deeponet_config_from_json(config), seed), seed);
}

}  // namespace opsup
