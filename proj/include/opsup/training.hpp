#pragma once

// Training loops for the five model configurations, operator-supervised
// distillation, the beta sweep, and the on-disk run registry.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <exception>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "opsup/checkpoint.hpp"
#include "opsup/dataset.hpp"
#include "opsup/losses.hpp"
#include "opsup/metrics.hpp"
#include "opsup/optim.hpp"

namespace opsup {

// ---- configuration -----------------------------------------------------------------

enum class TrainModel { pitn_base, pitn_base_nophys, pitn_full, deeponet, pi_deeponet };

inline const std::vector<std::string>& train_model_names() {
  static const std::vector<std::string> names{"pitn-base", "pitn-base-nophys", "pitn-full", "deeponet", "pi-deeponet"};
  return names;
}

inline std::string to_string(TrainModel m) { return train_model_names()[static_cast<std::size_t>(m)]; }

inline TrainModel train_model_from_string(const std::string& s) {
  const auto& names = train_model_names();
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i] == s) return static_cast<TrainModel>(i);
  std::string valid;
  for (const auto& n : names) valid += (valid.empty() ? "" : ", ") + n;
  throw ConfigError("unknown model '" + s + "' (valid: " + valid + ")");
}

inline ModelKind family_of(TrainModel m) {
  return m == TrainModel::deeponet || m == TrainModel::pi_deeponet ? ModelKind::deeponet : ModelKind::pitn;
}

/// Where the Taylor term's consecutive pairs come from. The term needs no
/// targets, so `sequence` uses every pair of adjacent beats of a subject
/// (inputs of unlabeled samples included); `labeled` pairs each training
/// sample with the next training sample of its subject.
enum class PhysicsPairs { sequence, labeled };

inline std::string to_string(PhysicsPairs p) { return p == PhysicsPairs::sequence ? "sequence" : "labeled"; }

inline PhysicsPairs physics_pairs_from_string(const std::string& s) {
  if (s == "sequence") return PhysicsPairs::sequence;
  if (s == "labeled") return PhysicsPairs::labeled;
  throw ConfigError("unknown physics_pairs '" + s + "' (expected sequence or labeled)");
}

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 16;
  double lr = 1e-3;
  double lr_adv = 1e-3;  // adversarial layer-norm parameters
  OptimizerKind optimizer = OptimizerKind::adam;
  std::uint64_t seed = 0;
  JvpMode jvp_mode = JvpMode::exact;
  PhysicsPairs physics_pairs = PhysicsPairs::sequence;
  double fd_step = 1e-5;
  SupVariant variant = SupVariant::B;
  bool literal_variant_a = false;
  LossWeights weights;
  PitnConfig pitn;
  DeepOnetConfig deeponet;

  void check() const {
    if (epochs < 1) throw ConfigError("epochs must be at least 1");
    if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
    if (!(lr > 0.0) || !(lr_adv > 0.0)) throw ConfigError("learning rates must be positive");
    if (!(fd_step > 0.0)) throw ConfigError("fd_step must be positive");
    weights.check();
  }

  PhysicsOptions physics() const { return {jvp_mode, fd_step}; }
};

inline Json to_json(const LossWeights& w) {
  return Json{{"gamma", w.gamma}, {"lambda_physics", w.lambda_physics}, {"beta", w.beta},
              {"eta", w.eta},     {"epsilon", w.epsilon},               {"tau", w.tau},
              {"y_shift", w.y_shift}, {"pgd_steps", w.pgd_steps},       {"include_self", w.include_self},
              {"signal_bound", w.signal_bound}};
}

inline LossWeights loss_weights_from_json(const Json& j) {
  const std::string w = "loss";
  require_known_keys(j, {"gamma", "lambda_physics", "beta", "eta", "epsilon", "tau", "y_shift", "pgd_steps",
                         "include_self", "signal_bound"}, w);
  LossWeights out;
  read_key(j, "gamma", out.gamma, w);
  read_key(j, "lambda_physics", out.lambda_physics, w);
  read_key(j, "beta", out.beta, w);
  read_key(j, "eta", out.eta, w);
  read_key(j, "epsilon", out.epsilon, w);
  read_key(j, "tau", out.tau, w);
  read_key(j, "y_shift", out.y_shift, w);
  read_key(j, "pgd_steps", out.pgd_steps, w);
  read_key(j, "include_self", out.include_self, w);
  read_key(j, "signal_bound", out.signal_bound, w);
  return out;
}

inline Json to_json(const TrainConfig& c) {
  return Json{{"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"lr", c.lr},
              {"lr_adv", c.lr_adv},
              {"optimizer", to_string(c.optimizer)},
              {"seed", c.seed},
              {"jvp_mode", to_string(c.jvp_mode)},
              {"fd_step", c.fd_step},
              {"variant", to_string(c.variant)},
              {"literal_variant_a", c.literal_variant_a},
              {"physics_pairs", to_string(c.physics_pairs)}};
}

/// Reads the "train" section into `c`, leaving absent keys untouched.
inline void apply_train_json(const Json& j, TrainConfig& c) {
  const std::string w = "train";
  require_known_keys(j, {"epochs", "batch_size", "lr", "lr_adv", "optimizer", "seed", "jvp_mode", "fd_step", "variant",
                         "literal_variant_a", "physics_pairs"}, w);
  read_key(j, "epochs", c.epochs, w);
  read_key(j, "batch_size", c.batch_size, w);
  read_key(j, "lr", c.lr, w);
  read_key(j, "lr_adv", c.lr_adv, w);
  read_key(j, "seed", c.seed, w);
  read_key(j, "fd_step", c.fd_step, w);
  read_key(j, "literal_variant_a", c.literal_variant_a, w);
  std::string s;
  if (j.contains("optimizer")) {
    read_key(j, "optimizer", s, w);
    c.optimizer = optimizer_kind_from_string(s);
  }
  if (j.contains("jvp_mode")) {
    read_key(j, "jvp_mode", s, w);
    c.jvp_mode = jvp_mode_from_string(s);
  }
  if (j.contains("physics_pairs")) {
    read_key(j, "physics_pairs", s, w);
    c.physics_pairs = physics_pairs_from_string(s);
  }
  if (j.contains("variant")) {
    read_key(j, "variant", s, w);
    c.variant = sup_variant_from_string(s);
  }
}

inline Json to_json(const SplitSpec& s) {
  return Json{{"bin_width_mmhg", s.bin_width_mmhg},
              {"points_per_bin", s.points_per_bin},
              {"seed", s.seed},
              {"per_subject", s.per_subject}};
}

inline SplitSpec split_spec_from_json(const Json& j) {
  const std::string w = "split";
  require_known_keys(j, {"bin_width_mmhg", "points_per_bin", "seed", "per_subject"}, w);
  SplitSpec s;
  read_key(j, "bin_width_mmhg", s.bin_width_mmhg, w);
  read_key(j, "points_per_bin", s.points_per_bin, w);
  read_key(j, "seed", s.seed, w);
  read_key(j, "per_subject", s.per_subject, w);
  if (!(s.bin_width_mmhg > 0.0) || s.points_per_bin < 1) throw ConfigError("split bins need positive width and count");
  return s;
}

inline Json to_json(const WindowSpec& s) {
  return Json{{"length", s.length}, {"beat_search_radius_s", s.beat_search_radius_s}};
}

inline WindowSpec window_spec_from_json(const Json& j) {
  const std::string w = "window";
  require_known_keys(j, {"length", "beat_search_radius_s"}, w);
  WindowSpec s;
  read_key(j, "length", s.length, w);
  read_key(j, "beat_search_radius_s", s.beat_search_radius_s, w);
  if (s.length < 4) throw ConfigError("window length must be at least 4 samples");
  return s;
}

// ---- data --------------------------------------------------------------------------

struct Dataset {
  std::vector<Sample> train, test;
};

/// Normalize, window and split a cohort.
inline Dataset materialize(const std::vector<WaveformRecord>& records, const SplitSpec& split,
                           const WindowSpec& window) {
  auto samples = build_samples(records, window);
  if (samples.empty()) throw PreprocessingError("no complete windows in the cohort");
  auto [train, test] = bin_split(samples, split);
  return {std::move(train), std::move(test)};
}

/// For each training sample, the index of the next training sample of the
/// same subject in time order, if any.
inline std::vector<std::optional<std::size_t>> time_successors(const std::vector<Sample>& train) {
  std::map<std::string, std::vector<std::size_t>> by_subject;
  for (std::size_t i = 0; i < train.size(); ++i) by_subject[train[i].subject_id].push_back(i);
  std::vector<std::optional<std::size_t>> next(train.size());
  for (auto& [id, idx] : by_subject) {
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return train[a].seq < train[b].seq; });
    for (std::size_t k = 0; k + 1 < idx.size(); ++k) next[idx[k]] = idx[k + 1];
  }
  return next;
}

/// Every pair of adjacent beats (seq and seq + 1 of one subject) across the
/// train and test splits. Only inputs of these samples enter the Taylor term.
inline std::vector<ConsecutivePair> sequence_pairs(const Dataset& data) {
  std::map<std::string, std::vector<const Sample*>> by_subject;
  for (const auto* part : {&data.train, &data.test})
    for (const auto& s : *part) by_subject[s.subject_id].push_back(&s);
  std::vector<ConsecutivePair> out;
  for (auto& [id, v] : by_subject) {
    std::stable_sort(v.begin(), v.end(), [](const Sample* a, const Sample* b) { return a->seq < b->seq; });
    for (std::size_t k = 0; k + 1 < v.size(); ++k)
      if (v[k + 1]->seq == v[k]->seq + 1) out.push_back({v[k], v[k + 1]});
  }
  return out;
}

/// Hands out pairs from a shuffled list, reshuffling each time it runs out,
/// so every pair is visited equally often.
class PairStream {
 public:
  PairStream(std::vector<ConsecutivePair> pairs, std::uint64_t seed) : pairs_(std::move(pairs)), rng_(seed) {
    rng_.shuffle(pairs_.begin(), pairs_.end());
  }

  std::vector<ConsecutivePair> take(std::size_t n) {
    std::vector<ConsecutivePair> out;
    if (pairs_.empty()) return out;
    for (std::size_t k = 0; k < n; ++k) {
      if (cursor_ == pairs_.size()) {
        rng_.shuffle(pairs_.begin(), pairs_.end());
        cursor_ = 0;
      }
      out.push_back(pairs_[cursor_++]);
    }
    return out;
  }

 private:
  std::vector<ConsecutivePair> pairs_;
  Rng rng_;
  std::size_t cursor_ = 0;
};

/// Target mean and population SD of the training set; the network predicts
/// in these standardized units and the affine maps back to mmHg.
inline OutputAffine target_affine(const std::vector<Sample>& train) {
  if (train.empty()) throw ContractError("empty training set");
  double m = 0.0;
  for (const auto& s : train) m += s.target;
  m /= double(train.size());
  double v = 0.0;
  for (const auto& s : train) v += (s.target - m) * (s.target - m);
  const double sd = std::sqrt(v / double(train.size()));
  return {m, sd > 0.0 ? sd : 1.0};
}

/// Shuffled batches of training indices.
inline std::vector<std::vector<std::size_t>> plain_batches(std::size_t n, std::size_t batch_size, Rng& rng) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  rng.shuffle(order.begin(), order.end());
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += batch_size)
    out.emplace_back(order.begin() + i, order.begin() + std::min(n, i + batch_size));
  return out;
}

/// Batches built from shuffled same-bin pairs (bins of width y_shift), so
/// most batches hold positives for the contrastive term.
inline std::vector<std::vector<std::size_t>> contrastive_batches(const std::vector<Sample>& train,
                                                                 std::size_t batch_size, double y_shift, Rng& rng) {
  const double width = y_shift > 0.0 ? y_shift : 1.0;
  std::map<long long, std::vector<std::size_t>> bins;
  for (std::size_t i = 0; i < train.size(); ++i)
    bins[static_cast<long long>(std::floor(train[i].target / width))].push_back(i);
  std::vector<std::vector<std::size_t>> chunks;
  for (auto& [key, idx] : bins) {
    rng.shuffle(idx.begin(), idx.end());
    for (std::size_t k = 0; k < idx.size(); k += 2)
      chunks.emplace_back(idx.begin() + k, idx.begin() + std::min(idx.size(), k + 2));
  }
  rng.shuffle(chunks.begin(), chunks.end());
  std::vector<std::size_t> order;
  for (const auto& c : chunks) order.insert(order.end(), c.begin(), c.end());
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < order.size(); i += batch_size)
    out.emplace_back(order.begin() + i, order.begin() + std::min(order.size(), i + batch_size));
  return out;
}

// ---- records -------------------------------------------------------------------------

struct EpochLoss {
  double total = 0.0, mse = 0.0, physics = 0.0, adv = 0.0, con = 0.0, sup = 0.0;

  bool operator==(const EpochLoss&) const = default;
};

struct RunRecord {
  std::string config_hash;
  std::string model;           // a train model name, or aug-pitn-a / aug-pitn-b
  std::optional<double> beta;  // distillation runs only
  std::uint64_t seed = 0;
  std::vector<EpochLoss> history;
  std::optional<Evaluation> eval;  // test split; absent when it has fewer than two samples
  double wall_clock_s = 0.0;
  std::string checkpoint;
  std::string osm_config_hash;
};

struct TrainResult {
  RunRecord record;
  ModelHandle model;
};

/// Predictions of `m` on `samples`, without recording a tape.
inline std::vector<PredictionPoint> predict_all(const ModelHandle& m, const std::vector<Sample>& samples) {
  NoGradGuard ng;
  std::vector<PredictionPoint> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back({s.subject_id, m.predict(s).item(), s.target});
  return out;
}

inline std::optional<Evaluation> evaluate(const ModelHandle& m, const std::vector<Sample>& samples) {
  if (samples.size() < 2) return std::nullopt;
  return summarize(predict_all(m, samples));
}

/// The document whose hash names a run: model, effective config, and
/// whatever the caller adds (data fingerprint, split, supervisor).
inline Json run_identity(const std::string& model, const TrainConfig& cfg, const Json& extra) {
  Json j{{"model", model},
         {"train", to_json(cfg)},
         {"loss", to_json(cfg.weights)},
         {"pitn", to_json(cfg.pitn)},
         {"deeponet", to_json(cfg.deeponet)}};
  if (!extra.is_null()) j["context"] = extra;
  return j;
}

namespace detail {

using LossFn = std::function<LossParts(const ModelHandle&, const std::vector<const Sample*>&,
                                       const std::vector<ConsecutivePair>&)>;

inline void fit(ModelHandle& m, const Dataset& data, const TrainConfig& cfg, const LossFn& loss, bool contrastive,
                RunRecord& rec) {
  const auto& train = data.train;
  if (train.empty()) throw ContractError("cannot train on an empty training split");
  const bool labeled_pairs = cfg.physics_pairs == PhysicsPairs::labeled;
  const auto next = time_successors(train);
  PairStream stream(labeled_pairs ? std::vector<ConsecutivePair>{} : sequence_pairs(data), derive_seed(cfg.seed, 4));
  Optimizer opt(m.params(), cfg.optimizer, cfg.lr, cfg.lr_adv);
  Rng batch_rng(derive_seed(cfg.seed, 3));
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto batches = contrastive ? contrastive_batches(train, cfg.batch_size, cfg.weights.y_shift, batch_rng)
                               : plain_batches(train.size(), cfg.batch_size, batch_rng);
    EpochLoss acc;
    for (std::size_t b = 0; b < batches.size(); ++b) {
      std::vector<const Sample*> batch;
      std::vector<ConsecutivePair> pairs;
      for (std::size_t i : batches[b]) {
        batch.push_back(&train[i]);
        if (labeled_pairs && next[i]) pairs.push_back({&train[i], &train[*next[i]]});
      }
      if (!labeled_pairs) pairs = stream.take(batch.size());
      LossParts parts = loss(m, batch, pairs);
      const double total = parts.total.item();
      if (!std::isfinite(total)) {
        throw NumericError("loss diverged at epoch " + std::to_string(epoch + 1) + ", batch " + std::to_string(b + 1) +
                           " (mse " + std::to_string(parts.mse) + ", physics " + std::to_string(parts.physics) +
                           ", adv " + std::to_string(parts.adv) + ", con " + std::to_string(parts.con) + ", sup " +
                           std::to_string(parts.sup) + ")");
      }
      auto grads = grad(parts.total, m.params().tensors());
      opt.step(m.params(), grads);
      const double wgt = double(batch.size()) / double(train.size());
      acc.total += wgt * total;
      acc.mse += wgt * parts.mse;
      acc.physics += wgt * parts.physics;
      acc.adv += wgt * parts.adv;
      acc.con += wgt * parts.con;
      acc.sup += wgt * parts.sup;
    }
    rec.history.push_back(acc);
  }
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace detail

/// Trains one of the five configurations. pitn-base-nophys is pitn-base with
/// gamma forced to 0; deeponet is pi-deeponet with lambda_physics forced to 0.
inline TrainResult train(TrainModel which, const Dataset& data, const TrainConfig& config, const Json& context = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  TrainConfig cfg = config;
  if (which == TrainModel::pitn_base_nophys) cfg.weights.gamma = 0.0;
  if (which == TrainModel::deeponet) cfg.weights.lambda_physics = 0.0;
  cfg.check();
  const ModelKind kind = family_of(which);
  ModelHandle m = init_params(kind, cfg.seed, kind == ModelKind::pitn ? to_json(cfg.pitn) : to_json(cfg.deeponet));
  m.set_affine(target_affine(data.train));

  RunRecord rec;
  rec.model = to_string(which);
  rec.seed = cfg.seed;
  rec.config_hash = config_hash(run_identity(rec.model, cfg, context));
  const auto w = cfg.weights;
  const auto phys = cfg.physics();
  detail::LossFn loss;
  switch (which) {
    case TrainModel::pitn_base:
    case TrainModel::pitn_base_nophys:
      loss = [=](const ModelHandle& h, const auto& b, const auto& p) { return loss_pitn_base(h, b, p, w, phys); };
      break;
    case TrainModel::pitn_full:
      loss = [=](const ModelHandle& h, const auto& b, const auto& p) { return loss_pitn_full(h, b, p, w, phys); };
      break;
    case TrainModel::deeponet:
    case TrainModel::pi_deeponet:
      loss = [=](const ModelHandle& h, const auto& b, const auto& p) { return loss_pi_deeponet(h, b, p, w, phys); };
      break;
  }
  detail::fit(m, data, cfg, loss, which == TrainModel::pitn_full, rec);
  rec.eval = evaluate(m, data.test);
  rec.wall_clock_s = detail::seconds_since(t0);
  return {std::move(rec), std::move(m)};
}

/// Trains a PITN base model under supervision of a frozen operator. The
/// operator is copied and frozen here, so the caller's handle is untouched.
inline TrainResult distill(const ModelHandle& osm_in, const Dataset& data, const TrainConfig& config,
                           const Json& context = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  TrainConfig cfg = config;
  cfg.check();
  ModelHandle osm = osm_in.clone();
  osm.freeze();
  if (cfg.variant == SupVariant::A && !cfg.literal_variant_a) {
    if (osm.kind() != ModelKind::deeponet) throw ConfigError("variant A needs an operator (DeepONet) supervisor");
    cfg.pitn.adapter_out = osm.deeponet().cfg.branch_in();
  }
  ModelHandle m = init_params(ModelKind::pitn, cfg.seed, to_json(cfg.pitn));
  m.set_affine(target_affine(data.train));

  RunRecord rec;
  rec.model = "aug-pitn-" + std::string(cfg.variant == SupVariant::A ? "a" : "b");
  rec.beta = cfg.weights.beta;
  rec.seed = cfg.seed;
  rec.osm_config_hash = config_hash(osm.config());
  Json ctx = context;
  ctx["osm"] = Json{{"config_hash", rec.osm_config_hash}, {"params_sha256", sha256_hex(checkpoint_bytes(osm))}};
  rec.config_hash = config_hash(run_identity(rec.model, cfg, ctx));
  const auto w = cfg.weights;
  const auto phys = cfg.physics();
  const auto variant = cfg.variant;
  const bool literal = cfg.literal_variant_a;
  detail::LossFn loss = [&osm, w, phys, variant, literal](const ModelHandle& h, const auto& b, const auto& p) {
    return loss_aug_pitn(h, osm, b, p, w, variant, literal, phys);
  };
  detail::fit(m, data, cfg, loss, false, rec);
  rec.eval = evaluate(m, data.test);
  rec.wall_clock_s = detail::seconds_since(t0);
  return {std::move(rec), std::move(m)};
}

/// Loads, hash-verifies and distills from a checkpoint on disk.
inline TrainResult distill(const std::filesystem::path& osm_checkpoint, const Dataset& data, const TrainConfig& config,
                           const Json& context = {}, const std::optional<std::string>& expected_hash = std::nullopt) {
  return distill(load_checkpoint(osm_checkpoint, expected_hash), data, config, context);
}

inline const std::vector<double>& default_betas() {
  static const std::vector<double> betas{0.05, 0.1, 0.5, 1.0};
  return betas;
}

/// One distillation run per beta with the shared seed; results ascending by
/// beta. Up to `jobs` runs execute at once; each run only reads the shared
/// operator and data, so results do not depend on scheduling.
inline std::vector<TrainResult> ablate_beta(const ModelHandle& osm, const Dataset& data, const TrainConfig& config,
                                            std::vector<double> betas = default_betas(), const Json& context = {},
                                            std::size_t jobs = 1) {
  if (betas.empty()) throw ContractError("beta sweep needs at least one beta");
  if (jobs < 1) throw ConfigError("ablation needs at least one job");
  std::sort(betas.begin(), betas.end());
  std::vector<std::optional<TrainResult>> slots(betas.size());
  std::vector<std::exception_ptr> errors(betas.size());
  auto run_one = [&](std::size_t i) {
    try {
      TrainConfig cfg = config;
      cfg.weights.beta = betas[i];
      slots[i] = distill(osm, data, cfg, context);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  if (jobs == 1) {
    for (std::size_t i = 0; i < betas.size(); ++i) run_one(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < std::min(jobs, betas.size()); ++t) {
      pool.emplace_back([&] {
        for (std::size_t i; (i = next.fetch_add(1)) < betas.size();) run_one(i);
      });
    }
    for (auto& th : pool) th.join();
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  std::vector<TrainResult> out;
  for (auto& r : slots) out.push_back(std::move(*r));
  return out;
}

// ---- serialization and run registry ------------------------------------------------

inline Json to_json(const MetricsReport& r) {
  return Json{{"corr", r.corr},
              {"rmse", r.rmse},
              {"n", r.n},
              {"bland_altman",
               {{"mean_diff", r.bland_altman.mean_diff},
                {"sd_diff", r.bland_altman.sd_diff},
                {"loa_low", r.bland_altman.loa_low},
                {"loa_high", r.bland_altman.loa_high}}}};
}

inline MetricsReport metrics_from_json(const Json& j) {
  MetricsReport r;
  r.corr = j.at("corr");
  r.rmse = j.at("rmse");
  r.n = j.at("n");
  const Json& ba = j.at("bland_altman");
  r.bland_altman = {ba.at("mean_diff"), ba.at("sd_diff"), ba.at("loa_low"), ba.at("loa_high")};
  return r;
}

inline Json to_json(const RunRecord& r) {
  Json hist = Json::array();
  for (const auto& e : r.history) {
    hist.push_back({{"l_total", e.total}, {"l_mse", e.mse}, {"l_physics", e.physics},
                    {"l_adv", e.adv},     {"l_con", e.con}, {"l_sup", e.sup}});
  }
  Json j{{"config_hash", r.config_hash},
         {"model", r.model},
         {"beta", r.beta ? Json(*r.beta) : Json(nullptr)},
         {"seed", r.seed},
         {"history", hist},
         {"wall_clock_s", r.wall_clock_s},
         {"checkpoint", r.checkpoint},
         {"osm_config_hash", r.osm_config_hash}};
  if (r.eval) {
    j["metrics"] = to_json(r.eval->pooled);
    Json per = Json::object();
    for (const auto& [id, m] : r.eval->per_subject) per[id] = to_json(m);
    j["per_subject"] = per;
  } else {
    j["metrics"] = nullptr;
  }
  return j;
}

/// Inverse of to_json(RunRecord); prediction points are not part of it.
inline RunRecord record_from_json(const Json& j) {
  try {
    RunRecord r;
    r.config_hash = j.at("config_hash");
    r.model = j.at("model");
    if (!j.at("beta").is_null()) r.beta = j.at("beta").get<double>();
    r.seed = j.at("seed");
    for (const auto& e : j.at("history")) {
      r.history.push_back({e.at("l_total"), e.at("l_mse"), e.at("l_physics"), e.at("l_adv"), e.at("l_con"),
                           e.at("l_sup")});
    }
    r.wall_clock_s = j.at("wall_clock_s");
    r.checkpoint = j.at("checkpoint");
    r.osm_config_hash = j.at("osm_config_hash");
    if (!j.at("metrics").is_null()) {
      Evaluation ev;
      ev.pooled = metrics_from_json(j.at("metrics"));
      for (const auto& [id, m] : j.at("per_subject").items()) ev.per_subject[id] = metrics_from_json(m);
      r.eval = std::move(ev);
    }
    return r;
  } catch (const Json::exception& e) {
    throw LoadError(std::string("malformed run record: ") + e.what());
  }
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

inline std::string points_csv(const std::vector<PredictionPoint>& points) {
  std::string s = "subject_id,pred_mmhg,truth_mmhg\n";
  for (const auto& p : points) s += p.subject_id + "," + format_double(p.pred_mmhg) + "," + format_double(p.truth_mmhg) + "\n";
  return s;
}

inline std::string history_csv(const std::vector<EpochLoss>& history) {
  std::string s = "epoch,l_total,l_mse,l_physics,l_adv,l_con,l_sup\n";
  for (std::size_t e = 0; e < history.size(); ++e) {
    const auto& h = history[e];
    s += std::to_string(e + 1) + "," + format_double(h.total) + "," + format_double(h.mse) + "," +
         format_double(h.physics) + "," + format_double(h.adv) + "," + format_double(h.con) + "," +
         format_double(h.sup) + "\n";
  }
  return s;
}

/// Writes <root>/<config_hash>/{record.json, model.ckpt, history.csv,
/// config.json, provenance.json, points.csv}; returns the run directory.
inline std::filesystem::path write_run(const std::filesystem::path& root, TrainResult& result, const Json& effective_config,
                                       const Json& provenance) {
  namespace fs = std::filesystem;
  auto& rec = result.record;
  const fs::path dir = root / rec.config_hash;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create run directory " + dir.string() + ": " + ec.message());
  rec.checkpoint = "model.ckpt";
  save_checkpoint(result.model, dir / rec.checkpoint);
  write_text(dir / "record.json", to_json(rec).dump(2) + "\n");
  write_text(dir / "history.csv", history_csv(rec.history));
  write_text(dir / "config.json", effective_config.dump(2) + "\n");
  write_text(dir / "provenance.json", provenance.dump(2) + "\n");
  write_text(dir / "points.csv", points_csv(rec.eval ? rec.eval->points : std::vector<PredictionPoint>{}));
  return dir;
}

inline std::vector<PredictionPoint> read_points_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != "subject_id,pred_mmhg,truth_mmhg") throw LoadError(path.string() + ": unexpected header '" + line + "'");
  std::vector<PredictionPoint> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto a = line.find(','), b = line.rfind(',');
    if (a == std::string::npos || a == b) throw LoadError(path.string() + ": malformed row '" + line + "'");
    out.push_back({line.substr(0, a), detail::parse_double(line.substr(a + 1, b - a - 1), path.string()),
                   detail::parse_double(line.substr(b + 1), path.string())});
  }
  return out;
}

/// Reads a run directory back: record plus its prediction points.
inline RunRecord read_run(const std::filesystem::path& dir) {
  std::ifstream in(dir / "record.json");
  if (!in) throw IoError("no run record in " + dir.string());
  Json j;
  try {
    j = Json::parse(in);
  } catch (const Json::exception& e) {
    throw LoadError((dir / "record.json").string() + ": " + e.what());
  }
  RunRecord r = record_from_json(j);
  if (r.eval) r.eval->points = read_points_csv(dir / "points.csv");
  return r;
}

}  // namespace opsup
