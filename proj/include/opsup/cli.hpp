#pragma once

// The opsup command line: gen-data, train, distill, ablate, eval, report.
// run() returns the process exit code (0 ok, 2 usage/config, 3 I/O,
// 4 numeric failure) and writes one JSON line per command to `out`.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "opsup/opsup.hpp"

namespace opsup::cli {

namespace fs = std::filesystem;

/// Everything a run is configured by, before and after flag overrides.
struct Settings {
  TrainConfig train;
  SplitSpec split;
  WindowSpec window;
  CohortSpec cohort;
  bool has_cohort = false;

  Json to_json() const {
    Json j{{"train", opsup::to_json(train)},     {"loss", opsup::to_json(train.weights)},
           {"split", opsup::to_json(split)},     {"window", opsup::to_json(window)},
           {"pitn", opsup::to_json(train.pitn)}, {"deeponet", opsup::to_json(train.deeponet)}};
    if (has_cohort) j["cohort"] = opsup::to_json(cohort);
    return j;
  }
};

inline Json read_json_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  try {
    return Json::parse(in);
  } catch (const Json::exception& e) {
    throw ConfigError(path.string() + " is not valid JSON: " + e.what());
  }
}

/// Merges a config document over the defaults. Model windows follow the
/// window section unless set explicitly, and must agree with it.
inline Settings settings_from_json(const Json& j) {
  if (!j.is_object()) throw ConfigError("config file must hold a JSON object");
  require_known_keys(j, {"train", "loss", "split", "window", "pitn", "deeponet", "cohort"}, "config");
  Settings s;
  if (j.contains("train")) apply_train_json(j.at("train"), s.train);
  if (j.contains("loss")) s.train.weights = loss_weights_from_json(j.at("loss"));
  if (j.contains("split")) s.split = split_spec_from_json(j.at("split"));
  if (j.contains("window")) s.window = window_spec_from_json(j.at("window"));
  if (j.contains("pitn")) s.train.pitn = pitn_config_from_json(j.at("pitn"));
  if (j.contains("deeponet")) s.train.deeponet = deeponet_config_from_json(j.at("deeponet"));
  if (j.contains("cohort")) {
    s.cohort = cohort_spec_from_json(j.at("cohort"));
    s.has_cohort = true;
  }
  if (!(j.contains("pitn") && j.at("pitn").contains("window"))) s.train.pitn.window = s.window.length;
  if (!(j.contains("deeponet") && j.at("deeponet").contains("window"))) s.train.deeponet.window = s.window.length;
  return s;
}

inline void check_windows(const Settings& s) {
  if (s.train.pitn.window != s.window.length || s.train.deeponet.window != s.window.length) {
    throw ConfigError("model windows (pitn " + std::to_string(s.train.pitn.window) + ", deeponet " +
                      std::to_string(s.train.deeponet.window) + ") must equal window.length " +
                      std::to_string(s.window.length));
  }
}

/// Flags shared by train, distill and ablate. Each one, when given,
/// overrides the config file.
struct Overrides {
  std::string config_path;
  std::string data;
  std::string out = "runs";
  std::optional<std::uint64_t> seed, split_seed;
  std::optional<std::size_t> epochs, batch_size, window, pgd_steps;
  std::optional<double> lr, lr_adv, gamma, lambda_physics, beta, eta, epsilon, tau, y_shift;
  std::optional<std::string> optimizer, jvp_mode, physics_pairs;

  void add_to(CLI::App* app) {
    const LossWeights d;
    const TrainConfig t;
    auto num = [](double v) { return format_double(v); };
    app->add_option("--config", config_path, "JSON config with sections train, loss, split, window, pitn, deeponet")
        ->check(CLI::ExistingFile);
    app->add_option("--data", data, "directory holding cohort.csv (from gen-data), or the CSV itself")->required();
    app->add_option("--out", out, "run registry root; each run goes to <out>/<config-hash>")->capture_default_str();
    app->add_option("--seed", seed, "training seed: initialization and batch order (default 0)");
    app->add_option("--split-seed", split_seed, "seed of the per-bin train/test draw (default 0)");
    app->add_option("--epochs", epochs, "epochs (default " + std::to_string(t.epochs) + ")");
    app->add_option("--batch-size", batch_size, "batch size (default " + std::to_string(t.batch_size) + ")");
    app->add_option("--window", window, "window length in samples; sets the model windows too (default 256)");
    app->add_option("--lr", lr, "learning rate (default " + num(t.lr) + ")");
    app->add_option("--lr-adv", lr_adv, "learning rate of the adversarial-path norms (default " + num(t.lr_adv) + ")");
    app->add_option("--optimizer", optimizer, "adam or sgd (default adam)");
    app->add_option("--jvp-mode", jvp_mode, "exact or finite_difference Jacobian-vector products (default exact)");
    app->add_option("--physics-pairs", physics_pairs,
                    "sequence: adjacent beats of the whole recording, inputs only; labeled: training samples only "
                    "(default sequence)");
    app->add_option("--gamma", gamma, "physics weight of PITN models (default " + num(d.gamma) + ")");
    app->add_option("--lambda-physics", lambda_physics,
                    "physics weight of PI-DeepONet (default " + num(d.lambda_physics) + ")");
    app->add_option("--beta", beta, "operator supervision weight (default " + num(d.beta) + ")");
    app->add_option("--eta", eta, "PGD step size (default " + num(d.eta) + ")");
    app->add_option("--epsilon", epsilon, "PGD perturbation bound, L-infinity (default " + num(d.epsilon) + ")");
    app->add_option("--pgd-steps", pgd_steps, "PGD iterations (default " + std::to_string(d.pgd_steps) + ")");
    app->add_option("--tau", tau, "contrastive temperature (default " + num(d.tau) + ")");
    app->add_option("--y-shift", y_shift, "contrastive positive-pair threshold in mmHg (default " + num(d.y_shift) + ")");
  }

  Settings resolve() const {
    Settings s = config_path.empty() ? Settings{} : settings_from_json(read_json_file(config_path));
    auto& c = s.train;
    auto& w = c.weights;
    if (seed) c.seed = *seed;
    if (split_seed) s.split.seed = *split_seed;
    if (epochs) c.epochs = *epochs;
    if (batch_size) c.batch_size = *batch_size;
    if (window) s.window.length = c.pitn.window = c.deeponet.window = *window;
    if (lr) c.lr = *lr;
    if (lr_adv) c.lr_adv = *lr_adv;
    if (optimizer) c.optimizer = optimizer_kind_from_string(*optimizer);
    if (jvp_mode) c.jvp_mode = jvp_mode_from_string(*jvp_mode);
    if (physics_pairs) c.physics_pairs = physics_pairs_from_string(*physics_pairs);
    if (gamma) w.gamma = *gamma;
    if (lambda_physics) w.lambda_physics = *lambda_physics;
    if (beta) w.beta = *beta;
    if (eta) w.eta = *eta;
    if (epsilon) w.epsilon = *epsilon;
    if (pgd_steps) w.pgd_steps = *pgd_steps;
    if (tau) w.tau = *tau;
    if (y_shift) w.y_shift = *y_shift;
    check_windows(s);
    c.check();
    return s;
  }
};

inline fs::path cohort_csv(const fs::path& data) { return fs::is_directory(data) ? data / "cohort.csv" : data; }

struct LoadedData {
  Dataset data;
  std::string sha256;
};

inline LoadedData load_data(const std::string& data, const Settings& s) {
  const fs::path csv = cohort_csv(data);
  LoadedData out;
  out.sha256 = sha256_hex(read_file_bytes(csv));
  out.data = materialize(read_cohort_csv(csv), s.split, s.window);
  return out;
}

/// The part of a run's identity that is not in the config: which data, and
/// how it was split and windowed.
inline Json data_context(const LoadedData& d, const Settings& s) {
  return Json{{"data_sha256", d.sha256}, {"split", to_json(s.split)}, {"window", to_json(s.window)}};
}

inline Json provenance(const std::string& command, const RunRecord& rec, const Settings& s, const LoadedData& d,
                       const Json& extra = {}) {
  Json p{{"tool", "opsup"},
         {"version", kVersion},
         {"command", command},
         {"config_hash", rec.config_hash},
         {"seeds", {{"train", s.train.seed}, {"split", s.split.seed}}},
         {"data_sha256", d.sha256}};
  if (!extra.is_null()) p.update(extra);
  return p;
}

inline Json metrics_line(const RunRecord& r, const fs::path& dir) {
  Json j{{"model", r.model}, {"config_hash", r.config_hash}, {"run_dir", dir.string()}};
  j["corr"] = r.eval ? Json(r.eval->pooled.corr) : Json(nullptr);
  j["rmse"] = r.eval ? Json(r.eval->pooled.rmse) : Json(nullptr);
  if (r.beta) j["beta"] = *r.beta;
  return j;
}

inline std::vector<double> parse_betas(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    double v = detail::parse_double(item, "--betas");
    if (!(v >= 0.0)) throw ConfigError("betas must be non-negative, got " + item);
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError("--betas needs at least one value");
  return out;
}

inline std::string default_betas_text() {
  std::string s;
  for (double b : default_betas()) s += (s.empty() ? "" : ",") + format_double(b);
  return s;
}

/// Run directories named on the command line: a directory holding
/// record.json is one run; otherwise each subdirectory that holds one is.
inline std::vector<fs::path> collect_runs(const std::vector<std::string>& roots) {
  std::vector<fs::path> out;
  for (const auto& r : roots) {
    const fs::path root(r);
    if (!fs::exists(root)) throw IoError("no such run directory " + root.string());
    if (fs::exists(root / "record.json")) {
      out.push_back(root);
      continue;
    }
    std::vector<fs::path> subs;
    for (const auto& e : fs::directory_iterator(root))
      if (e.is_directory() && fs::exists(e.path() / "record.json")) subs.push_back(e.path());
    std::sort(subs.begin(), subs.end());
    out.insert(out.end(), subs.begin(), subs.end());
  }
  return out;
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Operator-supervised physics-informed blood-pressure models on a synthetic cohort", "opsup"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "simulate a cohort: <out>/cohort.csv and <out>/provenance.json");
  std::size_t n_subjects = 9;
  std::uint64_t cohort_seed = 7;
  std::string gen_out, gen_config;
  std::optional<double> duration;
  gen->add_option("--subjects", n_subjects, "number of subjects (>= 1)")->capture_default_str();
  gen->add_option("--seed", cohort_seed, "master seed; subject k depends only on (seed, k)")->capture_default_str();
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--config", gen_config, "JSON config; only its cohort section is used")->check(CLI::ExistingFile);
  gen->add_option("--duration", duration, "recorded seconds per subject (default 120)");

  // train
  auto* tr = app.add_subcommand("train", "train one model configuration and register the run");
  Overrides tr_o;
  std::string model_name;
  tr->add_option("--model", model_name, "pitn-base | pitn-base-nophys | pitn-full | deeponet | pi-deeponet")->required();
  tr_o.add_to(tr);

  // distill and ablate
  auto* dist = app.add_subcommand("distill", "train PITN-Base under a frozen operator supervisor");
  auto* abl = app.add_subcommand("ablate", "one distillation run per beta; writes <out>/ablation.csv");
  Overrides dist_o, abl_o;
  std::string dist_variant = "B", abl_variant = "B", dist_osm, abl_osm, betas_text = default_betas_text(), abl_csv;
  std::optional<std::string> dist_osm_hash, abl_osm_hash;
  std::size_t jobs = 1;
  for (auto [sub, o, variant, osm, osm_hash] :
       {std::tuple{dist, &dist_o, &dist_variant, &dist_osm, &dist_osm_hash},
        std::tuple{abl, &abl_o, &abl_variant, &abl_osm, &abl_osm_hash}}) {
    sub->add_option("--variant", *variant, "A: operator on base features vs truth; B: base vs operator output")
        ->capture_default_str();
    sub->add_option("--osm", *osm, "checkpoint of the pre-trained operator (model.ckpt of a deeponet run)")
        ->required()
        ->check(CLI::ExistingFile);
    sub->add_option("--osm-hash", *osm_hash, "expected config hash of the operator checkpoint");
    o->add_to(sub);
  }
  abl->add_option("--betas", betas_text, "comma-separated supervision weights")->capture_default_str();
  abl->add_option("--csv", abl_csv, "ablation table path (default <out>/ablation.csv)");
  abl->add_option("--jobs", jobs, "runs executed concurrently; results do not depend on it")->capture_default_str();

  // eval
  auto* ev = app.add_subcommand("eval", "recompute test metrics of a registered run from its checkpoint");
  std::string eval_run, eval_data;
  ev->add_option("--run", eval_run, "run directory")->required()->check(CLI::ExistingDirectory);
  ev->add_option("--data", eval_data, "directory holding cohort.csv, or the CSV itself")->required();

  // report
  auto* rep = app.add_subcommand("report", "merge runs into <out>/report.json and <out>/points.csv");
  std::vector<std::string> report_runs;
  std::string report_out = "report";
  bool with_timing = false;
  rep->add_option("--runs", report_runs, "run directories or registry roots");
  rep->add_option("--out", report_out, "output directory")->capture_default_str();
  rep->add_flag("--with-timing", with_timing, "include wall-clock seconds (makes reports machine-dependent)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return 2;
  }

  try {
    if (gen->parsed()) {
      if (n_subjects < 1) throw ConfigError("--subjects must be at least 1");
      CohortSpec cs = gen_config.empty() ? CohortSpec{} : settings_from_json(read_json_file(gen_config)).cohort;
      if (duration) {
        if (!(*duration > 0.0)) throw ConfigError("--duration must be positive");
        cs.duration_s = *duration;
      }
      const Cohort cohort = make_cohort(n_subjects, cohort_seed, cs);
      std::error_code ec;
      fs::create_directories(gen_out, ec);
      if (ec) throw IoError("cannot create " + gen_out + ": " + ec.message());
      const fs::path csv = fs::path(gen_out) / "cohort.csv";
      write_cohort_csv(csv, cohort.records);
      std::size_t rows = 0;
      Json subjects = Json::array();
      for (std::size_t k = 0; k < cohort.records.size(); ++k) {
        rows += cohort.records[k].size();
        subjects.push_back({{"subject_id", cohort.records[k].subject_id}, {"params", to_json(cohort.params[k])}});
      }
      const std::string sha = sha256_hex(read_file_bytes(csv));
      const Json prov{{"tool", "opsup"}, {"version", kVersion},  {"command", "gen-data"},
                      {"seed", cohort_seed}, {"subjects", n_subjects}, {"cohort", to_json(cs)},
                      {"draws", subjects}, {"rows", rows},         {"csv_sha256", sha}};
      write_text(fs::path(gen_out) / "provenance.json", prov.dump(2) + "\n");
      out << Json{{"csv", csv.string()}, {"rows", rows}, {"sha256", sha}}.dump() << "\n";
      return 0;
    }

    if (tr->parsed()) {
      const TrainModel which = train_model_from_string(model_name);
      Settings s = tr_o.resolve();
      // these overrides are part of the configuration, so echo them too
      if (which == TrainModel::pitn_base_nophys) s.train.weights.gamma = 0.0;
      if (which == TrainModel::deeponet) s.train.weights.lambda_physics = 0.0;
      const LoadedData d = load_data(tr_o.data, s);
      TrainResult r = train(which, d.data, s.train, data_context(d, s));
      const fs::path dir = write_run(tr_o.out, r, s.to_json(), provenance("train", r.record, s, d));
      out << metrics_line(r.record, dir).dump() << "\n";
      return 0;
    }

    if (dist->parsed() || abl->parsed()) {
      const bool is_ablate = abl->parsed();
      const Overrides& o = is_ablate ? abl_o : dist_o;
      Settings s = o.resolve();
      s.train.variant = sup_variant_from_string(is_ablate ? abl_variant : dist_variant);
      const std::string osm_path = is_ablate ? abl_osm : dist_osm;
      const ModelHandle osm = load_checkpoint(osm_path, is_ablate ? abl_osm_hash : dist_osm_hash);
      const LoadedData d = load_data(o.data, s);
      const Json ctx = data_context(d, s);
      const Json osm_info{{"osm", {{"path", osm_path}, {"config_hash", config_hash(osm.config())}}}};
      if (!is_ablate) {
        TrainResult r = distill(osm, d.data, s.train, ctx);
        const fs::path dir = write_run(o.out, r, s.to_json(), provenance("distill", r.record, s, d, osm_info));
        out << metrics_line(r.record, dir).dump() << "\n";
        return 0;
      }
      auto results = ablate_beta(osm, d.data, s.train, parse_betas(betas_text), ctx, jobs);
      std::string table = "model,beta,corr,rmse\n";
      Json rows = Json::array();
      for (auto& r : results) {
        Settings rs = s;
        rs.train.weights.beta = *r.record.beta;
        const fs::path dir = write_run(o.out, r, rs.to_json(), provenance("ablate", r.record, rs, d, osm_info));
        const auto& m = r.record.eval;
        table += r.record.model + "," + format_double(*r.record.beta) + "," +
                 (m ? format_double(m->pooled.corr) : "") + "," + (m ? format_double(m->pooled.rmse) : "") + "\n";
        rows.push_back(metrics_line(r.record, dir));
      }
      const fs::path csv = abl_csv.empty() ? fs::path(o.out) / "ablation.csv" : fs::path(abl_csv);
      write_text(csv, table);
      out << Json{{"csv", csv.string()}, {"runs", rows}}.dump() << "\n";
      return 0;
    }

    if (ev->parsed()) {
      const fs::path dir(eval_run);
      const RunRecord rec = read_run(dir);
      const Settings s = settings_from_json(read_json_file(dir / "config.json"));
      const Json prov = read_json_file(dir / "provenance.json");
      const LoadedData d = load_data(eval_data, s);
      if (prov.value("data_sha256", std::string()) != d.sha256) {
        throw ConfigError("run " + dir.string() + " was trained on different data (sha256 " +
                          prov.value("data_sha256", std::string("?")) + ", given " + d.sha256 + ")");
      }
      const ModelHandle m = load_checkpoint(dir / rec.checkpoint);
      const auto evaluation = evaluate(m, d.data.test);
      Json line{{"model", rec.model}, {"config_hash", rec.config_hash}};
      line["corr"] = evaluation ? Json(evaluation->pooled.corr) : Json(nullptr);
      line["rmse"] = evaluation ? Json(evaluation->pooled.rmse) : Json(nullptr);
      bool same = evaluation.has_value() == rec.eval.has_value();
      if (same && evaluation) {
        same = evaluation->pooled.corr == rec.eval->pooled.corr && evaluation->pooled.rmse == rec.eval->pooled.rmse &&
               evaluation->pooled.n == rec.eval->pooled.n;
      }
      line["matches_record"] = same;
      out << line.dump() << "\n";
      return 0;
    }

    if (rep->parsed()) {
      const auto dirs = collect_runs(report_runs);
      if (dirs.empty()) throw ContractError("report needs at least one run directory");
      std::vector<RunRecord> records;
      for (const auto& d : dirs) records.push_back(read_run(d));
      const Report r = emit_report(records, report_out, with_timing);
      out << Json{{"runs", r.runs.size()}, {"report", (fs::path(report_out) / "report.json").string()}}.dump() << "\n";
      return 0;
    }
  } catch (const Error& e) {
    err << "opsup: " << e.what() << "\n";
    return e.exit_code();
  } catch (const fs::filesystem_error& e) {
    err << "opsup: I/O error: " << e.what() << "\n";
    return 3;
  } catch (const Json::exception& e) {
    err << "opsup: configuration error: " << e.what() << "\n";
    return 2;
  }
  return 2;
}

}  // namespace opsup::cli
