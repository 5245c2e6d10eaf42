#pragma once

// Merges run records into report.json (one row per run) and a pooled
// points.csv for external plotting.

#include <algorithm>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "opsup/training.hpp"

namespace opsup {

struct ReportRow {
  std::string config_hash;
  std::string model;
  std::optional<double> beta;
  std::optional<MetricsReport> metrics;  // absent for runs without a test split
  std::optional<double> wall_clock_s;

  bool operator==(const ReportRow& o) const {
    auto same_metrics = [](const MetricsReport& a, const MetricsReport& b) {
      return a.corr == b.corr && a.rmse == b.rmse && a.n == b.n && a.bland_altman.mean_diff == b.bland_altman.mean_diff &&
             a.bland_altman.sd_diff == b.bland_altman.sd_diff && a.bland_altman.loa_low == b.bland_altman.loa_low &&
             a.bland_altman.loa_high == b.bland_altman.loa_high;
    };
    if (metrics.has_value() != o.metrics.has_value()) return false;
    if (metrics && !same_metrics(*metrics, *o.metrics)) return false;
    return config_hash == o.config_hash && model == o.model && beta == o.beta && wall_clock_s == o.wall_clock_s;
  }
};

struct Report {
  std::vector<ReportRow> runs;
  bool operator==(const Report&) const = default;
};

/// Rows ordered by config hash. Wall-clock times are left out unless asked
/// for, so that reports of repeated runs compare byte for byte.
inline Report build_report(const std::vector<RunRecord>& records, bool with_timing = false) {
  if (records.empty()) throw ContractError("report needs at least one run record");
  Report rep;
  for (const auto& r : records) {
    ReportRow row{r.config_hash, r.model, r.beta, std::nullopt, std::nullopt};
    if (r.eval) row.metrics = r.eval->pooled;
    if (with_timing) row.wall_clock_s = r.wall_clock_s;
    rep.runs.push_back(std::move(row));
  }
  std::stable_sort(rep.runs.begin(), rep.runs.end(),
                   [](const ReportRow& a, const ReportRow& b) { return a.config_hash < b.config_hash; });
  return rep;
}

inline Json to_json(const Report& rep) {
  Json runs = Json::array();
  for (const auto& r : rep.runs) {
    Json j{{"config_hash", r.config_hash},
           {"model", r.model},
           {"beta", r.beta ? Json(*r.beta) : Json(nullptr)},
           {"wall_clock_s", r.wall_clock_s ? Json(*r.wall_clock_s) : Json(nullptr)}};
    if (r.metrics) {
      const Json m = to_json(*r.metrics);
      for (const char* k : {"corr", "rmse", "bland_altman", "n"}) j[k] = m.at(k);
    } else {
      for (const char* k : {"corr", "rmse", "bland_altman", "n"}) j[k] = nullptr;
    }
    runs.push_back(std::move(j));
  }
  return Json{{"runs", runs}};
}

inline Report report_from_json(const Json& j) {
  try {
    Report rep;
    for (const auto& r : j.at("runs")) {
      ReportRow row;
      row.config_hash = r.at("config_hash");
      row.model = r.at("model");
      if (!r.at("beta").is_null()) row.beta = r.at("beta").get<double>();
      if (!r.at("wall_clock_s").is_null()) row.wall_clock_s = r.at("wall_clock_s").get<double>();
      if (!r.at("corr").is_null()) row.metrics = metrics_from_json(r);
      rep.runs.push_back(std::move(row));
    }
    return rep;
  } catch (const Json::exception& e) {
    throw LoadError(std::string("malformed report: ") + e.what());
  }
}

/// Writes dir/report.json and dir/points.csv (points of every run, in report
/// row order). Returns the in-memory report.
inline Report emit_report(const std::vector<RunRecord>& records, const std::filesystem::path& dir,
                          bool with_timing = false) {
  Report rep = build_report(records, with_timing);
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create report directory " + dir.string() + ": " + ec.message());

  std::vector<const RunRecord*> ordered;
  for (const auto& r : records) ordered.push_back(&r);
  std::stable_sort(ordered.begin(), ordered.end(),
                   [](const RunRecord* a, const RunRecord* b) { return a->config_hash < b->config_hash; });
  std::vector<PredictionPoint> points;
  for (const auto* r : ordered) {
    if (r->eval) points.insert(points.end(), r->eval->points.begin(), r->eval->points.end());
  }
  write_text(dir / "report.json", to_json(rep).dump(2) + "\n");
  write_text(dir / "points.csv", points_csv(points));
  return rep;
}

}  // namespace opsup
