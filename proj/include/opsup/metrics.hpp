#pragma once

// Agreement statistics between predicted and reference pressures.

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "opsup/errors.hpp"

namespace opsup {

struct BlandAltman {
  double mean_diff = 0.0;
  double sd_diff = 0.0;  // sample SD (n - 1)
  double loa_low = 0.0;
  double loa_high = 0.0;
};

struct MetricsReport {
  double corr = 0.0;
  double rmse = 0.0;
  BlandAltman bland_altman;
  std::size_t n = 0;
};

namespace detail {

inline void require_pairs(const std::vector<double>& a, const std::vector<double>& b, std::size_t min_n,
                          const char* what) {
  if (a.size() != b.size()) {
    throw DimensionError(std::string(what) + " of lengths " + std::to_string(a.size()) + " and " +
                         std::to_string(b.size()));
  }
  if (a.size() < min_n) {
    throw ContractError(std::string(what) + " needs at least " + std::to_string(min_n) + " pairs, got " +
                        std::to_string(a.size()));
  }
}

inline double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / double(v.size());
}

}  // namespace detail

inline double pearson_corr(const std::vector<double>& a, const std::vector<double>& b) {
  detail::require_pairs(a, b, 2, "correlation");
  const double ma = detail::mean_of(a), mb = detail::mean_of(b);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) throw NumericError("correlation is undefined for a constant input");
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

inline double rmse(const std::vector<double>& a, const std::vector<double>& b) {
  detail::require_pairs(a, b, 1, "rmse");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s / double(a.size()));
}

inline BlandAltman bland_altman(const std::vector<double>& pred, const std::vector<double>& truth) {
  detail::require_pairs(pred, truth, 2, "Bland-Altman analysis");
  std::vector<double> d(pred.size());
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = pred[i] - truth[i];
  BlandAltman ba;
  ba.mean_diff = detail::mean_of(d);
  double ss = 0.0;
  for (double x : d) ss += (x - ba.mean_diff) * (x - ba.mean_diff);
  ba.sd_diff = std::sqrt(ss / double(d.size() - 1));
  ba.loa_low = ba.mean_diff - 1.96 * ba.sd_diff;
  ba.loa_high = ba.mean_diff + 1.96 * ba.sd_diff;
  return ba;
}

inline MetricsReport compute_metrics(const std::vector<double>& pred, const std::vector<double>& truth) {
  MetricsReport r;
  r.corr = pearson_corr(pred, truth);
  r.rmse = rmse(pred, truth);
  r.bland_altman = bland_altman(pred, truth);
  r.n = pred.size();
  return r;
}

/// One evaluated test sample.
struct PredictionPoint {
  std::string subject_id;
  double pred_mmhg = 0.0;
  double truth_mmhg = 0.0;
};

/// Pooled metrics plus per-subject metrics for subjects with at least two
/// points and non-constant values on both sides.
struct Evaluation {
  MetricsReport pooled;
  std::map<std::string, MetricsReport> per_subject;
  std::vector<PredictionPoint> points;
};

inline Evaluation summarize(std::vector<PredictionPoint> points) {
  Evaluation ev;
  std::vector<double> p, t;
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> by_subject;
  for (const auto& pt : points) {
    p.push_back(pt.pred_mmhg);
    t.push_back(pt.truth_mmhg);
    by_subject[pt.subject_id].first.push_back(pt.pred_mmhg);
    by_subject[pt.subject_id].second.push_back(pt.truth_mmhg);
  }
  ev.pooled = compute_metrics(p, t);
  for (const auto& [id, pv] : by_subject) {
    try {
      ev.per_subject[id] = compute_metrics(pv.first, pv.second);
    } catch (const Error&) {
      // too few or constant points for this subject: pooled numbers only
    }
  }
  ev.points = std::move(points);
  return ev;
}

}  // namespace opsup
