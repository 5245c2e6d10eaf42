#pragma once

// Waveform records and the preprocessing applied before any model sees them:
// per-subject normalization, splitting at invalid samples, period estimation
// and folding, and the per-pressure-bin train/test split.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "opsup/ops.hpp"
#include "opsup/rng.hpp"

namespace opsup {

struct WaveformRecord {
  std::string subject_id;
  double sample_rate_hz = 0.0;
  std::vector<double> u;  // sensor signal, normalized once normalize() ran
  std::vector<double> p;  // reference pressure, mmHg
  std::vector<bool> valid;
  double t0_s = 0.0;
  // raw u = u_mean + u_std * u
  double u_mean = 0.0;
  double u_std = 1.0;

  std::size_t size() const { return u.size(); }
  double duration_s() const { return static_cast<double>(u.size()) / sample_rate_hz; }

  void check() const {
    if (!(sample_rate_hz > 0.0)) throw PreprocessingError("record " + subject_id + ": sample rate must be positive");
    if (p.size() != u.size() || valid.size() != u.size()) {
      throw PreprocessingError("record " + subject_id + ": u, p and valid must have equal length");
    }
  }

  std::vector<double> raw_u() const {
    std::vector<double> out(u.size());
    for (std::size_t i = 0; i < u.size(); ++i) out[i] = u_mean + u_std * u[i];
    return out;
  }
};

struct Sample {
  std::vector<double> u_window;
  double x_aux = 0.0;    // window start, seconds
  double y_query = 0.0;  // window end over record length, in [0,1]
  double target = 0.0;   // mmHg
  std::string subject_id;
  std::vector<double> subject_vec;
  std::size_t seq = 0;  // position in the subject's time order
};

struct SplitSpec {
  double bin_width_mmhg = 1.0;
  std::size_t points_per_bin = 1;
  std::uint64_t seed = 0;
  bool per_subject = true;
};

/// Zero-mean, unit-variance u over the valid samples. Constants compose, so
/// the raw signal stays recoverable after repeated normalization.
inline WaveformRecord normalize(const WaveformRecord& record) {
  record.check();
  if (record.u.empty()) throw PreprocessingError("record " + record.subject_id + " is empty");
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < record.u.size(); ++i)
    if (record.valid[i]) sum += record.u[i], ++n;
  if (n == 0) throw PreprocessingError("record " + record.subject_id + " has no valid samples");
  const double mean = sum / static_cast<double>(n);
  double ss = 0.0;
  for (std::size_t i = 0; i < record.u.size(); ++i)
    if (record.valid[i]) ss += (record.u[i] - mean) * (record.u[i] - mean);
  const double sd = std::sqrt(ss / static_cast<double>(n));
  if (!(sd > 0.0) || !std::isfinite(sd)) {
    throw PreprocessingError("record " + record.subject_id + ": zero variance in u, cannot normalize");
  }
  WaveformRecord out = record;
  for (auto& v : out.u) v = (v - mean) / sd;
  out.u_mean = record.u_mean + record.u_std * mean;
  out.u_std = record.u_std * sd;
  return out;
}

/// Maximal runs of valid samples, each as its own record; runs shorter than
/// `min_run_len` samples (one model window) are dropped.
inline std::vector<WaveformRecord> drop_discontinuous(const WaveformRecord& record, std::size_t min_run_len) {
  record.check();
  std::vector<WaveformRecord> runs;
  const std::size_t n = record.size();
  std::size_t i = 0;
  while (i < n) {
    while (i < n && !record.valid[i]) ++i;
    const std::size_t start = i;
    while (i < n && record.valid[i]) ++i;
    const std::size_t len = i - start;
    if (len == 0 || len < min_run_len) continue;
    WaveformRecord run;
    run.subject_id = record.subject_id;
    run.sample_rate_hz = record.sample_rate_hz;
    run.u.assign(record.u.begin() + start, record.u.begin() + i);
    run.p.assign(record.p.begin() + start, record.p.begin() + i);
    run.valid.assign(len, true);
    run.t0_s = record.t0_s + static_cast<double>(start) / record.sample_rate_hz;
    run.u_mean = record.u_mean;
    run.u_std = record.u_std;
    runs.push_back(std::move(run));
  }
  return runs;
}

/// Index of the strongest non-DC bin. Bins within a relative 1e-9 of each
/// other count as tied and the lower one wins; a signal with no energy
/// outside DC returns 1 (the whole window is one period).
inline std::size_t dominant_frequency(const Tensor& x) {
  Tensor mag = rfft_magnitudes(x.detach());
  auto m = mag.data();
  const double scale = *std::max_element(m.begin(), m.end());
  const double tol = 1e-9 * scale;
  std::size_t best = 1;
  for (std::size_t k = 2; k < m.size(); ++k)
    if (m[k] > m[best] + tol) best = k;
  if (m[best] <= tol) return 1;
  return best;
}

inline std::size_t fold_period(std::size_t T, std::size_t f) { return (T + f - 1) / f; }

/// x[T] -> [1, p, f] with p = ceil(T/f); column c holds period c, i.e.
/// out(r, c) = x[c*p + r], zero past the end of x.
inline Tensor fold_to_2d(const Tensor& x, std::size_t f) {
  if (x.dim() != 1) throw DimensionError("fold_to_2d expects a vector, got " + shape_str(x.shape()));
  const std::size_t T = x.numel();
  if (f == 0 || f > T) {
    throw ConfigError("fold frequency " + std::to_string(f) + " invalid for window length " + std::to_string(T));
  }
  const std::size_t p = fold_period(T, f);
  std::vector<std::int64_t> m(p * f);
  for (std::size_t r = 0; r < p; ++r)
    for (std::size_t c = 0; c < f; ++c) {
      const std::size_t src = c * p + r;
      m[r * f + c] = src < T ? static_cast<std::int64_t>(src) : -1;
    }
  return gather(x, make_index_map(std::move(m)), {1, p, f});
}

/// Inverse of fold_to_2d on the first T entries.
inline Tensor unfold_from_2d(const Tensor& folded, std::size_t T) {
  if (folded.dim() != 3 || folded.size(0) != 1) {
    throw DimensionError("unfold_from_2d expects [1,p,f], got " + shape_str(folded.shape()));
  }
  const std::size_t p = folded.size(1), f = folded.size(2);
  if (T > p * f) throw DimensionError("cannot unfold " + std::to_string(T) + " entries from " + shape_str(folded.shape()));
  std::vector<std::int64_t> m(T);
  for (std::size_t t = 0; t < T; ++t) m[t] = static_cast<std::int64_t>((t % p) * f + t / p);
  return gather(folded, make_index_map(std::move(m)), {T});
}

/// Buckets targets into bins of width bin_width_mmhg (per subject unless
/// disabled) and draws points_per_bin samples from each bin into train.
/// Both outputs keep the input order.
template <class S>
std::pair<std::vector<S>, std::vector<S>> bin_split(const std::vector<S>& samples, const SplitSpec& spec) {
  if (samples.empty()) throw ContractError("bin_split of an empty sample list");
  if (!(spec.bin_width_mmhg > 0.0)) throw ConfigError("bin width must be positive");
  if (spec.points_per_bin == 0) throw ConfigError("points_per_bin must be positive");

  std::map<std::string, std::size_t> subject_rank;
  for (const auto& s : samples) subject_rank.emplace(s.subject_id, subject_rank.size());

  std::map<std::pair<std::size_t, std::int64_t>, std::vector<std::size_t>> bins;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto bin = static_cast<std::int64_t>(std::floor(samples[i].target / spec.bin_width_mmhg));
    const std::size_t who = spec.per_subject ? subject_rank.at(samples[i].subject_id) : 0;
    bins[{who, bin}].push_back(i);
  }

  Rng rng(spec.seed);
  std::vector<bool> in_train(samples.size(), false);
  for (auto& [key, members] : bins) {
    const std::size_t take = std::min(spec.points_per_bin, members.size());
    for (std::size_t j = 0; j < take; ++j) {
      std::swap(members[j], members[j + rng.below(members.size() - j)]);
      in_train[members[j]] = true;
    }
  }
  std::pair<std::vector<S>, std::vector<S>> out;
  for (std::size_t i = 0; i < samples.size(); ++i) (in_train[i] ? out.first : out.second).push_back(samples[i]);
  return out;
}

}  // namespace opsup
