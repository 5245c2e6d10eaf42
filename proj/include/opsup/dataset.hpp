#pragma once

// From raw records to model samples, and the cohort CSV format
// (`subject_id,t_s,u,p,valid`).

#include <charconv>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "opsup/signals.hpp"

namespace opsup {

struct WindowSpec {
  std::size_t length = 256;
  double beat_search_radius_s = 0.25;
};

/// Beat boundaries: samples where p is the minimum of its +/-radius
/// neighbourhood (first occurrence wins on plateaus).
inline std::vector<std::size_t> beat_onsets(const std::vector<double>& p, std::size_t radius) {
  std::vector<std::size_t> onsets;
  const std::size_t n = p.size();
  for (std::size_t i = radius; i + radius < n; ++i) {
    bool is_min = true;
    for (std::size_t j = i - radius; j <= i + radius && is_min; ++j) {
      if (j < i ? p[j] <= p[i] : p[j] < p[i]) is_min = false;
    }
    if (is_min) onsets.push_back(i);
  }
  return onsets;
}

/// Per-subject conditioning vector: mean beat rate (Hz) and the raw sensor
/// level. Uses the input channel and beat timing only, never pressure values.
inline std::vector<double> subject_vector(const WaveformRecord& record, const WindowSpec& spec = {}) {
  const auto radius = static_cast<std::size_t>(std::lround(spec.beat_search_radius_s * record.sample_rate_hz));
  auto onsets = beat_onsets(record.p, radius);
  double rate = 0.0;
  if (onsets.size() >= 2) {
    rate = static_cast<double>(onsets.size() - 1) * record.sample_rate_hz /
           static_cast<double>(onsets.back() - onsets.front());
  }
  return {rate, record.u_mean};
}

/// One sample per beat: a window of spec.length samples ending at a beat
/// boundary, targeting the mean pressure of the beat that just ended.
inline std::vector<Sample> make_windows(const WaveformRecord& record, const std::vector<double>& subject_vec,
                                        const WindowSpec& spec = {}, std::size_t seq_offset = 0) {
  record.check();
  const std::size_t T = spec.length;
  const auto radius = static_cast<std::size_t>(std::lround(spec.beat_search_radius_s * record.sample_rate_hz));
  auto onsets = beat_onsets(record.p, radius);
  std::vector<Sample> out;
  const double n = static_cast<double>(record.size());
  for (std::size_t k = 0; k + 1 < onsets.size(); ++k) {
    const std::size_t begin = onsets[k], end = onsets[k + 1];
    if (end < T) continue;
    Sample s;
    s.u_window.assign(record.u.begin() + (end - T), record.u.begin() + end);
    double acc = 0.0;
    for (std::size_t i = begin; i < end; ++i) acc += record.p[i];
    s.target = acc / static_cast<double>(end - begin);
    s.x_aux = record.t0_s + static_cast<double>(end - T) / record.sample_rate_hz;
    s.y_query = static_cast<double>(end) / n;
    s.subject_id = record.subject_id;
    s.subject_vec = subject_vec;
    s.seq = seq_offset + out.size();
    out.push_back(std::move(s));
  }
  return out;
}

/// normalize -> split at invalid samples -> windows, for every record.
inline std::vector<Sample> build_samples(const std::vector<WaveformRecord>& records, const WindowSpec& spec = {}) {
  std::vector<Sample> all;
  for (const auto& rec : records) {
    WaveformRecord norm = normalize(rec);
    auto svec = subject_vector(norm, spec);
    std::size_t seq = 0;
    for (const auto& run : drop_discontinuous(norm, spec.length)) {
      auto w = make_windows(run, svec, spec, seq);
      seq += w.size();
      all.insert(all.end(), std::make_move_iterator(w.begin()), std::make_move_iterator(w.end()));
    }
  }
  return all;
}

// ---- CSV ---------------------------------------------------------------------

inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline void write_cohort_csv(const std::filesystem::path& path, const std::vector<WaveformRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "subject_id,t_s,u,p,valid\n";
  for (const auto& rec : records) {
    rec.check();
    auto raw = rec.raw_u();
    for (std::size_t i = 0; i < rec.size(); ++i) {
      out << rec.subject_id << ',' << format_double(rec.t0_s + static_cast<double>(i) / rec.sample_rate_hz) << ','
          << format_double(raw[i]) << ',' << format_double(rec.p[i]) << ',' << (rec.valid[i] ? 1 : 0) << '\n';
    }
  }
  if (!out) throw IoError("write failed for " + path.string());
}

namespace detail {

inline double parse_double(std::string_view field, const std::string& where) {
  double v = 0.0;
  auto res = std::from_chars(field.data(), field.data() + field.size(), v);
  if (res.ec != std::errc() || res.ptr != field.data() + field.size()) {
    throw LoadError("bad number '" + std::string(field) + "' at " + where);
  }
  return v;
}

}  // namespace detail

/// One record per subject in order of first appearance. The sample rate is
/// taken from the median time step; a gap over 1.5 steps marks the sample
/// after it invalid so the record splits there.
inline std::vector<WaveformRecord> read_cohort_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw LoadError(path.string() + " is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "subject_id,t_s,u,p,valid") throw LoadError(path.string() + ": unexpected header '" + line + "'");

  std::vector<WaveformRecord> records;
  std::vector<std::vector<double>> times;
  std::map<std::string, std::size_t> index;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string_view> f;
    std::string_view rest(line);
    for (std::size_t pos; (pos = rest.find(',')) != std::string_view::npos; rest.remove_prefix(pos + 1))
      f.push_back(rest.substr(0, pos));
    f.push_back(rest);
    const std::string where = path.string() + ":" + std::to_string(lineno);
    if (f.size() != 5) throw LoadError("expected 5 fields at " + where);
    const std::string id(f[0]);
    auto [it, fresh] = index.emplace(id, records.size());
    if (fresh) {
      records.emplace_back();
      records.back().subject_id = id;
      times.emplace_back();
    }
    auto& rec = records[it->second];
    auto& ts = times[it->second];
    const double t = detail::parse_double(f[1], where);
    if (!ts.empty() && !(t > ts.back())) throw LoadError("non-monotone t_s for subject " + id + " at " + where);
    ts.push_back(t);
    rec.u.push_back(detail::parse_double(f[2], where));
    rec.p.push_back(detail::parse_double(f[3], where));
    if (f[4] != "0" && f[4] != "1") throw LoadError("valid must be 0 or 1 at " + where);
    rec.valid.push_back(f[4] == "1");
  }
  if (records.empty()) throw LoadError(path.string() + " has no samples");
  for (std::size_t r = 0; r < records.size(); ++r) {
    auto& rec = records[r];
    const auto& ts = times[r];
    if (ts.size() < 2) throw LoadError("subject " + rec.subject_id + " has fewer than two samples");
    std::vector<double> steps(ts.size() - 1);
    for (std::size_t i = 1; i < ts.size(); ++i) steps[i - 1] = ts[i] - ts[i - 1];
    std::vector<double> sorted = steps;
    std::nth_element(sorted.begin(), sorted.begin() + sorted.size() / 2, sorted.end());
    const double dt = sorted[sorted.size() / 2];
    rec.sample_rate_hz = 1.0 / dt;
    rec.t0_s = ts.front();
    for (std::size_t i = 0; i < steps.size(); ++i)
      if (steps[i] > 1.5 * dt) rec.valid[i + 1] = false;
  }
  return records;
}

}  // namespace opsup
