#pragma once

// Synthetic cohort: a two-element Windkessel driven by half-sine ejection
// pulses gives arterial pressure; a delayed, mildly nonlinear, noisy view of
// that pressure stands in for the wearable sensor.

#include <cmath>
#include <cstdio>
#include <numbers>
#include <string>
#include <vector>

#include "opsup/config.hpp"
#include "opsup/rng.hpp"
#include "opsup/signals.hpp"

namespace opsup {

struct SubjectParams {
  double R = 1.0;          // mmHg*s/mL
  double C = 1.5;          // mL/mmHg
  double hr_hz = 1.2;      // beats/s
  double stroke_ml = 75.0;
  double sensor_gain = 1.0;
  double sensor_quad = 0.0;
  double delay_s = 0.05;
  double noise_std = 0.0;
  std::uint64_t seed = 0;
  // Beat-to-beat variability, all zero by default. Heart rate and stroke
  // volume follow a breathing-rate sinusoid plus per-beat jitter; resistance
  // drifts slowly, which moves mean pressure over the record.
  double breath_hz = 0.25;
  double hr_mod = 0.0;
  double stroke_mod = 0.0;
  double beat_jitter = 0.0;
  double r_mod = 0.0;
  double r_mod_hz = 0.02;
  double phase = 0.0;

  void check() const {
    if (!(R > 0 && C > 0 && hr_hz > 0 && stroke_ml > 0)) {
      throw ConfigError("subject params need R, C, hr_hz, stroke_ml > 0 (" + describe() + ")");
    }
    if (delay_s < 0 || noise_std < 0) throw ConfigError("delay_s and noise_std must be >= 0 (" + describe() + ")");
  }

  std::string describe() const {
    char buf[200];
    std::snprintf(buf, sizeof(buf), "R=%g C=%g hr=%g stroke=%g beta=%g noise=%g seed=%llu", R, C, hr_hz, stroke_ml,
                  sensor_quad, noise_std, static_cast<unsigned long long>(seed));
    return buf;
  }
};

inline constexpr double kEjectionFraction = 0.35;
inline constexpr double kInitialPressure = 80.0;
inline constexpr double kPressureLimit = 400.0;

/// Classical RK4 on dP/dt = Q(t)/C - P/(R(t) C). Returns P at t = k*dt for
/// k = 0..steps.
template <class Flow, class Resistance>
std::vector<double> integrate_windkessel(Flow&& q, Resistance&& r, double C, double p0, double dt, std::size_t steps) {
  auto rhs = [&](double t, double P) { return q(t) / C - P / (r(t) * C); };
  std::vector<double> P(steps + 1);
  P[0] = p0;
  for (std::size_t k = 0; k < steps; ++k) {
    const double t = static_cast<double>(k) * dt;
    const double y = P[k];
    const double k1 = rhs(t, y);
    const double k2 = rhs(t + 0.5 * dt, y + 0.5 * dt * k1);
    const double k3 = rhs(t + 0.5 * dt, y + 0.5 * dt * k2);
    const double k4 = rhs(t + dt, y + dt * k3);
    P[k + 1] = y + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4);
  }
  return P;
}

/// Beat schedule with half-sine ejection over the first 35% of each cycle.
class EjectionFlow {
 public:
  EjectionFlow(const SubjectParams& sp, double duration_s) {
    Rng rng(derive_seed(sp.seed, 101));
    double t = 0.0;
    while (t <= duration_s + 1.0) {
      const double breath = std::sin(2.0 * std::numbers::pi * sp.breath_hz * t + sp.phase);
      const double hr = sp.hr_hz * (1.0 + sp.hr_mod * breath + sp.beat_jitter * rng.normal());
      const double sv = sp.stroke_ml * (1.0 + sp.stroke_mod * breath + sp.beat_jitter * rng.normal());
      const double period = 1.0 / std::max(hr, 0.2);
      starts_.push_back(t);
      const double eject = kEjectionFraction * period;
      ejects_.push_back(eject);
      amps_.push_back(std::max(sv, 1.0) * std::numbers::pi / (2.0 * eject));
      t += period;
    }
  }

  double operator()(double t) const {
    if (t < 0.0) return 0.0;
    // beats are visited in time order by the integrator; keep a cursor
    while (cursor_ + 1 < starts_.size() && starts_[cursor_ + 1] <= t) ++cursor_;
    while (cursor_ > 0 && starts_[cursor_] > t) --cursor_;
    const double s = t - starts_[cursor_];
    if (s >= ejects_[cursor_]) return 0.0;
    return amps_[cursor_] * std::sin(std::numbers::pi * s / ejects_[cursor_]);
  }

 private:
  std::vector<double> starts_, ejects_, amps_;
  mutable std::size_t cursor_ = 0;
};

/// Pressure record sampled every dt_s; u is left at zero for sensor_transform.
inline WaveformRecord simulate_pressure(const SubjectParams& sp, double duration_s, double dt_s) {
  sp.check();
  if (!(dt_s > 0.0) || dt_s > 0.005) throw ConfigError("dt_s must be in (0, 0.005], got " + std::to_string(dt_s));
  if (duration_s < 10.0 / sp.hr_hz) {
    throw ConfigError("duration_s must cover at least 10 beats (" + std::to_string(10.0 / sp.hr_hz) + " s)");
  }
  EjectionFlow q(sp, duration_s);
  auto r = [&](double t) {
    return sp.R * (1.0 + sp.r_mod * std::sin(2.0 * std::numbers::pi * sp.r_mod_hz * t + 2.0 * sp.phase));
  };
  const auto steps = static_cast<std::size_t>(std::llround(duration_s / dt_s));
  auto P = integrate_windkessel(q, r, sp.C, kInitialPressure, dt_s, steps - 1);
  for (std::size_t i = 0; i < P.size(); ++i) {
    if (!std::isfinite(P[i]) || std::abs(P[i]) > kPressureLimit) {
      throw SimulationError("pressure left [-400,400] mmHg at t=" + std::to_string(static_cast<double>(i) * dt_s) +
                            " s (" + sp.describe() + ")");
    }
  }
  WaveformRecord rec;
  rec.sample_rate_hz = 1.0 / dt_s;
  rec.p = std::move(P);
  rec.u.assign(rec.p.size(), 0.0);
  rec.valid.assign(rec.p.size(), true);
  return rec;
}

/// u(t) = a*z + b*z^2 + noise with z = P(t - delay)/100 mmHg, then
/// normalized per subject. Times before the record start hold P(0).
inline WaveformRecord sensor_transform(const WaveformRecord& record, const SubjectParams& sp) {
  record.check();
  const auto lag = static_cast<std::size_t>(std::llround(sp.delay_s * record.sample_rate_hz));
  Rng rng(derive_seed(sp.seed, 202));
  WaveformRecord out = record;
  for (std::size_t i = 0; i < record.size(); ++i) {
    const double z = record.p[i >= lag ? i - lag : 0] / 100.0;
    out.u[i] = sp.sensor_gain * z + sp.sensor_quad * z * z + (sp.noise_std > 0 ? sp.noise_std * rng.normal() : 0.0);
  }
  out.u_mean = 0.0;
  out.u_std = 1.0;
  return normalize(out);
}

struct CohortSpec {
  double duration_s = 120.0;
  double warmup_s = 20.0;
  double sim_dt_s = 0.001;
  std::size_t decimation = 8;  // 1 kHz -> 125 Hz
  double R_lo = 0.8, R_hi = 1.4;
  double C_lo = 1.0, C_hi = 2.2;
  double hr_lo = 0.9, hr_hi = 1.7;
  double stroke_lo = 60.0, stroke_hi = 90.0;
  double quad_lo = 0.0, quad_hi = 0.15;
  double noise_lo = 0.01, noise_hi = 0.05;
  double delay_s = 0.05;
  double hr_mod = 0.03;
  double stroke_mod = 0.05;
  double beat_jitter = 0.02;
  double r_mod = 0.12;
};

inline Json to_json(const CohortSpec& c) {
  return Json{{"duration_s", c.duration_s}, {"warmup_s", c.warmup_s},     {"sim_dt_s", c.sim_dt_s},
              {"decimation", c.decimation}, {"R", {c.R_lo, c.R_hi}},       {"C", {c.C_lo, c.C_hi}},
              {"hr_hz", {c.hr_lo, c.hr_hi}}, {"stroke_ml", {c.stroke_lo, c.stroke_hi}},
              {"sensor_quad", {c.quad_lo, c.quad_hi}}, {"noise_std", {c.noise_lo, c.noise_hi}},
              {"delay_s", c.delay_s},       {"hr_mod", c.hr_mod},           {"stroke_mod", c.stroke_mod},
              {"beat_jitter", c.beat_jitter}, {"r_mod", c.r_mod}};
}

/// Ranges are [lo, hi] pairs; absent keys keep their defaults.
inline CohortSpec cohort_spec_from_json(const Json& j) {
  const std::string w = "cohort";
  require_known_keys(j, {"duration_s", "warmup_s", "sim_dt_s", "decimation", "R", "C", "hr_hz", "stroke_ml",
                         "sensor_quad", "noise_std", "delay_s", "hr_mod", "stroke_mod", "beat_jitter", "r_mod"}, w);
  CohortSpec c;
  read_key(j, "duration_s", c.duration_s, w);
  read_key(j, "warmup_s", c.warmup_s, w);
  read_key(j, "sim_dt_s", c.sim_dt_s, w);
  read_key(j, "decimation", c.decimation, w);
  read_key(j, "delay_s", c.delay_s, w);
  read_key(j, "hr_mod", c.hr_mod, w);
  read_key(j, "stroke_mod", c.stroke_mod, w);
  read_key(j, "beat_jitter", c.beat_jitter, w);
  read_key(j, "r_mod", c.r_mod, w);
  auto range = [&](const char* key, double& lo, double& hi) {
    if (!j.contains(key)) return;
    std::vector<double> v;
    read_key(j, key, v, w);
    if (v.size() != 2 || !(v[0] <= v[1])) throw ConfigError(std::string("cohort.") + key + " must be [lo, hi] with lo <= hi");
    lo = v[0];
    hi = v[1];
  };
  range("R", c.R_lo, c.R_hi);
  range("C", c.C_lo, c.C_hi);
  range("hr_hz", c.hr_lo, c.hr_hi);
  range("stroke_ml", c.stroke_lo, c.stroke_hi);
  range("sensor_quad", c.quad_lo, c.quad_hi);
  range("noise_std", c.noise_lo, c.noise_hi);
  if (!(c.duration_s > 0.0) || !(c.sim_dt_s > 0.0) || c.warmup_s < 0.0 || c.decimation < 1)
    throw ConfigError("cohort needs duration_s > 0, sim_dt_s > 0, warmup_s >= 0, decimation >= 1");
  return c;
}

inline Json to_json(const SubjectParams& sp) {
  return Json{{"R", sp.R},           {"C", sp.C},
              {"hr_hz", sp.hr_hz},   {"stroke_ml", sp.stroke_ml},
              {"sensor_gain", sp.sensor_gain}, {"sensor_quad", sp.sensor_quad},
              {"delay_s", sp.delay_s}, {"noise_std", sp.noise_std},
              {"breath_hz", sp.breath_hz}, {"hr_mod", sp.hr_mod},
              {"stroke_mod", sp.stroke_mod}, {"beat_jitter", sp.beat_jitter},
              {"r_mod", sp.r_mod},   {"r_mod_hz", sp.r_mod_hz},
              {"phase", sp.phase},   {"seed", sp.seed}};
}

struct Cohort {
  std::vector<WaveformRecord> records;
  std::vector<SubjectParams> params;
};

inline std::string subject_name(std::size_t k) {
  std::string n = std::to_string(k + 1);
  return "S" + std::string(n.size() < 2 ? 2 - n.size() : 0, '0') + n;
}

/// Parameters for subject k; depends only on (master_seed, k).
inline SubjectParams draw_subject(const CohortSpec& cs, std::uint64_t master_seed, std::size_t k) {
  Rng rng(derive_seed(master_seed, k));
  SubjectParams sp;
  sp.R = rng.uniform(cs.R_lo, cs.R_hi);
  sp.C = rng.uniform(cs.C_lo, cs.C_hi);
  sp.hr_hz = rng.uniform(cs.hr_lo, cs.hr_hi);
  sp.stroke_ml = rng.uniform(cs.stroke_lo, cs.stroke_hi);
  sp.sensor_quad = rng.uniform(cs.quad_lo, cs.quad_hi);
  sp.noise_std = rng.uniform(cs.noise_lo, cs.noise_hi);
  sp.delay_s = cs.delay_s;
  sp.hr_mod = cs.hr_mod;
  sp.stroke_mod = cs.stroke_mod;
  sp.beat_jitter = cs.beat_jitter;
  sp.r_mod = cs.r_mod;
  sp.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  sp.seed = rng.next_u64();
  return sp;
}

inline WaveformRecord simulate_subject(const SubjectParams& sp, const CohortSpec& cs, const std::string& id) {
  WaveformRecord fine = sensor_transform(simulate_pressure(sp, cs.warmup_s + cs.duration_s, cs.sim_dt_s), sp);
  // sensor_transform normalized the fine grid; decimate the raw signal and
  // renormalize so the stored constants describe the kept samples
  auto raw = fine.raw_u();
  const auto skip = static_cast<std::size_t>(std::llround(cs.warmup_s / cs.sim_dt_s));
  WaveformRecord rec;
  rec.subject_id = id;
  rec.sample_rate_hz = 1.0 / (cs.sim_dt_s * static_cast<double>(cs.decimation));
  for (std::size_t i = skip; i < fine.size(); i += cs.decimation) {
    rec.u.push_back(raw[i]);
    rec.p.push_back(fine.p[i]);
  }
  rec.valid.assign(rec.u.size(), true);
  return normalize(rec);
}

inline Cohort make_cohort(std::size_t n_subjects, std::uint64_t master_seed, const CohortSpec& cs = {}) {
  if (n_subjects == 0) throw ConfigError("cohort needs at least one subject");
  Cohort c;
  for (std::size_t k = 0; k < n_subjects; ++k) {
    c.params.push_back(draw_subject(cs, master_seed, k));
    c.records.push_back(simulate_subject(c.params.back(), cs, subject_name(k)));
  }
  return c;
}

}  // namespace opsup
