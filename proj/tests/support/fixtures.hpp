#pragma once

// Small networks and synthetic batches for loss and training tests.

#include <cmath>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "opsup/losses.hpp"
#include "support/finite_diff.hpp"

namespace opsup::testing {

inline PitnConfig tiny_pitn(std::size_t window = 16) {
  PitnConfig c;
  c.window = window;
  c.channels = 2;
  c.branch_channels = 2;
  c.n_blocks = 1;
  c.head_hidden = {4, 3};
  return c;
}

inline DeepOnetConfig tiny_deeponet(std::size_t window = 16) {
  DeepOnetConfig c;
  c.window = window;
  c.branch_hidden = {6};
  c.trunk_hidden = {5};
  c.latent = 4;
  return c;
}

/// Consecutive windows of one noisy oscillation, with random targets.
inline std::vector<Sample> random_samples(std::mt19937_64& rng, std::size_t n, std::size_t window,
                                          const std::string& subject = "S01") {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double cycles = 1.5 + 2.0 * unit(rng);
  const std::vector<double> svec{0.8 + 0.8 * unit(rng), -1.0 + 2.0 * unit(rng)};
  std::vector<Sample> out;
  for (std::size_t k = 0; k < n; ++k) {
    Sample s;
    s.subject_id = subject;
    s.subject_vec = svec;
    s.seq = k;
    s.x_aux = double(k);
    s.y_query = (double(k) + 1.0) / double(n + 1);
    s.target = 80.0 + 20.0 * unit(rng);
    auto noise = random_vector(rng, window, -0.3, 0.3);
    for (std::size_t t = 0; t < window; ++t) {
      const double phase = 2.0 * std::numbers::pi * cycles * (double(t) + 3.0 * double(k)) / double(window);
      s.u_window.push_back(std::sin(phase) + noise[t]);
    }
    out.push_back(std::move(s));
  }
  return out;
}

inline std::vector<const Sample*> pointers(const std::vector<Sample>& v) {
  std::vector<const Sample*> out;
  for (const auto& s : v) out.push_back(&s);
  return out;
}

inline std::vector<ConsecutivePair> chain_pairs(const std::vector<Sample>& v) {
  std::vector<ConsecutivePair> out;
  for (std::size_t i = 0; i + 1 < v.size(); ++i) out.push_back({&v[i], &v[i + 1]});
  return out;
}

/// Randomizes every parameter (including norm gains and biases) so no
/// special structure of the initial point hides a wrong derivative.
inline void scramble(ParamSet& ps, std::mt19937_64& rng, double spread = 0.6) {
  std::vector<double> flat = ps.flat();
  auto noise = random_vector(rng, flat.size(), -spread, spread);
  for (std::size_t i = 0; i < flat.size(); ++i) flat[i] += noise[i];
  ps.load_flat(flat);
}

/// Relative error between the reverse-mode gradient of `loss` over all
/// parameters of `ps` and central differences of the same loss.
template <class L>
double full_gradient_error(ParamSet& ps, L&& loss, double h = 1e-6) {
  Tensor total = loss();
  auto grads = grad(total, ps.tensors());
  std::vector<double> analytic;
  for (const auto& g : grads) analytic.insert(analytic.end(), g.data().begin(), g.data().end());
  const std::vector<double> theta = ps.flat();
  auto fd = central_gradient(
      [&](const std::vector<double>& v) {
        ps.load_flat(v);
        return loss().item();
      },
      theta, h);
  ps.load_flat(theta);
  return relative_error(analytic, fd);
}

}  // namespace opsup::testing
