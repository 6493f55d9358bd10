// SPDX-License-Identifier: Apache-2.0
// Reference evaluations and property drivers shared by the unit tests and the
// acceptance runner.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "tprune/its.hpp"
#include "tprune/sgp.hpp"
#include "tprune/synthetic.hpp"

namespace oracle {

// Straight-line surrogate gradient on q from activations, gradients, mask
// weights and retention probabilities, one loop per stage.
inline std::vector<double> surrogate_grad_q(const tprune::Tensor& t, const tprune::Tensor& g,
                                            const std::vector<double>& mask, const std::vector<double>& q,
                                            const tprune::SgpConfig& c) {
  const std::size_t n = t.rows(), d = t.cols();
  std::vector<double> eta(n, 0.0), m(n, 0.0);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t k = 0; k < d; ++k) {
      eta[j] += t[j * d + k] * g[j * d + k];
      m[j] += std::abs(t[j * d + k] * g[j * d + k]);
    }
  if (c.score == tprune::ProxyScore::loss_increase)
    for (auto& e : eta) e = -e;
  double wsum = 0.0, mu = 0.0, mu_m = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    wsum += mask[j];
    mu += mask[j] * eta[j];
    mu_m += mask[j] * m[j];
  }
  mu = wsum > 0 ? mu / wsum : 0.0;
  mu_m = wsum > 0 ? mu_m / wsum : 0.0;
  double var = 0.0;
  for (std::size_t j = 0; j < n; ++j) var += mask[j] * (eta[j] - mu) * (eta[j] - mu);
  const double sd = wsum > 0 ? std::sqrt(var / wsum) : 0.0;
  std::vector<double> out(n);
  for (std::size_t j = 0; j < n; ++j) {
    const double z = std::clamp((eta[j] - mu) / std::max(sd, c.eps_std), -c.clip, c.clip);
    const double dj = 0.5 - 1.0 / (1.0 + std::exp(-z));
    const double s = std::clamp(m[j] / (mu_m + c.eps_row), c.s_min, c.s_max);
    out[j] = c.beta * dj * s * std::max(q[j] * (1.0 - q[j]), c.eps_sat);
  }
  return out;
}

inline double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i] / n;
    mb += b[i] / n;
  }
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

struct TaylorSample {
  std::vector<double> neg_eta;
  std::vector<double> delta;  // exact leave-one-out loss change
  std::vector<double> norm2;  // squared row norms
};

// One-layer decoder without normalization; visual rows scaled by `scale` so
// the loss is near-linear in each row.
inline TaylorSample taylor_sample(std::uint64_t seed, double scale) {
  using namespace tprune;
  DecoderConfig cfg;
  cfg.n_layers = 1;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.vocab = 4;
  cfg.mlp_ratio = 2;
  cfg.selection_layer = 0;
  cfg.use_norm = false;
  const VolumeSpec spec{28, 28, 28, 7, 2};
  const auto w = init_decoder(cfg, spec, 6, 4, seed);
  const auto c = generate_case(seed, spec, TaskKind::existence);
  auto seq = embed_sequence(w, spec, c.volume, c.instruction, nullptr);
  for (std::size_t j = 0; j < seq.n_visual; ++j)
    for (auto& v : seq.hidden.row(j)) v *= scale;
  const auto sg = selection_gradient(w, cfg, seq, c.answer);
  TaylorSample out;
  for (std::size_t j = 0; j < seq.n_visual; ++j) {
    double eta = 0.0, nn = 0.0;
    for (std::size_t k = 0; k < sg.t_vis.cols(); ++k) {
      eta += sg.t_vis.at(j, k) * sg.grad.at(j, k);
      nn += sg.t_vis.at(j, k) * sg.t_vis.at(j, k);
    }
    out.neg_eta.push_back(-eta);
    out.delta.push_back(leave_one_out_oracle(w, cfg, seq, c.answer, j));
    out.norm2.push_back(nn);
  }
  return out;
}

struct SignDynamics {
  std::size_t total = 0;
  std::size_t passed = 0;
};

// Random (rho, theta, q, d): one descent step on theta and rho with the
// surrogate gradient must move q_j against the sign of d_j.
inline SignDynamics sign_dynamics(std::size_t n, std::uint64_t seed) {
  using namespace tprune;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0), dd(-0.5, 0.5);
  const SgpConfig cfg;
  const double tau = 0.2, lr = 0.1;
  SignDynamics out;
  for (std::size_t i = 0; i < n; ++i) {
    const double rho = unit(rng), theta = unit(rng);
    double d = dd(rng);
    if (std::abs(d) < 1e-3) d = d < 0 ? -1e-3 : 1e-3;
    const double s = cfg.s_min + (cfg.s_max - cfg.s_min) * unit(rng);
    const double q = 1.0 / (1.0 + std::exp(-(rho - theta) / tau));
    const double gq =
        tprune::surrogate_grad_q(std::vector<double>{d}, std::vector<double>{s}, std::vector<double>{q}, cfg)[0];
    const auto tg = backprop_threshold(std::vector<double>{gq}, std::vector<double>{rho}, theta, tau);
    const double q_new = 1.0 / (1.0 + std::exp(-((rho - lr * tg.rho[0]) - (theta - lr * tg.theta)) / tau));
    ++out.total;
    if ((d < 0 && q_new > q) || (d > 0 && q_new < q)) ++out.passed;
  }
  return out;
}

}  // namespace oracle
