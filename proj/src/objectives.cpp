// SPDX-License-Identifier: Apache-2.0
#include "tprune/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace tprune {

namespace {

std::vector<double> softmax(std::span<const double> logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = std::exp(logits[i] - mx);
    sum += p[i];
  }
  for (auto& v : p) v /= sum;
  return p;
}

double log_sum_exp(std::span<const double> logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double l : logits) sum += std::exp(l - mx);
  return mx + std::log(sum);
}

}  // namespace

LossValue cross_entropy(std::span<const double> logits, std::size_t target) {
  if (target >= logits.size()) throw ConfigError("cross_entropy target out of range");
  LossValue out;
  out.value = log_sum_exp(logits) - logits[target];
  out.grad = softmax(logits);
  out.grad[target] -= 1.0;
  return out;
}

void BandConfig::validate() const {
  if (!(0.0 < r_min && r_min < r_max && r_max < 1.0)) throw ConfigError("band needs 0 < r_min < r_max < 1");
}

LossValue band_loss(std::span<const double> q, const BandConfig& cfg) {
  const auto n = static_cast<double>(q.size());
  const double r = std::accumulate(q.begin(), q.end(), 0.0) / n;
  LossValue out;
  out.value = std::max(0.0, r - cfg.r_max) + std::max(0.0, cfg.r_min - r);
  double slope = 0.0;
  if (r > cfg.r_max) slope = 1.0;
  if (r < cfg.r_min) slope = -1.0;
  out.grad.assign(q.size(), slope / n);
  return out;
}

LossValue robust_loss(std::span<const double> logits) {
  const auto p = softmax(logits);
  const double lse = log_sum_exp(logits);
  double neg_entropy = 0.0;
  std::vector<double> logp(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    logp[i] = logits[i] - lse;
    neg_entropy += p[i] * logp[i];
  }
  LossValue out;
  out.value = neg_entropy;
  out.grad.resize(p.size());
  // d/dz_k sum_v p_v log p_v = p_k (log p_k - sum_v p_v log p_v)
  for (std::size_t k = 0; k < p.size(); ++k) out.grad[k] = p[k] * (logp[k] - neg_entropy);
  return out;
}

LossValue flip_loss(double p_truth, double eps_flip) {
  if (!(eps_flip > 0.0)) throw ConfigError("flip epsilon must be positive");
  const double inner = 1.0 - p_truth + eps_flip;
  return {-std::log(inner), {1.0 / inner}};
}

LossValue flip_loss_logits(std::span<const double> logits, std::size_t target, double eps_flip) {
  if (target >= logits.size()) throw ConfigError("flip loss target out of range");
  const auto p = softmax(logits);
  const auto base = flip_loss(p[target], eps_flip);
  LossValue out;
  out.value = base.value;
  out.grad.resize(p.size());
  const double g = base.grad[0];
  for (std::size_t k = 0; k < p.size(); ++k) out.grad[k] = g * p[target] * ((k == target ? 1.0 : 0.0) - p[k]);
  return out;
}

RetentionState flip_mask(const RetentionState& state, std::span<const double> rho) {
  RetentionState out = state;
  for (auto& m : out.mask) m = m ? 0 : 1;
  finalize_mask(out, rho);
  return out;
}

std::string to_string(LossKind k) {
  switch (k) {
    case LossKind::ce: return "CE";
    case LossKind::band: return "BAND";
    case LossKind::robust: return "ROBUST";
  }
  return "?";
}

void ModeSchedule::validate() const {
  const double s = p_ce + p_band + p_robust;
  if (p_ce < 0 || p_band < 0 || p_robust < 0 || std::abs(s - 1.0) > 1e-9) {
    throw ConfigError("loss-mode probabilities must be non-negative and sum to 1");
  }
  if (p_flip < 0 || p_flip > 1) throw ConfigError("flip probability must lie in [0, 1]");
}

LossMode select_mode(std::uint64_t /*step*/, std::mt19937_64& rng, const ModeSchedule& s) {
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  const double a = uni(rng);
  const double b = uni(rng);
  LossMode m;
  if (a < s.p_ce) {
    m.kind = LossKind::ce;
  } else if (a < s.p_ce + s.p_band) {
    m.kind = LossKind::band;
  } else {
    m.kind = LossKind::robust;
  }
  m.flip_active = m.kind != LossKind::robust && b < s.p_flip;
  return m;
}

}  // namespace tprune
