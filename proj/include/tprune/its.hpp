// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "tprune/decoder.hpp"
#include "tprune/tensor.hpp"

namespace tprune {

inline constexpr double kDefaultTauCe = 0.2;

/// c_t = sum_{t' != t} max(<q_t, k_t'> / sqrt(alpha), 0), normalized to sum 1.
/// Falls back to uniform weights when every centrality is zero.
std::vector<double> centrality_weights(const Tensor& q_instr, const Tensor& k_instr, double alpha);
/// Returns (grad_q_instr, grad_k_instr).
std::pair<Tensor, Tensor> centrality_weights_backward(const Tensor& q_instr, const Tensor& k_instr, double alpha,
                                                      std::span<const double> grad_w);

struct SaliencyResult {
  std::vector<double> w;    // instruction weights
  std::vector<double> u;    // raw saliency logits
  std::vector<double> rho;  // min-max normalized
};

SaliencyResult saliency(std::span<const double> w, const Tensor& q_instr, const Tensor& k_vis, double alpha);

struct SaliencyGrads {
  std::vector<double> w;
  Tensor q_instr;
  Tensor k_vis;
};
/// Gradient of u with respect to w, q_instr and k_vis.
SaliencyGrads saliency_backward(std::span<const double> w, const Tensor& q_instr, const Tensor& k_vis,
                                double alpha, std::span<const double> grad_u);

/// [Psi(rho) (6), Phi(u) (4), Upsilon(slog u) (2)].
struct ThresholdFeatures {
  static constexpr std::size_t kSize = 12;
  std::array<double, kSize> z{};
};

/// Linear interpolation between order statistics (inclusive convention).
double quantile(std::span<const double> x, double p);

ThresholdFeatures threshold_features(std::span<const double> rho, std::span<const double> u);
/// Returns (grad_rho, grad_u).
std::pair<std::vector<double>, std::vector<double>> threshold_features_backward(
    std::span<const double> rho, std::span<const double> u, const std::array<double, 12>& grad_z);

/// theta = sigmoid(w2 . gelu(w1^T z + b1) + b2).
struct ThresholdPredictor {
  Tensor w1;  // [12, hidden]
  Tensor b1;  // [hidden]
  Tensor w2;  // [hidden]
  Tensor b2;  // [1]
};

ThresholdPredictor init_predictor(std::size_t hidden, std::uint64_t seed, double bias = 0.0);
ThresholdPredictor zeros_like(const ThresholdPredictor& p);

template <class P, class F>
void for_each_param_predictor(P& p, F&& f) {
  f(std::string("predictor.w1"), p.w1);
  f(std::string("predictor.b1"), p.b1);
  f(std::string("predictor.w2"), p.w2);
  f(std::string("predictor.b2"), p.b2);
}

struct PredictorCache {
  std::array<double, 12> z{};
  std::vector<double> pre;
  double logit = 0.0;
  double theta = 0.0;
};

double predict_threshold(const ThresholdFeatures& feat, const ThresholdPredictor& pred, PredictorCache* cache = nullptr);
/// Accumulates parameter gradients and returns dL/dz.
std::array<double, 12> predict_threshold_backward(const ThresholdPredictor& pred, const PredictorCache& cache,
                                                  double grad_theta, ThresholdPredictor& grads);

struct RetentionState {
  double theta = 0.0;
  double tau = kDefaultTauCe;
  std::vector<double> q;
  std::vector<std::uint8_t> mask;
  std::vector<double> surrogate;  // forward values of sg(M) - sg(q) + q
  std::vector<std::size_t> keep;
  bool fallback = false;          // minimum-retention rule fired
};

/// Retention probabilities, strict hard mask (q > 0.5) and the straight-through
/// surrogate. An all-zero mask keeps the single argmax-rho token.
RetentionState retention(std::span<const double> rho, double theta, double tau = kDefaultTauCe);
/// Rebuilds keep/surrogate from an edited mask, applying the minimum-retention rule.
void finalize_mask(RetentionState& state, std::span<const double> rho);

/// Straight-through backward: dM~/dq = 1, nothing flows to the M path.
std::vector<double> surrogate_backward(std::span<const double> grad_surrogate);

/// Retained visual tokens (scaled by their surrogate values) followed by every
/// instruction token.
Selection compress(const TokenSequence& seq, const RetentionState& state);

/// Full forward of the scheduling pipeline on selection-layer queries/keys.
struct ItsTrace {
  Tensor q_instr, k_instr, k_vis;
  double alpha = 1.0;
  bool uniform_weights = false;
  SaliencyResult sal;
  ThresholdFeatures features;
  PredictorCache predictor;
  RetentionState state;
};

ItsTrace its_forward(const Tensor& q_instr, const Tensor& k_instr, const Tensor& k_vis, double alpha,
                     const ThresholdPredictor& pred, double tau, bool uniform_weights = false);

struct ItsGrads {
  Tensor q_instr, k_instr, k_vis;
};
/// Propagates upstream gradients on theta and rho back to the queries/keys and
/// the predictor parameters.
ItsGrads its_backward(const ItsTrace& trace, const ThresholdPredictor& pred, double grad_theta,
                      std::span<const double> grad_rho, ThresholdPredictor& pred_grads);

}  // namespace tprune
