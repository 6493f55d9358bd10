// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <vector>

#include "tprune/decoder.hpp"
#include "tprune/tensor.hpp"

namespace tprune {

/// Which way the standardized proxy points. `eta` ranks tokens by
/// <T_j, G_j> itself; `loss_increase` ranks them by -<T_j, G_j>, the
/// first-order loss increase from dropping token j.
enum class ProxyScore { eta, loss_increase };

struct SgpConfig {
  ProxyScore score = ProxyScore::eta;
  double beta = 0.8;
  double eps_std = 3e-3;
  double eps_sat = 5e-3;
  double clip = 3.0;
  double s_min = 0.5;
  double s_max = 2.0;
  double eps_row = 1e-6;

  void validate() const;
};

/// Rows at keep_index receive grad_compressed; every other row is zero.
Tensor scatter_gradients(const Tensor& grad_compressed, std::span<const std::size_t> keep_index, std::size_t n_visual);

/// eta_j = <T_j, G_j>
std::vector<double> taylor_proxy(const Tensor& t_vis, const Tensor& grad_full);

/// Masked standardization of eta, clipped to [-c, c].
std::vector<double> standardize_proxy(std::span<const double> eta, std::span<const double> mask, const SgpConfig& cfg);

struct Directional {
  std::vector<double> r;  // logistic(z)
  std::vector<double> d;  // 0.5 - r, a stop-gradient signal
};
Directional directional_term(std::span<const double> z_std);

struct Magnitude {
  std::vector<double> m;
  std::vector<double> s;
};
Magnitude magnitude_scale(const Tensor& t_vis, const Tensor& grad_full, std::span<const double> mask,
                          const SgpConfig& cfg);

/// beta * d * s * max(q (1 - q), eps_sat)
std::vector<double> surrogate_grad_q(std::span<const double> d, std::span<const double> s, std::span<const double> q,
                                     const SgpConfig& cfg);

struct ThresholdGrads {
  double theta = 0.0;
  std::vector<double> rho;
};
/// Chain rule through q_j = sigmoid((rho_j - theta) / tau); theta is shared, so
/// its gradient sums over tokens.
ThresholdGrads backprop_threshold(std::span<const double> grad_q, std::span<const double> rho, double theta,
                                  double tau);

struct SgpSignals {
  std::vector<double> eta;
  std::vector<double> z_std;
  std::vector<double> r;
  std::vector<double> d;
  std::vector<double> m;
  std::vector<double> s;
  std::vector<double> grad_q;
};

/// Full surrogate construction from the layer activations and their
/// (scattered) loss gradients.
SgpSignals sgp_signals(const Tensor& t_vis, const Tensor& grad_full, std::span<const double> mask,
                       std::span<const double> q, const SgpConfig& cfg);

/// Exact loss change from zeroing visual row j at the selection layer:
/// L(T with row j zeroed) - L(T), by re-running the forward pass.
double leave_one_out_oracle(const DecoderWeights& w, const DecoderConfig& cfg, const TokenSequence& seq,
                            std::size_t target, std::size_t j);

struct SelectionGradient {
  double loss = 0.0;
  Tensor t_vis;  // visual rows of the selection-layer input
  Tensor grad;   // dL/dT_vis at the selection layer
};
/// Cross-entropy loss and its gradient on the selection-layer visual states,
/// with every token kept.
SelectionGradient selection_gradient(const DecoderWeights& w, const DecoderConfig& cfg, const TokenSequence& seq,
                                     std::size_t target);

}  // namespace tprune
