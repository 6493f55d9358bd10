// SPDX-License-Identifier: Apache-2.0
#include "tprune/sgp.hpp"

#include <algorithm>
#include <cmath>

#include "tprune/objectives.hpp"
#include "tprune/ops.hpp"

namespace tprune {

void SgpConfig::validate() const {
  if (!(beta > 0 && eps_std > 0 && eps_sat > 0 && eps_row > 0 && clip > 0)) {
    throw ConfigError("SGP constants must be positive");
  }
  if (!(0 < s_min && s_min <= s_max)) throw ConfigError("SGP scale band needs 0 < s_min <= s_max");
}

Tensor scatter_gradients(const Tensor& grad_compressed, std::span<const std::size_t> keep_index,
                         std::size_t n_visual) {
  if (grad_compressed.rows() < keep_index.size()) throw ShapeError("scatter: fewer rows than keep indices");
  const auto d = grad_compressed.cols();
  Tensor out({n_visual, d});
  for (std::size_t i = 0; i < keep_index.size(); ++i) {
    const auto j = keep_index[i];
    if (j >= n_visual || (i > 0 && j <= keep_index[i - 1])) {
      throw ShapeError("scatter: keep indices must be strictly increasing and < N_v");
    }
    const auto src = grad_compressed.row(i);
    std::copy(src.begin(), src.end(), out.row(j).begin());
  }
  return out;
}

std::vector<double> taylor_proxy(const Tensor& t_vis, const Tensor& grad_full) {
  if (!t_vis.same_shape(grad_full)) throw ShapeError("taylor_proxy shape mismatch");
  std::vector<double> eta(t_vis.rows());
  for (std::size_t j = 0; j < eta.size(); ++j) eta[j] = dot(t_vis.row(j), grad_full.row(j));
  return eta;
}

std::vector<double> standardize_proxy(std::span<const double> eta, std::span<const double> mask,
                                      const SgpConfig& cfg) {
  const auto st = masked_stats(eta, mask);
  const double denom = std::max(st.std, cfg.eps_std);
  std::vector<double> z(eta.size());
  for (std::size_t j = 0; j < eta.size(); ++j) z[j] = std::clamp((eta[j] - st.mean) / denom, -cfg.clip, cfg.clip);
  return z;
}

Directional directional_term(std::span<const double> z_std) {
  Directional out;
  out.r.resize(z_std.size());
  out.d.resize(z_std.size());
  for (std::size_t j = 0; j < z_std.size(); ++j) {
    out.r[j] = sigmoid(z_std[j]);
    out.d[j] = 0.5 - out.r[j];
  }
  return out;
}

Magnitude magnitude_scale(const Tensor& t_vis, const Tensor& grad_full, std::span<const double> mask,
                          const SgpConfig& cfg) {
  if (!t_vis.same_shape(grad_full)) throw ShapeError("magnitude_scale shape mismatch");
  Magnitude out;
  out.m.assign(t_vis.rows(), 0.0);
  for (std::size_t j = 0; j < out.m.size(); ++j) {
    const auto a = t_vis.row(j);
    const auto g = grad_full.row(j);
    for (std::size_t k = 0; k < a.size(); ++k) out.m[j] += std::abs(a[k] * g[k]);
  }
  const double row_mean = masked_stats(out.m, mask).mean;
  out.s.resize(out.m.size());
  for (std::size_t j = 0; j < out.m.size(); ++j) {
    out.s[j] = std::clamp(out.m[j] / (row_mean + cfg.eps_row), cfg.s_min, cfg.s_max);
  }
  return out;
}

std::vector<double> surrogate_grad_q(std::span<const double> d, std::span<const double> s, std::span<const double> q,
                                     const SgpConfig& cfg) {
  if (d.size() != s.size() || d.size() != q.size()) throw ShapeError("surrogate_grad_q length mismatch");
  std::vector<double> g(d.size());
  for (std::size_t j = 0; j < g.size(); ++j) g[j] = cfg.beta * d[j] * s[j] * std::max(q[j] * (1.0 - q[j]), cfg.eps_sat);
  return g;
}

ThresholdGrads backprop_threshold(std::span<const double> grad_q, std::span<const double> rho, double theta,
                                  double tau) {
  ThresholdGrads out;
  out.rho.resize(rho.size());
  for (std::size_t j = 0; j < rho.size(); ++j) {
    const double dq = sigmoid_grad((rho[j] - theta) / tau) / tau;
    out.rho[j] = grad_q[j] * dq;
    out.theta -= grad_q[j] * dq;
  }
  return out;
}

SgpSignals sgp_signals(const Tensor& t_vis, const Tensor& grad_full, std::span<const double> mask,
                       std::span<const double> q, const SgpConfig& cfg) {
  SgpSignals s;
  s.eta = taylor_proxy(t_vis, grad_full);
  if (cfg.score == ProxyScore::loss_increase) {
    std::vector<double> neg(s.eta.size());
    std::transform(s.eta.begin(), s.eta.end(), neg.begin(), [](double e) { return -e; });
    s.z_std = standardize_proxy(neg, mask, cfg);
  } else {
    s.z_std = standardize_proxy(s.eta, mask, cfg);
  }
  auto dir = directional_term(s.z_std);
  s.r = std::move(dir.r);
  s.d = std::move(dir.d);
  auto mag = magnitude_scale(t_vis, grad_full, mask, cfg);
  s.m = std::move(mag.m);
  s.s = std::move(mag.s);
  s.grad_q = surrogate_grad_q(s.d, s.s, q, cfg);
  return s;
}

double leave_one_out_oracle(const DecoderWeights& w, const DecoderConfig& cfg, const TokenSequence& seq,
                            std::size_t target, std::size_t j) {
  if (j >= seq.n_visual) throw ConfigError("leave-one-out index out of range");
  const auto base = decoder_forward(w, cfg, seq);
  const SelectionHook zero_row = [j](const SelectionView& view) -> std::optional<Selection> {
    Selection sel;
    sel.sequence = view.sequence;
    auto row = sel.sequence.hidden.row(j);
    std::fill(row.begin(), row.end(), 0.0);
    for (std::size_t i = 0; i < view.sequence.n_visual; ++i) sel.keep.push_back(i);
    return sel;
  };
  const auto probe = decoder_forward(w, cfg, seq, zero_row);
  return cross_entropy(probe.logits.data(), target).value - cross_entropy(base.logits.data(), target).value;
}

SelectionGradient selection_gradient(const DecoderWeights& w, const DecoderConfig& cfg, const TokenSequence& seq,
                                     std::size_t target) {
  const SelectionHook keep_all = [](const SelectionView& view) -> std::optional<Selection> {
    Selection sel;
    sel.sequence = view.sequence;
    for (std::size_t i = 0; i < view.sequence.n_visual; ++i) sel.keep.push_back(i);
    return sel;
  };
  const auto tape = decoder_forward(w, cfg, seq, keep_all);
  const auto ce = cross_entropy(tape.logits.data(), target);
  DecoderWeights scratch = zeros_like(w);
  Tensor g = head_backward(w, cfg, tape.head, Tensor::vector(ce.grad), tape.layers.back().input.rows(), scratch);
  g = backward_layers(w, cfg, tape.layers, cfg.selection_layer, cfg.n_layers, std::move(g), scratch);
  SelectionGradient out;
  out.loss = ce.value;
  out.t_vis = rows(tape.selection_input, 0, seq.n_visual);
  out.grad = rows(g, 0, seq.n_visual);
  return out;
}

}  // namespace tprune
