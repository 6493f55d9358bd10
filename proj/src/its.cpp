// SPDX-License-Identifier: Apache-2.0
#include "tprune/its.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "tprune/ops.hpp"

namespace tprune {

namespace {

double scaled_dot(const Tensor& a, std::size_t i, const Tensor& b, std::size_t j, double alpha) {
  return dot(a.row(i), b.row(j)) / std::sqrt(alpha);
}

std::vector<std::size_t> argsort(std::span<const double> x) {
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  return idx;
}

struct QuantileWeights {
  std::size_t lo = 0, hi = 0;
  double frac = 0.0;
};

QuantileWeights quantile_weights(std::size_t n, double p) {
  const double pos = p * static_cast<double>(n - 1);
  QuantileWeights qw;
  qw.lo = static_cast<std::size_t>(std::floor(pos));
  qw.hi = std::min(qw.lo + 1, n - 1);
  qw.frac = pos - static_cast<double>(qw.lo);
  return qw;
}

double mean_of(std::span<const double> x) {
  return std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
}

double pop_std(std::span<const double> x, double mean) {
  double v = 0.0;
  for (double e : x) v += (e - mean) * (e - mean);
  return std::sqrt(v / static_cast<double>(x.size()));
}

// Gradient contribution of [mean, std, min, max] of x.
void moments_backward(std::span<const double> x, const double* g, std::vector<double>& out) {
  const auto n = static_cast<double>(x.size());
  const double mu = mean_of(x);
  const double sd = pop_std(x, mu);
  std::size_t amin = 0, amax = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] += g[0] / n;
    if (sd > 0.0) out[i] += g[1] * (x[i] - mu) / (n * sd);
    if (x[i] < x[amin]) amin = i;
    if (x[i] > x[amax]) amax = i;
  }
  out[amin] += g[2];
  out[amax] += g[3];
}

}  // namespace

std::vector<double> centrality_weights(const Tensor& q_instr, const Tensor& k_instr, double alpha) {
  const auto nt = q_instr.rows();
  if (nt == 0) throw ShapeError("centrality_weights needs at least one instruction token");
  std::vector<double> c(nt, 0.0);
  for (std::size_t t = 0; t < nt; ++t)
    for (std::size_t s = 0; s < nt; ++s)
      if (s != t) c[t] += std::max(scaled_dot(q_instr, t, k_instr, s, alpha), 0.0);
  const double total = std::accumulate(c.begin(), c.end(), 0.0);
  if (total <= 0.0) return std::vector<double>(nt, 1.0 / static_cast<double>(nt));
  for (auto& v : c) v /= total;
  return c;
}

std::pair<Tensor, Tensor> centrality_weights_backward(const Tensor& q_instr, const Tensor& k_instr, double alpha,
                                                      std::span<const double> grad_w) {
  const auto nt = q_instr.rows();
  Tensor gq = Tensor::zeros_like(q_instr), gk = Tensor::zeros_like(k_instr);
  std::vector<double> c(nt, 0.0);
  for (std::size_t t = 0; t < nt; ++t)
    for (std::size_t s = 0; s < nt; ++s)
      if (s != t) c[t] += std::max(scaled_dot(q_instr, t, k_instr, s, alpha), 0.0);
  const double total = std::accumulate(c.begin(), c.end(), 0.0);
  if (total <= 0.0) return {gq, gk};
  double wg = 0.0;
  for (std::size_t t = 0; t < nt; ++t) wg += grad_w[t] * c[t] / total;
  const double inv_sqrt = 1.0 / std::sqrt(alpha);
  for (std::size_t t = 0; t < nt; ++t) {
    const double gc = (grad_w[t] - wg) / total;
    if (gc == 0.0) continue;
    for (std::size_t s = 0; s < nt; ++s) {
      if (s == t || scaled_dot(q_instr, t, k_instr, s, alpha) <= 0.0) continue;
      auto gqt = gq.row(t);
      auto gks = gk.row(s);
      const auto qt = q_instr.row(t);
      const auto ks = k_instr.row(s);
      for (std::size_t c2 = 0; c2 < gqt.size(); ++c2) {
        gqt[c2] += gc * ks[c2] * inv_sqrt;
        gks[c2] += gc * qt[c2] * inv_sqrt;
      }
    }
  }
  return {gq, gk};
}

SaliencyResult saliency(std::span<const double> w, const Tensor& q_instr, const Tensor& k_vis, double alpha) {
  if (w.size() != q_instr.rows()) throw ShapeError("saliency: weight count != instruction tokens");
  SaliencyResult r;
  r.w.assign(w.begin(), w.end());
  const auto nv = k_vis.rows();
  r.u.assign(nv, 0.0);
  for (std::size_t j = 0; j < nv; ++j)
    for (std::size_t t = 0; t < w.size(); ++t) r.u[j] += w[t] * scaled_dot(q_instr, t, k_vis, j, alpha);
  r.rho = minmax_norm(r.u);
  return r;
}

SaliencyGrads saliency_backward(std::span<const double> w, const Tensor& q_instr, const Tensor& k_vis,
                                double alpha, std::span<const double> grad_u) {
  const auto nt = q_instr.rows(), nv = k_vis.rows(), width = q_instr.cols();
  const double inv_sqrt = 1.0 / std::sqrt(alpha);
  SaliencyGrads g{std::vector<double>(nt, 0.0), Tensor::zeros_like(q_instr), Tensor::zeros_like(k_vis)};
  std::vector<double> qbar(width, 0.0), grad_qbar(width, 0.0);
  for (std::size_t t = 0; t < nt; ++t) {
    const auto qt = q_instr.row(t);
    for (std::size_t c = 0; c < width; ++c) qbar[c] += w[t] * qt[c];
  }
  for (std::size_t j = 0; j < nv; ++j) {
    const auto kj = k_vis.row(j);
    auto gkj = g.k_vis.row(j);
    for (std::size_t c = 0; c < width; ++c) {
      gkj[c] = grad_u[j] * qbar[c] * inv_sqrt;
      grad_qbar[c] += grad_u[j] * kj[c] * inv_sqrt;
    }
  }
  for (std::size_t t = 0; t < nt; ++t) {
    const auto qt = q_instr.row(t);
    auto gqt = g.q_instr.row(t);
    for (std::size_t c = 0; c < width; ++c) gqt[c] = w[t] * grad_qbar[c];
    g.w[t] = dot(qt, grad_qbar);
  }
  return g;
}

double quantile(std::span<const double> x, double p) {
  if (x.empty()) throw ShapeError("quantile of empty vector");
  const auto idx = argsort(x);
  const auto qw = quantile_weights(x.size(), p);
  return x[idx[qw.lo]] + qw.frac * (x[idx[qw.hi]] - x[idx[qw.lo]]);
}

ThresholdFeatures threshold_features(std::span<const double> rho, std::span<const double> u) {
  if (rho.empty() || rho.size() != u.size()) throw ShapeError("threshold_features: bad input lengths");
  ThresholdFeatures f;
  auto& z = f.z;
  const double mr = mean_of(rho);
  z[0] = mr;
  z[1] = pop_std(rho, mr);
  z[2] = *std::min_element(rho.begin(), rho.end());
  z[3] = *std::max_element(rho.begin(), rho.end());
  z[4] = quantile(rho, 0.25);
  z[5] = quantile(rho, 0.5);
  const double mu = mean_of(u);
  z[6] = mu;
  z[7] = pop_std(u, mu);
  z[8] = *std::min_element(u.begin(), u.end());
  z[9] = *std::max_element(u.begin(), u.end());
  double sl = 0.0, slmax = -INFINITY;
  for (double v : u) {
    const double s = slog(v);
    sl += s;
    slmax = std::max(slmax, s);
  }
  z[10] = sl / static_cast<double>(u.size());
  z[11] = slmax;
  return f;
}

std::pair<std::vector<double>, std::vector<double>> threshold_features_backward(
    std::span<const double> rho, std::span<const double> u, const std::array<double, 12>& g) {
  const auto n = rho.size();
  std::vector<double> gr(n, 0.0), gu(n, 0.0);
  moments_backward(rho, &g[0], gr);
  const auto idx = argsort(rho);
  for (int k = 0; k < 2; ++k) {
    const auto qw = quantile_weights(n, k == 0 ? 0.25 : 0.5);
    gr[idx[qw.lo]] += g[4 + k] * (1.0 - qw.frac);
    gr[idx[qw.hi]] += g[4 + k] * qw.frac;
  }
  moments_backward(u, &g[6], gu);
  std::size_t amax = 0;
  for (std::size_t i = 0; i < n; ++i) {
    gu[i] += g[10] * slog_grad(u[i]) / static_cast<double>(n);
    if (u[i] > u[amax]) amax = i;
  }
  gu[amax] += g[11] * slog_grad(u[amax]);
  return {gr, gu};
}

ThresholdPredictor init_predictor(std::size_t hidden, std::uint64_t seed, double bias) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d1(0.0, 1.0 / std::sqrt(12.0));
  std::normal_distribution<double> d2(0.0, 0.1 / std::sqrt(static_cast<double>(hidden)));
  ThresholdPredictor p{Tensor({12, hidden}), Tensor({hidden}), Tensor({hidden}), Tensor({1}, bias)};
  for (auto& v : p.w1.data()) v = d1(rng);
  for (auto& v : p.w2.data()) v = d2(rng);
  return p;
}

ThresholdPredictor zeros_like(const ThresholdPredictor& p) {
  return {Tensor::zeros_like(p.w1), Tensor::zeros_like(p.b1), Tensor::zeros_like(p.w2), Tensor::zeros_like(p.b2)};
}

double predict_threshold(const ThresholdFeatures& feat, const ThresholdPredictor& pred, PredictorCache* cache) {
  const auto hidden = pred.b1.size();
  if (pred.w1.rows() != ThresholdFeatures::kSize || pred.w1.cols() != hidden || pred.w2.size() != hidden ||
      pred.b2.size() != 1) {
    throw ShapeError("threshold predictor shapes do not match");
  }
  std::vector<double> pre(hidden);
  double logit = pred.b2[0];
  for (std::size_t h = 0; h < hidden; ++h) {
    double a = pred.b1[h];
    for (std::size_t i = 0; i < ThresholdFeatures::kSize; ++i) a += feat.z[i] * pred.w1.at(i, h);
    pre[h] = a;
    logit += pred.w2[h] * gelu(a);
  }
  const double theta = sigmoid(logit);
  if (cache) {
    cache->z = feat.z;
    cache->pre = std::move(pre);
    cache->logit = logit;
    cache->theta = theta;
  }
  return theta;
}

std::array<double, 12> predict_threshold_backward(const ThresholdPredictor& pred, const PredictorCache& c,
                                                  double grad_theta, ThresholdPredictor& g) {
  std::array<double, 12> gz{};
  const double glogit = grad_theta * c.theta * (1.0 - c.theta);
  g.b2[0] += glogit;
  for (std::size_t h = 0; h < c.pre.size(); ++h) {
    g.w2[h] += glogit * gelu(c.pre[h]);
    const double gpre = glogit * pred.w2[h] * gelu_grad(c.pre[h]);
    g.b1[h] += gpre;
    for (std::size_t i = 0; i < 12; ++i) {
      g.w1.at(i, h) += gpre * c.z[i];
      gz[i] += gpre * pred.w1.at(i, h);
    }
  }
  return gz;
}

void finalize_mask(RetentionState& s, std::span<const double> rho) {
  s.keep.clear();
  s.fallback = false;
  for (std::size_t j = 0; j < s.mask.size(); ++j)
    if (s.mask[j]) s.keep.push_back(j);
  if (s.keep.empty() && !s.mask.empty()) {
    const auto best = static_cast<std::size_t>(std::max_element(rho.begin(), rho.end()) - rho.begin());
    s.mask[best] = 1;
    s.keep.push_back(best);
    s.fallback = true;
  }
  s.surrogate.resize(s.mask.size());
  // sg(M) - sg(q) + q: stored as exactly M (rounding of (M - q) + q would
  // leave an ulp of residue); its derivative with respect to q is 1.
  for (std::size_t j = 0; j < s.mask.size(); ++j) s.surrogate[j] = static_cast<double>(s.mask[j]);
}

RetentionState retention(std::span<const double> rho, double theta, double tau) {
  if (!(tau > 0.0)) throw ConfigError("retention temperature must be positive");
  RetentionState s;
  s.theta = theta;
  s.tau = tau;
  s.q.resize(rho.size());
  s.mask.resize(rho.size());
  for (std::size_t j = 0; j < rho.size(); ++j) {
    s.q[j] = sigmoid((rho[j] - theta) / tau);
    s.mask[j] = s.q[j] > 0.5 ? 1 : 0;
  }
  finalize_mask(s, rho);
  return s;
}

std::vector<double> surrogate_backward(std::span<const double> grad_surrogate) {
  return {grad_surrogate.begin(), grad_surrogate.end()};
}

Selection compress(const TokenSequence& seq, const RetentionState& state) {
  seq.check();
  if (state.mask.size() != seq.n_visual) throw ShapeError("retention state does not match visual tokens");
  if (state.keep.empty()) throw ShapeError("retention state keeps no visual token");
  const auto d = seq.hidden.cols();
  Selection sel;
  sel.keep = state.keep;
  auto& out = sel.sequence;
  out.n_visual = state.keep.size();
  out.n_instruction = seq.n_instruction;
  out.hidden = Tensor({out.n_visual + out.n_instruction, d});
  for (std::size_t i = 0; i < state.keep.size(); ++i) {
    const auto j = state.keep[i];
    const auto src = seq.hidden.row(j);
    auto dst = out.hidden.row(i);
    for (std::size_t c = 0; c < d; ++c) dst[c] = state.surrogate[j] * src[c];
  }
  for (std::size_t t = 0; t < seq.n_instruction; ++t) {
    const auto src = seq.hidden.row(seq.n_visual + t);
    std::copy(src.begin(), src.end(), out.hidden.row(out.n_visual + t).begin());
  }
  out.positions = drop_positions(seq.positions, state.keep, seq.n_visual);
  out.active.assign(seq.n_visual, false);
  for (auto j : state.keep) out.active[j] = true;
  return sel;
}

ItsTrace its_forward(const Tensor& q_instr, const Tensor& k_instr, const Tensor& k_vis, double alpha,
                     const ThresholdPredictor& pred, double tau, bool uniform_weights) {
  ItsTrace tr;
  tr.q_instr = q_instr;
  tr.k_instr = k_instr;
  tr.k_vis = k_vis;
  tr.alpha = alpha;
  tr.uniform_weights = uniform_weights;
  const auto nt = q_instr.rows();
  const auto w = uniform_weights ? std::vector<double>(nt, 1.0 / static_cast<double>(nt))
                                 : centrality_weights(q_instr, k_instr, alpha);
  tr.sal = saliency(w, q_instr, k_vis, alpha);
  tr.features = threshold_features(tr.sal.rho, tr.sal.u);
  const double theta = predict_threshold(tr.features, pred, &tr.predictor);
  tr.state = retention(tr.sal.rho, theta, tau);
  return tr;
}

ItsGrads its_backward(const ItsTrace& tr, const ThresholdPredictor& pred, double grad_theta,
                      std::span<const double> grad_rho, ThresholdPredictor& pred_grads) {
  const auto gz = predict_threshold_backward(pred, tr.predictor, grad_theta, pred_grads);
  auto [gr_feat, gu_feat] = threshold_features_backward(tr.sal.rho, tr.sal.u, gz);
  std::vector<double> gr(grad_rho.begin(), grad_rho.end());
  for (std::size_t j = 0; j < gr.size(); ++j) gr[j] += gr_feat[j];
  auto gu = minmax_norm_backward(tr.sal.u, gr);
  for (std::size_t j = 0; j < gu.size(); ++j) gu[j] += gu_feat[j];
  auto sg = saliency_backward(tr.sal.w, tr.q_instr, tr.k_vis, tr.alpha, gu);
  ItsGrads out{std::move(sg.q_instr), Tensor::zeros_like(tr.k_instr), std::move(sg.k_vis)};
  if (!tr.uniform_weights) {
    auto [gq, gk] = centrality_weights_backward(tr.q_instr, tr.k_instr, tr.alpha, sg.w);
    out.q_instr += gq;
    out.k_instr += gk;
  }
  return out;
}

}  // namespace tprune
