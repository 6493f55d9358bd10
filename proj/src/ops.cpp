// SPDX-License-Identifier: Apache-2.0
#include "tprune/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace tprune {

Tensor row_softmax(const Tensor& x) {
  if (x.empty() || x.cols() == 0) throw ShapeError("row_softmax on empty rows " + shape_string(x.shape()));
  Tensor y = x;
  for (std::size_t r = 0; r < y.rows(); ++r) {
    auto row = y.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double sum = 0.0;
    for (auto& v : row) {
      v = std::exp(v - mx);
      sum += v;
    }
    for (auto& v : row) v /= sum;
  }
  return y;
}

Tensor row_softmax_backward(const Tensor& y, const Tensor& grad_y) {
  Tensor gx = Tensor::zeros_like(y);
  for (std::size_t r = 0; r < y.rows(); ++r) {
    const auto yr = y.row(r);
    const auto gr = grad_y.row(r);
    const double s = dot(yr, gr);
    auto out = gx.row(r);
    for (std::size_t c = 0; c < yr.size(); ++c) out[c] = yr[c] * (gr[c] - s);
  }
  return gx;
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double sigmoid_grad(double x) {
  const double s = sigmoid(x);
  return s * (1.0 - s);
}

namespace {
constexpr double kGeluC = 0.044715;
const double kSqrt2OverPi = std::sqrt(2.0 / std::numbers::pi);
}  // namespace

double gelu(double x) {
  const double inner = kSqrt2OverPi * (x + kGeluC * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(inner));
}

double gelu_grad(double x) {
  const double inner = kSqrt2OverPi * (x + kGeluC * x * x * x);
  const double t = std::tanh(inner);
  const double dinner = kSqrt2OverPi * (1.0 + 3.0 * kGeluC * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
}

double slog(double x) {
  const double m = std::log1p(std::abs(x));
  return x < 0 ? -m : m;
}

double slog_grad(double x) { return 1.0 / (1.0 + std::abs(x)); }

namespace {

struct Extremes {
  std::size_t argmin = 0;
  std::size_t argmax = 0;
};

Extremes extremes(std::span<const double> x) {
  Extremes e;
  for (std::size_t i = 1; i < x.size(); ++i) {
    if (x[i] < x[e.argmin]) e.argmin = i;
    if (x[i] > x[e.argmax]) e.argmax = i;
  }
  return e;
}

}  // namespace

std::vector<double> minmax_norm(std::span<const double> x, double eps) {
  if (x.empty()) return {};
  const auto e = extremes(x);
  const double lo = x[e.argmin];
  const double denom = x[e.argmax] - lo + eps;
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = (x[i] - lo) / denom;
  return y;
}

std::vector<double> minmax_norm_backward(std::span<const double> x, std::span<const double> grad_y,
                                         double eps) {
  std::vector<double> gx(x.size(), 0.0);
  if (x.empty()) return gx;
  const auto e = extremes(x);
  const double lo = x[e.argmin];
  const double denom = x[e.argmax] - lo + eps;
  double grad_lo = 0.0;
  double grad_hi = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double y = (x[i] - lo) / denom;
    gx[i] += grad_y[i] / denom;
    grad_lo += grad_y[i] * (y - 1.0) / denom;
    grad_hi -= grad_y[i] * y / denom;
  }
  gx[e.argmin] += grad_lo;
  gx[e.argmax] += grad_hi;
  return gx;
}

MaskedStats masked_stats(std::span<const double> x, std::span<const double> mask) {
  if (x.size() != mask.size()) throw ShapeError("masked_stats length mismatch");
  double wsum = 0.0, s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    wsum += mask[i];
    s += mask[i] * x[i];
  }
  if (wsum <= 0.0) return {};
  const double mean = s / wsum;
  double var = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) var += mask[i] * (x[i] - mean) * (x[i] - mean);
  var /= wsum;
  return {mean, std::sqrt(std::max(var, 0.0))};
}

std::vector<double> masked_stats_backward(std::span<const double> x, std::span<const double> mask,
                                          double grad_mean, double grad_std) {
  std::vector<double> gx(x.size(), 0.0);
  const auto st = masked_stats(x, mask);
  double wsum = 0.0;
  for (double m : mask) wsum += m;
  if (wsum <= 0.0) return gx;
  for (std::size_t i = 0; i < x.size(); ++i) {
    gx[i] = grad_mean * mask[i] / wsum;
    if (st.std > 0.0) gx[i] += grad_std * mask[i] * (x[i] - st.mean) / (wsum * st.std);
  }
  return gx;
}

Tensor rms_norm(const Tensor& x, const Tensor& gain, RmsNormCache* cache) {
  const auto n = x.rows(), d = x.cols();
  if (gain.size() != d) throw ShapeError("rms_norm gain width mismatch");
  Tensor y({n, d});
  if (cache) cache->inv_rms.assign(n, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    const auto xr = x.row(r);
    const double ms = dot(xr, xr) / static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(ms + kRmsEps);
    if (cache) cache->inv_rms[r] = inv;
    auto yr = y.row(r);
    for (std::size_t c = 0; c < d; ++c) yr[c] = xr[c] * inv * gain[c];
  }
  return y;
}

Tensor rms_norm_backward(const Tensor& x, const Tensor& gain, const RmsNormCache& cache,
                         const Tensor& grad_y, Tensor& grad_gain) {
  const auto n = x.rows(), d = x.cols();
  Tensor gx({n, d});
  for (std::size_t r = 0; r < n; ++r) {
    const auto xr = x.row(r);
    const auto gr = grad_y.row(r);
    const double inv = cache.inv_rms[r];
    double proj = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      grad_gain[c] += gr[c] * xr[c] * inv;
      proj += gr[c] * gain[c] * xr[c];
    }
    const double k = inv * inv * inv * proj / static_cast<double>(d);
    auto out = gx.row(r);
    for (std::size_t c = 0; c < d; ++c) out[c] = gr[c] * gain[c] * inv - xr[c] * k;
  }
  return gx;
}

double finite_diff_check(const ScalarFn& f, const Tensor& x, double h) {
  if (!(h > 0.0)) throw ConfigError("finite_diff_check needs h > 0");
  Tensor analytic = Tensor::zeros_like(x);
  const double f0 = f(x, &analytic);
  if (!std::isfinite(f0)) throw EvaluationError("finite_diff_check: f(x) is not finite");
  double worst = 0.0;
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double fp = f(probe, nullptr);
    probe[i] = orig - h;
    const double fm = f(probe, nullptr);
    probe[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) throw EvaluationError("finite_diff_check: non-finite probe");
    const double numeric = (fp - fm) / (2.0 * h);
    const double denom = std::max({std::abs(numeric), std::abs(analytic[i]), 1e-8});
    worst = std::max(worst, std::abs(numeric - analytic[i]) / denom);
  }
  return worst;
}

}  // namespace tprune
