// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <span>
#include <vector>

#include "tprune/tensor.hpp"

namespace tprune {

inline constexpr double kMinMaxEps = 1e-6;

// Each primitive comes with its backward rule: given the forward output (or
// input) and the upstream gradient, return the gradient on the input.

Tensor row_softmax(const Tensor& x);
Tensor row_softmax_backward(const Tensor& y, const Tensor& grad_y);

double sigmoid(double x);
double sigmoid_grad(double x);
/// tanh approximation.
double gelu(double x);
double gelu_grad(double x);

double slog(double x);
double slog_grad(double x);

std::vector<double> minmax_norm(std::span<const double> x, double eps = kMinMaxEps);
std::vector<double> minmax_norm_backward(std::span<const double> x, std::span<const double> grad_y,
                                         double eps = kMinMaxEps);

struct MaskedStats {
  double mean = 0.0;
  double std = 0.0;
};
/// Mask-weighted mean and population standard deviation; (0, 0) for an empty mask.
MaskedStats masked_stats(std::span<const double> x, std::span<const double> mask);
/// Gradient on x given upstream gradients on (mean, std); the mask is held fixed.
std::vector<double> masked_stats_backward(std::span<const double> x, std::span<const double> mask,
                                          double grad_mean, double grad_std);

struct RmsNormCache {
  std::vector<double> inv_rms;  // per row
};
inline constexpr double kRmsEps = 1e-6;
Tensor rms_norm(const Tensor& x, const Tensor& gain, RmsNormCache* cache);
/// Accumulates the gain gradient into grad_gain and returns the input gradient.
Tensor rms_norm_backward(const Tensor& x, const Tensor& gain, const RmsNormCache& cache,
                         const Tensor& grad_y, Tensor& grad_gain);

/// Scalar objective returning f(x); writes df/dx into *grad when grad != nullptr.
using ScalarFn = std::function<double(const Tensor& x, Tensor* grad)>;

/// Max relative error between the analytic gradient of f and central
/// differences with step h; denominators are floored at 1e-8.
double finite_diff_check(const ScalarFn& f, const Tensor& x, double h = 1e-5);

}  // namespace tprune
