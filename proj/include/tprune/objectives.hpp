// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "tprune/its.hpp"
#include "tprune/tensor.hpp"

namespace tprune {

struct LossValue {
  double value = 0.0;
  std::vector<double> grad;  // with respect to the loss input
};

/// -log softmax(logits)[target]
LossValue cross_entropy(std::span<const double> logits, std::size_t target);

struct BandConfig {
  double r_min = 0.3;
  double r_max = 0.8;
  void validate() const;
};

/// max(0, r - r_max) + max(0, r_min - r) with r = mean(q); gradient on q.
LossValue band_loss(std::span<const double> q, const BandConfig& cfg);

/// Negative entropy of softmax(logits); gradient on logits.
LossValue robust_loss(std::span<const double> logits);

/// -log(1 - p_truth + eps); gradient with respect to p_truth.
LossValue flip_loss(double p_truth, double eps_flip);
/// Same loss evaluated from answer logits; gradient on logits.
LossValue flip_loss_logits(std::span<const double> logits, std::size_t target, double eps_flip);

inline constexpr double kDefaultEpsFlip = 1e-6;

/// Inverts the hard mask, keeps q and theta, and reapplies the
/// minimum-retention rule.
RetentionState flip_mask(const RetentionState& state, std::span<const double> rho);

enum class LossKind { ce, band, robust };
std::string to_string(LossKind k);

struct LossMode {
  LossKind kind = LossKind::ce;
  bool flip_active = false;
  friend bool operator==(const LossMode&, const LossMode&) = default;
};

struct ModeSchedule {
  double p_ce = 0.8;
  double p_band = 0.1;
  double p_robust = 0.1;
  double p_flip = 0.1;
  void validate() const;
};

/// Draws the loss family for one batch plus an independent flip flag; ROBUST
/// batches never carry the flip term. Consumes exactly two uniforms per call.
LossMode select_mode(std::uint64_t step, std::mt19937_64& rng, const ModeSchedule& schedule);

}  // namespace tprune
