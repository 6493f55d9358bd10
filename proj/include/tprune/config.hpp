// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>

#include <json.hpp>

#include "tprune/model.hpp"
#include "tprune/objectives.hpp"
#include "tprune/sgp.hpp"
#include "tprune/synthetic.hpp"

namespace tprune {

/// Model used by training runs: selection right after the embedding, no
/// normalization. At deeper layers the causal mixing spreads the planted signal
/// onto neighbouring tokens and the schedule no longer has to find it.
ModelConfig default_train_model();

struct TrainConfig {
  ModelConfig model = default_train_model();
  std::uint64_t seed = 1;
  TaskKind task = TaskKind::existence;
  CaseOptions data{.amplitude = 0.15, .noise = 1.0};

  std::size_t total_steps = 1500;
  // Negative values resolve to 10% and 20% of total_steps.
  std::int64_t warmup1_steps = -1;
  std::int64_t warmup2_steps = -1;
  std::size_t batch_size = 8;

  double lr = 0.1;
  double lr_min = 0.0;
  double grad_clip = 1.0;  // global-norm clip, 0 disables

  SgpConfig sgp{.score = ProxyScore::loss_increase};
  BandConfig band;
  ModeSchedule modes;
  double eps_flip = kDefaultEpsFlip;
  double flip_weight = 1.0;
  bool band_with_ce = false;  // BAND batches also carry the CE term
  bool robust_reg = true;
  bool flip_reg = true;

  std::size_t eval_cases = 100;
  std::uint64_t eval_seed = 7;

  void validate() const;
  std::size_t warmup1() const;
  std::size_t warmup2() const;
};

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

nlohmann::json to_json(const TrainConfig& c);
/// Keys absent from the document keep their defaults; unknown keys are a
/// configuration error.
TrainConfig train_config_from_json(const nlohmann::json& j);
TrainConfig load_train_config(const std::string& path);

std::string version_string();

}  // namespace tprune
