// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>

#include "tprune/decoder.hpp"
#include "tprune/its.hpp"
#include "tprune/volume.hpp"

namespace tprune {

struct ModelConfig {
  VolumeSpec volume{28, 28, 28, 7, 2};
  DecoderConfig decoder;
  std::size_t instruction_vocab = 8;
  std::size_t max_instruction = 4;
  std::size_t predictor_hidden = 16;
  double predictor_bias = 0.0;
  /// Inference-time pipeline: token scheduling on/off, centrality weights vs
  /// uniform instruction weights, and the retention temperature.
  bool its = true;
  bool self_affinity = true;
  double tau_ce = 0.2;

  void validate() const;
};

/// Decoder weights plus the threshold predictor; the unit of checkpointing.
struct Model {
  ModelConfig config;
  DecoderWeights decoder;
  ThresholdPredictor predictor;
};

Model init_model(const ModelConfig& cfg, std::uint64_t seed);
Model zeros_like(const Model& m);

template <class M, class F>
void for_each_model_param(M& m, F&& f) {
  for_each_param(m.decoder, f);
  for_each_param_predictor(m.predictor, f);
}

/// Directory layout: manifest.json plus one tensor blob per parameter.
void save_checkpoint(const Model& m, const std::string& dir);
Model load_checkpoint(const std::string& dir);

}  // namespace tprune
