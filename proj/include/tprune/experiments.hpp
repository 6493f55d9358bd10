// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "tprune/config.hpp"
#include "tprune/its.hpp"
#include "tprune/trainer.hpp"

namespace tprune {

struct GradCheckRow {
  std::string name;
  std::size_t trials = 0;
  double max_rel_err = 0.0;
};

/// Finite-difference checks of every differentiable primitive and of the
/// composed threshold path, `trials` random inputs each.
std::vector<GradCheckRow> gradient_suite(std::size_t trials, std::uint64_t seed, double h = 1e-5);
void write_grad_check_csv(const std::vector<GradCheckRow>& rows, double tolerance, std::ostream& out);

/// Volume of 7-voxel patches merged 2x2 in-plane with an 8x8 token grid per
/// depth slab; n_visual must be a positive multiple of 64.
VolumeSpec bench_volume(std::size_t n_visual);

struct BenchRow {
  std::size_t n_visual = 0;
  std::string config;      // "full" or "adaptive"
  double retention = 1.0;  // realized kept / N_v
  double median_ms = 0.0;
  double speedup = 1.0;    // full median / this median
};

/// Forward wall-clock of the same weights with scheduling off and on; the
/// median of `runs` interleaved timings per configuration.
std::vector<BenchRow> throughput_bench(const Model& model, std::size_t runs, std::uint64_t seed);
/// Same measurement with scheduling off in both arms.
double self_speedup(const Model& model, std::size_t runs, std::uint64_t seed);
void write_bench_csv(const std::vector<BenchRow>& rows, std::ostream& out);

/// Layer-wise multiply-accumulate model of one forward pass: full cost over
/// cost with `kept` visual tokens after the selection layer.
double flop_speedup(const DecoderConfig& cfg, std::size_t n_visual, std::size_t n_instruction, double kept);

/// Toggle names: its_sgp, self_affinity, robust_reg, flip_reg, and
/// layer=0 | layer=n/4 | layer=n/2 | layer=3n/4.
TrainConfig apply_toggle(TrainConfig cfg, const std::string& toggle);

struct AblationRow {
  std::string name;
  EvalRecord eval;
  double retained_tokens = 0.0;  // mean kept visual tokens at evaluation
  double train_steps_per_s = 0.0;
  double band_trigger_freq = 0.0;  // mean over HARD steps
  double final_loss = 0.0;
};

/// Mean band-trigger fraction over HARD-stage steps.
double band_trigger_frequency(const RunMetrics& m);

/// One matched-seed run for the full configuration followed by one per toggle.
std::vector<AblationRow> ablate(const TrainConfig& cfg, const std::vector<std::string>& toggles);
void write_ablation_csv(const std::vector<AblationRow>& rows, std::ostream& out);

/// Per-token dump of one scheduling pass for debugging.
void write_its_trace_csv(const ItsTrace& trace, const std::vector<TokenPosition>& positions, std::ostream& out);

}  // namespace tprune
