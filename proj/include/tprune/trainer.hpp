// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <iosfwd>
#include <random>
#include <string>
#include <vector>

#include "tprune/config.hpp"
#include "tprune/model.hpp"
#include "tprune/synthetic.hpp"

namespace tprune {

/// FULL keeps every token untouched, SOFT multiplies visual rows by q, HARD
/// compresses at the selection layer and trains q through the surrogate.
enum class Stage { full, soft, hard };
std::string to_string(Stage s);

struct Schedule {
  std::size_t warmup1_steps = 0;
  std::size_t warmup2_steps = 0;
  std::size_t total_steps = 0;

  Stage stage(std::size_t step) const;
};
Schedule make_schedule(const TrainConfig& cfg);

struct StepRecord {
  std::size_t step = 0;
  Stage stage = Stage::full;
  LossMode mode;
  double lr = 0.0;
  double loss = 0.0;
  double retention = 1.0;    // kept / N_v, batch mean
  double mean_q = 1.0;       // batch mean of r = mean(q)
  double band_trigger = 0.0; // fraction of samples whose r left [r_min, r_max]
  double kept_tokens = 0.0;  // batch mean
};

struct EvalRecord {
  std::size_t cases = 0;
  double accuracy = 0.0;
  double retention = 0.0;
  double coverage = 0.0;
  double jaccard = 0.0;
  double tokens_per_s = 0.0;
};

/// Append-only.
struct RunMetrics {
  std::vector<StepRecord> steps;
  std::vector<EvalRecord> evals;
};

void write_steps_csv(const RunMetrics& m, std::ostream& out);
void write_evals_csv(const RunMetrics& m, std::ostream& out);

/// Thrown when a loss or gradient turns non-finite; carries the last ten step
/// records as CSV.
class DivergenceError : public EvaluationError {
 public:
  DivergenceError(const std::string& what, std::string recent) : EvaluationError(what), recent_(std::move(recent)) {}
  const std::string& recent_steps_csv() const { return recent_; }

 private:
  std::string recent_;
};

struct SampleResult {
  double loss = 0.0;
  std::size_t kept = 0;
  double mean_q = 1.0;
  bool band_active = false;
};

/// Forward and backward of one training case; parameter gradients accumulate
/// into `grads`.
SampleResult train_sample(const Model& model, const TrainConfig& cfg, Stage stage, const LossMode& mode,
                          const SyntheticCase& c, std::mt19937_64& rng, Model& grads);

struct TrainResult {
  Model model;
  RunMetrics metrics;
};

using StepCallback = std::function<void(const StepRecord&)>;
TrainResult train(const TrainConfig& cfg, const StepCallback& on_step = {});

/// Deployed pipeline: hard selection at the selection layer when ITS is on.
struct Inference {
  std::vector<double> logits;
  std::vector<std::size_t> keep;
  double mean_q = 1.0;
  OpCounter ops;
};
Inference infer(const Model& model, const Tensor& volume, const std::vector<std::uint32_t>& instruction);

/// |retained ∩ planted| / |planted|
double planted_coverage(const std::vector<std::size_t>& retained, const std::vector<bool>& planted);
/// 1 - |A ∩ B| / |A ∪ B|; zero when both sets are empty.
double jaccard_dissimilarity(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b);

/// Each eval seed is answered under both organ instructions on the same
/// volume; accuracy, retention and coverage average over all 2N queries and
/// dissimilarity over the N pairs.
EvalRecord evaluate(const Model& model, TaskKind task, const CaseOptions& opts, std::size_t n_cases,
                    std::uint64_t seed);

}  // namespace tprune
