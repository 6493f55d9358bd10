// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "tprune/tensor.hpp"
#include "tprune/volume.hpp"

namespace tprune {

enum class TaskKind { existence, count, compare };
std::string to_string(TaskKind k);
TaskKind task_from_string(const std::string& s);

/// Instruction token ids: [task, organ, query].
namespace vocab {
inline constexpr std::uint32_t kTaskBase = 0;   // 0..2 task kinds
inline constexpr std::uint32_t kOrganBase = 3;  // 3..4 organs
inline constexpr std::uint32_t kQuery = 5;
inline constexpr std::size_t kSize = 8;
inline constexpr std::size_t kInstructionLength = 3;
}  // namespace vocab

inline constexpr std::size_t kOrgans = 2;

/// Answer classes.
inline constexpr std::size_t kAbsent = 0;
inline constexpr std::size_t kPresent = 1;
inline constexpr std::size_t kLeft = 0;
inline constexpr std::size_t kRight = 1;

struct CaseOptions {
  double amplitude = 1.0;
  double noise = 1.0;
};

struct SyntheticCase {
  Tensor volume;
  std::vector<std::uint32_t> instruction;
  std::size_t answer = 0;
  std::size_t organ = 0;
  TaskKind task = TaskKind::existence;
  std::vector<bool> planted;  // per visual token
};

/// Fixed token region of an organ: organ o covers the o-th depth half and, when
/// the grid has at least two rows, the o-th row half. Regions never overlap.
std::vector<std::size_t> organ_region(const VolumeSpec& spec, std::size_t organ);

/// The volume depends on (seed, spec, task, options) only; the organ picks the
/// queried region, so two organs on one seed share a volume.
SyntheticCase generate_case(std::uint64_t seed, const VolumeSpec& spec, TaskKind task, std::size_t organ,
                            const CaseOptions& opts = {});
/// Organ drawn from the seed.
SyntheticCase generate_case(std::uint64_t seed, const VolumeSpec& spec, TaskKind task, const CaseOptions& opts = {});

/// Zeroes a random half of the token blocks or shuffles voxel slices along
/// depth, chosen uniformly.
Tensor perturb_volume(const Tensor& volume, const VolumeSpec& spec, std::mt19937_64& rng);

/// Training seeds live below 2^63, evaluation seeds at or above it.
std::uint64_t train_case_seed(std::uint64_t run_seed, std::uint64_t step, std::uint64_t index);
std::uint64_t eval_case_seed(std::uint64_t eval_seed, std::uint64_t index);

/// Two instruction query sets over shared visual keys such that visual token
/// `a` has the highest saliency under the first and token `b` under the second.
struct ConditionedKeys {
  Tensor q_first, q_second;  // [N_t, width]
  Tensor k_instr;            // [N_t, width]
  Tensor k_vis;              // [N_v, width]
  std::size_t a = 0, b = 0;
};
ConditionedKeys conditioned_keys(std::uint64_t seed, std::size_t n_instr, std::size_t n_vis, std::size_t width);

}  // namespace tprune
