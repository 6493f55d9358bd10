// SPDX-License-Identifier: Apache-2.0
#include "tprune/synthetic.hpp"

#include <algorithm>
#include <numeric>

namespace tprune {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

void add_to_token(Tensor& volume, const VolumeSpec& spec, std::size_t token, double amount) {
  const auto cols = spec.grid_cols(), rows = spec.grid_rows();
  const auto gd = token / (rows * cols), gr = (token / cols) % rows, gc = token % cols;
  const auto p = spec.patch, edge = p * spec.stride;
  for (std::size_t z = gd * p; z < (gd + 1) * p; ++z)
    for (std::size_t y = gr * edge; y < (gr + 1) * edge; ++y)
      for (std::size_t x = gc * edge; x < (gc + 1) * edge; ++x)
        volume[(z * spec.height + y) * spec.width + x] += amount;
}

void zero_token(Tensor& volume, const VolumeSpec& spec, std::size_t token) {
  const auto cols = spec.grid_cols(), rows = spec.grid_rows();
  const auto gd = token / (rows * cols), gr = (token / cols) % rows, gc = token % cols;
  const auto p = spec.patch, edge = p * spec.stride;
  for (std::size_t z = gd * p; z < (gd + 1) * p; ++z)
    for (std::size_t y = gr * edge; y < (gr + 1) * edge; ++y)
      for (std::size_t x = gc * edge; x < (gc + 1) * edge; ++x) volume[(z * spec.height + y) * spec.width + x] = 0.0;
}

std::size_t uniform_index(std::mt19937_64& rng, std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

}  // namespace

std::string to_string(TaskKind k) {
  switch (k) {
    case TaskKind::existence: return "existence";
    case TaskKind::count: return "count";
    case TaskKind::compare: return "compare";
  }
  return "?";
}

TaskKind task_from_string(const std::string& s) {
  if (s == "existence") return TaskKind::existence;
  if (s == "count") return TaskKind::count;
  if (s == "compare") return TaskKind::compare;
  throw ConfigError("unknown task kind '" + s + "'");
}

std::vector<std::size_t> organ_region(const VolumeSpec& spec, std::size_t organ) {
  spec.validate();
  if (organ >= kOrgans) throw ConfigError("organ index out of range");
  const auto gd = spec.grid_depth(), gr = spec.grid_rows(), gc = spec.grid_cols();
  if (gd < kOrgans) throw ConfigError("planted region larger than grid: need at least two depth slabs");
  const auto d0 = organ * gd / kOrgans, d1 = (organ + 1) * gd / kOrgans;
  std::size_t r0 = 0, r1 = gr;
  if (gr >= kOrgans) {
    r0 = organ * gr / kOrgans;
    r1 = (organ + 1) * gr / kOrgans;
  }
  std::vector<std::size_t> out;
  for (auto d = d0; d < d1; ++d)
    for (auto r = r0; r < r1; ++r)
      for (std::size_t c = 0; c < gc; ++c) out.push_back((d * gr + r) * gc + c);
  return out;
}

SyntheticCase generate_case(std::uint64_t seed, const VolumeSpec& spec, TaskKind task, std::size_t organ,
                            const CaseOptions& opts) {
  spec.validate();
  if (organ >= kOrgans) throw ConfigError("organ index out of range");
  std::mt19937_64 rng(splitmix64(seed));
  std::normal_distribution<double> noise(0.0, 1.0);
  Tensor volume({spec.depth, spec.height, spec.width});
  for (auto& v : volume.data()) v = opts.noise * noise(rng);

  std::array<std::size_t, kOrgans> answers{};
  for (std::size_t o = 0; o < kOrgans; ++o) {
    const auto region = organ_region(spec, o);
    switch (task) {
      case TaskKind::existence: {
        // The whole block carries a weak shift; no single token decides the answer.
        const bool present = std::bernoulli_distribution(0.5)(rng);
        if (present && opts.amplitude != 0.0)
          for (auto j : region) add_to_token(volume, spec, j, opts.amplitude);
        answers[o] = (present && opts.amplitude != 0.0) ? kPresent : kAbsent;
        break;
      }
      case TaskKind::count: {
        const auto k = uniform_index(rng, region.size() + 1);
        auto order = region;
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t i = 0; i < k; ++i) add_to_token(volume, spec, order[i], opts.amplitude);
        answers[o] = opts.amplitude != 0.0 ? k : 0;
        break;
      }
      case TaskKind::compare: {
        const bool right = std::bernoulli_distribution(0.5)(rng);
        const auto gc = spec.grid_cols();
        for (auto j : region) {
          // Split by column; single-column grids split by position in the region.
          const bool is_right = gc >= 2 ? (j % gc) >= gc / 2
                                        : (std::find(region.begin(), region.end(), j) - region.begin()) >=
                                              static_cast<std::ptrdiff_t>(region.size() / 2);
          add_to_token(volume, spec, j, opts.amplitude * (is_right == right ? 1.0 : 0.4));
        }
        answers[o] = right ? kRight : kLeft;
        break;
      }
    }
  }

  SyntheticCase c;
  c.volume = std::move(volume);
  c.task = task;
  c.organ = organ;
  c.answer = answers[organ];
  c.instruction = {vocab::kTaskBase + static_cast<std::uint32_t>(task),
                   vocab::kOrganBase + static_cast<std::uint32_t>(organ), vocab::kQuery};
  c.planted.assign(spec.n_visual(), false);
  for (auto j : organ_region(spec, organ)) c.planted[j] = true;
  return c;
}

SyntheticCase generate_case(std::uint64_t seed, const VolumeSpec& spec, TaskKind task, const CaseOptions& opts) {
  const auto organ = static_cast<std::size_t>(splitmix64(seed ^ 0x6f7267616eull) % kOrgans);
  return generate_case(seed, spec, task, organ, opts);
}

Tensor perturb_volume(const Tensor& volume, const VolumeSpec& spec, std::mt19937_64& rng) {
  Tensor out = volume;
  if (std::bernoulli_distribution(0.5)(rng)) {
    std::vector<std::size_t> tokens(spec.n_visual());
    std::iota(tokens.begin(), tokens.end(), 0);
    std::shuffle(tokens.begin(), tokens.end(), rng);
    for (std::size_t i = 0; i < tokens.size() / 2; ++i) zero_token(out, spec, tokens[i]);
  } else {
    std::vector<std::size_t> order(spec.depth);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    const auto plane = spec.height * spec.width;
    for (std::size_t z = 0; z < spec.depth; ++z) {
      std::copy_n(volume.data().begin() + static_cast<std::ptrdiff_t>(order[z] * plane), plane,
                  out.data().begin() + static_cast<std::ptrdiff_t>(z * plane));
    }
  }
  return out;
}

std::uint64_t train_case_seed(std::uint64_t run_seed, std::uint64_t step, std::uint64_t index) {
  return splitmix64(splitmix64(run_seed) ^ splitmix64(step * 0x10001ull + index)) & ~(1ull << 63);
}

std::uint64_t eval_case_seed(std::uint64_t eval_seed, std::uint64_t index) {
  return splitmix64(eval_seed * 0x9e37ull + index) | (1ull << 63);
}

ConditionedKeys conditioned_keys(std::uint64_t seed, std::size_t n_instr, std::size_t n_vis, std::size_t width) {
  if (width < 2 || n_vis < 2 || n_instr < 1) throw ConfigError("conditioned_keys needs width >= 2 and two tokens");
  std::mt19937_64 rng(splitmix64(seed));
  std::normal_distribution<double> small(0.0, 0.1);
  ConditionedKeys ck;
  ck.q_first = Tensor({n_instr, width});
  ck.q_second = Tensor({n_instr, width});
  ck.k_instr = Tensor({n_instr, width});
  ck.k_vis = Tensor({n_vis, width});
  for (std::size_t t = 0; t < n_instr; ++t)
    for (std::size_t c = 0; c < width; ++c) {
      ck.q_first.at(t, c) = (c == 0 ? 1.0 : 0.0) + small(rng);
      ck.q_second.at(t, c) = (c == 1 ? 1.0 : 0.0) + small(rng);
      ck.k_instr.at(t, c) = 0.5 + small(rng);
    }
  for (auto& v : ck.k_vis.data()) v = small(rng);
  ck.a = uniform_index(rng, n_vis);
  do {
    ck.b = uniform_index(rng, n_vis);
  } while (ck.b == ck.a);
  ck.k_vis.at(ck.a, 0) += 2.0;
  ck.k_vis.at(ck.b, 1) += 2.0;
  return ck;
}

}  // namespace tprune
