// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "tprune/config.hpp"
#include "tprune/experiments.hpp"
#include "tprune/trainer.hpp"

namespace fs = std::filesystem;
using namespace tprune;
using doctest::Approx;

namespace {

TrainConfig tiny_config(std::size_t steps) {
  TrainConfig cfg;
  cfg.model.decoder.d_model = 16;
  cfg.model.decoder.n_heads = 2;
  cfg.model.predictor_hidden = 8;
  cfg.total_steps = steps;
  cfg.batch_size = 2;
  cfg.eval_cases = 10;
  return cfg;
}

std::map<std::string, std::string> read_dir(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    std::ifstream in(e.path(), std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    files[e.path().filename().string()] = ss.str();
  }
  return files;
}

fs::path scratch_dir(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("tprune_test_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST_CASE("generated cases are deterministic and instruction-dependent") {
  const VolumeSpec spec{28, 28, 28, 7, 2};
  for (auto task : {TaskKind::existence, TaskKind::count, TaskKind::compare}) {
    const auto a = generate_case(42, spec, task, 0);
    const auto b = generate_case(42, spec, task, 0);
    CHECK(a.volume == b.volume);
    CHECK(a.answer == b.answer);
    const auto other = generate_case(42, spec, task, 1);
    CHECK(other.volume == a.volume);
    std::size_t overlap = 0, planted = 0;
    for (std::size_t j = 0; j < spec.n_visual(); ++j) {
      overlap += a.planted[j] && other.planted[j];
      planted += a.planted[j];
    }
    CHECK(overlap == 0);
    CHECK(planted >= 1);
    CHECK(a.instruction.size() == vocab::kInstructionLength);
    CHECK(a.instruction[1] != other.instruction[1]);
  }
  CHECK(organ_region(spec, 0).size() == 4);
  CHECK_THROWS_AS(generate_case(1, spec, TaskKind::existence, 2), ConfigError);
}

TEST_CASE("zero amplitude means absent") {
  const VolumeSpec spec{28, 28, 28, 7, 2};
  for (std::uint64_t s = 0; s < 50; ++s)
    CHECK(generate_case(s, spec, TaskKind::existence, CaseOptions{0.0, 1.0}).answer == kAbsent);
}

TEST_CASE("the answer depends only on the queried region") {
  // Re-drawing noise outside the planted region never changes the label.
  const VolumeSpec spec{28, 28, 28, 7, 2};
  std::size_t present = 0;
  for (std::uint64_t s = 0; s < 200; ++s) {
    const auto c = generate_case(s, spec, TaskKind::existence, s % 2, CaseOptions{1.0, 0.0});
    const auto patches = extract_patches(c.volume, spec);
    bool lit = false;
    for (std::size_t j = 0; j < spec.n_visual(); ++j)
      if (c.planted[j])
        for (double v : patches.row(j)) lit = lit || v != 0.0;
    CHECK(lit == (c.answer == kPresent));
    present += c.answer == kPresent;
  }
  CHECK(present > 60);
  CHECK(present < 140);
}

TEST_CASE("train and eval seeds never collide") {
  std::set<std::uint64_t> train;
  for (std::uint64_t step = 0; step < 100; ++step)
    for (std::uint64_t i = 0; i < 8; ++i) {
      const auto s = train_case_seed(3, step, i);
      CHECK(s < (1ull << 63));
      train.insert(s);
    }
  for (std::uint64_t i = 0; i < 1000; ++i) CHECK(eval_case_seed(7, i) >= (1ull << 63));
  CHECK(train.size() == 800);
}

TEST_CASE("perturbed volumes keep their shape") {
  const VolumeSpec spec{28, 28, 28, 7, 2};
  std::mt19937_64 rng(1);
  const auto c = generate_case(5, spec, TaskKind::existence);
  for (int i = 0; i < 10; ++i) {
    const auto p = perturb_volume(c.volume, spec, rng);
    CHECK(p.shape() == c.volume.shape());
    CHECK(p != c.volume);
  }
}

TEST_CASE("coverage and dissimilarity set arithmetic") {
  const std::vector<bool> planted{false, true, true, false};
  CHECK(planted_coverage({0, 1}, planted) == 0.5);
  CHECK(jaccard_dissimilarity({0, 1}, {1, 2}) == Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(jaccard_dissimilarity({3, 1}, {1, 3}) == 0.0);
  CHECK(jaccard_dissimilarity({}, {}) == 0.0);
  CHECK_THROWS(planted_coverage({0}, std::vector<bool>{false, false}));
}

TEST_CASE("config documents are strict and round-trip") {
  auto cfg = tiny_config(30);
  cfg.sgp.score = ProxyScore::loss_increase;
  cfg.flip_weight = 0.5;
  const auto j = to_json(cfg);
  const auto back = train_config_from_json(j);
  CHECK(to_json(back) == j);

  auto unknown = j;
  unknown["learning_rate"] = 0.1;
  CHECK_THROWS_AS(train_config_from_json(unknown), ConfigError);
  auto nested = j;
  nested["model"]["decoder"]["depth"] = 3;
  CHECK_THROWS_AS(train_config_from_json(nested), ConfigError);
  auto bad_score = j;
  bad_score["sgp"]["score"] = "magnitude";
  CHECK_THROWS_AS(train_config_from_json(bad_score), ConfigError);
  auto bad_band = j;
  bad_band["band"]["r_min"] = 0.9;
  CHECK_THROWS_AS(train_config_from_json(bad_band), ConfigError);

  const auto partial = train_config_from_json(nlohmann::json{{"total_steps", 5}});
  CHECK(partial.total_steps == 5);
  CHECK(partial.lr == TrainConfig{}.lr);
  CHECK(partial.warmup1() + partial.warmup2() <= 5);
}

TEST_CASE("checkpoints round-trip bit-exactly") {
  const auto m = init_model(tiny_config(0).model, 9);
  const auto dir = scratch_dir("ckpt");
  save_checkpoint(m, dir.string());
  const auto back = load_checkpoint(dir.string());
  std::vector<Tensor> a, b;
  for_each_model_param(m, [&](const std::string&, const Tensor& t) { a.push_back(t); });
  for_each_model_param(back, [&](const std::string&, const Tensor& t) { b.push_back(t); });
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
  CHECK(to_json(back.config) == to_json(m.config));
  CHECK_THROWS(load_checkpoint((dir / "missing").string()));
  fs::remove_all(dir);
}

TEST_CASE("zero steps returns the initial model") {
  const auto cfg = tiny_config(0);
  const auto r = train(cfg);
  CHECK(r.metrics.steps.empty());
  const auto init = init_model(cfg.model, cfg.seed);
  CHECK(r.model.decoder.head_w == init.decoder.head_w);
  CHECK(r.model.predictor.w1 == init.predictor.w1);
}

TEST_CASE("training is deterministic") {
  const auto cfg = tiny_config(30);
  std::string csv[2];
  std::map<std::string, std::string> ckpt[2];
  for (int run = 0; run < 2; ++run) {
    const auto r = train(cfg);
    std::ostringstream out;
    write_steps_csv(r.metrics, out);
    csv[run] = out.str();
    const auto dir = scratch_dir("det" + std::to_string(run));
    save_checkpoint(r.model, dir.string());
    ckpt[run] = read_dir(dir);
    fs::remove_all(dir);
  }
  CHECK(csv[0] == csv[1]);
  CHECK(ckpt[0] == ckpt[1]);
  CHECK(csv[0].rfind("step,stage,mode,flip_active,lr,loss,retention,mean_q,band_trigger,kept_tokens\n", 0) == 0);
}

TEST_CASE("warmup stages never drop a token") {
  auto cfg = tiny_config(40);
  const auto r = train(cfg);
  const auto nv = static_cast<double>(cfg.model.volume.n_visual());
  std::size_t full = 0, soft = 0, hard = 0;
  for (const auto& s : r.metrics.steps) {
    if (s.stage == Stage::hard) {
      ++hard;
      continue;
    }
    (s.stage == Stage::full ? full : soft) += 1;
    CHECK(s.retention == 1.0);
    CHECK(s.kept_tokens == nv);
    CHECK(!s.mode.flip_active);
  }
  CHECK(full == cfg.warmup1());
  CHECK(soft == cfg.warmup2());
  CHECK(hard == 40 - full - soft);
}

TEST_CASE("a diverging run reports its last steps") {
  auto cfg = tiny_config(50);
  cfg.lr = 1e8;
  cfg.grad_clip = 0.0;
  try {
    train(cfg);
    FAIL("expected divergence");
  } catch (const DivergenceError& e) {
    std::istringstream in(e.recent_steps_csv());
    std::string line;
    int n = 0;
    while (std::getline(in, line)) ++n;
    CHECK(n >= 2);
    CHECK(n <= 12);
  }
}

TEST_CASE("flop model speedup") {
  DecoderConfig cfg;
  CHECK(flop_speedup(cfg, 2048, 3, 2048) == Approx(1.0));
  double prev = 0.0;
  for (std::size_t nv : {256, 512, 1024, 2048, 4096}) {
    const double s = flop_speedup(cfg, nv, 3, 0.3 * static_cast<double>(nv));
    CHECK(s > 1.0);
    CHECK(s >= prev);
    prev = s;
  }
  CHECK(flop_speedup(cfg, 2048, 3, 0.3 * 2048) > 1.5);
  CHECK(bench_volume(2048).n_visual() == 2048);
  CHECK_THROWS_AS(bench_volume(100), ConfigError);
}

TEST_CASE("ablation toggles") {
  const TrainConfig base;
  CHECK(!apply_toggle(base, "its_sgp").model.its);
  CHECK(!apply_toggle(base, "self_affinity").model.self_affinity);
  CHECK(!apply_toggle(base, "robust_reg").robust_reg);
  CHECK(!apply_toggle(base, "flip_reg").flip_reg);
  CHECK(apply_toggle(base, "layer=0").model.decoder.selection_layer == 0);
  CHECK(apply_toggle(base, "layer=n/4").model.decoder.selection_layer == 1);
  CHECK(apply_toggle(base, "layer=n/2").model.decoder.selection_layer == 2);
  CHECK(apply_toggle(base, "layer=3n/4").model.decoder.selection_layer == 3);
  CHECK_THROWS_AS(apply_toggle(base, "dropout"), ConfigError);
}

TEST_CASE("ablation with no toggles matches a plain run") {
  const auto cfg = tiny_config(20);
  const auto rows = ablate(cfg, {});
  REQUIRE(rows.size() == 1);
  const auto r = train(cfg);
  const auto e = evaluate(r.model, cfg.task, cfg.data, cfg.eval_cases, cfg.eval_seed);
  CHECK(rows[0].eval.accuracy == e.accuracy);
  CHECK(rows[0].eval.coverage == e.coverage);
  CHECK(rows[0].band_trigger_freq == band_trigger_frequency(r.metrics));
}

TEST_CASE("band trigger frequency averages HARD steps only") {
  RunMetrics m;
  StepRecord s;
  s.stage = Stage::soft;
  s.band_trigger = 1.0;
  m.steps.push_back(s);
  s.stage = Stage::hard;
  s.band_trigger = 0.5;
  m.steps.push_back(s);
  s.band_trigger = 0.0;
  m.steps.push_back(s);
  CHECK(band_trigger_frequency(m) == 0.25);
}

TEST_CASE("evaluation with identical retained sets has zero dissimilarity") {
  // Scheduling off: both instructions keep every token.
  auto cfg = tiny_config(0);
  cfg.model.its = false;
  const auto m = init_model(cfg.model, 1);
  const auto e = evaluate(m, TaskKind::existence, {}, 20, 3);
  CHECK(e.retention == 1.0);
  CHECK(e.coverage == 1.0);
  CHECK(e.jaccard == 0.0);
  CHECK(e.accuracy >= 0.0);
}
