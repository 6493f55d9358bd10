// SPDX-License-Identifier: Apache-2.0
// Command-line runner: train, eval, grad-check, bench, ablate.
#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "tprune/config.hpp"
#include "tprune/experiments.hpp"
#include "tprune/trainer.hpp"

namespace fs = std::filesystem;
using namespace tprune;

namespace {

std::ofstream open_out(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw ConfigError("cannot write '" + p.string() + "'");
  return out;
}

void write_manifest(const fs::path& dir, const TrainConfig& cfg) {
  nlohmann::json m{{"version", version_string()}, {"config", to_json(cfg)}};
  open_out(dir / "run_manifest.json") << m.dump(2) << '\n';
}

int run_train(const std::string& config_path, const std::string& out_dir, bool quiet) {
  const auto cfg = config_path.empty() ? TrainConfig{} : load_train_config(config_path);
  const fs::path dir(out_dir);
  fs::create_directories(dir);
  write_manifest(dir, cfg);
  const auto log_every = std::max<std::size_t>(1, cfg.total_steps / 20);
  TrainResult result;
  try {
    result = train(cfg, [&](const StepRecord& r) {
      if (!quiet && (r.step % log_every == 0 || r.step + 1 == cfg.total_steps)) {
        std::cerr << "step " << r.step << ' ' << to_string(r.stage) << " loss " << r.loss << " retention "
                  << r.retention << '\n';
      }
    });
  } catch (const DivergenceError& e) {
    open_out(dir / "divergence.csv") << e.recent_steps_csv();
    std::cerr << e.what() << "; last steps written to " << (dir / "divergence.csv").string() << '\n';
    return 3;
  }
  save_checkpoint(result.model, (dir / "checkpoint").string());
  result.metrics.evals.push_back(evaluate(result.model, cfg.task, cfg.data, cfg.eval_cases, cfg.eval_seed));
  {
    auto out = open_out(dir / "metrics.csv");
    write_steps_csv(result.metrics, out);
  }
  {
    auto out = open_out(dir / "eval.csv");
    write_evals_csv(result.metrics, out);
  }
  const auto& e = result.metrics.evals.back();
  std::cout << "accuracy " << e.accuracy << " retention " << e.retention << " coverage " << e.coverage
            << " jaccard " << e.jaccard << '\n';
  return 0;
}

int run_eval(const std::string& ckpt, std::size_t cases, std::uint64_t seed, const std::string& task,
             const CaseOptions& data, const std::string& dump) {
  const auto model = load_checkpoint(ckpt);
  RunMetrics m;
  m.evals.push_back(evaluate(model, task_from_string(task), data, cases, seed));
  write_evals_csv(m, std::cout);
  if (!dump.empty()) {
    const auto c = generate_case(eval_case_seed(seed, 0), model.config.volume, task_from_string(task), data);
    const auto seq = embed_sequence(model.decoder, model.config.volume, c.volume, c.instruction, nullptr);
    ItsTrace trace;
    const SelectionHook hook = [&](const SelectionView& v) -> std::optional<Selection> {
      trace = its_forward(v.q_instr, v.k_instr, v.k_vis, v.alpha, model.predictor, model.config.tau_ce,
                          !model.config.self_affinity);
      return std::nullopt;
    };
    decoder_forward(model.decoder, model.config.decoder, seq, hook);
    auto out = open_out(dump);
    write_its_trace_csv(trace, seq.positions, out);
  }
  return 0;
}

int run_grad_check(std::size_t trials, std::uint64_t seed, const std::string& out_path) {
  constexpr double kTolerance = 1e-4;
  const auto rows = gradient_suite(trials, seed);
  if (out_path.empty()) {
    write_grad_check_csv(rows, kTolerance, std::cout);
  } else {
    auto out = open_out(out_path);
    write_grad_check_csv(rows, kTolerance, out);
  }
  for (const auto& r : rows)
    if (!(r.max_rel_err < kTolerance)) return 1;
  return 0;
}

int run_bench(std::size_t nv, std::size_t runs, double bias, std::uint64_t seed, const std::string& out_path) {
  ModelConfig mc;
  mc.volume = bench_volume(nv);
  mc.predictor_bias = bias;
  const auto model = init_model(mc, seed);
  const auto rows = throughput_bench(model, runs, seed);
  if (out_path.empty()) {
    write_bench_csv(rows, std::cout);
  } else {
    auto out = open_out(out_path);
    write_bench_csv(rows, out);
  }
  return 0;
}

int run_ablate(const std::string& config_path, const std::vector<std::string>& toggles, const std::string& out_path) {
  const auto cfg = config_path.empty() ? TrainConfig{} : load_train_config(config_path);
  const auto rows = ablate(cfg, toggles);
  if (out_path.empty()) {
    write_ablation_csv(rows, std::cout);
  } else {
    auto out = open_out(out_path);
    write_ablation_csv(rows, out);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Instruction-conditioned token pruning toy trainer"};
  app.set_version_flag("--version", version_string());
  app.require_subcommand(1);

  std::string config_path, out_dir = "run";
  bool quiet = false;
  auto* train_cmd = app.add_subcommand("train", "train a model and write metrics, checkpoint and manifest");
  train_cmd->add_option("--config", config_path, "JSON file mirroring TrainConfig")->check(CLI::ExistingFile);
  train_cmd->add_option("--out", out_dir, "output directory");
  train_cmd->add_flag("--quiet", quiet, "suppress progress lines");

  std::string ckpt, task = "existence", dump;
  std::size_t cases = 100;
  std::uint64_t seed = 7;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on held-out seeds");
  eval_cmd->add_option("--ckpt", ckpt, "checkpoint directory")->required();
  eval_cmd->add_option("--cases", cases, "number of paired eval volumes");
  eval_cmd->add_option("--seed", seed, "eval seed");
  eval_cmd->add_option("--task", task, "existence | count | compare");
  CaseOptions eval_data = TrainConfig{}.data;
  eval_cmd->add_option("--amplitude", eval_data.amplitude, "planted signal amplitude (training default if omitted)");
  eval_cmd->add_option("--noise", eval_data.noise, "voxel noise std");
  eval_cmd->add_option("--dump-trace", dump, "write the per-token scheduling trace of the first case");

  std::size_t trials = 100;
  std::string grad_out;
  std::uint64_t grad_seed = 1;
  auto* grad_cmd = app.add_subcommand("grad-check", "finite-difference checks of every primitive");
  grad_cmd->add_option("--trials", trials, "random trials per primitive");
  grad_cmd->add_option("--seed", grad_seed, "seed");
  grad_cmd->add_option("--out", grad_out, "CSV report path (stdout if omitted)");

  std::size_t nv = 2048, runs = 20;
  double bias = 0.8;
  std::uint64_t bench_seed = 1;
  std::string bench_out;
  auto* bench_cmd = app.add_subcommand("bench", "forward throughput at full vs adaptive retention");
  bench_cmd->add_option("--nv", nv, "visual tokens (multiple of 64)");
  bench_cmd->add_option("--runs", runs, "timed runs per configuration");
  bench_cmd->add_option("--bias", bias, "threshold predictor output bias");
  bench_cmd->add_option("--seed", bench_seed, "seed");
  bench_cmd->add_option("--out", bench_out, "CSV path (stdout if omitted)");

  std::vector<std::string> toggles;
  std::string ablate_config, ablate_out;
  auto* ablate_cmd = app.add_subcommand("ablate", "matched-seed runs with components disabled");
  ablate_cmd->add_option("--toggle", toggles,
                         "its_sgp | self_affinity | robust_reg | flip_reg | layer=0 | layer=n/4 | layer=n/2 | "
                         "layer=3n/4");
  ablate_cmd->add_option("--config", ablate_config, "base TrainConfig JSON")->check(CLI::ExistingFile);
  ablate_cmd->add_option("--out", ablate_out, "CSV path (stdout if omitted)");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*train_cmd) return run_train(config_path, out_dir, quiet);
    if (*eval_cmd) return run_eval(ckpt, cases, seed, task, eval_data, dump);
    if (*grad_cmd) return run_grad_check(trials, grad_seed, grad_out);
    if (*bench_cmd) return run_bench(nv, runs, bias, bench_seed, bench_out);
    if (*ablate_cmd) return run_ablate(ablate_config, toggles, ablate_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
