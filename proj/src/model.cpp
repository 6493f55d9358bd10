// SPDX-License-Identifier: Apache-2.0
#include "tprune/model.hpp"

#include <filesystem>
#include <fstream>
#include <map>

#include "tprune/config.hpp"

namespace tprune {

namespace fs = std::filesystem;
using nlohmann::json;

void ModelConfig::validate() const {
  volume.validate();
  decoder.validate();
  if (instruction_vocab < vocab::kSize) throw ConfigError("instruction_vocab too small for the synthetic tasks");
  if (max_instruction < vocab::kInstructionLength) throw ConfigError("max_instruction shorter than instructions");
  if (predictor_hidden == 0) throw ConfigError("predictor_hidden must be positive");
  if (!(tau_ce > 0)) throw ConfigError("tau_ce must be positive");
}

Model init_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Model m;
  m.config = cfg;
  m.decoder = init_decoder(cfg.decoder, cfg.volume, cfg.instruction_vocab, cfg.max_instruction, seed);
  m.predictor = init_predictor(cfg.predictor_hidden, seed ^ 0x5bd1e995ull, cfg.predictor_bias);
  return m;
}

Model zeros_like(const Model& m) {
  return {m.config, zeros_like(m.decoder), zeros_like(m.predictor)};
}

void save_checkpoint(const Model& m, const std::string& dir) {
  fs::create_directories(dir);
  json tensors = json::array();
  for_each_model_param(m, [&](const std::string& name, const Tensor& t) {
    const auto file = name + ".bin";
    save_tensor((fs::path(dir) / file).string(), t);
    tensors.push_back({{"name", name}, {"shape", t.shape()}, {"file", file}});
  });
  const json manifest{{"format", "tprune-checkpoint"},
                      {"format_version", 1},
                      {"config", to_json(m.config)},
                      {"tensors", tensors}};
  std::ofstream out(fs::path(dir) / "manifest.json", std::ios::binary);
  if (!out) throw ConfigError("cannot write checkpoint manifest in '" + dir + "'");
  out << manifest.dump(2) << '\n';
}

Model load_checkpoint(const std::string& dir) {
  std::ifstream in(fs::path(dir) / "manifest.json");
  if (!in) throw ConfigError("no checkpoint manifest in '" + dir + "'");
  json manifest;
  try {
    manifest = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("checkpoint manifest is not valid JSON: ") + e.what());
  }
  if (manifest.value("format", "") != "tprune-checkpoint") throw ConfigError("not a checkpoint manifest");
  Model m = init_model(model_config_from_json(manifest.at("config")), 0);
  std::map<std::string, std::string> files;
  for (const auto& t : manifest.at("tensors")) files[t.at("name").get<std::string>()] = t.at("file");
  for_each_model_param(m, [&](const std::string& name, Tensor& t) {
    const auto it = files.find(name);
    if (it == files.end()) throw ConfigError("checkpoint is missing tensor '" + name + "'");
    Tensor loaded = load_tensor((fs::path(dir) / it->second).string());
    if (loaded.shape() != t.shape()) {
      throw ShapeError("checkpoint tensor '" + name + "' has shape " + shape_string(loaded.shape()) + ", expected " +
                       shape_string(t.shape()));
    }
    t = std::move(loaded);
  });
  return m;
}

}  // namespace tprune
