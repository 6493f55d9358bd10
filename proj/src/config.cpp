// SPDX-License-Identifier: Apache-2.0
#include "tprune/config.hpp"

#include <fstream>
#include <set>
#include <type_traits>

namespace tprune {

using nlohmann::json;

namespace {

// Each configuration struct lists its fields once; the writer and the strict
// reader both walk that list.
template <class V> void fields(V& v, VolumeSpec& s) {
  v("depth", s.depth);
  v("height", s.height);
  v("width", s.width);
  v("patch", s.patch);
  v("stride", s.stride);
}
template <class V> void fields(V& v, DecoderConfig& c) {
  v("n_layers", c.n_layers);
  v("d_model", c.d_model);
  v("n_heads", c.n_heads);
  v("vocab", c.vocab);
  v("mlp_ratio", c.mlp_ratio);
  v("selection_layer", c.selection_layer);
  v("use_norm", c.use_norm);
  v("saliency_heads", c.saliency_heads);
}
template <class V> void fields(V& v, ModelConfig& c) {
  v("volume", c.volume);
  v("decoder", c.decoder);
  v("instruction_vocab", c.instruction_vocab);
  v("max_instruction", c.max_instruction);
  v("predictor_hidden", c.predictor_hidden);
  v("predictor_bias", c.predictor_bias);
  v("its", c.its);
  v("self_affinity", c.self_affinity);
  v("tau_ce", c.tau_ce);
}
template <class V> void fields(V& v, SgpConfig& c) {
  v("score", c.score);
  v("beta", c.beta);
  v("eps_std", c.eps_std);
  v("eps_sat", c.eps_sat);
  v("clip", c.clip);
  v("s_min", c.s_min);
  v("s_max", c.s_max);
  v("eps_row", c.eps_row);
}
template <class V> void fields(V& v, BandConfig& c) {
  v("r_min", c.r_min);
  v("r_max", c.r_max);
}
template <class V> void fields(V& v, ModeSchedule& c) {
  v("p_ce", c.p_ce);
  v("p_band", c.p_band);
  v("p_robust", c.p_robust);
  v("p_flip", c.p_flip);
}
template <class V> void fields(V& v, CaseOptions& c) {
  v("amplitude", c.amplitude);
  v("noise", c.noise);
}
template <class V> void fields(V& v, TrainConfig& c) {
  v("model", c.model);
  v("seed", c.seed);
  v("task", c.task);
  v("data", c.data);
  v("total_steps", c.total_steps);
  v("warmup1_steps", c.warmup1_steps);
  v("warmup2_steps", c.warmup2_steps);
  v("batch_size", c.batch_size);
  v("lr", c.lr);
  v("lr_min", c.lr_min);
  v("grad_clip", c.grad_clip);
  v("sgp", c.sgp);
  v("band", c.band);
  v("modes", c.modes);
  v("eps_flip", c.eps_flip);
  v("flip_weight", c.flip_weight);
  v("band_with_ce", c.band_with_ce);
  v("robust_reg", c.robust_reg);
  v("flip_reg", c.flip_reg);
  v("eval_cases", c.eval_cases);
  v("eval_seed", c.eval_seed);
}

json scalar_to_json(const SaliencyHeads& h) { return h == SaliencyHeads::first ? "first" : "mean"; }
json scalar_to_json(const TaskKind& k) { return to_string(k); }
json scalar_to_json(const ProxyScore& s) { return s == ProxyScore::eta ? "eta" : "loss_increase"; }
template <class T> json scalar_to_json(const T& x) { return x; }

void scalar_from_json(const json& j, SaliencyHeads& h) {
  const auto s = j.get<std::string>();
  if (s == "first") h = SaliencyHeads::first;
  else if (s == "mean") h = SaliencyHeads::mean;
  else throw ConfigError("saliency_heads must be 'first' or 'mean'");
}
void scalar_from_json(const json& j, TaskKind& k) { k = task_from_string(j.get<std::string>()); }
void scalar_from_json(const json& j, ProxyScore& s) {
  const auto v = j.get<std::string>();
  if (v == "eta") s = ProxyScore::eta;
  else if (v == "loss_increase") s = ProxyScore::loss_increase;
  else throw ConfigError("sgp.score must be 'eta' or 'loss_increase'");
}
template <class T> void scalar_from_json(const json& j, T& x) { x = j.get<T>(); }

template <class T> constexpr bool is_struct_v =
    std::is_same_v<T, VolumeSpec> || std::is_same_v<T, DecoderConfig> || std::is_same_v<T, ModelConfig> ||
    std::is_same_v<T, SgpConfig> || std::is_same_v<T, BandConfig> || std::is_same_v<T, ModeSchedule> ||
    std::is_same_v<T, CaseOptions> || std::is_same_v<T, TrainConfig>;

struct Writer {
  json out = json::object();
  template <class T> void operator()(const char* name, T& x) {
    if constexpr (is_struct_v<T>) {
      Writer w;
      fields(w, x);
      out[name] = std::move(w.out);
    } else {
      out[name] = scalar_to_json(x);
    }
  }
};

struct Reader {
  const json& in;
  std::string path;
  std::set<std::string> seen;
  template <class T> void operator()(const char* name, T& x) {
    seen.insert(name);
    if (!in.contains(name)) return;
    const auto& v = in.at(name);
    const auto where = path + name;
    if constexpr (is_struct_v<T>) {
      read_struct(v, x, where + ".");
    } else {
      try {
        scalar_from_json(v, x);
      } catch (const json::exception& e) {
        throw ConfigError("config field '" + where + "': " + e.what());
      }
    }
  }
  template <class T> static void read_struct(const json& j, T& x, const std::string& path) {
    if (!j.is_object()) throw ConfigError("config section '" + path + "' must be an object");
    Reader r{j, path, {}};
    fields(r, x);
    for (const auto& [key, _] : j.items()) {
      if (!r.seen.count(key)) throw ConfigError("unknown config field '" + path + key + "'");
    }
  }
};

template <class T> json write_struct(const T& x) {
  Writer w;
  fields(w, const_cast<T&>(x));
  return w.out;
}

}  // namespace

ModelConfig default_train_model() {
  ModelConfig m;
  m.decoder.selection_layer = 0;
  m.decoder.use_norm = false;
  return m;
}

void TrainConfig::validate() const {
  model.validate();
  sgp.validate();
  band.validate();
  modes.validate();
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(lr > 0) || lr_min < 0 || lr_min > lr) throw ConfigError("need 0 <= lr_min <= lr and lr > 0");
  if (grad_clip < 0) throw ConfigError("grad_clip must be non-negative");
  if (!(eps_flip > 0)) throw ConfigError("eps_flip must be positive");
  if (!(flip_weight >= 0)) throw ConfigError("flip_weight must be non-negative");
  if (warmup1() + warmup2() > total_steps) throw ConfigError("warmup stages exceed total_steps");
  if (data.noise < 0) throw ConfigError("data.noise must be non-negative");
}

std::size_t TrainConfig::warmup1() const {
  return warmup1_steps >= 0 ? static_cast<std::size_t>(warmup1_steps) : total_steps / 10;
}

std::size_t TrainConfig::warmup2() const {
  return warmup2_steps >= 0 ? static_cast<std::size_t>(warmup2_steps) : total_steps / 5;
}

json to_json(const ModelConfig& c) { return write_struct(c); }

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  Reader::read_struct(j, c, "");
  c.validate();
  return c;
}

json to_json(const TrainConfig& c) { return write_struct(c); }

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  Reader::read_struct(j, c, "");
  c.validate();
  return c;
}

TrainConfig load_train_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
  }
  return train_config_from_json(j);
}

std::string version_string() {
#ifdef TPRUNE_VERSION
  return TPRUNE_VERSION;
#else
  return "0.1.0-unknown";
#endif
}

}  // namespace tprune
