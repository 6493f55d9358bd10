// SPDX-License-Identifier: Apache-2.0
#include "tprune/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "tprune/its.hpp"
#include "tprune/sgp.hpp"

namespace tprune {

std::string to_string(Stage s) {
  switch (s) {
    case Stage::full: return "FULL";
    case Stage::soft: return "SOFT";
    case Stage::hard: return "HARD";
  }
  return "?";
}

Stage Schedule::stage(std::size_t step) const {
  if (step < warmup1_steps) return Stage::full;
  if (step < warmup1_steps + warmup2_steps) return Stage::soft;
  return Stage::hard;
}

Schedule make_schedule(const TrainConfig& cfg) { return {cfg.warmup1(), cfg.warmup2(), cfg.total_steps}; }

namespace {

void write_step_row(const StepRecord& r, std::ostream& out) {
  out << std::setprecision(12) << r.step << ',' << to_string(r.stage) << ',' << to_string(r.mode.kind) << ',' << (r.mode.flip_active ? 1 : 0)
      << ',' << r.lr << ',' << r.loss << ',' << r.retention << ',' << r.mean_q << ',' << r.band_trigger << ','
      << r.kept_tokens << '\n';
}

constexpr const char* kStepHeader = "step,stage,mode,flip_active,lr,loss,retention,mean_q,band_trigger,kept_tokens\n";

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::seed_seq seq{static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32), static_cast<std::uint32_t>(b),
                    static_cast<std::uint32_t>(b >> 32)};
  std::uint64_t out = 0;
  std::array<std::uint32_t, 2> words{};
  seq.generate(words.begin(), words.end());
  out = (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
  return out;
}

struct Tail {
  std::vector<LayerCache> layers;
  HeadCache head;
  Tensor logits;
};

Tail run_tail(const DecoderWeights& w, const DecoderConfig& cfg, Tensor h, std::size_t from) {
  Tail t;
  t.layers.resize(cfg.n_layers);
  for (std::size_t l = from; l < cfg.n_layers; ++l) h = layer_forward(w.layers[l], cfg, h, &t.layers[l]);
  t.logits = head_forward(w, cfg, h, &t.head);
  return t;
}

Tensor tail_backward(const DecoderWeights& w, const DecoderConfig& cfg, const std::vector<LayerCache>& layers,
                     const HeadCache& head, std::span<const double> grad_logits, std::size_t from,
                     DecoderWeights& grads) {
  const auto n_rows = layers[cfg.n_layers - 1].input.rows();
  Tensor g = head_backward(w, cfg, head, Tensor::vector({grad_logits.begin(), grad_logits.end()}), n_rows, grads);
  return backward_layers(w, cfg, layers, from, cfg.n_layers, std::move(g), grads);
}

Selection keep_all(const TokenSequence& seq) {
  Selection sel;
  sel.sequence = seq;
  for (std::size_t i = 0; i < seq.n_visual; ++i) sel.keep.push_back(i);
  return sel;
}

Selection soft_mask(const TokenSequence& seq, std::span<const double> q) {
  Selection sel = keep_all(seq);
  for (std::size_t j = 0; j < seq.n_visual; ++j)
    for (auto& v : sel.sequence.hidden.row(j)) v *= q[j];
  return sel;
}

// Gradient on the selected sequence mapped back to the full selection-layer
// input. Visual rows are scaled by the per-token forward multiplier.
void add_hard_grad(const Tensor& g_sel, const RetentionState& state, std::size_t nv, Tensor& grad_h, Tensor* scattered) {
  const auto kept = state.keep.size();
  const auto g_full = scatter_gradients(rows(g_sel, 0, kept), state.keep, nv);
  for (auto j : state.keep) {
    const auto src = g_full.row(j);
    auto dst = grad_h.row(j);
    for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += state.surrogate[j] * src[c];
  }
  for (std::size_t t = 0; t + kept < g_sel.rows(); ++t) {
    const auto src = g_sel.row(kept + t);
    auto dst = grad_h.row(nv + t);
    for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += src[c];
  }
  if (scattered) *scattered = g_full;
}

double norm_sq(const Model& g) {
  double s = 0.0;
  for_each_model_param(g, [&](const std::string&, const Tensor& t) {
    for (double v : t.data()) s += v * v;
  });
  return s;
}

}  // namespace

void write_steps_csv(const RunMetrics& m, std::ostream& out) {
  out << kStepHeader;
  for (const auto& r : m.steps) write_step_row(r, out);
}

void write_evals_csv(const RunMetrics& m, std::ostream& out) {
  out << std::setprecision(12) << "cases,accuracy,retention,coverage,jaccard,tokens_per_s\n";
  for (const auto& e : m.evals) {
    out << e.cases << ',' << e.accuracy << ',' << e.retention << ',' << e.coverage << ',' << e.jaccard << ','
        << e.tokens_per_s << '\n';
  }
}

SampleResult train_sample(const Model& model, const TrainConfig& cfg, Stage stage, const LossMode& mode,
                          const SyntheticCase& c, std::mt19937_64& rng, Model& grads) {
  const auto& dcfg = model.config.decoder;
  const auto& spec = model.config.volume;
  const auto& w = model.decoder;
  const std::size_t ell = dcfg.selection_layer;
  const bool its = model.config.its;

  const Tensor volume = mode.kind == LossKind::robust ? perturb_volume(c.volume, spec, rng) : c.volume;
  EmbedCache ec;
  const TokenSequence seq = embed_sequence(w, spec, volume, c.instruction, &ec);
  const auto nv = seq.n_visual;

  ItsTrace trace;
  TokenSequence at_selection;
  SelectionHook hook;
  if (its) {
    hook = [&](const SelectionView& view) -> std::optional<Selection> {
      trace = its_forward(view.q_instr, view.k_instr, view.k_vis, view.alpha, model.predictor, model.config.tau_ce,
                          !model.config.self_affinity);
      at_selection = view.sequence;
      switch (stage) {
        case Stage::full: return keep_all(view.sequence);
        case Stage::soft: return soft_mask(view.sequence, trace.state.q);
        case Stage::hard: return compress(view.sequence, trace.state);
      }
      return std::nullopt;
    };
  }
  const auto tape = decoder_forward(w, dcfg, seq, hook);

  SampleResult res;
  res.kept = its && stage == Stage::hard ? trace.state.keep.size() : nv;
  LossValue band;
  if (its) {
    band = band_loss(trace.state.q, cfg.band);
    res.mean_q = 0.0;
    for (double q : trace.state.q) res.mean_q += q;
    res.mean_q /= static_cast<double>(nv);
    res.band_active = band.value > 0.0;
  }

  Tensor grad_h({seq.hidden.rows(), seq.hidden.cols()});
  std::vector<double> grad_q(nv, 0.0);
  bool decoder_grad = false;

  // Main objective: CE, the entropy term on a perturbed volume, or the band
  // alone (band plus CE when band_with_ce is set).
  const bool band_batch = mode.kind == LossKind::band && its;
  if (!band_batch || cfg.band_with_ce) {
    const auto main = mode.kind == LossKind::robust ? robust_loss(tape.logits.data())
                                                    : cross_entropy(tape.logits.data(), c.answer);
    res.loss += main.value;
    decoder_grad = true;
    if (!its) {
      Tensor g = tail_backward(w, dcfg, tape.layers, tape.head, main.grad, 0, grads.decoder);
      embed_backward(w, spec, ec, g, grads.decoder);
      return res;
    }
    const Tensor g_sel = tail_backward(w, dcfg, tape.layers, tape.head, main.grad, ell, grads.decoder);
    const auto& h = at_selection.hidden;
    switch (stage) {
      case Stage::full: grad_h += g_sel; break;
      case Stage::soft:
        grad_h += g_sel;
        for (std::size_t j = 0; j < nv; ++j) {
          grad_q[j] += dot(h.row(j), g_sel.row(j));
          for (auto& v : grad_h.row(j)) v *= trace.state.q[j];
        }
        break;
      case Stage::hard: {
        Tensor g_full;
        add_hard_grad(g_sel, trace.state, nv, grad_h, &g_full);
        // The surrogate replaces the straight-through path through M~.
        const auto sig = sgp_signals(rows(h, 0, nv), g_full, trace.state.surrogate, trace.state.q, cfg.sgp);
        for (std::size_t j = 0; j < nv; ++j) grad_q[j] += sig.grad_q[j];
        break;
      }
    }
  }
  if (band_batch) {
    res.loss += band.value;
    for (std::size_t j = 0; j < nv; ++j) grad_q[j] += band.grad[j];
  }

  // Flip term: a second pass through the upper layers with the inverted mask.
  if (mode.flip_active && its && stage == Stage::hard) {
    const auto flipped = flip_mask(trace.state, trace.sal.rho);
    const auto sel = compress(at_selection, flipped);
    const auto tail = run_tail(w, dcfg, sel.sequence.hidden, ell);
    auto fl = flip_loss_logits(tail.logits.data(), c.answer, cfg.eps_flip);
    res.loss += cfg.flip_weight * fl.value;
    for (auto& g : fl.grad) g *= cfg.flip_weight;
    const Tensor g_sel = tail_backward(w, dcfg, tail.layers, tail.head, fl.grad, ell, grads.decoder);
    add_hard_grad(g_sel, flipped, nv, grad_h, nullptr);
    decoder_grad = true;
  }

  bool q_grad = false;
  for (double g : grad_q) q_grad = q_grad || g != 0.0;
  if (q_grad) {
    const auto tg = backprop_threshold(grad_q, trace.sal.rho, trace.state.theta, trace.state.tau);
    const auto ig = its_backward(trace, model.predictor, tg.theta, tg.rho, grads.predictor);
    const auto proj = selection_projection(w, dcfg, tape.selection_input);
    const auto nt = seq.n_instruction;
    Tensor gq({nv + nt, proj.width}), gk({nv + nt, proj.width});
    for (std::size_t t = 0; t < nt; ++t)
      for (std::size_t k = 0; k < proj.width; ++k) {
        gq.at(nv + t, k) = ig.q_instr.at(t, k);
        gk.at(nv + t, k) = ig.k_instr.at(t, k);
      }
    for (std::size_t j = 0; j < nv; ++j)
      for (std::size_t k = 0; k < proj.width; ++k) gk.at(j, k) = ig.k_vis.at(j, k);
    grad_h += selection_projection_backward(w, dcfg, tape.selection_input, proj, gq, gk, grads.decoder);
    decoder_grad = true;
  }

  if (decoder_grad) {
    Tensor g = backward_layers(w, dcfg, tape.layers, 0, ell, std::move(grad_h), grads.decoder);
    embed_backward(w, spec, ec, g, grads.decoder);
  }
  return res;
}

TrainResult train(const TrainConfig& cfg, const StepCallback& on_step) {
  cfg.validate();
  TrainResult out{init_model(cfg.model, cfg.seed), {}};
  Model& model = out.model;
  const auto schedule = make_schedule(cfg);
  std::mt19937_64 mode_rng(mix(cfg.seed, 0x6d6f6465ull));
  const bool its = cfg.model.its;
  const auto nv = static_cast<double>(cfg.model.volume.n_visual());

  for (std::size_t step = 0; step < cfg.total_steps; ++step) {
    StepRecord rec;
    rec.step = step;
    rec.stage = its ? schedule.stage(step) : Stage::full;
    rec.mode = select_mode(step, mode_rng, cfg.modes);
    if (rec.mode.kind == LossKind::robust && !cfg.robust_reg) rec.mode.kind = LossKind::ce;
    if (rec.mode.kind == LossKind::band && !its) rec.mode.kind = LossKind::ce;
    if (!cfg.flip_reg || !its || rec.stage != Stage::hard) rec.mode.flip_active = false;
    const double progress = static_cast<double>(step) / static_cast<double>(cfg.total_steps);
    rec.lr = cfg.lr_min + 0.5 * (cfg.lr - cfg.lr_min) * (1.0 + std::cos(std::numbers::pi * progress));

    Model grads = zeros_like(model);
    std::mt19937_64 perturb_rng(mix(cfg.seed, step));
    double kept = 0.0, mean_q = 0.0, triggers = 0.0;
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      const auto c = generate_case(train_case_seed(cfg.seed, step, b), cfg.model.volume, cfg.task, cfg.data);
      const auto r = train_sample(model, cfg, rec.stage, rec.mode, c, perturb_rng, grads);
      rec.loss += r.loss;
      kept += static_cast<double>(r.kept);
      mean_q += r.mean_q;
      triggers += r.band_active ? 1.0 : 0.0;
    }
    const double inv_b = 1.0 / static_cast<double>(cfg.batch_size);
    rec.loss *= inv_b;
    rec.kept_tokens = kept * inv_b;
    rec.retention = rec.kept_tokens / nv;
    rec.mean_q = mean_q * inv_b;
    rec.band_trigger = triggers * inv_b;

    double scale = inv_b;
    const double gnorm = std::sqrt(norm_sq(grads)) * inv_b;
    if (!std::isfinite(rec.loss) || !std::isfinite(gnorm)) {
      std::ostringstream recent;
      recent << kStepHeader;
      const auto& steps = out.metrics.steps;
      for (auto i = steps.size() > 10 ? steps.size() - 10 : 0; i < steps.size(); ++i) write_step_row(steps[i], recent);
      write_step_row(rec, recent);
      throw DivergenceError("training diverged at step " + std::to_string(step), recent.str());
    }
    if (cfg.grad_clip > 0 && gnorm > cfg.grad_clip) scale *= cfg.grad_clip / gnorm;

    std::vector<Tensor*> params;
    for_each_model_param(model, [&](const std::string&, Tensor& t) { params.push_back(&t); });
    std::size_t i = 0;
    for_each_model_param(grads, [&](const std::string&, const Tensor& g) {
      auto p = params[i++]->data();
      const auto gd = g.data();
      for (std::size_t k = 0; k < p.size(); ++k) p[k] -= rec.lr * scale * gd[k];
    });

    out.metrics.steps.push_back(rec);
    if (on_step) on_step(rec);
  }
  return out;
}

Inference infer(const Model& model, const Tensor& volume, const std::vector<std::uint32_t>& instruction) {
  const auto& dcfg = model.config.decoder;
  const auto seq = embed_sequence(model.decoder, model.config.volume, volume, instruction, nullptr);
  Inference res;
  SelectionHook hook;
  if (model.config.its) {
    hook = [&](const SelectionView& view) -> std::optional<Selection> {
      const auto tr = its_forward(view.q_instr, view.k_instr, view.k_vis, view.alpha, model.predictor,
                                  model.config.tau_ce, !model.config.self_affinity);
      res.mean_q = 0.0;
      for (double q : tr.state.q) res.mean_q += q;
      res.mean_q /= static_cast<double>(tr.state.q.size());
      return compress(view.sequence, tr.state);
    };
  }
  auto tape = decoder_forward(model.decoder, dcfg, seq, hook);
  res.logits.assign(tape.logits.data().begin(), tape.logits.data().end());
  if (tape.selection) {
    res.keep = tape.selection->keep;
  } else {
    for (std::size_t j = 0; j < seq.n_visual; ++j) res.keep.push_back(j);
  }
  res.ops = std::move(tape.ops);
  return res;
}

double planted_coverage(const std::vector<std::size_t>& retained, const std::vector<bool>& planted) {
  std::size_t total = 0, hit = 0;
  for (bool p : planted) total += p ? 1 : 0;
  if (total == 0) throw ConfigError("coverage needs at least one planted token");
  for (auto j : retained) {
    if (j >= planted.size()) throw ShapeError("retained index outside the planted map");
    hit += planted[j] ? 1 : 0;
  }
  return static_cast<double>(hit) / static_cast<double>(total);
}

double jaccard_dissimilarity(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
  std::vector<std::size_t> sa = a, sb = b, inter, uni;
  std::sort(sa.begin(), sa.end());
  std::sort(sb.begin(), sb.end());
  sa.erase(std::unique(sa.begin(), sa.end()), sa.end());
  sb.erase(std::unique(sb.begin(), sb.end()), sb.end());
  std::set_intersection(sa.begin(), sa.end(), sb.begin(), sb.end(), std::back_inserter(inter));
  std::set_union(sa.begin(), sa.end(), sb.begin(), sb.end(), std::back_inserter(uni));
  if (uni.empty()) return 0.0;
  return 1.0 - static_cast<double>(inter.size()) / static_cast<double>(uni.size());
}

EvalRecord evaluate(const Model& model, TaskKind task, const CaseOptions& opts, std::size_t n_cases,
                    std::uint64_t seed) {
  EvalRecord rec;
  rec.cases = n_cases;
  if (n_cases == 0) return rec;
  const auto& spec = model.config.volume;
  double seconds = 0.0;
  std::size_t correct = 0, tokens = 0;
  for (std::size_t i = 0; i < n_cases; ++i) {
    const auto s = eval_case_seed(seed, i);
    std::array<std::vector<std::size_t>, kOrgans> kept;
    for (std::size_t organ = 0; organ < kOrgans; ++organ) {
      const auto c = generate_case(s, spec, task, organ, opts);
      const auto t0 = std::chrono::steady_clock::now();
      const auto inf = infer(model, c.volume, c.instruction);
      seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      tokens += spec.n_visual() + c.instruction.size();
      const auto pred = static_cast<std::size_t>(
          std::max_element(inf.logits.begin(), inf.logits.end()) - inf.logits.begin());
      correct += pred == c.answer ? 1 : 0;
      rec.retention += static_cast<double>(inf.keep.size()) / static_cast<double>(spec.n_visual());
      rec.coverage += planted_coverage(inf.keep, c.planted);
      kept[organ] = inf.keep;
    }
    rec.jaccard += jaccard_dissimilarity(kept[0], kept[1]);
  }
  const double queries = static_cast<double>(n_cases * kOrgans);
  rec.accuracy = static_cast<double>(correct) / queries;
  rec.retention /= queries;
  rec.coverage /= queries;
  rec.jaccard /= static_cast<double>(n_cases);
  rec.tokens_per_s = seconds > 0 ? static_cast<double>(tokens) / seconds : 0.0;
  return rec;
}

}  // namespace tprune
