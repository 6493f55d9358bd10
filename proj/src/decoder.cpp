// SPDX-License-Identifier: Apache-2.0
#include "tprune/decoder.hpp"

#include <cmath>
#include <random>

namespace tprune {

void DecoderConfig::validate() const {
  if (n_layers == 0) throw ConfigError("decoder needs at least one layer");
  if (n_heads == 0 || d_model % n_heads) throw ConfigError("d_model must be divisible by n_heads");
  if (selection_layer >= n_layers) throw ConfigError("selection layer must be < n_layers");
  if (vocab < 2) throw ConfigError("answer vocabulary must have at least two classes");
  if (mlp_ratio == 0) throw ConfigError("mlp_ratio must be positive");
}

std::size_t default_selection_layer(std::size_t n_layers) { return n_layers / 4; }

namespace {

Tensor gaussian(std::vector<std::size_t> shape, double stddev, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

}  // namespace

DecoderWeights init_decoder(const DecoderConfig& cfg, const VolumeSpec& spec, std::size_t instruction_vocab,
                            std::size_t max_instruction, std::uint64_t seed) {
  cfg.validate();
  spec.validate();
  std::mt19937_64 rng(seed);
  const auto d = cfg.d_model;
  const auto hidden = d * cfg.mlp_ratio;
  const auto p = spec.token_voxels();
  const double proj = 1.0 / std::sqrt(static_cast<double>(d));
  const double resid = proj / std::sqrt(2.0 * static_cast<double>(cfg.n_layers));

  DecoderWeights w;
  w.patch.weight = gaussian({p, d}, 1.0 / std::sqrt(static_cast<double>(p)), rng);
  w.patch.bias = Tensor({d});
  w.pos_depth = gaussian({spec.grid_depth(), d}, 0.5, rng);
  w.pos_row = gaussian({spec.grid_rows(), d}, 0.5, rng);
  w.pos_col = gaussian({spec.grid_cols(), d}, 0.5, rng);
  w.pos_instr = gaussian({max_instruction, d}, 0.5, rng);
  w.tok_embed = gaussian({instruction_vocab, d}, 1.0, rng);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    LayerWeights lw;
    lw.norm1 = Tensor({d}, 1.0);
    lw.wq = gaussian({d, d}, proj, rng);
    lw.wk = gaussian({d, d}, proj, rng);
    lw.wv = gaussian({d, d}, proj, rng);
    lw.wo = gaussian({d, d}, resid, rng);
    lw.norm2 = Tensor({d}, 1.0);
    lw.w_up = gaussian({d, hidden}, proj, rng);
    lw.b_up = Tensor({hidden});
    lw.w_down = gaussian({hidden, d}, resid / std::sqrt(static_cast<double>(cfg.mlp_ratio)), rng);
    lw.b_down = Tensor({d});
    w.layers.push_back(std::move(lw));
  }
  w.norm_final = Tensor({d}, 1.0);
  w.head_w = gaussian({d, cfg.vocab}, 0.1 * proj, rng);
  w.head_b = Tensor({cfg.vocab});
  return w;
}

DecoderWeights zeros_like(const DecoderWeights& w) {
  DecoderWeights z = w;
  for_each_param(z, [](const std::string&, Tensor& t) { t.fill(0.0); });
  return z;
}

void TokenSequence::check() const {
  if (hidden.rank() != 2 || hidden.rows() != n_visual + n_instruction) {
    throw ShapeError("token sequence rows " + shape_string(hidden.shape()) + " != n_visual + n_instruction");
  }
  if (positions.size() != hidden.rows()) throw ShapeError("token sequence positions length mismatch");
  for (std::size_t i = 0; i < positions.size(); ++i) {
    if (positions[i].visual != (i < n_visual)) throw ShapeError("visual tokens must precede instruction tokens");
  }
}

TokenSequence embed_sequence(const DecoderWeights& w, const VolumeSpec& spec, const Tensor& volume,
                             const std::vector<std::uint32_t>& instruction, EmbedCache* cache) {
  if (instruction.empty()) throw ConfigError("instruction must contain at least one token");
  if (instruction.size() > w.pos_instr.rows()) throw ConfigError("instruction longer than positional table");
  Tensor patches = extract_patches(volume, spec);
  Tensor vis = matmul(patches, w.patch.weight);
  add_row_vector(vis, w.patch.bias);

  TokenSequence seq;
  seq.n_visual = spec.n_visual();
  seq.n_instruction = instruction.size();
  seq.positions = positional_indices(spec, instruction.size());
  seq.active.assign(seq.n_visual, true);
  const auto d = vis.cols();
  seq.hidden = Tensor({seq.n_visual + seq.n_instruction, d});
  for (std::size_t j = 0; j < seq.n_visual; ++j) {
    const auto& g = seq.positions[j].grid;
    auto out = seq.hidden.row(j);
    const auto src = vis.row(j);
    const auto pd = w.pos_depth.row(g[0]), pr = w.pos_row.row(g[1]), pc = w.pos_col.row(g[2]);
    for (std::size_t c = 0; c < d; ++c) out[c] = src[c] + pd[c] + pr[c] + pc[c];
  }
  for (std::size_t t = 0; t < instruction.size(); ++t) {
    if (instruction[t] >= w.tok_embed.rows()) throw ConfigError("instruction token id out of vocabulary");
    auto out = seq.hidden.row(seq.n_visual + t);
    const auto e = w.tok_embed.row(instruction[t]);
    const auto p = w.pos_instr.row(t);
    for (std::size_t c = 0; c < d; ++c) out[c] = e[c] + p[c];
  }
  if (cache) {
    cache->patches = std::move(patches);
    cache->instruction = instruction;
  }
  return seq;
}

void embed_backward(const DecoderWeights& w, const VolumeSpec& spec, const EmbedCache& cache,
                    const Tensor& grad_hidden, DecoderWeights& grads) {
  const auto nv = spec.n_visual();
  const auto d = w.patch.weight.cols();
  const auto positions = positional_indices(spec, cache.instruction.size());
  Tensor grad_vis = rows(grad_hidden, 0, nv);
  grads.patch.weight += matmul_at(cache.patches, grad_vis);
  grads.patch.bias += column_sums(grad_vis);
  for (std::size_t j = 0; j < nv; ++j) {
    const auto& g = positions[j].grid;
    const auto gr = grad_vis.row(j);
    auto a = grads.pos_depth.row(g[0]);
    auto b = grads.pos_row.row(g[1]);
    auto c = grads.pos_col.row(g[2]);
    for (std::size_t k = 0; k < d; ++k) {
      a[k] += gr[k];
      b[k] += gr[k];
      c[k] += gr[k];
    }
  }
  for (std::size_t t = 0; t < cache.instruction.size(); ++t) {
    const auto gr = grad_hidden.row(nv + t);
    auto e = grads.tok_embed.row(cache.instruction[t]);
    auto p = grads.pos_instr.row(t);
    for (std::size_t k = 0; k < d; ++k) {
      e[k] += gr[k];
      p[k] += gr[k];
    }
  }
}

Tensor rows(const Tensor& m, std::size_t begin, std::size_t end) {
  const auto c = m.cols();
  std::vector<double> data(m.data().begin() + static_cast<std::ptrdiff_t>(begin * c),
                           m.data().begin() + static_cast<std::ptrdiff_t>(end * c));
  return Tensor({end - begin, c}, std::move(data));
}

namespace {

Tensor maybe_norm(const DecoderConfig& cfg, const Tensor& x, const Tensor& gain, RmsNormCache* cache) {
  if (!cfg.use_norm) return x;
  return rms_norm(x, gain, cache);
}

Tensor maybe_norm_backward(const DecoderConfig& cfg, const Tensor& x, const Tensor& gain,
                           const RmsNormCache& cache, const Tensor& grad_y, Tensor& grad_gain) {
  if (!cfg.use_norm) return grad_y;
  return rms_norm_backward(x, gain, cache, grad_y, grad_gain);
}

}  // namespace

Tensor layer_forward(const LayerWeights& lw, const DecoderConfig& cfg, const Tensor& h, LayerCache* cache,
                     std::uint64_t* macs) {
  const auto n = h.rows(), d = cfg.d_model, heads = cfg.n_heads, hd = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  RmsNormCache n1;
  Tensor x1 = maybe_norm(cfg, h, lw.norm1, &n1);
  Tensor q = matmul(x1, lw.wq);
  Tensor k = matmul(x1, lw.wk);
  Tensor v = matmul(x1, lw.wv);

  Tensor ctx({n, d});
  std::vector<Tensor> probs;
  if (cache) probs.assign(heads, Tensor({n, n}));
  std::vector<double> p(n);
  for (std::size_t hh = 0; hh < heads; ++hh) {
    const auto off = hh * hd;
    for (std::size_t i = 0; i < n; ++i) {
      const double* qi = q.data().data() + i * d + off;
      double mx = -INFINITY;
      for (std::size_t j = 0; j <= i; ++j) {
        const double* kj = k.data().data() + j * d + off;
        double s = 0.0;
        for (std::size_t c = 0; c < hd; ++c) s += qi[c] * kj[c];
        p[j] = s * scale;
        mx = std::max(mx, p[j]);
      }
      double sum = 0.0;
      for (std::size_t j = 0; j <= i; ++j) {
        p[j] = std::exp(p[j] - mx);
        sum += p[j];
      }
      double* ci = ctx.data().data() + i * d + off;
      for (std::size_t j = 0; j <= i; ++j) {
        p[j] /= sum;
        const double* vj = v.data().data() + j * d + off;
        for (std::size_t c = 0; c < hd; ++c) ci[c] += p[j] * vj[c];
      }
      if (cache) std::copy(p.begin(), p.begin() + static_cast<std::ptrdiff_t>(i + 1), probs[hh].row(i).begin());
    }
  }
  if (macs) *macs += static_cast<std::uint64_t>(d) * n * (n + 1);

  Tensor h1 = matmul(ctx, lw.wo);
  h1 += h;
  RmsNormCache n2;
  Tensor x2 = maybe_norm(cfg, h1, lw.norm2, &n2);
  Tensor pre = matmul(x2, lw.w_up);
  add_row_vector(pre, lw.b_up);
  Tensor act = pre;
  for (auto& a : act.data()) a = gelu(a);
  Tensor out = matmul(act, lw.w_down);
  add_row_vector(out, lw.b_down);
  out += h1;

  if (cache) {
    cache->input = h;
    cache->norm1 = std::move(n1);
    cache->x1 = std::move(x1);
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->probs = std::move(probs);
    cache->ctx = std::move(ctx);
    cache->h1 = std::move(h1);
    cache->norm2 = std::move(n2);
    cache->x2 = std::move(x2);
    cache->pre = std::move(pre);
    cache->act = std::move(act);
  }
  return out;
}

Tensor layer_backward(const LayerWeights& lw, const DecoderConfig& cfg, const LayerCache& c,
                      const Tensor& grad_out, LayerWeights& g) {
  const auto n = c.input.rows(), d = cfg.d_model, hd = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  // MLP branch
  g.w_down += matmul_at(c.act, grad_out);
  g.b_down += column_sums(grad_out);
  Tensor grad_pre = matmul_bt(grad_out, lw.w_down);
  for (std::size_t i = 0; i < grad_pre.size(); ++i) grad_pre[i] *= gelu_grad(c.pre[i]);
  g.w_up += matmul_at(c.x2, grad_pre);
  g.b_up += column_sums(grad_pre);
  Tensor grad_x2 = matmul_bt(grad_pre, lw.w_up);
  Tensor grad_h1 = maybe_norm_backward(cfg, c.h1, lw.norm2, c.norm2, grad_x2, g.norm2);
  grad_h1 += grad_out;

  // attention branch
  g.wo += matmul_at(c.ctx, grad_h1);
  Tensor grad_ctx = matmul_bt(grad_h1, lw.wo);
  Tensor grad_q({n, d}), grad_k({n, d}), grad_v({n, d});
  std::vector<double> gp(n);
  for (std::size_t hh = 0; hh < cfg.n_heads; ++hh) {
    const auto off = hh * hd;
    const auto& P = c.probs[hh];
    for (std::size_t i = 0; i < n; ++i) {
      const double* gci = grad_ctx.data().data() + i * d + off;
      double s = 0.0;
      for (std::size_t j = 0; j <= i; ++j) {
        const double* vj = c.v.data().data() + j * d + off;
        double acc = 0.0;
        for (std::size_t cc = 0; cc < hd; ++cc) acc += gci[cc] * vj[cc];
        gp[j] = acc;
        s += acc * P.at(i, j);
        double* gvj = grad_v.data().data() + j * d + off;
        for (std::size_t cc = 0; cc < hd; ++cc) gvj[cc] += P.at(i, j) * gci[cc];
      }
      const double* qi = c.q.data().data() + i * d + off;
      double* gqi = grad_q.data().data() + i * d + off;
      for (std::size_t j = 0; j <= i; ++j) {
        const double gs = P.at(i, j) * (gp[j] - s) * scale;
        if (gs == 0.0) continue;
        const double* kj = c.k.data().data() + j * d + off;
        double* gkj = grad_k.data().data() + j * d + off;
        for (std::size_t cc = 0; cc < hd; ++cc) {
          gqi[cc] += gs * kj[cc];
          gkj[cc] += gs * qi[cc];
        }
      }
    }
  }
  g.wq += matmul_at(c.x1, grad_q);
  g.wk += matmul_at(c.x1, grad_k);
  g.wv += matmul_at(c.x1, grad_v);
  Tensor grad_x1 = matmul_bt(grad_q, lw.wq);
  grad_x1 += matmul_bt(grad_k, lw.wk);
  grad_x1 += matmul_bt(grad_v, lw.wv);
  Tensor grad_h = maybe_norm_backward(cfg, c.input, lw.norm1, c.norm1, grad_x1, g.norm1);
  grad_h += grad_h1;
  return grad_h;
}

Tensor head_forward(const DecoderWeights& w, const DecoderConfig& cfg, const Tensor& h, HeadCache* cache) {
  Tensor last = rows(h, h.rows() - 1, h.rows());
  RmsNormCache nc;
  Tensor x = maybe_norm(cfg, last, w.norm_final, &nc);
  Tensor logits = matmul(x, w.head_w);
  add_row_vector(logits, w.head_b);
  if (cache) {
    cache->last = std::move(last);
    cache->norm = std::move(nc);
    cache->x = std::move(x);
  }
  return Tensor::vector(std::move(logits.storage()));
}

Tensor head_backward(const DecoderWeights& w, const DecoderConfig& cfg, const HeadCache& c,
                     const Tensor& grad_logits, std::size_t n_rows, DecoderWeights& grads) {
  const Tensor gl = Tensor::matrix(1, grad_logits.size(), grad_logits.storage());
  grads.head_w += matmul_at(c.x, gl);
  grads.head_b += Tensor::vector(gl.storage());
  Tensor grad_x = matmul_bt(gl, w.head_w);
  Tensor grad_last = maybe_norm_backward(cfg, c.last, w.norm_final, c.norm, grad_x, grads.norm_final);
  Tensor grad_h({n_rows, cfg.d_model});
  std::copy(grad_last.data().begin(), grad_last.data().end(), grad_h.row(n_rows - 1).begin());
  return grad_h;
}

SelectionProjection selection_projection(const DecoderWeights& w, const DecoderConfig& cfg, const Tensor& h) {
  const auto& lw = w.layers.at(cfg.selection_layer);
  SelectionProjection p;
  p.x = maybe_norm(cfg, h, lw.norm1, &p.norm);
  Tensor q = matmul(p.x, lw.wq);
  Tensor k = matmul(p.x, lw.wk);
  const auto hd = cfg.head_dim();
  if (cfg.saliency_heads == SaliencyHeads::first) {
    p.col0 = 0;
    p.width = hd;
    p.alpha = static_cast<double>(hd);
  } else {
    // Mean over heads of per-head scaled products equals the full-width
    // product scaled by 1 / (n_heads * sqrt(head_dim)).
    p.col0 = 0;
    p.width = cfg.d_model;
    const double hcount = static_cast<double>(cfg.n_heads);
    p.alpha = hcount * hcount * static_cast<double>(hd);
  }
  p.q = Tensor({h.rows(), p.width});
  p.k = Tensor({h.rows(), p.width});
  for (std::size_t r = 0; r < h.rows(); ++r)
    for (std::size_t c = 0; c < p.width; ++c) {
      p.q.at(r, c) = q.at(r, p.col0 + c);
      p.k.at(r, c) = k.at(r, p.col0 + c);
    }
  return p;
}

Tensor selection_projection_backward(const DecoderWeights& w, const DecoderConfig& cfg, const Tensor& h,
                                     const SelectionProjection& p, const Tensor& grad_q, const Tensor& grad_k,
                                     DecoderWeights& grads) {
  const auto& lw = w.layers.at(cfg.selection_layer);
  auto& lg = grads.layers.at(cfg.selection_layer);
  const auto n = h.rows(), d = cfg.d_model;
  Tensor gq({n, d}), gk({n, d});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < p.width; ++c) {
      gq.at(r, p.col0 + c) = grad_q.at(r, c);
      gk.at(r, p.col0 + c) = grad_k.at(r, c);
    }
  lg.wq += matmul_at(p.x, gq);
  lg.wk += matmul_at(p.x, gk);
  Tensor grad_x = matmul_bt(gq, lw.wq);
  grad_x += matmul_bt(gk, lw.wk);
  return maybe_norm_backward(cfg, h, lw.norm1, p.norm, grad_x, lg.norm1);
}

DecoderTape decoder_forward(const DecoderWeights& w, const DecoderConfig& cfg, const TokenSequence& seq,
                            const SelectionHook& hook) {
  cfg.validate();
  seq.check();
  DecoderTape tape;
  tape.layers.resize(cfg.n_layers);
  tape.ops.attention_macs.assign(cfg.n_layers, 0);
  Tensor h = seq.hidden;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    if (l == cfg.selection_layer && hook) {
      tape.selection_input = h;
      TokenSequence current = seq;
      current.hidden = h;
      const auto proj = selection_projection(w, cfg, h);
      const auto nv = seq.n_visual, nt = seq.n_instruction;
      SelectionView view{current, rows(proj.q, nv, nv + nt), rows(proj.k, nv, nv + nt), rows(proj.k, 0, nv),
                         proj.alpha};
      tape.selection = hook(view);
      if (tape.selection) {
        tape.selection->sequence.check();
        h = tape.selection->sequence.hidden;
      }
    }
    h = layer_forward(w.layers[l], cfg, h, &tape.layers[l], &tape.ops.attention_macs[l]);
  }
  tape.logits = head_forward(w, cfg, h, &tape.head);
  return tape;
}

Tensor backward_layers(const DecoderWeights& w, const DecoderConfig& cfg, const std::vector<LayerCache>& caches,
                       std::size_t from, std::size_t to, Tensor grad, DecoderWeights& grads) {
  for (std::size_t l = to; l-- > from;) grad = layer_backward(w.layers[l], cfg, caches[l], grad, grads.layers[l]);
  return grad;
}

}  // namespace tprune
