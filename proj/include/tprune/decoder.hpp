// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "tprune/ops.hpp"
#include "tprune/tensor.hpp"
#include "tprune/volume.hpp"

namespace tprune {

/// Which attention heads feed the saliency estimate at the selection layer.
enum class SaliencyHeads { first, mean };

struct DecoderConfig {
  std::size_t n_layers = 4;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t vocab = 16;
  std::size_t mlp_ratio = 4;
  std::size_t selection_layer = 1;
  bool use_norm = true;
  SaliencyHeads saliency_heads = SaliencyHeads::first;

  std::size_t head_dim() const { return d_model / n_heads; }
  void validate() const;
};

/// floor(n_layers / 4)
std::size_t default_selection_layer(std::size_t n_layers);

struct LayerWeights {
  Tensor norm1, wq, wk, wv, wo;
  Tensor norm2, w_up, b_up, w_down, b_down;
};

struct DecoderWeights {
  LinearMap patch;                     // [token_voxels, d], [d]
  Tensor pos_depth, pos_row, pos_col;  // grid-indexed additive embeddings
  Tensor pos_instr;                    // [max_instruction, d]
  Tensor tok_embed;                    // [instruction_vocab, d]
  std::vector<LayerWeights> layers;
  Tensor norm_final, head_w, head_b;   // [d], [d, vocab], [vocab]
};

template <class W, class F>
void for_each_param(W& w, F&& f) {
  f(std::string("patch.weight"), w.patch.weight);
  f(std::string("patch.bias"), w.patch.bias);
  f(std::string("pos.depth"), w.pos_depth);
  f(std::string("pos.row"), w.pos_row);
  f(std::string("pos.col"), w.pos_col);
  f(std::string("pos.instr"), w.pos_instr);
  f(std::string("tok.embed"), w.tok_embed);
  for (std::size_t i = 0; i < w.layers.size(); ++i) {
    const std::string p = "layer" + std::to_string(i) + ".";
    auto& l = w.layers[i];
    f(p + "norm1", l.norm1);
    f(p + "wq", l.wq);
    f(p + "wk", l.wk);
    f(p + "wv", l.wv);
    f(p + "wo", l.wo);
    f(p + "norm2", l.norm2);
    f(p + "w_up", l.w_up);
    f(p + "b_up", l.b_up);
    f(p + "w_down", l.w_down);
    f(p + "b_down", l.b_down);
  }
  f(std::string("norm_final"), w.norm_final);
  f(std::string("head.weight"), w.head_w);
  f(std::string("head.bias"), w.head_b);
}

DecoderWeights init_decoder(const DecoderConfig& cfg, const VolumeSpec& spec, std::size_t instruction_vocab,
                            std::size_t max_instruction, std::uint64_t seed);
DecoderWeights zeros_like(const DecoderWeights& w);

/// Hybrid visual + instruction hidden states. Visual rows come first.
struct TokenSequence {
  Tensor hidden;
  std::vector<TokenPosition> positions;
  std::size_t n_visual = 0;
  std::size_t n_instruction = 0;
  std::vector<bool> active;  // per original visual token

  void check() const;
};

struct EmbedCache {
  Tensor patches;
  std::vector<std::uint32_t> instruction;
};

TokenSequence embed_sequence(const DecoderWeights& w, const VolumeSpec& spec, const Tensor& volume,
                             const std::vector<std::uint32_t>& instruction, EmbedCache* cache);
void embed_backward(const DecoderWeights& w, const VolumeSpec& spec, const EmbedCache& cache,
                    const Tensor& grad_hidden, DecoderWeights& grads);

/// Multiply-accumulate counts of the attention score and mixing products per layer.
struct OpCounter {
  std::vector<std::uint64_t> attention_macs;
};

struct LayerCache {
  Tensor input;
  RmsNormCache norm1;
  Tensor x1, q, k, v;
  std::vector<Tensor> probs;  // per head [n, n], causal
  Tensor ctx, h1;
  RmsNormCache norm2;
  Tensor x2, pre, act;
};

Tensor layer_forward(const LayerWeights& lw, const DecoderConfig& cfg, const Tensor& h, LayerCache* cache,
                     std::uint64_t* macs = nullptr);
Tensor layer_backward(const LayerWeights& lw, const DecoderConfig& cfg, const LayerCache& cache,
                      const Tensor& grad_out, LayerWeights& grads);

struct HeadCache {
  Tensor last;  // [1, d] final residual row
  RmsNormCache norm;
  Tensor x;
};
Tensor head_forward(const DecoderWeights& w, const DecoderConfig& cfg, const Tensor& h, HeadCache* cache);
/// Returns the gradient on h (only the final row is non-zero).
Tensor head_backward(const DecoderWeights& w, const DecoderConfig& cfg, const HeadCache& cache,
                     const Tensor& grad_logits, std::size_t n_rows, DecoderWeights& grads);

/// Queries and keys of the selection layer as seen by the saliency estimate.
struct SelectionProjection {
  RmsNormCache norm;
  Tensor x;      // normalized input [n, d]
  Tensor q, k;   // [n, width]
  std::size_t col0 = 0;
  std::size_t width = 0;
  double alpha = 1.0;  // effective head dimension in <q,k>/sqrt(alpha)
};
SelectionProjection selection_projection(const DecoderWeights& w, const DecoderConfig& cfg, const Tensor& h);
Tensor selection_projection_backward(const DecoderWeights& w, const DecoderConfig& cfg, const Tensor& h,
                                     const SelectionProjection& proj, const Tensor& grad_q,
                                     const Tensor& grad_k, DecoderWeights& grads);
Tensor rows(const Tensor& m, std::size_t begin, std::size_t end);

/// Passed to a selection hook at the selection layer.
struct SelectionView {
  const TokenSequence& sequence;  // hidden = input of the selection layer
  Tensor q_instr, k_instr, k_vis;
  double alpha = 1.0;
};

/// A hook result replaces the sequence consumed by the selection layer and
/// everything after it.
struct Selection {
  TokenSequence sequence;
  std::vector<std::size_t> keep;
};
using SelectionHook = std::function<std::optional<Selection>(const SelectionView&)>;

struct DecoderTape {
  std::vector<LayerCache> layers;
  HeadCache head;
  Tensor selection_input;
  std::optional<Selection> selection;
  Tensor logits;
  OpCounter ops;
};

DecoderTape decoder_forward(const DecoderWeights& w, const DecoderConfig& cfg, const TokenSequence& seq,
                            const SelectionHook& hook = {});

/// Backpropagates through layers [from, to) in reverse; caches indexed by layer.
Tensor backward_layers(const DecoderWeights& w, const DecoderConfig& cfg, const std::vector<LayerCache>& caches,
                       std::size_t from, std::size_t to, Tensor grad, DecoderWeights& grads);

}  // namespace tprune
