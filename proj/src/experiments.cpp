// SPDX-License-Identifier: Apache-2.0
#include "tprune/experiments.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <iomanip>
#include <ostream>
#include <random>

#include "tprune/objectives.hpp"
#include "tprune/ops.hpp"
#include "tprune/sgp.hpp"

namespace tprune {

namespace {

Tensor randn(std::vector<std::size_t> shape, std::mt19937_64& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, scale);
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

double inner(std::span<const double> a, std::span<const double> b) { return dot(a, b); }

void copy_into(Tensor* grad, std::span<const double> g) {
  if (grad) std::copy(g.begin(), g.end(), grad->data().begin());
}

struct Check {
  std::string name;
  // Builds a fresh random problem and returns (f, x).
  std::function<std::pair<ScalarFn, Tensor>(std::mt19937_64&)> make;
};

DecoderConfig tiny_decoder() {
  DecoderConfig c;
  c.n_layers = 1;
  c.d_model = 8;
  c.n_heads = 2;
  c.vocab = 4;
  c.mlp_ratio = 2;
  c.selection_layer = 0;
  return c;
}

const VolumeSpec kTinySpec{4, 4, 4, 2, 1};

DecoderWeights tiny_weights(std::mt19937_64& rng) {
  auto w = init_decoder(tiny_decoder(), kTinySpec, 8, 4, rng());
  // Move norm gains and biases off their initial constants.
  for_each_param(w, [&](const std::string&, Tensor& t) {
    std::normal_distribution<double> jitter(0.0, 0.3);
    for (auto& v : t.data()) v += jitter(rng);
  });
  return w;
}

// Parameter-perturbation check: x replaces the tensor selected by `pick`.
template <class Pick, class Eval>
std::pair<ScalarFn, Tensor> param_check(DecoderWeights w, Pick pick, Eval eval) {
  Tensor x = pick(w);
  ScalarFn f = [w, pick, eval](const Tensor& p, Tensor* grad) mutable {
    pick(w) = p;
    DecoderWeights g = zeros_like(w);
    const double v = eval(w, grad ? &g : nullptr);
    if (grad) *grad = pick(g);
    return v;
  };
  return {f, x};
}

// Magnitude in [lo, hi] with a random sign. Gradient probes drawn this way keep
// every coordinate well above the central-difference roundoff floor.
double away_from_zero(std::mt19937_64& rng, double lo, double hi) {
  const double m = std::uniform_real_distribution<double>(lo, hi)(rng);
  return (rng() & 1) ? m : -m;
}

ThresholdPredictor conditioned_predictor(std::mt19937_64& rng) {
  ThresholdPredictor p{Tensor({12, 6}), Tensor({6}), Tensor({6}), Tensor({1})};
  for (auto& v : p.w1.data()) v = away_from_zero(rng, 0.1, 0.4);
  for (auto& v : p.b1.data()) v = away_from_zero(rng, 0.1, 0.5);
  for (auto& v : p.w2.data()) v = away_from_zero(rng, 0.5, 1.5);
  p.b2[0] = std::uniform_real_distribution<double>(-0.5, 0.5)(rng);
  return p;
}

double min_gap(std::span<const double> x) {
  std::vector<double> s(x.begin(), x.end());
  std::sort(s.begin(), s.end());
  double g = INFINITY;
  for (std::size_t i = 1; i < s.size(); ++i) g = std::min(g, s[i] - s[i - 1]);
  return g;
}

// Smallest |q_t . k_s| over the off-diagonal instruction pairs; the
// centrality hinge sits at zero.
double hinge_margin(const Tensor& q, const Tensor& k) {
  double m = INFINITY;
  for (std::size_t t = 0; t < q.rows(); ++t)
    for (std::size_t s = 0; s < k.rows(); ++s)
      if (s != t) m = std::min(m, std::abs(dot(q.row(t), k.row(s))));
  return m;
}

Tensor& predictor_param(ThresholdPredictor& p, int which) {
  switch (which) {
    case 0: return p.w1;
    case 1: return p.b1;
    case 2: return p.w2;
    default: return p.b2;
  }
}

const Tensor& predictor_param(const ThresholdPredictor& p, int which) {
  return predictor_param(const_cast<ThresholdPredictor&>(p), which);
}

std::vector<Check> all_checks() {
  std::vector<Check> c;
  c.push_back({"row_softmax", [](std::mt19937_64& rng) {
                 const Tensor v = randn({3, 5}, rng);
                 return std::pair<ScalarFn, Tensor>{[v](const Tensor& x, Tensor* g) {
                                                      const Tensor y = row_softmax(x);
                                                      if (g) *g = row_softmax_backward(y, v);
                                                      return inner(v.data(), y.data());
                                                    },
                                                    randn({3, 5}, rng, 2.0)};
               }});
  const auto elementwise = [](std::string name, double (*fn)(double), double (*dfn)(double), double scale) {
    return Check{name, [=](std::mt19937_64& rng) {
                   const Tensor v = randn({8}, rng);
                   return std::pair<ScalarFn, Tensor>{[=](const Tensor& x, Tensor* g) {
                                                        double s = 0.0;
                                                        for (std::size_t i = 0; i < x.size(); ++i) {
                                                          s += v[i] * fn(x[i]);
                                                          if (g) (*g)[i] = v[i] * dfn(x[i]);
                                                        }
                                                        return s;
                                                      },
                                                      randn({8}, rng, scale)};
                 }};
  };
  c.push_back(elementwise("sigmoid", sigmoid, sigmoid_grad, 3.0));
  c.push_back(elementwise("gelu", gelu, gelu_grad, 1.0));
  c.push_back(elementwise("slog", slog, slog_grad, 5.0));
  c.push_back({"minmax_norm", [](std::mt19937_64& rng) {
                 const Tensor v = randn({10}, rng);
                 return std::pair<ScalarFn, Tensor>{[v](const Tensor& x, Tensor* g) {
                                                      const auto y = minmax_norm(x.data());
                                                      if (g) copy_into(g, minmax_norm_backward(x.data(), v.data()));
                                                      return inner(v.data(), y);
                                                    },
                                                    randn({10}, rng)};
               }});
  c.push_back({"masked_stats", [](std::mt19937_64& rng) {
                 std::vector<double> mask(10, 0.0);
                 std::bernoulli_distribution keep(0.6);
                 for (auto& m : mask) m = keep(rng) ? 1.0 : 0.0;
                 mask[0] = mask[1] = 1.0;
                 const double a = std::normal_distribution<double>()(rng), b = std::normal_distribution<double>()(rng);
                 return std::pair<ScalarFn, Tensor>{[=](const Tensor& x, Tensor* g) {
                                                      const auto st = masked_stats(x.data(), mask);
                                                      if (g) copy_into(g, masked_stats_backward(x.data(), mask, a, b));
                                                      return a * st.mean + b * st.std;
                                                    },
                                                    randn({10}, rng)};
               }});
  c.push_back({"rms_norm.input", [](std::mt19937_64& rng) {
                 const Tensor v = randn({3, 6}, rng), gain = randn({6}, rng);
                 return std::pair<ScalarFn, Tensor>{[=](const Tensor& x, Tensor* g) {
                                                      RmsNormCache cache;
                                                      const Tensor y = rms_norm(x, gain, &cache);
                                                      if (g) {
                                                        Tensor gg = Tensor::zeros_like(gain);
                                                        *g = rms_norm_backward(x, gain, cache, v, gg);
                                                      }
                                                      return inner(v.data(), y.data());
                                                    },
                                                    randn({3, 6}, rng)};
               }});
  c.push_back({"rms_norm.gain", [](std::mt19937_64& rng) {
                 const Tensor v = randn({3, 6}, rng), x = randn({3, 6}, rng);
                 return std::pair<ScalarFn, Tensor>{[=](const Tensor& gain, Tensor* g) {
                                                      RmsNormCache cache;
                                                      const Tensor y = rms_norm(x, gain, &cache);
                                                      if (g) {
                                                        g->fill(0.0);
                                                        rms_norm_backward(x, gain, cache, v, *g);
                                                      }
                                                      return inner(v.data(), y.data());
                                                    },
                                                    randn({6}, rng)};
               }});
  c.push_back({"centrality_weights", [](std::mt19937_64& rng) {
                 const Tensor v = randn({4}, rng);
                 const double alpha = 4.0;
                 // Rows 0..3 queries, 4..7 keys; a positive shift keeps most
                 // affinities away from the hinge.
                 Tensor x;
                 do {
                   x = randn({8, 4}, rng);
                   for (auto& e : x.data()) e += 0.7;
                 } while (hinge_margin(rows(x, 0, 4), rows(x, 4, 8)) < 1e-3);
                 return std::pair<ScalarFn, Tensor>{[=](const Tensor& p, Tensor* g) {
                                                      const Tensor q = rows(p, 0, 4), k = rows(p, 4, 8);
                                                      const auto w = centrality_weights(q, k, alpha);
                                                      if (g) {
                                                        auto [gq, gk] = centrality_weights_backward(q, k, alpha, v.data());
                                                        std::copy(gq.data().begin(), gq.data().end(), g->data().begin());
                                                        std::copy(gk.data().begin(), gk.data().end(), g->data().begin() + 16);
                                                      }
                                                      return inner(v.data(), w);
                                                    },
                                                    x};
               }});
  c.push_back({"saliency", [](std::mt19937_64& rng) {
                 const Tensor v = randn({6}, rng);
                 const double alpha = 4.0;
                 // Rows 0..2 instruction queries, 3..8 visual keys, row 9 the weights (first 3 entries).
                 Tensor x;
                 do {
                   x = randn({10, 4}, rng);
                 } while (min_gap(saliency(std::vector<double>{x.at(9, 0), x.at(9, 1), x.at(9, 2)}, rows(x, 0, 3), rows(x, 3, 9), alpha).u) <
                          1e-3);
                 return std::pair<ScalarFn, Tensor>{[=](const Tensor& p, Tensor* g) {
                                                      const Tensor q = rows(p, 0, 3), k = rows(p, 3, 9);
                                                      const std::vector<double> w{p.at(9, 0), p.at(9, 1), p.at(9, 2)};
                                                      const auto s = saliency(w, q, k, alpha);
                                                      if (g) {
                                                        g->fill(0.0);
                                                        const auto sg = saliency_backward(w, q, k, alpha, v.data());
                                                        std::copy(sg.q_instr.data().begin(), sg.q_instr.data().end(),
                                                                  g->data().begin());
                                                        std::copy(sg.k_vis.data().begin(), sg.k_vis.data().end(),
                                                                  g->data().begin() + 12);
                                                        for (int t = 0; t < 3; ++t) g->at(9, t) = sg.w[t];
                                                      }
                                                      return inner(v.data(), s.u);
                                                    },
                                                    x};
               }});
  c.push_back({"threshold_features", [](std::mt19937_64& rng) {
                 std::array<double, 12> v{};
                 for (auto& e : v) e = std::normal_distribution<double>()(rng);
                 // Order statistics have kinks at ties; keep probes clear of them.
                 Tensor x;
                 do {
                   x = randn({2, 9}, rng);
                   std::uniform_real_distribution<double> unit(0.0, 1.0);
                   for (std::size_t j = 0; j < 9; ++j) x.at(0, j) = unit(rng);
                 } while (min_gap(x.row(0)) < 1e-3 || min_gap(x.row(1)) < 1e-3);
                 return std::pair<ScalarFn, Tensor>{[=](const Tensor& p, Tensor* g) {
                                                      const auto rho = p.row(0), u = p.row(1);
                                                      const auto z = threshold_features(rho, u);
                                                      if (g) {
                                                        auto [gr, gu] = threshold_features_backward(rho, u, v);
                                                        std::copy(gr.begin(), gr.end(), g->row(0).begin());
                                                        std::copy(gu.begin(), gu.end(), g->row(1).begin());
                                                      }
                                                      double s = 0.0;
                                                      for (std::size_t i = 0; i < 12; ++i) s += v[i] * z.z[i];
                                                      return s;
                                                    },
                                                    x};
               }});
  c.push_back({"threshold_predictor.features", [](std::mt19937_64& rng) {
                 const auto pred = conditioned_predictor(rng);
                 return std::pair<ScalarFn, Tensor>{[=](const Tensor& x, Tensor* g) {
                                                      ThresholdFeatures f;
                                                      std::copy(x.data().begin(), x.data().end(), f.z.begin());
                                                      PredictorCache cache;
                                                      const double theta = predict_threshold(f, pred, &cache);
                                                      if (g) {
                                                        auto grads = zeros_like(pred);
                                                        copy_into(g, predict_threshold_backward(pred, cache, 1.0, grads));
                                                      }
                                                      return theta;
                                                    },
                                                    randn({12}, rng)};
               }});
  for (int which = 0; which < 4; ++which) {
    static const char* const kNames[] = {"threshold_predictor.w1", "threshold_predictor.b1", "threshold_predictor.w2",
                                         "threshold_predictor.b2"};
    c.push_back({kNames[which], [which](std::mt19937_64& rng) {
                   const auto base = conditioned_predictor(rng);
                   ThresholdFeatures f;
                   for (auto& e : f.z) e = away_from_zero(rng, 0.3, 1.5);
                   return std::pair<ScalarFn, Tensor>{[=](const Tensor& x, Tensor* g) {
                                                        auto pred = base;
                                                        predictor_param(pred, which) = x;
                                                        PredictorCache cache;
                                                        const double theta = predict_threshold(f, pred, &cache);
                                                        if (g) {
                                                          auto grads = zeros_like(pred);
                                                          predict_threshold_backward(pred, cache, 1.0, grads);
                                                          *g = predictor_param(grads, which);
                                                        }
                                                        return theta;
                                                      },
                                                      predictor_param(base, which)};
                 }});
  }
  c.push_back({"threshold_path", [](std::mt19937_64& rng) {
                 // Instruction queries (3), instruction keys (3), visual keys (7)
                 // through centrality, saliency, features, predictor and q.
                 const auto pred = conditioned_predictor(rng);
                 const Tensor v = randn({7}, rng);
                 const double a = std::normal_distribution<double>()(rng);
                 const double alpha = 4.0, tau = 0.2;
                 Tensor x;
                 for (;;) {
                   x = randn({13, 4}, rng);
                   for (std::size_t r = 0; r < 6; ++r)
                     for (auto& e : x.row(r)) e += 0.6;
                   const auto tr = its_forward(rows(x, 0, 3), rows(x, 3, 6), rows(x, 6, 13), alpha, pred, tau);
                   if (hinge_margin(rows(x, 0, 3), rows(x, 3, 6)) >= 1e-3 && min_gap(tr.sal.u) >= 1e-3) break;
                 }
                 return std::pair<ScalarFn, Tensor>{[=](const Tensor& p, Tensor* g) {
                                                      const Tensor qi = rows(p, 0, 3), ki = rows(p, 3, 6), kv = rows(p, 6, 13);
                                                      const auto tr = its_forward(qi, ki, kv, alpha, pred, tau);
                                                      if (g) {
                                                        const auto tg = backprop_threshold(v.data(), tr.sal.rho,
                                                                                           tr.state.theta, tau);
                                                        auto pg = zeros_like(pred);
                                                        const auto ig = its_backward(tr, pred, tg.theta + a, tg.rho, pg);
                                                        std::copy(ig.q_instr.data().begin(), ig.q_instr.data().end(),
                                                                  g->data().begin());
                                                        std::copy(ig.k_instr.data().begin(), ig.k_instr.data().end(),
                                                                  g->data().begin() + 12);
                                                        std::copy(ig.k_vis.data().begin(), ig.k_vis.data().end(),
                                                                  g->data().begin() + 24);
                                                      }
                                                      return inner(v.data(), tr.state.q) + a * tr.state.theta;
                                                    },
                                                    x};
               }});
  // w1 enters only through the b1 gradient times the features, so b1, w2 and b2
  // cover the predictor end of the composed path.
  for (int which = 1; which < 4; ++which) {
    static const char* const kNames[] = {"", "threshold_path.b1", "threshold_path.w2", "threshold_path.b2"};
    c.push_back({kNames[which], [which](std::mt19937_64& rng) {
                   const auto base = conditioned_predictor(rng);
                   const Tensor qi = randn({3, 4}, rng), ki = randn({3, 4}, rng), kv = randn({7, 4}, rng);
                   const Tensor v = randn({7}, rng);
                   return std::pair<ScalarFn, Tensor>{[=](const Tensor& x, Tensor* g) {
                                                        auto pred = base;
                                                        predictor_param(pred, which) = x;
                                                        const auto tr = its_forward(qi, ki, kv, 4.0, pred, 0.2);
                                                        if (g) {
                                                          const auto tg = backprop_threshold(v.data(), tr.sal.rho,
                                                                                             tr.state.theta, 0.2);
                                                          auto pg = zeros_like(pred);
                                                          its_backward(tr, pred, tg.theta, tg.rho, pg);
                                                          *g = predictor_param(pg, which);
                                                        }
                                                        return inner(v.data(), tr.state.q);
                                                      },
                                                      predictor_param(base, which)};
                 }});
  }
  c.push_back({"cross_entropy", [](std::mt19937_64& rng) {
                 const auto target = std::uniform_int_distribution<std::size_t>(0, 5)(rng);
                 return std::pair<ScalarFn, Tensor>{[=](const Tensor& x, Tensor* g) {
                                                      const auto l = cross_entropy(x.data(), target);
                                                      copy_into(g, l.grad);
                                                      return l.value;
                                                    },
                                                    randn({6}, rng, 2.0)};
               }});
  c.push_back({"robust_loss", [](std::mt19937_64& rng) {
                 return std::pair<ScalarFn, Tensor>{[](const Tensor& x, Tensor* g) {
                                                      const auto l = robust_loss(x.data());
                                                      copy_into(g, l.grad);
                                                      return l.value;
                                                    },
                                                    randn({6}, rng, 2.0)};
               }});
  c.push_back({"flip_loss", [](std::mt19937_64& rng) {
                 const auto target = std::uniform_int_distribution<std::size_t>(0, 5)(rng);
                 return std::pair<ScalarFn, Tensor>{[=](const Tensor& x, Tensor* g) {
                                                      const auto l = flip_loss_logits(x.data(), target, kDefaultEpsFlip);
                                                      copy_into(g, l.grad);
                                                      return l.value;
                                                    },
                                                    randn({6}, rng, 1.5)};
               }});
  c.push_back({"band_loss", [](std::mt19937_64& rng) {
                 // Draw q from a range that puts the mean on either side of the band.
                 const bool high = std::bernoulli_distribution(0.5)(rng);
                 Tensor x({10});
                 std::uniform_real_distribution<double> dist(high ? 0.85 : 0.0, high ? 1.0 : 0.25);
                 for (auto& e : x.data()) e = dist(rng);
                 return std::pair<ScalarFn, Tensor>{[](const Tensor& q, Tensor* g) {
                                                      const auto l = band_loss(q.data(), BandConfig{});
                                                      copy_into(g, l.grad);
                                                      return l.value;
                                                    },
                                                    x};
               }});
  c.push_back({"decoder_layer.input", [](std::mt19937_64& rng) {
                 const auto w = tiny_weights(rng);
                 const auto cfg = tiny_decoder();
                 const Tensor v = randn({5, 8}, rng);
                 return std::pair<ScalarFn, Tensor>{[=](const Tensor& h, Tensor* g) {
                                                      LayerCache cache;
                                                      const Tensor y = layer_forward(w.layers[0], cfg, h, &cache);
                                                      if (g) {
                                                        auto grads = zeros_like(w);
                                                        *g = layer_backward(w.layers[0], cfg, cache, v, grads.layers[0]);
                                                      }
                                                      return inner(v.data(), y.data());
                                                    },
                                                    randn({5, 8}, rng)};
               }});
  for (const char* which : {"wq", "wv", "w_up", "norm1", "norm2"}) {
    c.push_back({std::string("decoder_layer.") + which, [which = std::string(which)](std::mt19937_64& rng) {
                   const auto cfg = tiny_decoder();
                   const Tensor h = randn({5, 8}, rng), v = randn({5, 8}, rng);
                   const auto pick = [which](DecoderWeights& w) -> Tensor& {
                     auto& l = w.layers[0];
                     if (which == "wq") return l.wq;
                     if (which == "wv") return l.wv;
                     if (which == "w_up") return l.w_up;
                     if (which == "norm1") return l.norm1;
                     return l.norm2;
                   };
                   return param_check(tiny_weights(rng), pick, [=](const DecoderWeights& w, DecoderWeights* g) {
                     LayerCache cache;
                     const Tensor y = layer_forward(w.layers[0], cfg, h, &cache);
                     if (g) layer_backward(w.layers[0], cfg, cache, v, g->layers[0]);
                     return inner(v.data(), y.data());
                   });
                 }});
  }
  c.push_back({"answer_head", [](std::mt19937_64& rng) {
                 const auto w = tiny_weights(rng);
                 const auto cfg = tiny_decoder();
                 const Tensor v = randn({4}, rng);
                 return std::pair<ScalarFn, Tensor>{[=](const Tensor& h, Tensor* g) {
                                                      HeadCache cache;
                                                      const Tensor y = head_forward(w, cfg, h, &cache);
                                                      if (g) {
                                                        auto grads = zeros_like(w);
                                                        *g = head_backward(w, cfg, cache, v, h.rows(), grads);
                                                      }
                                                      return inner(v.data(), y.data());
                                                    },
                                                    randn({5, 8}, rng)};
               }});
  c.push_back({"selection_projection", [](std::mt19937_64& rng) {
                 const auto w = tiny_weights(rng);
                 const auto cfg = tiny_decoder();
                 const Tensor vq = randn({5, 4}, rng), vk = randn({5, 4}, rng);
                 return std::pair<ScalarFn, Tensor>{[=](const Tensor& h, Tensor* g) {
                                                      const auto p = selection_projection(w, cfg, h);
                                                      if (g) {
                                                        auto grads = zeros_like(w);
                                                        *g = selection_projection_backward(w, cfg, h, p, vq, vk, grads);
                                                      }
                                                      return inner(vq.data(), p.q.data()) + inner(vk.data(), p.k.data());
                                                    },
                                                    randn({5, 8}, rng)};
               }});
  c.push_back({"embedding.patch", [](std::mt19937_64& rng) {
                 const auto cfg = tiny_decoder();
                 const Tensor volume = randn({4, 4, 4}, rng);
                 const std::vector<std::uint32_t> instr{0, 3, 5};
                 const Tensor v = randn({8 + 3, 8}, rng);
                 (void)cfg;
                 return param_check(
                     tiny_weights(rng), [](DecoderWeights& w) -> Tensor& { return w.patch.weight; },
                     [=](const DecoderWeights& w, DecoderWeights* g) {
                       EmbedCache cache;
                       const auto seq = embed_sequence(w, kTinySpec, volume, instr, &cache);
                       if (g) embed_backward(w, kTinySpec, cache, v, *g);
                       return inner(v.data(), seq.hidden.data());
                     });
               }});
  c.push_back({"decoder.end_to_end", [](std::mt19937_64& rng) {
                 auto cfg = tiny_decoder();
                 cfg.n_layers = 2;
                 cfg.selection_layer = 1;
                 const Tensor volume = randn({4, 4, 4}, rng);
                 const std::vector<std::uint32_t> instr{1, 4, 5};
                 const auto target = std::uniform_int_distribution<std::size_t>(0, 3)(rng);
                 auto w = init_decoder(cfg, kTinySpec, 8, 4, rng());
                 return param_check(
                     w, [](DecoderWeights& w) -> Tensor& { return w.pos_depth; },
                     [=](const DecoderWeights& w, DecoderWeights* g) {
                       EmbedCache cache;
                       const auto seq = embed_sequence(w, kTinySpec, volume, instr, &cache);
                       const auto tape = decoder_forward(w, cfg, seq);
                       const auto ce = cross_entropy(tape.logits.data(), target);
                       if (g) {
                         Tensor gh = head_backward(w, cfg, tape.head, Tensor::vector(ce.grad),
                                                   tape.layers.back().input.rows(), *g);
                         gh = backward_layers(w, cfg, tape.layers, 0, cfg.n_layers, std::move(gh), *g);
                         embed_backward(w, kTinySpec, cache, gh, *g);
                       }
                       return ce.value;
                     });
               }});
  return c;
}

template <class T>
double median(std::vector<T> v) {
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double time_ms(const Model& m, const SyntheticCase& c, std::size_t* kept) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto inf = infer(m, c.volume, c.instruction);
  const auto t1 = std::chrono::steady_clock::now();
  if (kept) *kept = inf.keep.size();
  return std::chrono::duration<double, std::milli>(t1 - t0).count();
}

}  // namespace

std::vector<GradCheckRow> gradient_suite(std::size_t trials, std::uint64_t seed, double h) {
  std::vector<GradCheckRow> out;
  std::mt19937_64 rng(seed);
  for (const auto& check : all_checks()) {
    GradCheckRow row{check.name, trials, 0.0};
    for (std::size_t t = 0; t < trials; ++t) {
      auto [f, x] = check.make(rng);
      row.max_rel_err = std::max(row.max_rel_err, finite_diff_check(f, x, h));
    }
    out.push_back(row);
  }
  return out;
}

void write_grad_check_csv(const std::vector<GradCheckRow>& rows, double tolerance, std::ostream& out) {
  out << "primitive,trials,max_rel_err,pass\n";
  for (const auto& r : rows) {
    out << r.name << ',' << r.trials << ',' << std::setprecision(6) << r.max_rel_err << ','
        << (r.max_rel_err < tolerance ? 1 : 0) << '\n';
  }
}

VolumeSpec bench_volume(std::size_t n_visual) {
  if (n_visual == 0 || n_visual % 64) throw ConfigError("bench N_v must be a positive multiple of 64");
  return VolumeSpec{7 * (n_visual / 64), 112, 112, 7, 2};
}

std::vector<BenchRow> throughput_bench(const Model& model, std::size_t runs, std::uint64_t seed) {
  if (runs == 0) throw ConfigError("bench needs at least one run");
  Model full = model;
  full.config.its = false;
  Model adaptive = model;
  adaptive.config.its = true;
  const auto c = generate_case(seed, model.config.volume, TaskKind::existence);
  std::size_t kept = 0;
  time_ms(full, c, nullptr);  // warm caches and allocator
  time_ms(adaptive, c, &kept);
  std::vector<double> tf, ta;
  for (std::size_t r = 0; r < runs; ++r) {
    tf.push_back(time_ms(full, c, nullptr));
    ta.push_back(time_ms(adaptive, c, nullptr));
  }
  const auto nv = model.config.volume.n_visual();
  const double mf = median(tf), ma = median(ta);
  return {BenchRow{nv, "full", 1.0, mf, 1.0},
          BenchRow{nv, "adaptive", static_cast<double>(kept) / static_cast<double>(nv), ma, mf / ma}};
}

double self_speedup(const Model& model, std::size_t runs, std::uint64_t seed) {
  Model full = model;
  full.config.its = false;
  const auto c = generate_case(seed, model.config.volume, TaskKind::existence);
  time_ms(full, c, nullptr);
  std::vector<double> a, b;
  for (std::size_t r = 0; r < runs; ++r) {
    a.push_back(time_ms(full, c, nullptr));
    b.push_back(time_ms(full, c, nullptr));
  }
  return median(a) / median(b);
}

void write_bench_csv(const std::vector<BenchRow>& rows, std::ostream& out) {
  out << "n_visual,config,retention,median_ms,speedup\n";
  for (const auto& r : rows) {
    out << r.n_visual << ',' << r.config << ',' << std::setprecision(6) << r.retention << ',' << r.median_ms << ','
        << r.speedup << '\n';
  }
}

double flop_speedup(const DecoderConfig& cfg, std::size_t n_visual, std::size_t n_instruction, double kept) {
  const double d = static_cast<double>(cfg.d_model);
  const double hidden = d * static_cast<double>(cfg.mlp_ratio);
  const auto layer = [&](double n) { return d * n * (n + 1.0) + 4.0 * n * d * d + 2.0 * n * d * hidden; };
  const double nt = static_cast<double>(n_instruction);
  const double full_n = static_cast<double>(n_visual) + nt;
  const double pruned_n = kept + nt;
  double full = 0.0, pruned = 0.0;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    full += layer(full_n);
    pruned += layer(l < cfg.selection_layer ? full_n : pruned_n);
  }
  return full / pruned;
}

TrainConfig apply_toggle(TrainConfig cfg, const std::string& toggle) {
  const auto n = cfg.model.decoder.n_layers;
  if (toggle == "its_sgp") cfg.model.its = false;
  else if (toggle == "self_affinity") cfg.model.self_affinity = false;
  else if (toggle == "robust_reg") cfg.robust_reg = false;
  else if (toggle == "flip_reg") cfg.flip_reg = false;
  else if (toggle == "layer=0") cfg.model.decoder.selection_layer = 0;
  else if (toggle == "layer=n/4") cfg.model.decoder.selection_layer = n / 4;
  else if (toggle == "layer=n/2") cfg.model.decoder.selection_layer = n / 2;
  else if (toggle == "layer=3n/4") cfg.model.decoder.selection_layer = 3 * n / 4;
  else throw ConfigError("unknown ablation toggle '" + toggle + "'");
  cfg.validate();
  return cfg;
}

double band_trigger_frequency(const RunMetrics& m) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& r : m.steps) {
    if (r.stage != Stage::hard) continue;
    sum += r.band_trigger;
    ++n;
  }
  return n ? sum / static_cast<double>(n) : 0.0;
}

std::vector<AblationRow> ablate(const TrainConfig& cfg, const std::vector<std::string>& toggles) {
  std::vector<std::pair<std::string, TrainConfig>> runs{{"full", cfg}};
  for (const auto& t : toggles) runs.emplace_back("w/o " + t, apply_toggle(cfg, t));
  for (auto& [name, c] : runs) {
    if (name.starts_with("w/o layer=")) name = name.substr(4);
  }
  std::vector<AblationRow> out;
  for (const auto& [name, c] : runs) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto result = train(c);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    AblationRow row;
    row.name = name;
    row.eval = evaluate(result.model, c.task, c.data, c.eval_cases, c.eval_seed);
    row.retained_tokens = row.eval.retention * static_cast<double>(c.model.volume.n_visual());
    row.train_steps_per_s = secs > 0 ? static_cast<double>(c.total_steps) / secs : 0.0;
    row.band_trigger_freq = band_trigger_frequency(result.metrics);
    row.final_loss = result.metrics.steps.empty() ? 0.0 : result.metrics.steps.back().loss;
    out.push_back(row);
  }
  return out;
}

void write_ablation_csv(const std::vector<AblationRow>& rows, std::ostream& out) {
  out << "config,accuracy,retained_tokens,retention,coverage,jaccard,train_steps_per_s,infer_tokens_per_s,"
         "band_trigger_freq\n";
  for (const auto& r : rows) {
    out << r.name << ',' << std::setprecision(6) << r.eval.accuracy << ',' << r.retained_tokens << ','
        << r.eval.retention << ',' << r.eval.coverage << ',' << r.eval.jaccard << ',' << r.train_steps_per_s << ','
        << r.eval.tokens_per_s << ',' << r.band_trigger_freq << '\n';
  }
}

void write_its_trace_csv(const ItsTrace& trace, const std::vector<TokenPosition>& positions, std::ostream& out) {
  const auto nv = trace.sal.rho.size();
  if (positions.size() < nv) throw ShapeError("trace dump needs a position per visual token");
  out << "token_index,depth,row,col,u,rho,q,mask\n" << std::setprecision(12);
  for (std::size_t j = 0; j < nv; ++j) {
    const auto& p = positions[j];
    out << j << ',' << p.grid[0] << ',' << p.grid[1] << ',' << p.grid[2] << ',' << trace.sal.u[j] << ','
        << trace.sal.rho[j] << ',' << trace.state.q[j] << ',' << static_cast<int>(trace.state.mask[j]) << '\n';
  }
}

}  // namespace tprune
