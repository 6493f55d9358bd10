// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "tprune/its.hpp"
#include "tprune/ops.hpp"
#include "tprune/sgp.hpp"

using namespace tprune;
using doctest::Approx;

namespace {

Tensor randn(std::size_t r, std::size_t c, std::mt19937_64& rng, double scale = 1.0) {
  Tensor t({r, c});
  std::normal_distribution<double> n(0.0, scale);
  for (auto& v : t.data()) v = n(rng);
  return t;
}

}  // namespace

TEST_CASE("scatter examples") {
  const auto g = Tensor::matrix(1, 2, {3.0, -4.0});
  const auto full = scatter_gradients(g, std::vector<std::size_t>{1}, 3);
  CHECK(full == Tensor::matrix(3, 2, {0, 0, 3, -4, 0, 0}));

  std::mt19937_64 rng(1);
  const auto all = randn(4, 3, rng);
  CHECK(scatter_gradients(all, std::vector<std::size_t>{0, 1, 2, 3}, 4) == all);

  const auto none = scatter_gradients(Tensor({0, 3}), std::vector<std::size_t>{}, 2);
  for (double v : none.data()) CHECK(v == 0.0);

  CHECK_THROWS(scatter_gradients(g, std::vector<std::size_t>{3}, 3));
}

TEST_CASE("compress then scatter of ones recovers the surrogate values") {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t nv = 9, d = 3;
    TokenSequence seq;
    seq.hidden = Tensor({nv + 2, d}, 1.0);
    seq.positions = positional_indices(VolumeSpec{126, 14, 14, 14, 1}, 2);  // 9 x 1 x 1 grid
    seq.n_visual = nv;
    seq.n_instruction = 2;
    seq.active.assign(nv, true);
    std::vector<double> rho(nv);
    for (auto& r : rho) r = unit(rng);
    const auto state = retention(rho, unit(rng), 0.2);
    const auto sel = compress(seq, state);
    const auto k = sel.keep.size();
    const auto back = scatter_gradients(rows(sel.sequence.hidden, 0, k), sel.keep, nv);
    for (std::size_t j = 0; j < nv; ++j)
      for (std::size_t c = 0; c < d; ++c) CHECK(back.at(j, c) == state.surrogate[j]);
  }
}

TEST_CASE("taylor proxy examples") {
  const auto eta = taylor_proxy(Tensor::matrix(2, 2, {1, 2, 5, 5}), Tensor::matrix(2, 2, {3, -1, 0, 0}));
  CHECK(eta[0] == 1.0);
  CHECK(eta[1] == 0.0);
}

TEST_CASE("standardize examples") {
  SgpConfig cfg;
  auto z = standardize_proxy(std::vector<double>{2, 2, 2}, std::vector<double>{1, 1, 1}, cfg);
  for (double v : z) CHECK(v == 0.0);

  cfg.eps_std = 1e-12;
  z = standardize_proxy(std::vector<double>{-1, 1}, std::vector<double>{1, 1}, cfg);
  CHECK(z[0] == Approx(-1.0).epsilon(1e-12));
  CHECK(z[1] == Approx(1.0).epsilon(1e-12));

  std::vector<double> eta(20, 0.0);
  eta[5] = 1e6;
  z = standardize_proxy(eta, std::vector<double>(20, 1.0), SgpConfig{});
  CHECK(z[5] == 3.0);
  for (double v : z) CHECK(std::abs(v) <= 3.0);
}

TEST_CASE("directional term examples") {
  const auto r = directional_term(std::vector<double>{0.0, std::log(3.0), 50.0});
  CHECK(r.r[0] == 0.5);
  CHECK(r.d[0] == 0.0);
  CHECK(r.r[1] == Approx(0.75).epsilon(1e-15));
  CHECK(r.d[1] == Approx(-0.25).epsilon(1e-14));
  CHECK(r.d[2] == Approx(-0.5).epsilon(1e-15));
}

TEST_CASE("magnitude scale examples") {
  const SgpConfig cfg;
  auto ms = magnitude_scale(Tensor::matrix(2, 1, {1, 1}), Tensor({2, 1}), std::vector<double>{1, 1}, cfg);
  CHECK(ms.s[0] == 0.5);
  CHECK(ms.s[1] == 0.5);

  ms = magnitude_scale(Tensor::matrix(2, 1, {1, 3}), Tensor::matrix(2, 1, {1, -1}), std::vector<double>{1, 1}, cfg);
  CHECK(ms.m[0] == 1.0);
  CHECK(ms.m[1] == 3.0);
  CHECK(ms.s[0] == Approx(0.5).epsilon(1e-6));
  CHECK(ms.s[1] == Approx(1.5).epsilon(1e-6));

  std::vector<double> t(10, 1.0), g(10, 1.0);
  g[0] = 100.0;
  ms = magnitude_scale(Tensor({10, 1}, t), Tensor({10, 1}, g), std::vector<double>(10, 1.0), cfg);
  CHECK(ms.s[0] == 2.0);
}

TEST_CASE("surrogate gradient examples") {
  const SgpConfig cfg;
  const auto g = surrogate_grad_q(std::vector<double>{0.0, -0.25, 0.3}, std::vector<double>{1.0, 1.5, 1.0},
                                  std::vector<double>{0.5, 0.5, 0.999}, cfg);
  CHECK(g[0] == 0.0);
  CHECK(g[1] == Approx(-0.075).epsilon(1e-15));
  CHECK(g[2] == Approx(0.8 * 0.3 * 5e-3).epsilon(1e-15));
}

TEST_CASE("surrogate signals satisfy their ranges and match the straight-line reference") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (auto score : {ProxyScore::eta, ProxyScore::loss_increase}) {
    SgpConfig cfg;
    cfg.score = score;
    for (int trial = 0; trial < 200; ++trial) {
      const std::size_t n = 3 + rng() % 20, d = 1 + rng() % 8;
      const auto t = randn(n, d, rng), g = randn(n, d, rng, 0.1);
      std::vector<double> mask(n), q(n);
      for (std::size_t j = 0; j < n; ++j) {
        q[j] = unit(rng);
        mask[j] = unit(rng) < 0.7 ? 1.0 : q[j];
      }
      const auto sig = sgp_signals(t, g, mask, q, cfg);
      const auto ref = oracle::surrogate_grad_q(t, g, mask, q, cfg);
      for (std::size_t j = 0; j < n; ++j) {
        CHECK(std::abs(sig.z_std[j]) <= cfg.clip);
        CHECK(sig.r[j] > 0.0);
        CHECK(sig.r[j] < 1.0);
        CHECK(sig.s[j] >= cfg.s_min);
        CHECK(sig.s[j] <= cfg.s_max);
        CHECK(sig.grad_q[j] == cfg.beta * sig.d[j] * sig.s[j] * std::max(q[j] * (1 - q[j]), cfg.eps_sat));
        CHECK(std::abs(sig.grad_q[j] - ref[j]) <= 1e-12);
      }
    }
  }
}

TEST_CASE("the loss-increase score reverses the directional term") {
  std::mt19937_64 rng(4);
  const auto t = randn(6, 4, rng), g = randn(6, 4, rng);
  const std::vector<double> mask(6, 1.0), q(6, 0.5);
  SgpConfig a, b;
  b.score = ProxyScore::loss_increase;
  const auto sa = sgp_signals(t, g, mask, q, a), sb = sgp_signals(t, g, mask, q, b);
  for (std::size_t j = 0; j < 6; ++j) {
    CHECK(sa.eta[j] == sb.eta[j]);
    CHECK(sb.d[j] == Approx(-sa.d[j]).epsilon(1e-12));
  }
}

TEST_CASE("threshold backprop examples and signs") {
  const auto zero = backprop_threshold(std::vector<double>{0, 0}, std::vector<double>{0.2, 0.9}, 0.5, 0.2);
  CHECK(zero.theta == 0.0);
  CHECK(zero.rho == std::vector<double>{0.0, 0.0});

  const auto one = backprop_threshold(std::vector<double>{-0.075}, std::vector<double>{0.6}, 0.5, 0.2);
  const double dq_dtheta = -5.0 * sigmoid(0.5) * (1 - sigmoid(0.5));
  CHECK(one.theta == Approx(-0.075 * dq_dtheta).epsilon(1e-14));
  CHECK(one.theta > 0.0);

  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  for (int i = 0; i < 1000; ++i) {
    double gq = unit(rng);
    if (gq == 0.0) gq = 0.1;
    const auto r = backprop_threshold(std::vector<double>{gq}, std::vector<double>{unit(rng)}, unit(rng), 0.2);
    CHECK((r.theta > 0) == (gq < 0));
    CHECK((r.rho[0] > 0) == (gq > 0));
  }
}

TEST_CASE("a descent step moves q against d") {
  const auto r = oracle::sign_dynamics(1000, 11);
  CHECK(r.passed == r.total);
}

TEST_CASE("stop-gradient branches carry no gradient") {
  // The straight-through backward ignores the hard mask: two states that
  // differ only in M give bit-identical gradients on theta and rho.
  const std::vector<double> rho{0.1, 0.4, 0.7, 0.9};
  auto a = retention(rho, 0.5, 0.2);
  auto b = a;
  b.mask = {1, 1, 0, 1};
  finalize_mask(b, rho);
  REQUIRE(a.surrogate != b.surrogate);
  const std::vector<double> upstream{0.3, -0.2, 0.5, 0.1};
  const auto ga = backprop_threshold(surrogate_backward(upstream), rho, a.theta, a.tau);
  const auto gb = backprop_threshold(surrogate_backward(upstream), rho, b.theta, b.tau);
  CHECK(ga.theta == gb.theta);
  CHECK(ga.rho == gb.rho);
}

TEST_CASE("leave-one-out oracle") {
  // A row that is already zero changes nothing.
  DecoderConfig cfg;
  cfg.n_layers = 1;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.vocab = 3;
  cfg.mlp_ratio = 2;
  cfg.selection_layer = 0;
  const VolumeSpec spec{28, 28, 28, 7, 2};
  const auto w = init_decoder(cfg, spec, 6, 4, 3);
  Tensor vol({28, 28, 28});
  auto seq = embed_sequence(w, spec, vol, {0, 3, 5}, nullptr);
  for (auto& v : seq.hidden.row(2)) v = 0.0;
  CHECK(leave_one_out_oracle(w, cfg, seq, 1, 2) == 0.0);
  CHECK_THROWS_AS(leave_one_out_oracle(w, cfg, seq, 1, 99), ConfigError);
}

TEST_CASE("negated proxy tracks the exact leave-one-out change at small scale") {
  double corr = 0.0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto s = oracle::taylor_sample(seed, 0.01);
    corr += oracle::pearson(s.neg_eta, s.delta) / 5.0;
    // Relative agreement for tokens with a visible effect.
    double big = 0.0;
    for (double v : s.delta) big = std::max(big, std::abs(v));
    for (std::size_t j = 0; j < s.delta.size(); ++j)
      if (std::abs(s.delta[j]) > 0.2 * big) CHECK(std::abs(s.neg_eta[j] - s.delta[j]) <= 0.1 * std::abs(s.delta[j]));
  }
  CHECK(corr >= 0.9);
}

TEST_CASE("first-order error shrinks quadratically with the row norm") {
  // The remainder |dL + eta| / ||T_j||^2 stays bounded as the scale drops.
  const auto a = oracle::taylor_sample(2, 0.04), b = oracle::taylor_sample(2, 0.01);
  double ca = 0.0, cb = 0.0;
  for (std::size_t j = 0; j < a.delta.size(); ++j) {
    ca = std::max(ca, std::abs(a.delta[j] - a.neg_eta[j]) / a.norm2[j]);
    cb = std::max(cb, std::abs(b.delta[j] - b.neg_eta[j]) / b.norm2[j]);
  }
  CHECK(cb <= 2.0 * ca);
  for (std::size_t j = 0; j < b.delta.size(); ++j) CHECK(std::abs(b.delta[j] - b.neg_eta[j]) <= 2.0 * ca * b.norm2[j]);
}
