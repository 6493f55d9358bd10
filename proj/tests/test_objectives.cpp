// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <random>

#include "tprune/objectives.hpp"
#include "tprune/ops.hpp"
#include "tprune/trainer.hpp"

using namespace tprune;
using doctest::Approx;

namespace {

double numeric(const std::function<double(const std::vector<double>&)>& f, std::vector<double> x, std::size_t i,
               double h = 1e-6) {
  x[i] += h;
  const double up = f(x);
  x[i] -= 2 * h;
  return (up - f(x)) / (2 * h);
}

}  // namespace

TEST_CASE("cross entropy examples") {
  CHECK(cross_entropy(std::vector<double>{0.3, 0.3, 0.3, 0.3}, 2).value == Approx(std::log(4.0)).epsilon(1e-14));
  const auto l = cross_entropy(std::vector<double>{10, 0, 0}, 0);
  CHECK(l.value == Approx(std::log1p(2 * std::exp(-10.0))).epsilon(1e-12));
  CHECK(l.value == Approx(9.08e-5).epsilon(1e-3));

  std::mt19937_64 rng(1);
  std::normal_distribution<double> n;
  std::vector<double> x(5);
  for (auto& v : x) v = n(rng);
  const auto ce = cross_entropy(x, 3);
  for (std::size_t i = 0; i < 5; ++i)
    CHECK(std::abs(numeric([](const auto& v) { return cross_entropy(v, 3).value; }, x, i) - ce.grad[i]) < 1e-6);
}

TEST_CASE("band loss examples") {
  const BandConfig cfg;
  CHECK(band_loss(std::vector<double>(4, 0.5), cfg).value == 0.0);
  CHECK(band_loss(std::vector<double>(4, 0.9), cfg).value == Approx(0.1).epsilon(1e-12));
  CHECK(band_loss(std::vector<double>(4, 0.1), cfg).value == Approx(0.2).epsilon(1e-12));
  BandConfig bad{0.8, 0.3};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("band loss slope is 1/N outside the band and zero inside") {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const BandConfig cfg;
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<double> q(6);
    for (auto& v : q) v = unit(rng);
    double r = 0.0;
    for (double v : q) r += v / 6.0;
    if (std::abs(r - 0.3) < 1e-3 || std::abs(r - 0.8) < 1e-3) continue;
    const auto b = band_loss(q, cfg);
    const double slope = r > 0.8 ? 1.0 / 6.0 : r < 0.3 ? -1.0 / 6.0 : 0.0;
    for (std::size_t j = 0; j < 6; ++j) {
      CHECK(b.grad[j] == Approx(slope).epsilon(1e-12));
      CHECK(numeric([&](const auto& v) { return band_loss(v, cfg).value; }, q, j) == Approx(slope).epsilon(1e-6));
    }
  }
}

TEST_CASE("a band step pushes mean q back toward the band") {
  for (double level : {0.05, 0.2, 0.85, 0.97}) {
    std::vector<double> q(8, level);
    const auto b = band_loss(q, BandConfig{});
    REQUIRE(b.value > 0.0);
    double r0 = 0.0, r1 = 0.0;
    for (std::size_t j = 0; j < q.size(); ++j) {
      r0 += q[j];
      r1 += q[j] - 0.5 * b.grad[j];
    }
    CHECK(std::abs(r1 / 8 - 0.55) < std::abs(r0 / 8 - 0.55));
  }
}

TEST_CASE("robust loss examples") {
  CHECK(robust_loss(std::vector<double>{1, 1, 1}).value == Approx(-std::log(3.0)).epsilon(1e-14));
  CHECK(robust_loss(std::vector<double>{100, 0, 0}).value > -1e-40);
  const auto l = robust_loss(std::vector<double>{std::log(3.0), 0.0});
  CHECK(l.value == Approx(0.75 * std::log(0.75) + 0.25 * std::log(0.25)).epsilon(1e-14));
  CHECK(l.value == Approx(-0.5623).epsilon(1e-4));
}

TEST_CASE("robust loss is minimized at uniform logits") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n;
  const double base = robust_loss(std::vector<double>(5, 0.7)).value;
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> x(5, 0.7);
    for (auto& v : x) v += 1e-2 * n(rng);
    CHECK(robust_loss(x).value > base);
  }
  std::vector<double> x(4);
  for (auto& v : x) v = n(rng);
  const auto r = robust_loss(x);
  for (std::size_t i = 0; i < 4; ++i)
    CHECK(std::abs(numeric([](const auto& v) { return robust_loss(v).value; }, x, i) - r.grad[i]) < 1e-7);
}

TEST_CASE("flip loss examples and monotonicity") {
  CHECK(flip_loss(0.0, 1e-6).value == Approx(-1e-6).epsilon(1e-5));
  CHECK(flip_loss(1.0, 1e-6).value == Approx(-std::log(1e-6)).epsilon(1e-14));
  CHECK(flip_loss(0.5, 1e-6).value == Approx(std::log(2.0)).epsilon(1e-5));
  double prev = flip_loss(0.0, 1e-6).value;
  for (double p = 0.01; p <= 1.0; p += 0.01) {
    const double v = flip_loss(p, 1e-6).value;
    CHECK(v > prev);
    prev = v;
  }

  std::mt19937_64 rng(4);
  std::normal_distribution<double> n;
  std::vector<double> x(3);
  for (auto& v : x) v = n(rng);
  const auto fl = flip_loss_logits(x, 1, 1e-6);
  const auto p = row_softmax(Tensor::matrix(1, 3, x));
  CHECK(fl.value == Approx(flip_loss(p[1], 1e-6).value).epsilon(1e-14));
  for (std::size_t i = 0; i < 3; ++i)
    CHECK(std::abs(numeric([](const auto& v) { return flip_loss_logits(v, 1, 1e-6).value; }, x, i) - fl.grad[i]) <
          1e-7);
}

TEST_CASE("flip_mask examples") {
  const std::vector<double> rho{0.9, 0.1, 0.8};
  auto s = retention(rho, 0.5, 0.2);
  REQUIRE(s.mask == std::vector<std::uint8_t>{1, 0, 1});
  const auto f = flip_mask(s, rho);
  CHECK(f.mask == std::vector<std::uint8_t>{0, 1, 0});
  CHECK(f.keep == std::vector<std::size_t>{1});
  CHECK(f.q == s.q);
  CHECK(f.theta == s.theta);
  CHECK(f.surrogate == std::vector<double>{0, 1, 0});
  CHECK(flip_mask(f, rho).mask == s.mask);

  const auto all = retention(rho, 0.0, 0.2);
  const auto none = flip_mask(all, rho);
  CHECK(none.fallback);
  CHECK(none.keep == std::vector<std::size_t>{0});
}

TEST_CASE("select_mode examples and frequencies") {
  std::mt19937_64 rng(5);
  ModeSchedule pure{1.0, 0.0, 0.0, 0.0};
  for (int i = 0; i < 200; ++i) CHECK(select_mode(i, rng, pure) == LossMode{LossKind::ce, false});
  ModeSchedule flip{1.0, 0.0, 0.0, 1.0};
  for (int i = 0; i < 200; ++i) CHECK(select_mode(i, rng, flip) == LossMode{LossKind::ce, true});

  const ModeSchedule def;
  double ce = 0, band = 0, robust = 0, flips = 0, non_robust = 0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    const auto m = select_mode(i, rng, def);
    ce += m.kind == LossKind::ce;
    band += m.kind == LossKind::band;
    robust += m.kind == LossKind::robust;
    if (m.kind == LossKind::robust) CHECK(!m.flip_active);
    else {
      non_robust += 1;
      flips += m.flip_active;
    }
  }
  CHECK(std::abs(ce / n - 0.8) <= 0.02);
  CHECK(std::abs(band / n - 0.1) <= 0.02);
  CHECK(std::abs(robust / n - 0.1) <= 0.02);
  CHECK(std::abs(flips / non_robust - 0.1) <= 0.02);

  ModeSchedule bad{0.5, 0.1, 0.1, 0.1};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("band batches carry no answer-head gradient") {
  TrainConfig cfg;
  cfg.model.decoder.d_model = 16;
  cfg.model.decoder.n_heads = 2;
  const auto model = init_model(cfg.model, 3);
  std::mt19937_64 rng(1);
  const auto c = generate_case(11, cfg.model.volume, TaskKind::existence);
  for (auto stage : {Stage::soft, Stage::hard}) {
    auto grads = zeros_like(model);
    const auto r = train_sample(model, cfg, stage, LossMode{LossKind::band, false}, c, rng, grads);
    for (double g : grads.decoder.head_w.data()) CHECK(g == 0.0);
    for (double g : grads.decoder.head_b.data()) CHECK(g == 0.0);
    CHECK(r.loss == Approx(band_loss(std::vector<double>(1, r.mean_q), cfg.band).value).epsilon(1e-12));
  }
  // A ROBUST batch optimizes the entropy term only: its loss is a negative
  // entropy, never a cross-entropy.
  auto grads = zeros_like(model);
  const auto r = train_sample(model, cfg, Stage::hard, LossMode{LossKind::robust, false}, c, rng, grads);
  CHECK(r.loss <= 0.0);
  CHECK(r.loss >= -std::log(static_cast<double>(cfg.model.decoder.vocab)) - 1e-12);
}
