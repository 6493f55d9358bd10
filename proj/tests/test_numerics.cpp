// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

#include "tprune/experiments.hpp"
#include "tprune/ops.hpp"
#include "tprune/tensor.hpp"

using namespace tprune;
using doctest::Approx;

TEST_CASE("row_softmax examples") {
  auto y = row_softmax(Tensor::matrix(1, 2, {0.0, 0.0}));
  CHECK(y[0] == Approx(0.5));
  CHECK(y[1] == Approx(0.5));

  y = row_softmax(Tensor::matrix(1, 2, {1000.0, 1000.0}));
  CHECK(y.all_finite());
  CHECK(y[0] == Approx(0.5));

  y = row_softmax(Tensor::matrix(1, 2, {std::log(1.0), std::log(3.0)}));
  CHECK(y[0] == Approx(0.25).epsilon(1e-14));
  CHECK(y[1] == Approx(0.75).epsilon(1e-14));

  CHECK_THROWS_AS(row_softmax(Tensor({2, 0})), ShapeError);
}

TEST_CASE("row_softmax rows sum to one for large inputs") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> big(-1e4, 1e4);
  Tensor x({20, 9});
  for (auto& v : x.data()) v = big(rng);
  const auto y = row_softmax(x);
  for (std::size_t r = 0; r < y.rows(); ++r) {
    double s = 0.0;
    for (double v : y.row(r)) s += v;
    CHECK(std::abs(s - 1.0) <= 1e-12);
  }
}

TEST_CASE("sigmoid and gelu examples") {
  CHECK(sigmoid(0.0) == 0.5);
  CHECK(gelu(0.0) == 0.0);
  CHECK(sigmoid(std::log(3.0)) == Approx(0.75).epsilon(1e-15));
  // Tanh form, evaluated independently.
  const double x = 1.3;
  const double ref = 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / std::numbers::pi) * (x + 0.044715 * x * x * x)));
  CHECK(gelu(x) == Approx(ref).epsilon(1e-15));
  CHECK(sigmoid(800.0) <= 1.0);
  CHECK(sigmoid(-800.0) >= 0.0);
}

TEST_CASE("minmax_norm examples") {
  auto y = minmax_norm(std::vector<double>{2, 4, 6});
  CHECK(y[0] == 0.0);
  CHECK(y[1] == Approx(0.5).epsilon(1e-6));
  CHECK(y[2] == Approx(1.0).epsilon(1e-6));

  y = minmax_norm(std::vector<double>{5, 5, 5});
  for (double v : y) CHECK(v == 0.0);

  y = minmax_norm(std::vector<double>{-1, 0});
  CHECK(y[0] == 0.0);
  CHECK(y[1] == Approx(1.0).epsilon(1e-5));
}

TEST_CASE("minmax_norm preserves order and ties") {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> pick(-5, 5);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> x(12);
    for (auto& v : x) v = pick(rng) * 0.7;
    const auto y = minmax_norm(x);
    for (std::size_t i = 0; i < x.size(); ++i) {
      CHECK(y[i] >= 0.0);
      CHECK(y[i] <= 1.0);
      for (std::size_t j = 0; j < x.size(); ++j) {
        if (x[i] < x[j]) CHECK(y[i] < y[j]);
        if (x[i] == x[j]) CHECK(y[i] == y[j]);
      }
    }
  }
}

TEST_CASE("slog examples and odd symmetry") {
  CHECK(slog(0.0) == 0.0);
  CHECK(slog(std::numbers::e - 1.0) == Approx(1.0).epsilon(1e-15));
  CHECK(slog(-(std::numbers::e - 1.0)) == Approx(-1.0).epsilon(1e-15));
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0.0, 100.0);
  for (int i = 0; i < 1000; ++i) {
    const double x = n(rng);
    CHECK(slog(-x) == -slog(x));
  }
  CHECK(slog(2.0) < slog(3.0));
}

TEST_CASE("masked_stats examples") {
  auto s = masked_stats(std::vector<double>{1, 2, 3}, std::vector<double>{1, 1, 1});
  CHECK(s.mean == Approx(2.0));
  CHECK(s.std == Approx(std::sqrt(2.0 / 3.0)));

  s = masked_stats(std::vector<double>{1, 99}, std::vector<double>{1, 0});
  CHECK(s.mean == 1.0);
  CHECK(s.std == 0.0);

  s = masked_stats(std::vector<double>{7}, std::vector<double>{0});
  CHECK(s.mean == 0.0);
  CHECK(s.std == 0.0);
}

TEST_CASE("finite_diff_check examples") {
  const ScalarFn squares = [](const Tensor& x, Tensor* g) {
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      s += x[i] * x[i];
      if (g) (*g)[i] = 2.0 * x[i];
    }
    return s;
  };
  CHECK(finite_diff_check(squares, Tensor::vector({1, 2}), 1e-5) < 1e-6);

  const ScalarFn constant = [](const Tensor&, Tensor* g) {
    if (g) g->fill(0.0);
    return 4.0;
  };
  CHECK(finite_diff_check(constant, Tensor::vector({1, 2, 3})) == 0.0);

  // sigmoid(<a, x>), an independent composition.
  std::mt19937_64 rng(9);
  std::normal_distribution<double> n;
  Tensor a({6}), x({6});
  for (auto& v : a.data()) v = n(rng);
  for (auto& v : x.data()) v = n(rng);
  const ScalarFn comp = [a](const Tensor& p, Tensor* g) {
    const double s = dot(a.data(), p.data());
    if (g)
      for (std::size_t i = 0; i < p.size(); ++i) (*g)[i] = sigmoid_grad(s) * a[i];
    return sigmoid(s);
  };
  CHECK(finite_diff_check(comp, x) < 1e-5);

  const ScalarFn bad = [](const Tensor&, Tensor*) { return std::nan(""); };
  CHECK_THROWS_AS(finite_diff_check(bad, Tensor::vector({1})), EvaluationError);
  CHECK_THROWS_AS(finite_diff_check(constant, Tensor::vector({1}), 0.0), ConfigError);
}

TEST_CASE("a wrong backward rule is caught") {
  const ScalarFn wrong = [](const Tensor& x, Tensor* g) {
    if (g) (*g)[0] = 2.1 * x[0];
    return x[0] * x[0];
  };
  CHECK(finite_diff_check(wrong, Tensor::vector({1.5})) > 1e-3);
}

TEST_CASE("every primitive passes the gradient suite") {
  for (const auto& row : gradient_suite(100, 1)) {
    INFO(row.name);
    CHECK(row.trials == 100);
    CHECK(row.max_rel_err < 1e-4);
  }
}

TEST_CASE("tensor binary round trip") {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n;
  Tensor t({3, 4, 2});
  for (auto& v : t.data()) v = n(rng);
  std::stringstream ss;
  write_tensor(ss, t);
  const auto bytes = ss.str();
  CHECK(bytes.size() == 4 + 3 * 4 + 24 * 8);
  // Little-endian rank header.
  CHECK(static_cast<unsigned char>(bytes[0]) == 3);
  CHECK(bytes[1] == 0);
  CHECK(static_cast<unsigned char>(bytes[4]) == 3);
  const auto back = read_tensor(ss);
  CHECK(back == t);

  std::stringstream truncated(bytes.substr(0, 10));
  CHECK_THROWS(read_tensor(truncated));
}

TEST_CASE("tensor shape checks") {
  CHECK_THROWS_AS(Tensor({2, 3}, std::vector<double>(5)), ShapeError);
  CHECK_THROWS_AS(matmul(Tensor({2, 3}), Tensor({2, 3})), ShapeError);
  const auto a = Tensor::matrix(2, 2, {1, 2, 3, 4});
  const auto b = Tensor::matrix(2, 2, {5, 6, 7, 8});
  CHECK(matmul(a, b) == Tensor::matrix(2, 2, {19, 22, 43, 50}));
  CHECK(matmul_bt(a, b) == matmul(a, transpose(b)));
  CHECK(matmul_at(a, b) == matmul(transpose(a), b));
  DualTensor d(a);
  CHECK(d.grad.same_shape(a));
  for (double v : d.grad.data()) CHECK(v == 0.0);
}
