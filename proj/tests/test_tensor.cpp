#include <doctest.h>

#include <cmath>
#include <functional>

#include "lteode/error.hpp"
#include "lteode/gradcheck.hpp"
#include "lteode/ops.hpp"
#include "test_util.hpp"

using namespace lteode;
using lteode::testing::random_tensor;
using lteode::testing::to_vec;

namespace {

// Gradient of f at x by the tape, for comparison with the finite-difference
// oracle.
Tensor tape_gradient(const std::function<Tensor(const Tensor&)>& f, const Tensor& x) {
  Tensor leaf = x.clone(true);
  Tape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    loss = f(leaf);
  }
  backward(loss, tape);
  return Tensor(leaf.shape(), {leaf.grad().begin(), leaf.grad().end()});
}

double gradient_gap(const std::function<Tensor(const Tensor&)>& f, const Tensor& x) {
  const Tensor analytic = tape_gradient(f, x);
  const Tensor numeric =
      finite_diff_gradient([&](const Tensor& p) { return f(p).item(); }, x, 1e-5);
  return max_relative_error(analytic.data(), numeric.data());
}

}  // namespace

TEST_CASE("tensor construction enforces shape invariants") {
  CHECK_THROWS_AS(Tensor({2, 2}, {1.0, 2.0}), DimensionError);
  CHECK_THROWS_AS(Tensor({0}, {}), DimensionError);
  Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.numel() == 6);
  CHECK_FALSE(t.has_grad());
}

TEST_CASE("matmul") {
  SUBCASE("identity") {
    Tensor id({2, 2}, {1, 0, 0, 1});
    Tensor b({2, 1}, {3, 4});
    CHECK(to_vec(ops::matmul(id, b)) == std::vector<double>{3, 4});
  }
  SUBCASE("scalar product") {
    CHECK(ops::matmul(Tensor({1, 1}, {2}), Tensor({1, 1}, {1})).item() == 2.0);
  }
  SUBCASE("inner dimension mismatch") {
    CHECK_THROWS_AS(ops::matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), DimensionError);
  }
  SUBCASE("gradient against finite differences") {
    std::mt19937_64 rng(7);
    const Tensor a = random_tensor(rng, {3, 4});
    const Tensor b = random_tensor(rng, {4, 2});
    CHECK(gradient_gap([&](const Tensor& x) { return ops::sum(ops::matmul(x, b)); }, a) < 1e-6);
    CHECK(gradient_gap([&](const Tensor& x) { return ops::sum(ops::matmul(a, x)); }, b) < 1e-6);
    // d/dA sum(AB) = 1 b^T: every row equals the row sums of B.
    const Tensor g = tape_gradient([&](const Tensor& x) { return ops::sum(ops::matmul(x, b)); }, a);
    for (std::size_t i = 0; i < 3; ++i) {
      for (std::size_t p = 0; p < 4; ++p) {
        CHECK(g.data()[i * 4 + p] == doctest::Approx(b.data()[p * 2] + b.data()[p * 2 + 1]));
      }
    }
  }
}

TEST_CASE("elementwise family") {
  CHECK(to_vec(ops::hadamard(Tensor({3}, {1, 2, 3}), Tensor({3}, {0, 1, 0}))) ==
        std::vector<double>{0, 2, 0});
  CHECK(to_vec(ops::abs(Tensor({3}, {-1.5, 0, 2}))) == std::vector<double>{1.5, 0, 2});
  CHECK_THROWS_AS(ops::add(Tensor::zeros({2}), Tensor::zeros({3})), DimensionError);
  CHECK(to_vec(ops::add(Tensor({2}, {1, 2}), Tensor::scalar(10))) == std::vector<double>{11, 12});
  CHECK(to_vec(ops::elementwise(ops::Elementwise::scale, Tensor({2}, {1, -2}), std::nullopt, 3.0)) ==
        std::vector<double>{3, -6});
  CHECK_THROWS_AS(ops::elementwise(ops::Elementwise::add, Tensor({1}, {1})), ContractError);

  SUBCASE("hadamard gradient equals the other operand") {
    std::mt19937_64 rng(3);
    const Tensor a = random_tensor(rng, {5});
    const Tensor b = random_tensor(rng, {5});
    const Tensor g = tape_gradient([&](const Tensor& x) { return ops::sum(ops::hadamard(x, b)); }, a);
    CHECK(to_vec(g) == to_vec(b));
    CHECK(gradient_gap([&](const Tensor& x) { return ops::sum(ops::hadamard(x, b)); }, a) < 1e-6);
  }

  SUBCASE("abs subgradient is zero at zero") {
    const Tensor g = tape_gradient([](const Tensor& x) { return ops::sum(ops::abs(x)); },
                                   Tensor({3}, {-2, 0, 2}));
    CHECK(to_vec(g) == std::vector<double>{-1, 0, 1});
  }
}

TEST_CASE("sigmoid") {
  CHECK(ops::sigmoid(Tensor::scalar(0)).item() == 0.5);
  CHECK(ops::sigmoid(Tensor::scalar(0.5)).item() == doctest::Approx(1.0 / (1.0 + std::exp(-0.5))).epsilon(1e-15));
  CHECK(ops::sigmoid(Tensor::scalar(0.5)).item() == doctest::Approx(0.62245933120185456));
  CHECK(std::fabs(ops::sigmoid(Tensor::scalar(50)).item() - 1.0) < 1e-15);

  // Strictly inside (0, 1) wherever float64 can represent it (|x| <= 36).
  std::mt19937_64 rng(11);
  const Tensor x = random_tensor(rng, {200}, -36.0, 36.0);
  const Tensor y = ops::sigmoid(x);
  for (double v : y.data()) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
}

TEST_CASE("concat and split") {
  std::mt19937_64 rng(5);
  const Tensor a = random_tensor(rng, {4, 2});
  const Tensor b = random_tensor(rng, {4, 3});
  const Tensor c = ops::concat_channels(a, b);
  CHECK(c.shape() == Shape{4, 5});
  auto [l, r] = ops::split_channels(c, 2);
  CHECK(to_vec(l) == to_vec(a));
  CHECK(to_vec(r) == to_vec(b));
  CHECK_THROWS_AS(ops::concat_channels(Tensor::zeros({3, 2}), Tensor::zeros({4, 2})), DimensionError);

  const Tensor ga = tape_gradient([&](const Tensor& x) { return ops::sum(ops::concat_channels(x, b)); }, a);
  const Tensor gb = tape_gradient([&](const Tensor& x) { return ops::sum(ops::concat_channels(a, x)); }, b);
  for (double v : ga.data()) CHECK(v == 1.0);
  for (double v : gb.data()) CHECK(v == 1.0);
  CHECK(gradient_gap([&](const Tensor& x) { return ops::sum(ops::concat_channels(x, b)); }, a) < 1e-6);
}

TEST_CASE("mean_abs_error") {
  CHECK(ops::mean_abs_error(Tensor({2}, {1, 2}), Tensor({2}, {2, 4})).item() == 1.5);
  CHECK(ops::mean_abs_error(Tensor({2}, {1, 2}), Tensor({2}, {1, 2})).item() == 0.0);
  CHECK_THROWS_AS(ops::mean_abs_error(Tensor::zeros({2}), Tensor::zeros({3})), DimensionError);

  const Tensor target({4}, {0.5, -1.0, 2.0, 0.0});
  const Tensor pred({4}, {1.0, -2.0, 2.5, -0.25});
  const Tensor g = tape_gradient([&](const Tensor& x) { return ops::mean_abs_error(x, target); }, pred);
  CHECK(to_vec(g) == std::vector<double>{0.25, -0.25, 0.25, -0.25});
  CHECK(gradient_gap([&](const Tensor& x) { return ops::mean_abs_error(x, target); }, pred) < 1e-6);
}

TEST_CASE("backward contract") {
  SUBCASE("scaled sum") {
    const Tensor g = tape_gradient([](const Tensor& x) { return ops::sum(ops::scale(x, 2.0)); },
                                   Tensor({2}, {1, 1}));
    CHECK(to_vec(g) == std::vector<double>{2, 2});
  }
  SUBCASE("fan-out accumulates") {
    std::mt19937_64 rng(9);
    const Tensor x = random_tensor(rng, {6});
    const Tensor doubled =
        tape_gradient([](const Tensor& v) { return ops::sum(ops::add(v, v)); }, x);
    for (double v : doubled.data()) CHECK(v == 2.0);
    const Tensor once = tape_gradient([](const Tensor& v) { return ops::sum(v); }, x);
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(doubled.data()[i] == 2.0 * once.data()[i]);
  }
  SUBCASE("non-scalar loss") {
    Tensor x = Tensor::zeros({2}, true);
    Tape tape;
    Tensor y;
    {
      TapeScope scope(tape);
      y = ops::scale(x, 2.0);
    }
    CHECK_THROWS_AS(backward(y, tape), ContractError);
  }
  SUBCASE("cleared tape holds no nodes") {
    Tensor x = Tensor::zeros({2}, true);
    Tape tape;
    {
      TapeScope scope(tape);
      (void)ops::sum(ops::scale(x, 2.0));
    }
    CHECK(tape.size() == 2);
    tape.clear();
    CHECK(tape.size() == 0);
  }
  SUBCASE("operations outside a tape record nothing") {
    Tensor x = Tensor::zeros({2}, true);
    CHECK_FALSE(ops::scale(x, 2.0).requires_grad());
  }
}

TEST_CASE("non-finite values raise NumericError") {
  CHECK_THROWS_AS(ops::scale(Tensor::scalar(1e308), 10.0), NumericError);
}

TEST_CASE("finite_diff_gradient") {
  auto sq = [](const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v * v;
    return s;
  };
  CHECK(std::fabs(finite_diff_gradient(sq, Tensor({1}, {3}), 1e-5).item() - 6.0) < 1e-6);
  auto sig_sum = [](const Tensor& x) { return ops::sum(ops::sigmoid(x)).item(); };
  const Tensor g = finite_diff_gradient(sig_sum, Tensor::zeros({3}), 1e-5);
  for (double v : g.data()) {
    CHECK(v == doctest::Approx(0.25).epsilon(1e-9));
  }
  CHECK_THROWS_AS(finite_diff_gradient(sq, Tensor({1}, {3}), 0.0), ContractError);
}

// Randomized shapes up to 8x8 over every differentiable operation.
TEST_CASE("property: backward matches central differences") {
  std::mt19937_64 rng(20240601);
  std::uniform_int_distribution<std::size_t> extent(1, 8);
  for (int trial = 0; trial < 25; ++trial) {
    const std::size_t r = extent(rng), c = extent(rng), k = extent(rng);
    const Tensor x = random_tensor(rng, {r, c});
    const Tensor w = random_tensor(rng, {c, k});
    const Tensor bias = random_tensor(rng, {k});
    const Tensor other = random_tensor(rng, {r, c});
    const Tensor sq = random_tensor(rng, {r, r}, 0.0, 1.0);
    const Tensor h3 = random_tensor(rng, {2, r, c});

    const std::vector<std::function<Tensor(const Tensor&)>> cases = {
        [&](const Tensor& v) { return ops::sum(ops::tanh(ops::add_bias(ops::matmul(v, w), bias))); },
        [&](const Tensor& v) { return ops::sum(ops::hadamard(ops::sigmoid(v), other)); },
        [&](const Tensor& v) { return ops::mean(ops::hadamard(ops::sub(v, other), ops::transpose(ops::transpose(v)))); },
        [&](const Tensor& v) { return ops::sum(ops::hadamard(ops::relu(v), other)); },
        [&](const Tensor& v) { return ops::mean_abs_error(ops::scale(v, 1.5), other); },
        [&](const Tensor& v) { return ops::sum(ops::hadamard(ops::concat_channels(v, other), ops::concat_channels(other, v))); },
        [&](const Tensor& v) { return ops::sum(ops::hadamard(ops::propagate(sq, ops::tile_batch(v, 2)), h3)); },
        [&](const Tensor& v) { return ops::sum(ops::hadamard(ops::row_normalize(ops::relu(ops::matmul(v, ops::transpose(v)))), sq)); },
    };
    for (std::size_t i = 0; i < cases.size(); ++i) {
      CAPTURE(trial);
      CAPTURE(i);
      CHECK(gradient_gap(cases[i], x) < 1e-4);
    }
    // The propagation operator itself is also a differentiable input.
    CHECK(gradient_gap([&](const Tensor& a) { return ops::sum(ops::hadamard(ops::propagate(a, h3), h3)); }, sq) < 1e-4);
  }
}

TEST_CASE("tape replay is deterministic") {
  std::mt19937_64 rng(1);
  const Tensor x = random_tensor(rng, {6, 6});
  const Tensor w = random_tensor(rng, {6, 6});
  auto f = [&](const Tensor& v) { return ops::sum(ops::sigmoid(ops::matmul(ops::tanh(v), w))); };
  CHECK(to_vec(tape_gradient(f, x)) == to_vec(tape_gradient(f, x)));
}

TEST_CASE("row_normalize falls back to uniform rows") {
  const Tensor r = ops::row_normalize(Tensor({2, 2}, {0, 0, 1, 3}));
  CHECK(to_vec(r) == std::vector<double>{0.5, 0.5, 0.25, 0.75});
}

TEST_CASE("select and scatter rows") {
  const Tensor x({3, 2}, {1, 2, 3, 4, 5, 6});
  const Tensor s = ops::select_rows(x, {2, 0});
  CHECK(to_vec(s) == std::vector<double>{5, 6, 1, 2});
  CHECK(to_vec(ops::scatter_rows(s, {2, 0}, 3)) == std::vector<double>{1, 2, 0, 0, 5, 6});
}
