#include <doctest.h>

#include <cmath>

#include "lteode/dynamics.hpp"
#include "lteode/error.hpp"
#include "lteode/ops.hpp"
#include "test_util.hpp"

using namespace lteode;
using lteode::testing::random_tensor;
using lteode::testing::to_vec;

namespace {

VectorFieldParams scalar_field(double w, double b) {
  return VectorFieldParams{Tensor({1, 1}, {w}), Tensor({1}, {b})};
}

Tensor identity(std::size_t n) {
  std::vector<double> v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
  return Tensor({n, n}, std::move(v));
}

CompensatorParams constant_comp(std::size_t steps, std::size_t d, double w, double b) {
  CompensatorParams c;
  for (std::size_t s = 0; s < steps; ++s) {
    c.per_step.push_back(AffineMap{Tensor::filled({d, d}, w), Tensor::filled({d}, b)});
  }
  return c;
}

// A (A h) for a plain 4x4 matrix and vector: the oracle for E on linear fields.
std::vector<double> a_squared_h(const std::vector<double>& a, const std::vector<double>& h) {
  std::vector<double> ah(4, 0.0), aah(4, 0.0);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) ah[i] += a[i * 4 + j] * h[j];
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) aah[i] += a[i * 4 + j] * ah[j];
  return aah;
}

}  // namespace

TEST_CASE("vector_field") {
  NfeCounter nfe;
  SUBCASE("scalar linear field") {
    const Tensor f = vector_field(Tensor({1, 1, 1}, {1}), identity(1), scalar_field(2, 0), nfe);
    CHECK(f.item() == 2.0);
    CHECK(nfe.count == 1);
  }
  SUBCASE("origin is a fixed point") {
    std::mt19937_64 rng(2);
    VectorFieldParams p{random_tensor(rng, {3, 3}), Tensor::zeros({3})};
    const Tensor f = vector_field(Tensor::zeros({2, 4, 3}), random_tensor(rng, {4, 4}), p, nfe);
    for (double v : f.data()) CHECK(v == 0.0);
  }
  SUBCASE("two-node averaging") {
    const Tensor a({2, 2}, {0.5, 0.5, 0.5, 0.5});
    const Tensor f = vector_field(Tensor({1, 2, 1}, {1, 3}), a, scalar_field(1, 0), nfe);
    CHECK(to_vec(f) == std::vector<double>{2, 2});
  }
  SUBCASE("shape mismatch") {
    CHECK_THROWS_AS(vector_field(Tensor::zeros({1, 3, 1}), identity(2), scalar_field(1, 0), nfe),
                    DimensionError);
    CHECK_THROWS_AS(vector_field(Tensor::zeros({1, 2, 2}), identity(2), scalar_field(1, 0), nfe),
                    DimensionError);
  }
}

TEST_CASE("embedded_dual_step") {
  SUBCASE("scalar field f(h) = 2h") {
    NfeCounter nfe;
    const DualStep s = embedded_dual_step(Tensor({1, 1, 1}, {1}), 0.5, identity(1), scalar_field(2, 0), nfe);
    CHECK(s.euler.item() == 2.0);
    CHECK(s.rk2.item() == 2.5);
    CHECK(nfe.count == 2);
    CHECK(local_truncation_error(s.euler, s.rk2).item() == 0.5);
  }
  SUBCASE("constant field gives identical estimates") {
    NfeCounter nfe;
    const Tensor h({1, 3, 1}, {0.3, -1.2, 7.0});
    const DualStep s = embedded_dual_step(h, 0.25, identity(3), scalar_field(0, 1.5), nfe);
    CHECK(to_vec(s.euler) == to_vec(s.rk2));
    for (std::size_t i = 0; i < 3; ++i) CHECK(s.euler.data()[i] == h.data()[i] + 0.25 * 1.5);
    const Tensor e = local_truncation_error(s.euler, s.rk2);
    for (double v : e.data()) CHECK(v == 0.0);
  }
  SUBCASE("exactly two evaluations per call") {
    std::mt19937_64 rng(4);
    NfeCounter nfe;
    VectorFieldParams p{random_tensor(rng, {3, 3}), random_tensor(rng, {3})};
    for (int call = 1; call <= 5; ++call) {
      (void)embedded_dual_step(random_tensor(rng, {2, 4, 3}), 0.1, random_tensor(rng, {4, 4}), p, nfe);
      CHECK(nfe.count == static_cast<std::size_t>(2 * call));
    }
  }
  SUBCASE("non-positive step") {
    NfeCounter nfe;
    CHECK_THROWS_AS(embedded_dual_step(Tensor({1, 1, 1}, {1}), 0.0, identity(1), scalar_field(1, 0), nfe),
                    ContractError);
  }
  SUBCASE("non-finite intermediate names the step") {
    NfeCounter nfe;
    try {
      (void)embedded_dual_step(Tensor({1, 1, 1}, {1e300}), 1.0, identity(1), scalar_field(1e10, 0), nfe, 7);
      FAIL("expected a numeric error");
    } catch (const NumericError& e) {
      CHECK(std::string(e.what()).find("step 7") != std::string::npos);
    }
  }
}

TEST_CASE("analytic truncation error for linear fields") {
  // f(h) = A h  =>  rk2 - euler = (dt^2 / 2) A^2 h.
  std::mt19937_64 rng(99);
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor a = random_tensor(rng, {4, 4});
    const Tensor h = random_tensor(rng, {1, 4, 1});
    const double dt = 0.25;
    NfeCounter nfe;
    const DualStep s = embedded_dual_step(h, dt, a, scalar_field(1, 0), nfe);
    const Tensor e = local_truncation_error(s.euler, s.rk2);
    const auto oracle = a_squared_h(to_vec(a), to_vec(h));
    for (int i = 0; i < 4; ++i) CHECK(std::fabs(e.data()[i] - 0.5 * dt * dt * std::fabs(oracle[i])) <= 1e-10);
  }
}

TEST_CASE("local error orders of Euler and RK2") {
  for (double lambda : {-1.3, 0.7, 2.0}) {
    for (double dt : {0.1, 0.05}) {
      auto errors = [&](double step) {
        NfeCounter nfe;
        const DualStep s = embedded_dual_step(Tensor({1, 1, 1}, {1}), step, identity(1), scalar_field(lambda, 0), nfe);
        const double exact = std::exp(lambda * step);
        return std::pair{std::fabs(s.euler.item() - exact), std::fabs(s.rk2.item() - exact)};
      };
      const auto [euler_big, rk2_big] = errors(dt);
      const auto [euler_small, rk2_small] = errors(dt / 2);
      CAPTURE(lambda);
      CAPTURE(dt);
      CHECK(euler_big / euler_small >= 3.5);
      CHECK(euler_big / euler_small <= 4.5);
      CHECK(rk2_big / rk2_small >= 6.5);
      CHECK(rk2_big / rk2_small <= 9.5);
    }
  }
}

TEST_CASE("attention_mask") {
  CHECK(attention_mask(Tensor::scalar(0)).item() == 0.5);
  CHECK(attention_mask(Tensor::scalar(0.5)).item() == doctest::Approx(0.62246).epsilon(1e-5));
  const double saturated = attention_mask(Tensor::scalar(10)).item();
  CHECK(saturated > 0.99995);
  CHECK(saturated < 1.0);
  CHECK_THROWS_AS(attention_mask(Tensor({2}, {0.1, -0.1})), ContractError);
}

TEST_CASE("compensate") {
  const Tensor h_t({1, 2, 1}, {0.4, 0.4});
  const Tensor h_rk2({1, 2, 1}, {1.0, 2.0});
  SUBCASE("zero jump leaves the RK2 state") {
    const Tensor out = compensate(h_t, h_rk2, Tensor::filled({1, 2, 1}, 0.7), 0, constant_comp(1, 1, 0, 0));
    CHECK(to_vec(out) == to_vec(h_rk2));
  }
  SUBCASE("saturated jump scaled by the gate") {
    // tanh(20) == 1 in float64.
    REQUIRE(std::tanh(20.0) == 1.0);
    const Tensor out = compensate(h_t, h_rk2, Tensor::filled({1, 2, 1}, 0.5), 0, constant_comp(1, 1, 0, 20));
    CHECK(to_vec(out) == std::vector<double>{1.5, 2.5});
  }
  SUBCASE("identical states with different gates diverge") {
    const Tensor same_rk2({1, 2, 1}, {1.0, 1.0});
    const Tensor out = compensate(h_t, same_rk2, Tensor({1, 2, 1}, {0.5, 0.9}), 0, constant_comp(1, 1, 1, 0));
    CHECK(out.data()[0] != out.data()[1]);
  }
  SUBCASE("jump reads the pre-step state") {
    const Tensor out = compensate(h_t, h_rk2, Tensor::filled({1, 2, 1}, 1.0), 0, constant_comp(1, 1, 1, 0));
    CHECK(out.data()[0] == doctest::Approx(1.0 + std::tanh(0.4)));
  }
  SUBCASE("step out of range") {
    CHECK_THROWS_AS(compensate(h_t, h_rk2, Tensor::filled({1, 2, 1}, 0.5), 1, constant_comp(1, 1, 0, 0)),
                    ContractError);
  }
  SUBCASE("sparse path skips quiet rows and matches dense on active rows") {
    const Tensor m({1, 2, 1}, {0.5, 0.9});
    const auto comp = constant_comp(1, 1, 1, 0.2);
    const Tensor dense = compensate(h_t, h_rk2, m, 0, comp);
    const Tensor sparse = compensate(h_t, h_rk2, m, 0, comp, 0.1);
    CHECK(sparse.data()[0] == h_rk2.data()[0]);
    CHECK(sparse.data()[1] == dense.data()[1]);
  }
}

TEST_CASE("evolve") {
  SUBCASE("constant field without compensation is exact") {
    NfeCounter nfe;
    const Tensor h0({1, 2, 1}, {0.5, -1.0});
    EvolveOptions opt;
    opt.mask_mode = MaskMode::off;
    const auto r = evolve(h0, 4, 0.25, identity(2), scalar_field(0, 2.0), nullptr, nullptr, opt, nfe);
    CHECK(r.h_final.data()[0] == doctest::Approx(2.5).epsilon(1e-15));
    CHECK(r.h_final.data()[1] == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(nfe.count == 8);
  }
  SUBCASE("identical rows stay identical without compensation") {
    std::mt19937_64 rng(8);
    const Tensor row = random_tensor(rng, {1, 3, 4});
    std::vector<double> both(to_vec(row));
    both.insert(both.end(), both.begin(), both.end());
    const Tensor h0({2, 3, 4}, both);
    VectorFieldParams vf{random_tensor(rng, {4, 4}), random_tensor(rng, {4})};
    EvolveOptions opt;
    opt.mask_mode = MaskMode::off;
    NfeCounter nfe;
    const auto r = evolve(h0, 5, 0.2, random_tensor(rng, {3, 3}), vf, nullptr, nullptr, opt, nfe);
    const auto v = r.h_final.data();
    for (std::size_t i = 0; i < 12; ++i) CHECK(v[i] == v[12 + i]);
  }
  SUBCASE("compensator makes ordered node trajectories cross") {
    const Tensor a({2, 2}, {0.5, 0.5, 0.5, 0.5});
    const Tensor h0({1, 2, 1}, {0.2, -0.2});
    const auto vf = scalar_field(0.5, 0.1);
    EvolveOptions opt;
    opt.record_states = true;
    NfeCounter nfe;
    opt.mask_mode = MaskMode::off;
    const auto smooth = evolve(h0, 4, 0.25, a, vf, nullptr, nullptr, opt, nfe);
    for (const Tensor& s : smooth.states) CHECK(s.data()[0] > s.data()[1]);

    opt.mask_mode = MaskMode::lte;
    const auto comp = constant_comp(4, 1, -5.0, 0.0);
    const auto jumpy = evolve(h0, 4, 0.25, a, vf, &comp, nullptr, opt, nfe);
    CHECK(jumpy.states.front().data()[0] < jumpy.states.front().data()[1]);
  }
  SUBCASE("dt must be 1/steps") {
    NfeCounter nfe;
    EvolveOptions opt;
    opt.mask_mode = MaskMode::off;
    CHECK_THROWS_AS(evolve(Tensor({1, 1, 1}, {1}), 4, 0.2, identity(1), scalar_field(1, 0), nullptr, nullptr, opt, nfe),
                    ContractError);
    CHECK_THROWS_AS(evolve(Tensor({1, 1, 1}, {1}), 0, 1.0, identity(1), scalar_field(1, 0), nullptr, nullptr, opt, nfe),
                    ContractError);
  }
}

TEST_CASE("property: NFE accounting, mask bounds, determinism") {
  std::mt19937_64 rng(31);
  for (MaskMode mode : {MaskMode::lte, MaskMode::uniform_one, MaskMode::learned, MaskMode::off}) {
    for (std::size_t steps : {1u, 2u, 4u, 6u}) {
      const Tensor h0 = random_tensor(rng, {2, 5, 3});
      const Tensor a = random_tensor(rng, {5, 5}, 0.0, 0.4);
      VectorFieldParams vf{random_tensor(rng, {3, 3}), random_tensor(rng, {3})};
      CompensatorParams comp;
      LearnedMaskParams gate;
      for (std::size_t s = 0; s < steps; ++s) {
        comp.per_step.push_back({random_tensor(rng, {3, 3}), random_tensor(rng, {3})});
        gate.per_step.push_back({random_tensor(rng, {3, 3}), random_tensor(rng, {3})});
      }
      EvolveOptions opt;
      opt.mask_mode = mode;
      NfeCounter nfe;
      const double dt = 1.0 / static_cast<double>(steps);
      const auto r = evolve(h0, steps, dt, a, vf, &comp, &gate, opt, nfe);
      CHECK(nfe.count == 2 * steps);
      REQUIRE(r.traces.size() == steps);
      for (const StepTrace& t : r.traces) {
        CHECK(t.nfe_count == 2);
        std::uint64_t total = 0;
        for (auto c : t.mask_histogram) total += c;
        CHECK(total == h0.numel());
        if (mode == MaskMode::lte) {
          CHECK(t.m_mean >= 0.5);
          CHECK(t.m_mean < 1.0);
          CHECK(t.m_p95 >= t.m_mean);
        }
      }
      NfeCounter again;
      const auto r2 = evolve(h0, steps, dt, a, vf, &comp, &gate, opt, again);
      CHECK(to_vec(r2.h_final) == to_vec(r.h_final));
      CHECK(traces_csv(r2.traces) == traces_csv(r.traces));
    }
  }
}

TEST_CASE("mask gate values stay in [0.5, 1) under the LTE mode") {
  std::mt19937_64 rng(41);
  const Tensor h0 = random_tensor(rng, {3, 6, 4}, -3.0, 3.0);
  VectorFieldParams vf{random_tensor(rng, {4, 4}, -2.0, 2.0), random_tensor(rng, {4})};
  CompensatorParams comp;
  for (int s = 0; s < 2; ++s) comp.per_step.push_back({random_tensor(rng, {4, 4}), random_tensor(rng, {4})});
  EvolveOptions opt;
  opt.record_masks = true;
  NfeCounter nfe;
  const auto r = evolve(h0, 2, 0.5, random_tensor(rng, {6, 6}), vf, &comp, nullptr, opt, nfe);
  for (const auto& t : r.traces) {
    for (double m : t.mask_values) {
      CHECK(m >= 0.5);
      CHECK(m < 1.0);
    }
  }
}

TEST_CASE("mask gradient flag") {
  // With the gate detached, d(loss)/d(W_f) ignores the path through the mask;
  // attaching it changes the gradient.
  std::mt19937_64 rng(77);
  const Tensor h0 = random_tensor(rng, {1, 3, 2});
  const Tensor a = random_tensor(rng, {3, 3}, 0.0, 0.5);
  const Tensor w = random_tensor(rng, {2, 2});
  CompensatorParams comp;
  comp.per_step.push_back({random_tensor(rng, {2, 2}), random_tensor(rng, {2})});
  auto grad_for = [&](bool attach) {
    VectorFieldParams vf{w.clone(true), Tensor::zeros({2})};
    EvolveOptions opt;
    opt.mask_grad = attach;
    Tape tape;
    Tensor loss;
    {
      TapeScope scope(tape);
      NfeCounter nfe;
      loss = ops::sum(evolve(h0, 1, 1.0, a, vf, &comp, nullptr, opt, nfe).h_final);
    }
    backward(loss, tape);
    return to_vec(Tensor(vf.weight.shape(), {vf.weight.grad().begin(), vf.weight.grad().end()}));
  };
  CHECK(grad_for(false) != grad_for(true));
}

TEST_CASE("trace CSV layout") {
  StepTrace t;
  t.step_index = 3;
  t.nfe_count = 2;
  t.mask_histogram[10] = 7;
  const std::string csv = traces_csv(std::vector<StepTrace>{t});
  CHECK(csv.rfind("step,nfe,e_mean,e_max,m_mean,m_std,m_p95,hist_0,", 0) == 0);
  CHECK(csv.find("hist_19\n") != std::string::npos);
  CHECK(csv.find("\n3,2,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,7,") != std::string::npos);
}

TEST_CASE("mask statistics") {
  const std::vector<double> v{0.5, 0.5, 0.6, 1.0};
  const MaskStats s = compute_mask_stats(v);
  CHECK(s.mean == doctest::Approx(0.65));
  CHECK(s.p95 == 1.0);
  CHECK(s.histogram[10] == 2);
  CHECK(s.histogram[12] == 1);
  CHECK(s.histogram[19] == 1);
  MaskAccumulator acc;
  acc.add(v);
  const MaskStats a = acc.stats();
  CHECK(a.mean == doctest::Approx(s.mean));
  CHECK(a.std == doctest::Approx(s.std));
  CHECK(a.histogram == s.histogram);
}
