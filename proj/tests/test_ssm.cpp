#include <doctest.h>

#include <cmath>

#include "ccvim/ssm.hpp"
#include "oracles.hpp"

using namespace ccvim;

namespace {

Tensor random_tensor(Shape shape, SplitMix64& rng, double lo = -1.0, double hi = 1.0,
                     bool requires_grad = true) {
  Tensor t = Tensor::zeros(std::move(shape), requires_grad);
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

}  // namespace

TEST_CASE("selective_params: zero weights propagate the dt bias") {
  SplitMix64 rng(1);
  SSMParams p = make_ssm_params(3, 4, rng);
  for (double& v : p.w_b.data()) v = 0.0;
  for (double& v : p.w_c.data()) v = 0.0;
  for (double& v : p.w_dt.data()) v = 0.0;
  p.dt_bias = Tensor::from_data({3}, {0.5, -1.0, 2.0}, true);
  Tensor x = Tensor::zeros({5, 3});
  SelectiveParams sp = selective_params(x, p);
  for (int64_t t = 0; t < 5; ++t) {
    for (int64_t d = 0; d < 3; ++d) {
      double expected = std::log1p(std::exp(p.dt_bias.data()[d]));
      CHECK(sp.dt_seq.at({t, d}) == doctest::Approx(expected).epsilon(1e-12));
    }
  }
  for (double v : sp.b_seq.data()) CHECK(v == 0.0);
}

TEST_CASE("selective_params: dt stays strictly positive on random input") {
  SplitMix64 rng(2);
  SSMParams p = make_ssm_params(4, 3, rng);
  Tensor x = random_tensor({12, 4}, rng, -3.0, 3.0, false);
  SelectiveParams sp = selective_params(x, p);
  for (double v : sp.dt_seq.data()) CHECK(v > 0.0);
}

TEST_CASE("selective_params: identity-like weights reproduce hand-computed rows") {
  SplitMix64 rng(3);
  SSMParams p = make_ssm_params(2, 2, rng);
  // B projection = identity, C projection = swap, on a unit token.
  p.w_b = Tensor::from_data({2, 2}, {1, 0, 0, 1}, true);
  p.w_c = Tensor::from_data({2, 2}, {0, 1, 1, 0}, true);
  Tensor x = Tensor::from_data({1, 2}, {1.0, 0.0});
  SelectiveParams sp = selective_params(x, p);
  CHECK(sp.b_seq.data() == std::vector<double>{1.0, 0.0});
  CHECK(sp.c_seq.data() == std::vector<double>{0.0, 1.0});
}

TEST_CASE("selective_params rejects channel mismatch") {
  SplitMix64 rng(4);
  SSMParams p = make_ssm_params(3, 2, rng);
  Tensor x = Tensor::zeros({5, 4});
  CHECK_THROWS_AS(selective_params(x, p), DimensionError);
}

TEST_CASE("discretize: exp(-ln 2) halves the state") {
  Tensor a = Tensor::from_data({1, 1}, {-1.0});
  Tensor b = Tensor::from_data({1}, {1.0});
  Tensor dt = Tensor::from_data({1}, {std::log(2.0)});
  auto [abar, bbar] = discretize(a, b, dt);
  CHECK(abar.value() == doctest::Approx(0.5).epsilon(1e-14));
}

TEST_CASE("discretize: Bbar tends to dt*B as dt*A -> 0") {
  Tensor a = Tensor::from_data({1, 1}, {-1e-9});
  Tensor b = Tensor::from_data({1}, {3.0});
  Tensor dt = Tensor::from_data({1}, {0.25});
  auto [abar, bbar] = discretize(a, b, dt);
  CHECK(bbar.value() == doctest::Approx(0.25 * 3.0).epsilon(1e-9));
}

TEST_CASE("discretize matches the scalar dense formula") {
  SplitMix64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    double a = -rng.uniform(0.05, 4.0);
    double b = rng.uniform(-2.0, 2.0);
    double dtv = rng.uniform(1e-3, 1.0);
    auto [abar, bbar] = discretize(Tensor::from_data({1, 1}, {a}), Tensor::from_data({1}, {b}),
                                   Tensor::from_data({1}, {dtv}));
    double abar_ref = std::exp(dtv * a);
    double bbar_ref = 1.0 / (dtv * a) * (std::exp(dtv * a) - 1.0) * dtv * b;
    CHECK(std::abs(abar.value() - abar_ref) < 1e-12);
    CHECK(std::abs(bbar.value() - bbar_ref) < 1e-12);
  }
}

TEST_CASE("discretize rejects nonpositive dt") {
  Tensor a = Tensor::from_data({1, 1}, {-1.0});
  Tensor b = Tensor::from_data({1}, {1.0});
  CHECK_THROWS_AS(discretize(a, b, Tensor::from_data({1}, {0.0})), ContractError);
  CHECK_THROWS_AS(discretize(a, b, Tensor::from_data({1}, {-0.5})), ContractError);
}

TEST_CASE("selective_scan: single step matches the closed form") {
  SplitMix64 rng(6);
  SSMParams p = make_ssm_params(2, 3, rng);
  Tensor x = random_tensor({1, 2}, rng, -1.0, 1.0, false);
  SelectiveParams sp = selective_params(x, p);
  Tensor y = selective_scan(x, p);
  for (int64_t d = 0; d < 2; ++d) {
    double acc = p.d_skip.data()[d] * x.at({0, d});
    for (int64_t j = 0; j < 3; ++j) {
      double a = -std::exp(p.a_log.at({d, j}));
      double abar, bbar;
      zoh_step(a, sp.b_seq.at({0, j}), sp.dt_seq.at({0, d}), &abar, &bbar);
      acc += sp.c_seq.at({0, j}) * bbar * x.at({0, d});
    }
    CHECK(y.at({0, d}) == doctest::Approx(acc).epsilon(1e-12));
  }
}

TEST_CASE("selective_scan: huge negative A makes the scan memoryless") {
  SplitMix64 rng(7);
  SSMParams p = make_ssm_params(2, 2, rng);
  for (double& v : p.a_log.data()) v = std::log(1e9);  // A = -1e9
  Tensor x = random_tensor({6, 2}, rng, -1.0, 1.0, false);
  Tensor y1 = selective_scan(x, p);
  Tensor x2 = x;
  Tensor perturbed = Tensor::from_data(x.shape(), x.data());
  perturbed.data()[0] += 0.75;  // change x_1
  Tensor y2 = selective_scan(perturbed, p);
  // Later outputs depend only on their own token.
  for (int64_t t = 1; t < 6; ++t) {
    for (int64_t d = 0; d < 2; ++d) {
      CHECK(y2.at({t, d}) == doctest::Approx(y1.at({t, d})).epsilon(1e-9));
    }
  }
}

TEST_CASE("selective_scan matches the naive per-step oracle") {
  for (uint64_t seed = 0; seed < 100; ++seed) {
    SplitMix64 rng(seed * 31 + 11);
    int64_t len = rng.uniform_int(1, 32);
    int64_t d = rng.uniform_int(1, 8);
    int64_t n = rng.uniform_int(1, 8);
    SSMParams p = make_ssm_params(d, n, rng);
    Tensor x = random_tensor({len, d}, rng, -2.0, 2.0, false);
    SelectiveParams sp = selective_params(x, p);
    Tensor a = neg(exp(p.a_log));
    Tensor y = scan_recurrence(x, sp.b_seq, sp.c_seq, sp.dt_seq, a, p.d_skip);
    auto ref = oracle::naive_scan(x.data(), sp.b_seq.data(), sp.c_seq.data(), sp.dt_seq.data(),
                                  a.data(), p.d_skip.data(), len, d, n);
    double worst = 0.0;
    for (size_t i = 0; i < ref.size(); ++i) worst = std::max(worst, std::abs(ref[i] - y.data()[i]));
    CAPTURE(seed);
    CHECK(worst < 1e-12);
  }
}

TEST_CASE("causality: perturbing x_t leaves earlier outputs bitwise unchanged") {
  SplitMix64 rng(8);
  SSMParams p = make_ssm_params(3, 4, rng);
  Tensor x = random_tensor({10, 3}, rng, -1.0, 1.0, false);
  Tensor y1 = selective_scan(x, p);
  Tensor perturbed = Tensor::from_data(x.shape(), x.data());
  perturbed.data()[6 * 3 + 1] += 0.5;  // token 7
  Tensor y2 = selective_scan(perturbed, p);
  for (int64_t t = 0; t < 6; ++t) {
    for (int64_t d = 0; d < 3; ++d) CHECK(y1.at({t, d}) == y2.at({t, d}));
  }
}

TEST_CASE("linearity in x when B, C, dt are held fixed") {
  SplitMix64 rng(9);
  int64_t len = 12, d = 3, n = 4;
  Tensor b = random_tensor({len, n}, rng, -1.0, 1.0, false);
  Tensor c = random_tensor({len, n}, rng, -1.0, 1.0, false);
  Tensor dt = random_tensor({len, d}, rng, 0.01, 0.5, false);
  Tensor a = random_tensor({d, n}, rng, -3.0, -0.1, false);
  Tensor skip = random_tensor({d}, rng, 0.5, 1.5, false);
  Tensor x = random_tensor({len, d}, rng, -1.0, 1.0, false);
  double alpha = 2.75;
  Tensor y1 = scan_recurrence(x, b, c, dt, a, skip);
  Tensor y2 = scan_recurrence(mul(x, alpha), b, c, dt, a, skip);
  for (size_t i = 0; i < y1.data().size(); ++i) {
    CHECK(std::abs(y2.data()[i] - alpha * y1.data()[i]) < 1e-12);
  }
}

TEST_CASE("scan gradients pass finite differences") {
  SplitMix64 rng(10);
  SSMParams p = make_ssm_params(3, 3, rng);
  Tensor x = random_tensor({7, 3}, rng);
  Tensor w = random_tensor({7, 3}, rng, -1.0, 1.0, false);
  std::vector<Tensor> params = {x, p.a_log, p.d_skip, p.w_b, p.w_c, p.w_dt, p.dt_bias};
  auto f = [&] { return sum(mul(selective_scan(x, p), w)); };
  CHECK(finite_diff_check(f, params, 1e-5) <= 1e-4);
}

TEST_CASE("scan_recurrence validates contracts") {
  SplitMix64 rng(12);
  int64_t len = 4, d = 2, n = 2;
  Tensor b = random_tensor({len, n}, rng, -1.0, 1.0, false);
  Tensor c = random_tensor({len, n}, rng, -1.0, 1.0, false);
  Tensor dt = random_tensor({len, d}, rng, 0.01, 0.5, false);
  Tensor a = random_tensor({d, n}, rng, -3.0, -0.1, false);
  Tensor skip = random_tensor({d}, rng, 0.5, 1.5, false);
  Tensor x = random_tensor({len, d}, rng, -1.0, 1.0, false);
  Tensor bad_a = random_tensor({d, n}, rng, 0.1, 1.0, false);  // positive A
  CHECK_THROWS_AS(scan_recurrence(x, b, c, dt, bad_a, skip), ContractError);
  Tensor bad_dt = random_tensor({len, d}, rng, -0.5, -0.01, false);
  CHECK_THROWS_AS(scan_recurrence(x, b, c, bad_dt, a, skip), ContractError);
}
