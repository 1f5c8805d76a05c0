#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "ccvim/rng.hpp"
#include "ccvim/tensor.hpp"
#include "ccvim/tensor_io.hpp"

using namespace ccvim;

namespace {

Tensor random_tensor(Shape shape, SplitMix64& rng, double lo = -1.0, double hi = 1.0,
                     bool requires_grad = true) {
  Tensor t = Tensor::zeros(std::move(shape), requires_grad);
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

}  // namespace

TEST_CASE("matmul identity and projector") {
  Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  Tensor m = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  Tensor r = matmul(eye, m);
  CHECK(r.data() == std::vector<double>{1, 2, 3, 4});

  Tensor proj = Tensor::from_data({2, 2}, {1, 0, 0, 0});
  Tensor v = Tensor::from_data({2, 1}, {5, 7});
  Tensor pv = matmul(proj, v);
  CHECK(pv.data() == std::vector<double>{5, 0});
}

TEST_CASE("matmul shape error names both shapes") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({2, 2});
  CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("[2x3]"), DimensionError);
}

TEST_CASE("matmul gradient vs central differences") {
  SplitMix64 rng(7);
  Tensor a = random_tensor({3, 4}, rng);
  Tensor b = random_tensor({4, 2}, rng);
  Tensor w = random_tensor({3, 2}, rng, -1.0, 1.0, false);
  auto f = [&] { return sum(mul(matmul(a, b), w)); };
  CHECK(finite_diff_check(f, {a, b}, 1e-5) < 1e-6);
}

TEST_CASE("elementwise analytic values") {
  Tensor z = Tensor::scalar(0.0);
  CHECK(sigmoid(z).value() == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(softplus(z).value() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(silu(Tensor::scalar(2.0)).value() ==
        doctest::Approx(2.0 / (1.0 + std::exp(-2.0))).epsilon(1e-12));
  CHECK(neg(Tensor::scalar(3.5)).value() == -3.5);
  CHECK(reciprocal(Tensor::scalar(4.0)).value() == 0.25);
}

TEST_CASE("silu gradient at 1.3") {
  Tensor x = Tensor::from_data({1}, {1.3}, true);
  auto f = [&] { return sum(silu(x)); };
  CHECK(finite_diff_check(f, {x}, 1e-5) < 1e-6);
}

TEST_CASE("sigmoid stays in (0,1), softplus positive") {
  SplitMix64 rng(11);
  Tensor x = random_tensor({64}, rng, -40.0, 40.0, false);
  Tensor s = sigmoid(x);
  Tensor sp = softplus(x);
  for (double v : s.data()) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
  for (double v : sp.data()) CHECK(v > 0.0);
}

TEST_CASE("broadcast add/mul with trailing stretch") {
  Tensor a = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor row = Tensor::from_data({3}, {10, 20, 30});
  Tensor s = add(a, row);
  CHECK(s.data() == std::vector<double>{11, 22, 33, 14, 25, 36});
  Tensor col = Tensor::from_data({2, 1}, {2, 3});
  Tensor p = mul(a, col);
  CHECK(p.data() == std::vector<double>{2, 4, 6, 12, 15, 18});
}

TEST_CASE("non-broadcastable shapes raise a dimension error") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({2, 2});
  CHECK_THROWS_AS(add(a, b), DimensionError);
}

TEST_CASE("broadcast gradient reduces over stretched dims") {
  SplitMix64 rng(13);
  Tensor a = random_tensor({4, 3}, rng);
  Tensor b = random_tensor({3}, rng);
  auto f = [&] { return sum(mul(add(a, b), add(a, b))); };
  CHECK(finite_diff_check(f, {a, b}, 1e-5) < 1e-6);
}

TEST_CASE("reduce examples") {
  Tensor v = Tensor::from_data({3}, {1, 2, 3});
  CHECK(sum(v).value() == 6.0);
  Tensor c = Tensor::full({2, 5}, 3.25);
  CHECK(mean(c).value() == doctest::Approx(3.25).epsilon(1e-15));

  Tensor m = Tensor::from_data({3}, {2, 5, 5}, true);
  GradTape tape;
  Tensor mx = reduce_max(m);
  CHECK(mx.value() == 5.0);
  tape.backward(mx);
  CHECK(m.grad() == std::vector<double>{0, 1, 0});  // first maximal element wins
}

TEST_CASE("reduce along an axis") {
  Tensor a = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor s0 = sum(a, 0);
  CHECK(s0.shape() == Shape{3});
  CHECK(s0.data() == std::vector<double>{5, 7, 9});
  Tensor s1 = sum(a, 1);
  CHECK(s1.data() == std::vector<double>{6, 15});
  CHECK_THROWS_AS(sum(a, 2), DimensionError);
}

TEST_CASE("layer_norm analytic cases") {
  // Already standardized input passes through up to the eps perturbation.
  Tensor x = Tensor::from_data({1, 2}, {-1.0, 1.0});
  Tensor gamma = Tensor::full({2}, 1.0);
  Tensor beta = Tensor::zeros({2});
  Tensor y = layer_norm(x, gamma, beta, 1e-10);
  CHECK(y.data()[0] == doctest::Approx(-1.0).epsilon(1e-6));
  CHECK(y.data()[1] == doctest::Approx(1.0).epsilon(1e-6));

  Tensor c = Tensor::full({1, 4}, 7.0);
  Tensor gamma4 = Tensor::full({4}, 2.0);
  Tensor beta4 = Tensor::zeros({4});
  Tensor yc = layer_norm(c, gamma4, beta4, 1e-6);
  for (double v : yc.data()) CHECK(v == 0.0);  // zero variance clamped by eps
}

TEST_CASE("layer_norm gradient on random 2x8") {
  SplitMix64 rng(17);
  Tensor x = random_tensor({2, 8}, rng);
  Tensor gamma = random_tensor({8}, rng, 0.5, 1.5);
  Tensor beta = random_tensor({8}, rng);
  Tensor w = random_tensor({2, 8}, rng, -1.0, 1.0, false);
  auto f = [&] { return sum(mul(layer_norm(x, gamma, beta), w)); };
  CHECK(finite_diff_check(f, {x, gamma, beta}, 1e-5) < 1e-5);
}

TEST_CASE("depthwise conv delta kernel is identity") {
  SplitMix64 rng(19);
  Tensor img = random_tensor({2, 4, 4}, rng, -1.0, 1.0, false);
  Tensor ker = Tensor::zeros({2, 3, 3});
  ker.data()[4] = 1.0;      // center of channel 0
  ker.data()[9 + 4] = 1.0;  // center of channel 1
  Tensor out = depthwise_conv2d(img, ker, 1);
  CHECK(out.data() == img.data());
}

TEST_CASE("depthwise conv all-ones kernel sums the 3x3 neighborhood") {
  Tensor img = Tensor::full({1, 5, 5}, 1.0);
  Tensor ker = Tensor::full({1, 3, 3}, 1.0);
  Tensor out = depthwise_conv2d(img, ker, 1);
  CHECK(out.at({0, 2, 2}) == 9.0);  // interior pixel
  CHECK(out.at({0, 0, 0}) == 4.0);  // corner sees the zero padding
}

TEST_CASE("depthwise conv rejects even kernels") {
  Tensor img = Tensor::zeros({1, 4, 4});
  Tensor ker = Tensor::zeros({1, 2, 2});
  CHECK_THROWS_AS(depthwise_conv2d(img, ker, 0), ConfigError);
}

TEST_CASE("depthwise conv gradient") {
  SplitMix64 rng(23);
  Tensor img = random_tensor({2, 5, 5}, rng);
  Tensor ker = random_tensor({2, 3, 3}, rng);
  Tensor w = random_tensor({2, 5, 5}, rng, -1.0, 1.0, false);
  auto f = [&] { return sum(mul(depthwise_conv2d(img, ker, 1), w)); };
  CHECK(finite_diff_check(f, {img, ker}, 1e-5) < 1e-5);
}

TEST_CASE("backward fills ones for a plain sum") {
  SplitMix64 rng(29);
  Tensor w = random_tensor({2, 3, 2}, rng);
  GradTape tape;
  tape.backward(sum(w));
  for (double g : w.grad()) CHECK(g == 1.0);
}

TEST_CASE("backward of sum(w*w)/2 is w") {
  SplitMix64 rng(31);
  Tensor w = random_tensor({7}, rng);
  GradTape tape;
  tape.backward(mul(sum(mul(w, w)), 0.5));
  for (size_t i = 0; i < w.data().size(); ++i) {
    CHECK(w.grad()[i] == doctest::Approx(w.data()[i]).epsilon(1e-12));
  }
}

TEST_CASE("backward requires a scalar and a nonempty tape") {
  Tensor w = Tensor::zeros({3}, true);
  GradTape tape;
  CHECK_THROWS_AS(tape.backward(w), ContractError);   // non-scalar
  Tensor s = Tensor::scalar(1.0, true);
  GradTape empty_tape;
  CHECK_THROWS_AS(empty_tape.backward(s), ContractError);
}

TEST_CASE("repeated backward accumulates additively") {
  Tensor w = Tensor::from_data({2}, {3.0, -2.0}, true);
  GradTape tape;
  Tensor loss = sum(mul(w, w));
  tape.backward(loss);
  std::vector<double> once = w.grad();
  tape.backward(loss);
  for (size_t i = 0; i < once.size(); ++i) {
    CHECK(w.grad()[i] == doctest::Approx(2.0 * once[i]).epsilon(1e-12));
  }
}

TEST_CASE("backward over two independent subgraphs matches separate passes") {
  SplitMix64 rng(37);
  Tensor a = random_tensor({4}, rng);
  Tensor b = random_tensor({4}, rng);
  {
    GradTape tape;
    tape.backward(add(sum(mul(a, a)), sum(sigmoid(b))));
  }
  std::vector<double> ga = a.grad(), gb = b.grad();
  a.zero_grad();
  b.zero_grad();
  {
    GradTape tape;
    tape.backward(sum(mul(a, a)));
  }
  {
    GradTape tape;
    tape.backward(sum(sigmoid(b)));
  }
  CHECK(a.grad() == ga);
  CHECK(b.grad() == gb);
}

TEST_CASE("reshape round-trips bitwise") {
  SplitMix64 rng(41);
  Tensor t = random_tensor({3, 4, 2}, rng, -5.0, 5.0, false);
  Tensor r = reshape(reshape(t, {6, 4}), {3, 4, 2});
  CHECK(r.data() == t.data());
  CHECK_THROWS_AS(reshape(t, {5, 5}), DimensionError);
}

TEST_CASE("finite_diff_check on analytic cases") {
  SplitMix64 rng(43);
  Tensor p = random_tensor({6}, rng);
  CHECK(finite_diff_check([&] { return sum(p); }, {p}, 1e-5) < 1e-10);

  Tensor q = random_tensor({4}, rng);
  auto quad = [&] { return mul(sum(mul(q, q)), 0.5); };
  CHECK(finite_diff_check(quad, {q}, 1e-5) < 1e-7);
  CHECK_THROWS_AS(finite_diff_check(quad, {q}, 1e-2), ContractError);  // eps range
}

TEST_CASE("finite_diff_check rejects nondeterministic functions") {
  Tensor p = Tensor::zeros({2}, true);
  int calls = 0;
  auto f = [&] {
    ++calls;
    return Tensor::scalar(static_cast<double>(calls));
  };
  CHECK_THROWS_AS(finite_diff_check(f, {p}, 1e-5), ContractError);
}

TEST_CASE("elementwise dispatcher agrees with the named helpers") {
  SplitMix64 rng(47);
  Tensor a = random_tensor({3, 3}, rng, 0.5, 2.0, false);
  Tensor b = random_tensor({3, 3}, rng, 0.5, 2.0, false);
  CHECK(elementwise(EwKind::Add, a, b).data() == add(a, b).data());
  CHECK(elementwise(EwKind::Mul, a, b).data() == mul(a, b).data());
  CHECK(elementwise(EwKind::Sigmoid, a).data() == sigmoid(a).data());
  CHECK_THROWS_AS(elementwise(EwKind::Add, a), ContractError);
  CHECK_THROWS_AS(elementwise(EwKind::Exp, a, b), ContractError);
}

TEST_CASE("every differentiable op passes randomized gradient checks") {
  // 100 seeds across the op set on small random shapes of rank <= 4.
  for (uint64_t seed = 0; seed < 100; ++seed) {
    SplitMix64 rng(seed * 977 + 5);
    Shape shape;
    int rank = static_cast<int>(rng.uniform_int(1, 4));
    for (int i = 0; i < rank; ++i) shape.push_back(rng.uniform_int(1, 3));
    Tensor x = random_tensor(shape, rng, -2.0, 2.0);
    Tensor y = random_tensor(shape, rng, 0.1, 2.0);
    double err = 0.0;
    switch (seed % 8) {
      case 0: err = finite_diff_check([&] { return sum(mul(add(x, y), x)); }, {x, y}, 1e-5); break;
      case 1: err = finite_diff_check([&] { return sum(mul(sub(x, y), x)); }, {x, y}, 1e-5); break;
      case 2: err = finite_diff_check([&] { return sum(sigmoid(x)); }, {x}, 1e-5); break;
      case 3: err = finite_diff_check([&] { return sum(softplus(x)); }, {x}, 1e-5); break;
      case 4: err = finite_diff_check([&] { return sum(exp(x)); }, {x}, 1e-5); break;
      case 5: err = finite_diff_check([&] { return sum(silu(x)); }, {x}, 1e-5); break;
      case 6: err = finite_diff_check([&] { return sum(mul(neg(x), x)); }, {x}, 1e-5); break;
      case 7: err = finite_diff_check([&] { return sum(reciprocal(y)); }, {y}, 1e-5); break;
    }
    CAPTURE(seed);
    CHECK(err <= 1e-4);
  }
}

TEST_CASE("take gathers and scatters gradients") {
  Tensor a = Tensor::from_data({4}, {10, 20, 30, 40}, true);
  GradTape tape;
  Tensor g = take(a, {3, 0, 3}, {3});
  CHECK(g.data() == std::vector<double>{40, 10, 40});
  tape.backward(sum(g));
  CHECK(a.grad() == std::vector<double>{1, 0, 0, 2});
  CHECK_THROWS_AS(take(a, {4}, {1}), DimensionError);
}

TEST_CASE("concat0 stacks rows and splits gradients") {
  Tensor a = Tensor::from_data({1, 2}, {1, 2}, true);
  Tensor b = Tensor::from_data({2, 2}, {3, 4, 5, 6}, true);
  GradTape tape;
  Tensor c = concat0({a, b});
  CHECK(c.shape() == Shape{3, 2});
  tape.backward(sum(mul(c, c)));
  CHECK(a.grad() == std::vector<double>{2, 4});
  CHECK(b.grad() == std::vector<double>{6, 8, 10, 12});
}

TEST_CASE("CCVT files round-trip bit-exactly") {
  SplitMix64 rng(53);
  Tensor t = random_tensor({3, 5, 2}, rng, -1e6, 1e6, false);
  t.data()[0] = 0.1 + 0.2;  // not exactly representable
  std::string path = (std::filesystem::temp_directory_path() / "ccvim_io_test.ccvt").string();
  write_ccvt(path, t);
  Tensor back = read_ccvt(path);
  CHECK(back.shape() == t.shape());
  CHECK(back.data() == t.data());
  std::filesystem::remove(path);
}
