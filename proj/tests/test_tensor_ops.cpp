#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <vector>

#include "evdepth/core/gradcheck.hpp"
#include "evdepth/core/ops.hpp"
#include "evdepth/core/rng.hpp"
#include "evdepth/core/tensor.hpp"

using namespace evdepth;

namespace {

Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0,
                             double hi = 1.0) {
  Tensor<double> t(shape);
  for (int64_t i = 0; i < t.numel(); ++i)
    t.data()[i] = rng.next_uniform(lo, hi);
  return t;
}

// Reduces an arbitrary op output to a scalar with fixed random weights so a
// finite-difference check exercises the whole output.
Tensor<double> weighted_sum(const Tensor<double>& y, uint64_t seed) {
  Rng rng(seed);
  Tensor<double> w(y.shape());
  for (int64_t i = 0; i < w.numel(); ++i)
    w.data()[i] = rng.next_uniform(-1.0, 1.0);
  return sum(mul(y, w));
}

}  // namespace

TEST_CASE("matmul hand examples") {
  auto id2 = Tensor<double>::from({2, 2}, {1, 0, 0, 1});
  auto m = Tensor<double>::from({2, 2}, {3, 4, 5, 6});
  auto prod = matmul(id2, m);
  REQUIRE(prod.values() == m.values());

  auto a = Tensor<double>::from({1, 2}, {1, 2});
  auto b = Tensor<double>::from({2, 1}, {3, 4});
  REQUIRE(matmul(a, b).item() == 11.0);
}

TEST_CASE("matmul shape errors name both shapes") {
  auto a = Tensor<double>::zeros({2, 3});
  auto b = Tensor<double>::zeros({4, 2});
  try {
    matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    REQUIRE(msg.find("[2,3]") != std::string::npos);
    REQUIRE(msg.find("[4,2]") != std::string::npos);
  }
}

TEST_CASE("matmul backward matches finite differences") {
  Rng rng(11);
  auto a = random_tensor({3, 4}, rng);
  auto b = random_tensor({4, 2}, rng);
  auto fa = [&](const Tensor<double>& x) { return weighted_sum(matmul(x, b), 5); };
  auto fb = [&](const Tensor<double>& x) { return weighted_sum(matmul(a, x), 5); };
  REQUIRE(grad_check(fa, a, 1e-4).max_rel_err <= 1e-6);
  REQUIRE(grad_check(fb, b, 1e-4).max_rel_err <= 1e-6);

  // batched x batched and batched x rank-2 broadcast
  auto ab = random_tensor({2, 3, 3, 4}, rng);
  auto bb = random_tensor({2, 3, 4, 2}, rng);
  auto fbb = [&](const Tensor<double>& x) {
    return weighted_sum(matmul(ab, x), 6);
  };
  REQUIRE(grad_check(fbb, bb, 1e-4).max_rel_err <= 1e-6);
  auto fw = [&](const Tensor<double>& x) { return weighted_sum(matmul(ab, x), 7); };
  REQUIRE(grad_check(fw, b, 1e-4).max_rel_err <= 1e-6);
}

TEST_CASE("elementwise hand values") {
  auto s = sigmoid(Tensor<double>::scalar(0.0));
  REQUIRE(s.item() == 0.5);

  auto e = elu(Tensor<double>::scalar(-20.0));
  REQUIRE(e.item() == Catch::Approx(-1.0 + 2.061e-9).margin(1e-12));

  auto g0 = gelu(Tensor<double>::scalar(0.0));
  REQUIRE(g0.item() == 0.0);
}

TEST_CASE("concat shape arithmetic and errors") {
  auto a = Tensor<double>::zeros({2, 3});
  auto b = Tensor<double>::zeros({2, 5});
  auto c = concat<double>({a, b}, 1);
  REQUIRE(c.shape() == Shape{2, 8});

  auto bad = Tensor<double>::zeros({3, 5});
  REQUIRE_THROWS_AS(concat<double>({a, bad}, 1), ShapeError);
  REQUIRE_THROWS_AS(concat<double>({a, b}, 2), ShapeError);
  REQUIRE_THROWS_AS(roll(a, 5, 1), ShapeError);
}

TEST_CASE("layer_norm hand values") {
  auto gain = Tensor<double>::from({3}, {1, 1, 1});
  auto bias = Tensor<double>::from({3}, {0, 0, 0});

  auto ones = Tensor<double>::from({3}, {1, 1, 1});
  auto y0 = layer_norm(ones, gain, bias, 1e-12);
  for (int i = 0; i < 3; ++i)
    REQUIRE(y0.data()[i] == Catch::Approx(0.0).margin(1e-6));

  auto x = Tensor<double>::from({3}, {-1, 0, 1});
  auto y = layer_norm(x, gain, bias, 1e-15);
  REQUIRE(y.data()[0] == Catch::Approx(-1.2247448).margin(1e-5));
  REQUIRE(y.data()[1] == Catch::Approx(0.0).margin(1e-12));
  REQUIRE(y.data()[2] == Catch::Approx(1.2247448).margin(1e-5));

  REQUIRE_THROWS_AS(layer_norm(x, gain, bias, 0.0), ValueError);
}

TEST_CASE("softmax values, mask saturation, row sums") {
  auto x = Tensor<double>::from({2}, {0, 0});
  auto y = softmax_lastaxis(x);
  REQUIRE(y.data()[0] == Catch::Approx(0.5).margin(1e-15));

  auto x2 = Tensor<double>::from({2}, {10, 10});
  auto mask = Tensor<double>::from({2}, {0, -1e9});
  auto y2 = softmax_lastaxis(x2, mask);
  REQUIRE(y2.data()[0] == Catch::Approx(1.0).margin(1e-12));
  REQUIRE(y2.data()[1] <= 1e-12);

  Rng rng(3);
  auto big = random_tensor({6, 9}, rng, -5.0, 5.0);
  auto ys = softmax_lastaxis(big);
  for (int64_t r = 0; r < 6; ++r) {
    double s = 0;
    for (int64_t c = 0; c < 9; ++c) s += ys.data()[r * 9 + c];
    REQUIRE(s == Catch::Approx(1.0).margin(1e-12));
  }
}

TEST_CASE("grad_check oracle on closed forms") {
  // f(x) = sum(x^2): analytic gradient 2x, quadratic is exact under central
  // differences.
  auto quad = [](const Tensor<double>& x) { return sum(mul(x, x)); };
  auto x = Tensor<double>::from({2}, {1, 2});
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    Tensor<double> xg = x.detach();
    xg.set_requires_grad(true);
    tape.backward(quad(xg));
    REQUIRE(xg.grad()[0] == Catch::Approx(2.0).margin(1e-12));
    REQUIRE(xg.grad()[1] == Catch::Approx(4.0).margin(1e-12));
  }
  REQUIRE(grad_check(quad, x, 1e-4).max_rel_err <= 1e-9);

  auto lin = [](const Tensor<double>& t) { return sum(t); };
  Rng rng(5);
  auto xr = random_tensor({4, 3}, rng);
  REQUIRE(grad_check(lin, xr, 1e-4).max_rel_err <= 1e-12);
}

TEST_CASE("every registered op passes a finite-difference check") {
  Rng rng(21);
  const double tol = 1e-5;
  const double h = 1e-4;

  auto x = random_tensor({3, 4}, rng);
  auto xpos = random_tensor({3, 4}, rng, 0.5, 2.0);
  auto other = random_tensor({3, 4}, rng);
  auto row = random_tensor({4}, rng);

  auto check = [&](const char* name, auto f, const Tensor<double>& in,
                   double tolerance = 1e-5) {
    auto rep = grad_check(f, in, h);
    INFO(name << " max_rel_err=" << rep.max_rel_err);
    REQUIRE(rep.max_rel_err <= tolerance);
  };

  check("add", [&](const Tensor<double>& t) { return weighted_sum(add(t, other), 1); }, x);
  check("add-broadcast", [&](const Tensor<double>& t) { return weighted_sum(add(x, t), 2); }, row);
  check("sub", [&](const Tensor<double>& t) { return weighted_sum(sub(t, other), 3); }, x);
  check("mul", [&](const Tensor<double>& t) { return weighted_sum(mul(t, other), 4); }, x);
  check("mul-broadcast", [&](const Tensor<double>& t) { return weighted_sum(mul(x, t), 5); }, row);
  check("sigmoid", [&](const Tensor<double>& t) { return weighted_sum(sigmoid(t), 6); }, x);
  check("elu", [&](const Tensor<double>& t) { return weighted_sum(elu(t), 7); }, x);
  check("gelu", [&](const Tensor<double>& t) { return weighted_sum(gelu(t), 8); }, x);
  check("exp", [&](const Tensor<double>& t) { return weighted_sum(evdepth::exp(t), 9); }, x);
  check("log", [&](const Tensor<double>& t) { return weighted_sum(evdepth::log(t), 10); }, xpos);
  check("affine", [&](const Tensor<double>& t) { return weighted_sum(affine(t, 2.5, -0.5), 11); }, x);
  check("abs", [&](const Tensor<double>& t) { return weighted_sum(evdepth::abs(t), 12); }, xpos);
  check("concat", [&](const Tensor<double>& t) { return weighted_sum(concat<double>({t, other}, 1), 13); }, x);
  check("slice", [&](const Tensor<double>& t) { return weighted_sum(slice(t, 1, 1, 2), 14); }, x);
  check("split", [&](const Tensor<double>& t) { return weighted_sum(split(t, 1, 2)[1], 15); }, x);
  check("reshape", [&](const Tensor<double>& t) { return weighted_sum(reshape(t, {2, 6}), 16); }, x);
  check("permute", [&](const Tensor<double>& t) { return weighted_sum(transpose(t, 0, 1), 17); }, x);
  check("roll", [&](const Tensor<double>& t) { return weighted_sum(roll(t, 1, -2), 18); }, x);
  check("sum", [&](const Tensor<double>& t) { return sum(t); }, x);
  check("mean", [&](const Tensor<double>& t) { return mean(t); }, x);
  check("softmax", [&](const Tensor<double>& t) { return weighted_sum(softmax_lastaxis(t), 19); }, x);
  {
    auto mask = Tensor<double>::zeros({3, 4});
    mask.data()[1] = -1e9;
    check("softmax-masked",
          [&](const Tensor<double>& t) {
            return weighted_sum(softmax_lastaxis(t, mask), 20);
          },
          x);
  }
  {
    auto gain = random_tensor({4}, rng, 0.5, 1.5);
    auto bias = random_tensor({4}, rng);
    check("layer_norm-x",
          [&](const Tensor<double>& t) {
            return weighted_sum(layer_norm(t, gain, bias, 1e-5), 21);
          },
          x);
    check("layer_norm-gain",
          [&](const Tensor<double>& t) {
            return weighted_sum(layer_norm(x, t, bias, 1e-5), 22);
          },
          gain);
    check("layer_norm-bias",
          [&](const Tensor<double>& t) {
            return weighted_sum(layer_norm(x, gain, t, 1e-5), 23);
          },
          bias);
  }
  {
    std::vector<int64_t> idx = {2, 0, 2, 1};
    check("take_rows",
          [&](const Tensor<double>& t) {
            return weighted_sum(take_rows(t, idx), 24);
          },
          x);
  }
  {
    auto img = random_tensor({4, 6}, rng);
    check("bilinear_upsample2d",
          [&](const Tensor<double>& t) {
            return weighted_sum(bilinear_upsample2d(t, 4), 25);
          },
          img);
    check("avg_pool2d_2x2",
          [&](const Tensor<double>& t) {
            return weighted_sum(avg_pool2d_2x2(t), 26);
          },
          img);
  }
  {
    auto a3 = random_tensor({2, 3, 4}, rng);
    auto b3 = random_tensor({2, 4, 3}, rng);
    check("matmul-batched",
          [&](const Tensor<double>& t) {
            return weighted_sum(matmul(t, b3), 27);
          },
          a3, 1e-5);
  }
}

TEST_CASE("reshape and transpose compose to identity bit-exactly") {
  Rng rng(31);
  auto x = random_tensor({3, 5, 2}, rng);
  auto back = transpose(transpose(x, 0, 2), 0, 2);
  REQUIRE(back.values() == x.values());
  auto r = reshape(reshape(x, {30}), {3, 5, 2});
  REQUIRE(r.values() == x.values());
  auto p = permute(permute(x, {2, 0, 1}), {1, 2, 0});
  REQUIRE(p.values() == x.values());
}

TEST_CASE("tape replay is bit-deterministic") {
  auto run = [](uint64_t seed) {
    Rng rng(seed);
    Tensor<double> x(Shape{5, 6});
    for (int64_t i = 0; i < x.numel(); ++i)
      x.data()[i] = rng.next_uniform(-1, 1);
    x.set_requires_grad(true);
    Tensor<double> w(Shape{6, 4});
    for (int64_t i = 0; i < w.numel(); ++i)
      w.data()[i] = rng.next_uniform(-1, 1);
    w.set_requires_grad(true);
    Tape<double> tape;
    TapeScope<double> scope(tape);
    auto y = sum(sigmoid(matmul(x, w)));
    tape.backward(y);
    std::vector<double> out(x.grad(), x.grad() + x.numel());
    out.insert(out.end(), w.grad(), w.grad() + w.numel());
    return out;
  };
  auto g1 = run(77);
  auto g2 = run(77);
  REQUIRE(std::memcmp(g1.data(), g2.data(), g1.size() * sizeof(double)) == 0);
}

TEST_CASE("ops without an active tape do not record or require grad") {
  auto x = Tensor<double>::from({2}, {1, 2});
  x.set_requires_grad(true);
  auto y = sigmoid(x);
  REQUIRE_FALSE(y.requires_grad());
}

TEST_CASE("non-finite forward values trigger the debug check") {
  debug_check_finite() = true;
  auto x = Tensor<double>::from({2}, {1.0, -1.0});
  REQUIRE_THROWS_AS(evdepth::log(x), NumericError);
  debug_check_finite() = false;
}

TEST_CASE("rng streams are name-keyed and order-independent") {
  auto a1 = Rng::for_name(42, "alpha").next_uniform();
  auto b1 = Rng::for_name(42, "beta").next_uniform();
  auto b2 = Rng::for_name(42, "beta").next_uniform();
  auto a2 = Rng::for_name(42, "alpha").next_uniform();
  REQUIRE(a1 == a2);
  REQUIRE(b1 == b2);
  REQUIRE(a1 != b1);
}
