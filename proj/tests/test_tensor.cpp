#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "bda/errors.hpp"
#include "bda/rng.hpp"
#include "bda/tensor.hpp"

using namespace bda;

namespace {

Tensor rand_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor::from_values(std::move(shape), std::move(v));
}

}  // namespace

TEST_CASE("shape bookkeeping") {
  Tensor t({2, 3, 4}, 1.5);
  CHECK(t.size() == 24);
  CHECK(t.rank() == 3);
  CHECK(t.values()[0] == 1.5);
  CHECK(shape_str(t.shape()) == "[2, 3, 4]");
  CHECK_THROWS_AS(Tensor::from_values({2, 2}, {1.0}), std::invalid_argument);
  CHECK_THROWS_AS(Tensor(Shape{0, 3}), std::invalid_argument);
}

TEST_CASE("elementwise mul and add") {
  Tensor a = Tensor::from_values({2}, {2.0, 3.0});
  Tensor b = Tensor::from_values({2}, {4.0, 5.0});
  Tensor m = mul(a, b);
  CHECK(m.at(0) == 8.0);
  CHECK(m.at(1) == 15.0);

  Tensor x = rand_tensor({3, 2, 2}, 11);
  Tensor s = add(x, Tensor::zeros_like(x));
  for (int i = 0; i < x.size(); ++i) CHECK(s.at(i) == x.at(i));
}

TEST_CASE("broadcast forms") {
  SUBCASE("spatial gate times feature map") {
    Tensor gate = Tensor::full({1, 2, 2}, 0.5);
    Tensor feat = Tensor::full({3, 2, 2}, 4.0);
    Tensor out = mul(gate, feat);
    CHECK(out.shape() == Shape{3, 2, 2});
    for (int i = 0; i < out.size(); ++i) CHECK(out.at(i) == 2.0);
  }
  SUBCASE("channel gate") {
    Tensor gate = Tensor::from_values({2, 1, 1}, {2.0, 3.0});
    Tensor feat = Tensor::full({2, 2, 2}, 1.0);
    Tensor out = mul(feat, gate);
    CHECK(out.at(0) == 2.0);
    CHECK(out.at(7) == 3.0);
  }
  SUBCASE("scalar") {
    Tensor out = add(Tensor::full({2, 2}, 1.0), Tensor::scalar(0.5));
    for (int i = 0; i < 4; ++i) CHECK(out.at(i) == 1.5);
  }
  SUBCASE("rejected with both shapes reported") {
    Tensor a({2, 3, 3});
    Tensor b({2, 3, 4});
    try {
      mul(a, b);
      FAIL("expected rejection");
    } catch (const std::invalid_argument& e) {
      const std::string msg = e.what();
      CHECK(msg.find("[2, 3, 3]") != std::string::npos);
      CHECK(msg.find("[2, 3, 4]") != std::string::npos);
    }
  }
}

TEST_CASE("concat_channels") {
  Tensor a = rand_tensor({2, 2, 2}, 3);
  Tensor b = rand_tensor({2, 2, 2}, 4);
  Tensor c = concat_channels(a, b);
  CHECK(c.shape() == Shape{4, 2, 2});
  for (int i = 0; i < 4; ++i) CHECK(c.at(i) == a.at(i));  // channel 0 slice
  for (int i = 0; i < 8; ++i) CHECK(c.at(8 + i) == b.at(i));
  CHECK_THROWS_AS(concat_channels(a, rand_tensor({2, 3, 2}, 5)), std::invalid_argument);

  SUBCASE("backward of sum splits into ones") {
    a.set_requires_grad(true);
    b.set_requires_grad(true);
    auto grads = backward(sum(concat_channels(a, b)));
    for (int i = 0; i < 8; ++i) {
      CHECK(grads.at(a).at(i) == 1.0);
      CHECK(grads.at(b).at(i) == 1.0);
    }
  }
}

TEST_CASE("sigmoid values and gradient") {
  Tensor x = Tensor::from_values({3}, {0.0, 50.0, -50.0});
  Tensor y = sigmoid(x);
  CHECK(y.at(0) == 0.5);
  CHECK(y.at(1) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(y.at(2) == doctest::Approx(0.0).epsilon(1e-15));

  Tensor z = Tensor::scalar(0.0).set_requires_grad(true);
  auto grads = backward(sum(sigmoid(z)));
  CHECK(grads.at(z).at(0) == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("softmax_channels") {
  SUBCASE("uniform logits give 1/C") {
    Tensor x = Tensor::full({5, 2, 2}, 3.7);
    Tensor y = softmax_channels(x);
    for (int i = 0; i < y.size(); ++i) CHECK(y.at(i) == doctest::Approx(0.2).epsilon(1e-12));
  }
  SUBCASE("closed form for [0, ln2]") {
    Tensor x = Tensor::from_values({2, 1, 1}, {0.0, std::log(2.0)});
    Tensor y = softmax_channels(x);
    CHECK(y.at(0) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
    CHECK(y.at(1) == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  }
  SUBCASE("per-pixel sums are 1") {
    Tensor x = rand_tensor({4, 3, 5}, 17, -5.0, 5.0);
    Tensor y = softmax_channels(x);
    for (int p = 0; p < 15; ++p) {
      double s = 0.0;
      for (int c = 0; c < 4; ++c) s += y.at(c * 15 + p);
      CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
  CHECK_THROWS_AS(softmax_channels(Tensor({1, 2, 2})), std::invalid_argument);
}

TEST_CASE("backward basics") {
  SUBCASE("x*x at 3 gives 6") {
    Tensor x = Tensor::scalar(3.0).set_requires_grad(true);
    auto grads = backward(sum(mul(x, x)));
    CHECK(grads.at(x).at(0) == doctest::Approx(6.0).epsilon(1e-14));
  }
  SUBCASE("sum of sigmoid at zero gives 0.25 per element") {
    Tensor x = Tensor::zeros({4}).set_requires_grad(true);
    auto grads = backward(sum(sigmoid(x)));
    for (int i = 0; i < 4; ++i) CHECK(grads.at(x).at(i) == doctest::Approx(0.25).epsilon(1e-12));
  }
  SUBCASE("non-scalar loss rejected") {
    Tensor x = Tensor::zeros({4}).set_requires_grad(true);
    CHECK_THROWS_AS(backward(sigmoid(x)), std::invalid_argument);
  }
  SUBCASE("loss must come from recorded operations") {
    Tensor lone = Tensor::scalar(1.0).set_requires_grad(true);
    CHECK_THROWS_AS(backward(lone), std::invalid_argument);
  }
  SUBCASE("backward twice on one tape is identical") {
    Tensor x = rand_tensor({6}, 23);
    x.set_requires_grad(true);
    Tensor loss = sum(mul(sigmoid(x), x));
    auto g1 = backward(loss);
    auto g2 = backward(loss);
    for (int i = 0; i < 6; ++i) CHECK(g1.at(x).at(i) == g2.at(x).at(i));
  }
}

TEST_CASE("composite graph matches the finite-difference oracle") {
  // three-layer graph: y = sum(sigmoid(w (.) x + b) * x)
  Tensor x = rand_tensor({8}, 31);
  Tensor w = rand_tensor({8}, 32);
  Tensor b = rand_tensor({8}, 33, -0.3, 0.3);
  for (Tensor* t : {&x, &w, &b}) t->set_requires_grad(true);

  const auto forward = [](const Tensor& xv, const Tensor& wv, const Tensor& bv) {
    return sum(mul(sigmoid(add(mul(wv, xv), bv)), xv));
  };
  auto grads = backward(forward(x, w, b));

  const Tensor fd_x = finite_diff_gradient(
      [&](const Tensor& probe) { return forward(probe, w, b).item(); }, x);
  const Tensor fd_w = finite_diff_gradient(
      [&](const Tensor& probe) { return forward(x, probe, b).item(); }, w);
  const Tensor fd_b = finite_diff_gradient(
      [&](const Tensor& probe) { return forward(x, w, probe).item(); }, b);
  CHECK(max_rel_error(grads.at(x), fd_x) < 1e-4);
  CHECK(max_rel_error(grads.at(w), fd_w) < 1e-4);
  CHECK(max_rel_error(grads.at(b), fd_b) < 1e-4);
}

TEST_CASE("finite_diff_gradient closed forms") {
  Tensor x = Tensor::from_values({2}, {1.0, 2.0});
  const Tensor g = finite_diff_gradient(
      [](const Tensor& t) {
        double acc = 0.0;
        for (int i = 0; i < t.size(); ++i) acc += t.at(i) * t.at(i);
        return acc;
      },
      x);
  CHECK(g.at(0) == doctest::Approx(2.0).epsilon(1e-8));
  CHECK(g.at(1) == doctest::Approx(4.0).epsilon(1e-8));

  Tensor z = Tensor::zeros({3});
  const Tensor gs = finite_diff_gradient(
      [](const Tensor& t) {
        NoGradGuard ng;
        return sum(sigmoid(t)).item();
      },
      z);
  for (int i = 0; i < 3; ++i) CHECK(gs.at(i) == doctest::Approx(0.25).epsilon(1e-8));

  CHECK_THROWS_AS(finite_diff_gradient([](const Tensor&) { return 0.0; }, x, 0.0),
                  std::invalid_argument);
}

TEST_CASE("fixed evaluation order is reproducible") {
  Tensor a = rand_tensor({64}, 41);
  Tensor b = rand_tensor({64}, 42);
  Tensor c = rand_tensor({64}, 43);
  const Tensor r1 = add(add(a, b), c);
  const Tensor r2 = add(add(a, b), c);
  for (int i = 0; i < 64; ++i) CHECK(r1.at(i) == r2.at(i));
}

TEST_CASE("non-finite forward results are an error state") {
  Tensor big = Tensor::full({4}, 1e308);
  CHECK_THROWS_AS(mul(big, big), NumericalError);
  CHECK_THROWS_AS(scale(big, 1e10), NumericalError);
}

TEST_CASE("reshape round trip keeps gradients flowing") {
  Tensor x = rand_tensor({6}, 51);
  x.set_requires_grad(true);
  Tensor y = reshape(x, {6, 1, 1});
  CHECK(y.shape() == Shape{6, 1, 1});
  auto grads = backward(sum(mul(y, y)));
  for (int i = 0; i < 6; ++i) {
    CHECK(grads.at(x).at(i) == doctest::Approx(2.0 * x.at(i)).epsilon(1e-12));
  }
  CHECK_THROWS_AS(reshape(x, {5}), std::invalid_argument);
}
