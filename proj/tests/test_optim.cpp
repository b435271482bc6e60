#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "splitnas/optim.hpp"
#include "test_support.hpp"

using namespace splitnas;

TEST_CASE("sgd step and zero-gradient behavior", "[optim]") {
  Tensor<float> w = Tensor<float>::scalar(1.f, true);
  w.grad()[0] = 0.5f;
  Optimizer<float> opt({{"w", w}}, OptKind::sgd, 0.1f);
  opt.step();
  REQUIRE_THAT(w.v()[0], Catch::Matchers::WithinAbs(0.95, 1e-7));

  for (OptKind kind : {OptKind::sgd, OptKind::sgd_momentum, OptKind::adam}) {
    Tensor<double> p = testsup::rand_tensor<double>({5}, 3, -1.0, 1.0, true);
    std::vector<double> before = p.v();
    p.grad();  // allocated, all zero
    Optimizer<double> o({{"p", p}}, kind, 0.05);
    o.step();
    o.step();
    REQUIRE(p.v() == before);
  }
}

TEST_CASE("optimizer requires populated gradients", "[optim]") {
  Tensor<float> w = Tensor<float>::scalar(1.f, true);
  Optimizer<float> opt({{"w", w}}, OptKind::sgd, 0.1f);
  REQUIRE_THROWS_AS(opt.step(), UsageError);
}

// hand-stepped reference recurrences
TEST_CASE("adam matches the hand-computed update recurrence", "[optim]") {
  const double lr = 0.01, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  Tensor<double> w = Tensor<double>::from({2}, {0.4, -0.7}, true);
  std::vector<double> ref = w.v();
  double m[2] = {0, 0}, v[2] = {0, 0};
  Optimizer<double> opt({{"w", w}}, OptKind::adam, lr);
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int t = 1; t <= 7; ++t) {
    double g[2] = {u(rng), u(rng)};
    w.grad()[0] = g[0];
    w.grad()[1] = g[1];
    opt.step();
    opt.zero_grad();
    for (int i = 0; i < 2; ++i) {
      m[i] = b1 * m[i] + (1 - b1) * g[i];
      v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i];
      double mh = m[i] / (1 - std::pow(b1, t));
      double vh = v[i] / (1 - std::pow(b2, t));
      ref[static_cast<size_t>(i)] -= lr * mh / (std::sqrt(vh) + eps);
      REQUIRE_THAT(w.v()[static_cast<size_t>(i)],
                   Catch::Matchers::WithinAbs(ref[static_cast<size_t>(i)], 1e-15));
    }
  }
}

TEST_CASE("adam first step follows the -lr*sign(g) pattern", "[optim]") {
  for (double g : {0.3, -2.0, 0.004}) {
    Tensor<double> w = Tensor<double>::scalar(1.0, true);
    w.grad()[0] = g;
    Optimizer<double> opt({{"w", w}}, OptKind::adam, 0.01);
    opt.step();
    // first step: mhat = g, vhat = g^2  ->  step = -lr * g/(|g|+eps)
    double expected = 1.0 - 0.01 * g / (std::abs(g) + 1e-8);
    REQUIRE_THAT(w.v()[0], Catch::Matchers::WithinAbs(expected, 1e-14));
    REQUIRE(std::abs(w.v()[0] - (1.0 - 0.01 * ((g > 0) - (g < 0)))) < 1e-5);
  }
}

TEST_CASE("momentum matches the hand recurrence", "[optim]") {
  const double lr = 0.1, mu = 0.9;
  Tensor<double> w = Tensor<double>::scalar(2.0, true);
  Optimizer<double> opt({{"w", w}}, OptKind::sgd_momentum, lr);
  double ref = 2.0, u = 0.0;
  for (double g : {1.0, 0.5, -0.25}) {
    w.grad()[0] = g;
    opt.step();
    opt.zero_grad();
    u = mu * u + g;
    ref -= lr * u;
    REQUIRE_THAT(w.v()[0], Catch::Matchers::WithinAbs(ref, 1e-15));
  }
}
