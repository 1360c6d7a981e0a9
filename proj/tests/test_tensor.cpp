#include <cmath>
#include <random>

#include "doctest.h"
#include "oracles.hpp"
#include "volab/error.hpp"
#include "volab/ops.hpp"
#include "volab/tensor.hpp"

using namespace volab;
using volab::testing::max_abs_diff;
using volab::testing::random_tensor;

TEST_CASE("tensor rejects inconsistent shapes") {
  CHECK_THROWS_AS(Tensor(Shape{2, 3}, std::vector<double>(5)), ShapeError);
  CHECK_THROWS_AS(Tensor(Shape{0}, std::vector<double>{}), ShapeError);
}

TEST_CASE("float32 mode rounds stored values") {
  Tensor t(Shape{1}, {0.1});
  CHECK(t[0] == static_cast<double>(0.1f));
  PrecisionScope f64(Precision::Float64);
  Tensor u(Shape{1}, {0.1});
  CHECK(u[0] == 0.1);
}

TEST_CASE("softmax of equal logits is uniform") {
  Tensor y = ops::softmax(Tensor(Shape{3}, {0, 0, 0}), 0);
  for (double v : y.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-7));
}

TEST_CASE("softmax rows sum to one along any axis") {
  std::mt19937_64 rng(3);
  PrecisionScope f64(Precision::Float64);
  Tensor x = random_tensor({3, 4, 5}, rng, -5, 5);
  for (std::size_t axis = 0; axis < 3; ++axis) {
    Tensor y = ops::softmax(x, axis);
    Tensor s = ops::mean_axis(y, axis);
    for (double v : s.data()) CHECK(std::abs(v * x.dim(axis) - 1.0) < 1e-6);
  }
}

TEST_CASE("identity matmul") {
  std::mt19937_64 rng(4);
  Tensor eye(Shape{3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Tensor a = random_tensor({3, 3}, rng);
  CHECK(max_abs_diff(ops::matmul(eye, a).data(), a.data()) == 0.0);
}

TEST_CASE("layer_norm matches direct mean/variance") {
  std::mt19937_64 rng(5);
  PrecisionScope f64(Precision::Float64);
  Tensor x = random_tensor({4, 8}, rng, -3, 3);
  Tensor y = ops::layer_norm(x, Tensor::full({8}, 1.0), Tensor::zeros({8}), 0.0);
  for (std::size_t r = 0; r < 4; ++r) {
    double mu = 0, var = 0;
    for (std::size_t j = 0; j < 8; ++j) mu += y[r * 8 + j];
    mu /= 8;
    for (std::size_t j = 0; j < 8; ++j) var += (y[r * 8 + j] - mu) * (y[r * 8 + j] - mu);
    var /= 8;
    CHECK(std::abs(mu) < 1e-6);
    CHECK(std::abs(var - 1.0) < 1e-6);
  }
  // With eps the output equals (x - mu) / sqrt(var + eps), recomputed directly.
  Tensor z = ops::layer_norm(x, Tensor::full({8}, 1.0), Tensor::zeros({8}), 1e-5);
  for (std::size_t r = 0; r < 4; ++r) {
    double mu = 0, var = 0;
    for (std::size_t j = 0; j < 8; ++j) mu += x[r * 8 + j];
    mu /= 8;
    for (std::size_t j = 0; j < 8; ++j) var += (x[r * 8 + j] - mu) * (x[r * 8 + j] - mu);
    var /= 8;
    for (std::size_t j = 0; j < 8; ++j) {
      CHECK(std::abs(z[r * 8 + j] - (x[r * 8 + j] - mu) / std::sqrt(var + 1e-5)) < 1e-12);
    }
  }
}

TEST_CASE("conv3d identity and counting kernels") {
  std::mt19937_64 rng(6);
  Tensor x = random_tensor({1, 1, 4, 5, 6}, rng);
  Tensor one = Tensor::full({1, 1, 1, 1, 1}, 1.0);
  CHECK(max_abs_diff(ops::conv3d(x, one, std::nullopt, {1, 1, 1}, {0, 0, 0}).data(), x.data()) ==
        0.0);

  Tensor ones = Tensor::full({1, 1, 5, 5, 5}, 1.0);
  Tensor k = Tensor::full({1, 1, 3, 3, 3}, 1.0);
  Tensor y = ops::conv3d(ones, k, std::nullopt, {1, 1, 1}, {0, 0, 0});
  CHECK(y.shape() == Shape{1, 1, 3, 3, 3});
  for (double v : y.data()) CHECK(v == 27.0);
}

TEST_CASE("conv3d output size follows the floor formula") {
  Tensor x = Tensor::zeros({1, 2, 7, 8, 9});
  Tensor k = Tensor::zeros({3, 2, 3, 3, 3});
  Tensor y = ops::conv3d(x, k, std::nullopt, {2, 2, 3}, {1, 0, 1});
  CHECK(y.shape() == Shape{1, 3, (7 + 2 - 3) / 2 + 1, (8 - 3) / 2 + 1, (9 + 2 - 3) / 3 + 1});
  CHECK_THROWS_AS(ops::conv3d(Tensor::zeros({1, 3, 4, 4, 4}), k, std::nullopt, {1, 1, 1},
                              {0, 0, 0}),
                  ShapeError);
  CHECK_THROWS_AS(ops::conv3d(Tensor::zeros({1, 2, 2, 4, 4}), k, std::nullopt, {1, 1, 1},
                              {0, 0, 0}),
                  ShapeError);
}

TEST_CASE("conv3d matches the nested-loop oracle") {
  std::mt19937_64 rng(7);
  PrecisionScope f64(Precision::Float64);
  Tensor x = random_tensor({1, 2, 6, 6, 6}, rng);
  Tensor k = random_tensor({3, 2, 3, 3, 3}, rng);
  auto y = ops::conv3d(x, k, std::nullopt, {1, 1, 1}, {0, 0, 0});
  CHECK(max_abs_diff(y.data(), testing::naive_conv3d(x, k, 1, 1, 1, 0, 0, 0)) < 1e-5);

  std::uniform_int_distribution<int> dim(1, 8), kd(1, 3), st(1, 2), pd(0, 1), ch(1, 3);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t c = ch(rng), o = ch(rng);
    const std::size_t D = dim(rng), H = dim(rng), W = dim(rng);
    const std::size_t a = std::min<std::size_t>(kd(rng), D), b = std::min<std::size_t>(kd(rng), H),
                      e = std::min<std::size_t>(kd(rng), W);
    const std::size_t s0 = st(rng), s1 = st(rng), s2 = st(rng);
    const std::size_t p0 = pd(rng), p1 = pd(rng), p2 = pd(rng);
    Tensor xi = random_tensor({2, c, D, H, W}, rng);
    Tensor ki = random_tensor({o, c, a, b, e}, rng);
    auto yi = ops::conv3d(xi, ki, std::nullopt, {s0, s1, s2}, {p0, p1, p2});
    CHECK(max_abs_diff(yi.data(), testing::naive_conv3d(xi, ki, s0, s1, s2, p0, p1, p2)) < 1e-5);
  }
}

TEST_CASE("pool3d examples and oracle") {
  std::vector<double> onehot(4 * 4 * 4, 0.0);
  onehot[(1 * 4 + 2) * 4 + 3] = 1.0;
  Tensor x(Shape{1, 1, 4, 4, 4}, onehot);
  Tensor y = ops::pool3d(x, ops::PoolKind::Max, {2, 2, 2}, {2, 2, 2});
  CHECK(y.shape() == Shape{1, 1, 2, 2, 2});
  for (std::size_t i = 0; i < 8; ++i) CHECK(y[i] == (i == ((0 * 2 + 1) * 2 + 1) ? 1.0 : 0.0));

  Tensor c = Tensor::full({1, 2, 3, 5, 4}, 2.5);
  Tensor g = ops::pool3d(c, ops::PoolKind::Avg, {3, 5, 4}, {1, 1, 1});
  for (double v : g.data()) CHECK(v == doctest::Approx(2.5));

  std::mt19937_64 rng(8);
  PrecisionScope f64(Precision::Float64);
  std::uniform_int_distribution<int> dim(2, 8), win(1, 3), st(1, 3);
  for (int trial = 0; trial < 30; ++trial) {
    const long D = dim(rng), H = dim(rng), W = dim(rng);
    const long w0 = std::min<long>(win(rng), D), w1 = std::min<long>(win(rng), H),
               w2 = std::min<long>(win(rng), W);
    const long s0 = st(rng), s1 = st(rng), s2 = st(rng);
    Tensor xi = random_tensor({2, 2, std::size_t(D), std::size_t(H), std::size_t(W)}, rng);
    for (bool is_max : {true, false}) {
      auto yi = ops::pool3d(xi, is_max ? ops::PoolKind::Max : ops::PoolKind::Avg,
                            {std::size_t(w0), std::size_t(w1), std::size_t(w2)},
                            {std::size_t(s0), std::size_t(s1), std::size_t(s2)});
      CHECK(max_abs_diff(yi.data(), testing::naive_pool3d(xi, is_max, w0, w1, w2, s0, s1, s2)) <
            1e-5);
    }
  }
  CHECK_THROWS_AS(ops::pool3d(Tensor::zeros({1, 1, 2, 2, 2}), ops::PoolKind::Max, {3, 1, 1},
                              {1, 1, 1}),
                  ShapeError);
}

TEST_CASE("backward basics") {
  Tape tape;
  Tensor x = Tensor(Shape{4}, {1, 2, 3, 4}, true);
  Tensor y;
  {
    Tape::Scope scope(tape);
    y = ops::sum(x);
  }
  Tensor g = backward(tape, y).of(x);
  for (double v : g.data()) CHECK(v == 1.0);

  Tape t2;
  Tensor s = Tensor::scalar(3.0, true);
  Tensor sq;
  {
    Tape::Scope scope(t2);
    sq = ops::mul(s, s);
  }
  CHECK(backward(t2, sq).of(s).item() == 6.0);

  Tape t3;
  Tensor z;
  {
    Tape::Scope scope(t3);
    z = ops::sum(ops::add(x, x));
  }
  Tensor gz = backward(t3, z).of(x);
  for (double v : gz.data()) CHECK(v == 2.0);
}

TEST_CASE("backward errors") {
  Tape tape;
  Tensor x = Tensor(Shape{2}, {1, 2}, true);
  Tensor y;
  {
    Tape::Scope scope(tape);
    y = ops::scale(x, 2.0);
  }
  CHECK_THROWS_AS(backward(tape, y), ShapeError);
  Tensor detached = ops::sum(x);  // no active tape
  CHECK_THROWS_AS(backward(tape, detached), Error);
}

TEST_CASE("primitives reject non-finite outputs") {
  Tensor big(Shape{1}, {1e300});
  PrecisionScope f64(Precision::Float64);
  CHECK_THROWS_AS(ops::mul(big, big), NumericError);
}

TEST_CASE("grad_check reference cases") {
  std::mt19937_64 rng(9);
  Tensor x = random_tensor({5}, rng);
  CHECK(grad_check([](const Tensor& t) { return ops::sum(t); }, x) == doctest::Approx(0.0));
  CHECK(grad_check([](const Tensor& t) { return ops::scale(ops::sum(ops::mul(t, t)), 0.5); },
                   x) < 1e-6);

  Tensor v = random_tensor({1, 1, 4, 4, 4}, rng);
  Tensor k = random_tensor({2, 1, 3, 3, 3}, rng);
  const double err = grad_check(
      [&](const Tensor& t) {
        return ops::mean(ops::relu(ops::conv3d(t, k, std::nullopt, {1, 1, 1}, {1, 1, 1})));
      },
      v);
  CHECK(err < 1e-4);
}

TEST_CASE("every primitive passes grad_check on random shapes") {
  std::mt19937_64 rng(10);
  testing::primitive_grad_sweep(rng, 3, [](const std::string& name, double err) {
    INFO(name);
    CHECK(err < 1e-4);
  });
}

TEST_CASE("batch_norm running statistics use momentum 0.1") {
  PrecisionScope f64(Precision::Float64);
  Tensor x(Shape{2, 1, 2}, {1, 3, 5, 7});
  ops::BatchNormStats stats(1);
  ops::batch_norm(x, Tensor::full({1}, 1.0), Tensor::zeros({1}), stats, true);
  // batch mean 4, unbiased variance 20/3
  CHECK(stats.running_mean[0] == doctest::Approx(0.4));
  CHECK(stats.running_var[0] == doctest::Approx(0.9 + 0.1 * 20.0 / 3.0));
}

TEST_CASE("dropout keeps expectation and is identity at p=0") {
  Rng rng(1);
  Tensor x = Tensor::full({1000}, 1.0);
  CHECK(ops::dropout(x, 0.0, rng).id() == x.id());
  Tensor y = ops::dropout(x, 0.1, rng);
  double m = 0.0;
  for (double v : y.data()) m += v;
  CHECK(m / 1000.0 == doctest::Approx(1.0).epsilon(0.1));
}
