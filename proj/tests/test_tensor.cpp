#include <cmath>
#include <random>

#include "doctest.h"
#include "fud/tensor.hpp"

using namespace fud;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0,
                     double hi = 1.0) {
  auto rng = rng::engine(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.data()) v = dist(rng);
  return t;
}

}  // namespace

TEST_CASE("conv2d forward basics") {
  Tape t;
  Tensor ones = Tensor::full({1, 1, 3, 3}, 1.0);
  Tensor kernel = Tensor::full({1, 1, 2, 2}, 1.0);
  Tensor out = t.conv2d(ones, kernel, 1, 0);
  CHECK(out.shape() == Shape{1, 1, 2, 2});
  for (double v : out.data()) CHECK(v == doctest::Approx(4.0).epsilon(1e-15));

  Tensor x = random_tensor({2, 1, 4, 5}, 7);
  Tensor identity = Tensor::full({1, 1, 1, 1}, 1.0);
  Tensor out2 = t.conv2d(x, identity, 1, 0);
  CHECK(out2.data() == x.data());
}

TEST_CASE("conv2d shape errors name the axis") {
  Tape t;
  Tensor x = Tensor::zeros({1, 2, 4, 4});
  Tensor bad_channels = Tensor::zeros({1, 3, 2, 2});
  CHECK_THROWS_WITH_AS(t.conv2d(x, bad_channels, 1, 0),
                       doctest::Contains("axis 1"), std::invalid_argument);
  Tensor too_tall = Tensor::zeros({1, 2, 6, 2});
  CHECK_THROWS_WITH_AS(t.conv2d(x, too_tall, 1, 0),
                       doctest::Contains("axis 2"), std::invalid_argument);
  CHECK_THROWS_AS(t.conv2d(x, Tensor::zeros({1, 2, 2, 2}), 0, 0),
                  std::invalid_argument);
}

TEST_CASE("conv2d gradient matches finite differences") {
  Tensor x = random_tensor({1, 2, 5, 5}, 11);
  Tensor kernel = random_tensor({3, 2, 3, 3}, 13);
  // w.r.t. input
  const double err_x = grad_check(
      [&](Tape& t, const Tensor& probe) {
        return t.sum(t.conv2d(probe, kernel, 1, 1));
      },
      x);
  CHECK(err_x < 1e-4);
  // w.r.t. kernel
  const double err_k = grad_check(
      [&](Tape& t, const Tensor& probe) {
        return t.sum(t.conv2d(x, probe, 2, 0));
      },
      kernel);
  CHECK(err_k < 1e-4);
}

TEST_CASE("relu and sigmoid") {
  Tape t;
  Tensor x = Tensor::from_data({3}, {-1.0, 0.0, 2.0});
  Tensor y = t.relu(x);
  CHECK(y.data() == std::vector<double>{0.0, 0.0, 2.0});

  Tensor z = t.sigmoid(Tensor::from_data({1}, {0.0}));
  CHECK(z.item() == doctest::Approx(0.5).epsilon(1e-15));
  const auto grad = analytic_gradient(
      [](Tape& tape, const Tensor& probe) {
        return tape.sum(tape.sigmoid(probe));
      },
      Tensor::from_data({1}, {0.0}));
  CHECK(grad[0] == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("guided relu backward zeroes negative upstream") {
  Tensor x = Tensor::from_data({2}, {1.0, 2.0}, true);
  Tensor upstream = Tensor::from_data({2}, {5.0, -3.0});
  Tape t(GradMode::guided);
  Tensor root = t.sum(t.mul(t.relu(x), upstream));
  t.backward(root);
  CHECK(x.grad() == std::vector<double>{5.0, 0.0});

  // standard mode passes the negative upstream through
  Tensor x2 = Tensor::from_data({2}, {1.0, 2.0}, true);
  Tape s;
  s.backward(s.sum(s.mul(s.relu(x2), upstream)));
  CHECK(x2.grad() == std::vector<double>{5.0, -3.0});
}

TEST_CASE("guided mode never changes forward values") {
  Tensor x = random_tensor({2, 1, 8, 8}, 21);
  Tensor k = random_tensor({4, 1, 3, 3}, 22);
  Tape standard(GradMode::standard), guided(GradMode::guided);
  Tensor a = standard.max_pool2(standard.relu(standard.conv2d(x, k, 1, 1)));
  Tensor b = guided.max_pool2(guided.relu(guided.conv2d(x, k, 1, 1)));
  CHECK(a.data() == b.data());
}

TEST_CASE("losses") {
  Tape t;
  Tensor half = Tensor::from_data({1}, {0.5});
  Tensor one = Tensor::from_data({1}, {1.0});
  CHECK(t.bce_loss(half, one).item() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));

  Tensor x = random_tensor({7}, 3);
  CHECK(t.l1_loss(x, x).item() == 0.0);

  Tensor logits = Tensor::zeros({1, 2});
  CHECK(t.cross_entropy_loss(logits, {0}).item() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(t.cross_entropy_loss(logits, {1}).item() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK_THROWS_AS(t.cross_entropy_loss(logits, {2}), std::invalid_argument);

  // bce at the clamp boundary stays finite
  Tensor zero = Tensor::from_data({1}, {0.0});
  CHECK(std::isfinite(t.bce_loss(zero, one).item()));
}

TEST_CASE("backward basics and accumulation") {
  Tensor x = Tensor::from_data({1}, {2.0}, true);
  Tape t;
  Tensor root = t.sum(t.relu(x));
  t.backward(root);
  CHECK(x.grad() == std::vector<double>{1.0});

  Tensor z = Tensor::from_data({1}, {3.0}, true);
  Tape t2;
  Tensor root2 = t2.sum(t2.mul(z, z));
  t2.backward(root2);
  CHECK(z.grad() == std::vector<double>{6.0});

  // same tape twice, without zeroing: exactly 2x
  t2.backward(root2);
  CHECK(z.grad() == std::vector<double>{12.0});

  CHECK_THROWS_AS(t2.backward(Tensor::zeros({2})), std::invalid_argument);
}

TEST_CASE("two-layer chain gradient matches finite differences") {
  Tensor x = random_tensor({1, 1, 6, 6}, 31, 0.2, 1.0);
  Tensor k = random_tensor({2, 1, 3, 3}, 32);
  Tensor w = random_tensor({2, 8}, 33);
  Tensor b = random_tensor({2}, 34);
  auto f = [&](Tape& t, const Tensor& probe) {
    Tensor h = t.max_pool2(t.relu(t.conv2d(probe, k, 1, 0)));
    Tensor flat = t.reshape(h, {1, 8});
    return t.cross_entropy_loss(t.linear(flat, w, b), {1});
  };
  CHECK(grad_check(f, x) < 1e-4);
}

TEST_CASE("sgd_step") {
  Tensor w = Tensor::from_data({1}, {1.0}, true);
  w.grad()[0] = 0.5;
  sgd_step({w}, 0.1);
  CHECK(w.item() == doctest::Approx(0.95).epsilon(1e-15));

  w.zero_grad();
  sgd_step({w}, 0.1);
  CHECK(w.item() == doctest::Approx(0.95).epsilon(1e-15));

  Tensor nograd = Tensor::zeros({1});
  CHECK_THROWS_AS(sgd_step({nograd}, 0.1), std::invalid_argument);

  // 10 steps on (w-3)^2 from 0: geometric approach to 3
  Tensor p = Tensor::from_data({1}, {0.0}, true);
  for (int i = 0; i < 10; ++i) {
    p.zero_grad();
    Tape t;
    Tensor diff = t.sub(p, Tensor::from_data({1}, {3.0}));
    t.backward(t.mul(diff, diff));
    sgd_step({p}, 0.1);
  }
  CHECK(std::abs(p.item() - 3.0) < 0.35);
}

TEST_CASE("grad_check harness") {
  Tensor x = random_tensor({5}, 41);
  CHECK(grad_check([](Tape& t, const Tensor& p) { return t.sum(p); }, x) <
        1e-10);

  Tensor img = random_tensor({1, 1, 6, 6}, 42, 0.1, 0.9);
  Tensor k = random_tensor({2, 1, 3, 3}, 43);
  auto f = [&](Tape& t, const Tensor& probe) {
    Tensor h = t.sigmoid(t.conv2d(probe, k, 1, 0));
    return t.bce_loss(h, Tensor::full(h.shape(), 1.0));
  };
  CHECK(grad_check(f, img) < 1e-4);

  // injected 10% fault must be detected
  auto analytic = analytic_gradient(f, img);
  for (double& g : analytic) g *= 1.1;
  const auto numeric = numeric_gradient(f, img, 1e-5);
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double denom =
        std::max({std::abs(analytic[i]), std::abs(numeric[i]), 1e-8});
    worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / denom);
  }
  CHECK(worst > 0.05);
}

TEST_CASE("primitive sweep gradient checks") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Tensor x4 = random_tensor({2, 2, 4, 4}, 100 + seed);
    Tensor k = random_tensor({3, 2, 3, 3}, 200 + seed);
    Tensor bias = random_tensor({3}, 300 + seed);
    CHECK(grad_check(
              [&](Tape& t, const Tensor& p) {
                return t.mean(t.channel_bias(t.conv2d(p, k, 1, 1), bias));
              },
              x4) < 1e-4);
    CHECK(grad_check(
              [&](Tape& t, const Tensor& p) {
                return t.sum(t.upsample_nearest2(t.max_pool2(p)));
              },
              x4) < 1e-4);
    CHECK(grad_check(
              [&](Tape& t, const Tensor& p) {
                return t.mean(t.sigmoid(t.scale(p, 0.7)));
              },
              x4) < 1e-4);
    Tensor other = random_tensor({2, 2, 4, 4}, 400 + seed);
    CHECK(grad_check(
              [&](Tape& t, const Tensor& p) { return t.l1_loss(p, other); },
              x4) < 1e-4);
    Tensor x2 = random_tensor({3, 6}, 500 + seed);
    Tensor w = random_tensor({4, 6}, 600 + seed);
    Tensor b2 = random_tensor({4}, 700 + seed);
    CHECK(grad_check(
              [&](Tape& t, const Tensor& p) {
                return t.pick(t.linear(p, w, b2), 2);
              },
              x2) < 1e-4);
  }
}

TEST_CASE("determinism: same seed gives bit-identical tensors") {
  auto r1 = rng::engine(99);
  auto r2 = rng::engine(99);
  Tensor a = Tensor::he_uniform({4, 3, 3, 3}, 27, r1);
  Tensor b = Tensor::he_uniform({4, 3, 3, 3}, 27, r2);
  CHECK(a.data() == b.data());
  CHECK(rng::derive(1, 2) == rng::derive(1, 2));
  CHECK(rng::derive(1, 2) != rng::derive(1, 3));
}

TEST_CASE("parallel_for covers every index once") {
  std::vector<int> hits(257, 0);
  parallel_for(257, [&](std::int64_t i) { hits[i] += 1; });
  for (int h : hits) CHECK(h == 1);
}
