#include <doctest.h>

#include <cmath>
#include <vector>

#include "osvit/error.hpp"
#include "osvit/grad_check.hpp"
#include "osvit/ops.hpp"
#include "support.hpp"

using namespace osvit;
using osvit::testing::random_tensor;

namespace {

Tensor64 t64(Shape shape, std::vector<double> data) {
  return Tensor64(std::move(shape), std::move(data));
}

void check_close(std::span<const double> got, std::vector<double> want,
                 double tol) {
  REQUIRE(got.size() == want.size());
  for (std::size_t i = 0; i < want.size(); ++i) {
    CHECK(std::abs(got[i] - want[i]) <= tol);
  }
}

}  // namespace

TEST_CASE("matmul examples") {
  const auto a = t64({2, 2}, {1, 2, 3, 4});
  const auto eye = t64({2, 2}, {1, 0, 0, 1});
  check_close(ops::matmul(a, eye).data(), {1, 2, 3, 4}, 0);
  const auto b = t64({2, 2}, {5, 6, 7, 8});
  check_close(ops::matmul(a, b).data(), {19, 22, 43, 50}, 0);

  Rng rng(1);
  const auto z = ops::matmul(Tensor64::zeros({3, 4}),
                             random_tensor<double>({4, 2}, rng));
  CHECK(z.shape() == Shape{3, 2});
  for (double x : z.data()) CHECK(x == 0.0);

  CHECK_THROWS_AS(ops::matmul(a, Tensor64::zeros({3, 2})), DimensionError);
}

TEST_CASE("matmul float matches double") {
  Rng rng(2);
  const auto a = random_tensor<double>({3, 5, 7}, rng);
  const auto b = random_tensor<double>({7, 4}, rng);
  const auto ref = ops::matmul(a, b);
  const auto got = ops::matmul(a.cast<float>(), b.cast<float>());
  CHECK(got.shape() == Shape{3, 5, 4});
  for (std::size_t i = 0; i < ref.numel(); ++i) {
    CHECK(got.data()[i] == doctest::Approx(ref.data()[i]).epsilon(1e-5));
  }
}

TEST_CASE("softmax examples") {
  check_close(ops::softmax(t64({3}, {0, 0, 0}), 0).data(),
              {1.0 / 3, 1.0 / 3, 1.0 / 3}, 1e-12);
  check_close(
      ops::softmax(t64({3}, {std::log(1.0), std::log(2.0), std::log(3.0)}), 0)
          .data(),
      {1.0 / 6, 1.0 / 3, 0.5}, 1e-12);

  Rng rng(3);
  const auto x = random_tensor<double>({4, 6}, rng, -5, 5);
  auto shifted = x.clone();
  for (std::size_t r = 0; r < 4; ++r) {
    for (std::size_t c = 0; c < 6; ++c) shifted.data()[r * 6 + c] += 37.0 * r;
  }
  const auto a = ops::softmax(x, 1);
  const auto b = ops::softmax(shifted, 1);
  for (std::size_t i = 0; i < a.numel(); ++i) {
    CHECK(a.data()[i] == doctest::Approx(b.data()[i]).epsilon(1e-12));
  }

  const auto big = ops::softmax(t64({2}, {1000, 0}), 0);
  CHECK(std::isfinite(big.data()[1]));
  CHECK(big.data()[0] == doctest::Approx(1.0));
}

TEST_CASE("layer_norm examples") {
  const auto ones = Tensor64::full({4}, 1.0);
  const auto zeros = Tensor64::zeros({4});
  check_close(ops::layer_norm(t64({1, 4}, {1, 2, 3, 4}), ones, zeros, 0.0).data(),
              {-1.3416407865, -0.4472135955, 0.4472135955, 1.3416407865}, 1e-9);
  const auto flat = ops::layer_norm(Tensor64::full({2, 4}, 5.0), ones, zeros, 1e-6);
  for (double v : flat.data()) CHECK(v == 0.0);

  Rng rng(4);
  const auto g = Tensor64::full({16}, 1.0);
  const auto out = ops::layer_norm(random_tensor<double>({3, 16}, rng, -4, 9), g,
                                   Tensor64::zeros({16}), 1e-12);
  for (std::size_t r = 0; r < 3; ++r) {
    double mean = 0, var = 0;
    for (std::size_t c = 0; c < 16; ++c) mean += out.data()[r * 16 + c];
    mean /= 16;
    for (std::size_t c = 0; c < 16; ++c) {
      const double d = out.data()[r * 16 + c] - mean;
      var += d * d;
    }
    CHECK(std::abs(mean) < 1e-9);
    CHECK(var / 16 == doctest::Approx(1.0).epsilon(1e-6));
  }

  CHECK_THROWS_AS(ops::layer_norm(t64({1, 4}, {1, 2, 3, 4}),
                                  Tensor64::full({3}, 1.0), Tensor64::zeros({3}),
                                  1e-6),
                  DimensionError);
}

TEST_CASE("gelu examples") {
  const auto y = ops::gelu(t64({3}, {0, 10, 1}));
  CHECK(y.data()[0] == 0.0);
  CHECK(y.data()[1] == doctest::Approx(10.0).epsilon(1e-12));
  CHECK(std::abs(y.data()[2] - 0.8413) < 1e-4);

  Rng rng(5);
  const auto x = random_tensor<double>({257}, rng, -6, 6);
  const auto exact = ops::gelu(x);
  const auto fast = ops::gelu(x.cast<float>());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    CHECK(std::abs(fast.data()[i] - exact.data()[i]) < 1e-5);
  }
}

TEST_CASE("concat examples and gradients") {
  Tape64 tape;
  ActiveTape<double> active(tape);
  auto a = Tensor64::full({1, 192}, 0.5).set_requires_grad();
  auto b = Tensor64::full({1, 1}, 2.0).set_requires_grad();
  const auto c = ops::concat(a, b, 1);
  CHECK(c.shape() == Shape{1, 193});
  backward(ops::sum(c));
  for (double g : a.grad()) CHECK(g == 1.0);
  CHECK(b.grad()[0] == 1.0);

  const auto x = t64({2, 3}, {1, 2, 3, 4, 5, 6});
  const auto same = ops::concat(x, Tensor64::zeros({2, 0}), 1);
  CHECK(same.shape() == x.shape());
  check_close(same.data(), {1, 2, 3, 4, 5, 6}, 0);
}

TEST_CASE("backward of simple losses") {
  Rng rng(6);
  Tape64 tape;
  ActiveTape<double> active(tape);
  auto x = random_tensor<double>({3, 4}, rng).set_requires_grad();
  backward(ops::sum(x));
  for (double g : x.grad()) CHECK(g == 1.0);

  x.zero_grad();
  backward(ops::sum(ops::mul(x, x)));
  for (std::size_t i = 0; i < x.numel(); ++i) {
    CHECK(x.grad()[i] == doctest::Approx(2.0 * x.data()[i]));
  }
}

TEST_CASE("active tape restores the previous tape") {
  CHECK(Tape64::active() == nullptr);
  Tape64 outer;
  {
    ActiveTape<double> a(outer);
    Tape64 inner;
    {
      ActiveTape<double> b(inner);
      CHECK(Tape64::active() == &inner);
    }
    CHECK(Tape64::active() == &outer);
  }
  CHECK(Tape64::active() == nullptr);
}

TEST_CASE("broadcast add over leading axes") {
  const auto a = t64({2, 3}, {1, 2, 3, 4, 5, 6});
  const auto b = t64({3}, {10, 20, 30});
  check_close(ops::add(a, b).data(), {11, 22, 33, 14, 25, 36}, 0);
  CHECK_THROWS_AS(ops::add(a, t64({2}, {1, 2})), DimensionError);
}

TEST_CASE("grad_check oracles") {
  Rng rng(7);
  const std::vector<Tensor64> mats{random_tensor<double>({3, 4}, rng),
                                   random_tensor<double>({4, 2}, rng)};
  const auto mm = grad_check(
      [](std::span<const Tensor64> in) {
        return ops::sum(ops::matmul(in[0], in[1]));
      },
      mats);
  CHECK(mm.passed);
  CHECK(mm.max_relative_error < 1e-6);

  const std::vector<std::int64_t> targets{0, 2, 1};
  const std::vector<Tensor64> logits{random_tensor<double>({3, 3}, rng, -2, 2)};
  const auto ce = grad_check(
      [&](std::span<const Tensor64> in) {
        return ops::cross_entropy(in[0], targets);
      },
      logits);
  CHECK(ce.passed);
  CHECK(ce.max_relative_error < 1e-5);

  // The second column never reaches the output.
  const std::vector<Tensor64> x{random_tensor<double>({3, 2}, rng)};
  const auto constant = grad_check(
      [](std::span<const Tensor64> in) {
        const auto first = ops::slice(in[0], 1, 0, 1);
        return ops::sum(ops::mul(first, first));
      },
      x);
  CHECK(constant.passed);
  CHECK(constant.zero_coords == 3);
}

TEST_CASE("cross_entropy examples") {
  const std::vector<std::int64_t> t0{0};
  const std::vector<std::int64_t> t2{2};
  CHECK(ops::cross_entropy(t64({1, 3}, {0, 0, 0}), t2).item() ==
        doctest::Approx(1.098612).epsilon(1e-6));
  CHECK(ops::cross_entropy(t64({1, 3}, {100, 0, 0}), t0).item() <
        1e-40);
  CHECK(ops::cross_entropy(t64({1, 3}, {1, 2, 3}), t2).item() ==
        doctest::Approx(0.40761).epsilon(1e-4));

  const std::vector<std::int64_t> mixed{1, ops::kDefaultIgnoreIndex, 0};
  const std::vector<std::int64_t> kept{1, 0};
  const auto full = t64({3, 3}, {0.3, -1, 2, 5, 5, 5, 1, 0.5, -0.2});
  const auto dropped = t64({2, 3}, {0.3, -1, 2, 1, 0.5, -0.2});
  CHECK(ops::cross_entropy(full, mixed).item() ==
        doctest::Approx(ops::cross_entropy(dropped, kept).item()).epsilon(1e-14));
}
