#include "support.hpp"

#include "dumamba/error.hpp"

using namespace test;

TEST_SUITE("tensor") {

TEST_CASE("broadcast add of equal shapes is elementwise") {
  const Tensor c = make({2}, {1, 2}) + make({2}, {3, 4});
  CHECK(values(c) == std::vector<double>{4, 6});
}

TEST_CASE("broadcast shapes follow the trailing-dimension rule") {
  CHECK(broadcast_shape({3, 1, 5}, {4, 1}) == Shape{3, 4, 5});
  CHECK(broadcast_shape({}, {2, 2}) == Shape{2, 2});
  CHECK_THROWS_AS(broadcast_shape({3, 4}, {4, 5}), ShapeError);
  CHECK_THROWS_AS(make({2, 3}, std::vector<double>(6)) + make({2}, {1, 2}), ShapeError);
}

TEST_CASE("broadcast then reduce over broadcast axes equals the unbroadcast sum") {
  Philox rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const Index m = 1 + rng.below(4), n = 1 + rng.below(4);
    Tensor a = random_tensor({m, n}, rng);
    Tensor row = random_tensor({n}, rng);
    const Tensor summed = sum(a + row, {0});
    const Tensor direct = sum(a, {0}) + mul_scalar(row, static_cast<Scalar>(m));
    CHECK(max_abs_diff(summed, direct) < tol(1e-5, 1e-12));
  }
}

TEST_CASE("matmul of small integer matrices") {
  const Tensor c = matmul(make({2, 2}, {1, 2, 3, 4}), make({2, 2}, {5, 6, 7, 8}));
  CHECK(c.shape() == Shape{2, 2});
  CHECK(values(c) == std::vector<double>{19, 22, 43, 50});
  CHECK_THROWS_AS(matmul(make({2, 3}, std::vector<double>(6)), make({2, 2}, {1, 2, 3, 4})), ShapeError);
}

TEST_CASE("gradient of sum of squares is twice the input") {
  Tensor x = make({3}, {1, 2, 3}, true);
  CHECK(grad_of(x, [&] { return sum(x * x); }) == std::vector<double>{2, 4, 6});
}

TEST_CASE("gradient of sum is ones") {
  Tensor x = make({2, 2}, {0.5, -1, 3, 7}, true);
  CHECK(grad_of(x, [&] { return sum(x); }) == std::vector<double>{1, 1, 1, 1});
}

TEST_CASE("gradients accumulate over every use of a tensor") {
  Tensor x = make({2}, {1.5, -2}, true);
  const auto g = grad_of(x, [&] { return sum(x * x + x); });
  CHECK(g[0] == doctest::Approx(4.0));
  CHECK(g[1] == doctest::Approx(-3.0));
}

TEST_CASE("tape replay is deterministic") {
  Philox rng(3);
  Tensor a = random_tensor({4, 5}, rng, true);
  Tensor b = random_tensor({5, 3}, rng);
  const auto f = [&] { return sum(tanh(matmul(a, b)) * sigmoid(sum(a, {1}, true))); };
  const auto g1 = grad_of(a, f);
  const auto g2 = grad_of(a, f);
  REQUIRE(g1.size() == g2.size());
  CHECK(std::memcmp(g1.data(), g2.data(), g1.size() * sizeof(double)) == 0);
}

TEST_CASE("tape misuse is reported") {
  Tensor x = make({2}, {1, 2}, true);
  SUBCASE("second backward without reset") {
    Tape tape;
    TapeScope scope(tape);
    const Tensor y = sum(x * x);
    tape.backward(y);
    CHECK_THROWS_AS(tape.backward(y), AutogradError);
    tape.reset();
  }
  SUBCASE("non-scalar root") {
    Tape tape;
    TapeScope scope(tape);
    CHECK_THROWS_AS(tape.backward(x * x), AutogradError);
  }
  SUBCASE("root recorded elsewhere") {
    Tensor y = sum(x * x);  // no tape active
    Tape tape;
    TapeScope scope(tape);
    CHECK_THROWS_AS(tape.backward(y), AutogradError);
  }
  SUBCASE("no active tape") { CHECK_THROWS_AS(backward(sum(x)), AutogradError); }
  SUBCASE("requires_grad on a non-leaf") {
    Tape tape;
    TapeScope scope(tape);
    Tensor y = x * x;
    CHECK_THROWS_AS(y.set_requires_grad(true), AutogradError);
  }
}

TEST_CASE("ops without a tape record nothing") {
  Tensor x = make({2}, {1, 2}, true);
  Tape tape;
  const Tensor y = exp(x);
  CHECK(tape.size() == 0);
  CHECK(y.is_leaf());
}

TEST_CASE("non-finite results raise NumericError") {
  CHECK_THROWS_AS(log(make({1}, {-1})), NumericError);
  CHECK_THROWS_AS(div(make({1}, {1}), make({1}, {0})), NumericError);
  CHECK_NOTHROW(log(make({1}, {1})));
}

TEST_CASE("leaky relu uses the given slope") {
  CHECK(values(leaky_relu(make({2}, {-1, 2}), Scalar(0.01)))[0] == doctest::Approx(-0.01));
  CHECK(values(leaky_relu(make({2}, {-1, 2}), Scalar(0.01)))[1] == 2.0);
}

TEST_CASE("reshape and permute round trips") {
  Philox rng(5);
  const Tensor x = random_tensor({2, 3}, rng);
  CHECK(bitwise_equal(reshape(reshape(x, {3, 2}), {2, 3}), x));
  CHECK(reshape(x, {-1}).shape() == Shape{6});
  CHECK_THROWS_AS(reshape(x, {4, 2}), ShapeError);

  const Tensor v = random_tensor({2, 3, 4, 5}, rng);
  const Tensor p = permute(v, {2, 0, 3, 1});
  CHECK(p.shape() == Shape{4, 2, 5, 3});
  CHECK(bitwise_equal(permute(p, {1, 3, 0, 2}), v));
  CHECK_THROWS_AS(permute(v, {0, 0, 1, 2}), ShapeError);

  auto a = values(v), b = values(p);
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  CHECK(a == b);
}

TEST_CASE("permute moves the addressed element") {
  const Tensor x = make({2, 3}, {0, 1, 2, 3, 4, 5});
  CHECK(values(permute(x, {1, 0})) == std::vector<double>{0, 3, 1, 4, 2, 5});
}

TEST_CASE("slices of a concatenation recover the parts") {
  Philox rng(9);
  for (int axis = 0; axis < 3; ++axis) {
    Shape sa{2, 3, 4}, sb{2, 3, 4};
    sb[axis] = 2;
    const Tensor a = random_tensor(sa, rng), b = random_tensor(sb, rng);
    const Tensor c = concat({a, b}, axis);
    CHECK(bitwise_equal(slice(c, axis, 0, sa[axis]), a));
    CHECK(bitwise_equal(slice(c, axis, sa[axis], 2), b));
  }
  CHECK_THROWS_AS(slice(make({3}, {1, 2, 3}), 0, 2, 2), ShapeError);
}

TEST_CASE("reductions over axes") {
  const Tensor x = make({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(values(sum(x, {1})) == std::vector<double>{6, 15});
  CHECK(values(sum(x, {0})) == std::vector<double>{5, 7, 9});
  CHECK(mean(x, {1}, true).shape() == Shape{2, 1});
  CHECK(values(mean(x, {1}, true)) == std::vector<double>{2, 5});
  CHECK(mean(x).item() == doctest::Approx(3.5));
}

TEST_CASE("detach and clone do not share history") {
  Tensor x = make({2}, {1, 2}, true);
  Tensor c = x.clone();
  c.mutable_data()[0] = 9;
  CHECK(x.data()[0] == 1);
  CHECK_FALSE(x.detach().requires_grad());
}

}  // TEST_SUITE
