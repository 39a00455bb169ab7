#include "support.hpp"

#include "dumamba/error.hpp"
#include "dumamba/network.hpp"
#include "dumamba/nrm.hpp"
#include "dumamba/study.hpp"

using namespace test;
using namespace dumamba::nrm;

TEST_SUITE("nrm") {

TEST_CASE("aggregate is the lambda-weighted sum") {
  const std::vector<Tensor> e(5, Tensor::ones({1, 2, 2, 2, 2}));
  for (double v : values(aggregate(e, make_lambdas(5, 0.5).values))) CHECK(v == 2.5);
  for (double v : values(aggregate(e, make_lambdas(5, 0.0).values))) CHECK(v == 0.0);

  Philox rng(1);
  std::vector<Tensor> r;
  for (int i = 0; i < 5; ++i) r.push_back(random_tensor({1, 2, 2, 2, 2}, rng));
  CHECK(bitwise_equal(aggregate(r, make({5}, {1, 0, 0, 0, 0})), r[0]));
}

TEST_CASE("aggregate rejects inconsistent inputs") {
  const std::vector<Tensor> e{Tensor::ones({1, 2, 2, 2, 2}), Tensor::ones({1, 2, 2, 2, 1})};
  CHECK_THROWS_AS(aggregate(e, make_lambdas(2, 0.5).values), ShapeError);
  CHECK_THROWS_AS(aggregate({Tensor::ones({2})}, make_lambdas(2, 0.5).values), ShapeError);
}

TEST_CASE("swapping stages together with their lambdas leaves the sum unchanged") {
  Philox rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<Tensor> e;
    std::vector<double> l;
    for (int i = 0; i < 4; ++i) {
      e.push_back(random_tensor({1, 3, 2, 2, 2}, rng));
      l.push_back(rng.uniform(-1, 1));
    }
    const Tensor a = aggregate(e, make({4}, l));
    const auto i = static_cast<std::size_t>(rng.below(4)), j = static_cast<std::size_t>(rng.below(4));
    std::swap(e[i], e[j]);
    std::swap(l[i], l[j]);
    CHECK(max_abs_diff(aggregate(e, make({4}, l)), a) < tol(1e-6, 1e-14));
  }
}

TEST_CASE("aggregate is linear in lambda") {
  Philox rng(3);
  std::vector<Tensor> e;
  for (int i = 0; i < 3; ++i) e.push_back(random_tensor({1, 2, 1, 2, 2}, rng));
  const std::vector<double> l1{0.2, -0.4, 1.1}, l2{0.5, 0.3, -0.7};
  std::vector<double> ls(3);
  for (int i = 0; i < 3; ++i) ls[i] = 2.0 * l1[i] + l2[i];
  const Tensor lhs = aggregate(e, make({3}, ls));
  const Tensor rhs = mul_scalar(aggregate(e, make({3}, l1)), 2) + aggregate(e, make({3}, l2));
  CHECK(max_abs_diff(lhs, rhs) < tol(1e-5, 1e-13));
}

TEST_CASE("downsampling reaches the bottleneck shape") {
  Philox rng(4);
  const auto block = make_downsample(8, 32, {2, 2, 2}, rng);
  const Tensor y = downsample_stage(random_tensor({1, 8, 16, 16, 16}, rng), block);
  CHECK(y.shape() == Shape{1, 32, 2, 2, 2});
  CHECK_THROWS_AS(downsample_stage(random_tensor({1, 8, 1, 2, 2}, rng), block), ShapeError);
}

TEST_CASE("the decoder input is m1 minus the estimated noise") {
  const auto cfg = ModelConfig::tiny();
  Model model = build_model(cfg);
  Philox rng(5);
  ForwardTrace trace;
  forward(model, random_tensor({1, 1, 16, 16, 16}, rng), nullptr, &trace);
  REQUIRE(trace.nrm.has_value());
  const auto& n = *trace.nrm;
  CHECK(max_abs_diff(n.m_hat + n.m2, trace.m1) < tol(1e-5, 1e-12));
  CHECK(bitwise_equal(n.m_hat, trace.m_hat));
}

TEST_CASE("zero lambdas and a bias-free second block give the baseline network") {
  for (std::uint64_t seed : {0, 1}) {
    const auto c = study::nrm_off_equivalence(ModelConfig::tiny(), seed, 3);
    CHECK(c.measured < 1e-6);
  }
}

TEST_CASE("lambda history records every logged step") {
  auto l = make_lambdas(3, 0.5);
  l.log();
  l.values.mutable_data()[1] = Scalar(0.75);
  l.log();
  REQUIRE(l.history.size() == 2);
  CHECK(l.history[1][1] == doctest::Approx(0.75));
  CHECK(l.size() == 3);
}

TEST_CASE("module parameters are named under their prefix") {
  Philox rng(6);
  const auto p = make_nrm({2, 4, 4, 8}, 8, {2, 2, 2}, {}, 0.5, rng);
  const auto named = p.named_parameters();
  CHECK(named.front().first == "nrm.down0.weight");
  bool has_lambda = false;
  for (const auto& [name, t] : named) has_lambda |= name == "nrm.lambda";
  CHECK(has_lambda);
  CHECK(count_parameters(named) > 0);
}

}  // TEST_SUITE
