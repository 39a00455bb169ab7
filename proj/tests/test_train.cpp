#include "support.hpp"

#include <limits>

#include "dumamba/error.hpp"
#include "dumamba/train.hpp"

using namespace test;

namespace {

std::vector<data::VolumeSample> small_set(std::size_t n, std::uint64_t seed) {
  data::PhantomConfig pc;
  pc.extent = {16, 16, 16};
  pc.min_radius = 2;
  pc.max_radius = 4;
  return data::gen_phantoms(n, seed, pc);
}

TrainConfig small_config() {
  TrainConfig c;
  c.model = ModelConfig::tiny();
  c.epochs = 2;
  c.batch = 2;
  c.eval_every = 1;
  return c;
}

}  // namespace

TEST_SUITE("train") {

TEST_CASE("polynomial decay") {
  OptimConfig o;
  CHECK(poly_lr(o, 0, 100) == doctest::Approx(0.01));
  CHECK(poly_lr(o, 50, 100) == doctest::Approx(0.01 * std::pow(0.5, 0.9)));
  CHECK(poly_lr(o, 99, 100) == doctest::Approx(0.01 * std::pow(0.01, 0.9)));
  CHECK(poly_lr(o, 100, 100) == 0.0);
}

TEST_CASE("one Nesterov step matches the update rule by hand") {
  Tensor p = make({3}, {1.0, -2.0, 0.5}, true);
  OptimConfig o;
  o.weight_decay = 0.1;
  o.momentum = 0.9;
  o.grad_clip = 0;
  Sgd opt({{"p", p}}, o);
  std::vector<double> v(3, 0.0), w{1.0, -2.0, 0.5};
  for (int step = 0; step < 3; ++step) {
    Tape tape;
    {
      TapeScope scope(tape);
      tape.backward(sum(p * p * p));
    }
    opt.step(0.05);
    for (int i = 0; i < 3; ++i) {
      const double g = 3 * w[i] * w[i] + 0.1 * w[i];
      v[i] = 0.9 * v[i] + g;
      w[i] -= 0.05 * (g + 0.9 * v[i]);
    }
    for (int i = 0; i < 3; ++i) CHECK(double(p.data()[i]) == doctest::Approx(w[i]).epsilon(tol(1e-5, 1e-12)));
  }
}

TEST_CASE("gradient clipping bounds the update and reports the raw norm") {
  Tensor p = make({2}, {3.0, 4.0}, true);
  OptimConfig o;
  o.momentum = 0;
  o.weight_decay = 0;
  o.nesterov = false;
  o.grad_clip = 1.0;
  Sgd opt({{"p", p}}, o);
  Tape tape;
  {
    TapeScope scope(tape);
    tape.backward(mul_scalar(sum(p * p), 0.5));  // gradient (3, 4), norm 5
  }
  CHECK(opt.step(1.0) == doctest::Approx(5.0));
  CHECK(double(p.data()[0]) == doctest::Approx(3.0 - 0.6));
  CHECK(double(p.data()[1]) == doctest::Approx(4.0 - 0.8));
  CHECK(p.grad()[0] == 0.0);
}

TEST_CASE("zero learning rate leaves every parameter bitwise unchanged") {
  TrainConfig c = small_config();
  c.optim.lr = 0;
  const auto samples = small_set(2, 1);
  const Model before = build_model(c.model);
  const auto r = train(c, samples);
  CHECK(r.steps == 2);
  const auto a = before.named_parameters(), b = r.model.named_parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK_MESSAGE(bitwise_equal(a[i].second, b[i].second), a[i].first);
}

TEST_CASE("training is deterministic under a seed") {
  TrainConfig c = small_config();
  c.seed = 5;
  const auto samples = small_set(3, 2);
  const auto r1 = train(c, samples), r2 = train(c, samples);
  CHECK(r1.steps == 4);
  REQUIRE(r1.step_losses.size() == r2.step_losses.size());
  for (std::size_t i = 0; i < r1.step_losses.size(); ++i) CHECK(r1.step_losses[i] == r2.step_losses[i]);
  CHECK(r1.lambda_trace == r2.lambda_trace);
  CHECK(r1.lambda_trace.size() == r1.steps);
}

TEST_CASE("a few steps reduce the loss") {
  TrainConfig c = small_config();
  c.epochs = 6;
  const auto samples = small_set(2, 3);
  const auto r = train(c, samples);
  CHECK(r.epochs.back().loss < r.epochs.front().loss);
  for (const auto& e : r.epochs) CHECK(e.train_dsc >= 0.0);
  CHECK(r.best_epoch >= 0);
}

TEST_CASE("non-finite input aborts training with a snapshot") {
  auto samples = small_set(2, 4);
  samples[1].image.mutable_data()[7] = std::numeric_limits<Scalar>::quiet_NaN();
  bool snapshot = false;
  CHECK_THROWS_AS(train(small_config(), samples, {},
                        [&](const Model& m, std::uint64_t step) {
                          snapshot = m.parameter_count() > 0;
                          CHECK(step == 0);
                        }),
                  NumericError);
  CHECK(snapshot);
}

TEST_CASE("training rejects empty or inconsistent data") {
  CHECK_THROWS_AS(train(small_config(), {}), ValueError);
  auto samples = small_set(1, 5);
  samples[0].label[0] = 9;
  CHECK_THROWS_AS(train(small_config(), samples), ValueError);
}

TEST_CASE("training config json round trip with partial input") {
  TrainConfig c = small_config();
  c.optim.lr = 0.02;
  c.seed = 11;
  const TrainConfig d = TrainConfig::from_json(c.to_json());
  CHECK(d.to_json() == c.to_json());
  const TrainConfig e = TrainConfig::from_json({{"epochs", 7}});
  CHECK(e.epochs == 7);
  CHECK(e.optim.momentum == 0.99);
  CHECK_THROWS_AS(TrainConfig::from_json({{"batch", 0}}), ValueError);
  CHECK_THROWS_AS(TrainConfig::from_json({{"optim", {{"momentum", 1.5}}}}), ValueError);
  CHECK_THROWS_AS(TrainConfig::from_json({{"epochs", "many"}}), ValueError);
}

TEST_CASE("prediction is the per-voxel argmax") {
  const auto samples = small_set(1, 6);
  Model m = build_model(ModelConfig::tiny());
  // A head that only looks at the bias always picks the larger one.
  for (auto& v : m.head.weight.mutable_data()) v = 0;
  m.head.bias.mutable_data()[0] = 0;
  m.head.bias.mutable_data()[1] = 1;
  const auto pred = predict(m, samples[0]);
  for (auto v : pred) CHECK(v == 1);
  const auto report = evaluate(m, samples);
  CHECK(report.rows.size() == 1);
}

}  // TEST_SUITE
