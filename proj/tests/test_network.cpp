#include "support.hpp"

#include <filesystem>
#include <fstream>

#include "dumamba/error.hpp"
#include "dumamba/network.hpp"

using namespace test;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("dumamba_test_" + std::string(precision_name()));
  fs::create_directories(dir);
  return dir / name;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

void spit(const fs::path& p, const std::string& s) {
  std::ofstream os(p, std::ios::binary);
  os << s;
}

FormatError::Kind load_error(const fs::path& p) {
  try {
    load_checkpoint(p.string());
  } catch (const FormatError& e) {
    return e.kind();
  }
  FAIL("checkpoint loaded without error");
  return FormatError::Kind::kMismatch;
}

}  // namespace

TEST_SUITE("network") {

TEST_CASE("all bottleneck tensors share the bottleneck shape") {
  const auto cfg = ModelConfig::desk();
  const Model model = build_model(cfg);
  Philox rng(1);
  ForwardTrace trace;
  const Tensor logits = forward(model, random_tensor({1, 1, 32, 32, 32}, rng), nullptr, &trace);
  CHECK(logits.shape() == Shape{1, 2, 32, 32, 32});
  const auto ext = cfg.bottleneck_extent();
  const Shape bottleneck{1, cfg.channels.back(), ext[0], ext[1], ext[2]};
  CHECK(bottleneck == Shape{1, 128, 2, 2, 2});
  REQUIRE(trace.nrm.has_value());
  REQUIRE(trace.nrm->e.size() == 5);
  for (const auto& e : trace.nrm->e) CHECK(e.shape() == bottleneck);
  CHECK(trace.m1.shape() == bottleneck);
  CHECK(trace.nrm->m2.shape() == bottleneck);
  CHECK(trace.nrm->e_hat.shape() == bottleneck);
  CHECK(trace.nrm->m_hat.shape() == bottleneck);
}

TEST_CASE("config validation") {
  ModelConfig c = ModelConfig::desk();
  CHECK_NOTHROW(c.validate());
  c.patch = {30, 32, 32};
  CHECK_THROWS_AS(c.validate(), ValueError);
  c = ModelConfig::desk();
  c.kernel = 4;
  CHECK_THROWS_AS(c.validate(), ValueError);
  c = ModelConfig::desk();
  c.strides[2] = 3;
  CHECK_THROWS_AS(c.validate(), ValueError);
  c = ModelConfig::desk();
  c.blocks.pop_back();
  CHECK_THROWS_AS(c.validate(), ValueError);
  const Model m = build_model(ModelConfig::tiny());
  CHECK_THROWS_AS(forward(m, Tensor::zeros({1, 1, 12, 16, 16})), ShapeError);
}

TEST_CASE("config json round trip") {
  ModelConfig c = ModelConfig::wide();
  c.seed = 42;
  c.nrm_enabled = false;
  const ModelConfig d = ModelConfig::from_json(c.to_json());
  CHECK(d.to_json() == c.to_json());
  CHECK(d.blocks == std::vector<Index>{1, 3, 4, 6, 6});
  CHECK_THROWS_AS(ModelConfig::from_json(nlohmann::json{{"channels", "wide"}}), ValueError);
}

TEST_CASE("a seed fixes the weights, and both variants share everything outside the module") {
  ModelConfig c = ModelConfig::tiny();
  c.seed = 7;
  const Model a = build_model(c), b = build_model(c);
  c.nrm_enabled = false;
  const Model base = build_model(c);
  const auto pa = a.named_parameters(), pb = b.named_parameters(), pc = base.named_parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(bitwise_equal(pa[i].second, pb[i].second));
  std::size_t shared = 0;
  for (const auto& [name, t] : pc) {
    for (const auto& [n2, t2] : pa) {
      if (n2 == name) {
        CHECK_MESSAGE(bitwise_equal(t, t2), name);
        ++shared;
      }
    }
  }
  CHECK(shared == pc.size());
}

TEST_CASE("parameter accounting on the wide configuration") {
  const Model full = build_model(ModelConfig::wide());
  const auto share = nrm_param_count(full);
  const Model base = full.without_nrm();
  CHECK(share.total == full.parameter_count());
  CHECK(share.total == base.parameter_count() + share.nrm);
  CHECK(share.share >= 0.005);
  CHECK(share.share <= 0.05);
  ModelConfig pc = ModelConfig::wide();
  pc.nrm_enabled = false;
  CHECK(build_model(pc).parameter_count() == base.parameter_count());
}

TEST_CASE("parameter names are unique") {
  const Model m = build_model(ModelConfig::desk());
  auto names = m.parameter_names();
  std::sort(names.begin(), names.end());
  CHECK(std::adjacent_find(names.begin(), names.end()) == names.end());
}

TEST_CASE("clone is deep") {
  const Model m = build_model(ModelConfig::tiny());
  Model c = m.clone();
  c.head.weight.mutable_data()[0] += Scalar(1);
  CHECK(m.head.weight.data()[0] != c.head.weight.data()[0]);
}

TEST_CASE("checkpoint round trip is bitwise") {
  ModelConfig cfg = ModelConfig::tiny();
  cfg.seed = 3;
  const Model m = build_model(cfg);
  Checkpoint ck = make_checkpoint(m);
  ck.step = 17;
  ck.rng = Philox(9).fork(2).state();
  ck.meta = {{"note", "test"}};
  ck.optimizer = {{"velocity.x", Tensor::full({3}, Scalar(0.25))}};
  const auto path = scratch("round.ckpt");
  save_checkpoint(path.string(), ck);
  const Checkpoint back = load_checkpoint(path.string());
  CHECK(back.step == 17);
  CHECK(back.rng.seed == ck.rng.seed);
  CHECK(back.rng.stream == ck.rng.stream);
  CHECK(back.meta == ck.meta);
  CHECK(back.config.to_json() == cfg.to_json());
  REQUIRE(back.optimizer.size() == 1);
  const Model r = model_from_checkpoint(back);
  const auto a = m.named_parameters(), b = r.named_parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].first == b[i].first);
    CHECK(bitwise_equal(a[i].second, b[i].second));
  }
}

TEST_CASE("damaged checkpoints are rejected with a reason") {
  const auto path = scratch("good.ckpt");
  save_checkpoint(path.string(), make_checkpoint(build_model(ModelConfig::tiny())));
  const std::string good = slurp(path);
  const auto bad = scratch("bad.ckpt");

  std::string s = good;
  s[0] = 'X';
  spit(bad, s);
  CHECK(load_error(bad) == FormatError::Kind::kBadMagic);

  s = good;
  s[4] = 99;
  spit(bad, s);
  CHECK(load_error(bad) == FormatError::Kind::kUnknownVersion);

  spit(bad, good.substr(0, good.size() / 2));
  CHECK(load_error(bad) == FormatError::Kind::kTruncated);

  spit(bad, good + "junk");
  CHECK(load_error(bad) == FormatError::Kind::kMismatch);

  spit(bad, "");
  CHECK(load_error(bad) == FormatError::Kind::kBadMagic);
  CHECK_THROWS_AS(load_checkpoint(scratch("missing.ckpt").string()), IoError);
}

TEST_CASE("checkpoint tensors must match the model") {
  Checkpoint ck = make_checkpoint(build_model(ModelConfig::tiny()));
  ck.tensors.pop_back();
  CHECK_THROWS_AS(model_from_checkpoint(ck), FormatError);
  ck = make_checkpoint(build_model(ModelConfig::tiny()));
  ck.tensors[0].second = Tensor::zeros({1});
  CHECK_THROWS_AS(model_from_checkpoint(ck), FormatError);
  ck = make_checkpoint(build_model(ModelConfig::tiny()));
  ck.tensors[1].first = "renamed";
  CHECK_THROWS_AS(model_from_checkpoint(ck), FormatError);
}

TEST_CASE("tensor bundles reload bitwise") {
  Philox rng(4);
  const NamedTensors t{{"a", random_tensor({2, 3}, rng)}, {"b", random_tensor({1, 4, 1, 1, 2}, rng)}};
  const auto path = scratch("bundle.dumt");
  save_tensors(path.string(), t, {{"seed", 4}});
  const auto back = load_tensors(path.string());
  REQUIRE(back.tensors.size() == 2);
  CHECK(back.tensors[1].first == "b");
  CHECK(bitwise_equal(back.tensors[0].second, t[0].second));
  CHECK(bitwise_equal(back.tensors[1].second, t[1].second));
  CHECK(back.meta.at("seed") == 4);
  CHECK_THROWS_AS(load_checkpoint(path.string()), FormatError);
}

}  // TEST_SUITE
