#include "support.hpp"

#include "dumamba/error.hpp"
#include "dumamba/ssm.hpp"
#include "dumamba/study.hpp"

using namespace test;
using namespace dumamba::ssm;

TEST_SUITE("ssm") {

TEST_CASE("zero-order hold of a scalar system") {
  const auto d = zoh_discretize(-1.0, 1.0, 0.1);
  CHECK(d.a_bar == doctest::Approx(0.9048374).epsilon(1e-7));
  CHECK(d.b_bar == doctest::Approx(0.0951626).epsilon(1e-6));
  CHECK_THROWS_AS(zoh_discretize(-1.0, 1.0, 0.0), ValueError);
  CHECK_THROWS_AS(zoh_discretize(-1.0, 1.0, -0.5), ValueError);
}

TEST_CASE("hold factor is smooth across its Taylor branch") {
  for (double z : {-1e-3, -2e-4, -1e-4, -5e-5, 0.0, 5e-5, 1e-4, 2e-4}) {
    const double exact = z == 0.0 ? 1.0 : std::expm1(z) / z;
    CHECK(zoh_factor(z) == doctest::Approx(exact).epsilon(1e-9));
    const double h = 1e-6;
    const double fd = (zoh_factor(z + h) - zoh_factor(z - h)) / (2 * h);
    CHECK(zoh_factor_derivative(z) == doctest::Approx(fd).epsilon(1e-5));
  }
}

TEST_CASE("discretised poles stay inside the unit circle") {
  Philox rng(17);
  for (int i = 0; i < 200; ++i) {
    const double a = -std::exp(rng.uniform(-6.0, 4.0));
    const double delta = std::exp(rng.uniform(-9.0, 3.0));
    const double ab = zoh_discretize(a, 1.0, delta).a_bar;
    CHECK(ab >= 0.0);  // exp underflows for very stiff poles
    CHECK(ab < 1.0);
  }
}

TEST_CASE("integrator scan of ones counts") {
  SsmParams p;
  p.a = {0.0};
  p.b = {{1.0}};
  p.c = {{1.0}};
  p.delta = {1.0};
  const std::vector<double> x{1, 1, 1};
  CHECK(ssm_scan(p, x) == std::vector<double>{1, 2, 3});
  CHECK(ssm_kernel(p, 3) == std::vector<double>{1, 1, 1});
  CHECK(causal_convolve(ssm_kernel(p, 3), x) == std::vector<double>{1, 2, 3});
}

TEST_CASE("kernel requires a time-invariant system") {
  SsmParams p;
  p.a = {-1.0};
  p.b = {{1.0}, {1.0}};
  p.c = {{1.0}, {1.0}};
  p.delta = {0.1, 0.2};
  CHECK_THROWS_AS(ssm_kernel(p, 2), ValueError);
}

TEST_CASE("time-invariant scan equals convolution with its kernel") {
  const auto c = study::scan_kernel_agreement(1, 50, 64);
  CHECK(c.passed);
  CHECK(c.measured < 1e-5);
}

TEST_CASE("bounded input keeps the state bounded") {
  Philox rng(3);
  std::vector<double> a_log{0.2, -0.5, 1.0};
  const auto p = SsmParams::lti_from_log(a_log, {1.0, -0.5, 2.0}, {1.0, 1.0, 1.0}, 0.05);
  std::vector<double> x(2000);
  for (auto& v : x) v = rng.uniform(-1.0, 1.0);
  const auto y = ssm_scan(p, x);
  // |h_n| <= |b_bar| / (1 - a_bar) per state, so |y| is bounded by the sum.
  double bound = 0.0;
  for (std::size_t n = 0; n < 3; ++n) {
    const auto d = zoh_discretize(p.a[n], p.b[0][n], p.delta[0]);
    bound += std::abs(d.b_bar) / (1.0 - d.a_bar);
  }
  for (double v : y) CHECK(std::abs(v) <= bound + 1e-9);
}

TEST_CASE("volume to tokens is row-major over space") {
  std::vector<double> v(16);
  for (std::size_t i = 0; i < 16; ++i) v[i] = static_cast<double>(i);
  const Tensor x = make({1, 2, 2, 2, 2}, v);
  const Tensor t = volume_to_tokens(x);
  REQUIRE(t.shape() == Shape{8, 2});
  const auto d = t.data();
  for (Index dd = 0; dd < 2; ++dd)
    for (Index h = 0; h < 2; ++h)
      for (Index w = 0; w < 2; ++w) {
        const Index tok = (dd * 2 + h) * 2 + w;
        for (Index c = 0; c < 2; ++c) {
          CHECK(d[tok * 2 + c] == v[((c * 2 + dd) * 2 + h) * 2 + w]);
        }
      }
  CHECK(bitwise_equal(tokens_to_volume(t, x.shape()), x));
}

TEST_CASE("depthwise causal convolution never looks ahead") {
  Philox rng(5);
  const Tensor w = random_tensor({3, 4}, rng);
  const Tensor b = random_tensor({3}, rng);
  Tensor x = random_tensor({1, 9, 3}, rng);
  const auto y0 = values(causal_depthwise_conv1d(x, w, b));
  x.mutable_data()[5 * 3 + 1] += Scalar(1);
  const auto y1 = values(causal_depthwise_conv1d(x, w, b));
  for (Index t = 0; t < 9; ++t) {
    for (Index c = 0; c < 3; ++c) {
      const bool same = y0[t * 3 + c] == y1[t * 3 + c];
      CHECK(same == (t < 5 || c != 1 || t > 5 + 3));
    }
  }
}

TEST_CASE("selective scan is causal") {
  Philox rng(6);
  const Index L = 7, D = 2, N = 3;
  Tensor u = random_tensor({1, L, D}, rng);
  Tensor delta = Tensor::full({1, L, D}, Scalar(0.3));
  const Tensor a_log = random_tensor({D, N}, rng);
  Tensor bm = random_tensor({1, L, N}, rng);
  const Tensor cm = random_tensor({1, L, N}, rng);
  const Tensor d_skip = Tensor::ones({D});
  const auto y0 = values(selective_scan(u, delta, a_log, bm, cm, d_skip));
  bm.mutable_data()[4 * N] += Scalar(0.5);
  delta.mutable_data()[4 * D + 1] = Scalar(0.9);
  const auto y1 = values(selective_scan(u, delta, a_log, bm, cm, d_skip));
  for (Index t = 0; t < 4; ++t) {
    for (Index d = 0; d < D; ++d) CHECK(y0[t * D + d] == y1[t * D + d]);
  }
  CHECK(y0[4 * D + 1] != y1[4 * D + 1]);
  CHECK_THROWS_AS(selective_scan(u, Tensor::zeros({1, L, D}), a_log, bm, cm, d_skip), ValueError);
}

TEST_CASE("mamba block keeps the volume shape") {
  Philox rng(7);
  MambaConfig cfg;
  const auto p = make_mamba_block(4, cfg, rng);
  CHECK(p.inner == 8);
  CHECK(p.dt_rank == 1);
  const Tensor x = random_tensor({1, 4, 4, 4, 4}, rng);
  CHECK(mamba_block(x, p).shape() == x.shape());
  CHECK_THROWS_AS(mamba_block(random_tensor({1, 3, 4, 4, 4}, rng), p), ShapeError);
}

TEST_CASE("mamba block maps zero to zero without biases") {
  Philox rng(8);
  auto p = make_mamba_block(6, {}, rng);
  p.zero_biases();
  const auto y = values(mamba_block(Tensor::zeros({2, 6, 2, 3, 2}), p));
  for (double v : y) CHECK(v == 0.0);
}

TEST_CASE("saturated gate passes the state-space path through") {
  // With the gate pre-activation pushed far positive, SiLU(z) ~ z and the
  // block reduces to out_proj(y * z) with y from the state-space path.
  Philox rng(9);
  auto p = make_mamba_block(4, {}, rng);
  for (auto& v : p.in_z.bias.mutable_data()) v = Scalar(40);
  const Tensor x = random_tensor({1, 4, 2, 2, 3}, rng);
  const Tensor out = mamba_block(x, p);

  const Index L = 12;
  const Tensor tokens = volume_to_tokens(x);
  const Tensor xs = reshape(linear(tokens, p.in_x), {1, L, p.inner});
  const Tensor u = silu(causal_depthwise_conv1d(xs, p.conv_weight, p.conv_bias));
  const Tensor x_dbl = linear(reshape(u, {L, p.inner}), p.x_proj);
  const Tensor delta =
      reshape(softplus(linear(slice(x_dbl, 1, 0, p.dt_rank), p.dt_proj)), {1, L, p.inner});
  const Tensor bm = reshape(slice(x_dbl, 1, p.dt_rank, p.state), {1, L, p.state});
  const Tensor cm = reshape(slice(x_dbl, 1, p.dt_rank + p.state, p.state), {1, L, p.state});
  const Tensor y = selective_scan(u, delta, p.a_log, bm, cm, p.d_skip);
  const Tensor z = linear(tokens, p.in_z);
  const Tensor want = tokens_to_volume(linear(reshape(y, {L, p.inner}) * z, p.out_proj), x.shape());

  double scale = 0.0;
  for (double v : values(want)) scale = std::max(scale, std::abs(v));
  CHECK(max_abs_diff(out, want) / scale < 1e-3);
}

TEST_CASE("timescale bias inverts softplus onto the initial range") {
  Philox rng(10);
  const auto p = make_mamba_block(32, {}, rng);
  for (Scalar b : p.dt_proj.bias.data()) {
    const double dt = std::log1p(std::exp(double(b)));
    CHECK(dt >= 1e-4 * 0.999);
    CHECK(dt <= 0.1 * 1.001);
  }
  const auto al = p.a_log.data();
  for (Index n = 0; n < p.state; ++n) CHECK(double(al[n]) == doctest::Approx(std::log(n + 1.0)));
}

}  // TEST_SUITE
