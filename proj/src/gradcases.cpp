#include "dumamba/gradcases.hpp"

#include <map>

#include "dumamba/network.hpp"
#include "dumamba/nn.hpp"
#include "dumamba/nrm.hpp"
#include "dumamba/ssm.hpp"

DUMAMBA_BEGIN_NAMESPACE

namespace {

Tensor uniform(const Shape& shape, Philox& rng, double lo, double hi, bool grad = true) {
  std::vector<Scalar> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = static_cast<Scalar>(rng.uniform(lo, hi));
  return Tensor::from(shape, std::move(v), grad);
}

Tensor labels(const Shape& shape, Index classes, Philox& rng) {
  std::vector<Scalar> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = static_cast<Scalar>(rng.below(static_cast<std::uint64_t>(classes)));
  return Tensor::from(shape, std::move(v));
}

// Generic scalar readout of a non-scalar output.
GradCase projected(std::string name, std::vector<Tensor> inputs, const Shape& out_shape,
                   Philox& rng, std::function<Tensor()> f) {
  Tensor r = uniform(out_shape, rng, -1.0, 1.0, false);
  GradCase c;
  c.name = std::move(name);
  c.inputs = std::move(inputs);
  c.constants = {r};
  c.loss = [f = std::move(f), r] { return sum(mul(f(), r)); };
  return c;
}

using Builder = std::function<GradCase(Philox&)>;

GradCase unary(const std::string& name, Philox& rng, double lo, double hi,
               Tensor (*op)(const Tensor&)) {
  Tensor x = uniform({3, 4}, rng, lo, hi);
  return projected(name, {x}, {3, 4}, rng, [x, op] { return op(x); });
}

GradCase binary(const std::string& name, Philox& rng, const Shape& sa, const Shape& sb, double lo_b,
                double hi_b, Tensor (*op)(const Tensor&, const Tensor&)) {
  Tensor a = uniform(sa, rng, -1.0, 1.0);
  Tensor b = uniform(sb, rng, lo_b, hi_b);
  return projected(name, {a, b}, broadcast_shape(sa, sb), rng, [a, b, op] { return op(a, b); });
}

void append_params(std::vector<Tensor>& dst, const NamedTensors& params) {
  for (const auto& [n, t] : params) {
    if (t.defined()) dst.push_back(t);
  }
}

GradCase model_case(const std::string& name, Philox& rng, bool nrm_on) {
  ModelConfig cfg = ModelConfig::tiny();
  cfg.seed = rng.next_u64();
  cfg.nrm_enabled = nrm_on;
  auto model = std::make_shared<Model>(build_model(cfg));
  Tensor x = uniform({1, 1, 16, 16, 16}, rng, -1.0, 1.0);
  Tensor y = labels({1, 16, 16, 16}, 2, rng);
  GradCase c;
  c.name = name;
  append_params(c.inputs, model->named_parameters());
  c.inputs.push_back(x);
  c.constants = {y};
  c.loss = [model, x, y] { return nn::dice_ce_loss(forward(*model, x), y).total; };
  return c;
}

const std::vector<std::pair<std::string, Builder>>& registry() {
  static const std::vector<std::pair<std::string, Builder>> cases = {
      {"add_broadcast",
       [](Philox& r) { return binary("add_broadcast", r, {2, 3, 4}, {4}, -1, 1, add); }},
      {"sub_broadcast",
       [](Philox& r) { return binary("sub_broadcast", r, {1, 4}, {3, 1}, -1, 1, sub); }},
      {"mul_broadcast",
       [](Philox& r) { return binary("mul_broadcast", r, {2, 3, 4}, {3, 1}, -1, 1, mul); }},
      {"div", [](Philox& r) { return binary("div", r, {3, 4}, {3, 4}, 0.5, 2.0, div); }},
      {"neg", [](Philox& r) { return unary("neg", r, -1, 1, neg); }},
      {"exp", [](Philox& r) { return unary("exp", r, -1, 1, exp); }},
      {"log", [](Philox& r) { return unary("log", r, 0.5, 2, log); }},
      {"sqrt", [](Philox& r) { return unary("sqrt", r, 0.5, 2, sqrt); }},
      {"square", [](Philox& r) { return unary("square", r, -1, 1, square); }},
      {"relu", [](Philox& r) { return unary("relu", r, -1, 1, relu); }},
      {"sigmoid", [](Philox& r) { return unary("sigmoid", r, -2, 2, sigmoid); }},
      {"silu", [](Philox& r) { return unary("silu", r, -2, 2, silu); }},
      {"softplus", [](Philox& r) { return unary("softplus", r, -2, 2, softplus); }},
      {"tanh", [](Philox& r) { return unary("tanh", r, -2, 2, tanh); }},
      {"leaky_relu",
       [](Philox& r) {
         Tensor x = uniform({3, 4}, r, -1, 1);
         return projected("leaky_relu", {x}, {3, 4}, r,
                          [x] { return leaky_relu(x, nn::kLeakySlope); });
       }},
      {"scalar_ops",
       [](Philox& r) {
         Tensor x = uniform({3, 4}, r, -1, 1);
         return projected("scalar_ops", {x}, {3, 4}, r,
                          [x] { return mul_scalar(add_scalar(x, Scalar(0.5)), Scalar(-1.5)); });
       }},
      {"sum_axes",
       [](Philox& r) {
         Tensor x = uniform({2, 3, 4}, r, -1, 1);
         return projected("sum_axes", {x}, {3}, r, [x] { return sum(x, {0, 2}); });
       }},
      {"mean_keepdim",
       [](Philox& r) {
         Tensor x = uniform({2, 3, 4}, r, -1, 1);
         return projected("mean_keepdim", {x}, {2, 1, 4}, r, [x] { return mean(x, {1}, true); });
       }},
      {"matmul",
       [](Philox& r) {
         Tensor a = uniform({3, 4}, r, -1, 1);
         Tensor b = uniform({4, 5}, r, -1, 1);
         return projected("matmul", {a, b}, {3, 5}, r, [a, b] { return matmul(a, b); });
       }},
      {"reshape_permute",
       [](Philox& r) {
         Tensor x = uniform({2, 3, 4}, r, -1, 1);
         return projected("reshape_permute", {x}, {4, 6}, r,
                          [x] { return reshape(permute(x, {2, 0, 1}), {4, 6}); });
       }},
      {"concat_slice",
       [](Philox& r) {
         Tensor a = uniform({2, 2, 3}, r, -1, 1);
         Tensor b = uniform({2, 1, 3}, r, -1, 1);
         return projected("concat_slice", {a, b}, {2, 2, 3}, r,
                          [a, b] { return slice(concat({a, b}, 1), 1, 1, 2); });
       }},
      {"conv3d",
       [](Philox& r) {
         Tensor x = uniform({1, 2, 4, 4, 4}, r, -1, 1);
         Tensor w = uniform({3, 2, 3, 3, 3}, r, -0.5, 0.5);
         Tensor b = uniform({3}, r, -0.5, 0.5);
         return projected("conv3d", {x, w, b}, {1, 3, 4, 4, 4}, r,
                          [x, w, b] { return nn::conv3d(x, w, b, {1, 1, 1}, {1, 1, 1}); });
       }},
      {"conv3d_strided",
       [](Philox& r) {
         Tensor x = uniform({2, 2, 5, 4, 4}, r, -1, 1);
         Tensor w = uniform({3, 2, 3, 3, 3}, r, -0.5, 0.5);
         Tensor b = uniform({3}, r, -0.5, 0.5);
         return projected("conv3d_strided", {x, w, b}, {2, 3, 3, 2, 2}, r,
                          [x, w, b] { return nn::conv3d(x, w, b, {2, 2, 2}, {1, 1, 1}); });
       }},
      {"conv_transpose3d",
       [](Philox& r) {
         Tensor x = uniform({1, 3, 2, 2, 2}, r, -1, 1);
         Tensor w = uniform({3, 2, 2, 2, 2}, r, -0.5, 0.5);
         Tensor b = uniform({2}, r, -0.5, 0.5);
         return projected("conv_transpose3d", {x, w, b}, {1, 2, 4, 4, 4}, r,
                          [x, w, b] { return nn::conv_transpose3d(x, w, b, {2, 2, 2}); });
       }},
      {"conv_transpose3d_padded",
       [](Philox& r) {
         Tensor x = uniform({1, 2, 3, 2, 2}, r, -1, 1);
         Tensor w = uniform({2, 2, 3, 3, 3}, r, -0.5, 0.5);
         Tensor b = uniform({2}, r, -0.5, 0.5);
         return projected("conv_transpose3d_padded", {x, w, b}, {1, 2, 5, 3, 3}, r,
                          [x, w, b] { return nn::conv_transpose3d(x, w, b, {2, 2, 2}, {1, 1, 1}); });
       }},
      {"instance_norm",
       [](Philox& r) {
         Tensor x = uniform({2, 3, 2, 3, 2}, r, -1, 1);
         Tensor g = uniform({3}, r, 0.5, 1.5);
         Tensor b = uniform({3}, r, -0.5, 0.5);
         return projected("instance_norm", {x, g, b}, {2, 3, 2, 3, 2}, r,
                          [x, g, b] { return nn::instance_norm(x, g, b); });
       }},
      {"softmax",
       [](Philox& r) {
         Tensor x = uniform({2, 3, 4}, r, -2, 2);
         return projected("softmax", {x}, {2, 3, 4}, r, [x] { return nn::softmax(x, 1); });
       }},
      {"log_softmax",
       [](Philox& r) {
         Tensor x = uniform({2, 3, 4}, r, -2, 2);
         return projected("log_softmax", {x}, {2, 3, 4}, r, [x] { return nn::log_softmax(x, 1); });
       }},
      {"adaptive_avg_pool3d",
       [](Philox& r) {
         Tensor x = uniform({1, 2, 5, 4, 3}, r, -1, 1);
         return projected("adaptive_avg_pool3d", {x}, {1, 2, 2, 3, 2}, r,
                          [x] { return nn::adaptive_avg_pool3d(x, {2, 3, 2}); });
       }},
      {"dice_ce_loss",
       [](Philox& r) {
         Tensor x = uniform({2, 3, 2, 3, 3}, r, -2, 2);
         Tensor y = labels({2, 2, 3, 3}, 3, r);
         GradCase c;
         c.name = "dice_ce_loss";
         c.inputs = {x};
         c.constants = {y};
         c.loss = [x, y] { return nn::dice_ce_loss(x, y).total; };
         return c;
       }},
      {"selective_scan",
       [](Philox& r) {
         Tensor u = uniform({2, 5, 3}, r, -1, 1);
         Tensor dt = uniform({2, 5, 3}, r, 0.05, 1.0);
         Tensor a_log = uniform({3, 4}, r, -1, 1);
         Tensor b = uniform({2, 5, 4}, r, -1, 1);
         Tensor c = uniform({2, 5, 4}, r, -1, 1);
         Tensor d = uniform({3}, r, -1, 1);
         return projected("selective_scan", {u, dt, a_log, b, c, d}, {2, 5, 3}, r,
                          [=] { return ssm::selective_scan(u, dt, a_log, b, c, d); });
       }},
      {"causal_conv1d",
       [](Philox& r) {
         Tensor x = uniform({2, 5, 3}, r, -1, 1);
         Tensor w = uniform({3, 3}, r, -1, 1);
         Tensor b = uniform({3}, r, -1, 1);
         return projected("causal_conv1d", {x, w, b}, {2, 5, 3}, r,
                          [=] { return ssm::causal_depthwise_conv1d(x, w, b); });
       }},
      {"mamba_block",
       [](Philox& r) {
         ssm::MambaConfig cfg;
         cfg.state = 3;
         auto p = std::make_shared<ssm::MambaBlockParams>(ssm::make_mamba_block(4, cfg, r));
         Tensor x = uniform({1, 4, 2, 2, 2}, r, -1, 1);
         std::vector<Tensor> in{x};
         append_params(in, p->named_parameters(""));
         return projected("mamba_block", in, {1, 4, 2, 2, 2}, r,
                          [p, x] { return ssm::mamba_block(x, *p); });
       }},
      {"residual_block",
       [](Philox& r) {
         auto b = std::make_shared<ResidualBlock>(make_residual_block(2, 2, 3, 1, r));
         Tensor x = uniform({1, 2, 4, 4, 4}, r, -1, 1);
         std::vector<Tensor> in{x};
         append_params(in, b->named_parameters(""));
         return projected("residual_block", in, {1, 2, 4, 4, 4}, r,
                          [b, x] { return residual_block(x, *b); });
       }},
      {"residual_block_projected",
       [](Philox& r) {
         auto b = std::make_shared<ResidualBlock>(make_residual_block(2, 3, 3, 2, r));
         Tensor x = uniform({1, 2, 4, 4, 4}, r, -1, 1);
         std::vector<Tensor> in{x};
         append_params(in, b->named_parameters(""));
         return projected("residual_block_projected", in, {1, 3, 2, 2, 2}, r,
                          [b, x] { return residual_block(x, *b); });
       }},
      {"downsample",
       [](Philox& r) {
         auto d = std::make_shared<nrm::DownsampleBlock>(nrm::make_downsample(3, 4, {2, 2, 2}, r));
         Tensor f = uniform({1, 3, 4, 4, 4}, r, -1, 1);
         std::vector<Tensor> in{f, d->conv.weight, d->conv.bias};
         return projected("downsample", in, {1, 4, 2, 2, 2}, r,
                          [d, f] { return nrm::downsample_stage(f, *d); });
       }},
      {"aggregate",
       [](Philox& r) {
         std::vector<Tensor> e;
         for (int i = 0; i < 3; ++i) e.push_back(uniform({1, 2, 2, 2, 2}, r, -1, 1));
         Tensor lam = uniform({3}, r, -1, 1);
         std::vector<Tensor> in = e;
         in.push_back(lam);
         return projected("aggregate", in, {1, 2, 2, 2, 2}, r,
                          [e, lam] { return nrm::aggregate(e, lam); });
       }},
      {"nrm_forward",
       [](Philox& r) {
         ssm::MambaConfig cfg;
         cfg.state = 3;
         auto p = std::make_shared<nrm::NrmParams>(
             nrm::make_nrm({2, 4, 4}, 4, {2, 2, 2}, cfg, 0.5, r));
         std::vector<Tensor> feats{uniform({1, 2, 8, 8, 8}, r, -1, 1),
                                   uniform({1, 4, 4, 4, 4}, r, -1, 1),
                                   uniform({1, 4, 2, 2, 2}, r, -1, 1)};
         Tensor m1 = uniform({1, 4, 2, 2, 2}, r, -1, 1);
         std::vector<Tensor> in = feats;
         in.push_back(m1);
         append_params(in, p->named_parameters());
         return projected("nrm_forward", in, {1, 4, 2, 2, 2}, r,
                          [p, feats, m1] { return nrm::nrm_forward(feats, m1, *p).m_hat; });
       }},
      {"model", [](Philox& r) { return model_case("model", r, true); }},
      {"model_baseline", [](Philox& r) { return model_case("model_baseline", r, false); }},
  };
  return cases;
}

}  // namespace

std::vector<std::string> grad_case_names() {
  std::vector<std::string> names;
  for (const auto& [n, b] : registry()) names.push_back(n);
  return names;
}

GradCase make_grad_case(const std::string& name, std::uint64_t seed) {
  for (const auto& [n, build] : registry()) {
    if (n == name) {
      Philox rng = Philox(seed).fork(0x67726164 /* "grad" */);
      return build(rng);
    }
  }
  throw ValueError("unknown gradient case '" + name + "'");
}

DUMAMBA_END_NAMESPACE
