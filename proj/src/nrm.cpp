#include "dumamba/nrm.hpp"

DUMAMBA_BEGIN_NAMESPACE

Index count_parameters(const NamedTensors& params) {
  Index n = 0;
  for (const auto& [name, t] : params) {
    if (t.defined()) n += t.numel();
  }
  return n;
}

namespace nrm {

DownsampleBlock make_downsample(Index c_in, Index c_out, nn::Triple target, Philox& rng) {
  return {nn::make_conv(c_in, c_out, 1, 1, rng), target};
}

Tensor downsample_stage(const Tensor& feature, const DownsampleBlock& block) {
  for (int ax = 0; ax < 3; ++ax) {
    if (feature.rank() == 5 && feature.dim(2 + ax) < block.target[ax]) {
      throw ShapeError("stage feature " + shape_str(feature.shape()) +
                       " is smaller than the bottleneck extent");
    }
  }
  return nn::adaptive_avg_pool3d(relu(nn::conv3d(feature, block.conv)), block.target);
}

void LambdaState::log() {
  const auto v = values.data();
  history.emplace_back(v.begin(), v.end());
}

LambdaState make_lambdas(Index stages, double init) {
  LambdaState s;
  s.values = Tensor::full({stages}, static_cast<Scalar>(init), true);
  return s;
}

Tensor aggregate(const std::vector<Tensor>& e, const Tensor& lambdas) {
  if (e.empty()) throw ShapeError("aggregate needs at least one stage");
  if (static_cast<Index>(e.size()) != lambdas.numel()) {
    throw ShapeError("aggregate: " + std::to_string(e.size()) + " stages but " +
                     std::to_string(lambdas.numel()) + " lambdas");
  }
  Tensor acc;
  for (std::size_t i = 0; i < e.size(); ++i) {
    if (e[i].shape() != e[0].shape()) {
      throw ShapeError("aggregate: stage shapes differ, " + shape_str(e[0].shape()) + " vs " +
                       shape_str(e[i].shape()));
    }
    Tensor term = mul(e[i], slice(lambdas, 0, static_cast<Index>(i), 1));
    acc = acc.defined() ? add(acc, term) : term;
  }
  return acc;
}

NamedTensors NrmParams::named_parameters(const std::string& prefix) const {
  NamedTensors out;
  for (std::size_t i = 0; i < down.size(); ++i) {
    const std::string p = prefix + "down" + std::to_string(i) + ".";
    out.emplace_back(p + "weight", down[i].conv.weight);
    out.emplace_back(p + "bias", down[i].conv.bias);
  }
  out.emplace_back(prefix + "lambda", lambda.values);
  for (auto& np : m2.named_parameters(prefix + "m2.")) out.push_back(std::move(np));
  return out;
}

NrmParams make_nrm(const std::vector<Index>& stage_channels, Index bottleneck_channels,
                   nn::Triple bottleneck_extent, const ssm::MambaConfig& mamba, double lambda_init,
                   Philox& rng) {
  NrmParams p;
  Philox down_rng = rng.fork(1);
  for (Index c : stage_channels) {
    p.down.push_back(make_downsample(c, bottleneck_channels, bottleneck_extent, down_rng));
  }
  p.lambda = make_lambdas(static_cast<Index>(stage_channels.size()), lambda_init);
  Philox m2_rng = rng.fork(2);
  p.m2 = ssm::make_mamba_block(bottleneck_channels, mamba, m2_rng);
  return p;
}

NrmOutput nrm_forward(const std::vector<Tensor>& features, const Tensor& m1, const NrmParams& p) {
  if (features.size() != p.down.size()) {
    throw ShapeError("nrm_forward: expected " + std::to_string(p.down.size()) +
                     " stage features, got " + std::to_string(features.size()));
  }
  NrmOutput out;
  for (std::size_t i = 0; i < features.size(); ++i) {
    out.e.push_back(downsample_stage(features[i], p.down[i]));
  }
  out.e_hat = aggregate(out.e, p.lambda.values);
  if (out.e_hat.shape() != m1.shape()) {
    throw ShapeError("nrm_forward: aggregated noise " + shape_str(out.e_hat.shape()) +
                     " does not match bottleneck " + shape_str(m1.shape()));
  }
  out.m2 = ssm::mamba_block(out.e_hat, p.m2);
  out.m_hat = sub(m1, out.m2);
  return out;
}

}  // namespace nrm

DUMAMBA_END_NAMESPACE
