#pragma once

#include <string>
#include <utility>
#include <vector>

#include "dumamba/nn.hpp"
#include "dumamba/ssm.hpp"

DUMAMBA_BEGIN_NAMESPACE

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

/// Total element count of a parameter list.
Index count_parameters(const NamedTensors& params);

namespace nrm {

/// e = AdaptivePool(ReLU(Conv1x1(F))), pooled to the bottleneck extent.
struct DownsampleBlock {
  nn::ConvParams conv;  // 1x1x1, C_i -> C'
  nn::Triple target{1, 1, 1};
};

DownsampleBlock make_downsample(Index c_in, Index c_out, nn::Triple target, Philox& rng);
Tensor downsample_stage(const Tensor& feature, const DownsampleBlock& block);

/// Learnable, unconstrained stage weights with a per-step trace.
struct LambdaState {
  Tensor values;  // [l]
  std::vector<std::vector<double>> history;

  Index size() const { return values.defined() ? values.numel() : 0; }
  /// Appends the current values to the trace.
  void log();
};

LambdaState make_lambdas(Index stages, double init);

/// sum_i lambdas[i] * e[i]. All e must share one shape.
Tensor aggregate(const std::vector<Tensor>& e, const Tensor& lambdas);

struct NrmParams {
  std::vector<DownsampleBlock> down;
  LambdaState lambda;
  ssm::MambaBlockParams m2;

  NamedTensors named_parameters(const std::string& prefix = "nrm.") const;
};

NrmParams make_nrm(const std::vector<Index>& stage_channels, Index bottleneck_channels,
                   nn::Triple bottleneck_extent, const ssm::MambaConfig& mamba, double lambda_init,
                   Philox& rng);

struct NrmOutput {
  std::vector<Tensor> e;
  Tensor e_hat;
  Tensor m2;
  Tensor m_hat;
};

/// m_hat = m1 - M2(sum_i lambda_i e_i), with e_i downsampled from features[i].
NrmOutput nrm_forward(const std::vector<Tensor>& features, const Tensor& m1, const NrmParams& p);

struct ParamShare {
  Index nrm = 0;
  Index total = 0;
  double share = 0.0;
};

}  // namespace nrm

DUMAMBA_END_NAMESPACE
