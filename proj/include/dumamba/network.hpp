#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "dumamba/nn.hpp"
#include "dumamba/nrm.hpp"
#include "dumamba/ssm.hpp"

DUMAMBA_BEGIN_NAMESPACE

struct ModelConfig {
  Index in_channels = 1;
  Index classes = 2;
  std::vector<Index> channels{8, 16, 32, 64, 128};
  std::vector<Index> strides{1, 2, 2, 2, 2};
  std::vector<Index> blocks{2, 2, 2, 2, 2};  // residual blocks per encoder stage
  Index kernel = 3;
  ssm::MambaConfig mamba;
  double lambda_init = 0.5;
  bool nrm_enabled = true;
  std::uint64_t seed = 0;
  nn::Triple patch{32, 32, 32};

  Index stages() const { return static_cast<Index>(channels.size()); }
  Index total_stride() const;
  nn::Triple bottleneck_extent() const;
  /// Throws ValueError describing the first inconsistency.
  void validate() const;

  /// Trainable desk-scale network for 32^3 patches.
  static ModelConfig desk();
  /// Wide configuration used only for parameter accounting.
  static ModelConfig wide();
  /// Four stages on 16^3, small enough for finite-difference checks.
  static ModelConfig tiny();

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

/// out = shortcut(x) + LeakyReLU(IN(Conv(x))). The shortcut is the identity
/// when channels and stride are unchanged, otherwise a strided 1x1x1 conv.
struct ResidualBlock {
  nn::ConvParams conv;
  Tensor gamma;
  Tensor beta;
  std::optional<nn::ConvParams> projection;

  NamedTensors named_parameters(const std::string& prefix) const;
};

ResidualBlock make_residual_block(Index c_in, Index c_out, Index kernel, Index stride, Philox& rng);
Tensor residual_block(const Tensor& x, const ResidualBlock& block);

struct DecoderStage {
  Tensor up_weight;  // [C_deep, C_skip, s, s, s]
  Tensor up_bias;    // [C_skip]
  Index stride = 2;
  ResidualBlock block;  // 2 C_skip -> C_skip
};

struct Model {
  ModelConfig config;
  std::vector<std::vector<ResidualBlock>> encoder;
  ssm::MambaBlockParams m1;
  std::optional<nrm::NrmParams> nrm;
  std::vector<DecoderStage> decoder;  // deepest first
  nn::ConvParams head;

  /// Every trainable tensor under a stable, unique name.
  NamedTensors named_parameters() const;
  std::vector<std::string> parameter_names() const;
  std::vector<Tensor> parameters() const;
  Index parameter_count() const { return count_parameters(named_parameters()); }

  /// The same weights with the NRM removed (a UMamba-Bot network).
  Model without_nrm() const;
  /// Deep copy of all parameters.
  Model clone() const;
};

/// Parameter initialisation is forked per component, so a model built with
/// and without the NRM from one seed shares all other weights.
Model build_model(const ModelConfig& config);

struct ForwardHooks {
  /// Applied to the output of the first residual block.
  std::function<Tensor(const Tensor&)> after_first_block;
};

struct ForwardTrace {
  std::vector<Tensor> features;  // encoder stage outputs F_1..F_l
  Tensor m1;
  Tensor m_hat;  // decoder input (m1 when the NRM is disabled)
  std::optional<nrm::NrmOutput> nrm;
};

/// x: [B, C_in, D, H, W] -> logits [B, K, D, H, W].
Tensor forward(const Model& model, const Tensor& x, const ForwardHooks* hooks = nullptr,
               ForwardTrace* trace = nullptr);

nrm::ParamShare nrm_param_count(const Model& model);

// ---------------------------------------------------------------------------
// Checkpoints.

struct Checkpoint {
  ModelConfig config;
  NamedTensors tensors;
  NamedTensors optimizer;
  Philox::State rng;
  std::uint64_t step = 0;
  nlohmann::json meta = nlohmann::json::object();
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

Checkpoint make_checkpoint(const Model& model);
/// Builds the model described by the checkpoint and copies its tensors in.
/// Throws FormatError(kMismatch) when names or shapes disagree.
Model model_from_checkpoint(const Checkpoint& ckpt);
/// Copies named tensors into `dst`, matching names and shapes.
void assign_tensors(const NamedTensors& src, const NamedTensors& dst);

/// Named tensors plus JSON metadata, in the checkpoint's record format.
struct TensorBundle {
  NamedTensors tensors;
  nlohmann::json meta = nlohmann::json::object();
};

void save_tensors(const std::string& path, const NamedTensors& tensors,
                  const nlohmann::json& meta = nlohmann::json::object());
TensorBundle load_tensors(const std::string& path);

DUMAMBA_END_NAMESPACE
