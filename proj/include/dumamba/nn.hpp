#pragma once

#include <array>
#include <cstdint>

#include "dumamba/rng.hpp"
#include "dumamba/tensor.hpp"

DUMAMBA_BEGIN_NAMESPACE

namespace nn {

using Triple = std::array<Index, 3>;

inline constexpr Scalar kLeakySlope = Scalar(0.01);
inline constexpr Scalar kNormEps = Scalar(1e-5);
inline constexpr Scalar kDiceSmooth = Scalar(1e-5);

/// Output extent of a convolution along one axis.
Index conv_out_extent(Index in, Index kernel, Index stride, Index pad);

struct ConvParams {
  Tensor weight;  // [C_out, C_in, kd, kh, kw]
  Tensor bias;    // [C_out] or undefined
  Triple stride{1, 1, 1};
  Triple padding{0, 0, 0};

  Index out_channels() const { return weight.dim(0); }
  Index in_channels() const { return weight.dim(1); }
};

/// Weights and bias uniform in +-1/sqrt(fan_in), the usual framework default
/// (Kaiming uniform with a = sqrt(5)).
ConvParams make_conv(Index c_in, Index c_out, Index kernel, Index stride, Philox& rng,
                     bool with_bias = true);

/// x: [B, C_in, D, H, W]. Zero padding.
Tensor conv3d(const Tensor& x, const ConvParams& p);
Tensor conv3d(const Tensor& x, const Tensor& weight, const Tensor& bias, Triple stride,
              Triple padding);

/// Transposed convolution; weight is [C_in, C_out, kd, kh, kw]. Output extent
/// is (in - 1) * stride - 2 * padding + kernel.
Tensor conv_transpose3d(const Tensor& x, const Tensor& weight, const Tensor& bias, Triple stride,
                        Triple padding = {0, 0, 0});

/// Normalises every (batch, channel) slice over its spatial extent, then
/// applies per-channel gamma/beta. Biased variance. For a one-voxel slice the
/// normalised value is 0 (the eps term keeps the division finite), so the
/// output reduces to beta.
Tensor instance_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                     Scalar eps = kNormEps);

Tensor softmax(const Tensor& x, int axis);
Tensor log_softmax(const Tensor& x, int axis);

/// Equal-partition windows: output cell i along an axis of source extent S
/// and target T averages source indices [floor(i*S/T), ceil((i+1)*S/T)).
/// Pools the last three axes.
Tensor adaptive_avg_pool3d(const Tensor& x, Triple target);

struct LossValue {
  Tensor total;  // dice_part + ce_part, differentiable
  Tensor dice_part;
  Tensor ce_part;
};

/// logits: [B, K, D, H, W]; labels: [B, D, H, W] with integral values in
/// [0, K). Soft Dice is accumulated per class over the whole batch and
/// averaged over the foreground classes 1..K-1.
LossValue dice_ce_loss(const Tensor& logits, const Tensor& labels);

/// One-hot expansion along a new axis 1: [B, ...] -> [B, K, ...].
Tensor one_hot(const Tensor& labels, Index classes);

}  // namespace nn

DUMAMBA_END_NAMESPACE
