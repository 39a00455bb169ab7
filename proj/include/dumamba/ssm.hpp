#pragma once

#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dumamba/rng.hpp"
#include "dumamba/tensor.hpp"

DUMAMBA_BEGIN_NAMESPACE

namespace ssm {

// ---------------------------------------------------------------------------
// Scalar state-space machinery for a single lane with diagonal A.

/// Below this |delta * a| the ZOH input factor switches to its Taylor form.
inline constexpr double kTaylorThreshold = 1e-4;

struct Discretized {
  double a_bar;
  double b_bar;
};

/// Zero-order hold for one diagonal entry:
///   a_bar = exp(delta a),  b_bar = (delta a)^-1 (exp(delta a) - 1) delta b.
/// Throws ValueError for delta <= 0.
Discretized zoh_discretize(double a, double b, double delta);

/// (exp(z) - 1) / z, with the first-order Taylor form 1 + z/2 near zero.
double zoh_factor(double z);
/// d/dz of zoh_factor, consistent with its branches.
double zoh_factor_derivative(double z);

/// Diagonal SSM for one input lane. `b`, `c` and `delta` hold either a single
/// row (time-invariant) or one row per token (selective mode).
struct SsmParams {
  std::vector<double> a;               // realised diagonal of A, length N
  std::vector<std::vector<double>> b;  // rows of length N
  std::vector<std::vector<double>> c;  // rows of length N
  std::vector<double> delta;           // timescales, all > 0

  std::size_t state_size() const { return a.size(); }
  bool is_lti() const { return b.size() == 1 && c.size() == 1 && delta.size() == 1; }

  /// Time-invariant parameters with A = -exp(a_log).
  static SsmParams lti_from_log(std::span<const double> a_log, std::vector<double> b,
                                std::vector<double> c, double delta);
};

/// h_t = a_bar h_{t-1} + b_bar x_t, y_t = c_t . h_t, with h_0 = 0.
std::vector<double> ssm_scan(const SsmParams& params, std::span<const double> x);

/// K = (c b_bar, c a_bar b_bar, ..., c a_bar^{M-1} b_bar). Requires LTI params.
std::vector<double> ssm_kernel(const SsmParams& params, std::size_t length);

/// y_t = sum_{j<=t} kernel_j x_{t-j}.
std::vector<double> causal_convolve(std::span<const double> kernel, std::span<const double> x);

// ---------------------------------------------------------------------------
// Tensor ops.

/// Selective scan over [B, L, Din] lanes.
///   u, delta: [B, L, Din]; a_log: [Din, N]; b, c: [B, L, N]; d_skip: [Din].
/// Each lane uses A = -exp(a_log) with the ZOH discretisation above and adds
/// the skip term d_skip * u. Returns [B, L, Din].
Tensor selective_scan(const Tensor& u, const Tensor& delta, const Tensor& a_log, const Tensor& b,
                      const Tensor& c, const Tensor& d_skip);

/// Depthwise causal convolution along the token axis, left zero padded.
///   x: [B, L, C]; weight: [C, K]; bias: [C] (optional).
/// y[b, t, c] = bias[c] + sum_j weight[c, j] * x[b, t - (K - 1) + j, c].
Tensor causal_depthwise_conv1d(const Tensor& x, const Tensor& weight, const Tensor& bias);

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out] or undefined
};

Linear make_linear(Index in, Index out, Philox& rng, bool with_bias = true);
/// x: [N, in] -> [N, out].
Tensor linear(const Tensor& x, const Linear& layer);

struct MambaConfig {
  Index state = 8;
  Index expand = 2;
  Index conv_width = 3;
};

/// Two-path mamba block acting on tokens of width `channels`.
struct MambaBlockParams {
  Index channels = 0;
  Index inner = 0;    // expand * channels
  Index dt_rank = 0;  // ceil(channels / 16)
  Index state = 0;
  Linear in_x;        // channels -> inner, SSM path
  Linear in_z;        // channels -> inner, gate path
  Tensor conv_weight; // [inner, conv_width]
  Tensor conv_bias;   // [inner]
  Linear x_proj;      // inner -> dt_rank + 2 * state, no bias
  Linear dt_proj;     // dt_rank -> inner, bias is the softplus offset
  Tensor a_log;       // [inner, state]
  Tensor d_skip;      // [inner]
  Linear out_proj;    // inner -> channels

  std::vector<std::pair<std::string, Tensor>> named_parameters(const std::string& prefix) const;
  /// Zeroes every additive bias, including the timescale offset.
  void zero_biases();
};

MambaBlockParams make_mamba_block(Index channels, const MambaConfig& cfg, Philox& rng);

/// x: [B, C, D, H, W]. Tokens are the voxels in row-major (D, H, W) order, so
/// token index t = (d * H + h) * W + w. Output has the input's shape.
Tensor mamba_block(const Tensor& x, const MambaBlockParams& p);

/// Rearranges [B, C, D, H, W] into [B * L, C] token rows and back.
Tensor volume_to_tokens(const Tensor& x);
Tensor tokens_to_volume(const Tensor& tokens, const Shape& volume_shape);

}  // namespace ssm

DUMAMBA_END_NAMESPACE
