#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"

#include "dumamba/data.hpp"
#include "dumamba/eval.hpp"
#include "dumamba/network.hpp"

DUMAMBA_BEGIN_NAMESPACE

struct OptimConfig {
  double lr = 0.01;
  double momentum = 0.99;
  bool nesterov = true;
  double poly_power = 0.9;
  double weight_decay = 3e-5;
  double grad_clip = 12.0;  // global L2 norm; <= 0 disables

  nlohmann::json to_json() const;
  static OptimConfig from_json(const nlohmann::json& j);
};

struct TrainConfig {
  ModelConfig model = ModelConfig::desk();
  OptimConfig optim;
  int epochs = 100;
  int batch = 2;
  /// Train-set DSC is measured every this many epochs and after the last.
  int eval_every = 10;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

/// Learning rate at `epoch` of `epochs`: lr * (1 - epoch / epochs)^power.
double poly_lr(const OptimConfig& o, int epoch, int epochs);

/// SGD with momentum and L2 weight decay in the usual framework form:
///   g += wd * p;  v = mu v + g;  p -= lr (g + mu v)  (Nesterov)
class Sgd {
 public:
  Sgd(NamedTensors params, OptimConfig cfg);

  /// Applies one update from the accumulated gradients, then clears them.
  /// Returns the gradient norm before clipping.
  double step(double lr);

  NamedTensors state() const;
  void load_state(const NamedTensors& state);

 private:
  NamedTensors params_;
  std::vector<std::vector<Scalar>> velocity_;
  OptimConfig cfg_;
};

struct EpochLog {
  int epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  double dice_part = 0.0;
  double ce_part = 0.0;
  double grad_norm = 0.0;
  double train_dsc = -1.0;  // -1 when not measured this epoch
  double seconds = 0.0;
};

struct TrainResult {
  Model model;
  Model best;
  int best_epoch = -1;
  std::vector<EpochLog> epochs;
  std::vector<double> step_losses;
  std::vector<std::vector<double>> lambda_trace;
  NamedTensors optimizer_state;
  std::uint64_t steps = 0;
};

using EpochCallback = std::function<void(const EpochLog&)>;

/// Trains on `samples`. Raises NumericError when the loss or an activation
/// stops being finite; `on_failure` (if set) receives the model at that point.
TrainResult train(const TrainConfig& cfg, const std::vector<data::VolumeSample>& samples,
                  const EpochCallback& on_epoch = {},
                  const std::function<void(const Model&, std::uint64_t step)>& on_failure = {});

/// Argmax labels for one sample, evaluated without a tape.
std::vector<std::uint8_t> predict(const Model& model, const data::VolumeSample& sample,
                                  const ForwardHooks* hooks = nullptr,
                                  ForwardTrace* trace = nullptr);

eval::MetricsReport evaluate(const Model& model, const std::vector<data::VolumeSample>& samples,
                             const ForwardHooks* hooks = nullptr);

DUMAMBA_END_NAMESPACE
