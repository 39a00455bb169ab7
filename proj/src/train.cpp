#include "dumamba/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

DUMAMBA_BEGIN_NAMESPACE

nlohmann::json OptimConfig::to_json() const {
  return {{"lr", lr},
          {"momentum", momentum},
          {"nesterov", nesterov},
          {"poly_power", poly_power},
          {"weight_decay", weight_decay},
          {"grad_clip", grad_clip}};
}

OptimConfig OptimConfig::from_json(const nlohmann::json& j) {
  OptimConfig o;
  o.lr = j.value("lr", o.lr);
  o.momentum = j.value("momentum", o.momentum);
  o.nesterov = j.value("nesterov", o.nesterov);
  o.poly_power = j.value("poly_power", o.poly_power);
  o.weight_decay = j.value("weight_decay", o.weight_decay);
  o.grad_clip = j.value("grad_clip", o.grad_clip);
  if (o.lr < 0 || o.momentum < 0 || o.momentum >= 1 || o.weight_decay < 0) {
    throw ValueError("optimizer settings out of range");
  }
  return o;
}

nlohmann::json TrainConfig::to_json() const {
  return {{"model", model.to_json()}, {"optim", optim.to_json()}, {"epochs", epochs},
          {"batch", batch},           {"eval_every", eval_every}, {"seed", seed}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  try {
    if (j.contains("model")) c.model = ModelConfig::from_json(j.at("model"));
    if (j.contains("optim")) c.optim = OptimConfig::from_json(j.at("optim"));
    c.epochs = j.value("epochs", c.epochs);
    c.batch = j.value("batch", c.batch);
    c.eval_every = j.value("eval_every", c.eval_every);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ValueError(std::string("invalid training config: ") + e.what());
  }
  if (c.epochs < 0 || c.batch < 1 || c.eval_every < 1) {
    throw ValueError("epochs must be >= 0, batch and eval_every >= 1");
  }
  return c;
}

double poly_lr(const OptimConfig& o, int epoch, int epochs) {
  if (epochs <= 0) return o.lr;
  const double frac = 1.0 - static_cast<double>(epoch) / static_cast<double>(epochs);
  return o.lr * std::pow(std::max(0.0, frac), o.poly_power);
}

// ---------------------------------------------------------------------------

Sgd::Sgd(NamedTensors params, OptimConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  for (const auto& [name, t] : params_) velocity_.emplace_back(static_cast<std::size_t>(t.numel()), Scalar(0));
}

double Sgd::step(double lr) {
  double sq = 0.0;
  for (auto& [name, t] : params_) {
    if (!t.has_grad()) continue;
    for (Scalar g : t.mutable_grad()) sq += static_cast<double>(g) * g;
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NumericError("gradient norm is not finite");
  const double scale = cfg_.grad_clip > 0 && norm > cfg_.grad_clip ? cfg_.grad_clip / norm : 1.0;
  const auto mu = static_cast<Scalar>(cfg_.momentum);
  const auto wd = static_cast<Scalar>(cfg_.weight_decay);
  const auto step = static_cast<Scalar>(lr);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& t = params_[i].second;
    auto p = t.mutable_data();
    auto& v = velocity_[i];
    const bool has = t.has_grad();
    std::span<Scalar> grad = has ? t.mutable_grad() : std::span<Scalar>{};
    for (std::size_t j = 0; j < p.size(); ++j) {
      const Scalar g = (has ? grad[j] * static_cast<Scalar>(scale) : Scalar(0)) + wd * p[j];
      v[j] = mu * v[j] + g;
      const Scalar u = cfg_.nesterov ? g + mu * v[j] : v[j];
      p[j] -= step * u;
    }
    t.zero_grad();
  }
  return norm;
}

NamedTensors Sgd::state() const {
  NamedTensors out;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    out.emplace_back("velocity." + params_[i].first,
                     Tensor::from(params_[i].second.shape(), velocity_[i]));
  }
  return out;
}

void Sgd::load_state(const NamedTensors& state) {
  if (state.size() != params_.size()) throw FormatError(FormatError::Kind::kMismatch, "optimizer state size");
  for (std::size_t i = 0; i < state.size(); ++i) {
    const auto d = state[i].second.data();
    if (d.size() != velocity_[i].size()) {
      throw FormatError(FormatError::Kind::kMismatch, "optimizer state for " + params_[i].first);
    }
    std::copy(d.begin(), d.end(), velocity_[i].begin());
  }
}

// ---------------------------------------------------------------------------

std::vector<std::uint8_t> predict(const Model& model, const data::VolumeSample& sample,
                                  const ForwardHooks* hooks, ForwardTrace* trace) {
  const Tensor x = data::stack_images({&sample});
  const Tensor logits = forward(model, x, hooks, trace);
  const Index k = logits.dim(1);
  const Index n = logits.numel() / k;
  const auto d = logits.data();
  std::vector<std::uint8_t> out(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    Index best = 0;
    for (Index c = 1; c < k; ++c) {
      if (d[c * n + i] > d[best * n + i]) best = c;
    }
    out[i] = static_cast<std::uint8_t>(best);
  }
  return out;
}

eval::MetricsReport evaluate(const Model& model, const std::vector<data::VolumeSample>& samples,
                             const ForwardHooks* hooks) {
  eval::MetricsReport report;
  for (const auto& s : samples) {
    const auto pred = predict(model, s, hooks);
    const eval::Spacing sp{s.spacing[0], s.spacing[1], s.spacing[2]};
    auto rows = eval::evaluate_sample(s.id, pred, s.label, s.extent, sp,
                                      static_cast<int>(model.config.classes));
    report.rows.insert(report.rows.end(), rows.begin(), rows.end());
  }
  return report;
}

TrainResult train(const TrainConfig& cfg, const std::vector<data::VolumeSample>& samples,
                  const EpochCallback& on_epoch,
                  const std::function<void(const Model&, std::uint64_t)>& on_failure) {
  if (samples.empty()) throw ValueError("training set is empty");
  for (const auto& s : samples) s.validate(cfg.model.classes);

  TrainResult r{build_model(cfg.model), {}, -1, {}, {}, {}, {}, 0};
  Sgd opt(r.model.named_parameters(), cfg.optim);
  const Philox order_rng = Philox(cfg.seed).fork(0x73687566 /* "shuf" */);
  double best_loss = std::numeric_limits<double>::infinity();
  r.best = r.model.clone();

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    EpochLog log;
    log.epoch = epoch;
    log.lr = poly_lr(cfg.optim, epoch, cfg.epochs);

    std::vector<std::size_t> order(samples.size());
    std::iota(order.begin(), order.end(), 0);
    Philox shuffle = order_rng.fork(static_cast<std::uint64_t>(epoch));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);

    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch)) {
      std::vector<const data::VolumeSample*> batch;
      for (std::size_t j = start; j < std::min(order.size(), start + cfg.batch); ++j) {
        batch.push_back(&samples[order[j]]);
      }
      try {
        Tape tape;
        nn::LossValue loss;
        {
          TapeScope scope(tape);
          loss = nn::dice_ce_loss(forward(r.model, data::stack_images(batch)),
                                  data::stack_labels(batch));
          tape.backward(loss.total);
        }
        const double value = loss.total.item();
        if (!std::isfinite(value)) throw NumericError("loss is not finite");
        log.grad_norm = std::max(log.grad_norm, opt.step(log.lr));
        r.step_losses.push_back(value);
        log.loss += value;
        log.dice_part += loss.dice_part.item();
        log.ce_part += loss.ce_part.item();
      } catch (const NumericError& e) {
        if (on_failure) on_failure(r.model, r.steps);
        throw NumericError(std::string(e.what()) + " (epoch " + std::to_string(epoch) + ", step " +
                           std::to_string(r.steps) + ")");
      }
      ++r.steps;
      ++batches;
      if (r.model.nrm) {
        r.model.nrm->lambda.log();
        const auto v = r.model.nrm->lambda.values.data();
        r.lambda_trace.emplace_back(v.begin(), v.end());
      }
    }
    log.loss /= static_cast<double>(batches);
    log.dice_part /= static_cast<double>(batches);
    log.ce_part /= static_cast<double>(batches);

    if ((epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs) {
      log.train_dsc = evaluate(r.model, samples).mean_dsc();
    }
    if (log.loss < best_loss) {
      best_loss = log.loss;
      r.best_epoch = epoch;
      r.best = r.model.clone();
    }
    log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    r.epochs.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  r.optimizer_state = opt.state();
  return r;
}

DUMAMBA_END_NAMESPACE
