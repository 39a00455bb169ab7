#include "dumamba/network.hpp"

#include <algorithm>
#include <cmath>

DUMAMBA_BEGIN_NAMESPACE

namespace {

void append(NamedTensors& dst, NamedTensors src) {
  for (auto& np : src) {
    if (np.second.defined()) dst.push_back(std::move(np));
  }
}

Philox component_rng(std::uint64_t seed, std::uint64_t tag) { return Philox(seed).fork(tag); }

enum : std::uint64_t { kEncoderTag = 1, kM1Tag = 2, kNrmTag = 3, kDecoderTag = 4, kHeadTag = 5 };

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

Index ModelConfig::total_stride() const {
  Index s = 1;
  for (Index v : strides) s *= v;
  return s;
}

nn::Triple ModelConfig::bottleneck_extent() const {
  const Index s = total_stride();
  return {patch[0] / s, patch[1] / s, patch[2] / s};
}

void ModelConfig::validate() const {
  const std::size_t l = channels.size();
  if (l < 2) throw ValueError("model needs at least two stages");
  if (strides.size() != l || blocks.size() != l) {
    throw ValueError("channels, strides and blocks must have one entry per stage");
  }
  for (std::size_t i = 0; i < l; ++i) {
    if (channels[i] < 1 || blocks[i] < 1) throw ValueError("channels and blocks must be positive");
    if (strides[i] != 1 && strides[i] != 2) throw ValueError("strides must be 1 or 2");
  }
  if (in_channels < 1 || classes < 2) throw ValueError("need in_channels >= 1 and classes >= 2");
  if (kernel < 1 || kernel % 2 == 0) throw ValueError("kernel must be odd");
  for (Index p : patch) {
    if (p % total_stride() != 0) {
      throw ValueError("patch extent " + std::to_string(p) + " is not divisible by total stride " +
                       std::to_string(total_stride()));
    }
  }
  if (mamba.state < 1 || mamba.expand < 1 || mamba.conv_width < 1) {
    throw ValueError("mamba dimensions must be positive");
  }
}

ModelConfig ModelConfig::desk() { return ModelConfig{}; }

ModelConfig ModelConfig::wide() {
  ModelConfig c;
  c.channels = {32, 64, 128, 256, 320};
  c.blocks = {1, 3, 4, 6, 6};
  c.patch = {128, 128, 128};
  return c;
}

ModelConfig ModelConfig::tiny() {
  ModelConfig c;
  c.channels = {2, 4, 4, 8};
  c.strides = {1, 2, 2, 2};
  c.blocks = {1, 1, 1, 1};
  c.mamba.state = 4;
  c.patch = {16, 16, 16};
  return c;
}

nlohmann::json ModelConfig::to_json() const {
  return {
      {"in_channels", in_channels},
      {"classes", classes},
      {"channels", channels},
      {"strides", strides},
      {"blocks", blocks},
      {"kernel", kernel},
      {"mamba", {{"state", mamba.state}, {"expand", mamba.expand}, {"conv_width", mamba.conv_width}}},
      {"lambda_init", lambda_init},
      {"nrm_enabled", nrm_enabled},
      {"seed", seed},
      {"patch", patch},
  };
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.in_channels = j.value("in_channels", c.in_channels);
    c.classes = j.value("classes", c.classes);
    c.channels = j.value("channels", c.channels);
    c.strides = j.value("strides", c.strides);
    c.blocks = j.value("blocks", c.blocks);
    c.kernel = j.value("kernel", c.kernel);
    if (j.contains("mamba")) {
      const auto& m = j.at("mamba");
      c.mamba.state = m.value("state", c.mamba.state);
      c.mamba.expand = m.value("expand", c.mamba.expand);
      c.mamba.conv_width = m.value("conv_width", c.mamba.conv_width);
    }
    c.lambda_init = j.value("lambda_init", c.lambda_init);
    c.nrm_enabled = j.value("nrm_enabled", c.nrm_enabled);
    c.seed = j.value("seed", c.seed);
    c.patch = j.value("patch", c.patch);
  } catch (const nlohmann::json::exception& e) {
    throw ValueError(std::string("invalid model config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Blocks

ResidualBlock make_residual_block(Index c_in, Index c_out, Index kernel, Index stride,
                                  Philox& rng) {
  ResidualBlock b;
  b.conv = nn::make_conv(c_in, c_out, kernel, stride, rng);
  b.gamma = Tensor::ones({c_out}, true);
  b.beta = Tensor::zeros({c_out}, true);
  if (c_in != c_out || stride != 1) b.projection = nn::make_conv(c_in, c_out, 1, stride, rng);
  return b;
}

NamedTensors ResidualBlock::named_parameters(const std::string& prefix) const {
  NamedTensors out{{prefix + "conv.weight", conv.weight},
                   {prefix + "conv.bias", conv.bias},
                   {prefix + "norm.gamma", gamma},
                   {prefix + "norm.beta", beta}};
  if (projection) {
    out.emplace_back(prefix + "proj.weight", projection->weight);
    out.emplace_back(prefix + "proj.bias", projection->bias);
  }
  return out;
}

Tensor residual_block(const Tensor& x, const ResidualBlock& block) {
  Tensor y = leaky_relu(nn::instance_norm(nn::conv3d(x, block.conv), block.gamma, block.beta),
                        nn::kLeakySlope);
  Tensor shortcut = block.projection ? nn::conv3d(x, *block.projection) : x;
  return add(shortcut, y);
}

// ---------------------------------------------------------------------------
// Model

Model build_model(const ModelConfig& config) {
  config.validate();
  Model m;
  m.config = config;
  const Index l = config.stages();

  Philox enc_rng = component_rng(config.seed, kEncoderTag);
  Index c_prev = config.in_channels;
  for (Index i = 0; i < l; ++i) {
    std::vector<ResidualBlock> stage;
    for (Index b = 0; b < config.blocks[i]; ++b) {
      Philox r = enc_rng.fork(static_cast<std::uint64_t>(i * 64 + b));
      const Index stride = b == 0 ? config.strides[i] : 1;
      stage.push_back(make_residual_block(c_prev, config.channels[i], config.kernel, stride, r));
      c_prev = config.channels[i];
    }
    m.encoder.push_back(std::move(stage));
  }

  const Index c_bottom = config.channels.back();
  Philox m1_rng = component_rng(config.seed, kM1Tag);
  m.m1 = ssm::make_mamba_block(c_bottom, config.mamba, m1_rng);

  if (config.nrm_enabled) {
    Philox nrm_rng = component_rng(config.seed, kNrmTag);
    m.nrm = nrm::make_nrm(config.channels, c_bottom, config.bottleneck_extent(), config.mamba,
                          config.lambda_init, nrm_rng);
  }

  Philox dec_rng = component_rng(config.seed, kDecoderTag);
  for (Index j = l - 2; j >= 0; --j) {
    Philox r = dec_rng.fork(static_cast<std::uint64_t>(j));
    DecoderStage d;
    d.stride = config.strides[j + 1];
    const Index c_deep = config.channels[j + 1], c_skip = config.channels[j];
    const Index taps = d.stride * d.stride * d.stride;
    const double bound = 1.0 / std::sqrt(static_cast<double>(c_deep * taps));
    std::vector<Scalar> w(static_cast<std::size_t>(c_deep * c_skip * taps));
    for (auto& v : w) v = static_cast<Scalar>(r.uniform(-bound, bound));
    d.up_weight = Tensor::from({c_deep, c_skip, d.stride, d.stride, d.stride}, std::move(w), true);
    std::vector<Scalar> bias(static_cast<std::size_t>(c_skip));
    for (auto& v : bias) v = static_cast<Scalar>(r.uniform(-bound, bound));
    d.up_bias = Tensor::from({c_skip}, std::move(bias), true);
    d.block = make_residual_block(2 * c_skip, c_skip, config.kernel, 1, r);
    m.decoder.push_back(std::move(d));
  }

  Philox head_rng = component_rng(config.seed, kHeadTag);
  m.head = nn::make_conv(config.channels[0], config.classes, 1, 1, head_rng);
  return m;
}

NamedTensors Model::named_parameters() const {
  NamedTensors out;
  for (std::size_t i = 0; i < encoder.size(); ++i) {
    for (std::size_t b = 0; b < encoder[i].size(); ++b) {
      append(out, encoder[i][b].named_parameters("enc" + std::to_string(i) + ".block" +
                                                 std::to_string(b) + "."));
    }
  }
  append(out, m1.named_parameters("m1."));
  if (nrm) append(out, nrm->named_parameters("nrm."));
  for (std::size_t j = 0; j < decoder.size(); ++j) {
    const std::string p = "dec" + std::to_string(j) + ".";
    append(out, {{p + "up.weight", decoder[j].up_weight}, {p + "up.bias", decoder[j].up_bias}});
    append(out, decoder[j].block.named_parameters(p + "block."));
  }
  append(out, {{"head.weight", head.weight}, {"head.bias", head.bias}});
  return out;
}

std::vector<std::string> Model::parameter_names() const {
  std::vector<std::string> names;
  for (const auto& [name, t] : named_parameters()) names.push_back(name);
  return names;
}

std::vector<Tensor> Model::parameters() const {
  std::vector<Tensor> ts;
  for (const auto& [name, t] : named_parameters()) ts.push_back(t);
  return ts;
}

Model Model::without_nrm() const {
  Model m = *this;
  m.nrm.reset();
  m.config.nrm_enabled = false;
  return m;
}

Model Model::clone() const {
  Model m = build_model(config);
  assign_tensors(named_parameters(), m.named_parameters());
  if (nrm) m.nrm->lambda.history = nrm->lambda.history;
  return m;
}

Tensor forward(const Model& model, const Tensor& x, const ForwardHooks* hooks,
               ForwardTrace* trace) {
  const ModelConfig& cfg = model.config;
  if (x.rank() != 5 || x.dim(1) != cfg.in_channels) {
    throw ShapeError("forward expects [B, " + std::to_string(cfg.in_channels) +
                     ", D, H, W], got " + shape_str(x.shape()));
  }
  for (int ax = 2; ax < 5; ++ax) {
    if (x.dim(ax) % cfg.total_stride() != 0) {
      throw ShapeError("spatial extent " + std::to_string(x.dim(ax)) +
                       " is not divisible by the total stride " +
                       std::to_string(cfg.total_stride()));
    }
  }

  std::vector<Tensor> features;
  Tensor h = x;
  for (std::size_t i = 0; i < model.encoder.size(); ++i) {
    for (std::size_t b = 0; b < model.encoder[i].size(); ++b) {
      h = residual_block(h, model.encoder[i][b]);
      if (i == 0 && b == 0 && hooks && hooks->after_first_block) h = hooks->after_first_block(h);
    }
    features.push_back(h);
  }

  Tensor m1 = ssm::mamba_block(features.back(), model.m1);
  Tensor m_hat = m1;
  std::optional<nrm::NrmOutput> nrm_out;
  if (model.nrm) {
    nrm_out = nrm::nrm_forward(features, m1, *model.nrm);
    m_hat = nrm_out->m_hat;
  }

  Tensor d = m_hat;
  const std::size_t l = features.size();
  for (std::size_t j = 0; j < model.decoder.size(); ++j) {
    const DecoderStage& st = model.decoder[j];
    Tensor up = nn::conv_transpose3d(d, st.up_weight, st.up_bias, {st.stride, st.stride, st.stride});
    d = residual_block(concat({up, features[l - 2 - j]}, 1), st.block);
  }
  Tensor logits = nn::conv3d(d, model.head);

  if (trace) {
    trace->features = std::move(features);
    trace->m1 = m1;
    trace->m_hat = m_hat;
    trace->nrm = std::move(nrm_out);
  }
  return logits;
}

nrm::ParamShare nrm_param_count(const Model& model) {
  nrm::ParamShare s;
  s.total = model.parameter_count();
  if (model.nrm) s.nrm = count_parameters(model.nrm->named_parameters());
  s.share = s.total > 0 ? static_cast<double>(s.nrm) / static_cast<double>(s.total) : 0.0;
  return s;
}

void assign_tensors(const NamedTensors& src, const NamedTensors& dst) {
  if (src.size() != dst.size()) {
    throw FormatError(FormatError::Kind::kMismatch,
                      "tensor table has " + std::to_string(src.size()) + " entries, model expects " +
                          std::to_string(dst.size()));
  }
  for (std::size_t i = 0; i < src.size(); ++i) {
    const auto& [sname, st] = src[i];
    auto it = std::find_if(dst.begin(), dst.end(), [&](const auto& p) { return p.first == sname; });
    if (it == dst.end()) {
      throw FormatError(FormatError::Kind::kMismatch, "unexpected tensor '" + sname + "'");
    }
    Tensor target = it->second;
    if (st.shape() != target.shape()) {
      throw FormatError(FormatError::Kind::kMismatch,
                        "tensor '" + sname + "' has shape " + shape_str(st.shape()) +
                            ", model expects " + shape_str(target.shape()));
    }
    const auto s = st.data();
    auto d = target.mutable_data();
    std::copy(s.begin(), s.end(), d.begin());
  }
}

DUMAMBA_END_NAMESPACE
