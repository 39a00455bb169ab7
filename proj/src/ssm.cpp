#include "dumamba/ssm.hpp"

#include <algorithm>
#include <cmath>

DUMAMBA_BEGIN_NAMESPACE

namespace ssm {

using detail::grad_buffer;
using detail::needs_grad;

double zoh_factor(double z) {
  if (std::abs(z) < kTaylorThreshold) return 1.0 + z * (0.5 + z * (1.0 / 6.0 + z / 24.0));
  return std::expm1(z) / z;
}

double zoh_factor_derivative(double z) {
  if (std::abs(z) < kTaylorThreshold) return 0.5 + z * (1.0 / 3.0 + z / 8.0);
  return (std::exp(z) * (z - 1.0) + 1.0) / (z * z);
}

Discretized zoh_discretize(double a, double b, double delta) {
  if (!(delta > 0.0)) throw ValueError("ZOH timescale must be positive, got " + std::to_string(delta));
  const double z = delta * a;
  return {std::exp(z), delta * b * zoh_factor(z)};
}

SsmParams SsmParams::lti_from_log(std::span<const double> a_log, std::vector<double> b,
                                  std::vector<double> c, double delta) {
  SsmParams p;
  for (double v : a_log) p.a.push_back(-std::exp(v));
  p.b = {std::move(b)};
  p.c = {std::move(c)};
  p.delta = {delta};
  return p;
}

namespace {

void validate(const SsmParams& p, std::size_t length) {
  const std::size_t n = p.state_size();
  auto rows_ok = [&](const std::vector<std::vector<double>>& m) {
    if (m.size() != 1 && m.size() != length) return false;
    return std::all_of(m.begin(), m.end(), [n](const auto& r) { return r.size() == n; });
  };
  if (!rows_ok(p.b) || !rows_ok(p.c) || (p.delta.size() != 1 && p.delta.size() != length)) {
    throw ShapeError("SSM parameters do not match state size / sequence length");
  }
}

}  // namespace

std::vector<double> ssm_scan(const SsmParams& params, std::span<const double> x) {
  const std::size_t length = x.size();
  validate(params, length);
  const std::size_t n = params.state_size();
  std::vector<double> h(n, 0.0);
  std::vector<double> y(length, 0.0);
  for (std::size_t t = 0; t < length; ++t) {
    const auto& b = params.b.size() == 1 ? params.b[0] : params.b[t];
    const auto& c = params.c.size() == 1 ? params.c[0] : params.c[t];
    const double delta = params.delta.size() == 1 ? params.delta[0] : params.delta[t];
    double acc = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      const Discretized d = zoh_discretize(params.a[k], b[k], delta);
      h[k] = d.a_bar * h[k] + d.b_bar * x[t];
      acc += c[k] * h[k];
    }
    y[t] = acc;
  }
  return y;
}

std::vector<double> ssm_kernel(const SsmParams& params, std::size_t length) {
  if (!params.is_lti()) {
    throw ValueError("ssm_kernel requires time-invariant parameters");
  }
  validate(params, 1);
  const std::size_t n = params.state_size();
  std::vector<double> kernel(length, 0.0);
  for (std::size_t k = 0; k < n; ++k) {
    const Discretized d = zoh_discretize(params.a[k], params.b[0][k], params.delta[0]);
    double power = 1.0;
    for (std::size_t j = 0; j < length; ++j) {
      kernel[j] += params.c[0][k] * power * d.b_bar;
      power *= d.a_bar;
    }
  }
  return kernel;
}

std::vector<double> causal_convolve(std::span<const double> kernel, std::span<const double> x) {
  std::vector<double> y(x.size(), 0.0);
  for (std::size_t t = 0; t < x.size(); ++t) {
    double acc = 0.0;
    for (std::size_t j = 0; j <= t && j < kernel.size(); ++j) acc += kernel[j] * x[t - j];
    y[t] = acc;
  }
  return y;
}

// ---------------------------------------------------------------------------

Tensor selective_scan(const Tensor& u, const Tensor& delta, const Tensor& a_log, const Tensor& b,
                      const Tensor& c, const Tensor& d_skip) {
  if (u.rank() != 3) throw ShapeError("selective_scan expects u as [B, L, Din]");
  const Index batch = u.dim(0), length = u.dim(1), inner = u.dim(2);
  if (delta.shape() != u.shape()) throw ShapeError("selective_scan delta must match u");
  if (a_log.rank() != 2 || a_log.dim(0) != inner) {
    throw ShapeError("selective_scan a_log must be [Din, N], got " + shape_str(a_log.shape()));
  }
  const Index state = a_log.dim(1);
  const Shape bc_shape{batch, length, state};
  if (b.shape() != bc_shape || c.shape() != bc_shape) {
    throw ShapeError("selective_scan B/C must be " + shape_str(bc_shape));
  }
  if (d_skip.numel() != inner) throw ShapeError("selective_scan d_skip must have Din entries");

  const auto du = u.data(), dd = delta.data(), dal = a_log.data(), db = b.data(),
             dc = c.data(), dds = d_skip.data();
  for (Scalar v : dd) {
    if (!(v > 0)) throw ValueError("selective_scan timescales must be positive");
  }
  std::vector<Scalar> out(du.size());
  // Hidden states after each token, kept for the reverse sweep.
  auto states = std::make_shared<std::vector<double>>(
      static_cast<std::size_t>(batch * length * inner * state));
  std::vector<double> a(static_cast<std::size_t>(inner * state));
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = -std::exp(static_cast<double>(dal[i]));

  std::vector<double> h(static_cast<std::size_t>(state));
  for (Index bi = 0; bi < batch; ++bi) {
    for (Index d = 0; d < inner; ++d) {
      std::fill(h.begin(), h.end(), 0.0);
      const double* ad = a.data() + d * state;
      for (Index t = 0; t < length; ++t) {
        const Index tok = (bi * length + t);
        const double dt = dd[tok * inner + d];
        const double ut = du[tok * inner + d];
        const Scalar* bt = db.data() + tok * state;
        const Scalar* ct = dc.data() + tok * state;
        double* hs = states->data() + (tok * inner + d) * state;
        double y = static_cast<double>(dds[d]) * ut;
        for (Index n = 0; n < state; ++n) {
          const double z = dt * ad[n];
          h[n] = std::exp(z) * h[n] + dt * bt[n] * zoh_factor(z) * ut;
          hs[n] = h[n];
          y += ct[n] * h[n];
        }
        out[tok * inner + d] = static_cast<Scalar>(y);
      }
    }
  }

  Tensor r = detail::make_output(u.shape(), std::move(out));
  detail::record(
      "selective_scan", r, {u, delta, a_log, b, c, d_skip},
      [u, delta, a_log, b, c, d_skip, states, a, batch, length, inner,
       state](std::span<const Scalar> gy) {
        const auto du = u.data(), dd = delta.data(), db = b.data(), dc = c.data(),
                   dds = d_skip.data();
        std::vector<double> gu(du.size(), 0.0), gdelta(du.size(), 0.0);
        std::vector<double> gb(db.size(), 0.0), gc(dc.size(), 0.0);
        std::vector<double> galog(a.size(), 0.0), gd(static_cast<std::size_t>(inner), 0.0);
        std::vector<double> gh(static_cast<std::size_t>(state));
        for (Index bi = 0; bi < batch; ++bi) {
          for (Index d = 0; d < inner; ++d) {
            std::fill(gh.begin(), gh.end(), 0.0);
            const double* ad = a.data() + d * state;
            double* ga = galog.data() + d * state;
            for (Index t = length - 1; t >= 0; --t) {
              const Index tok = bi * length + t;
              const Index li = tok * inner + d;
              const double g = gy[li];
              const double dt = dd[li];
              const double ut = du[li];
              const Scalar* bt = db.data() + tok * state;
              const Scalar* ct = dc.data() + tok * state;
              const double* ht = states->data() + li * state;
              const double* hprev = t > 0 ? states->data() + ((tok - 1) * inner + d) * state : nullptr;
              gu[li] += g * dds[d];
              gd[d] += g * ut;
              for (Index n = 0; n < state; ++n) {
                gc[tok * state + n] += g * ht[n];
                gh[n] += g * ct[n];
                const double z = dt * ad[n];
                const double abar = std::exp(z);
                const double phi = zoh_factor(z);
                const double dphi = zoh_factor_derivative(z);
                const double hp = hprev ? hprev[n] : 0.0;
                const double g_abar = gh[n] * hp;
                const double g_bbar = gh[n] * ut;
                const double bbar = dt * bt[n] * phi;
                gu[li] += gh[n] * bbar;
                gdelta[li] += g_abar * ad[n] * abar + g_bbar * bt[n] * (phi + z * dphi);
                gb[tok * state + n] += g_bbar * dt * phi;
                ga[n] += g_abar * dt * abar + g_bbar * dt * bt[n] * dt * dphi;
                gh[n] *= abar;
              }
            }
          }
        }
        auto add_into = [](const Tensor& t, const std::vector<double>& g) {
          if (!needs_grad(t)) return;
          auto dst = grad_buffer(t);
          for (std::size_t i = 0; i < g.size(); ++i) dst[i] += static_cast<Scalar>(g[i]);
        };
        add_into(u, gu);
        add_into(delta, gdelta);
        add_into(b, gb);
        add_into(c, gc);
        add_into(d_skip, gd);
        if (needs_grad(a_log)) {
          // a = -exp(a_log), so da/da_log = a.
          for (std::size_t i = 0; i < galog.size(); ++i) galog[i] *= a[i];
          add_into(a_log, galog);
        }
      });
  return r;
}

Tensor causal_depthwise_conv1d(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (x.rank() != 3) throw ShapeError("causal_depthwise_conv1d expects [B, L, C]");
  const Index batch = x.dim(0), length = x.dim(1), ch = x.dim(2);
  if (weight.rank() != 2 || weight.dim(0) != ch) {
    throw ShapeError("causal_depthwise_conv1d weight must be [C, K], got " +
                     shape_str(weight.shape()));
  }
  if (bias.defined() && bias.numel() != ch) throw ShapeError("conv1d bias must be [C]");
  const Index k = weight.dim(1);
  const auto dx = x.data(), dw = weight.data();
  std::vector<Scalar> out(dx.size(), Scalar(0));
  for (Index bi = 0; bi < batch; ++bi) {
    for (Index t = 0; t < length; ++t) {
      Scalar* o = out.data() + (bi * length + t) * ch;
      if (bias.defined()) {
        const auto bd = bias.data();
        std::copy(bd.begin(), bd.end(), o);
      }
      for (Index j = 0; j < k; ++j) {
        const Index src = t - (k - 1) + j;
        if (src < 0) continue;
        const Scalar* xi = dx.data() + (bi * length + src) * ch;
        for (Index cc = 0; cc < ch; ++cc) o[cc] += dw[cc * k + j] * xi[cc];
      }
    }
  }
  Tensor r = detail::make_output(x.shape(), std::move(out));
  detail::record("causal_depthwise_conv1d", r, {x, weight, bias},
                 [x, weight, bias, batch, length, ch, k](std::span<const Scalar> go) {
                   const auto dx = x.data(), dw = weight.data();
                   std::span<Scalar> gx, gw;
                   if (needs_grad(x)) gx = grad_buffer(x);
                   if (needs_grad(weight)) gw = grad_buffer(weight);
                   for (Index bi = 0; bi < batch; ++bi) {
                     for (Index t = 0; t < length; ++t) {
                       const Scalar* g = go.data() + (bi * length + t) * ch;
                       for (Index j = 0; j < k; ++j) {
                         const Index src = t - (k - 1) + j;
                         if (src < 0) continue;
                         const Index off = (bi * length + src) * ch;
                         for (Index cc = 0; cc < ch; ++cc) {
                           if (!gx.empty()) gx[off + cc] += dw[cc * k + j] * g[cc];
                           if (!gw.empty()) gw[cc * k + j] += dx[off + cc] * g[cc];
                         }
                       }
                     }
                   }
                   if (needs_grad(bias)) {
                     auto gb = grad_buffer(bias);
                     for (Index i = 0; i < batch * length; ++i) {
                       for (Index cc = 0; cc < ch; ++cc) gb[cc] += go[i * ch + cc];
                     }
                   }
                 });
  return r;
}

// ---------------------------------------------------------------------------

Linear make_linear(Index in, Index out, Philox& rng, bool with_bias) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  std::vector<Scalar> w(static_cast<std::size_t>(in * out));
  for (auto& v : w) v = static_cast<Scalar>(rng.uniform(-bound, bound));
  Linear l;
  l.weight = Tensor::from({in, out}, std::move(w), true);
  if (with_bias) {
    std::vector<Scalar> b(static_cast<std::size_t>(out));
    for (auto& v : b) v = static_cast<Scalar>(rng.uniform(-bound, bound));
    l.bias = Tensor::from({out}, std::move(b), true);
  }
  return l;
}

Tensor linear(const Tensor& x, const Linear& layer) {
  Tensor y = matmul(x, layer.weight);
  return layer.bias.defined() ? add(y, layer.bias) : y;
}

MambaBlockParams make_mamba_block(Index channels, const MambaConfig& cfg, Philox& rng) {
  MambaBlockParams p;
  p.channels = channels;
  p.inner = cfg.expand * channels;
  p.dt_rank = (channels + 15) / 16;
  p.state = cfg.state;
  p.in_x = make_linear(channels, p.inner, rng);
  p.in_z = make_linear(channels, p.inner, rng);

  const double cb = 1.0 / std::sqrt(static_cast<double>(cfg.conv_width));
  std::vector<Scalar> cw(static_cast<std::size_t>(p.inner * cfg.conv_width));
  for (auto& v : cw) v = static_cast<Scalar>(rng.uniform(-cb, cb));
  p.conv_weight = Tensor::from({p.inner, cfg.conv_width}, std::move(cw), true);
  std::vector<Scalar> cbias(static_cast<std::size_t>(p.inner));
  for (auto& v : cbias) v = static_cast<Scalar>(rng.uniform(-cb, cb));
  p.conv_bias = Tensor::from({p.inner}, std::move(cbias), true);

  p.x_proj = make_linear(p.inner, p.dt_rank + 2 * p.state, rng, false);

  // Timescale projection: weights in +-dt_rank^-1/2, bias such that
  // softplus(bias) is log-uniform in [1e-3, 1e-1].
  const double wb = 1.0 / std::sqrt(static_cast<double>(p.dt_rank));
  std::vector<Scalar> dw(static_cast<std::size_t>(p.dt_rank * p.inner));
  for (auto& v : dw) v = static_cast<Scalar>(rng.uniform(-wb, wb));
  std::vector<Scalar> dbias(static_cast<std::size_t>(p.inner));
  for (auto& v : dbias) {
    const double dt = std::max(1e-4, std::exp(rng.uniform(std::log(1e-3), std::log(1e-1))));
    v = static_cast<Scalar>(dt + std::log(-std::expm1(-dt)));
  }
  p.dt_proj.weight = Tensor::from({p.dt_rank, p.inner}, std::move(dw), true);
  p.dt_proj.bias = Tensor::from({p.inner}, std::move(dbias), true);

  std::vector<Scalar> al(static_cast<std::size_t>(p.inner * p.state));
  for (Index d = 0; d < p.inner; ++d) {
    for (Index n = 0; n < p.state; ++n) al[d * p.state + n] = static_cast<Scalar>(std::log(n + 1.0));
  }
  p.a_log = Tensor::from({p.inner, p.state}, std::move(al), true);
  p.d_skip = Tensor::ones({p.inner}, true);
  p.out_proj = make_linear(p.inner, channels, rng);
  return p;
}

std::vector<std::pair<std::string, Tensor>> MambaBlockParams::named_parameters(
    const std::string& prefix) const {
  return {
      {prefix + "in_x.weight", in_x.weight},       {prefix + "in_x.bias", in_x.bias},
      {prefix + "in_z.weight", in_z.weight},       {prefix + "in_z.bias", in_z.bias},
      {prefix + "conv.weight", conv_weight},       {prefix + "conv.bias", conv_bias},
      {prefix + "x_proj.weight", x_proj.weight},   {prefix + "dt_proj.weight", dt_proj.weight},
      {prefix + "dt_proj.bias", dt_proj.bias},     {prefix + "a_log", a_log},
      {prefix + "d_skip", d_skip},                 {prefix + "out_proj.weight", out_proj.weight},
      {prefix + "out_proj.bias", out_proj.bias},
  };
}

void MambaBlockParams::zero_biases() {
  for (Tensor* t : {&in_x.bias, &in_z.bias, &conv_bias, &dt_proj.bias, &out_proj.bias}) {
    auto d = t->mutable_data();
    std::fill(d.begin(), d.end(), Scalar(0));
  }
}

Tensor volume_to_tokens(const Tensor& x) {
  if (x.rank() != 5) throw ShapeError("expected [B, C, D, H, W], got " + shape_str(x.shape()));
  const Index batch = x.dim(0), ch = x.dim(1);
  const Index length = x.dim(2) * x.dim(3) * x.dim(4);
  Tensor seq = permute(reshape(x, {batch, ch, length}), {0, 2, 1});
  return reshape(seq, {batch * length, ch});
}

Tensor tokens_to_volume(const Tensor& tokens, const Shape& volume_shape) {
  const Index batch = volume_shape[0], ch = volume_shape[1];
  const Index length = volume_shape[2] * volume_shape[3] * volume_shape[4];
  Tensor seq = permute(reshape(tokens, {batch, length, ch}), {0, 2, 1});
  return reshape(seq, volume_shape);
}

Tensor mamba_block(const Tensor& x, const MambaBlockParams& p) {
  if (x.rank() != 5 || x.dim(1) != p.channels) {
    throw ShapeError("mamba_block expects [B, " + std::to_string(p.channels) + ", D, H, W], got " +
                     shape_str(x.shape()));
  }
  const Index batch = x.dim(0);
  const Index length = x.dim(2) * x.dim(3) * x.dim(4);
  const Tensor tokens = volume_to_tokens(x);  // [B*L, C]

  // SSM path.
  Tensor xs = reshape(linear(tokens, p.in_x), {batch, length, p.inner});
  Tensor u = silu(causal_depthwise_conv1d(xs, p.conv_weight, p.conv_bias));
  Tensor u_rows = reshape(u, {batch * length, p.inner});
  Tensor x_dbl = linear(u_rows, p.x_proj);
  Tensor dt_low = slice(x_dbl, 1, 0, p.dt_rank);
  Tensor bm = reshape(slice(x_dbl, 1, p.dt_rank, p.state), {batch, length, p.state});
  Tensor cm = reshape(slice(x_dbl, 1, p.dt_rank + p.state, p.state), {batch, length, p.state});
  Tensor delta = reshape(softplus(linear(dt_low, p.dt_proj)), {batch, length, p.inner});
  Tensor y = selective_scan(u, delta, p.a_log, bm, cm, p.d_skip);

  // Gate path.
  Tensor gate = silu(linear(tokens, p.in_z));

  Tensor mixed = mul(reshape(y, {batch * length, p.inner}), gate);
  return tokens_to_volume(linear(mixed, p.out_proj), x.shape());
}

}  // namespace ssm

DUMAMBA_END_NAMESPACE
