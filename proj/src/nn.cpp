#include "dumamba/nn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <cblas.h>

DUMAMBA_BEGIN_NAMESPACE

namespace nn {

using detail::grad_buffer;
using detail::needs_grad;

namespace {

Index floor_div(Index a, Index b) {
  Index q = a / b;
  if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
  return q;
}

Index ceil_div(Index a, Index b) { return -floor_div(-a, b); }

// Convolution geometry in "gather" orientation: out[o] += w * in[o*s - p + k].
struct Geometry {
  Index batch, c_in, c_out;
  Triple in, out, kernel, stride, pad;

  Index in_plane() const { return in[0] * in[1] * in[2]; }
  Index out_plane() const { return out[0] * out[1] * out[2]; }
  Index taps() const { return kernel[0] * kernel[1] * kernel[2]; }
};

struct Range {
  Index lo, hi;  // inclusive output range, empty when lo > hi
};

Range valid_range(Index in, Index out, Index k, Index s, Index p) {
  return {std::max<Index>(0, ceil_div(p - k, s)),
          std::min<Index>(out - 1, floor_div(in - 1 + p - k, s))};
}

// Visits every (output row, input row) pair touched by tap (kz, ky, kx).
// `f(out_offset, in_offset, count)` covers `count` contiguous outputs; the
// matching inputs are spaced by stride[2].
template <class F>
void for_each_tap_row(const Geometry& g, Index kz, Index ky, Index kx, F&& f) {
  const Range rz = valid_range(g.in[0], g.out[0], kz, g.stride[0], g.pad[0]);
  const Range ry = valid_range(g.in[1], g.out[1], ky, g.stride[1], g.pad[1]);
  const Range rx = valid_range(g.in[2], g.out[2], kx, g.stride[2], g.pad[2]);
  if (rz.lo > rz.hi || ry.lo > ry.hi || rx.lo > rx.hi) return;
  const Index count = rx.hi - rx.lo + 1;
  const Index ix0 = rx.lo * g.stride[2] - g.pad[2] + kx;
  for (Index oz = rz.lo; oz <= rz.hi; ++oz) {
    const Index iz = oz * g.stride[0] - g.pad[0] + kz;
    for (Index oy = ry.lo; oy <= ry.hi; ++oy) {
      const Index iy = oy * g.stride[1] - g.pad[1] + ky;
      f((oz * g.out[1] + oy) * g.out[2] + rx.lo, (iz * g.in[1] + iy) * g.in[2] + ix0, count);
    }
  }
}

// Column matrix [c_in * taps, out_plane] of one batch item; taps that fall
// into the padding stay zero.
void im2col(const Geometry& g, const Scalar* in, Scalar* cols) {
  const Index sx = g.stride[2], plane = g.out_plane();
  std::fill_n(cols, g.c_in * g.taps() * plane, Scalar(0));
  for (Index ci = 0; ci < g.c_in; ++ci) {
    const Scalar* iplane = in + ci * g.in_plane();
    for (Index kz = 0, t = 0; kz < g.kernel[0]; ++kz) {
      for (Index ky = 0; ky < g.kernel[1]; ++ky) {
        for (Index kx = 0; kx < g.kernel[2]; ++kx, ++t) {
          Scalar* row = cols + (ci * g.taps() + t) * plane;
          for_each_tap_row(g, kz, ky, kx, [&](Index oo, Index io, Index n) {
            const Scalar* src = iplane + io;
            for (Index j = 0; j < n; ++j) row[oo + j] = src[j * sx];
          });
        }
      }
    }
  }
}

// Adjoint of im2col: accumulates columns back onto the input grid.
void col2im(const Geometry& g, const Scalar* cols, Scalar* in) {
  const Index sx = g.stride[2], plane = g.out_plane();
  for (Index ci = 0; ci < g.c_in; ++ci) {
    Scalar* iplane = in + ci * g.in_plane();
    for (Index kz = 0, t = 0; kz < g.kernel[0]; ++kz) {
      for (Index ky = 0; ky < g.kernel[1]; ++ky) {
        for (Index kx = 0; kx < g.kernel[2]; ++kx, ++t) {
          const Scalar* row = cols + (ci * g.taps() + t) * plane;
          for_each_tap_row(g, kz, ky, kx, [&](Index oo, Index io, Index n) {
            Scalar* dst = iplane + io;
            for (Index j = 0; j < n; ++j) dst[j * sx] += row[oo + j];
          });
        }
      }
    }
  }
}

std::vector<Scalar>& scratch(std::size_t n) {
  thread_local std::vector<Scalar> buf;
  if (buf.size() < n) buf.resize(n);
  return buf;
}

[[maybe_unused]] void blas_gemm(CBLAS_TRANSPOSE ta, CBLAS_TRANSPOSE tb, int m, int n, int k, const float* a, int lda,
                                const float* b, int ldb, float beta, float* c) {
  cblas_sgemm(CblasRowMajor, ta, tb, m, n, k, 1.0f, a, lda, b, ldb, beta, c, n);
}

[[maybe_unused]] void blas_gemm(CBLAS_TRANSPOSE ta, CBLAS_TRANSPOSE tb, int m, int n, int k, const double* a, int lda,
                                const double* b, int ldb, double beta, double* c) {
  cblas_dgemm(CblasRowMajor, ta, tb, m, n, k, 1.0, a, lda, b, ldb, beta, c, n);
}

// C[m, n] = op(A) op(B) + beta * C, row major.
void gemm(bool ta, bool tb, Index m, Index n, Index k, const Scalar* a, const Scalar* b, Scalar beta,
          Scalar* c) {
  blas_gemm(ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, static_cast<int>(m),
            static_cast<int>(n), static_cast<int>(k), a, static_cast<int>(ta ? m : k), b,
            static_cast<int>(tb ? k : n), beta, c);
}

// out[b] += W [c_out, c_in * taps] x cols(in[b])
void conv_gather(const Geometry& g, const Scalar* in, const Scalar* w, Scalar* out) {
  const Index k = g.c_in * g.taps(), plane = g.out_plane();
  auto& cols = scratch(static_cast<std::size_t>(k * plane));
  for (Index b = 0; b < g.batch; ++b) {
    im2col(g, in + b * g.c_in * g.in_plane(), cols.data());
    gemm(false, false, g.c_out, plane, k, w, cols.data(), 1, out + b * g.c_out * plane);
  }
}

// in_grad[b] += col2im(W^T x out_grad[b])  (adjoint of gather)
void conv_scatter(const Geometry& g, const Scalar* gout, const Scalar* w, Scalar* gin) {
  const Index k = g.c_in * g.taps(), plane = g.out_plane();
  auto& cols = scratch(static_cast<std::size_t>(k * plane));
  for (Index b = 0; b < g.batch; ++b) {
    gemm(true, false, k, plane, g.c_out, w, gout + b * g.c_out * plane, 0, cols.data());
    col2im(g, cols.data(), gin + b * g.c_in * g.in_plane());
  }
}

// w_grad += out_grad[b] x cols(in[b])^T
void conv_weight_grad(const Geometry& g, const Scalar* in, const Scalar* gout, Scalar* gw) {
  const Index k = g.c_in * g.taps(), plane = g.out_plane();
  auto& cols = scratch(static_cast<std::size_t>(k * plane));
  for (Index b = 0; b < g.batch; ++b) {
    im2col(g, in + b * g.c_in * g.in_plane(), cols.data());
    gemm(false, true, g.c_out, k, plane, gout + b * g.c_out * plane, cols.data(), 1, gw);
  }
}

void check_rank5(const Tensor& x, const char* op) {
  if (x.rank() != 5) {
    throw ShapeError(std::string(op) + " expects [B, C, D, H, W], got " + shape_str(x.shape()));
  }
}

}  // namespace

Index conv_out_extent(Index in, Index kernel, Index stride, Index pad) {
  return floor_div(in + 2 * pad - kernel, stride) + 1;
}

ConvParams make_conv(Index c_in, Index c_out, Index kernel, Index stride, Philox& rng,
                     bool with_bias) {
  ConvParams p;
  const Index taps = kernel * kernel * kernel;
  const double fan_in = static_cast<double>(c_in * taps);
  // Kaiming uniform with negative slope a = sqrt(5): bound = 1/sqrt(fan_in).
  const double bound = 1.0 / std::sqrt(fan_in);
  std::vector<Scalar> w(static_cast<std::size_t>(c_out * c_in * taps));
  for (auto& v : w) v = static_cast<Scalar>(rng.uniform(-bound, bound));
  p.weight = Tensor::from({c_out, c_in, kernel, kernel, kernel}, std::move(w), true);
  if (with_bias) {
    std::vector<Scalar> b(static_cast<std::size_t>(c_out));
    for (auto& v : b) v = static_cast<Scalar>(rng.uniform(-bound, bound));
    p.bias = Tensor::from({c_out}, std::move(b), true);
  }
  p.stride = {stride, stride, stride};
  const Index pad = kernel / 2;
  p.padding = {pad, pad, pad};
  return p;
}

Tensor conv3d(const Tensor& x, const ConvParams& p) {
  return conv3d(x, p.weight, p.bias, p.stride, p.padding);
}

Tensor conv3d(const Tensor& x, const Tensor& weight, const Tensor& bias, Triple stride,
              Triple padding) {
  check_rank5(x, "conv3d");
  if (weight.rank() != 5) throw ShapeError("conv3d weight must be rank 5");
  Geometry g;
  g.batch = x.dim(0);
  g.c_in = x.dim(1);
  g.c_out = weight.dim(0);
  if (weight.dim(1) != g.c_in) {
    throw ShapeError("conv3d channel mismatch: input " + shape_str(x.shape()) + ", weight " +
                     shape_str(weight.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != g.c_out)) {
    throw ShapeError("conv3d bias must be [C_out]");
  }
  for (int a = 0; a < 3; ++a) {
    g.in[a] = x.dim(2 + a);
    g.kernel[a] = weight.dim(2 + a);
    g.stride[a] = stride[a];
    g.pad[a] = padding[a];
    if (stride[a] <= 0 || padding[a] < 0) throw ValueError("conv3d stride/padding invalid");
    g.out[a] = conv_out_extent(g.in[a], g.kernel[a], g.stride[a], g.pad[a]);
    if (g.out[a] <= 0) {
      throw ShapeError("conv3d output extent is not positive for input " + shape_str(x.shape()) +
                       " and kernel " + shape_str(weight.shape()));
    }
  }
  std::vector<Scalar> out(static_cast<std::size_t>(g.batch * g.c_out * g.out_plane()), Scalar(0));
  if (bias.defined()) {
    const auto bd = bias.data();
    for (Index b = 0; b < g.batch; ++b) {
      for (Index co = 0; co < g.c_out; ++co) {
        std::fill_n(out.data() + (b * g.c_out + co) * g.out_plane(), g.out_plane(), bd[co]);
      }
    }
  }
  conv_gather(g, x.data().data(), weight.data().data(), out.data());
  Tensor r = detail::make_output({g.batch, g.c_out, g.out[0], g.out[1], g.out[2]}, std::move(out));
  detail::record("conv3d", r, {x, weight, bias}, [x, weight, bias, g](std::span<const Scalar> go) {
    if (needs_grad(x)) conv_scatter(g, go.data(), weight.data().data(), grad_buffer(x).data());
    if (needs_grad(weight)) {
      conv_weight_grad(g, x.data().data(), go.data(), grad_buffer(weight).data());
    }
    if (needs_grad(bias)) {
      auto gb = grad_buffer(bias);
      for (Index b = 0; b < g.batch; ++b) {
        for (Index co = 0; co < g.c_out; ++co) {
          const Scalar* plane = go.data() + (b * g.c_out + co) * g.out_plane();
          double acc = 0.0;
          for (Index i = 0; i < g.out_plane(); ++i) acc += plane[i];
          gb[co] += static_cast<Scalar>(acc);
        }
      }
    }
  });
  return r;
}

Tensor conv_transpose3d(const Tensor& x, const Tensor& weight, const Tensor& bias, Triple stride,
                        Triple padding) {
  check_rank5(x, "conv_transpose3d");
  if (weight.rank() != 5 || weight.dim(0) != x.dim(1)) {
    throw ShapeError("conv_transpose3d weight " + shape_str(weight.shape()) +
                     " does not match input " + shape_str(x.shape()));
  }
  // Geometry of the adjoint convolution: its "input" is our output.
  Geometry g;
  g.batch = x.dim(0);
  g.c_out = x.dim(1);
  g.c_in = weight.dim(1);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != g.c_in)) {
    throw ShapeError("conv_transpose3d bias must be [C_out]");
  }
  for (int a = 0; a < 3; ++a) {
    g.out[a] = x.dim(2 + a);
    g.kernel[a] = weight.dim(2 + a);
    g.stride[a] = stride[a];
    g.pad[a] = padding[a];
    g.in[a] = (g.out[a] - 1) * stride[a] - 2 * padding[a] + g.kernel[a];
    if (g.in[a] <= 0) throw ShapeError("conv_transpose3d output extent is not positive");
  }
  std::vector<Scalar> out(static_cast<std::size_t>(g.batch * g.c_in * g.in_plane()), Scalar(0));
  if (bias.defined()) {
    const auto bd = bias.data();
    for (Index b = 0; b < g.batch; ++b) {
      for (Index c = 0; c < g.c_in; ++c) {
        std::fill_n(out.data() + (b * g.c_in + c) * g.in_plane(), g.in_plane(), bd[c]);
      }
    }
  }
  conv_scatter(g, x.data().data(), weight.data().data(), out.data());
  Tensor r = detail::make_output({g.batch, g.c_in, g.in[0], g.in[1], g.in[2]}, std::move(out));
  detail::record("conv_transpose3d", r, {x, weight, bias},
                 [x, weight, bias, g](std::span<const Scalar> go) {
                   if (needs_grad(x)) {
                     conv_gather(g, go.data(), weight.data().data(), grad_buffer(x).data());
                   }
                   if (needs_grad(weight)) {
                     conv_weight_grad(g, go.data(), x.data().data(), grad_buffer(weight).data());
                   }
                   if (needs_grad(bias)) {
                     auto gb = grad_buffer(bias);
                     for (Index b = 0; b < g.batch; ++b) {
                       for (Index c = 0; c < g.c_in; ++c) {
                         const Scalar* plane = go.data() + (b * g.c_in + c) * g.in_plane();
                         double acc = 0.0;
                         for (Index i = 0; i < g.in_plane(); ++i) acc += plane[i];
                         gb[c] += static_cast<Scalar>(acc);
                       }
                     }
                   }
                 });
  return r;
}

Tensor instance_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Scalar eps) {
  if (x.rank() < 3) throw ShapeError("instance_norm expects [B, C, spatial...]");
  const Index batch = x.dim(0), channels = x.dim(1);
  const Index plane = x.numel() / (batch * channels);
  if (gamma.numel() != channels || beta.numel() != channels) {
    throw ShapeError("instance_norm affine parameters must have C entries");
  }
  const auto d = x.data();
  const auto gd = gamma.data();
  const auto bd = beta.data();
  std::vector<Scalar> out(d.size());
  auto xhat = std::make_shared<std::vector<Scalar>>(d.size());
  auto inv_std = std::make_shared<std::vector<Scalar>>(static_cast<std::size_t>(batch * channels));
  for (Index s = 0; s < batch * channels; ++s) {
    const Index c = s % channels;
    const Scalar* src = d.data() + s * plane;
    double m = 0.0;
    for (Index i = 0; i < plane; ++i) m += src[i];
    m /= static_cast<double>(plane);
    double v = 0.0;
    for (Index i = 0; i < plane; ++i) {
      const double dv = src[i] - m;
      v += dv * dv;
    }
    v /= static_cast<double>(plane);
    const double is = 1.0 / std::sqrt(v + static_cast<double>(eps));
    (*inv_std)[s] = static_cast<Scalar>(is);
    Scalar* xh = xhat->data() + s * plane;
    Scalar* o = out.data() + s * plane;
    for (Index i = 0; i < plane; ++i) {
      xh[i] = static_cast<Scalar>((src[i] - m) * is);
      o[i] = gd[c] * xh[i] + bd[c];
    }
  }
  Tensor r = detail::make_output(x.shape(), std::move(out));
  detail::record("instance_norm", r, {x, gamma, beta},
                 [x, gamma, beta, xhat, inv_std, batch, channels,
                  plane](std::span<const Scalar> go) {
                   const auto gd = gamma.data();
                   std::span<Scalar> gx, gg, gbt;
                   if (needs_grad(x)) gx = grad_buffer(x);
                   if (needs_grad(gamma)) gg = grad_buffer(gamma);
                   if (needs_grad(beta)) gbt = grad_buffer(beta);
                   for (Index s = 0; s < batch * channels; ++s) {
                     const Index c = s % channels;
                     const Scalar* g = go.data() + s * plane;
                     const Scalar* xh = xhat->data() + s * plane;
                     double sg = 0.0, sgx = 0.0;
                     for (Index i = 0; i < plane; ++i) {
                       sg += g[i];
                       sgx += static_cast<double>(g[i]) * xh[i];
                     }
                     if (!gg.empty()) gg[c] += static_cast<Scalar>(sgx);
                     if (!gbt.empty()) gbt[c] += static_cast<Scalar>(sg);
                     if (!gx.empty()) {
                       const double n = static_cast<double>(plane);
                       const double mg = sg / n, mgx = sgx / n;
                       const double scale = static_cast<double>(gd[c]) * (*inv_std)[s];
                       Scalar* dst = gx.data() + s * plane;
                       for (Index i = 0; i < plane; ++i) {
                         dst[i] += static_cast<Scalar>(scale * (g[i] - mg - xh[i] * mgx));
                       }
                     }
                   }
                 });
  return r;
}

namespace {

struct AxisLayout {
  Index outer, extent, inner;
};

AxisLayout axis_layout(const Tensor& x, int axis) {
  const int rank = x.rank();
  const int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) throw ShapeError("softmax axis out of range");
  AxisLayout l{1, x.shape()[a], 1};
  for (int i = 0; i < a; ++i) l.outer *= x.shape()[i];
  for (int i = a + 1; i < rank; ++i) l.inner *= x.shape()[i];
  return l;
}

}  // namespace

Tensor softmax(const Tensor& x, int axis) {
  detail::check_finite(x.data(), "softmax input");
  const AxisLayout l = axis_layout(x, axis);
  const auto d = x.data();
  std::vector<Scalar> out(d.size());
  for (Index o = 0; o < l.outer; ++o) {
    for (Index i = 0; i < l.inner; ++i) {
      const Index base = o * l.extent * l.inner + i;
      Scalar mx = -std::numeric_limits<Scalar>::infinity();
      for (Index k = 0; k < l.extent; ++k) mx = std::max(mx, d[base + k * l.inner]);
      double z = 0.0;
      for (Index k = 0; k < l.extent; ++k) z += std::exp(static_cast<double>(d[base + k * l.inner] - mx));
      for (Index k = 0; k < l.extent; ++k) {
        out[base + k * l.inner] =
            static_cast<Scalar>(std::exp(static_cast<double>(d[base + k * l.inner] - mx)) / z);
      }
    }
  }
  Tensor r = detail::make_output(x.shape(), std::move(out));
  const auto* ystore = r.impl()->storage.get();
  detail::record("softmax", r, {x}, [x, l, ystore](std::span<const Scalar> go) {
    auto gx = grad_buffer(x);
    const auto& y = *ystore;
    for (Index o = 0; o < l.outer; ++o) {
      for (Index i = 0; i < l.inner; ++i) {
        const Index base = o * l.extent * l.inner + i;
        double dot = 0.0;
        for (Index k = 0; k < l.extent; ++k) dot += go[base + k * l.inner] * y[base + k * l.inner];
        for (Index k = 0; k < l.extent; ++k) {
          const Index j = base + k * l.inner;
          gx[j] += static_cast<Scalar>(y[j] * (go[j] - dot));
        }
      }
    }
  });
  return r;
}

Tensor log_softmax(const Tensor& x, int axis) {
  detail::check_finite(x.data(), "log_softmax input");
  const AxisLayout l = axis_layout(x, axis);
  const auto d = x.data();
  std::vector<Scalar> out(d.size());
  for (Index o = 0; o < l.outer; ++o) {
    for (Index i = 0; i < l.inner; ++i) {
      const Index base = o * l.extent * l.inner + i;
      Scalar mx = -std::numeric_limits<Scalar>::infinity();
      for (Index k = 0; k < l.extent; ++k) mx = std::max(mx, d[base + k * l.inner]);
      double z = 0.0;
      for (Index k = 0; k < l.extent; ++k) z += std::exp(static_cast<double>(d[base + k * l.inner] - mx));
      const double lz = std::log(z) + mx;
      for (Index k = 0; k < l.extent; ++k) {
        out[base + k * l.inner] = static_cast<Scalar>(d[base + k * l.inner] - lz);
      }
    }
  }
  Tensor r = detail::make_output(x.shape(), std::move(out));
  const auto* ystore = r.impl()->storage.get();
  detail::record("log_softmax", r, {x}, [x, l, ystore](std::span<const Scalar> go) {
    auto gx = grad_buffer(x);
    const auto& y = *ystore;
    for (Index o = 0; o < l.outer; ++o) {
      for (Index i = 0; i < l.inner; ++i) {
        const Index base = o * l.extent * l.inner + i;
        double gs = 0.0;
        for (Index k = 0; k < l.extent; ++k) gs += go[base + k * l.inner];
        for (Index k = 0; k < l.extent; ++k) {
          const Index j = base + k * l.inner;
          gx[j] += static_cast<Scalar>(go[j] - std::exp(static_cast<double>(y[j])) * gs);
        }
      }
    }
  });
  return r;
}

Tensor adaptive_avg_pool3d(const Tensor& x, Triple target) {
  if (x.rank() < 3) throw ShapeError("adaptive_avg_pool3d expects at least 3 axes");
  const int r0 = x.rank() - 3;
  Triple src{x.dim(r0), x.dim(r0 + 1), x.dim(r0 + 2)};
  for (int a = 0; a < 3; ++a) {
    if (target[a] < 1 || target[a] > src[a]) {
      throw ShapeError("adaptive_avg_pool3d target " + shape_str({target[0], target[1], target[2]}) +
                       " invalid for source " + shape_str({src[0], src[1], src[2]}));
    }
  }
  // Window bounds per axis.
  std::array<std::vector<Index>, 3> lo, hi;
  for (int a = 0; a < 3; ++a) {
    for (Index i = 0; i < target[a]; ++i) {
      lo[a].push_back((i * src[a]) / target[a]);
      hi[a].push_back(((i + 1) * src[a] + target[a] - 1) / target[a]);
    }
  }
  const Index planes = x.numel() / (src[0] * src[1] * src[2]);
  const Index in_plane = src[0] * src[1] * src[2];
  const Index out_plane = target[0] * target[1] * target[2];
  const auto d = x.data();
  std::vector<Scalar> out(static_cast<std::size_t>(planes * out_plane));
  for (Index p = 0; p < planes; ++p) {
    const Scalar* s = d.data() + p * in_plane;
    for (Index i = 0; i < target[0]; ++i) {
      for (Index j = 0; j < target[1]; ++j) {
        for (Index k = 0; k < target[2]; ++k) {
          double acc = 0.0;
          for (Index z = lo[0][i]; z < hi[0][i]; ++z) {
            for (Index y = lo[1][j]; y < hi[1][j]; ++y) {
              for (Index w = lo[2][k]; w < hi[2][k]; ++w) acc += s[(z * src[1] + y) * src[2] + w];
            }
          }
          const double cnt = static_cast<double>((hi[0][i] - lo[0][i]) * (hi[1][j] - lo[1][j]) *
                                                 (hi[2][k] - lo[2][k]));
          out[p * out_plane + (i * target[1] + j) * target[2] + k] = static_cast<Scalar>(acc / cnt);
        }
      }
    }
  }
  Shape out_shape = x.shape();
  for (int a = 0; a < 3; ++a) out_shape[r0 + a] = target[a];
  Tensor r = detail::make_output(out_shape, std::move(out));
  detail::record("adaptive_avg_pool3d", r, {x},
                 [x, lo, hi, src, target, planes, in_plane, out_plane](std::span<const Scalar> go) {
                   auto gx = grad_buffer(x);
                   for (Index p = 0; p < planes; ++p) {
                     Scalar* dst = gx.data() + p * in_plane;
                     for (Index i = 0; i < target[0]; ++i) {
                       for (Index j = 0; j < target[1]; ++j) {
                         for (Index k = 0; k < target[2]; ++k) {
                           const double cnt = static_cast<double>(
                               (hi[0][i] - lo[0][i]) * (hi[1][j] - lo[1][j]) * (hi[2][k] - lo[2][k]));
                           const Scalar g = static_cast<Scalar>(
                               go[p * out_plane + (i * target[1] + j) * target[2] + k] / cnt);
                           for (Index z = lo[0][i]; z < hi[0][i]; ++z) {
                             for (Index y = lo[1][j]; y < hi[1][j]; ++y) {
                               for (Index w = lo[2][k]; w < hi[2][k]; ++w) {
                                 dst[(z * src[1] + y) * src[2] + w] += g;
                               }
                             }
                           }
                         }
                       }
                     }
                   }
                 });
  return r;
}

Tensor one_hot(const Tensor& labels, Index classes) {
  if (labels.rank() < 1) throw ShapeError("one_hot expects at least a batch axis");
  const Index batch = labels.dim(0);
  const Index plane = labels.numel() / batch;
  const auto d = labels.data();
  std::vector<Scalar> out(static_cast<std::size_t>(batch * classes * plane), Scalar(0));
  for (Index b = 0; b < batch; ++b) {
    for (Index i = 0; i < plane; ++i) {
      const Scalar v = d[b * plane + i];
      const auto k = static_cast<Index>(v);
      if (static_cast<Scalar>(k) != v || k < 0 || k >= classes) {
        throw ValueError("label value " + std::to_string(v) + " outside [0, " +
                         std::to_string(classes) + ")");
      }
      out[(b * classes + k) * plane + i] = Scalar(1);
    }
  }
  Shape shape = labels.shape();
  shape.insert(shape.begin() + 1, classes);
  return Tensor::from(shape, std::move(out));
}

LossValue dice_ce_loss(const Tensor& logits, const Tensor& labels) {
  if (logits.rank() < 3) throw ShapeError("dice_ce_loss expects [B, K, spatial...]");
  const Index classes = logits.dim(1);
  if (classes < 2) throw ValueError("dice_ce_loss needs at least two classes");
  Shape expect = logits.shape();
  expect.erase(expect.begin() + 1);
  if (labels.shape() != expect) {
    throw ShapeError("labels " + shape_str(labels.shape()) + " do not match logits " +
                     shape_str(logits.shape()));
  }
  const Tensor target = one_hot(labels, classes);
  const Index voxels = labels.numel();

  const Tensor logp = log_softmax(logits, 1);
  const Tensor ce = mul_scalar(sum(mul(target, logp)), Scalar(-1) / static_cast<Scalar>(voxels));

  std::vector<int> reduce_axes{0};
  for (int a = 2; a < logits.rank(); ++a) reduce_axes.push_back(a);
  const Tensor probs = softmax(logits, 1);
  const Tensor inter = sum(mul(probs, target), reduce_axes);  // [K]
  const Tensor psum = sum(probs, reduce_axes);
  const Tensor gsum = sum(target, reduce_axes);
  const Tensor dice = div(add_scalar(mul_scalar(inter, Scalar(2)), kDiceSmooth),
                          add_scalar(add(psum, gsum), kDiceSmooth));
  const Tensor fg_dice = mean(slice(dice, 0, 1, classes - 1));
  const Tensor dice_part = add_scalar(neg(fg_dice), Scalar(1));
  return {add(dice_part, ce), dice_part, ce};
}

}  // namespace nn

DUMAMBA_END_NAMESPACE
