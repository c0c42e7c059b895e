#include <algorithm>
#include <atomic>
#include <cmath>

#include "msflow/common.hpp"
#include "msflow/ops.hpp"

namespace msf::ops {

namespace {

std::atomic<ConvBackend> g_conv_backend{ConvBackend::kDirect};

// Normalized grid values are float32, so unprojecting them lands a hair off
// the pixel lattice even when the grid was built from exact lattice points.
// Snapping inside one part in 1e5 of a pixel keeps such warps lossless: an
// identity grid returns its input bit for bit.
double snap_lattice(double p) {
  const double r = std::nearbyint(p);
  return std::abs(p - r) < 1e-5 ? r : p;
}

struct ConvDims {
  int N, Ci, H, W, Co, kh, kw, Ho, Wo;
};

ConvDims conv_check(const Tensor& x, const Tensor& k, const Tensor& b, int stride,
                    int padding, int dilation) {
  MSF_CHECK(x.rank() == 4, "conv2d: input must be [N,C,H,W], got " << shape_str(x.shape()));
  MSF_CHECK(k.rank() == 4, "conv2d: kernel must be [Co,Ci,kh,kw], got " << shape_str(k.shape()));
  MSF_CHECK(b.rank() == 1, "conv2d: bias must be [Co], got " << shape_str(b.shape()));
  MSF_CHECK(x.dim(1) == k.dim(1), "conv2d: input channels (" << x.dim(1)
                                      << ") != kernel channels (" << k.dim(1) << ")");
  MSF_CHECK(k.dim(0) == b.dim(0), "conv2d: kernel count (" << k.dim(0)
                                      << ") != bias size (" << b.dim(0) << ")");
  MSF_CHECK(stride >= 1, "conv2d: stride must be >= 1, got " << stride);
  MSF_CHECK(padding >= 0, "conv2d: padding must be >= 0, got " << padding);
  MSF_CHECK(dilation >= 1, "conv2d: dilation must be >= 1, got " << dilation);
  ConvDims d;
  d.N = x.dim(0);
  d.Ci = x.dim(1);
  d.H = x.dim(2);
  d.W = x.dim(3);
  d.Co = k.dim(0);
  d.kh = k.dim(2);
  d.kw = k.dim(3);
  const int eh = d.H + 2 * padding - dilation * (d.kh - 1) - 1;
  const int ew = d.W + 2 * padding - dilation * (d.kw - 1) - 1;
  MSF_CHECK(eh >= 0 && ew >= 0,
            "conv2d: kernel " << d.kh << "x" << d.kw << " with dilation " << dilation
                              << " and padding " << padding
                              << " does not fit input " << d.H << "x" << d.W);
  d.Ho = eh / stride + 1;
  d.Wo = ew / stride + 1;
  return d;
}

void conv_forward_direct(const ConvDims& d, std::span<const float> xs,
                         std::span<const float> ks, std::span<const float> bs,
                         int stride, int padding, int dilation, std::vector<float>& out) {
  const std::size_t in_plane = static_cast<std::size_t>(d.H) * d.W;
  const std::size_t out_plane = static_cast<std::size_t>(d.Ho) * d.Wo;
  parallel_for(static_cast<std::int64_t>(d.N) * d.Co, [&](std::int64_t slice) {
    const int n = static_cast<int>(slice / d.Co);
    const int o = static_cast<int>(slice % d.Co);
    const float* kbase = ks.data() + static_cast<std::size_t>(o) * d.Ci * d.kh * d.kw;
    float* obase = out.data() + slice * out_plane;
    for (int y = 0; y < d.Ho; ++y)
      for (int x = 0; x < d.Wo; ++x) {
        double acc = bs[o];
        for (int c = 0; c < d.Ci; ++c) {
          const float* xbase = xs.data() + (static_cast<std::size_t>(n) * d.Ci + c) * in_plane;
          for (int i = 0; i < d.kh; ++i) {
            const int iy = y * stride + i * dilation - padding;
            if (iy < 0 || iy >= d.H) continue;
            for (int j = 0; j < d.kw; ++j) {
              const int ix = x * stride + j * dilation - padding;
              if (ix < 0 || ix >= d.W) continue;
              acc += static_cast<double>(xbase[static_cast<std::size_t>(iy) * d.W + ix]) *
                     kbase[(static_cast<std::size_t>(c) * d.kh + i) * d.kw + j];
            }
          }
        }
        obase[static_cast<std::size_t>(y) * d.Wo + x] = static_cast<float>(acc);
      }
  });
}

// Same accumulation order (c, ky, kx) as the direct route, so both produce
// bit-identical outputs.
void conv_forward_im2col(const ConvDims& d, std::span<const float> xs,
                         std::span<const float> ks, std::span<const float> bs,
                         int stride, int padding, int dilation, std::vector<float>& out) {
  const std::size_t in_plane = static_cast<std::size_t>(d.H) * d.W;
  const std::size_t out_plane = static_cast<std::size_t>(d.Ho) * d.Wo;
  const std::size_t rows = static_cast<std::size_t>(d.Ci) * d.kh * d.kw;
  std::vector<float> col(rows * out_plane);
  for (int n = 0; n < d.N; ++n) {
    parallel_for(static_cast<std::int64_t>(rows), [&](std::int64_t r) {
      const int c = static_cast<int>(r / (d.kh * d.kw));
      const int i = static_cast<int>((r / d.kw) % d.kh);
      const int j = static_cast<int>(r % d.kw);
      const float* xbase = xs.data() + (static_cast<std::size_t>(n) * d.Ci + c) * in_plane;
      float* cbase = col.data() + static_cast<std::size_t>(r) * out_plane;
      for (int y = 0; y < d.Ho; ++y) {
        const int iy = y * stride + i * dilation - padding;
        for (int x = 0; x < d.Wo; ++x) {
          const int ix = x * stride + j * dilation - padding;
          cbase[static_cast<std::size_t>(y) * d.Wo + x] =
              (iy >= 0 && iy < d.H && ix >= 0 && ix < d.W)
                  ? xbase[static_cast<std::size_t>(iy) * d.W + ix]
                  : 0.f;
        }
      }
    });
    parallel_for(d.Co, [&](std::int64_t o) {
      const float* kbase = ks.data() + static_cast<std::size_t>(o) * rows;
      float* obase = out.data() + (static_cast<std::size_t>(n) * d.Co + o) * out_plane;
      for (std::size_t p = 0; p < out_plane; ++p) {
        double acc = bs[o];
        for (std::size_t r = 0; r < rows; ++r)
          acc += static_cast<double>(kbase[r]) * col[r * out_plane + p];
        obase[p] = static_cast<float>(acc);
      }
    });
  }
}

}  // namespace

void set_conv_backend(ConvBackend backend) { g_conv_backend.store(backend); }
ConvBackend conv_backend() { return g_conv_backend.load(); }

Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias, int stride,
              int padding, int dilation) {
  const ConvDims d = conv_check(x, kernel, bias, stride, padding, dilation);
  std::vector<float> out(static_cast<std::size_t>(d.N) * d.Co * d.Ho * d.Wo);
  if (conv_backend() == ConvBackend::kIm2col)
    conv_forward_im2col(d, x.data(), kernel.data(), bias.data(), stride, padding, dilation, out);
  else
    conv_forward_direct(d, x.data(), kernel.data(), bias.data(), stride, padding, dilation, out);

  return make_op_result(
      {d.N, d.Co, d.Ho, d.Wo}, std::move(out), {x, kernel, bias},
      [x, kernel, bias, d, stride, padding, dilation](TensorImpl& self) {
        const std::size_t in_plane = static_cast<std::size_t>(d.H) * d.W;
        const std::size_t out_plane = static_cast<std::size_t>(d.Ho) * d.Wo;
        auto xs = x.data();
        auto ks = kernel.data();
        const std::vector<float>& g = self.grad;

        if (bias.requires_grad()) {
          auto gb = bias.impl()->grad_buf();
          for (int o = 0; o < d.Co; ++o) {
            double acc = 0.0;
            for (int n = 0; n < d.N; ++n) {
              const float* gbase = g.data() + (static_cast<std::size_t>(n) * d.Co + o) * out_plane;
              for (std::size_t p = 0; p < out_plane; ++p) acc += gbase[p];
            }
            gb[o] += static_cast<float>(acc);
          }
        }

        if (kernel.requires_grad()) {
          auto gk = kernel.impl()->grad_buf();
          parallel_for(d.Co, [&](std::int64_t o) {
            for (int c = 0; c < d.Ci; ++c)
              for (int i = 0; i < d.kh; ++i)
                for (int j = 0; j < d.kw; ++j) {
                  double acc = 0.0;
                  for (int n = 0; n < d.N; ++n) {
                    const float* gbase =
                        g.data() + (static_cast<std::size_t>(n) * d.Co + o) * out_plane;
                    const float* xbase =
                        xs.data() + (static_cast<std::size_t>(n) * d.Ci + c) * in_plane;
                    for (int y = 0; y < d.Ho; ++y) {
                      const int iy = y * stride + i * dilation - padding;
                      if (iy < 0 || iy >= d.H) continue;
                      for (int xx = 0; xx < d.Wo; ++xx) {
                        const int ix = xx * stride + j * dilation - padding;
                        if (ix < 0 || ix >= d.W) continue;
                        acc += static_cast<double>(gbase[static_cast<std::size_t>(y) * d.Wo + xx]) *
                               xbase[static_cast<std::size_t>(iy) * d.W + ix];
                      }
                    }
                  }
                  gk[((static_cast<std::size_t>(o) * d.Ci + c) * d.kh + i) * d.kw + j] +=
                      static_cast<float>(acc);
                }
          });
        }

        if (x.requires_grad()) {
          auto gx = x.impl()->grad_buf();
          // Gather form: each input cell sums over the output cells that read
          // it, so slices stay disjoint under the parallel loop.
          parallel_for(static_cast<std::int64_t>(d.N) * d.Ci, [&](std::int64_t slice) {
            const int n = static_cast<int>(slice / d.Ci);
            const int c = static_cast<int>(slice % d.Ci);
            float* gxbase = gx.data() + slice * in_plane;
            for (int u = 0; u < d.H; ++u)
              for (int v = 0; v < d.W; ++v) {
                double acc = 0.0;
                for (int i = 0; i < d.kh; ++i) {
                  const int ynum = u + padding - i * dilation;
                  if (ynum < 0 || ynum % stride != 0) continue;
                  const int y = ynum / stride;
                  if (y >= d.Ho) continue;
                  for (int j = 0; j < d.kw; ++j) {
                    const int xnum = v + padding - j * dilation;
                    if (xnum < 0 || xnum % stride != 0) continue;
                    const int xx = xnum / stride;
                    if (xx >= d.Wo) continue;
                    for (int o = 0; o < d.Co; ++o) {
                      acc += static_cast<double>(
                                 g[(static_cast<std::size_t>(n) * d.Co + o) * out_plane +
                                   static_cast<std::size_t>(y) * d.Wo + xx]) *
                             ks[((static_cast<std::size_t>(o) * d.Ci + c) * d.kh + i) * d.kw + j];
                    }
                  }
                }
                gxbase[static_cast<std::size_t>(u) * d.W + v] += static_cast<float>(acc);
              }
          });
        }
      });
}

Tensor max_pool2(const Tensor& x) {
  MSF_CHECK(x.rank() == 4, "max_pool2: expected [N,C,H,W], got " << shape_str(x.shape()));
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  MSF_CHECK(H % 2 == 0 && W % 2 == 0,
            "max_pool2: spatial dims must be even, got " << H << "x" << W);
  const int Ho = H / 2, Wo = W / 2;
  auto xs = x.data();
  std::vector<float> out(static_cast<std::size_t>(N) * C * Ho * Wo);
  // Winner index per output cell; ties go to the first in scan order.
  auto argmax = std::make_shared<std::vector<std::uint32_t>>(out.size());
  const std::size_t in_plane = static_cast<std::size_t>(H) * W;
  const std::size_t out_plane = static_cast<std::size_t>(Ho) * Wo;
  parallel_for(static_cast<std::int64_t>(N) * C, [&](std::int64_t slice) {
    const float* xbase = xs.data() + slice * in_plane;
    for (int y = 0; y < Ho; ++y)
      for (int xx = 0; xx < Wo; ++xx) {
        std::uint32_t best = static_cast<std::uint32_t>(2 * y * W + 2 * xx);
        float bv = xbase[best];
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) {
            const std::uint32_t idx =
                static_cast<std::uint32_t>((2 * y + dy) * W + (2 * xx + dx));
            if (xbase[idx] > bv) {
              bv = xbase[idx];
              best = idx;
            }
          }
        out[slice * out_plane + static_cast<std::size_t>(y) * Wo + xx] = bv;
        (*argmax)[slice * out_plane + static_cast<std::size_t>(y) * Wo + xx] = best;
      }
  });
  return make_op_result({N, C, Ho, Wo}, std::move(out), {x}, [x, argmax](TensorImpl& self) {
    if (!x.requires_grad()) return;
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t in_plane = static_cast<std::size_t>(H) * W;
    const std::size_t out_plane = static_cast<std::size_t>(H / 2) * (W / 2);
    auto gx = x.impl()->grad_buf();
    for (std::int64_t slice = 0; slice < static_cast<std::int64_t>(N) * C; ++slice)
      for (std::size_t p = 0; p < out_plane; ++p)
        gx[slice * in_plane + (*argmax)[slice * out_plane + p]] +=
            self.grad[slice * out_plane + p];
  });
}

Tensor upsample2_nearest(const Tensor& x) {
  MSF_CHECK(x.rank() == 4, "upsample2_nearest: expected [N,C,H,W], got "
                               << shape_str(x.shape()));
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Ho = 2 * H, Wo = 2 * W;
  auto xs = x.data();
  std::vector<float> out(static_cast<std::size_t>(N) * C * Ho * Wo);
  const std::size_t in_plane = static_cast<std::size_t>(H) * W;
  const std::size_t out_plane = static_cast<std::size_t>(Ho) * Wo;
  parallel_for(static_cast<std::int64_t>(N) * C, [&](std::int64_t slice) {
    const float* xbase = xs.data() + slice * in_plane;
    float* obase = out.data() + slice * out_plane;
    for (int y = 0; y < Ho; ++y)
      for (int xx = 0; xx < Wo; ++xx)
        obase[static_cast<std::size_t>(y) * Wo + xx] =
            xbase[static_cast<std::size_t>(y / 2) * W + xx / 2];
  });
  return make_op_result({N, C, Ho, Wo}, std::move(out), {x}, [x](TensorImpl& self) {
    if (!x.requires_grad()) return;
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t in_plane = static_cast<std::size_t>(H) * W;
    const std::size_t out_plane = in_plane * 4;
    auto gx = x.impl()->grad_buf();
    for (std::int64_t slice = 0; slice < static_cast<std::int64_t>(N) * C; ++slice) {
      const float* gbase = self.grad.data() + slice * out_plane;
      float* gxbase = gx.data() + slice * in_plane;
      for (int u = 0; u < H; ++u)
        for (int v = 0; v < W; ++v) {
          double acc = 0.0;
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx)
              acc += gbase[static_cast<std::size_t>(2 * u + dy) * 2 * W + 2 * v + dx];
          gxbase[static_cast<std::size_t>(u) * W + v] += static_cast<float>(acc);
        }
    }
  });
}

Tensor bilinear_resize(const Tensor& x, int oh, int ow) {
  MSF_CHECK(x.rank() == 4, "bilinear_resize: expected [N,C,H,W], got "
                               << shape_str(x.shape()));
  MSF_CHECK(oh >= 1 && ow >= 1,
            "bilinear_resize: target " << oh << "x" << ow << " must be positive");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const double sy = oh > 1 ? static_cast<double>(H - 1) / (oh - 1) : 0.0;
  const double sx = ow > 1 ? static_cast<double>(W - 1) / (ow - 1) : 0.0;
  auto xs = x.data();
  std::vector<float> out(static_cast<std::size_t>(N) * C * oh * ow);
  const std::size_t in_plane = static_cast<std::size_t>(H) * W;
  const std::size_t out_plane = static_cast<std::size_t>(oh) * ow;
  parallel_for(static_cast<std::int64_t>(N) * C, [&](std::int64_t slice) {
    const float* xbase = xs.data() + slice * in_plane;
    float* obase = out.data() + slice * out_plane;
    for (int y = 0; y < oh; ++y) {
      const double py = y * sy;
      const int y0 = std::min(static_cast<int>(py), H - 1);
      const int y1 = std::min(y0 + 1, H - 1);
      const double wy = py - y0;
      for (int xx = 0; xx < ow; ++xx) {
        const double px = xx * sx;
        const int x0 = std::min(static_cast<int>(px), W - 1);
        const int x1 = std::min(x0 + 1, W - 1);
        const double wx = px - x0;
        const double v = (1 - wy) * ((1 - wx) * xbase[static_cast<std::size_t>(y0) * W + x0] +
                                     wx * xbase[static_cast<std::size_t>(y0) * W + x1]) +
                         wy * ((1 - wx) * xbase[static_cast<std::size_t>(y1) * W + x0] +
                               wx * xbase[static_cast<std::size_t>(y1) * W + x1]);
        obase[static_cast<std::size_t>(y) * ow + xx] = static_cast<float>(v);
      }
    }
  });
  return make_op_result({N, C, oh, ow}, std::move(out), {x}, [x, oh, ow](TensorImpl& self) {
    if (!x.requires_grad()) return;
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const double sy = oh > 1 ? static_cast<double>(H - 1) / (oh - 1) : 0.0;
    const double sx = ow > 1 ? static_cast<double>(W - 1) / (ow - 1) : 0.0;
    const std::size_t in_plane = static_cast<std::size_t>(H) * W;
    const std::size_t out_plane = static_cast<std::size_t>(oh) * ow;
    auto gx = x.impl()->grad_buf();
    parallel_for(static_cast<std::int64_t>(N) * C, [&](std::int64_t slice) {
      const float* gbase = self.grad.data() + slice * out_plane;
      float* gxbase = gx.data() + slice * in_plane;
      for (int y = 0; y < oh; ++y) {
        const double py = y * sy;
        const int y0 = std::min(static_cast<int>(py), H - 1);
        const int y1 = std::min(y0 + 1, H - 1);
        const double wy = py - y0;
        for (int xx = 0; xx < ow; ++xx) {
          const double px = xx * sx;
          const int x0 = std::min(static_cast<int>(px), W - 1);
          const int x1 = std::min(x0 + 1, W - 1);
          const double wx = px - x0;
          const double g = gbase[static_cast<std::size_t>(y) * ow + xx];
          gxbase[static_cast<std::size_t>(y0) * W + x0] +=
              static_cast<float>(g * (1 - wy) * (1 - wx));
          gxbase[static_cast<std::size_t>(y0) * W + x1] += static_cast<float>(g * (1 - wy) * wx);
          gxbase[static_cast<std::size_t>(y1) * W + x0] += static_cast<float>(g * wy * (1 - wx));
          gxbase[static_cast<std::size_t>(y1) * W + x1] += static_cast<float>(g * wy * wx);
        }
      }
    });
  });
}

Tensor global_avg_pool(const Tensor& x) {
  MSF_CHECK(x.rank() == 4, "global_avg_pool: expected [N,C,H,W], got "
                               << shape_str(x.shape()));
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  MSF_CHECK(plane > 0, "global_avg_pool: empty spatial extent");
  auto xs = x.data();
  std::vector<float> out(static_cast<std::size_t>(N) * C);
  for (std::int64_t slice = 0; slice < static_cast<std::int64_t>(N) * C; ++slice) {
    double acc = 0.0;
    const float* xbase = xs.data() + slice * plane;
    for (std::size_t p = 0; p < plane; ++p) acc += xbase[p];
    out[slice] = static_cast<float>(acc / static_cast<double>(plane));
  }
  return make_op_result({N, C}, std::move(out), {x}, [x](TensorImpl& self) {
    if (!x.requires_grad()) return;
    const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
    auto gx = x.impl()->grad_buf();
    for (std::size_t slice = 0; slice < self.data.size(); ++slice) {
      const float g = static_cast<float>(static_cast<double>(self.grad[slice]) /
                                         static_cast<double>(plane));
      for (std::size_t p = 0; p < plane; ++p) gx[slice * plane + p] += g;
    }
  });
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  MSF_CHECK(a.rank() == 4 && b.rank() == 4,
            "concat_channels: expected [N,C,H,W] inputs, got " << shape_str(a.shape())
                                                               << " and " << shape_str(b.shape()));
  MSF_CHECK(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3),
            "concat_channels: non-channel dims differ, " << shape_str(a.shape()) << " vs "
                                                         << shape_str(b.shape()));
  const int N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), H = a.dim(2), W = a.dim(3);
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  auto as = a.data(), bs = b.data();
  std::vector<float> out(static_cast<std::size_t>(N) * (Ca + Cb) * plane);
  for (int n = 0; n < N; ++n) {
    std::copy_n(as.data() + static_cast<std::size_t>(n) * Ca * plane, Ca * plane,
                out.data() + static_cast<std::size_t>(n) * (Ca + Cb) * plane);
    std::copy_n(bs.data() + static_cast<std::size_t>(n) * Cb * plane, Cb * plane,
                out.data() + (static_cast<std::size_t>(n) * (Ca + Cb) + Ca) * plane);
  }
  return make_op_result({N, Ca + Cb, H, W}, std::move(out), {a, b}, [a, b](TensorImpl& self) {
    const int N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1);
    const std::size_t plane = static_cast<std::size_t>(a.dim(2)) * a.dim(3);
    if (a.requires_grad()) {
      auto ga = a.impl()->grad_buf();
      for (int n = 0; n < N; ++n)
        for (std::size_t i = 0; i < Ca * plane; ++i)
          ga[static_cast<std::size_t>(n) * Ca * plane + i] +=
              self.grad[static_cast<std::size_t>(n) * (Ca + Cb) * plane + i];
    }
    if (b.requires_grad()) {
      auto gb = b.impl()->grad_buf();
      for (int n = 0; n < N; ++n)
        for (std::size_t i = 0; i < Cb * plane; ++i)
          gb[static_cast<std::size_t>(n) * Cb * plane + i] +=
              self.grad[(static_cast<std::size_t>(n) * (Ca + Cb) + Ca) * plane + i];
    }
  });
}

Tensor grid_sample(const Tensor& x, const Tensor& grid) {
  MSF_CHECK(x.rank() == 4, "grid_sample: input must be [N,C,H,W], got "
                               << shape_str(x.shape()));
  MSF_CHECK(grid.rank() == 4 && grid.dim(3) == 2,
            "grid_sample: grid must be [N,Ho,Wo,2], got " << shape_str(grid.shape()));
  MSF_CHECK(x.dim(0) == grid.dim(0), "grid_sample: batch mismatch, input " << x.dim(0)
                                         << " vs grid " << grid.dim(0));
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Ho = grid.dim(1), Wo = grid.dim(2);
  auto xs = x.data();
  auto gs = grid.data();
  std::vector<float> out(static_cast<std::size_t>(N) * C * Ho * Wo);
  const std::size_t in_plane = static_cast<std::size_t>(H) * W;
  const std::size_t out_plane = static_cast<std::size_t>(Ho) * Wo;

  auto tap = [&](int n, int c, int iy, int ix) -> double {
    if (iy < 0 || iy >= H || ix < 0 || ix >= W) return 0.0;
    return xs[(static_cast<std::size_t>(n) * C + c) * in_plane +
              static_cast<std::size_t>(iy) * W + ix];
  };

  parallel_for(static_cast<std::int64_t>(N) * out_plane, [&](std::int64_t cell) {
    const int n = static_cast<int>(cell / out_plane);
    const std::size_t p = static_cast<std::size_t>(cell % out_plane);
    const double gx = gs[(static_cast<std::size_t>(n) * out_plane + p) * 2];
    const double gy = gs[(static_cast<std::size_t>(n) * out_plane + p) * 2 + 1];
    const double px = snap_lattice((gx + 1.0) * (W - 1) / 2.0);
    const double py = snap_lattice((gy + 1.0) * (H - 1) / 2.0);
    const int x0 = static_cast<int>(std::floor(px));
    const int y0 = static_cast<int>(std::floor(py));
    const double wx = px - x0, wy = py - y0;
    for (int c = 0; c < C; ++c) {
      const double v = (1 - wy) * ((1 - wx) * tap(n, c, y0, x0) + wx * tap(n, c, y0, x0 + 1)) +
                       wy * ((1 - wx) * tap(n, c, y0 + 1, x0) + wx * tap(n, c, y0 + 1, x0 + 1));
      out[(static_cast<std::size_t>(n) * C + c) * out_plane + p] = static_cast<float>(v);
    }
  });

  return make_op_result({N, C, Ho, Wo}, std::move(out), {x, grid}, [x, grid](TensorImpl& self) {
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int Ho = grid.dim(1), Wo = grid.dim(2);
    const std::size_t in_plane = static_cast<std::size_t>(H) * W;
    const std::size_t out_plane = static_cast<std::size_t>(Ho) * Wo;
    auto xs = x.data();
    auto gs = grid.data();
    auto tap = [&](int n, int c, int iy, int ix) -> double {
      if (iy < 0 || iy >= H || ix < 0 || ix >= W) return 0.0;
      return xs[(static_cast<std::size_t>(n) * C + c) * in_plane +
                static_cast<std::size_t>(iy) * W + ix];
    };
    const bool need_x = x.requires_grad();
    const bool need_grid = grid.requires_grad();
    std::span<float> gxbuf, ggbuf;
    if (need_x) gxbuf = x.impl()->grad_buf();
    if (need_grid) ggbuf = grid.impl()->grad_buf();
    for (int n = 0; n < N; ++n)
      for (std::size_t p = 0; p < out_plane; ++p) {
        const double gx = gs[(static_cast<std::size_t>(n) * out_plane + p) * 2];
        const double gy = gs[(static_cast<std::size_t>(n) * out_plane + p) * 2 + 1];
        const double px = snap_lattice((gx + 1.0) * (W - 1) / 2.0);
        const double py = snap_lattice((gy + 1.0) * (H - 1) / 2.0);
        const int x0 = static_cast<int>(std::floor(px));
        const int y0 = static_cast<int>(std::floor(py));
        const double wx = px - x0, wy = py - y0;
        double dpx = 0.0, dpy = 0.0;
        for (int c = 0; c < C; ++c) {
          const double g =
              self.grad[(static_cast<std::size_t>(n) * C + c) * out_plane + p];
          if (need_x) {
            auto scatter = [&](int iy, int ix, double w) {
              if (iy < 0 || iy >= H || ix < 0 || ix >= W) return;
              gxbuf[(static_cast<std::size_t>(n) * C + c) * in_plane +
                    static_cast<std::size_t>(iy) * W + ix] += static_cast<float>(g * w);
            };
            scatter(y0, x0, (1 - wy) * (1 - wx));
            scatter(y0, x0 + 1, (1 - wy) * wx);
            scatter(y0 + 1, x0, wy * (1 - wx));
            scatter(y0 + 1, x0 + 1, wy * wx);
          }
          if (need_grid) {
            const double v00 = tap(n, c, y0, x0), v01 = tap(n, c, y0, x0 + 1);
            const double v10 = tap(n, c, y0 + 1, x0), v11 = tap(n, c, y0 + 1, x0 + 1);
            dpx += g * ((1 - wy) * (v01 - v00) + wy * (v11 - v10));
            dpy += g * ((1 - wx) * (v10 - v00) + wx * (v11 - v01));
          }
        }
        if (need_grid) {
          ggbuf[(static_cast<std::size_t>(n) * out_plane + p) * 2] +=
              static_cast<float>(dpx * (W - 1) / 2.0);
          ggbuf[(static_cast<std::size_t>(n) * out_plane + p) * 2 + 1] +=
              static_cast<float>(dpy * (H - 1) / 2.0);
        }
      }
  });
}

Tensor affine_grid(const Tensor& theta, int h, int w) {
  MSF_CHECK(theta.rank() == 1 && theta.dim(0) == 6,
            "affine_grid: theta must be [6], got " << shape_str(theta.shape()));
  MSF_CHECK(h >= 1 && w >= 1, "affine_grid: size " << h << "x" << w << " must be positive");
  auto ts = theta.data();
  std::vector<float> out(static_cast<std::size_t>(h) * w * 2);
  for (int y = 0; y < h; ++y) {
    const double yn = h > 1 ? 2.0 * y / (h - 1) - 1.0 : 0.0;
    for (int x = 0; x < w; ++x) {
      const double xn = w > 1 ? 2.0 * x / (w - 1) - 1.0 : 0.0;
      const std::size_t p = (static_cast<std::size_t>(y) * w + x) * 2;
      out[p] = static_cast<float>(ts[0] * xn + ts[1] * yn + ts[2]);
      out[p + 1] = static_cast<float>(ts[3] * xn + ts[4] * yn + ts[5]);
    }
  }
  return make_op_result({1, h, w, 2}, std::move(out), {theta}, [theta, h, w](TensorImpl& self) {
    if (!theta.requires_grad()) return;
    auto gt = theta.impl()->grad_buf();
    double acc[6] = {0, 0, 0, 0, 0, 0};
    for (int y = 0; y < h; ++y) {
      const double yn = h > 1 ? 2.0 * y / (h - 1) - 1.0 : 0.0;
      for (int x = 0; x < w; ++x) {
        const double xn = w > 1 ? 2.0 * x / (w - 1) - 1.0 : 0.0;
        const std::size_t p = (static_cast<std::size_t>(y) * w + x) * 2;
        const double g0 = self.grad[p], g1 = self.grad[p + 1];
        acc[0] += g0 * xn;
        acc[1] += g0 * yn;
        acc[2] += g0;
        acc[3] += g1 * xn;
        acc[4] += g1 * yn;
        acc[5] += g1;
      }
    }
    for (int i = 0; i < 6; ++i) gt[i] += static_cast<float>(acc[i]);
  });
}

Tensor affine_inverse_points(const Tensor& theta, const Tensor& pts) {
  MSF_CHECK(theta.rank() == 1 && theta.dim(0) == 6,
            "affine_inverse_points: theta must be [6], got " << shape_str(theta.shape()));
  MSF_CHECK(pts.rank() == 2 && pts.dim(1) == 2,
            "affine_inverse_points: points must be [K,2], got " << shape_str(pts.shape()));
  MSF_CHECK(!pts.requires_grad(),
            "affine_inverse_points: points are a constant input and may not require grad");
  auto ts = theta.data();
  const double a = ts[0], b = ts[1], tx = ts[2];
  const double c = ts[3], d = ts[4], ty = ts[5];
  const double det = a * d - b * c;
  MSF_CHECK(std::abs(det) > 1e-8,
            "affine_inverse_points: linear part is singular (det = " << det << ")");
  const int K = pts.dim(0);
  auto ps = pts.data();
  std::vector<float> out(static_cast<std::size_t>(K) * 2);
  for (int i = 0; i < K; ++i) {
    const double r1 = ps[2 * i] - tx;
    const double r2 = ps[2 * i + 1] - ty;
    out[2 * i] = static_cast<float>((d * r1 - b * r2) / det);
    out[2 * i + 1] = static_cast<float>((-c * r1 + a * r2) / det);
  }
  return make_op_result({K, 2}, std::move(out), {theta, pts}, [theta, pts](TensorImpl& self) {
    if (!theta.requires_grad()) return;
    auto ts = theta.data();
    const double a = ts[0], b = ts[1], tx = ts[2];
    const double c = ts[3], d = ts[4], ty = ts[5];
    const double det = a * d - b * c;
    const int K = pts.dim(0);
    auto ps = pts.data();
    auto gt = theta.impl()->grad_buf();
    double acc[6] = {0, 0, 0, 0, 0, 0};
    for (int i = 0; i < K; ++i) {
      const double r1 = ps[2 * i] - tx;
      const double r2 = ps[2 * i + 1] - ty;
      const double q1 = self.data[2 * i];
      const double q2 = self.data[2 * i + 1];
      const double g1 = self.grad[2 * i];
      const double g2 = self.grad[2 * i + 1];
      acc[0] += g1 * (-q1 * d / det) + g2 * ((r2 - q2 * d) / det);
      acc[1] += g1 * ((-r2 + q1 * c) / det) + g2 * (q2 * c / det);
      acc[2] += g1 * (-d / det) + g2 * (c / det);
      acc[3] += g1 * (q1 * b / det) + g2 * ((-r1 + q2 * b) / det);
      acc[4] += g1 * ((r1 - q1 * a) / det) + g2 * (-q2 * a / det);
      acc[5] += g1 * (b / det) + g2 * (-a / det);
    }
    for (int i = 0; i < 6; ++i) gt[i] += static_cast<float>(acc[i]);
  });
}

Tensor add_flow_to_grid(const Tensor& grid, const Tensor& flow) {
  MSF_CHECK(grid.rank() == 4 && grid.dim(3) == 2,
            "add_flow_to_grid: grid must be [N,h,w,2], got " << shape_str(grid.shape()));
  MSF_CHECK(flow.rank() == 4 && flow.dim(1) == 2,
            "add_flow_to_grid: flow must be [N,2,h,w], got " << shape_str(flow.shape()));
  MSF_CHECK(grid.dim(0) == flow.dim(0) && grid.dim(1) == flow.dim(2) &&
                grid.dim(2) == flow.dim(3),
            "add_flow_to_grid: grid " << shape_str(grid.shape()) << " and flow "
                                      << shape_str(flow.shape()) << " disagree");
  const int N = grid.dim(0), h = grid.dim(1), w = grid.dim(2);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  auto gsd = grid.data();
  auto fs = flow.data();
  std::vector<float> out(gsd.size());
  for (int n = 0; n < N; ++n)
    for (std::size_t p = 0; p < plane; ++p)
      for (int k = 0; k < 2; ++k)
        out[(static_cast<std::size_t>(n) * plane + p) * 2 + k] =
            gsd[(static_cast<std::size_t>(n) * plane + p) * 2 + k] +
            fs[(static_cast<std::size_t>(n) * 2 + k) * plane + p];
  return make_op_result(grid.shape(), std::move(out), {grid, flow}, [grid, flow](TensorImpl& self) {
    const int N = grid.dim(0), h = grid.dim(1), w = grid.dim(2);
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    if (grid.requires_grad()) {
      auto gg = grid.impl()->grad_buf();
      for (std::size_t i = 0; i < gg.size(); ++i) gg[i] += self.grad[i];
    }
    if (flow.requires_grad()) {
      auto gf = flow.impl()->grad_buf();
      for (int n = 0; n < N; ++n)
        for (std::size_t p = 0; p < plane; ++p)
          for (int k = 0; k < 2; ++k)
            gf[(static_cast<std::size_t>(n) * 2 + k) * plane + p] +=
                self.grad[(static_cast<std::size_t>(n) * plane + p) * 2 + k];
    }
  });
}

}  // namespace msf::ops
