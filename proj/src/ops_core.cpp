#include <algorithm>
#include <cmath>

#include "msflow/common.hpp"
#include "msflow/ops.hpp"

namespace msf::ops {

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  MSF_CHECK(a.shape() == b.shape(), op << ": shape mismatch " << shape_str(a.shape())
                                       << " vs " << shape_str(b.shape()));
}

// Elementwise op with per-element backward factors computed lazily.
template <class Fwd, class Bwd>
Tensor unary_elementwise(const Tensor& x, Fwd fwd, Bwd bwd_factor) {
  auto xs = x.data();
  std::vector<float> out(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) out[i] = fwd(xs[i]);
  return make_op_result(
      x.shape(), std::move(out), {x}, [x, bwd_factor](TensorImpl& self) {
        if (!x.requires_grad()) return;
        auto gx = x.impl()->grad_buf();
        auto xs = x.data();
        for (std::size_t i = 0; i < xs.size(); ++i)
          gx[i] += static_cast<float>(static_cast<double>(self.grad[i]) * bwd_factor(xs[i], self.data[i]));
      });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  auto as = a.data(), bs = b.data();
  std::vector<float> out(as.size());
  for (std::size_t i = 0; i < as.size(); ++i) out[i] = as[i] + bs[i];
  return make_op_result(a.shape(), std::move(out), {a, b}, [a, b](TensorImpl& self) {
    for (const Tensor* t : {&a, &b}) {
      if (!t->requires_grad()) continue;
      auto g = t->impl()->grad_buf();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  auto as = a.data(), bs = b.data();
  std::vector<float> out(as.size());
  for (std::size_t i = 0; i < as.size(); ++i) out[i] = as[i] - bs[i];
  return make_op_result(a.shape(), std::move(out), {a, b}, [a, b](TensorImpl& self) {
    if (a.requires_grad()) {
      auto g = a.impl()->grad_buf();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (b.requires_grad()) {
      auto g = b.impl()->grad_buf();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  auto as = a.data(), bs = b.data();
  std::vector<float> out(as.size());
  for (std::size_t i = 0; i < as.size(); ++i) out[i] = as[i] * bs[i];
  return make_op_result(a.shape(), std::move(out), {a, b}, [a, b](TensorImpl& self) {
    auto as = a.data(), bs = b.data();
    if (a.requires_grad()) {
      auto g = a.impl()->grad_buf();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bs[i];
    }
    if (b.requires_grad()) {
      auto g = b.impl()->grad_buf();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * as[i];
    }
  });
}

Tensor add_scalar(const Tensor& a, double c) {
  return unary_elementwise(
      a, [c](float v) { return static_cast<float>(v + c); },
      [](float, float) { return 1.0; });
}

Tensor mul_scalar(const Tensor& a, double c) {
  return unary_elementwise(
      a, [c](float v) { return static_cast<float>(v * c); },
      [c](float, float) { return c; });
}

Tensor square(const Tensor& a) {
  return unary_elementwise(
      a, [](float v) { return v * v; },
      [](float v, float) { return 2.0 * static_cast<double>(v); });
}

Tensor sqrt_eps(const Tensor& a, double eps) {
  for (float v : a.data())
    MSF_CHECK(v + eps > 0.0, "sqrt_eps: value " << v << " + eps " << eps << " is not positive");
  return unary_elementwise(
      a, [eps](float v) { return static_cast<float>(std::sqrt(v + eps)); },
      [](float, float y) { return 0.5 / static_cast<double>(y); });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  MSF_CHECK(lo <= hi, "clamp: lo (" << lo << ") > hi (" << hi << ")");
  return unary_elementwise(
      a,
      [lo, hi](float v) {
        return static_cast<float>(std::min(hi, std::max(lo, static_cast<double>(v))));
      },
      [lo, hi](float v, float) { return (v > lo && v < hi) ? 1.0 : 0.0; });
}

Tensor log(const Tensor& a) {
  for (float v : a.data()) MSF_CHECK(v > 0.f, "log: input value " << v << " is not positive");
  return unary_elementwise(
      a, [](float v) { return std::log(v); },
      [](float v, float) { return 1.0 / static_cast<double>(v); });
}

Tensor relu(const Tensor& x) {
  return unary_elementwise(
      x, [](float v) { return v > 0.f ? v : 0.f; },
      [](float v, float) { return v > 0.f ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
  return unary_elementwise(
      x,
      [](float v) { return static_cast<float>(1.0 / (1.0 + std::exp(-static_cast<double>(v)))); },
      [](float, float y) { return static_cast<double>(y) * (1.0 - static_cast<double>(y)); });
}

Tensor softmax(const Tensor& x) {
  MSF_CHECK(x.rank() == 1, "softmax: expected rank 1, got shape " << shape_str(x.shape()));
  MSF_CHECK(x.numel() > 0, "softmax: empty input");
  auto xs = x.data();
  double m = xs[0];
  for (float v : xs) m = std::max(m, static_cast<double>(v));
  std::vector<double> e(xs.size());
  double s = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    e[i] = std::exp(static_cast<double>(xs[i]) - m);
    s += e[i];
  }
  std::vector<float> out(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) out[i] = static_cast<float>(e[i] / s);
  return make_op_result(x.shape(), std::move(out), {x}, [x](TensorImpl& self) {
    if (!x.requires_grad()) return;
    auto gx = x.impl()->grad_buf();
    double dot = 0.0;
    for (std::size_t i = 0; i < self.data.size(); ++i)
      dot += static_cast<double>(self.grad[i]) * self.data[i];
    for (std::size_t i = 0; i < self.data.size(); ++i)
      gx[i] += static_cast<float>(self.data[i] * (static_cast<double>(self.grad[i]) - dot));
  });
}

Tensor scale_by_index(const Tensor& x, const Tensor& w, int index) {
  MSF_CHECK(w.rank() == 1, "scale_by_index: weights must be rank 1, got "
                               << shape_str(w.shape()));
  MSF_CHECK(index >= 0 && index < w.dim(0),
            "scale_by_index: index " << index << " out of range for " << w.dim(0)
                                     << " weights");
  const float wv = w.data()[index];
  auto xs = x.data();
  std::vector<float> out(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) out[i] = xs[i] * wv;
  return make_op_result(x.shape(), std::move(out), {x, w}, [x, w, index](TensorImpl& self) {
    const float wv = w.data()[index];
    auto xs = x.data();
    if (x.requires_grad()) {
      auto gx = x.impl()->grad_buf();
      for (std::size_t i = 0; i < xs.size(); ++i) gx[i] += self.grad[i] * wv;
    }
    if (w.requires_grad()) {
      auto gw = w.impl()->grad_buf();
      double acc = 0.0;
      for (std::size_t i = 0; i < xs.size(); ++i)
        acc += static_cast<double>(self.grad[i]) * xs[i];
      gw[index] += static_cast<float>(acc);
    }
  });
}

Tensor sum_all(const Tensor& a) {
  double acc = 0.0;
  for (float v : a.data()) acc += v;
  return make_op_result({1}, {static_cast<float>(acc)}, {a}, [a](TensorImpl& self) {
    if (!a.requires_grad()) return;
    auto g = a.impl()->grad_buf();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0];
  });
}

Tensor mean_all(const Tensor& a) {
  MSF_CHECK(a.numel() > 0, "mean_all: empty input");
  double acc = 0.0;
  for (float v : a.data()) acc += v;
  const double inv = 1.0 / static_cast<double>(a.numel());
  return make_op_result({1}, {static_cast<float>(acc * inv)}, {a}, [a, inv](TensorImpl& self) {
    if (!a.requires_grad()) return;
    auto g = a.impl()->grad_buf();
    for (std::size_t i = 0; i < g.size(); ++i)
      g[i] += static_cast<float>(static_cast<double>(self.grad[0]) * inv);
  });
}

Tensor sum_channels(const Tensor& x) {
  MSF_CHECK(x.rank() == 4, "sum_channels: expected [N,C,H,W], got " << shape_str(x.shape()));
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  auto xs = x.data();
  std::vector<float> out(static_cast<std::size_t>(N) * H * W);
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  for (int n = 0; n < N; ++n)
    for (std::size_t p = 0; p < plane; ++p) {
      double acc = 0.0;
      for (int c = 0; c < C; ++c) acc += xs[(static_cast<std::size_t>(n) * C + c) * plane + p];
      out[n * plane + p] = static_cast<float>(acc);
    }
  return make_op_result({N, 1, H, W}, std::move(out), {x}, [x](TensorImpl& self) {
    if (!x.requires_grad()) return;
    const int N = x.dim(0), C = x.dim(1);
    const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
    auto gx = x.impl()->grad_buf();
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c)
        for (std::size_t p = 0; p < plane; ++p)
          gx[(static_cast<std::size_t>(n) * C + c) * plane + p] += self.grad[n * plane + p];
  });
}

Tensor channel_l2_norm(const Tensor& x, double eps) {
  MSF_CHECK(x.rank() == 4, "channel_l2_norm: expected [N,C,H,W], got " << shape_str(x.shape()));
  MSF_CHECK(eps > 0.0, "channel_l2_norm: eps must be positive, got " << eps);
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  auto xs = x.data();
  std::vector<float> out(static_cast<std::size_t>(N) * H * W);
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  for (int n = 0; n < N; ++n)
    for (std::size_t p = 0; p < plane; ++p) {
      double acc = eps;
      for (int c = 0; c < C; ++c) {
        const double v = xs[(static_cast<std::size_t>(n) * C + c) * plane + p];
        acc += v * v;
      }
      out[n * plane + p] = static_cast<float>(std::sqrt(acc));
    }
  return make_op_result({N, 1, H, W}, std::move(out), {x}, [x](TensorImpl& self) {
    if (!x.requires_grad()) return;
    const int N = x.dim(0), C = x.dim(1);
    const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
    auto gx = x.impl()->grad_buf();
    auto xs = x.data();
    for (int n = 0; n < N; ++n)
      for (std::size_t p = 0; p < plane; ++p) {
        const double scale = static_cast<double>(self.grad[n * plane + p]) /
                             static_cast<double>(self.data[n * plane + p]);
        for (int c = 0; c < C; ++c) {
          const std::size_t i = (static_cast<std::size_t>(n) * C + c) * plane + p;
          gx[i] += static_cast<float>(scale * xs[i]);
        }
      }
  });
}

Tensor row_l2_norm(const Tensor& x, double eps) {
  MSF_CHECK(x.rank() == 2, "row_l2_norm: expected [m,n], got " << shape_str(x.shape()));
  MSF_CHECK(eps > 0.0, "row_l2_norm: eps must be positive, got " << eps);
  const int m = x.dim(0), n = x.dim(1);
  auto xs = x.data();
  std::vector<float> out(m);
  for (int i = 0; i < m; ++i) {
    double acc = eps;
    for (int j = 0; j < n; ++j) {
      const double v = xs[static_cast<std::size_t>(i) * n + j];
      acc += v * v;
    }
    out[i] = static_cast<float>(std::sqrt(acc));
  }
  return make_op_result({m}, std::move(out), {x}, [x](TensorImpl& self) {
    if (!x.requires_grad()) return;
    const int m = x.dim(0), n = x.dim(1);
    auto gx = x.impl()->grad_buf();
    auto xs = x.data();
    for (int i = 0; i < m; ++i) {
      const double scale =
          static_cast<double>(self.grad[i]) / static_cast<double>(self.data[i]);
      for (int j = 0; j < n; ++j) {
        const std::size_t k = static_cast<std::size_t>(i) * n + j;
        gx[k] += static_cast<float>(scale * xs[k]);
      }
    }
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  MSF_CHECK(shape_numel(shape) == x.numel(),
            "reshape: " << shape_str(x.shape()) << " has " << x.numel()
                        << " elements, target " << shape_str(shape) << " has "
                        << shape_numel(shape));
  std::vector<float> out(x.data().begin(), x.data().end());
  return make_op_result(std::move(shape), std::move(out), {x}, [x](TensorImpl& self) {
    if (!x.requires_grad()) return;
    auto gx = x.impl()->grad_buf();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
  });
}

Tensor transpose2d(const Tensor& x) {
  MSF_CHECK(x.rank() == 2, "transpose2d: expected [m,n], got " << shape_str(x.shape()));
  const int m = x.dim(0), n = x.dim(1);
  auto xs = x.data();
  std::vector<float> out(xs.size());
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out[static_cast<std::size_t>(j) * m + i] = xs[static_cast<std::size_t>(i) * n + j];
  return make_op_result({n, m}, std::move(out), {x}, [x](TensorImpl& self) {
    if (!x.requires_grad()) return;
    const int m = x.dim(0), n = x.dim(1);
    auto gx = x.impl()->grad_buf();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j)
        gx[static_cast<std::size_t>(i) * n + j] += self.grad[static_cast<std::size_t>(j) * m + i];
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  MSF_CHECK(x.rank() == 2, "linear: input must be [N,di], got " << shape_str(x.shape()));
  MSF_CHECK(w.rank() == 2, "linear: weight must be [do,di], got " << shape_str(w.shape()));
  MSF_CHECK(b.rank() == 1, "linear: bias must be [do], got " << shape_str(b.shape()));
  MSF_CHECK(x.dim(1) == w.dim(1), "linear: input features (" << x.dim(1)
                                      << ") != weight features (" << w.dim(1) << ")");
  MSF_CHECK(w.dim(0) == b.dim(0), "linear: weight rows (" << w.dim(0)
                                      << ") != bias size (" << b.dim(0) << ")");
  const int N = x.dim(0), di = x.dim(1), dout = w.dim(0);
  auto xs = x.data(), ws = w.data(), bs = b.data();
  std::vector<float> out(static_cast<std::size_t>(N) * dout);
  parallel_for(N, [&](std::int64_t n) {
    for (int o = 0; o < dout; ++o) {
      double acc = bs[o];
      for (int k = 0; k < di; ++k)
        acc += static_cast<double>(xs[n * di + k]) * ws[static_cast<std::size_t>(o) * di + k];
      out[n * dout + o] = static_cast<float>(acc);
    }
  });
  return make_op_result({N, dout}, std::move(out), {x, w, b}, [x, w, b](TensorImpl& self) {
    const int N = x.dim(0), di = x.dim(1), dout = w.dim(0);
    auto xs = x.data(), ws = w.data();
    if (x.requires_grad()) {
      auto gx = x.impl()->grad_buf();
      for (int n = 0; n < N; ++n)
        for (int k = 0; k < di; ++k) {
          double acc = 0.0;
          for (int o = 0; o < dout; ++o)
            acc += static_cast<double>(self.grad[static_cast<std::size_t>(n) * dout + o]) *
                   ws[static_cast<std::size_t>(o) * di + k];
          gx[static_cast<std::size_t>(n) * di + k] += static_cast<float>(acc);
        }
    }
    if (w.requires_grad()) {
      auto gw = w.impl()->grad_buf();
      for (int o = 0; o < dout; ++o)
        for (int k = 0; k < di; ++k) {
          double acc = 0.0;
          for (int n = 0; n < N; ++n)
            acc += static_cast<double>(self.grad[static_cast<std::size_t>(n) * dout + o]) *
                   xs[static_cast<std::size_t>(n) * di + k];
          gw[static_cast<std::size_t>(o) * di + k] += static_cast<float>(acc);
        }
    }
    if (b.requires_grad()) {
      auto gb = b.impl()->grad_buf();
      for (int o = 0; o < dout; ++o) {
        double acc = 0.0;
        for (int n = 0; n < N; ++n)
          acc += self.grad[static_cast<std::size_t>(n) * dout + o];
        gb[o] += static_cast<float>(acc);
      }
    }
  });
}

Tensor l2_normalize_sites(const Tensor& x, double eps) {
  MSF_CHECK(x.rank() == 4, "l2_normalize_sites: expected [N,C,H,W], got "
                               << shape_str(x.shape()));
  MSF_CHECK(eps > 0.0, "l2_normalize_sites: eps must be positive, got " << eps);
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  auto xs = x.data();
  std::vector<float> out(xs.size());
  for (int n = 0; n < N; ++n)
    for (std::size_t p = 0; p < plane; ++p) {
      double ss = eps;
      for (int c = 0; c < C; ++c) {
        const double v = xs[(static_cast<std::size_t>(n) * C + c) * plane + p];
        ss += v * v;
      }
      const double inv = 1.0 / std::sqrt(ss);
      for (int c = 0; c < C; ++c) {
        const std::size_t i = (static_cast<std::size_t>(n) * C + c) * plane + p;
        out[i] = static_cast<float>(xs[i] * inv);
      }
    }
  return make_op_result(x.shape(), std::move(out), {x}, [x, eps](TensorImpl& self) {
    if (!x.requires_grad()) return;
    const int N = x.dim(0), C = x.dim(1);
    const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
    auto gx = x.impl()->grad_buf();
    auto xs = x.data();
    for (int n = 0; n < N; ++n)
      for (std::size_t p = 0; p < plane; ++p) {
        double ss = eps, gdotx = 0.0;
        for (int c = 0; c < C; ++c) {
          const std::size_t i = (static_cast<std::size_t>(n) * C + c) * plane + p;
          ss += static_cast<double>(xs[i]) * xs[i];
          gdotx += static_cast<double>(self.grad[i]) * xs[i];
        }
        const double inv = 1.0 / std::sqrt(ss);
        const double inv3 = inv * inv * inv;
        for (int c = 0; c < C; ++c) {
          const std::size_t i = (static_cast<std::size_t>(n) * C + c) * plane + p;
          gx[i] += static_cast<float>(self.grad[i] * inv - gdotx * xs[i] * inv3);
        }
      }
  });
}

Tensor l2_pairwise_distance(const Tensor& a, const Tensor& b) {
  MSF_CHECK(a.rank() == 2 && b.rank() == 2,
            "l2_pairwise_distance: expected [m,d] and [n,d], got "
                << shape_str(a.shape()) << " and " << shape_str(b.shape()));
  MSF_CHECK(a.dim(1) == b.dim(1), "l2_pairwise_distance: feature dims differ ("
                                      << a.dim(1) << " vs " << b.dim(1) << ")");
  const int m = a.dim(0), n = b.dim(0), d = a.dim(1);
  constexpr double kEps = 1e-12;
  auto as = a.data(), bs = b.data();
  std::vector<float> out(static_cast<std::size_t>(m) * n);
  parallel_for(m, [&](std::int64_t i) {
    for (int j = 0; j < n; ++j) {
      double acc = kEps;
      for (int k = 0; k < d; ++k) {
        const double diff = static_cast<double>(as[i * d + k]) -
                            static_cast<double>(bs[static_cast<std::size_t>(j) * d + k]);
        acc += diff * diff;
      }
      out[i * n + j] = static_cast<float>(std::sqrt(acc));
    }
  });
  return make_op_result({m, n}, std::move(out), {a, b}, [a, b](TensorImpl& self) {
    const int m = a.dim(0), n = b.dim(0), d = a.dim(1);
    auto as = a.data(), bs = b.data();
    if (a.requires_grad()) {
      auto ga = a.impl()->grad_buf();
      for (int i = 0; i < m; ++i)
        for (int k = 0; k < d; ++k) {
          double acc = 0.0;
          for (int j = 0; j < n; ++j) {
            const std::size_t ij = static_cast<std::size_t>(i) * n + j;
            const double diff = static_cast<double>(as[static_cast<std::size_t>(i) * d + k]) -
                                static_cast<double>(bs[static_cast<std::size_t>(j) * d + k]);
            acc += static_cast<double>(self.grad[ij]) * diff / self.data[ij];
          }
          ga[static_cast<std::size_t>(i) * d + k] += static_cast<float>(acc);
        }
    }
    if (b.requires_grad()) {
      auto gb = b.impl()->grad_buf();
      for (int j = 0; j < n; ++j)
        for (int k = 0; k < d; ++k) {
          double acc = 0.0;
          for (int i = 0; i < m; ++i) {
            const std::size_t ij = static_cast<std::size_t>(i) * n + j;
            const double diff = static_cast<double>(as[static_cast<std::size_t>(i) * d + k]) -
                                static_cast<double>(bs[static_cast<std::size_t>(j) * d + k]);
            acc -= static_cast<double>(self.grad[ij]) * diff / self.data[ij];
          }
          gb[static_cast<std::size_t>(j) * d + k] += static_cast<float>(acc);
        }
    }
  });
}

Tensor colwise_affine(const Tensor& x, double sx, double sy, double bx, double by) {
  MSF_CHECK(x.rank() == 2 && x.dim(1) == 2,
            "colwise_affine: expected [K,2] points, got " << shape_str(x.shape()));
  const int k = x.dim(0);
  auto xs = x.data();
  std::vector<float> out(xs.size());
  for (int i = 0; i < k; ++i) {
    out[2 * i] = static_cast<float>(xs[2 * i] * sx + bx);
    out[2 * i + 1] = static_cast<float>(xs[2 * i + 1] * sy + by);
  }
  return make_op_result(x.shape(), std::move(out), {x}, [x, sx, sy](TensorImpl& self) {
    if (!x.requires_grad()) return;
    const int k = x.dim(0);
    auto gx = x.impl()->grad_buf();
    for (int i = 0; i < k; ++i) {
      gx[2 * i] += static_cast<float>(self.grad[2 * i] * sx);
      gx[2 * i + 1] += static_cast<float>(self.grad[2 * i + 1] * sy);
    }
  });
}

}  // namespace msf::ops
