#pragma once

// Deterministic synthetic images, pairs, and on-disk datasets shared by the
// unit tests and the acceptance gate. Everything derives from the passed
// rng, so a fixed seed reproduces the exact same pixels.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "msflow/common.hpp"
#include "msflow/dataset.hpp"
#include "msflow/image.hpp"
#include "msflow/rng.hpp"
#include "msflow/tensor.hpp"

namespace testsup {

// Clamped bilinear read of one channel of a [3,H,W] tensor at a fractional
// pixel position. Matches the edge-replication convention of the image
// module's own transforms.
inline double sample_px(std::span<const float> plane, int h, int w, double x, double y) {
  x = std::clamp(x, 0.0, static_cast<double>(w - 1));
  y = std::clamp(y, 0.0, static_cast<double>(h - 1));
  const int x0 = std::min(static_cast<int>(std::floor(x)), w - 2 >= 0 ? w - 2 : 0);
  const int y0 = std::min(static_cast<int>(std::floor(y)), h - 2 >= 0 ? h - 2 : 0);
  const int x1 = std::min(x0 + 1, w - 1);
  const int y1 = std::min(y0 + 1, h - 1);
  const double fx = x - x0, fy = y - y0;
  const double v00 = plane[static_cast<std::size_t>(y0) * w + x0];
  const double v01 = plane[static_cast<std::size_t>(y0) * w + x1];
  const double v10 = plane[static_cast<std::size_t>(y1) * w + x0];
  const double v11 = plane[static_cast<std::size_t>(y1) * w + x1];
  return (1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11);
}

// Textured image: three smooth color ramps plus `blobs` gaussian bumps with
// random centers, radii and per-channel amplitudes. Values in [0,1],
// quantized to the 8-bit lattice so PNG round trips are bitwise.
inline msf::Tensor blob_image(msf::Rng& rng, int h, int w, int blobs = 12) {
  std::vector<float> px(static_cast<std::size_t>(3) * h * w);
  double ramp[3][3];
  for (auto& row : ramp)
    for (double& v : row) v = rng.uniform(-0.15, 0.15);
  struct Bump {
    double cx, cy, inv2s2, amp[3];
  };
  std::vector<Bump> bumps(static_cast<std::size_t>(std::max(blobs, 0)));
  for (Bump& b : bumps) {
    b.cx = rng.uniform(0.0, w - 1.0);
    b.cy = rng.uniform(0.0, h - 1.0);
    const double sigma = rng.uniform(0.04, 0.16) * std::max(h, w);
    b.inv2s2 = 1.0 / (2.0 * sigma * sigma);
    for (double& a : b.amp) a = rng.uniform(-0.45, 0.45);
  }
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double v = 0.5 + ramp[c][0] * (2.0 * x / std::max(w - 1, 1) - 1.0) +
                   ramp[c][1] * (2.0 * y / std::max(h - 1, 1) - 1.0) + ramp[c][2];
        for (const Bump& b : bumps) {
          const double d2 = (x - b.cx) * (x - b.cx) + (y - b.cy) * (y - b.cy);
          v += b.amp[c] * std::exp(-d2 * b.inv2s2);
        }
        px[(static_cast<std::size_t>(c) * h + y) * w + x] =
            static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
  return msf::img::quantize_unit(msf::Tensor::from_data({3, h, w}, std::move(px)));
}

// Per-pixel gaussian noise, clamped back to [0,1] and re-quantized.
inline msf::Tensor add_pixel_noise(msf::Rng& rng, const msf::Tensor& image, double sigma) {
  std::vector<float> px(image.data().begin(), image.data().end());
  for (float& v : px)
    v = static_cast<float>(std::clamp(static_cast<double>(v) + rng.normal(0.0, sigma), 0.0, 1.0));
  return msf::img::quantize_unit(msf::Tensor::from_data(image.shape(), std::move(px)));
}

// Low-frequency multiplicative brightness field (sinusoid grid), gain in
// [1-amount, 1+amount]. Perturbs appearance coherently over space.
inline msf::Tensor add_smooth_gain(msf::Rng& rng, const msf::Tensor& image, double amount) {
  const int h = image.dim(1), w = image.dim(2);
  const double fx = rng.uniform(0.5, 2.0), fy = rng.uniform(0.5, 2.0);
  const double px0 = rng.uniform(0.0, 6.28), py0 = rng.uniform(0.0, 6.28);
  std::vector<float> px(image.data().begin(), image.data().end());
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const double g = 1.0 + amount * 0.5 *
                                   (std::sin(6.28318 * fx * x / w + px0) +
                                    std::sin(6.28318 * fy * y / h + py0));
        auto& v = px[(static_cast<std::size_t>(c) * h + y) * w + x];
        v = static_cast<float>(std::clamp(static_cast<double>(v) * g, 0.0, 1.0));
      }
  return msf::img::quantize_unit(msf::Tensor::from_data(image.shape(), std::move(px)));
}

struct TranslatedPair {
  msf::Tensor a, b;
  double dx = 0, dy = 0;  // content of b = content of a moved by (+dx,+dy)
};

// Integer translation with magnitude in [min_shift, max_shift], random
// direction, replicated edges.
inline TranslatedPair translated_pair(msf::Rng& rng, int size, double min_shift,
                                      double max_shift, int blobs = 12) {
  TranslatedPair p;
  p.a = blob_image(rng, size, size, blobs);
  for (int tries = 0; tries < 1000; ++tries) {
    const double ang = rng.uniform(0.0, 6.283185307179586);
    const double mag = rng.uniform(min_shift, max_shift);
    const double dx = std::round(mag * std::cos(ang));
    const double dy = std::round(mag * std::sin(ang));
    const double got = std::sqrt(dx * dx + dy * dy);
    if (got < min_shift - 1e-9 || got > max_shift + 1e-9) continue;
    p.dx = dx;
    p.dy = dy;
    break;
  }
  p.b = msf::img::quantize_unit(msf::img::translate(p.a, p.dx, p.dy));
  return p;
}

// Ground-truth matches on a grid, step px apart, keeping only points whose
// endpoints both sit at least `margin` px inside their images.
inline std::vector<msf::data::Quad> translation_corrs(int w, int h, double dx, double dy,
                                                      int step, double margin) {
  std::vector<msf::data::Quad> out;
  for (double y = margin; y <= h - 1 - margin; y += step)
    for (double x = margin; x <= w - 1 - margin; x += step) {
      const double xt = x + dx, yt = y + dy;
      if (xt < margin || xt > w - 1 - margin || yt < margin || yt > h - 1 - margin) continue;
      out.push_back({x, y, xt, yt});
    }
  return out;
}

struct WarpedPair {
  msf::Tensor a, b;
  // Forward map T evaluated per source pixel: plane 0 holds target x, plane
  // 1 target y, both in pixels. Shape [2,h,w].
  msf::Tensor map;
  double max_residual = 0;  // largest |u| actually present, px
};

// Pair related by a known near-identity affine plus a smooth sinusoidal
// residual field with peak magnitude residual_px. b is rendered by
// inverting T per target pixel (fixed point iteration), so the stored map
// is the exact ground truth for b's content.
inline WarpedPair warped_pair(msf::Rng& rng, int size, double max_affine_px,
                              double residual_px, int blobs = 14) {
  WarpedPair wp;
  wp.a = blob_image(rng, size, size, blobs);
  const double c = (size - 1) / 2.0;
  // Rotation/scale chosen so the affine displacement at the far corner
  // stays at or below max_affine_px.
  const double corner = c * std::sqrt(2.0);
  const double budget = max_affine_px / std::max(corner, 1.0);
  const double ang = rng.uniform(-0.5, 0.5) * budget;
  const double sc = 1.0 + rng.uniform(-0.3, 0.3) * budget;
  const double tx = rng.uniform(-0.4, 0.4) * max_affine_px;
  const double ty = rng.uniform(-0.4, 0.4) * max_affine_px;
  const double ca = std::cos(ang) * sc, sa = std::sin(ang) * sc;

  struct Wave {
    double ax, ay, fx, fy, phase;
  };
  std::vector<Wave> waves(3);
  for (Wave& wv : waves) {
    wv.ax = rng.uniform(-1.0, 1.0);
    wv.ay = rng.uniform(-1.0, 1.0);
    wv.fx = rng.uniform(0.5, 1.5) * 6.283185307179586 / size;
    wv.fy = rng.uniform(0.5, 1.5) * 6.283185307179586 / size;
    wv.phase = rng.uniform(0.0, 6.28);
  }
  auto residual = [&](double x, double y) {
    double ux = 0, uy = 0;
    for (const Wave& wv : waves) {
      const double s = std::sin(wv.fx * x + wv.fy * y + wv.phase);
      ux += wv.ax * s;
      uy += wv.ay * s;
    }
    return std::pair<double, double>{ux, uy};
  };
  // Normalize the wave sum so its true peak magnitude equals residual_px.
  double peak = 1e-12;
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      auto [ux, uy] = residual(x, y);
      peak = std::max(peak, std::sqrt(ux * ux + uy * uy));
    }
  const double rscale = residual_px / peak;
  wp.max_residual = residual_px;

  auto fwd = [&](double x, double y) {
    auto [ux, uy] = residual(x, y);
    const double xr = x - c, yr = y - c;
    return std::pair<double, double>{ca * xr - sa * yr + c + tx + ux * rscale,
                                     sa * xr + ca * yr + c + ty + uy * rscale};
  };

  std::vector<float> mp(static_cast<std::size_t>(2) * size * size);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      auto [xt, yt] = fwd(x, y);
      mp[static_cast<std::size_t>(y) * size + x] = static_cast<float>(xt);
      mp[static_cast<std::size_t>(size) * size + static_cast<std::size_t>(y) * size + x] =
          static_cast<float>(yt);
    }
  wp.map = msf::Tensor::from_data({2, size, size}, std::move(mp));

  std::vector<float> bpx(static_cast<std::size_t>(3) * size * size);
  auto plane = [&](int ch) {
    return wp.a.data().subspan(static_cast<std::size_t>(ch) * size * size,
                               static_cast<std::size_t>(size) * size);
  };
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      // p = T^{-1}(q) by fixed point: T is a small perturbation of identity.
      double px = x, py = y;
      for (int it = 0; it < 25; ++it) {
        auto [fx2, fy2] = fwd(px, py);
        px += x - fx2;
        py += y - fy2;
      }
      for (int ch = 0; ch < 3; ++ch)
        bpx[(static_cast<std::size_t>(ch) * size + y) * size + x] =
            static_cast<float>(sample_px(plane(ch), size, size, px, py));
    }
  wp.b = msf::img::quantize_unit(msf::Tensor::from_data({3, size, size}, std::move(bpx)));
  return wp;
}

struct BlobPair {
  msf::Tensor a, b;
  msf::Tensor mask_a, mask_b;          // [h,w] 0/1 true foreground disks
  std::vector<msf::data::Quad> corrs;  // endpoints strictly inside both disks
  double cx_a = 0, cy_a = 0, cx_b = 0, cy_b = 0, radius = 0;
};

// Foreground disk of a fixed bright appearance over independently textured
// backgrounds, shifted between the two images. Matches are a grid confined
// to the disk interior with `corr_margin` px of clearance from its rim.
inline BlobPair blob_pair(msf::Rng& rng, int size, double radius, int corr_step,
                          double corr_margin) {
  BlobPair bp;
  bp.radius = radius;
  const double lo = radius + 2.0, hi = size - 1 - radius - 2.0;
  bp.cx_a = std::round(rng.uniform(lo, hi));
  bp.cy_a = std::round(rng.uniform(lo, hi));
  bp.cx_b = std::round(rng.uniform(lo, hi));
  bp.cy_b = std::round(rng.uniform(lo, hi));

  auto render = [&](double cx, double cy, msf::Tensor& img, msf::Tensor& mask) {
    msf::Tensor bg = blob_image(rng, size, size, 10);
    std::vector<float> px(bg.data().begin(), bg.data().end());
    std::vector<float> m(static_cast<std::size_t>(size) * size, 0.0f);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        const double d = std::sqrt((x - cx) * (x - cx) + (y - cy) * (y - cy));
        if (d > radius) continue;
        m[static_cast<std::size_t>(y) * size + x] = 1.0f;
        // Bright warm disk with a soft radial shade; dim the background so
        // the foreground is the brightest structure in every image.
        const double shade = 1.0 - 0.25 * d / radius;
        const double fg[3] = {0.95 * shade, 0.55 * shade, 0.15 * shade};
        for (int c = 0; c < 3; ++c)
          px[(static_cast<std::size_t>(c) * size + y) * size + x] = static_cast<float>(fg[c]);
      }
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
          auto& v = px[(static_cast<std::size_t>(c) * size + y) * size + x];
          if (m[static_cast<std::size_t>(y) * size + x] == 0.0f) v *= 0.55f;
        }
    img = msf::img::quantize_unit(msf::Tensor::from_data({3, size, size}, std::move(px)));
    mask = msf::Tensor::from_data({size, size}, std::move(m));
  };
  render(bp.cx_a, bp.cy_a, bp.a, bp.mask_a);
  render(bp.cx_b, bp.cy_b, bp.b, bp.mask_b);

  const double keep = radius - corr_margin;
  for (double yy = -keep; yy <= keep; yy += corr_step)
    for (double xx = -keep; xx <= keep; xx += corr_step) {
      if (std::sqrt(xx * xx + yy * yy) > keep) continue;
      bp.corrs.push_back({bp.cx_a + xx, bp.cy_a + yy, bp.cx_b + xx, bp.cy_b + yy});
    }
  return bp;
}

// Fresh scratch directory under the system temp dir; wiped if it already
// exists so repeat runs start clean.
inline std::filesystem::path scratch_dir(const std::string& tag) {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "msflow-tests" / tag;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// Writes images/<id>.png plus classes.json and returns the loaded dataset.
inline msf::data::Dataset write_dataset(
    const std::filesystem::path& root,
    const std::vector<std::pair<std::string, msf::Tensor>>& images,
    const std::map<std::string, std::string>& classes) {
  namespace fs = std::filesystem;
  fs::create_directories(root / "images");
  for (const auto& [id, img] : images) msf::img::save_image(root / "images" / (id + ".png"), img);
  msf::data::save_classes(root / "classes.json", classes);
  return msf::data::load_dataset(root);
}

}  // namespace testsup
