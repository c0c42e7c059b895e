#include "msflow/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>

#include <opencv2/imgcodecs.hpp>

#include "msflow/common.hpp"

namespace msf::img {

namespace {

void check_image(const Tensor& image, const char* who) {
  MSF_CHECK(image.defined() && image.rank() == 3 && image.dim(0) == 3,
            who << ": expected a [3,H,W] image, got "
                << (image.defined() ? shape_str(image.shape()) : "undefined"));
}

// Edge-replicated read.
float at_clamped(std::span<const float> plane, int h, int w, int y, int x) {
  y = std::clamp(y, 0, h - 1);
  x = std::clamp(x, 0, w - 1);
  return plane[static_cast<std::size_t>(y) * w + x];
}

float bilinear_clamped(std::span<const float> plane, int h, int w, double sy,
                       double sx) {
  const int y0 = static_cast<int>(std::floor(sy));
  const int x0 = static_cast<int>(std::floor(sx));
  const double fy = sy - y0;
  const double fx = sx - x0;
  const double v00 = at_clamped(plane, h, w, y0, x0);
  const double v01 = at_clamped(plane, h, w, y0, x0 + 1);
  const double v10 = at_clamped(plane, h, w, y0 + 1, x0);
  const double v11 = at_clamped(plane, h, w, y0 + 1, x0 + 1);
  const double top = v00 + fx * (v01 - v00);
  const double bot = v10 + fx * (v11 - v10);
  return static_cast<float>(top + fy * (bot - top));
}

// Shared warp core: output(y,x) = input at map(y,x).
template <typename MapFn>
Tensor warp_image(const Tensor& image, int oh, int ow, MapFn&& map) {
  const int h = image.dim(1);
  const int w = image.dim(2);
  std::vector<float> out(static_cast<std::size_t>(3) * oh * ow);
  for (int c = 0; c < 3; ++c) {
    auto plane = image.data().subspan(static_cast<std::size_t>(c) * h * w,
                                      static_cast<std::size_t>(h) * w);
    float* dst = out.data() + static_cast<std::size_t>(c) * oh * ow;
    for (int y = 0; y < oh; ++y) {
      for (int x = 0; x < ow; ++x) {
        auto [sy, sx] = map(y, x);
        dst[static_cast<std::size_t>(y) * ow + x] =
            bilinear_clamped(plane, h, w, sy, sx);
      }
    }
  }
  return Tensor::from_data({3, oh, ow}, std::move(out));
}

}  // namespace

Tensor load_image(const std::filesystem::path& path) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  MSF_CHECK(!bgr.empty(), "load_image: cannot read " << path.string());
  const int h = bgr.rows;
  const int w = bgr.cols;
  std::vector<float> data(static_cast<std::size_t>(3) * h * w);
  for (int y = 0; y < h; ++y) {
    const auto* row = bgr.ptr<cv::Vec3b>(y);
    for (int x = 0; x < w; ++x) {
      // BGR on disk, RGB planes in the tensor.
      for (int c = 0; c < 3; ++c) {
        data[static_cast<std::size_t>(c) * h * w + static_cast<std::size_t>(y) * w + x] =
            static_cast<float>(row[x][2 - c]) / 255.0f;
      }
    }
  }
  return Tensor::from_data({3, h, w}, std::move(data));
}

void save_image(const std::filesystem::path& path, const Tensor& image) {
  check_image(image, "save_image");
  const int h = image.dim(1);
  const int w = image.dim(2);
  auto src = image.data();
  cv::Mat bgr(h, w, CV_8UC3);
  for (int y = 0; y < h; ++y) {
    auto* row = bgr.ptr<cv::Vec3b>(y);
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) {
        const float v = src[static_cast<std::size_t>(c) * h * w +
                            static_cast<std::size_t>(y) * w + x];
        const float clamped = std::clamp(v, 0.0f, 1.0f);
        row[x][2 - c] = static_cast<std::uint8_t>(std::lround(clamped * 255.0f));
      }
    }
  }
  const bool ok = cv::imwrite(path.string(), bgr);
  MSF_CHECK(ok, "save_image: cannot write " << path.string());
}

Tensor quantize_unit(const Tensor& image) {
  check_image(image, "quantize_unit");
  std::vector<float> out(image.data().begin(), image.data().end());
  for (float& v : out) {
    const float clamped = std::clamp(v, 0.0f, 1.0f);
    v = static_cast<float>(std::lround(clamped * 255.0f)) / 255.0f;
  }
  return Tensor::from_data(image.shape(), std::move(out));
}

Tensor resize(const Tensor& image, int oh, int ow) {
  check_image(image, "resize");
  MSF_CHECK(oh >= 1 && ow >= 1, "resize: target " << oh << "x" << ow);
  const int h = image.dim(1);
  const int w = image.dim(2);
  if (oh == h && ow == w) return image.clone();
  const double sy = oh > 1 ? static_cast<double>(h - 1) / (oh - 1) : 0.0;
  const double sx = ow > 1 ? static_cast<double>(w - 1) / (ow - 1) : 0.0;
  return warp_image(image, oh, ow, [&](int y, int x) {
    return std::pair<double, double>(y * sy, x * sx);
  });
}

Tensor hflip(const Tensor& image) {
  check_image(image, "hflip");
  const int h = image.dim(1);
  const int w = image.dim(2);
  auto src = image.data();
  std::vector<float> out(src.size());
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < h; ++y) {
      const std::size_t base =
          static_cast<std::size_t>(c) * h * w + static_cast<std::size_t>(y) * w;
      for (int x = 0; x < w; ++x) out[base + x] = src[base + (w - 1 - x)];
    }
  }
  return Tensor::from_data(image.shape(), std::move(out));
}

Tensor pad_replicate(const Tensor& image, int top, int bottom, int left, int right) {
  check_image(image, "pad_replicate");
  MSF_CHECK(top >= 0 && bottom >= 0 && left >= 0 && right >= 0,
            "pad_replicate: negative padding");
  const int h = image.dim(1);
  const int w = image.dim(2);
  const int oh = h + top + bottom;
  const int ow = w + left + right;
  std::vector<float> out(static_cast<std::size_t>(3) * oh * ow);
  for (int c = 0; c < 3; ++c) {
    auto plane = image.data().subspan(static_cast<std::size_t>(c) * h * w,
                                      static_cast<std::size_t>(h) * w);
    float* dst = out.data() + static_cast<std::size_t>(c) * oh * ow;
    for (int y = 0; y < oh; ++y) {
      for (int x = 0; x < ow; ++x) {
        dst[static_cast<std::size_t>(y) * ow + x] =
            at_clamped(plane, h, w, y - top, x - left);
      }
    }
  }
  return Tensor::from_data({3, oh, ow}, std::move(out));
}

Tensor crop(const Tensor& image, int y0, int x0, int h, int w) {
  check_image(image, "crop");
  const int ih = image.dim(1);
  const int iw = image.dim(2);
  MSF_CHECK(h >= 1 && w >= 1 && y0 >= 0 && x0 >= 0 && y0 + h <= ih && x0 + w <= iw,
            "crop: window " << h << "x" << w << " at (" << x0 << "," << y0
                            << ") outside " << ih << "x" << iw);
  std::vector<float> out(static_cast<std::size_t>(3) * h * w);
  auto src = image.data();
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < h; ++y) {
      const float* srow = src.data() + static_cast<std::size_t>(c) * ih * iw +
                          static_cast<std::size_t>(y0 + y) * iw + x0;
      std::copy_n(srow, w, out.data() + static_cast<std::size_t>(c) * h * w +
                               static_cast<std::size_t>(y) * w);
    }
  }
  return Tensor::from_data({3, h, w}, std::move(out));
}

Tensor rotate(const Tensor& image, double degrees) {
  check_image(image, "rotate");
  const int h = image.dim(1);
  const int w = image.dim(2);
  const double rad = degrees * std::numbers::pi / 180.0;
  const double cs = std::cos(rad);
  const double sn = std::sin(rad);
  const double cy = (h - 1) / 2.0;
  const double cx = (w - 1) / 2.0;
  // Inverse map: rotate output coords by -angle about the center.
  return warp_image(image, h, w, [&](int y, int x) {
    const double ry = y - cy;
    const double rx = x - cx;
    return std::pair<double, double>(cy + sn * rx + cs * ry, cx + cs * rx - sn * ry);
  });
}

Tensor translate(const Tensor& image, double dx, double dy) {
  check_image(image, "translate");
  return warp_image(image, image.dim(1), image.dim(2), [&](int y, int x) {
    return std::pair<double, double>(y - dy, x - dx);
  });
}

double mean_pixel(const Tensor& image) {
  check_image(image, "mean_pixel");
  double acc = 0.0;
  for (float v : image.data()) acc += v;
  return acc / static_cast<double>(image.numel());
}

}  // namespace msf::img
