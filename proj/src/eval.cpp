#include "msflow/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "msflow/common.hpp"
#include "msflow/encoder.hpp"
#include "msflow/image.hpp"
#include "msflow/ops.hpp"

namespace msf::eval {

namespace {

double mask_area(const Tensor& mask) {
  double area = 0.0;
  for (float v : mask.data()) area += v != 0.0f ? 1.0 : 0.0;
  return area;
}

double binary_iou(const Tensor& a, const Tensor& b) {
  MSF_CHECK(a.shape() == b.shape(), "IoU: mask shapes " << shape_str(a.shape()) << " and "
                                                        << shape_str(b.shape())
                                                        << " differ");
  auto da = a.data();
  auto db = b.data();
  double inter = 0.0, uni = 0.0;
  for (std::size_t i = 0; i < da.size(); ++i) {
    const bool pa = da[i] != 0.0f;
    const bool pb = db[i] != 0.0f;
    if (pa && pb) inter += 1.0;
    if (pa || pb) uni += 1.0;
  }
  return uni > 0.0 ? inter / uni : 1.0;
}

// Mean per-site channel distance between two equal-shape feature maps,
// accumulated in double.
double feature_distance(const Tensor& a, const Tensor& b) {
  MSF_CHECK(a.shape() == b.shape(), "feature maps " << shape_str(a.shape()) << " and "
                                                    << shape_str(b.shape())
                                                    << " differ");
  const int c = a.dim(1);
  const int hw = a.dim(2) * a.dim(3);
  auto da = a.data();
  auto db = b.data();
  double acc = 0.0;
  for (int s = 0; s < hw; ++s) {
    double site = 0.0;
    for (int ch = 0; ch < c; ++ch) {
      const std::size_t i = static_cast<std::size_t>(ch) * hw + s;
      const double d = static_cast<double>(da[i]) - db[i];
      site += d * d;
    }
    acc += std::sqrt(site);
  }
  return acc / hw;
}

}  // namespace

const char* to_string(PckConvention c) {
  switch (c) {
    case PckConvention::kUnitDiagonal: return "unit-diagonal";
    case PckConvention::kUnitPerAxis: return "unit-per-axis";
    case PckConvention::kBboxMax: return "bbox-max";
  }
  return "?";
}

std::vector<std::pair<double, double>> nn_match(
    const Tensor& f_s, const Tensor& f_t,
    const std::vector<std::pair<double, double>>& points_s, int stride) {
  MSF_CHECK(f_s.defined() && f_t.defined() && f_s.rank() == 4 && f_t.rank() == 4 &&
                f_s.dim(0) == 1 && f_t.dim(0) == 1 && f_s.dim(1) == f_t.dim(1),
            "nn_match: expected [1,C,h,w] maps with matching channels");
  MSF_CHECK(stride >= 1, "nn_match: stride must be >= 1");
  NoGradGuard guard;
  const int c = f_t.dim(1);
  const int h = f_t.dim(2);
  const int w = f_t.dim(3);
  const int sites = h * w;
  const double offset = (stride - 1) / 2.0;
  auto tgt = f_t.data();

  std::vector<std::pair<double, double>> out(points_s.size());
  if (points_s.empty()) return out;
  Tensor rows = enc::features_at_points(f_s, points_s, stride);  // [K,C]
  auto src = rows.data();

  parallel_for(static_cast<std::int64_t>(points_s.size()), [&](std::int64_t k) {
    const float* f = src.data() + static_cast<std::size_t>(k) * c;
    double best = std::numeric_limits<double>::infinity();
    int best_site = 0;
    for (int s = 0; s < sites; ++s) {
      double acc = 0.0;
      for (int ch = 0; ch < c; ++ch) {
        const double d = static_cast<double>(f[ch]) -
                         tgt[static_cast<std::size_t>(ch) * sites + s];
        acc += d * d;
      }
      if (acc < best) {
        best = acc;
        best_site = s;
      }
    }
    out[static_cast<std::size_t>(k)] = {offset + stride * (best_site % w),
                                        offset + stride * (best_site / w)};
  });
  return out;
}

PckResult pck(const std::vector<KeypointAnnotation>& annotations,
              const std::vector<std::vector<std::pair<double, double>>>& predicted,
              const std::vector<double>& alphas, PckConvention convention) {
  MSF_CHECK(annotations.size() == predicted.size(),
            "pck: " << annotations.size() << " annotations vs " << predicted.size()
                    << " prediction lists");
  MSF_CHECK(!alphas.empty(), "pck: no thresholds given");
  PckResult result;
  result.alphas = alphas;
  result.correct.assign(alphas.size(), 0);

  for (std::size_t i = 0; i < annotations.size(); ++i) {
    const KeypointAnnotation& ann = annotations[i];
    MSF_CHECK(ann.points_s.size() == ann.points_t.size(),
              "pck: pair '" << ann.pair_id << "' has " << ann.points_s.size()
                            << " source but " << ann.points_t.size()
                            << " target keypoints");
    MSF_CHECK(predicted[i].size() == ann.points_t.size(),
              "pck: pair '" << ann.pair_id << "' has " << predicted[i].size()
                            << " predictions for " << ann.points_t.size()
                            << " keypoints");
    double box_side = 0.0;
    if (convention == PckConvention::kBboxMax) {
      MSF_CHECK(ann.bbox_t.has_value(),
                "pck: pair '" << ann.pair_id
                              << "' has no target box for the box-max convention");
      box_side = std::max(ann.bbox_t->x1 - ann.bbox_t->x0,
                          ann.bbox_t->y1 - ann.bbox_t->y0);
    }
    const double diag = std::sqrt(static_cast<double>(ann.width_t) * ann.width_t +
                                  static_cast<double>(ann.height_t) * ann.height_t);

    for (std::size_t k = 0; k < ann.points_t.size(); ++k) {
      const double dx = predicted[i][k].first - ann.points_t[k].first;
      const double dy = predicted[i][k].second - ann.points_t[k].second;
      ++result.total;
      for (std::size_t a = 0; a < alphas.size(); ++a) {
        bool ok = false;
        switch (convention) {
          case PckConvention::kUnitDiagonal:
            ok = std::sqrt(dx * dx + dy * dy) / diag < alphas[a];
            break;
          case PckConvention::kUnitPerAxis:
            ok = std::abs(dx) / ann.width_t < alphas[a] &&
                 std::abs(dy) / ann.height_t < alphas[a];
            break;
          case PckConvention::kBboxMax:
            ok = std::sqrt(dx * dx + dy * dy) < alphas[a] * box_side;
            break;
        }
        if (ok) ++result.correct[a];
      }
    }
  }
  return result;
}

double weighted_iou(
    const std::vector<Tensor>& source_parts, const std::vector<Tensor>& target_parts,
    const std::function<std::pair<double, double>(double, double)>& flow_chain) {
  MSF_CHECK(!source_parts.empty(), "weighted_iou: empty part set");
  MSF_CHECK(source_parts.size() == target_parts.size(),
            "weighted_iou: " << source_parts.size() << " source vs "
                             << target_parts.size() << " target parts");
  double weighted = 0.0;
  double total_area = 0.0;
  for (std::size_t p = 0; p < source_parts.size(); ++p) {
    const Tensor& src = source_parts[p];
    const Tensor& tgt = target_parts[p];
    MSF_CHECK(src.rank() == 2 && tgt.rank() == 2,
              "weighted_iou: masks must be [H,W], got " << shape_str(src.shape())
                                                        << " and "
                                                        << shape_str(tgt.shape()));
    const int th = tgt.dim(0);
    const int tw = tgt.dim(1);
    std::vector<float> warped(static_cast<std::size_t>(th) * tw, 0.0f);
    auto sd = src.data();
    const int sh = src.dim(0);
    const int sw = src.dim(1);
    for (int y = 0; y < sh; ++y) {
      for (int x = 0; x < sw; ++x) {
        if (sd[static_cast<std::size_t>(y) * sw + x] == 0.0f) continue;
        auto [mx, my] = flow_chain(x, y);
        const int ix = static_cast<int>(std::lround(mx));
        const int iy = static_cast<int>(std::lround(my));
        if (ix < 0 || ix >= tw || iy < 0 || iy >= th) continue;
        warped[static_cast<std::size_t>(iy) * tw + ix] = 1.0f;
      }
    }
    const double area = mask_area(tgt);
    weighted += area * binary_iou(Tensor::from_data({th, tw}, std::move(warped)), tgt);
    total_area += area;
  }
  MSF_CHECK(total_area > 0.0, "weighted_iou: all target parts are empty");
  return weighted / total_area;
}

double dense_flow_pck(const Tensor& gt_map, const Tensor& pred_map,
                      const Tensor& object_mask, int n_samples, Rng rng, int target_h,
                      int target_w, double threshold_px, double eval_max_dim) {
  MSF_CHECK(gt_map.defined() && gt_map.rank() == 3 && gt_map.dim(0) == 2,
            "dense_flow_pck: maps must be [2,H,W]");
  MSF_CHECK(gt_map.shape() == pred_map.shape(),
            "dense_flow_pck: map shapes " << shape_str(gt_map.shape()) << " and "
                                          << shape_str(pred_map.shape()) << " differ");
  MSF_CHECK(object_mask.rank() == 2 && object_mask.dim(0) == gt_map.dim(1) &&
                object_mask.dim(1) == gt_map.dim(2),
            "dense_flow_pck: mask " << shape_str(object_mask.shape())
                                    << " does not cover the maps");
  MSF_CHECK(n_samples >= 1, "dense_flow_pck: need at least one sample");
  MSF_CHECK(target_h >= 1 && target_w >= 1, "dense_flow_pck: degenerate target frame");

  std::vector<int> object;
  auto md = object_mask.data();
  for (std::size_t i = 0; i < md.size(); ++i) {
    if (md[i] != 0.0f) object.push_back(static_cast<int>(i));
  }
  MSF_CHECK(!object.empty(), "dense_flow_pck: object mask is empty");

  const double scale = eval_max_dim / std::max(target_h, target_w);
  const std::size_t plane = static_cast<std::size_t>(gt_map.dim(1)) * gt_map.dim(2);
  auto gt = gt_map.data();
  auto pred = pred_map.data();
  int correct = 0;
  for (int s = 0; s < n_samples; ++s) {
    const int pix = object[static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<int>(object.size()) - 1))];
    const double ex = (pred[pix] - gt[pix]) * scale;
    const double ey = (pred[plane + pix] - gt[plane + pix]) * scale;
    if (std::sqrt(ex * ex + ey * ey) < threshold_px) ++correct;
  }
  return static_cast<double>(correct) / n_samples;
}

bool flip_select(const Tensor& image_s, const Tensor& image_t, const Backbone& net) {
  NoGradGuard guard;
  Tensor f_s = enc::extract_features(net, image_s);
  Tensor f_t = enc::extract_features(net, image_t);
  Tensor f_t_flip = enc::extract_features(net, img::hflip(image_t));
  const double plain = feature_distance(f_s, f_t);
  const double flipped = feature_distance(f_s, f_t_flip);
  return flipped < plain;  // tie keeps the unflipped image
}

double coseg_iou(const std::vector<Tensor>& predicted, const std::vector<Tensor>& gt) {
  MSF_CHECK(!predicted.empty(), "coseg_iou: no masks");
  MSF_CHECK(predicted.size() == gt.size(), "coseg_iou: " << predicted.size()
                                                         << " predictions vs "
                                                         << gt.size() << " references");
  double acc = 0.0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    acc += binary_iou(predicted[i], gt[i]);
  }
  return acc / static_cast<double>(predicted.size());
}

Tensor receptive_field_probe(const Tensor& image_s, const Tensor& image_t,
                             std::pair<double, double> point_s,
                             std::pair<double, double> point_t, const Backbone& net,
                             int square_side, int probe_stride,
                             std::optional<std::array<double, 3>> gray) {
  MSF_CHECK(image_t.defined() && image_t.rank() == 3 && image_t.dim(0) == 3,
            "receptive_field_probe: expected a [3,H,W] target image");
  const int h = image_t.dim(1);
  const int w = image_t.dim(2);
  MSF_CHECK(square_side >= 1 && square_side <= std::min(h, w),
            "receptive_field_probe: square side " << square_side
                                                  << " does not fit in " << h << "x"
                                                  << w);
  MSF_CHECK(probe_stride >= 1, "receptive_field_probe: stride must be >= 1");
  NoGradGuard guard;

  const double mean = img::mean_pixel(image_t);
  const std::array<double, 3> fill =
      gray.has_value() ? *gray : std::array<double, 3>{mean, mean, mean};
  const int stride = net.stride();
  Tensor f_s = enc::extract_features(net, image_s);
  Tensor f_t = enc::extract_features(net, image_t);
  Tensor row_s = enc::features_at_points(f_s, {point_s}, stride);
  Tensor row_t = enc::features_at_points(f_t, {point_t}, stride);
  auto dot = [](const Tensor& a, const Tensor& b) {
    auto da = a.data();
    auto db = b.data();
    double acc = 0.0;
    for (std::size_t i = 0; i < da.size(); ++i)
      acc += static_cast<double>(da[i]) * db[i];
    return acc;
  };
  const double base = dot(row_s, row_t);

  const int grid_h = (h - square_side) / probe_stride + 1;
  const int grid_w = (w - square_side) / probe_stride + 1;
  std::vector<float> heat(static_cast<std::size_t>(grid_h) * grid_w, 0.0f);
  parallel_for(static_cast<std::int64_t>(grid_h) * grid_w, [&](std::int64_t cell) {
    const int gy = static_cast<int>(cell) / grid_w;
    const int gx = static_cast<int>(cell) % grid_w;
    Tensor patched = image_t.clone();
    auto pd = patched.mutable_data();
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    for (int c = 0; c < 3; ++c) {
      for (int y = gy * probe_stride; y < gy * probe_stride + square_side; ++y) {
        for (int x = gx * probe_stride; x < gx * probe_stride + square_side; ++x) {
          pd[static_cast<std::size_t>(c) * plane + static_cast<std::size_t>(y) * w + x] =
              static_cast<float>(fill[static_cast<std::size_t>(c)]);
        }
      }
    }
    Tensor f_p = enc::extract_features(net, patched);
    Tensor row_p = enc::features_at_points(f_p, {point_t}, stride);
    heat[static_cast<std::size_t>(cell)] = static_cast<float>(base - dot(row_s, row_p));
  });
  return Tensor::from_data({grid_h, grid_w}, std::move(heat));
}

}  // namespace msf::eval
