#include "msflow/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "msflow/common.hpp"
#include "msflow/image.hpp"
#include "msflow/ops.hpp"
#include "msflow/optim.hpp"

namespace msf::enc {

namespace {

// Pixel coordinate of feature site 0's center for a given stride.
double site_offset(int stride) { return (stride - 1) / 2.0; }

double to_normalized(double px, int stride, int sites) {
  if (sites <= 1) return 0.0;
  const double f = (px - site_offset(stride)) / stride;
  const double g = 2.0 * f / (sites - 1) - 1.0;
  return std::clamp(g, -1.0, 1.0);
}

}  // namespace

Tensor extract_features(const Backbone& net, const Tensor& image) {
  MSF_CHECK(image.defined() && image.rank() == 3 && image.dim(0) == 3,
            "extract_features: expected a [3,H,W] image, got "
                << (image.defined() ? shape_str(image.shape()) : "undefined"));
  Tensor batched = ops::reshape(image, {1, 3, image.dim(1), image.dim(2)});
  return net.forward(batched);
}

Tensor features_at_points(const Tensor& fmap,
                          const std::vector<std::pair<double, double>>& pts_px,
                          int stride) {
  MSF_CHECK(fmap.defined() && fmap.rank() == 4 && fmap.dim(0) == 1,
            "features_at_points: feature map must be [1,C,h,w]");
  MSF_CHECK(!pts_px.empty(), "features_at_points: empty point list");
  const int c = fmap.dim(1);
  const int h = fmap.dim(2);
  const int w = fmap.dim(3);
  const int k = static_cast<int>(pts_px.size());
  std::vector<float> grid(static_cast<std::size_t>(k) * 2);
  for (int i = 0; i < k; ++i) {
    grid[2 * i] = static_cast<float>(to_normalized(pts_px[i].first, stride, w));
    grid[2 * i + 1] = static_cast<float>(to_normalized(pts_px[i].second, stride, h));
  }
  Tensor grid_t = Tensor::from_data({1, k, 1, 2}, std::move(grid));
  Tensor sampled = ops::grid_sample(fmap, grid_t);      // [1,C,k,1]
  Tensor rows = ops::reshape(sampled, {c, k});
  return ops::transpose2d(rows);                        // [k,C]
}

Tensor contrastive_loss(const Tensor& f_a, const Tensor& f_b, bool positive,
                        double margin) {
  MSF_CHECK(f_a.defined() && f_b.defined() && f_a.shape() == f_b.shape(),
            "contrastive_loss: shapes differ");
  MSF_CHECK(f_a.rank() == 1 || f_a.rank() == 2,
            "contrastive_loss: expected [D] or [K,D], got " << shape_str(f_a.shape()));
  MSF_CHECK(margin > 0.0, "contrastive_loss: margin must be positive");
  Tensor a = f_a.rank() == 1 ? ops::reshape(f_a, {1, f_a.dim(0)}) : f_a;
  Tensor b = f_b.rank() == 1 ? ops::reshape(f_b, {1, f_b.dim(0)}) : f_b;
  const double rows = a.dim(0);
  Tensor diff = ops::sub(a, b);
  if (positive) {
    // Mean over rows of the squared distance; written as a plain sum of
    // squares so the gradient is finite at zero distance.
    return ops::mul_scalar(ops::sum_all(ops::square(diff)), 1.0 / rows);
  }
  Tensor d = ops::row_l2_norm(diff, 1e-12);
  Tensor hinge = ops::relu(ops::add_scalar(ops::mul_scalar(d, -1.0), margin));
  return ops::mul_scalar(ops::sum_all(ops::square(hinge)), 1.0 / rows);
}

HardNegatives mine_hard_negatives(const Tensor& f_src, const Tensor& target_map,
                                  std::pair<double, double> gt_point_px,
                                  double radius_px, int count, int stride) {
  MSF_CHECK(f_src.defined() && (f_src.rank() == 1 ||
                                (f_src.rank() == 2 && f_src.dim(0) == 1)),
            "mine_hard_negatives: f_src must be [D] or [1,D]");
  MSF_CHECK(target_map.defined() && target_map.rank() == 4 && target_map.dim(0) == 1,
            "mine_hard_negatives: target_map must be [1,D,h,w]");
  const int d = target_map.dim(1);
  MSF_CHECK(static_cast<int>(f_src.numel()) == d,
            "mine_hard_negatives: feature dim " << f_src.numel() << " != map channels "
                                                << d);
  MSF_CHECK(radius_px > 0.0, "mine_hard_negatives: radius must be positive");
  MSF_CHECK(count >= 1, "mine_hard_negatives: count must be >= 1");

  const int h = target_map.dim(2);
  const int w = target_map.dim(3);
  auto src = f_src.data();
  auto map = target_map.data();
  const double off = site_offset(stride);

  struct Site {
    double dist;
    int idx;
  };
  std::vector<Site> outside;
  outside.reserve(static_cast<std::size_t>(h) * w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double cx = off + static_cast<double>(stride) * x;
      const double cy = off + static_cast<double>(stride) * y;
      const double dx = cx - gt_point_px.first;
      const double dy = cy - gt_point_px.second;
      if (std::sqrt(dx * dx + dy * dy) <= radius_px) continue;
      double acc = 0.0;
      const std::size_t base = static_cast<std::size_t>(y) * w + x;
      for (int ch = 0; ch < d; ++ch) {
        const double delta = static_cast<double>(src[ch]) -
                             static_cast<double>(map[static_cast<std::size_t>(ch) * h * w + base]);
        acc += delta * delta;
      }
      outside.push_back({std::sqrt(acc), y * w + x});
    }
  }
  std::sort(outside.begin(), outside.end(), [](const Site& a, const Site& b) {
    if (a.dist != b.dist) return a.dist < b.dist;
    return a.idx < b.idx;  // raster order on ties
  });

  HardNegatives result;
  result.truncated = static_cast<int>(outside.size()) < count;
  const int take = std::min<int>(count, static_cast<int>(outside.size()));
  for (int i = 0; i < take; ++i) {
    const int y = outside[i].idx / w;
    const int x = outside[i].idx % w;
    result.points.emplace_back(off + static_cast<double>(stride) * x,
                               off + static_cast<double>(stride) * y);
    result.distances.push_back(outside[i].dist);
  }
  return result;
}

std::pair<double, double> AugmentationRecord::remap(double x, double y) const {
  if (mirror) x = (width - 1) - x;
  x += shift_x;
  y += shift_y;
  if (rotate_deg != 0.0) {
    const double rad = rotate_deg * std::numbers::pi / 180.0;
    const double cs = std::cos(rad);
    const double sn = std::sin(rad);
    const double cx = (width - 1) / 2.0;
    const double cy = (height - 1) / 2.0;
    const double rx = x - cx;
    const double ry = y - cy;
    // Inverse of the sampling map used by the image rotation.
    x = cx + cs * rx + sn * ry;
    y = cy - sn * rx + cs * ry;
  }
  return {x, y};
}

namespace {

std::pair<Tensor, AugmentationRecord> augment_image(const Tensor& image, Rng& rng,
                                                    const EncoderTrainConfig& cfg) {
  AugmentationRecord rec;
  rec.height = image.dim(1);
  rec.width = image.dim(2);
  if (!cfg.augment) return {image, rec};
  rec.mirror = rng.uniform() < 0.5;
  rec.shift_x = rng.uniform_int(-cfg.max_shift, cfg.max_shift);
  rec.shift_y = rng.uniform_int(-cfg.max_shift, cfg.max_shift);
  rec.rotate_deg = rng.uniform(-cfg.max_rotate_deg, cfg.max_rotate_deg);
  Tensor out = image;
  if (rec.mirror) out = img::hflip(out);
  if (rec.shift_x != 0 || rec.shift_y != 0) {
    out = img::translate(out, rec.shift_x, rec.shift_y);
  }
  if (rec.rotate_deg != 0.0) out = img::rotate(out, rec.rotate_deg);
  return {out, rec};
}

bool inside(double x, double y, int w, int h) {
  return x >= 0.0 && y >= 0.0 && x <= w - 1.0 && y <= h - 1.0;
}

}  // namespace

TrainCurve train_encoder(const std::vector<TrainSample>& samples, Backbone& net,
                         const EncoderTrainConfig& config, Rng rng) {
  MSF_CHECK(!samples.empty(), "train_encoder: empty sample set");
  MSF_CHECK(config.epochs >= 0, "train_encoder: negative epoch count");
  for (std::size_t i = 0; i < samples.size(); ++i) {
    MSF_CHECK(!samples[i].corrs.empty(),
              "train_encoder: sample " << i << " has no correspondences");
  }

  Sgd opt(net.parameters(), config.lr, config.momentum);
  const int stride = net.stride();
  TrainCurve curve;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    Rng epoch_rng = rng.stream("epoch").stream(static_cast<std::uint64_t>(epoch));
    std::vector<std::size_t> order(samples.size());
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1],
                order[static_cast<std::size_t>(epoch_rng.uniform_int(0, static_cast<int>(i) - 1))]);
    }

    double loss_acc = 0.0;
    int steps = 0;
    for (std::size_t pos = 0; pos < order.size(); ++pos) {
      const std::size_t idx = order[pos];
      const TrainSample& sample = samples[idx];
      Rng sample_rng = epoch_rng.stream(static_cast<std::uint64_t>(idx));

      Rng rng_a = sample_rng.stream("aug_a");
      Rng rng_b = sample_rng.stream("aug_b");
      auto [img_a, rec_a] = augment_image(sample.image_a, rng_a, config);
      auto [img_b, rec_b] = augment_image(sample.image_b, rng_b, config);

      std::vector<std::pair<double, double>> src_pts, tgt_pts;
      for (const auto& q : sample.corrs) {
        auto [xs, ys] = rec_a.remap(q.xs, q.ys);
        auto [xt, yt] = rec_b.remap(q.xt, q.yt);
        if (!inside(xs, ys, rec_a.width, rec_a.height)) continue;
        if (!inside(xt, yt, rec_b.width, rec_b.height)) continue;
        src_pts.emplace_back(xs, ys);
        tgt_pts.emplace_back(xt, yt);
      }
      if (src_pts.empty()) continue;  // pair dropped for this step

      if (static_cast<int>(src_pts.size()) > config.max_corrs_per_pair) {
        std::vector<std::pair<double, double>> s2, t2;
        const std::size_t n = src_pts.size();
        for (int i = 0; i < config.max_corrs_per_pair; ++i) {
          const std::size_t j = i * n / config.max_corrs_per_pair;
          s2.push_back(src_pts[j]);
          t2.push_back(tgt_pts[j]);
        }
        src_pts = std::move(s2);
        tgt_pts = std::move(t2);
      }

      Tensor fa = extract_features(net, img_a);
      Tensor fb = extract_features(net, img_b);
      Tensor src_rows = features_at_points(fa, src_pts, stride);
      Tensor tgt_rows = features_at_points(fb, tgt_pts, stride);
      Tensor loss = contrastive_loss(src_rows, tgt_rows, true, config.margin);

      if (config.negatives > 0) {
        // Hard negative search reads materialized values only; the loss
        // then re-reads those sites differentiably.
        const std::size_t k = src_pts.size();
        std::vector<HardNegatives> mined(k);
        auto src_data = src_rows.data();
        const int dim = src_rows.dim(1);
        parallel_for(static_cast<std::int64_t>(k), [&](std::int64_t i) {
          Tensor row = Tensor::from_data(
              {dim}, std::vector<float>(src_data.begin() + i * dim,
                                        src_data.begin() + (i + 1) * dim));
          mined[static_cast<std::size_t>(i)] =
              mine_hard_negatives(row, fb, tgt_pts[static_cast<std::size_t>(i)],
                                  config.radius_px, config.negatives, stride);
        });
        std::vector<std::pair<double, double>> neg_pts, src_rep;
        for (std::size_t i = 0; i < k; ++i) {
          for (const auto& p : mined[i].points) {
            neg_pts.push_back(p);
            src_rep.push_back(src_pts[i]);
          }
        }
        if (!neg_pts.empty()) {
          Tensor neg_rows = features_at_points(fb, neg_pts, stride);
          Tensor src_rows_rep = features_at_points(fa, src_rep, stride);
          loss = ops::add(loss,
                          contrastive_loss(src_rows_rep, neg_rows, false, config.margin));
        }
      }

      const double value = loss.item();
      MSF_CHECK(std::isfinite(value), "train_encoder: non-finite loss at epoch "
                                          << epoch << ", sample " << idx);
      loss.backward();
      opt.step();
      opt.zero_grad();
      loss_acc += value;
      ++steps;
    }
    MSF_CHECK(steps > 0, "train_encoder: every pair lost its correspondences at epoch "
                             << epoch);
    curve.epoch_loss.push_back(loss_acc / steps);
  }
  return curve;
}

}  // namespace msf::enc
