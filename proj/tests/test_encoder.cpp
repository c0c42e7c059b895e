#include <doctest.h>

#include <cmath>
#include <utility>
#include <vector>

#include "msflow/common.hpp"
#include "msflow/encoder.hpp"
#include "msflow/eval.hpp"
#include "msflow/image.hpp"
#include "msflow/model.hpp"
#include "msflow/ops.hpp"
#include "msflow/rng.hpp"
#include "msflow/tensor.hpp"
#include "support/synth.hpp"

using msf::Backbone;
using msf::BackboneConfig;
using msf::Rng;
using msf::Tensor;
namespace enc = msf::enc;
namespace img = msf::img;

namespace {

// Two plain blocks keep the receptive field at 8 px so border effects from
// zero padding stay near the frame.
BackboneConfig tiny_plain() {
  BackboneConfig cfg;
  cfg.input_size = 32;
  cfg.channels = {6, 8};
  cfg.pool_after = {1, 0};
  cfg.embed_dim = 8;
  cfg.multi_scale = false;
  return cfg;
}

Tensor linear_ramp_x(int h, int w) {
  std::vector<float> px(static_cast<std::size_t>(3) * h * w);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        px[(static_cast<std::size_t>(c) * h + y) * w + x] =
            static_cast<float>(x) / static_cast<float>(w - 1);
  return Tensor::from_data({3, h, w}, std::move(px));
}

Tensor linear_ramp_y(int h, int w) {
  std::vector<float> px(static_cast<std::size_t>(3) * h * w);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        px[(static_cast<std::size_t>(c) * h + y) * w + x] =
            static_cast<float>(y) / static_cast<float>(h - 1);
  return Tensor::from_data({3, h, w}, std::move(px));
}

}  // namespace

TEST_CASE("constant input gives identical interior feature vectors") {
  Rng rng(11);
  Backbone net(tiny_plain(), rng);
  Tensor image = Tensor::full({3, 32, 32}, 0.4f);
  Tensor f = enc::extract_features(net, image);
  REQUIRE(f.rank() == 4);
  const int c = f.dim(1), h = f.dim(2), w = f.dim(3);
  REQUIRE(h == 16);
  // Sites whose receptive field misses the zero padding all see the same
  // input, so their embeddings agree.
  for (int ch = 0; ch < c; ++ch) {
    const float ref = f.at({0, ch, 8, 8});
    for (int y = 3; y <= 12; ++y)
      for (int x = 3; x <= 12; ++x)
        CHECK(std::abs(f.at({0, ch, y, x}) - ref) < 1e-6f);
  }
  (void)w;
}

TEST_CASE("every feature site has unit norm") {
  Rng rng(12);
  Backbone net(tiny_plain(), rng);
  Tensor image = testsup::blob_image(rng, 32, 32);
  Tensor f = enc::extract_features(net, image);
  const int c = f.dim(1), h = f.dim(2), w = f.dim(3);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int ch = 0; ch < c; ++ch) acc += static_cast<double>(f.at({0, ch, y, x})) *
                                            f.at({0, ch, y, x});
      CHECK(std::sqrt(acc) == doctest::Approx(1.0).epsilon(1e-5));
    }
  }
}

TEST_CASE("feature extraction is deterministic") {
  Rng rng_img(13);
  Tensor image = testsup::blob_image(rng_img, 32, 32);

  Rng r1(77), r2(77);
  Backbone a(tiny_plain(), r1);
  Backbone b(tiny_plain(), r2);
  Tensor fa1 = enc::extract_features(a, image);
  Tensor fa2 = enc::extract_features(a, image);
  Tensor fb = enc::extract_features(b, image);
  REQUIRE(fa1.shape() == fa2.shape());
  REQUIRE(fa1.shape() == fb.shape());
  for (std::size_t i = 0; i < fa1.numel(); ++i) {
    CHECK(fa1.data()[i] == fa2.data()[i]);
    CHECK(fa1.data()[i] == fb.data()[i]);
  }
}

TEST_CASE("extract_features rejects non-image input") {
  Rng rng(14);
  Backbone net(tiny_plain(), rng);
  CHECK_THROWS_AS(enc::extract_features(net, Tensor::full({1, 3, 32, 32}, 0.f)),
                  msf::Error);
  CHECK_THROWS_AS(enc::extract_features(net, Tensor::full({1, 32, 32}, 0.f)),
                  msf::Error);
}

TEST_CASE("features_at_points performs bilinear reads on the site lattice") {
  // Hand-built map, stride 4: site (ix,iy) sits at pixel (1.5+4ix, 1.5+4iy).
  const int c = 3, h = 4, w = 5, stride = 4;
  Rng rng(15);
  std::vector<float> vals(static_cast<std::size_t>(c) * h * w);
  for (auto& v : vals) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  Tensor fmap = Tensor::from_data({1, c, h, w}, vals);
  auto site = [&](int ch, int iy, int ix) {
    return static_cast<double>(vals[(static_cast<std::size_t>(ch) * h + iy) * w + ix]);
  };

  const double off = 1.5;
  std::vector<std::pair<double, double>> pts = {
      {off + 4 * 2, off + 4 * 1},        // exactly site (2,1)
      {off + 4 * 2.25, off + 4 * 0.5},   // between sites
      {-50.0, -50.0},                    // clamps to site (0,0)
      {1e5, 1e5},                        // clamps to site (w-1,h-1)
  };
  Tensor rows = enc::features_at_points(fmap, pts, stride);
  REQUIRE(rows.shape() == msf::Shape{4, c});

  for (int ch = 0; ch < c; ++ch) {
    CHECK(rows.at({0, ch}) == doctest::Approx(site(ch, 1, 2)).epsilon(1e-6));
    const double blend = 0.5 * (0.75 * site(ch, 0, 2) + 0.25 * site(ch, 0, 3)) +
                         0.5 * (0.75 * site(ch, 1, 2) + 0.25 * site(ch, 1, 3));
    CHECK(rows.at({1, ch}) == doctest::Approx(blend).epsilon(1e-6));
    CHECK(rows.at({2, ch}) == doctest::Approx(site(ch, 0, 0)).epsilon(1e-6));
    CHECK(rows.at({3, ch}) == doctest::Approx(site(ch, h - 1, w - 1)).epsilon(1e-6));
  }

  CHECK_THROWS_AS(enc::features_at_points(fmap, {}, stride), msf::Error);
}

TEST_CASE("contrastive loss matches its closed forms") {
  Tensor u = Tensor::from_data({3}, {0.2f, -0.5f, 0.9f});

  // Identical positives cost nothing.
  CHECK(enc::contrastive_loss(u, u, true, 1.0).item() == doctest::Approx(0.0));

  // Positive pairs pay the squared distance.
  Tensor a = Tensor::from_data({2}, {1.f, 0.f});
  Tensor b = Tensor::from_data({2}, {0.f, 1.f});
  CHECK(enc::contrastive_loss(a, b, true, 1.0).item() == doctest::Approx(2.0).epsilon(1e-6));

  // Negatives at or beyond the margin cost nothing.
  Tensor far_a = Tensor::from_data({2}, {1.f, 0.f});
  Tensor far_b = Tensor::from_data({2}, {-1.f, 0.f});
  CHECK(enc::contrastive_loss(far_a, far_b, false, 1.0).item() == doctest::Approx(0.0));

  // Negative at distance 0.4 under margin 1: (1 - 0.4)^2 = 0.36.
  Tensor near_a = Tensor::from_data({2}, {0.4f, 0.f});
  Tensor near_b = Tensor::from_data({2}, {0.f, 0.f});
  CHECK(enc::contrastive_loss(near_a, near_b, false, 1.0).item() ==
        doctest::Approx(0.36).epsilon(1e-6));

  // Row batches average: one 0.36 row plus one slack row.
  Tensor ba = Tensor::from_data({2, 2}, {0.4f, 0.f, 1.f, 0.f});
  Tensor bb = Tensor::from_data({2, 2}, {0.f, 0.f, -1.f, 0.f});
  CHECK(enc::contrastive_loss(ba, bb, false, 1.0).item() ==
        doctest::Approx(0.18).epsilon(1e-6));

  CHECK_THROWS_AS(enc::contrastive_loss(a, Tensor::from_data({3}, {0.f, 0.f, 0.f}),
                                        true, 1.0),
                  msf::Error);
  CHECK_THROWS_AS(enc::contrastive_loss(a, b, false, 0.0), msf::Error);
}

TEST_CASE("hard negative mining sorts by feature distance outside the radius") {
  const int d = 2, h = 3, w = 4, stride = 8;  // site centers 3.5 + 8*i
  Rng rng(16);
  std::vector<float> vals(static_cast<std::size_t>(d) * h * w);
  for (auto& v : vals) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  Tensor fmap = Tensor::from_data({1, d, h, w}, vals);

  SUBCASE("a radius covering the frame leaves nothing to mine") {
    Tensor f = Tensor::from_data({d}, {0.f, 0.f});
    auto res = enc::mine_hard_negatives(f, fmap, {3.5, 3.5}, 1000.0, 5, stride);
    CHECK(res.points.empty());
    CHECK(res.truncated);
  }

  SUBCASE("a site holding the query feature ranks first at distance zero") {
    Tensor f = Tensor::from_data(
        {d}, {vals[0 * h * w + 0 * w + 3], vals[1 * h * w + 0 * w + 3]});
    auto res = enc::mine_hard_negatives(f, fmap, {3.5, 3.5}, 8.0, 3, stride);
    REQUIRE(res.points.size() == 3);
    CHECK(res.points[0] == std::pair<double, double>{3.5 + 8 * 3, 3.5});
    CHECK(res.distances[0] == doctest::Approx(0.0));
    CHECK_FALSE(res.truncated);
  }

  SUBCASE("results agree with an exhaustive sort and stay outside the radius") {
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<float> mv(static_cast<std::size_t>(d) * h * w);
      for (auto& v : mv) v = static_cast<float>(rng.uniform(-1.0, 1.0));
      Tensor map = Tensor::from_data({1, d, h, w}, mv);
      std::vector<float> fv = {static_cast<float>(rng.uniform(-1.0, 1.0)),
                               static_cast<float>(rng.uniform(-1.0, 1.0))};
      Tensor f = Tensor::from_data({d}, fv);
      const std::pair<double, double> gt = {rng.uniform(0.0, 27.0), rng.uniform(0.0, 19.0)};
      const double radius = rng.uniform(4.0, 16.0);
      const int count = 1 + trial % 12;

      struct Row {
        double dist;
        int idx;
      };
      std::vector<Row> want;
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          const double cx = 3.5 + 8.0 * x;
          const double cy = 3.5 + 8.0 * y;
          if (std::hypot(cx - gt.first, cy - gt.second) <= radius) continue;
          double acc = 0.0;
          for (int ch = 0; ch < d; ++ch) {
            const double delta =
                static_cast<double>(fv[ch]) - mv[static_cast<std::size_t>(ch) * h * w + y * w + x];
            acc += delta * delta;
          }
          want.push_back({std::sqrt(acc), y * w + x});
        }
      }
      std::sort(want.begin(), want.end(), [](const Row& a, const Row& b) {
        return a.dist != b.dist ? a.dist < b.dist : a.idx < b.idx;
      });

      auto res = enc::mine_hard_negatives(f, map, gt, radius, count, stride);
      CHECK(res.truncated == (static_cast<int>(want.size()) < count));
      REQUIRE(res.points.size() ==
              static_cast<std::size_t>(std::min<int>(count, static_cast<int>(want.size()))));
      for (std::size_t i = 0; i < res.points.size(); ++i) {
        const int y = want[i].idx / w;
        const int x = want[i].idx % w;
        CHECK(res.points[i] == std::pair<double, double>{3.5 + 8.0 * x, 3.5 + 8.0 * y});
        CHECK(res.distances[i] == doctest::Approx(want[i].dist).epsilon(1e-12));
        CHECK(std::hypot(res.points[i].first - gt.first,
                         res.points[i].second - gt.second) > radius);
      }
      if (res.points.size() > 1) {
        for (std::size_t i = 1; i < res.distances.size(); ++i)
          CHECK(res.distances[i - 1] <= res.distances[i]);
      }
    }
  }

  SUBCASE("malformed queries are rejected") {
    Tensor f = Tensor::from_data({d}, {0.f, 0.f});
    CHECK_THROWS_AS(enc::mine_hard_negatives(Tensor::from_data({3}, {0, 0, 0}), fmap,
                                             {3.5, 3.5}, 8.0, 3, stride),
                    msf::Error);
    CHECK_THROWS_AS(enc::mine_hard_negatives(f, fmap, {3.5, 3.5}, -1.0, 3, stride),
                    msf::Error);
    CHECK_THROWS_AS(enc::mine_hard_negatives(f, fmap, {3.5, 3.5}, 8.0, 0, stride),
                    msf::Error);
  }
}

TEST_CASE("augmentation remap reproduces mirror and shift arithmetic") {
  enc::AugmentationRecord rec;
  rec.width = 10;
  rec.height = 6;

  rec.mirror = true;
  CHECK(rec.remap(2.0, 3.0) == std::pair<double, double>{7.0, 3.0});

  rec.mirror = false;
  rec.shift_x = 3;
  rec.shift_y = -2;
  CHECK(rec.remap(1.5, 4.0) == std::pair<double, double>{4.5, 2.0});

  // Mirror applies before the shift.
  rec.mirror = true;
  CHECK(rec.remap(2.0, 3.0) == std::pair<double, double>{10.0, 1.0});
}

TEST_CASE("augmentation remap inverts the image resampling maps") {
  // On linear coordinate ramps bilinear resampling is exact, so the
  // augmented ramp read at remap(p) must report p itself.
  const int n = 48;
  Tensor rx = linear_ramp_x(n, n);
  Tensor ry = linear_ramp_y(n, n);

  SUBCASE("pure rotation") {
    enc::AugmentationRecord rec;
    rec.width = rec.height = n;
    rec.rotate_deg = 17.0;
    Tensor ax = img::rotate(rx, rec.rotate_deg);
    Tensor ay = img::rotate(ry, rec.rotate_deg);
    for (double py = 16; py <= 32; py += 5.3) {
      for (double px = 16; px <= 32; px += 4.7) {
        auto [qx, qy] = rec.remap(px, py);
        REQUIRE(qx >= 1.0);
        REQUIRE(qx <= n - 2.0);
        REQUIRE(qy >= 1.0);
        REQUIRE(qy <= n - 2.0);
        const double got_x = testsup::sample_px(ax.data(), n, n, qx, qy) * (n - 1);
        const double got_y = testsup::sample_px(ay.data(), n, n, qx, qy) * (n - 1);
        CHECK(std::abs(got_x - px) < 1e-2);
        CHECK(std::abs(got_y - py) < 1e-2);
      }
    }
  }

  SUBCASE("mirror, shift and rotation composed in trainer order") {
    enc::AugmentationRecord rec;
    rec.width = rec.height = n;
    rec.mirror = true;
    rec.shift_x = 3;
    rec.shift_y = -2;
    rec.rotate_deg = -11.0;
    Tensor ax = img::rotate(img::translate(img::hflip(rx), rec.shift_x, rec.shift_y),
                            rec.rotate_deg);
    Tensor ay = img::rotate(img::translate(img::hflip(ry), rec.shift_x, rec.shift_y),
                            rec.rotate_deg);
    for (double py = 18; py <= 30; py += 4.1) {
      for (double px = 18; px <= 30; px += 3.9) {
        auto [qx, qy] = rec.remap(px, py);
        const double got_x = testsup::sample_px(ax.data(), n, n, qx, qy) * (n - 1);
        const double got_y = testsup::sample_px(ay.data(), n, n, qx, qy) * (n - 1);
        CHECK(std::abs(got_x - px) < 5e-2);
        CHECK(std::abs(got_y - py) < 5e-2);
      }
    }
  }
}

TEST_CASE("zero epochs leave the network untouched") {
  Rng rng(21);
  auto pair = testsup::translated_pair(rng, 32, 3, 6);
  enc::TrainSample sample{pair.a, pair.b,
                          testsup::translation_corrs(32, 32, pair.dx, pair.dy, 6, 8)};
  REQUIRE_FALSE(sample.corrs.empty());

  Rng net_rng(22);
  Backbone net(tiny_plain(), net_rng);
  std::vector<std::vector<float>> before;
  for (const auto& p : net.parameters())
    before.emplace_back(p.data().begin(), p.data().end());

  enc::EncoderTrainConfig cfg;
  cfg.epochs = 0;
  auto curve = enc::train_encoder({sample}, net, cfg, Rng(1));
  CHECK(curve.epoch_loss.empty());

  auto params = net.parameters();
  REQUIRE(params.size() == before.size());
  for (std::size_t i = 0; i < params.size(); ++i)
    for (std::size_t j = 0; j < before[i].size(); ++j)
      CHECK(params[i].data()[j] == before[i][j]);
}

TEST_CASE("a vanishing learning rate keeps the loss flat across epochs") {
  Rng rng(23);
  auto pair = testsup::translated_pair(rng, 32, 3, 6);
  enc::TrainSample sample{pair.a, pair.b,
                          testsup::translation_corrs(32, 32, pair.dx, pair.dy, 6, 8)};

  Rng net_rng(24);
  Backbone net(tiny_plain(), net_rng);
  enc::EncoderTrainConfig cfg;
  cfg.epochs = 3;
  cfg.lr = 1e-35;
  cfg.momentum = 0.0;
  cfg.negatives = 4;
  cfg.radius_px = 6.0;
  cfg.max_corrs_per_pair = 8;
  cfg.augment = false;
  auto curve = enc::train_encoder({sample}, net, cfg, Rng(2));
  REQUIRE(curve.epoch_loss.size() == 3);
  CHECK(curve.epoch_loss[1] == doctest::Approx(curve.epoch_loss[0]).epsilon(1e-9));
  CHECK(curve.epoch_loss[2] == doctest::Approx(curve.epoch_loss[0]).epsilon(1e-9));
}

TEST_CASE("training on one translated pair lowers the loss and aligns matches") {
  Rng rng(25);
  auto pair = testsup::translated_pair(rng, 64, 9, 11);
  auto corrs = testsup::translation_corrs(64, 64, pair.dx, pair.dy, 6, 14);
  REQUIRE(corrs.size() >= 9);
  enc::TrainSample sample{pair.a, pair.b, corrs};

  BackboneConfig cfg;
  cfg.input_size = 64;
  cfg.channels = {8, 12, 16, 16};
  cfg.pool_after = {1, 1, 0, 0};
  cfg.embed_dim = 16;
  cfg.multi_scale = false;
  Rng net_rng(26);
  Backbone net(cfg, net_rng);

  enc::EncoderTrainConfig tc;
  tc.epochs = 12;
  tc.lr = 0.03;
  tc.negatives = 16;
  tc.radius_px = 12.0;
  tc.max_corrs_per_pair = 12;
  tc.max_shift = 3;
  tc.max_rotate_deg = 6.0;
  auto curve = enc::train_encoder({sample}, net, tc, Rng(3));
  REQUIRE(curve.epoch_loss.size() == 12);
  CHECK(curve.epoch_loss.back() < curve.epoch_loss.front());

  // A short pass at a lower rate settles the embedding before matching.
  tc.epochs = 6;
  tc.lr = 0.01;
  enc::train_encoder({sample}, net, tc, Rng(4));

  Tensor fa = enc::extract_features(net, pair.a);
  Tensor fb = enc::extract_features(net, pair.b);
  std::vector<std::pair<double, double>> pts_s, pts_t;
  for (const auto& q : corrs) {
    pts_s.emplace_back(q.xs, q.ys);
    pts_t.emplace_back(q.xt, q.yt);
  }
  auto predicted = msf::eval::nn_match(fa, fb, pts_s, net.stride());

  msf::eval::KeypointAnnotation ann;
  ann.pair_id = "pair";
  ann.points_s = pts_s;
  ann.points_t = pts_t;
  ann.width_s = ann.height_s = ann.width_t = ann.height_t = 64;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const double err = std::hypot(predicted[i].first - pts_t[i].first,
                                  predicted[i].second - pts_t[i].second);
    if (err > 5.0) MESSAGE("pt " << i << " err " << err);
  }
  auto res = msf::eval::pck({ann}, {predicted}, {0.1}, msf::eval::PckConvention::kUnitDiagonal);
  CHECK(res.value(0) == doctest::Approx(1.0));
}

TEST_CASE("the trainer rejects empty inputs") {
  Rng rng(27);
  Backbone net(tiny_plain(), rng);
  enc::EncoderTrainConfig cfg;
  CHECK_THROWS_AS(enc::train_encoder({}, net, cfg, Rng(4)), msf::Error);
  enc::TrainSample no_corrs{testsup::blob_image(rng, 32, 32),
                            testsup::blob_image(rng, 32, 32), {}};
  CHECK_THROWS_AS(enc::train_encoder({no_corrs}, net, cfg, Rng(5)), msf::Error);
}
