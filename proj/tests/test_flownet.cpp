#include <doctest.h>

#include <cmath>
#include <numbers>
#include <utility>
#include <vector>

#include "msflow/common.hpp"
#include "msflow/encoder.hpp"
#include "msflow/flownet.hpp"
#include "msflow/model.hpp"
#include "msflow/ops.hpp"
#include "msflow/optim.hpp"
#include "msflow/rng.hpp"
#include "msflow/tensor.hpp"
#include "support/synth.hpp"

using msf::Backbone;
using msf::BackboneConfig;
using msf::Rng;
using msf::Tensor;
namespace enc = msf::enc;
namespace flow = msf::flow;
namespace ops = msf::ops;

namespace {

flow::FlowNetConfig small_cfg(int feat_dim) {
  flow::FlowNetConfig cfg;
  cfg.feat_dim = feat_dim;
  cfg.loc_hidden = 16;
  cfg.trunk_hidden = 8;
  return cfg;
}

// Smooth band-limited feature maps: one sinusoid per channel, so bilinear
// warps stay informative and nearly exact.
Tensor wave_features(Rng& rng, int d, int h, int w) {
  std::vector<float> vals(static_cast<std::size_t>(d) * h * w);
  for (int c = 0; c < d; ++c) {
    const double fx = rng.uniform(0.4, 1.5);
    const double fy = rng.uniform(0.4, 1.5);
    const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double amp = rng.uniform(0.3, 0.7);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const double arg = 2.0 * std::numbers::pi *
                               (fx * x / (w - 1.0) + fy * y / (h - 1.0)) +
                           phase;
        vals[(static_cast<std::size_t>(c) * h + y) * w + x] =
            static_cast<float>(amp * std::sin(arg));
      }
    }
  }
  return Tensor::from_data({1, d, h, w}, std::move(vals));
}

Tensor zero_flow(int h, int w) { return Tensor::zeros({1, 2, h, w}); }

BackboneConfig pair_backbone() {
  BackboneConfig cfg;
  cfg.input_size = 32;
  cfg.channels = {6, 8};
  cfg.pool_after = {1, 0};
  cfg.embed_dim = 8;
  cfg.multi_scale = false;
  return cfg;
}

enc::TrainSample make_pair_sample(Rng& rng) {
  auto pair = testsup::translated_pair(rng, 32, 3, 5);
  return {pair.a, pair.b, testsup::translation_corrs(32, 32, pair.dx, pair.dy, 6, 8)};
}

}  // namespace

TEST_CASE("a fresh network starts at the identity transform") {
  Rng rng(51);
  flow::FlowNet net(small_cfg(4), rng);
  Tensor f_s = wave_features(rng, 4, 8, 8);
  Tensor f_t = wave_features(rng, 4, 8, 8);

  Tensor theta = net.localize(f_s, f_t);
  REQUIRE(theta.shape() == msf::Shape{6});
  const float identity[6] = {1, 0, 0, 0, 1, 0};
  for (int i = 0; i < 6; ++i) CHECK(theta.data()[i] == identity[i]);

  Tensor fl = net.refine(f_s, f_t);
  REQUIRE(fl.shape() == msf::Shape{1, 2, 8, 8});
  for (float v : fl.data()) CHECK(v == 0.0f);

  auto seg = net.segment(f_s, f_t);
  REQUIRE(seg.prob.shape() == msf::Shape{1, 1, 8, 8});
  for (float v : seg.prob.data()) CHECK(v == 0.5f);
  for (float v : seg.mask.data()) CHECK(v == 0.0f);
}

TEST_CASE("network inputs must be matched even-sized feature maps") {
  Rng rng(52);
  flow::FlowNet net(small_cfg(4), rng);
  Tensor good = wave_features(rng, 4, 8, 8);
  CHECK_THROWS_AS(net.localize(good, wave_features(rng, 4, 8, 10)), msf::Error);
  CHECK_THROWS_AS(net.localize(wave_features(rng, 4, 7, 8), wave_features(rng, 4, 7, 8)),
                  msf::Error);
  CHECK_THROWS_AS(net.refine(wave_features(rng, 3, 8, 8), wave_features(rng, 3, 8, 8)),
                  msf::Error);
}

TEST_CASE("affine warp with identity parameters returns the input bit for bit") {
  Rng rng(53);
  Tensor f = wave_features(rng, 3, 6, 10);
  Tensor warped = flow::affine_warp(f, flow::identity_params());
  REQUIRE(warped.shape() == f.shape());
  for (std::size_t i = 0; i < f.numel(); ++i) CHECK(warped.data()[i] == f.data()[i]);
}

TEST_CASE("translation parameters shift the sampled content") {
  Rng rng(54);
  const int h = 6, w = 9, s = 2;
  Tensor f = wave_features(rng, 2, h, w);
  std::vector<float> th = {1.f, 0.f, static_cast<float>(2.0 * s / (w - 1)),
                           0.f, 1.f, 0.f};
  Tensor warped = flow::affine_warp(f, Tensor::from_data({6}, th));
  for (int c = 0; c < 2; ++c) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const float got = warped.at({0, c, y, x});
        if (x + s <= w - 1) {
          CHECK(std::abs(got - f.at({0, c, y, x + s})) < 1e-4f);
        } else {
          CHECK(std::abs(got) < 1e-4f);  // taps fall outside, zero padded
        }
      }
    }
  }
}

TEST_CASE("composed grid evaluates affine of site plus flow") {
  Rng rng(55);
  const int h = 5, w = 6;
  std::vector<float> th = {1.05f, -0.08f, 0.12f, 0.06f, 0.93f, -0.2f};
  std::vector<float> fl(2 * h * w);
  for (auto& v : fl) v = static_cast<float>(rng.uniform(-0.2, 0.2));
  Tensor grid = flow::composed_grid(Tensor::from_data({6}, th),
                                    Tensor::from_data({1, 2, h, w}, fl), h, w);
  REQUIRE(grid.shape() == msf::Shape{1, h, w, 2});
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::size_t p = static_cast<std::size_t>(y) * w + x;
      const double qx = 2.0 * x / (w - 1) - 1.0 + fl[p];
      const double qy = 2.0 * y / (h - 1) - 1.0 + fl[h * w + p];
      CHECK(grid.at({0, y, x, 0}) ==
            doctest::Approx(th[0] * qx + th[1] * qy + th[2]).epsilon(1e-6));
      CHECK(grid.at({0, y, x, 1}) ==
            doctest::Approx(th[3] * qx + th[4] * qy + th[5]).epsilon(1e-6));
    }
  }
}

TEST_CASE("warping an image by the identity changes nothing") {
  Rng rng(56);
  Tensor image = testsup::blob_image(rng, 12, 10);
  Tensor batched = ops::reshape(image, {1, 3, 12, 10});
  Tensor out = flow::warp_image(batched, flow::identity_params(), zero_flow(6, 5));
  REQUIRE(out.shape() == batched.shape());
  for (std::size_t i = 0; i < out.numel(); ++i)
    CHECK(out.data()[i] == doctest::Approx(batched.data()[i]).epsilon(1e-5));
}

TEST_CASE("transform_points follows affine, flow and frame rescaling") {
  const int h = 32, w = 32;
  Tensor id = flow::identity_params();

  SUBCASE("identity is a no-op in a shared frame") {
    auto out = flow::transform_points(id, zero_flow(8, 8), {{10.0, 7.0}, {3.5, 20.25}},
                                      h, w, h, w);
    REQUIRE(out.size() == 2);
    CHECK(out[0].first == doctest::Approx(10.0).epsilon(1e-5));
    CHECK(out[0].second == doctest::Approx(7.0).epsilon(1e-5));
    CHECK(out[1].first == doctest::Approx(3.5).epsilon(1e-5));
    CHECK(out[1].second == doctest::Approx(20.25).epsilon(1e-5));
  }

  SUBCASE("identity rescales into a larger target frame") {
    auto out = flow::transform_points(id, zero_flow(8, 8), {{10.0, 7.0}}, h, w, 63, 63);
    CHECK(out[0].first == doctest::Approx(20.0).epsilon(1e-4));
    CHECK(out[0].second == doctest::Approx(14.0).epsilon(1e-4));
  }

  SUBCASE("a translation column moves points by whole pixels") {
    const int s = 5;
    Tensor th = Tensor::from_data(
        {6}, {1.f, 0.f, static_cast<float>(2.0 * s / (w - 1)), 0.f, 1.f, 0.f});
    auto out = flow::transform_points(th, zero_flow(8, 8), {{12.0, 9.0}}, h, w, h, w);
    CHECK(out[0].first == doctest::Approx(17.0).epsilon(1e-4));
    CHECK(out[0].second == doctest::Approx(9.0).epsilon(1e-4));
  }

  SUBCASE("constant flow offsets the normalized position before the affine") {
    Tensor fl = ops::concat_channels(Tensor::full({1, 1, 8, 8}, 0.1f),
                                     Tensor::full({1, 1, 8, 8}, -0.05f));
    auto out = flow::transform_points(id, fl, {{16.0, 16.0}}, h, w, h, w);
    CHECK(out[0].first == doctest::Approx(16.0 + 0.1 * (w - 1) / 2.0).epsilon(1e-4));
    CHECK(out[0].second == doctest::Approx(16.0 - 0.05 * (h - 1) / 2.0).epsilon(1e-4));
  }
}

TEST_CASE("dense pixel map covers every source pixel") {
  Tensor map = flow::dense_pixel_map(flow::identity_params(), zero_flow(4, 4), 8, 8, 16, 24);
  REQUIRE(map.shape() == msf::Shape{2, 8, 8});
  for (int y = 0; y < 8; ++y) {
    for (int x = 0; x < 8; ++x) {
      CHECK(map.at({0, y, x}) == doctest::Approx(x / 7.0 * 23.0).epsilon(1e-4));
      CHECK(map.at({1, y, x}) == doctest::Approx(y / 7.0 * 15.0).epsilon(1e-4));
    }
  }
}

TEST_CASE("feature alignment losses match their closed forms") {
  // Per-site difference (0.6, 0.8): unit norm, unit squared norm.
  Tensor f_s = ops::concat_channels(Tensor::full({1, 1, 3, 4}, 0.6f),
                                    Tensor::full({1, 1, 3, 4}, 0.8f));
  Tensor f_t = Tensor::zeros({1, 2, 3, 4});
  CHECK(flow::loss_affine(f_s, f_t).item() == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(flow::loss_affine(f_s, f_t, true).item() == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(flow::loss_flow(f_s, f_t).item() == doctest::Approx(1.0).epsilon(1e-6));

  // One site differing by (3, 4) among twelve sites.
  std::vector<float> one(2 * 3 * 4, 0.0f);
  one[0 * 12 + 5] = 3.0f;
  one[1 * 12 + 5] = 4.0f;
  Tensor f_one = Tensor::from_data({1, 2, 3, 4}, std::move(one));
  CHECK(flow::loss_affine(f_one, Tensor::zeros({1, 2, 3, 4})).item() ==
        doctest::Approx(5.0 / 12.0).epsilon(1e-5));

  // Identical maps cost (numerically) nothing.
  CHECK(flow::loss_affine(f_s, f_s).item() < 1e-5);

  CHECK_THROWS_AS(flow::loss_affine(f_s, Tensor::zeros({1, 2, 4, 3})), msf::Error);
}

TEST_CASE("correspondence loss is mean pulled-back pixel error over the diagonal") {
  const int n = 64;
  Tensor id = flow::identity_params();
  Tensor zf = zero_flow(4, 4);

  SUBCASE("a 3-4-5 offset under the identity") {
    std::vector<msf::data::Quad> corrs = {{10, 10, 13, 14}};
    const double want = 5.0 / std::sqrt(2.0 * n * n);
    CHECK(flow::loss_corr(corrs, id, zf, n, n).item() ==
          doctest::Approx(want).epsilon(1e-4));
  }

  SUBCASE("an exact correspondence costs nothing") {
    std::vector<msf::data::Quad> corrs = {{20, 30, 20, 30}};
    CHECK(flow::loss_corr(corrs, id, zf, n, n).item() < 1e-5);
  }

  SUBCASE("a matching translation column cancels the error") {
    const int s = 6;
    Tensor th = Tensor::from_data(
        {6}, {1.f, 0.f, static_cast<float>(2.0 * s / (n - 1)), 0.f, 1.f, 0.f});
    std::vector<msf::data::Quad> corrs = {{10, 10, 10 + s, 10}, {30, 40, 30 + s, 40}};
    CHECK(flow::loss_corr(corrs, th, zf, n, n).item() < 1e-5);
  }

  SUBCASE("rows average") {
    std::vector<msf::data::Quad> corrs = {{10, 10, 13, 14}, {20, 20, 20, 20}};
    const double want = 0.5 * 5.0 / std::sqrt(2.0 * n * n);
    CHECK(flow::loss_corr(corrs, id, zf, n, n).item() ==
          doctest::Approx(want).epsilon(1e-3));
  }

  CHECK_THROWS_AS(flow::loss_corr({}, id, zf, n, n), msf::Error);
}

TEST_CASE("mask loss is clamped binary cross entropy") {
  Tensor half = Tensor::full({1, 1, 4, 5}, 0.5f);
  Tensor proxy = flow::proxy_mask({{2.0, 2.0}}, 4, 5, 1.5);
  CHECK(flow::loss_mask(half, proxy).item() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-6));

  Tensor sure = Tensor::full({1, 1, 2, 2}, 1.0f);
  Tensor ones = Tensor::full({1, 1, 2, 2}, 1.0f);
  Tensor zeros = Tensor::zeros({1, 1, 2, 2});
  CHECK(flow::loss_mask(sure, ones).item() < 1e-6);
  // The clamp ceiling lives on the float32 lattice, so the confidently wrong
  // case pays -log(1 - float(1 - 1e-7)).
  const double ceiling = static_cast<float>(1.0 - 1e-7);
  CHECK(flow::loss_mask(sure, zeros).item() ==
        doctest::Approx(-std::log(1.0 - ceiling)).epsilon(1e-5));

  CHECK_THROWS_AS(flow::loss_mask(half, ones), msf::Error);
}

TEST_CASE("total loss weights its components") {
  auto scalar = [](double v) {
    return Tensor::from_data({1}, {static_cast<float>(v)});
  };
  CHECK(flow::loss_total(scalar(1), scalar(1), scalar(1), scalar(1)).item() ==
        doctest::Approx(7.0).epsilon(1e-6));
  CHECK(flow::loss_total(scalar(0), scalar(0), scalar(0), scalar(0)).item() ==
        doctest::Approx(0.0));
  flow::LossWeights w;
  w.gamma = 2.0;
  w.mu = 0.5;
  w.nu = 0.25;
  CHECK(flow::loss_total(scalar(1), scalar(1), scalar(1), scalar(1), w).item() ==
        doctest::Approx(3.75).epsilon(1e-6));
  CHECK(flow::loss_total(scalar(0.5), scalar(2), scalar(1), scalar(3)).item() ==
        doctest::Approx(0.5 + 8 + 1 + 3).epsilon(1e-6));
}

TEST_CASE("proxy masks are inclusive lattice disks") {
  Tensor m = flow::proxy_mask({{10.0, 10.0}}, 21, 21, 5.0);
  REQUIRE(m.shape() == msf::Shape{1, 1, 21, 21});
  double total = 0.0;
  for (int y = 0; y < 21; ++y) {
    for (int x = 0; x < 21; ++x) {
      const float v = m.at({0, 0, y, x});
      CHECK((v == 0.0f || v == 1.0f));
      const bool in = (x - 10) * (x - 10) + (y - 10) * (y - 10) <= 25;
      CHECK(v == (in ? 1.0f : 0.0f));
      total += v;
    }
  }
  CHECK(total == doctest::Approx(81.0));  // lattice count of a radius-5 disk

  // Union of two disks, one clipped by the frame.
  Tensor two = flow::proxy_mask({{0.0, 0.0}, {6.0, 6.0}}, 8, 8, 2.0);
  CHECK(two.at({0, 0, 0, 0}) == 1.0f);
  CHECK(two.at({0, 0, 0, 2}) == 1.0f);
  CHECK(two.at({0, 0, 6, 6}) == 1.0f);
  CHECK(two.at({0, 0, 3, 3}) == 0.0f);

  CHECK_THROWS_AS(flow::proxy_mask({{0.0, 0.0}}, 4, 4, -1.0), msf::Error);
}

TEST_CASE("segmentation probabilities stay in range with a consistent mask") {
  Rng rng(57);
  flow::FlowNet net(small_cfg(4), rng);
  Tensor f_s = wave_features(rng, 4, 8, 8);
  Tensor f_t = wave_features(rng, 4, 8, 8);
  Tensor proxy = flow::proxy_mask({{3.0, 3.0}}, 8, 8, 2.5);

  msf::Sgd opt(net.parameters(), 0.5, 0.0);
  for (int step = 0; step < 5; ++step) {
    Tensor loss = flow::loss_mask(net.segment_prob(f_s, f_t), proxy);
    loss.backward();
    opt.step();
    opt.zero_grad();
  }

  auto seg = net.segment(f_s, f_t);
  bool moved = false;
  for (std::size_t i = 0; i < seg.prob.numel(); ++i) {
    const float p = seg.prob.data()[i];
    CHECK(p > 0.0f);
    CHECK(p < 1.0f);
    CHECK(seg.mask.data()[i] == (p > 0.5f ? 1.0f : 0.0f));
    if (std::abs(p - 0.5f) > 1e-3f) moved = true;
  }
  CHECK(moved);
}

TEST_CASE("the localization head learns a known translation") {
  Rng rng(58);
  Tensor f_t = wave_features(rng, 6, 16, 16);
  const std::vector<float> want = {1.f, 0.f, 0.1f, 0.f, 1.f, 0.f};
  Tensor f_s = flow::affine_warp(f_t, Tensor::from_data({6}, want));

  Rng net_rng(59);
  flow::FlowNet net(small_cfg(6), net_rng);
  msf::Sgd opt(net.parameters(), 0.01, 0.9);
  const double initial =
      flow::loss_affine(f_s, flow::affine_warp(f_t, net.localize(f_s, f_t))).item();
  for (int step = 0; step < 500; ++step) {
    if (step == 300) opt.set_lr(0.002);  // cool down to settle the momentum
    Tensor theta = net.localize(f_s, f_t);
    Tensor loss = flow::loss_affine(f_s, flow::affine_warp(f_t, theta));
    loss.backward();
    opt.step();
    opt.zero_grad();
  }
  Tensor theta = net.localize(f_s, f_t);
  const double final_loss =
      flow::loss_affine(f_s, flow::affine_warp(f_t, theta)).item();
  CHECK(final_loss < 0.3 * initial);
  for (int i = 0; i < 6; ++i)
    CHECK(std::abs(theta.data()[i] - want[i]) < 0.02);
}

TEST_CASE("the flow trainer records weighted component curves") {
  Rng rng(60);
  auto sample = make_pair_sample(rng);
  REQUIRE_FALSE(sample.corrs.empty());
  Rng net_rng(61);
  Backbone backbone(pair_backbone(), net_rng);
  flow::FlowNet flownet(small_cfg(8), net_rng);

  flow::FlowTrainConfig cfg;
  cfg.epochs = 3;
  cfg.lr = 1e-3;
  cfg.net = small_cfg(8);
  auto curve = flow::train_flownet({sample}, backbone, flownet, cfg, Rng(6));

  REQUIRE(curve.affine.size() == 3);
  REQUIRE(curve.flow.size() == 3);
  REQUIRE(curve.corr.size() == 3);
  REQUIRE(curve.mask.size() == 3);
  REQUIRE(curve.total.size() == 3);
  CHECK_FALSE(curve.corr_skipped);

  // Before the first step the flow is zero and the mask head is uniform, so
  // the flow term equals the affine term and each direction pays log(2).
  CHECK(curve.flow[0] == doctest::Approx(curve.affine[0]).epsilon(1e-9));
  CHECK(curve.mask[0] == doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-6));

  for (int e = 0; e < 3; ++e) {
    CHECK(std::isfinite(curve.total[e]));
    CHECK(curve.total[e] == doctest::Approx(curve.affine[e] + 4.0 * curve.flow[e] +
                                            curve.corr[e] + curve.mask[e])
                                .epsilon(1e-5));
  }
}

TEST_CASE("pairs without correspondences skip the mined losses") {
  Rng rng(62);
  auto pair = testsup::translated_pair(rng, 32, 3, 5);
  enc::TrainSample sample{pair.a, pair.b, {}};
  Rng net_rng(63);
  Backbone backbone(pair_backbone(), net_rng);
  flow::FlowNet flownet(small_cfg(8), net_rng);

  flow::FlowTrainConfig cfg;
  cfg.epochs = 2;
  cfg.lr = 1e-3;
  cfg.net = small_cfg(8);
  auto curve = flow::train_flownet({sample}, backbone, flownet, cfg, Rng(7));
  CHECK(curve.corr_skipped);
  for (double v : curve.corr) CHECK(v == 0.0);
  for (double v : curve.mask) CHECK(v == 0.0);
}

TEST_CASE("the encoder stays frozen unless explicitly trained") {
  Rng rng(64);
  auto sample = make_pair_sample(rng);
  Rng net_rng(65);
  Backbone backbone(pair_backbone(), net_rng);
  std::vector<std::vector<float>> before;
  for (const auto& p : backbone.parameters())
    before.emplace_back(p.data().begin(), p.data().end());

  flow::FlowTrainConfig cfg;
  cfg.epochs = 2;
  cfg.lr = 1e-2;
  cfg.net = small_cfg(8);

  {
    flow::FlowNet flownet(small_cfg(8), net_rng);
    flow::train_flownet({sample}, backbone, flownet, cfg, Rng(8));
    auto params = backbone.parameters();
    for (std::size_t i = 0; i < params.size(); ++i)
      for (std::size_t j = 0; j < before[i].size(); ++j)
        CHECK(params[i].data()[j] == before[i][j]);
  }

  {
    flow::FlowNet flownet(small_cfg(8), net_rng);
    cfg.train_encoder = true;
    flow::train_flownet({sample}, backbone, flownet, cfg, Rng(9));
    bool changed = false;
    auto params = backbone.parameters();
    for (std::size_t i = 0; i < params.size() && !changed; ++i)
      for (std::size_t j = 0; j < before[i].size() && !changed; ++j)
        changed = params[i].data()[j] != before[i][j];
    CHECK(changed);
  }
}

TEST_CASE("a vanishing learning rate keeps every component flat") {
  Rng rng(66);
  auto sample = make_pair_sample(rng);
  Rng net_rng(67);
  Backbone backbone(pair_backbone(), net_rng);
  flow::FlowNet flownet(small_cfg(8), net_rng);

  flow::FlowTrainConfig cfg;
  cfg.epochs = 3;
  cfg.lr = 1e-35;
  cfg.momentum = 0.0;
  cfg.net = small_cfg(8);
  auto curve = flow::train_flownet({sample}, backbone, flownet, cfg, Rng(10));
  for (int e = 1; e < 3; ++e) {
    CHECK(curve.affine[e] == doctest::Approx(curve.affine[0]).epsilon(1e-9));
    CHECK(curve.flow[e] == doctest::Approx(curve.flow[0]).epsilon(1e-9));
    CHECK(curve.corr[e] == doctest::Approx(curve.corr[0]).epsilon(1e-9));
    CHECK(curve.mask[e] == doctest::Approx(curve.mask[0]).epsilon(1e-9));
    CHECK(curve.total[e] == doctest::Approx(curve.total[0]).epsilon(1e-9));
  }
}

TEST_CASE("flow network checkpoints round trip") {
  Rng rng(68);
  flow::FlowNet net(small_cfg(4), rng);
  // Move off the zero init so the round trip is non-trivial.
  Tensor f_s = wave_features(rng, 4, 8, 8);
  Tensor f_t = wave_features(rng, 4, 8, 8);
  msf::Sgd opt(net.parameters(), 0.1, 0.0);
  for (int i = 0; i < 3; ++i) {
    Tensor loss = flow::loss_affine(f_s, flow::affine_warp(f_t, net.localize(f_s, f_t)));
    loss.backward();
    opt.step();
    opt.zero_grad();
  }

  auto dir = testsup::scratch_dir("flownet-ckpt");
  net.save(dir);
  flow::FlowNet back = flow::FlowNet::load(dir);
  CHECK(back.config().feat_dim == 4);
  CHECK(back.config().loc_hidden == 16);
  CHECK(back.config().trunk_hidden == 8);

  auto a = net.named_parameters();
  auto b = back.named_parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].first == b[i].first);
    REQUIRE(a[i].second.shape() == b[i].second.shape());
    for (std::size_t j = 0; j < a[i].second.numel(); ++j)
      CHECK(a[i].second.data()[j] == b[i].second.data()[j]);
  }

  Tensor t1 = net.localize(f_s, f_t);
  Tensor t2 = back.localize(f_s, f_t);
  for (int i = 0; i < 6; ++i) CHECK(t1.data()[i] == t2.data()[i]);
}
