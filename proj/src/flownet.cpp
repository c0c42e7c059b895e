#include "msflow/flownet.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>

#include <json.hpp>

#include "msflow/checkpoint.hpp"
#include "msflow/common.hpp"
#include "msflow/ops.hpp"
#include "msflow/optim.hpp"

namespace msf::flow {

namespace {

using json = nlohmann::json;

Tensor he_conv(int out_ch, int in_ch, int k, Rng& rng) {
  std::vector<float> data(static_cast<std::size_t>(out_ch) * in_ch * k * k);
  const double stddev = std::sqrt(2.0 / (static_cast<double>(in_ch) * k * k));
  for (auto& v : data) v = static_cast<float>(rng.normal(0.0, stddev));
  return Tensor::param({out_ch, in_ch, k, k}, std::move(data));
}

Tensor zero_param(Shape shape) {
  return Tensor::param(std::move(shape),
                       std::vector<float>(shape_numel(shape), 0.0f));
}

void check_pair(const Tensor& a, const Tensor& b, int feat_dim, const char* who) {
  MSF_CHECK(a.defined() && b.defined() && a.rank() == 4 && b.rank() == 4,
            who << ": expected [1,D,h,w] feature maps");
  MSF_CHECK(a.shape() == b.shape(), who << ": feature shapes " << shape_str(a.shape())
                                        << " and " << shape_str(b.shape())
                                        << " differ");
  MSF_CHECK(a.dim(0) == 1 && a.dim(1) == feat_dim,
            who << ": expected [1," << feat_dim << ",h,w], got "
                << shape_str(a.shape()));
  MSF_CHECK(a.dim(2) >= 2 && a.dim(3) >= 2 && a.dim(2) % 2 == 0 && a.dim(3) % 2 == 0,
            who << ": feature extent " << a.dim(2) << "x" << a.dim(3)
                << " must be even and at least 2");
}

Tensor one_minus(const Tensor& x) { return ops::add_scalar(ops::mul_scalar(x, -1.0), 1.0); }

Tensor feature_loss(const Tensor& a, const Tensor& b, bool squared, const char* who) {
  MSF_CHECK(a.defined() && b.defined() && a.shape() == b.shape(),
            who << ": shapes " << shape_str(a.shape()) << " and "
                << shape_str(b.shape()) << " differ");
  Tensor diff = ops::sub(a, b);
  if (squared) return ops::mean_all(ops::sum_channels(ops::square(diff)));
  return ops::mean_all(ops::channel_l2_norm(diff, 1e-12));
}

}  // namespace

FlowNet::FlowNet(const FlowNetConfig& config, Rng& rng) : config_(config) {
  MSF_CHECK(config.feat_dim >= 1 && config.loc_hidden >= 1 && config.trunk_hidden >= 1,
            "flownet: channel counts must be positive");
  const int d2 = 2 * config.feat_dim;
  const int lc = config.loc_hidden;
  const int tc = config.trunk_hidden;

  Rng r1 = rng.stream("loc1");
  Rng r2 = rng.stream("loc2");
  Rng r3 = rng.stream("enc1");
  Rng r4 = rng.stream("enc2");
  Rng r5 = rng.stream("dec");
  loc1_k_ = he_conv(lc, d2, 3, r1);
  loc1_b_ = zero_param({lc});
  loc2_k_ = he_conv(lc, lc, 3, r2);
  loc2_b_ = zero_param({lc});
  // Zero weight with identity bias: the predicted transform starts at the
  // identity no matter what the inputs are.
  loc_w_ = zero_param({6, lc});
  loc_b_ = Tensor::param({6}, {1.0f, 0.0f, 0.0f, 0.0f, 1.0f, 0.0f});
  enc1_k_ = he_conv(tc, d2, 3, r3);
  enc1_b_ = zero_param({tc});
  enc2_k_ = he_conv(tc, tc, 3, r4);
  enc2_b_ = zero_param({tc});
  dec_k_ = he_conv(tc, 2 * tc, 3, r5);
  dec_b_ = zero_param({tc});
  flow_k_ = zero_param({2, tc, 3, 3});
  flow_b_ = zero_param({2});
  seg_k_ = zero_param({1, tc, 3, 3});
  seg_b_ = zero_param({1});
}

AffineParams FlowNet::localize(const Tensor& f_s, const Tensor& f_t) const {
  check_pair(f_s, f_t, config_.feat_dim, "localize");
  Tensor x = ops::concat_channels(f_s, f_t);
  x = ops::relu(ops::conv2d(x, loc1_k_, loc1_b_, 1, 1, 1));
  x = ops::max_pool2(x);
  x = ops::relu(ops::conv2d(x, loc2_k_, loc2_b_, 1, 1, 1));
  x = ops::global_avg_pool(x);
  x = ops::linear(x, loc_w_, loc_b_);
  return ops::reshape(x, {6});
}

Tensor FlowNet::trunk(const Tensor& f_s, const Tensor& f_t_warped) const {
  check_pair(f_s, f_t_warped, config_.feat_dim, "flow trunk");
  Tensor x = ops::concat_channels(f_s, f_t_warped);
  Tensor e1 = ops::relu(ops::conv2d(x, enc1_k_, enc1_b_, 1, 1, 1));
  Tensor e2 = ops::relu(ops::conv2d(ops::max_pool2(e1), enc2_k_, enc2_b_, 1, 1, 1));
  Tensor up = ops::concat_channels(ops::upsample2_nearest(e2), e1);
  return ops::relu(ops::conv2d(up, dec_k_, dec_b_, 1, 1, 1));
}

FlowField FlowNet::refine(const Tensor& f_s, const Tensor& f_t_warped) const {
  return ops::conv2d(trunk(f_s, f_t_warped), flow_k_, flow_b_, 1, 1, 1);
}

Tensor FlowNet::segment_prob(const Tensor& f_s, const Tensor& f_t_warped) const {
  return ops::sigmoid(ops::conv2d(trunk(f_s, f_t_warped), seg_k_, seg_b_, 1, 1, 1));
}

SegmentationOutput FlowNet::segment(const Tensor& f_s, const Tensor& f_t_warped) const {
  SegmentationOutput out;
  out.prob = segment_prob(f_s, f_t_warped);
  auto probs = out.prob.data();
  std::vector<float> mask(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) mask[i] = probs[i] > 0.5f ? 1.0f : 0.0f;
  out.mask = Tensor::from_data(out.prob.shape(), std::move(mask));
  return out;
}

std::vector<Tensor> FlowNet::parameters() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

std::vector<std::pair<std::string, Tensor>> FlowNet::named_parameters() const {
  return {{"loc1.kernel", loc1_k_}, {"loc1.bias", loc1_b_}, {"loc2.kernel", loc2_k_},
          {"loc2.bias", loc2_b_},   {"loc_fc.weight", loc_w_}, {"loc_fc.bias", loc_b_},
          {"enc1.kernel", enc1_k_}, {"enc1.bias", enc1_b_}, {"enc2.kernel", enc2_k_},
          {"enc2.bias", enc2_b_},   {"dec.kernel", dec_k_}, {"dec.bias", dec_b_},
          {"flow.kernel", flow_k_}, {"flow.bias", flow_b_}, {"seg.kernel", seg_k_},
          {"seg.bias", seg_b_}};
}

void FlowNet::save(const std::filesystem::path& dir) const {
  save_named_tensors(dir, named_parameters());
  json j;
  j["feat_dim"] = config_.feat_dim;
  j["loc_hidden"] = config_.loc_hidden;
  j["trunk_hidden"] = config_.trunk_hidden;
  std::ofstream out(dir / "flownet.json");
  MSF_CHECK(out.good(), "cannot write " << (dir / "flownet.json").string());
  out << j.dump(2) << "\n";
}

FlowNet FlowNet::load(const std::filesystem::path& dir) {
  std::ifstream in(dir / "flownet.json");
  MSF_CHECK(in.good(), "cannot read " << (dir / "flownet.json").string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    MSF_CHECK(false, (dir / "flownet.json").string() << ": " << e.what());
  }
  FlowNetConfig config;
  config.feat_dim = j.at("feat_dim").get<int>();
  config.loc_hidden = j.at("loc_hidden").get<int>();
  config.trunk_hidden = j.at("trunk_hidden").get<int>();
  Rng rng(0);
  FlowNet net(config, rng);
  std::map<std::string, Tensor> stored;
  for (auto& [name, t] : load_named_tensors(dir)) stored.emplace(name, std::move(t));
  for (auto& [name, param] : net.named_parameters()) {
    auto it = stored.find(name);
    MSF_CHECK(it != stored.end(), "flownet checkpoint: missing tensor '" << name << "'");
    MSF_CHECK(it->second.shape() == param.shape(),
              "flownet checkpoint: tensor '" << name << "' has shape "
                                             << shape_str(it->second.shape())
                                             << ", expected "
                                             << shape_str(param.shape()));
    auto src = it->second.data();
    Tensor dst_param = param;
    auto dst = dst_param.mutable_data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
  return net;
}

AffineParams identity_params() {
  return Tensor::from_data({6}, {1.0f, 0.0f, 0.0f, 0.0f, 1.0f, 0.0f});
}

Tensor affine_warp(const Tensor& f_t, const AffineParams& theta) {
  MSF_CHECK(f_t.defined() && f_t.rank() == 4, "affine_warp: expected [N,C,h,w]");
  return ops::grid_sample(f_t, ops::affine_grid(theta, f_t.dim(2), f_t.dim(3)));
}

Tensor flow_warp(const Tensor& f_t_warped, const FlowField& flow) {
  MSF_CHECK(f_t_warped.defined() && f_t_warped.rank() == 4,
            "flow_warp: expected [N,C,h,w]");
  MSF_CHECK(flow.defined() && flow.rank() == 4 && flow.dim(1) == 2 &&
                flow.dim(2) == f_t_warped.dim(2) && flow.dim(3) == f_t_warped.dim(3),
            "flow_warp: flow " << shape_str(flow.shape()) << " does not cover features "
                               << shape_str(f_t_warped.shape()));
  Tensor base = ops::affine_grid(identity_params(), f_t_warped.dim(2), f_t_warped.dim(3));
  return ops::grid_sample(f_t_warped, ops::add_flow_to_grid(base, flow));
}

Tensor loss_affine(const Tensor& f_s, const Tensor& f_t_warped, bool squared) {
  return feature_loss(f_s, f_t_warped, squared, "loss_affine");
}

Tensor loss_flow(const Tensor& f_s, const Tensor& f_t_refined, bool squared) {
  return feature_loss(f_s, f_t_refined, squared, "loss_flow");
}

Tensor loss_corr(const std::vector<data::Quad>& corrs, const AffineParams& theta,
                 const FlowField& flow, int h_s, int w_s) {
  MSF_CHECK(!corrs.empty(), "loss_corr: no correspondences");
  MSF_CHECK(h_s >= 2 && w_s >= 2, "loss_corr: frame " << h_s << "x" << w_s
                                                      << " must be at least 2x2");
  MSF_CHECK(flow.defined() && flow.rank() == 4 && flow.dim(0) == 1 && flow.dim(1) == 2,
            "loss_corr: flow must be [1,2,h,w]");
  const int k = static_cast<int>(corrs.size());
  std::vector<float> tgt(static_cast<std::size_t>(k) * 2);
  std::vector<float> src(static_cast<std::size_t>(k) * 2);
  for (int i = 0; i < k; ++i) {
    tgt[2 * i] = static_cast<float>(corrs[i].xt);
    tgt[2 * i + 1] = static_cast<float>(corrs[i].yt);
    src[2 * i] = static_cast<float>(corrs[i].xs);
    src[2 * i + 1] = static_cast<float>(corrs[i].ys);
  }
  const double sx = 2.0 / (w_s - 1);
  const double sy = 2.0 / (h_s - 1);
  Tensor tgt_norm = ops::colwise_affine(Tensor::from_data({k, 2}, std::move(tgt)),
                                        sx, sy, -1.0, -1.0);
  // Pull each target point back: invert the affine, then subtract the flow
  // sampled at the resulting source location (u is small, so the inverse of
  // p + u(p) is taken to first order).
  Tensor q = ops::affine_inverse_points(theta, tgt_norm);
  Tensor u = ops::grid_sample(flow, ops::reshape(q, {1, k, 1, 2}));
  Tensor back = ops::sub(q, ops::transpose2d(ops::reshape(u, {2, k})));
  Tensor back_px =
      ops::colwise_affine(back, (w_s - 1) / 2.0, (h_s - 1) / 2.0, (w_s - 1) / 2.0,
                          (h_s - 1) / 2.0);
  Tensor err = ops::row_l2_norm(ops::sub(back_px, Tensor::from_data({k, 2}, std::move(src))),
                                1e-12);
  const double diag = std::sqrt(static_cast<double>(h_s) * h_s +
                                static_cast<double>(w_s) * w_s);
  return ops::mul_scalar(ops::mean_all(err), 1.0 / diag);
}

Tensor loss_mask(const Tensor& prob, const Tensor& proxy) {
  MSF_CHECK(prob.defined() && proxy.defined() && prob.shape() == proxy.shape(),
            "loss_mask: shapes " << shape_str(prob.shape()) << " and "
                                 << shape_str(proxy.shape()) << " differ");
  Tensor p = ops::clamp(prob, 1e-7, 1.0 - 1e-7);
  Tensor ll = ops::add(ops::mul(proxy, ops::log(p)),
                       ops::mul(one_minus(proxy), ops::log(one_minus(p))));
  return ops::mul_scalar(ops::mean_all(ll), -1.0);
}

Tensor loss_total(const Tensor& l_affine, const Tensor& l_flow, const Tensor& l_corr,
                  const Tensor& l_mask, const LossWeights& weights) {
  Tensor out = ops::add(l_affine, ops::mul_scalar(l_flow, weights.gamma));
  out = ops::add(out, ops::mul_scalar(l_corr, weights.mu));
  return ops::add(out, ops::mul_scalar(l_mask, weights.nu));
}

Tensor proxy_mask(const std::vector<std::pair<double, double>>& points, int h, int w,
                  double radius) {
  MSF_CHECK(h >= 1 && w >= 1, "proxy_mask: empty extent");
  MSF_CHECK(radius >= 0.0, "proxy_mask: negative radius");
  std::vector<float> mask(static_cast<std::size_t>(h) * w, 0.0f);
  const double r2 = radius * radius;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (const auto& [px, py] : points) {
        const double dx = x - px;
        const double dy = y - py;
        if (dx * dx + dy * dy <= r2) {
          mask[static_cast<std::size_t>(y) * w + x] = 1.0f;
          break;
        }
      }
    }
  }
  return Tensor::from_data({1, 1, h, w}, std::move(mask));
}

Tensor composed_grid(const AffineParams& theta, const FlowField& flow, int h, int w) {
  MSF_CHECK(theta.defined() && theta.rank() == 1 && theta.dim(0) == 6,
            "composed_grid: theta must be [6]");
  MSF_CHECK(flow.defined() && flow.rank() == 4 && flow.dim(0) == 1 && flow.dim(1) == 2 &&
                flow.dim(2) == h && flow.dim(3) == w,
            "composed_grid: flow " << shape_str(flow.shape()) << " does not match "
                                   << h << "x" << w);
  auto ts = theta.data();
  auto fs = flow.data();
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  std::vector<float> out(plane * 2);
  for (int y = 0; y < h; ++y) {
    const double yn = h > 1 ? 2.0 * y / (h - 1) - 1.0 : 0.0;
    for (int x = 0; x < w; ++x) {
      const double xn = w > 1 ? 2.0 * x / (w - 1) - 1.0 : 0.0;
      const std::size_t p = static_cast<std::size_t>(y) * w + x;
      const double qx = xn + fs[p];
      const double qy = yn + fs[plane + p];
      out[2 * p] = static_cast<float>(ts[0] * qx + ts[1] * qy + ts[2]);
      out[2 * p + 1] = static_cast<float>(ts[3] * qx + ts[4] * qy + ts[5]);
    }
  }
  return Tensor::from_data({1, h, w, 2}, std::move(out));
}

Tensor warp_image(const Tensor& image, const AffineParams& theta, const FlowField& flow) {
  MSF_CHECK(image.defined() && image.rank() == 4, "warp_image: expected [1,C,H,W]");
  NoGradGuard guard;
  const int h = image.dim(2);
  const int w = image.dim(3);
  Tensor flow_up = ops::bilinear_resize(flow, h, w);
  return ops::grid_sample(image, composed_grid(theta, flow_up, h, w));
}

Tensor dense_pixel_map(const AffineParams& theta, const FlowField& flow, int h_s,
                       int w_s, int h_t, int w_t) {
  MSF_CHECK(h_s >= 1 && w_s >= 1 && h_t >= 2 && w_t >= 2,
            "dense_pixel_map: degenerate frame");
  NoGradGuard guard;
  Tensor flow_up = ops::bilinear_resize(flow, h_s, w_s);
  Tensor grid = composed_grid(theta, flow_up, h_s, w_s);  // [1,h_s,w_s,2] normalized
  auto g = grid.data();
  const std::size_t plane = static_cast<std::size_t>(h_s) * w_s;
  std::vector<float> map(plane * 2);
  for (std::size_t p = 0; p < plane; ++p) {
    map[p] = static_cast<float>((g[2 * p] + 1.0) * 0.5 * (w_t - 1));
    map[plane + p] = static_cast<float>((g[2 * p + 1] + 1.0) * 0.5 * (h_t - 1));
  }
  return Tensor::from_data({2, h_s, w_s}, std::move(map));
}

std::vector<std::pair<double, double>> transform_points(
    const AffineParams& theta, const FlowField& flow,
    const std::vector<std::pair<double, double>>& points_s, int h_s, int w_s, int h_t,
    int w_t) {
  MSF_CHECK(h_s >= 2 && w_s >= 2 && h_t >= 2 && w_t >= 2,
            "transform_points: degenerate frame");
  if (points_s.empty()) return {};
  NoGradGuard guard;
  const int k = static_cast<int>(points_s.size());
  std::vector<float> grid(static_cast<std::size_t>(k) * 2);
  for (int i = 0; i < k; ++i) {
    grid[2 * i] = static_cast<float>(2.0 * points_s[i].first / (w_s - 1) - 1.0);
    grid[2 * i + 1] = static_cast<float>(2.0 * points_s[i].second / (h_s - 1) - 1.0);
  }
  Tensor u = ops::grid_sample(flow, Tensor::from_data({1, k, 1, 2}, grid));  // [1,2,k,1]
  auto ud = u.data();
  auto ts = theta.data();
  std::vector<std::pair<double, double>> out(points_s.size());
  for (int i = 0; i < k; ++i) {
    const double qx = grid[2 * i] + ud[i];
    const double qy = grid[2 * i + 1] + ud[static_cast<std::size_t>(k) + i];
    const double tx = ts[0] * qx + ts[1] * qy + ts[2];
    const double ty = ts[3] * qx + ts[4] * qy + ts[5];
    out[static_cast<std::size_t>(i)] = {(tx + 1.0) * 0.5 * (w_t - 1),
                                        (ty + 1.0) * 0.5 * (h_t - 1)};
  }
  return out;
}

FlowTrainCurve train_flownet(const std::vector<enc::TrainSample>& samples, Backbone& net,
                             FlowNet& flownet, const FlowTrainConfig& config, Rng rng) {
  MSF_CHECK(!samples.empty(), "train_flownet: no training pairs");
  MSF_CHECK(config.epochs >= 1, "train_flownet: epochs must be >= 1");

  std::vector<Tensor> params = flownet.parameters();
  if (config.train_encoder) {
    for (Tensor& p : net.parameters()) params.push_back(p);
  }
  Sgd opt(params, config.lr, config.momentum);
  FlowTrainCurve curve;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    Rng epoch_rng = rng.stream("epoch").stream(static_cast<std::uint64_t>(epoch));
    std::vector<std::size_t> order(samples.size());
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[static_cast<std::size_t>(
                                  epoch_rng.uniform_int(0, static_cast<int>(i) - 1))]);
    }

    double acc_aff = 0, acc_flow = 0, acc_corr = 0, acc_mask = 0, acc_total = 0;
    for (std::size_t idx : order) {
      const enc::TrainSample& sample = samples[idx];
      MSF_CHECK(sample.image_a.shape() == sample.image_b.shape(),
                "train_flownet: pair images must share one size, got "
                    << shape_str(sample.image_a.shape()) << " vs "
                    << shape_str(sample.image_b.shape()));
      const int ih = sample.image_a.dim(1);
      const int iw = sample.image_a.dim(2);

      Tensor fa, fb;
      if (config.train_encoder) {
        fa = enc::extract_features(net, sample.image_a);
        fb = enc::extract_features(net, sample.image_b);
      } else {
        NoGradGuard guard;
        fa = enc::extract_features(net, sample.image_a);
        fb = enc::extract_features(net, sample.image_b);
      }
      const int fh = fa.dim(2);
      const int fw = fa.dim(3);
      // Image px -> feature px, align-corners; the proxy radius shrinks by
      // the mean axis factor.
      const double fx = iw > 1 ? static_cast<double>(fw - 1) / (iw - 1) : 1.0;
      const double fy = ih > 1 ? static_cast<double>(fh - 1) / (ih - 1) : 1.0;
      const double feat_radius = config.mask_radius * 0.5 * (fx + fy);

      Tensor total;
      double v_aff = 0, v_flow = 0, v_corr = 0, v_mask = 0;
      for (int dir = 0; dir < 2; ++dir) {
        const Tensor& f_s = dir == 0 ? fa : fb;
        const Tensor& f_t = dir == 0 ? fb : fa;
        std::vector<data::Quad> corrs;
        corrs.reserve(sample.corrs.size());
        for (const auto& q : sample.corrs) {
          corrs.push_back(dir == 0 ? q : data::Quad{q.xt, q.yt, q.xs, q.ys});
        }

        Tensor theta = flownet.localize(f_s, f_t);
        Tensor warped = affine_warp(f_t, theta);
        Tensor l_aff = loss_affine(f_s, warped, config.squared);
        Tensor fl = flownet.refine(f_s, warped);
        Tensor l_flow = loss_flow(f_s, flow_warp(warped, fl), config.squared);

        Tensor l_corr = Tensor::from_data({1}, {0.0f});
        Tensor l_mask = Tensor::from_data({1}, {0.0f});
        if (corrs.empty()) {
          curve.corr_skipped = true;
        } else {
          l_corr = loss_corr(corrs, theta, fl, ih, iw);
          std::vector<std::pair<double, double>> pts;
          pts.reserve(corrs.size());
          for (const auto& q : corrs) pts.emplace_back(q.xs * fx, q.ys * fy);
          l_mask = loss_mask(flownet.segment_prob(f_s, warped),
                             proxy_mask(pts, fh, fw, feat_radius));
        }

        v_aff += l_aff.item();
        v_flow += l_flow.item();
        v_corr += l_corr.item();
        v_mask += l_mask.item();
        Tensor dir_total = loss_total(l_aff, l_flow, l_corr, l_mask, config.weights);
        total = dir == 0 ? dir_total : ops::add(total, dir_total);
      }

      const double value = total.item();
      MSF_CHECK(std::isfinite(value), "train_flownet: non-finite loss at epoch "
                                          << epoch << ", sample " << idx);
      total.backward();
      opt.step();
      opt.zero_grad();
      acc_aff += v_aff;
      acc_flow += v_flow;
      acc_corr += v_corr;
      acc_mask += v_mask;
      acc_total += value;
    }

    const double n = static_cast<double>(samples.size());
    curve.affine.push_back(acc_aff / n);
    curve.flow.push_back(acc_flow / n);
    curve.corr.push_back(acc_corr / n);
    curve.mask.push_back(acc_mask / n);
    curve.total.push_back(acc_total / n);
  }
  return curve;
}

}  // namespace msf::flow
