#include "msflow/cli.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "msflow/checkpoint.hpp"
#include "msflow/common.hpp"
#include "msflow/config.hpp"
#include "msflow/dataset.hpp"
#include "msflow/encoder.hpp"
#include "msflow/eval.hpp"
#include "msflow/flownet.hpp"
#include "msflow/image.hpp"
#include "msflow/miner.hpp"
#include "msflow/model.hpp"
#include "msflow/ops.hpp"

namespace msf::cli {

namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

struct CommonArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  int jobs = 1;
  std::string out = "out";
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config, "run configuration JSON")->required();
  cmd->add_option("--seed", args.seed, "override the config seed");
  cmd->add_option("--jobs", args.jobs, "worker cap (1 = serial)")
      ->check(CLI::PositiveNumber);
  cmd->add_option("--out", args.out, "output directory");
}

cfg::RunConfig setup(const CommonArgs& args) {
  set_max_jobs(args.jobs);
  cfg::RunConfig config = cfg::load_config(args.config);
  if (args.seed.has_value()) config.seed = *args.seed;
  fs::create_directories(args.out);
  return config;
}

Backbone make_backbone(const cfg::RunConfig& config, const std::string& ckpt, Rng& root) {
  if (!ckpt.empty()) return Backbone::load(ckpt);
  Rng init = root.stream("encoder-init");
  return Backbone(config.backbone, init);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  MSF_CHECK(out.good(), "cannot write '" << path.string() << "'");
  out << text;
  MSF_CHECK(out.good(), "failed writing '" << path.string() << "'");
}

std::vector<enc::TrainSample> build_samples(const data::Dataset& ds,
                                            const std::vector<data::PairRecord>& records) {
  std::vector<enc::TrainSample> samples;
  samples.reserve(records.size());
  for (const auto& rec : records) {
    MSF_CHECK(ds.has_image(rec.a) && ds.has_image(rec.b),
              "pair " << rec.a << ":" << rec.b << " names images missing from '"
                      << ds.root.string() << "'");
    samples.push_back({ds.load(rec.a), ds.load(rec.b), rec.corrs});
  }
  return samples;
}

std::pair<std::string, std::string> split_pair_id(const std::string& spec) {
  const auto colon = spec.find(':');
  MSF_CHECK(colon != std::string::npos && colon > 0 && colon + 1 < spec.size(),
            "--pair expects '<id>:<id>', got '" << spec << "'");
  return {spec.substr(0, colon), spec.substr(colon + 1)};
}

std::pair<double, double> parse_point(const std::string& spec, const char* flag) {
  const auto comma = spec.find(',');
  MSF_CHECK(comma != std::string::npos && comma > 0 && comma + 1 < spec.size(),
            flag << " expects 'x,y', got '" << spec << "'");
  try {
    return {std::stod(spec.substr(0, comma)), std::stod(spec.substr(comma + 1))};
  } catch (const std::exception&) {
    MSF_CHECK(false, flag << " expects numeric 'x,y', got '" << spec << "'");
  }
  return {};
}

// [1,1,h,w] map -> [3,H,W] grayscale image, bilinearly upsampled.
Tensor map_to_image(const Tensor& map, int h, int w) {
  NoGradGuard guard;
  Tensor up = ops::bilinear_resize(map, h, w);
  auto d = up.data();
  std::vector<float> rgb(static_cast<std::size_t>(3) * h * w);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int c = 0; c < 3; ++c)
    std::copy(d.begin(), d.end(), rgb.begin() + static_cast<std::size_t>(c) * plane);
  return Tensor::from_data({3, h, w}, std::move(rgb));
}

constexpr std::array<std::array<float, 3>, 6> kPalette = {{{0.90f, 0.10f, 0.10f},
                                                           {0.10f, 0.75f, 0.10f},
                                                           {0.15f, 0.35f, 0.95f},
                                                           {0.95f, 0.80f, 0.10f},
                                                           {0.80f, 0.15f, 0.85f},
                                                           {0.10f, 0.80f, 0.80f}}};

void draw_dot(std::vector<float>& rgb, int h, int w, double px, double py,
              const std::array<float, 3>& color) {
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const int cx = static_cast<int>(std::lround(px));
  const int cy = static_cast<int>(std::lround(py));
  for (int dy = -1; dy <= 1; ++dy) {
    for (int dx = -1; dx <= 1; ++dx) {
      const int x = cx + dx;
      const int y = cy + dy;
      if (x < 0 || x >= w || y < 0 || y >= h) continue;
      for (int c = 0; c < 3; ++c) {
        rgb[static_cast<std::size_t>(c) * plane + static_cast<std::size_t>(y) * w + x] =
            color[static_cast<std::size_t>(c)];
      }
    }
  }
}

void draw_line(std::vector<float>& rgb, int h, int w, double x0, double y0, double x1,
               double y1, const std::array<float, 3>& color) {
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const int steps =
      std::max(2, static_cast<int>(std::ceil(std::hypot(x1 - x0, y1 - y0))) * 2);
  for (int s = 0; s <= steps; ++s) {
    const double t = static_cast<double>(s) / steps;
    const int x = static_cast<int>(std::lround(x0 + t * (x1 - x0)));
    const int y = static_cast<int>(std::lround(y0 + t * (y1 - y0)));
    if (x < 0 || x >= w || y < 0 || y >= h) continue;
    for (int c = 0; c < 3; ++c) {
      rgb[static_cast<std::size_t>(c) * plane + static_cast<std::size_t>(y) * w + x] =
          color[static_cast<std::size_t>(c)];
    }
  }
}

// Side-by-side pair image with one colored line per correspondence.
Tensor overlay_pair(const Tensor& img_a, const Tensor& img_b,
                    const std::vector<mine::Correspondence>& corrs) {
  const int ha = img_a.dim(1), wa = img_a.dim(2);
  const int hb = img_b.dim(1), wb = img_b.dim(2);
  const int h = std::max(ha, hb);
  const int w = wa + wb;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  std::vector<float> rgb(plane * 3, 0.0f);
  auto da = img_a.data();
  auto db = img_b.data();
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < ha; ++y)
      for (int x = 0; x < wa; ++x)
        rgb[static_cast<std::size_t>(c) * plane + static_cast<std::size_t>(y) * w + x] =
            da[(static_cast<std::size_t>(c) * ha + y) * wa + x];
    for (int y = 0; y < hb; ++y)
      for (int x = 0; x < wb; ++x)
        rgb[static_cast<std::size_t>(c) * plane + static_cast<std::size_t>(y) * w + wa +
            x] = db[(static_cast<std::size_t>(c) * hb + y) * wb + x];
  }
  for (std::size_t i = 0; i < corrs.size(); ++i) {
    const auto& color = kPalette[i % kPalette.size()];
    const auto& q = corrs[i];
    draw_line(rgb, h, w, q.xs, q.ys, q.xt + wa, q.yt, color);
    draw_dot(rgb, h, w, q.xs, q.ys, color);
    draw_dot(rgb, h, w, q.xt + wa, q.yt, color);
  }
  return Tensor::from_data({3, h, w}, std::move(rgb));
}

int cmd_mine(const CommonArgs& args, const std::string& encoder_ckpt,
             std::ostream& out) {
  cfg::RunConfig config = setup(args);
  data::Dataset ds = data::load_dataset(config.dataset);
  Rng root(config.seed);
  Backbone net = make_backbone(config, encoder_ckpt, root);

  mine::ImageGraph graph = mine::build_image_graph(ds, net, config.miner.k);
  for (const std::string& warning : graph.warnings) out << "warning: " << warning << "\n";

  std::vector<mine::MinedPair> mined = mine::mine_pairs(ds, graph, net, config.miner);
  std::vector<data::PairRecord> records;
  std::size_t n_corrs = 0;
  fs::create_directories(fs::path(args.out) / "overlays");
  for (const auto& pair : mined) {
    data::PairRecord rec;
    rec.a = pair.a;
    rec.b = pair.b;
    for (const auto& c : pair.corrs) rec.corrs.push_back({c.xs, c.ys, c.xt, c.yt});
    n_corrs += pair.corrs.size();
    records.push_back(std::move(rec));
    img::save_image(fs::path(args.out) / "overlays" / (pair.a + "__" + pair.b + ".png"),
                    overlay_pair(ds.load(pair.a), ds.load(pair.b), pair.corrs));
  }
  data::save_pairs(fs::path(args.out) / "pairs.jsonl", records);
  out << "mined " << records.size() << " pairs, " << n_corrs << " correspondences\n";
  return 0;
}

int cmd_train_encoder(const CommonArgs& args, const std::string& pairs_path,
                      const std::string& resume, int epochs_override,
                      std::ostream& out) {
  cfg::RunConfig config = setup(args);
  data::Dataset ds = data::load_dataset(config.dataset);
  const fs::path pairs_file =
      pairs_path.empty() ? ds.root / "pairs.jsonl" : fs::path(pairs_path);
  std::vector<enc::TrainSample> samples = build_samples(ds, data::load_pairs(pairs_file));

  Rng root(config.seed);
  Backbone net = resume.empty() ? make_backbone(config, "", root) : Backbone::load(resume);
  enc::EncoderTrainConfig tc = config.encoder;
  if (epochs_override >= 0) tc.epochs = epochs_override;

  enc::TrainCurve curve;
  if (tc.epochs > 0) {
    curve = enc::train_encoder(samples, net, tc, root.stream("train-encoder"));
  }
  net.save(fs::path(args.out) / "encoder");

  json log;
  log["epoch_loss"] = curve.epoch_loss;
  write_text(fs::path(args.out) / "encoder_loss.json", log.dump(2) + "\n");
  out << "trained " << tc.epochs << " epochs on " << samples.size() << " pairs";
  if (!curve.epoch_loss.empty()) out << "; final loss " << curve.epoch_loss.back();
  out << "\n";
  return 0;
}

int cmd_train_flow(const CommonArgs& args, const std::string& pairs_path,
                   const std::string& encoder_ckpt, const std::string& resume,
                   int epochs_override, std::ostream& out) {
  cfg::RunConfig config = setup(args);
  data::Dataset ds = data::load_dataset(config.dataset);
  const fs::path pairs_file =
      pairs_path.empty() ? ds.root / "pairs.jsonl" : fs::path(pairs_path);
  std::vector<enc::TrainSample> samples = build_samples(ds, data::load_pairs(pairs_file));

  Rng root(config.seed);
  Backbone net = make_backbone(config, encoder_ckpt, root);
  flow::FlowTrainConfig tc = config.flow;
  tc.net.feat_dim = net.config().embed_dim;
  if (epochs_override >= 0) tc.epochs = epochs_override;

  Rng init = root.stream("flownet-init");
  flow::FlowNet flownet =
      resume.empty() ? flow::FlowNet(tc.net, init) : flow::FlowNet::load(resume);

  flow::FlowTrainCurve curve;
  if (tc.epochs > 0) {
    curve = flow::train_flownet(samples, net, flownet, tc, root.stream("train-flow"));
  }
  flownet.save(fs::path(args.out) / "flownet");

  json log;
  log["affine"] = curve.affine;
  log["flow"] = curve.flow;
  log["corr"] = curve.corr;
  log["mask"] = curve.mask;
  log["total"] = curve.total;
  log["corr_skipped"] = curve.corr_skipped;
  write_text(fs::path(args.out) / "flow_loss.json", log.dump(2) + "\n");
  out << "trained " << tc.epochs << " epochs on " << samples.size() << " pairs";
  if (!curve.total.empty()) out << "; final loss " << curve.total.back();
  out << "\n";
  return 0;
}

int cmd_match(const CommonArgs& args, const std::string& encoder_ckpt,
              const std::string& flownet_ckpt, const std::string& pair_spec,
              bool nn_only, std::ostream& out) {
  cfg::RunConfig config = setup(args);
  data::Dataset ds = data::load_dataset(config.dataset);
  auto [id_a, id_b] = split_pair_id(pair_spec);
  MSF_CHECK(ds.has_image(id_a), "image '" << id_a << "' not in dataset");
  MSF_CHECK(ds.has_image(id_b), "image '" << id_b << "' not in dataset");
  Tensor img_a = ds.load(id_a);
  Tensor img_b = ds.load(id_b);

  Rng root(config.seed);
  Backbone net = make_backbone(config, encoder_ckpt, root);
  NoGradGuard guard;
  Tensor f_a = enc::extract_features(net, img_a);
  Tensor f_b = enc::extract_features(net, img_b);
  const int stride = net.stride();
  const double offset = net.site_offset();

  const fs::path out_dir(args.out);
  data::PairRecord rec;
  rec.a = id_a;
  rec.b = id_b;

  if (nn_only) {
    std::vector<std::pair<double, double>> sites;
    for (int y = 0; y < f_a.dim(2); ++y)
      for (int x = 0; x < f_a.dim(3); ++x)
        sites.emplace_back(offset + stride * x, offset + stride * y);
    const auto matched = eval::nn_match(f_a, f_b, sites, stride);
    for (std::size_t i = 0; i < sites.size(); ++i) {
      rec.corrs.push_back(
          {sites[i].first, sites[i].second, matched[i].first, matched[i].second});
    }
    data::save_pairs(out_dir / "corrs.jsonl", {rec});
    out << "nn-matched " << rec.corrs.size() << " sites\n";
    return 0;
  }

  Rng init = root.stream("flownet-init");
  flow::FlowNetConfig net_config = config.flow.net;
  net_config.feat_dim = net.config().embed_dim;
  flow::FlowNet flownet = flownet_ckpt.empty() ? flow::FlowNet(net_config, init)
                                               : flow::FlowNet::load(flownet_ckpt);

  Tensor theta = flownet.localize(f_a, f_b);
  Tensor warped_feat = flow::affine_warp(f_b, theta);
  Tensor field = flownet.refine(f_a, warped_feat);
  save_tensor(out_dir / "flow.msf", field);

  json tj;
  tj["theta"] = std::vector<float>(theta.data().begin(), theta.data().end());
  write_text(out_dir / "theta.json", tj.dump(2) + "\n");

  const int ih = img_a.dim(1), iw = img_a.dim(2);
  Tensor warped =
      flow::warp_image(ops::reshape(img_b, {1, 3, img_b.dim(1), img_b.dim(2)}), theta,
                       field);
  img::save_image(out_dir / "warped.png",
                  ops::reshape(warped, {3, img_b.dim(1), img_b.dim(2)}));

  flow::SegmentationOutput seg_a = flownet.segment(f_a, warped_feat);
  img::save_image(out_dir / "prob_a.png", map_to_image(seg_a.prob, ih, iw));
  img::save_image(out_dir / "mask_a.png", map_to_image(seg_a.mask, ih, iw));
  Tensor theta_ba = flownet.localize(f_b, f_a);
  flow::SegmentationOutput seg_b =
      flownet.segment(f_b, flow::affine_warp(f_a, theta_ba));
  img::save_image(out_dir / "prob_b.png",
                  map_to_image(seg_b.prob, img_b.dim(1), img_b.dim(2)));
  img::save_image(out_dir / "mask_b.png",
                  map_to_image(seg_b.mask, img_b.dim(1), img_b.dim(2)));

  std::vector<std::pair<double, double>> sites;
  for (int y = 0; y < f_a.dim(2); ++y)
    for (int x = 0; x < f_a.dim(3); ++x)
      sites.emplace_back(offset + stride * x, offset + stride * y);
  const auto mapped = flow::transform_points(theta, field, sites, ih, iw,
                                             img_b.dim(1), img_b.dim(2));
  for (std::size_t i = 0; i < sites.size(); ++i) {
    rec.corrs.push_back(
        {sites[i].first, sites[i].second, mapped[i].first, mapped[i].second});
  }
  data::save_pairs(out_dir / "corrs.jsonl", {rec});
  out << "matched " << id_a << ":" << id_b << "; " << rec.corrs.size()
      << " site correspondences\n";
  return 0;
}

int cmd_eval(const CommonArgs& args, const std::string& encoder_ckpt,
             const std::string& flownet_ckpt, const std::string& pairs_path,
             bool use_flip, std::ostream& out) {
  cfg::RunConfig config = setup(args);
  data::Dataset ds = data::load_dataset(config.dataset);
  const fs::path pairs_file =
      pairs_path.empty() ? ds.root / "pairs.jsonl" : fs::path(pairs_path);
  std::vector<data::PairRecord> records = data::load_pairs(pairs_file);

  Rng root(config.seed);
  Backbone net = make_backbone(config, encoder_ckpt, root);
  const int stride = net.stride();
  NoGradGuard guard;

  std::optional<flow::FlowNet> flownet;
  if (!flownet_ckpt.empty()) flownet = flow::FlowNet::load(flownet_ckpt);

  std::vector<eval::KeypointAnnotation> annotations;
  std::vector<std::vector<std::pair<double, double>>> predictions;
  for (const auto& rec : records) {
    if (rec.kps_a.empty()) continue;
    MSF_CHECK(rec.kps_a.size() == rec.kps_b.size(),
              "pair " << rec.a << ":" << rec.b << " has " << rec.kps_a.size()
                      << " source but " << rec.kps_b.size() << " target keypoints");
    Tensor img_a = ds.load(rec.a);
    Tensor img_b = ds.load(rec.b);

    bool flipped = false;
    if (use_flip) {
      flipped = eval::flip_select(img_a, img_b, net);
      if (flipped) img_b = img::hflip(img_b);
    }

    Tensor f_a = enc::extract_features(net, img_a);
    Tensor f_b = enc::extract_features(net, img_b);
    std::vector<std::pair<double, double>> pred;
    if (flownet.has_value()) {
      Tensor theta = flownet->localize(f_a, f_b);
      Tensor field = flownet->refine(f_a, flow::affine_warp(f_b, theta));
      pred = flow::transform_points(theta, field, rec.kps_a, img_a.dim(1), img_a.dim(2),
                                    img_b.dim(1), img_b.dim(2));
    } else {
      pred = eval::nn_match(f_a, f_b, rec.kps_a, stride);
    }
    if (flipped) {
      for (auto& p : pred) p.first = (img_b.dim(2) - 1) - p.first;
    }

    eval::KeypointAnnotation ann;
    ann.pair_id = rec.a + ":" + rec.b;
    ann.points_s = rec.kps_a;
    ann.points_t = rec.kps_b;
    ann.bbox_t = rec.bbox_b;
    ann.width_s = img_a.dim(2);
    ann.height_s = img_a.dim(1);
    ann.width_t = img_b.dim(2);
    ann.height_t = img_b.dim(1);
    annotations.push_back(std::move(ann));
    predictions.push_back(std::move(pred));
  }
  MSF_CHECK(!annotations.empty(),
            "no keypoint-annotated pairs in '" << pairs_file.string() << "'");

  eval::PckResult result =
      eval::pck(annotations, predictions, config.eval.alphas, config.eval.convention);

  std::ostringstream lines;
  std::ostringstream table;
  table << "PCK (" << eval::to_string(config.eval.convention) << ", "
        << (flownet.has_value() ? "flow" : "nn") << " transfer, " << annotations.size()
        << " pairs)\n";
  table << "  alpha   value\n";
  for (std::size_t i = 0; i < result.alphas.size(); ++i) {
    json line;
    line["metric"] = "pck";
    line["convention"] = eval::to_string(config.eval.convention);
    line["alpha"] = result.alphas[i];
    line["value"] = result.value(i);
    line["n"] = result.total;
    lines << line.dump() << "\n";
    table << "  " << std::fixed << std::setprecision(2) << result.alphas[i] << "   "
          << std::setprecision(4) << result.value(i) << "\n";
  }
  write_text(fs::path(args.out) / "metrics.jsonl", lines.str());
  out << table.str();
  return 0;
}

int cmd_probe(const CommonArgs& args, const std::string& encoder_ckpt,
              const std::string& pair_spec, const std::string& point_s_spec,
              const std::string& point_t_spec, std::ostream& out) {
  cfg::RunConfig config = setup(args);
  data::Dataset ds = data::load_dataset(config.dataset);
  auto [id_a, id_b] = split_pair_id(pair_spec);
  MSF_CHECK(ds.has_image(id_a), "image '" << id_a << "' not in dataset");
  MSF_CHECK(ds.has_image(id_b), "image '" << id_b << "' not in dataset");
  const auto point_s = parse_point(point_s_spec, "--point-s");
  const auto point_t = parse_point(point_t_spec, "--point-t");

  Rng root(config.seed);
  Backbone net = make_backbone(config, encoder_ckpt, root);
  Tensor img_b = ds.load(id_b);
  Tensor heat =
      eval::receptive_field_probe(ds.load(id_a), img_b, point_s, point_t, net,
                                  config.eval.probe_square, config.eval.probe_stride);
  const fs::path out_dir(args.out);
  save_tensor(out_dir / "probe.msf", heat);

  auto hd = heat.data();
  float lo = hd[0], hi = hd[0];
  std::size_t arg = 0;
  for (std::size_t i = 0; i < hd.size(); ++i) {
    if (hd[i] > hd[arg]) arg = i;
    lo = std::min(lo, hd[i]);
    hi = std::max(hi, hd[i]);
  }
  const float span = hi - lo > 0 ? hi - lo : 1.0f;
  std::vector<float> norm(hd.size());
  for (std::size_t i = 0; i < hd.size(); ++i) norm[i] = (hd[i] - lo) / span;
  const int gh = heat.dim(0);
  const int gw = heat.dim(1);
  img::save_image(out_dir / "probe.png",
                  map_to_image(Tensor::from_data({1, 1, gh, gw}, std::move(norm)),
                               img_b.dim(1), img_b.dim(2)));

  const int gy = static_cast<int>(arg) / gw;
  const int gx = static_cast<int>(arg) % gw;
  json j;
  j["grid"] = {gh, gw};
  j["argmax"] = {gy, gx};
  j["top_left_px"] = {gy * config.eval.probe_stride, gx * config.eval.probe_stride};
  j["max_drop"] = hd[arg];
  write_text(out_dir / "probe.json", j.dump(2) + "\n");
  out << "probe grid " << gh << "x" << gw << "; peak drop " << hd[arg] << " at cell ("
      << gy << "," << gx << ")\n";
  return 0;
}

int cmd_report_weights(const CommonArgs& args, const std::string& encoder_ckpt,
                       std::ostream& out) {
  cfg::RunConfig config = setup(args);
  Rng root(config.seed);
  Backbone net = make_backbone(config, encoder_ckpt, root);
  const auto report = net.mixture_report();
  MSF_CHECK(!report.empty(), "backbone has no multi-scale layers to report");
  const auto& dilations = net.config().msconv.dilations;

  std::ostringstream table;
  table << std::left << std::setw(10) << "layer";
  for (int d : dilations) table << std::right << std::setw(9) << ("d=" + std::to_string(d));
  table << "\n";
  json j;
  j["dilations"] = dilations;
  j["layers"] = json::array();
  for (const auto& [name, weights] : report) {
    table << std::left << std::setw(10) << name;
    for (double w : weights)
      table << std::right << std::setw(9) << std::fixed << std::setprecision(4) << w;
    table << "\n";
    j["layers"].push_back({{"name", name}, {"weights", weights}});
  }
  write_text(fs::path(args.out) / "weights.json", j.dump(2) + "\n");
  out << table.str();
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"correspondence mining, metric training, and semantic flow"};
  app.require_subcommand(1);

  CommonArgs mine_args;
  std::string mine_encoder;
  CLI::App* mine = app.add_subcommand("mine", "mine correspondences across a dataset");
  add_common(mine, mine_args);
  mine->add_option("--encoder", mine_encoder, "encoder checkpoint (default: fresh init)");

  CommonArgs te_args;
  std::string te_pairs, te_resume;
  int te_epochs = -1;
  CLI::App* te = app.add_subcommand("train-encoder", "train the feature encoder");
  add_common(te, te_args);
  te->add_option("--pairs", te_pairs, "pairs.jsonl (default: <dataset>/pairs.jsonl)");
  te->add_option("--resume", te_resume, "encoder checkpoint to continue from");
  te->add_option("--epochs", te_epochs, "override config epochs");

  CommonArgs tf_args;
  std::string tf_pairs, tf_encoder, tf_resume;
  int tf_epochs = -1;
  CLI::App* tf = app.add_subcommand("train-flow", "train the alignment network");
  add_common(tf, tf_args);
  tf->add_option("--pairs", tf_pairs, "pairs.jsonl (default: <dataset>/pairs.jsonl)");
  tf->add_option("--encoder", tf_encoder, "encoder checkpoint (default: fresh init)");
  tf->add_option("--resume", tf_resume, "flownet checkpoint to continue from");
  tf->add_option("--epochs", tf_epochs, "override config epochs");

  CommonArgs match_args;
  std::string match_encoder, match_flownet, match_pair;
  bool match_nn = false;
  CLI::App* match = app.add_subcommand("match", "align one image pair");
  add_common(match, match_args);
  match->add_option("--encoder", match_encoder, "encoder checkpoint");
  match->add_option("--flownet", match_flownet, "flownet checkpoint");
  match->add_option("--pair", match_pair, "'<id>:<id>' from the dataset")->required();
  match->add_flag("--nn", match_nn, "nearest-neighbor matching only");

  CommonArgs eval_args;
  std::string eval_encoder, eval_flownet, eval_pairs;
  bool eval_flip = false;
  CLI::App* evalc = app.add_subcommand("eval", "keypoint transfer metrics");
  add_common(evalc, eval_args);
  evalc->add_option("--encoder", eval_encoder, "encoder checkpoint");
  evalc->add_option("--flownet", eval_flownet, "flownet checkpoint (default: nn transfer)");
  evalc->add_option("--pairs", eval_pairs, "annotations (default: <dataset>/pairs.jsonl)");
  evalc->add_flag("--flip", eval_flip, "mirror the target when it lowers feature loss");

  CommonArgs probe_args;
  std::string probe_encoder, probe_pair, probe_ps, probe_pt;
  CLI::App* probe = app.add_subcommand("probe", "receptive-field occlusion sweep");
  add_common(probe, probe_args);
  probe->add_option("--encoder", probe_encoder, "encoder checkpoint");
  probe->add_option("--pair", probe_pair, "'<id>:<id>' from the dataset")->required();
  probe->add_option("--point-s", probe_ps, "source point 'x,y'")->required();
  probe->add_option("--point-t", probe_pt, "target point 'x,y'")->required();

  CommonArgs rw_args;
  std::string rw_encoder;
  CLI::App* rw = app.add_subcommand("report-weights", "per-layer scale mixture weights");
  add_common(rw, rw_args);
  rw->add_option("--encoder", rw_encoder, "encoder checkpoint");

  std::string command = "(parse)";
  try {
    try {
      std::vector<std::string> reversed(args.rbegin(), args.rend());
      app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
      out << app.help();
      return 0;
    } catch (const CLI::ParseError& e) {
      json j;
      j["command"] = command;
      j["error"] = std::string("argument error: ") + e.what();
      err << j.dump() << "\n";
      return e.get_exit_code() == 0 ? 1 : e.get_exit_code();
    }

    if (mine->parsed()) {
      command = "mine";
      return cmd_mine(mine_args, mine_encoder, out);
    }
    if (te->parsed()) {
      command = "train-encoder";
      return cmd_train_encoder(te_args, te_pairs, te_resume, te_epochs, out);
    }
    if (tf->parsed()) {
      command = "train-flow";
      return cmd_train_flow(tf_args, tf_pairs, tf_encoder, tf_resume, tf_epochs, out);
    }
    if (match->parsed()) {
      command = "match";
      return cmd_match(match_args, match_encoder, match_flownet, match_pair, match_nn,
                       out);
    }
    if (evalc->parsed()) {
      command = "eval";
      return cmd_eval(eval_args, eval_encoder, eval_flownet, eval_pairs, eval_flip, out);
    }
    if (probe->parsed()) {
      command = "probe";
      return cmd_probe(probe_args, probe_encoder, probe_pair, probe_ps, probe_pt, out);
    }
    if (rw->parsed()) {
      command = "report-weights";
      return cmd_report_weights(rw_args, rw_encoder, out);
    }
    json j;
    j["command"] = command;
    j["error"] = "no subcommand given";
    err << j.dump() << "\n";
    return 1;
  } catch (const std::exception& e) {
    json j;
    j["command"] = command;
    j["error"] = e.what();
    err << j.dump() << "\n";
    return 1;
  }
}

}  // namespace msf::cli
