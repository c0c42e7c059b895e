#include "msflow/miner.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>

#include "msflow/common.hpp"
#include "msflow/encoder.hpp"
#include "msflow/image.hpp"
#include "msflow/ops.hpp"

namespace msf::mine {

namespace {

constexpr double kConflictCost = 1e6;

double feat_dist(std::span<const float> a, std::span<const float> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    acc += d * d;
  }
  return std::sqrt(acc);
}

struct LevelSite {
  int fy = 0, fx = 0;
  double x = 0, y = 0;  // center in original px
  double activation = 0;
  std::vector<float> feature;
};

}  // namespace

std::vector<float> global_descriptor(const Backbone& net, const Tensor& image) {
  NoGradGuard guard;
  Tensor fmap = enc::extract_features(net, image);
  const int c = fmap.dim(1);
  const int hw = fmap.dim(2) * fmap.dim(3);
  auto data = fmap.data();
  std::vector<double> pooled(c, 0.0);
  for (int ch = 0; ch < c; ++ch) {
    double acc = 0.0;
    for (int s = 0; s < hw; ++s) acc += data[static_cast<std::size_t>(ch) * hw + s];
    pooled[ch] = acc / hw;
  }
  double norm = 0.0;
  for (double v : pooled) norm += v * v;
  norm = std::sqrt(std::max(norm, 1e-24));
  std::vector<float> out(c);
  for (int ch = 0; ch < c; ++ch) out[ch] = static_cast<float>(pooled[ch] / norm);
  return out;
}

ImageGraph build_image_graph(const std::vector<std::string>& ids,
                             const std::map<std::string, std::string>& classes,
                             const std::vector<std::vector<float>>& descriptors,
                             int k) {
  MSF_CHECK(ids.size() == descriptors.size(),
            "build_image_graph: " << ids.size() << " ids vs " << descriptors.size()
                                  << " descriptors");
  MSF_CHECK(k >= 1, "build_image_graph: k must be >= 1");
  ImageGraph graph;
  graph.ids = ids;
  graph.out_edges.resize(ids.size());

  std::map<std::string, std::vector<int>> by_class;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    auto it = classes.find(ids[i]);
    MSF_CHECK(it != classes.end(),
              "build_image_graph: image '" << ids[i] << "' has no class label");
    by_class[it->second].push_back(static_cast<int>(i));
  }

  for (const auto& [label, members] : by_class) {
    if (members.size() < 2) {
      graph.warnings.push_back("class '" + label + "' has fewer than 2 images; skipped");
      continue;
    }
    for (int i : members) {
      std::vector<std::pair<double, int>> ranked;
      for (int j : members) {
        if (j == i) continue;
        ranked.emplace_back(feat_dist(descriptors[i], descriptors[j]), j);
      }
      std::sort(ranked.begin(), ranked.end());  // ties fall to the lower index
      const int take = std::min<int>(k, static_cast<int>(ranked.size()));
      auto& out = graph.out_edges[i];
      for (int t = 0; t < take; ++t) out.push_back(ranked[t].second);
      std::sort(out.begin(), out.end());
    }
  }
  return graph;
}

ImageGraph build_image_graph(const data::Dataset& ds, const Backbone& net, int k) {
  std::vector<std::vector<float>> descriptors(ds.image_ids.size());
  parallel_for(static_cast<std::int64_t>(ds.image_ids.size()), [&](std::int64_t i) {
    descriptors[static_cast<std::size_t>(i)] =
        global_descriptor(net, ds.load(ds.image_ids[static_cast<std::size_t>(i)]));
  });
  return build_image_graph(ds.image_ids, ds.classes, descriptors, k);
}

std::vector<PatchProposal> propose_patches(const Tensor& image, const Backbone& net,
                                           const MinerConfig& config) {
  MSF_CHECK(image.defined() && image.rank() == 3 && image.dim(0) == 3,
            "propose_patches: expected a [3,H,W] image");
  MSF_CHECK(config.pyramid_levels >= 1, "propose_patches: pyramid_levels must be >= 1");
  MSF_CHECK(config.patch_min > 0 && config.patch_max >= config.patch_min,
            "propose_patches: bad patch size range");
  NoGradGuard guard;

  const int h = image.dim(1);
  const int w = image.dim(2);
  const double res_scale = std::max(h, w) / config.reference_size;
  const int stride = net.stride();
  const double offset = net.site_offset();
  const int lo = net.min_input();
  const int levels = config.pyramid_levels;

  std::vector<PatchProposal> all;
  for (int level = 0; level < levels; ++level) {
    const double frac = levels == 1 ? 0.5 : static_cast<double>(level) / (levels - 1);
    const double side =
        (config.patch_min + (config.patch_max - config.patch_min) * frac) * res_scale;
    if (side > std::min(h, w)) continue;  // patch cannot fit at this level

    // Resize so the patch appears at a fixed apparent size, rounding the
    // level extents to the backbone's stride.
    const double sigma = config.apparent_size / side;
    auto level_extent = [&](int full) {
      const int want = static_cast<int>(std::lround(full * sigma));
      const int snapped = ((want + stride / 2) / stride) * stride;
      return std::max(lo, snapped);
    };
    const int lh = level_extent(h);
    const int lw = level_extent(w);
    Tensor level_img = img::resize(image, lh, lw);
    Tensor raw = net.forward_raw(
        ops::reshape(level_img, {1, 3, lh, lw}));  // [1,D,fh,fw]
    const int d = raw.dim(1);
    const int fh = raw.dim(2);
    const int fw = raw.dim(3);
    auto data = raw.data();

    // Align-corners factor from level px back to original px.
    const double back_y = lh > 1 ? static_cast<double>(h - 1) / (lh - 1) : 0.0;
    const double back_x = lw > 1 ? static_cast<double>(w - 1) / (lw - 1) : 0.0;
    const double level_stride = stride * 0.5 * (back_y + back_x);

    std::vector<LevelSite> sites;
    sites.reserve(static_cast<std::size_t>(fh) * fw);
    for (int fy = 0; fy < fh; ++fy) {
      for (int fx = 0; fx < fw; ++fx) {
        LevelSite site;
        site.fy = fy;
        site.fx = fx;
        site.y = (offset + static_cast<double>(stride) * fy) * back_y;
        site.x = (offset + static_cast<double>(stride) * fx) * back_x;
        if (site.x - side / 2 < -0.5 || site.x + side / 2 > w - 0.5 ||
            site.y - side / 2 < -0.5 || site.y + side / 2 > h - 0.5) {
          continue;  // patch sticks out of the image
        }
        double norm2 = 0.0;
        const std::size_t base = static_cast<std::size_t>(fy) * fw + fx;
        for (int c = 0; c < d; ++c) {
          const double v = data[static_cast<std::size_t>(c) * fh * fw + base];
          norm2 += v * v;
        }
        site.activation = std::sqrt(norm2);
        const double inv = 1.0 / std::sqrt(norm2 + 1e-12);
        site.feature.resize(d);
        for (int c = 0; c < d; ++c) {
          site.feature[c] = static_cast<float>(
              data[static_cast<std::size_t>(c) * fh * fw + base] * inv);
        }
        sites.push_back(std::move(site));
      }
    }
    if (sites.empty()) continue;

    // NMS: strongest activation first, raster order on ties, one patch side
    // as the suppression radius.
    std::vector<int> order(sites.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
      if (sites[a].activation != sites[b].activation)
        return sites[a].activation > sites[b].activation;
      return a < b;
    });
    std::vector<int> kept;
    for (int idx : order) {
      bool suppressed = false;
      for (int j : kept) {
        const double dx = sites[idx].x - sites[j].x;
        const double dy = sites[idx].y - sites[j].y;
        if (dx * dx + dy * dy < side * side) {
          suppressed = true;
          break;
        }
      }
      if (!suppressed) kept.push_back(idx);
    }

    // One-cycle check: the nearest site to a proposal's feature, then that
    // site's nearest, must land back within one stride (or on a feature
    // that is exactly as close as identical, which counts as consistent).
    auto nearest = [&](std::span<const float> f, int exclude) {
      double best = std::numeric_limits<double>::infinity();
      int best_idx = -1;
      for (std::size_t s = 0; s < sites.size(); ++s) {
        if (static_cast<int>(s) == exclude) continue;
        const double dist = feat_dist(f, sites[s].feature);
        if (dist < best) {
          best = dist;
          best_idx = static_cast<int>(s);
        }
      }
      return best_idx;
    };
    for (int idx : kept) {
      if (config.one_cycle && sites.size() > 2) {
        const int q = nearest(sites[idx].feature, idx);
        const int r = nearest(sites[q].feature, q);
        const double dx = sites[r].x - sites[idx].x;
        const double dy = sites[r].y - sites[idx].y;
        const bool returns = std::sqrt(dx * dx + dy * dy) <= level_stride ||
                             feat_dist(sites[idx].feature, sites[r].feature) <= 1e-9;
        if (!returns) continue;
      }
      PatchProposal p;
      p.x = sites[idx].x;
      p.y = sites[idx].y;
      p.scale = side;
      p.stride = level_stride;
      p.level = level;
      p.activation = sites[idx].activation;
      p.feature = sites[idx].feature;
      all.push_back(std::move(p));
    }
  }

  std::sort(all.begin(), all.end(), [](const PatchProposal& a, const PatchProposal& b) {
    if (a.activation != b.activation) return a.activation > b.activation;
    if (a.level != b.level) return a.level < b.level;
    if (a.y != b.y) return a.y < b.y;
    return a.x < b.x;
  });
  if (static_cast<int>(all.size()) > config.budget) all.resize(config.budget);
  return all;
}

MatchProblem build_match_problem(const std::vector<PatchProposal>& proposals_src,
                                 const std::vector<PatchProposal>& proposals_tgt,
                                 int src_w, int src_h, const MinerConfig& config) {
  MSF_CHECK(!proposals_src.empty(), "build_match_problem: no source proposals");
  MSF_CHECK(!proposals_tgt.empty(), "build_match_problem: no target proposals");
  MSF_CHECK(config.candidates >= 1, "build_match_problem: candidates must be >= 1");
  const int n = static_cast<int>(proposals_src.size());
  const int m = static_cast<int>(proposals_tgt.size());

  MatchProblem problem;
  problem.unary.resize(n);
  problem.cand_ids.resize(n);
  for (int a = 0; a < n; ++a) {
    std::vector<std::pair<double, int>> ranked;
    ranked.reserve(m);
    for (int b = 0; b < m; ++b) {
      ranked.emplace_back(feat_dist(proposals_src[a].feature, proposals_tgt[b].feature),
                          b);
    }
    std::sort(ranked.begin(), ranked.end());
    const int take = std::min(config.candidates, m);
    for (int t = 0; t < take; ++t) {
      problem.unary[a].push_back(ranked[t].first);
      problem.cand_ids[a].push_back(ranked[t].second);
    }
    problem.unary[a].push_back(config.outlier_cost);
  }

  // Edge set: spatial k-NN over the source proposals, plus an edge between
  // any two nodes that share a candidate (to carry the one-to-one penalty).
  std::set<std::pair<int, int>> edge_set;
  for (int a = 0; a < n; ++a) {
    std::vector<std::pair<double, int>> ranked;
    for (int b = 0; b < n; ++b) {
      if (b == a) continue;
      const double dx = proposals_src[a].x - proposals_src[b].x;
      const double dy = proposals_src[a].y - proposals_src[b].y;
      ranked.emplace_back(dx * dx + dy * dy, b);
    }
    std::sort(ranked.begin(), ranked.end());
    const int take = std::min<int>(config.spatial_neighbors, static_cast<int>(ranked.size()));
    for (int t = 0; t < take; ++t) {
      const int b = ranked[t].second;
      edge_set.emplace(std::min(a, b), std::max(a, b));
    }
  }
  std::set<std::pair<int, int>> geometric_edges = edge_set;
  std::map<int, std::vector<int>> users;  // candidate id -> nodes listing it
  for (int a = 0; a < n; ++a) {
    for (int id : problem.cand_ids[a]) users[id].push_back(a);
  }
  for (const auto& [id, nodes] : users) {
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      for (std::size_t j = i + 1; j < nodes.size(); ++j) {
        edge_set.emplace(nodes[i], nodes[j]);
      }
    }
  }

  const double diag = std::sqrt(static_cast<double>(src_w) * src_w +
                                static_cast<double>(src_h) * src_h);
  for (const auto& [a, b] : edge_set) {
    MatchProblem::Edge edge;
    edge.a = a;
    edge.b = b;
    const int la = static_cast<int>(problem.unary[a].size());
    const int lb = static_cast<int>(problem.unary[b].size());
    edge.cost.assign(static_cast<std::size_t>(la) * lb, 0.0);
    const bool geometric = geometric_edges.count({a, b}) != 0;
    for (int ca = 0; ca + 1 < la; ++ca) {
      const auto& ta = proposals_tgt[problem.cand_ids[a][ca]];
      for (int cb = 0; cb + 1 < lb; ++cb) {
        const auto& tb = proposals_tgt[problem.cand_ids[b][cb]];
        double cost = 0.0;
        if (problem.cand_ids[a][ca] == problem.cand_ids[b][cb]) {
          cost = kConflictCost;
        } else if (geometric) {
          const double vax = ta.x - proposals_src[a].x;
          const double vay = ta.y - proposals_src[a].y;
          const double vbx = tb.x - proposals_src[b].x;
          const double vby = tb.y - proposals_src[b].y;
          const double disp =
              std::sqrt((vax - vbx) * (vax - vbx) + (vay - vby) * (vay - vby));
          const double scale_ratio = (proposals_src[a].scale / proposals_src[b].scale) *
                                     (tb.scale / ta.scale);
          cost = config.lambda_d * disp / diag +
                 config.lambda_s * std::abs(std::log(scale_ratio));
        }
        edge.cost[static_cast<std::size_t>(ca) * lb + cb] = cost;
      }
    }
    problem.edges.push_back(std::move(edge));
  }
  problem.check();
  return problem;
}

std::vector<Correspondence> mine_single_pair(const std::vector<PatchProposal>& props_i,
                                             const std::vector<PatchProposal>& props_j,
                                             int wi, int hi, int wj, int hj,
                                             const MinerConfig& config) {
  std::vector<Correspondence> out;
  if (props_i.empty() || props_j.empty()) return out;
  TrwsOptions opts;
  opts.max_iters = config.trws_max_iters;
  opts.tol = config.trws_tol;

  MatchProblem fwd = build_match_problem(props_i, props_j, wi, hi, config);
  MatchProblem bwd = build_match_problem(props_j, props_i, wj, hj, config);
  const TrwsResult rf = solve_trws(fwd, opts);
  const TrwsResult rb = solve_trws(bwd, opts);

  for (int a = 0; a < fwd.n_nodes(); ++a) {
    const int la = rf.labels[a];
    if (la == fwd.n_labels(a) - 1) continue;  // outlier
    const int b = fwd.cand_ids[a][la];
    const int lb = rb.labels[b];
    if (lb == bwd.n_labels(b) - 1) continue;  // partner opted out
    const auto& back = props_i[bwd.cand_ids[b][lb]];
    const double dx = back.x - props_i[a].x;
    const double dy = back.y - props_i[a].y;
    if (std::sqrt(dx * dx + dy * dy) > props_i[a].stride) continue;
    Correspondence c;
    c.xs = props_i[a].x;
    c.ys = props_i[a].y;
    c.xt = props_j[b].x;
    c.yt = props_j[b].y;
    c.scale = props_i[a].scale;
    c.stride = props_i[a].stride;
    c.confidence = -fwd.unary[a][la];
    out.push_back(c);
  }
  return out;
}

std::vector<Correspondence> mine_single_pair(const Backbone& net, const Tensor& img_i,
                                             const Tensor& img_j,
                                             const MinerConfig& config) {
  const auto props_i = propose_patches(img_i, net, config);
  const auto props_j = propose_patches(img_j, net, config);
  return mine_single_pair(props_i, props_j, img_i.dim(2), img_i.dim(1), img_j.dim(2),
                          img_j.dim(1), config);
}

std::vector<MinedPair> mine_pairs(const data::Dataset& ds, const ImageGraph& graph,
                                  const Backbone& net, const MinerConfig& config) {
  MSF_CHECK(graph.ids.size() == graph.out_edges.size(), "mine_pairs: malformed graph");

  std::set<std::pair<int, int>> jobs_set;
  for (std::size_t i = 0; i < graph.out_edges.size(); ++i) {
    for (int j : graph.out_edges[i]) {
      jobs_set.emplace(std::min<int>(static_cast<int>(i), j),
                       std::max<int>(static_cast<int>(i), j));
    }
  }
  const std::vector<std::pair<int, int>> jobs(jobs_set.begin(), jobs_set.end());

  std::set<int> used_set;
  for (const auto& [i, j] : jobs) {
    used_set.insert(i);
    used_set.insert(j);
  }
  const std::vector<int> used(used_set.begin(), used_set.end());

  struct PerImage {
    std::vector<PatchProposal> proposals;
    int w = 0, h = 0;
  };
  std::map<int, PerImage> cache;
  for (int node : used) cache[node] = {};
  parallel_for(static_cast<std::int64_t>(used.size()), [&](std::int64_t u) {
    const int node = used[static_cast<std::size_t>(u)];
    Tensor image = ds.load(graph.ids[node]);
    PerImage& slot = cache[node];
    slot.w = image.dim(2);
    slot.h = image.dim(1);
    slot.proposals = propose_patches(image, net, config);
  });

  std::vector<std::vector<Correspondence>> results(jobs.size());
  parallel_for(static_cast<std::int64_t>(jobs.size()), [&](std::int64_t idx) {
    const auto& [i, j] = jobs[static_cast<std::size_t>(idx)];
    const PerImage& a = cache[i];
    const PerImage& b = cache[j];
    results[static_cast<std::size_t>(idx)] =
        mine_single_pair(a.proposals, b.proposals, a.w, a.h, b.w, b.h, config);
  });

  std::vector<MinedPair> out;
  for (std::size_t idx = 0; idx < jobs.size(); ++idx) {
    if (results[idx].empty()) continue;
    out.push_back({graph.ids[jobs[idx].first], graph.ids[jobs[idx].second],
                   std::move(results[idx])});
  }
  return out;
}

}  // namespace msf::mine
