#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "msflow/dataset.hpp"
#include "msflow/model.hpp"
#include "msflow/tensor.hpp"
#include "msflow/trws.hpp"

// Weakly supervised correspondence mining: same-class k-NN image graph,
// multi-scale patch proposals, candidate matches scored by feature distance,
// and a per-pair labeling problem with an outlier class solved by TRW-S.
namespace msf::mine {

struct MinerConfig {
  int k = 10;                 // image graph out-degree
  int pyramid_levels = 6;
  double patch_min = 20.0;    // smallest patch side, px at a 224 reference
  double patch_max = 80.0;    // largest, same convention
  double reference_size = 224.0;
  int apparent_size = 24;     // patch side after level resizing, px
  int budget = 80;            // proposals kept per image
  bool one_cycle = true;
  int candidates = 2;         // matching candidates per patch
  int spatial_neighbors = 5;  // pairwise structure degree
  double lambda_d = 1.0;      // displacement-consistency weight
  double lambda_s = 0.5;      // scale-consistency weight
  double outlier_cost = 0.8;
  int trws_max_iters = 50;
  double trws_tol = 1e-9;
};

struct PatchProposal {
  double x = 0.0, y = 0.0;     // center, original-image px
  double scale = 0.0;          // patch side, original-image px
  double stride = 0.0;         // site spacing at this level, original-image px
  int level = 0;
  double activation = 0.0;     // pre-normalization feature magnitude
  std::vector<float> feature;  // unit-norm embedding
};

struct ImageGraph {
  std::vector<std::string> ids;             // node index -> image id
  std::vector<std::vector<int>> out_edges;  // per node, ascending neighbor index
  std::vector<std::string> warnings;
};

struct Correspondence {
  double xs = 0, ys = 0, xt = 0, yt = 0;  // px in source/target images
  double scale = 0;                       // source patch side, px
  double stride = 0;                      // source proposal's site spacing, px
  double confidence = 0;                  // negated assigned unary cost
};

struct MinedPair {
  std::string a, b;
  std::vector<Correspondence> corrs;
};

// Spatially average-pooled site features, unit-normalized.
std::vector<float> global_descriptor(const Backbone& net, const Tensor& image);

// Directed k-NN edges restricted to same-class images; distance ties break
// toward the lower image index. Classes with fewer than two images are
// skipped with a warning.
ImageGraph build_image_graph(const std::vector<std::string>& ids,
                             const std::map<std::string, std::string>& classes,
                             const std::vector<std::vector<float>>& descriptors,
                             int k);
ImageGraph build_image_graph(const data::Dataset& ds, const Backbone& net, int k);

// Sliding-window proposals over a resolution pyramid, pruned by activation
// NMS and a one-cycle retrieval consistency check, capped at the budget.
// Returns an empty list when the image is too small for the smallest patch.
std::vector<PatchProposal> propose_patches(const Tensor& image, const Backbone& net,
                                           const MinerConfig& config);

// Nodes = proposals of the source image; labels = nearest candidate
// proposals in the target image plus an outlier label (always last).
// Pairwise costs penalize displacement and scale inconsistency between
// spatially neighboring nodes; any two nodes sharing a candidate get a
// large penalty on the conflicting joint assignment.
MatchProblem build_match_problem(const std::vector<PatchProposal>& proposals_src,
                                 const std::vector<PatchProposal>& proposals_tgt,
                                 int src_w, int src_h, const MinerConfig& config);

// Both directions plus forward-backward agreement within one patch stride.
std::vector<Correspondence> mine_single_pair(const std::vector<PatchProposal>& props_i,
                                             const std::vector<PatchProposal>& props_j,
                                             int wi, int hi, int wj, int hj,
                                             const MinerConfig& config);
std::vector<Correspondence> mine_single_pair(const Backbone& net, const Tensor& img_i,
                                             const Tensor& img_j,
                                             const MinerConfig& config);

// Every unordered graph edge, in ascending (i,j) order; pairs that keep no
// correspondence are omitted.
std::vector<MinedPair> mine_pairs(const data::Dataset& ds, const ImageGraph& graph,
                                  const Backbone& net, const MinerConfig& config);

}  // namespace msf::mine
