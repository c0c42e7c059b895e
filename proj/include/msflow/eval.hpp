#pragma once

#include <array>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "msflow/dataset.hpp"
#include "msflow/model.hpp"
#include "msflow/rng.hpp"
#include "msflow/tensor.hpp"

namespace msf::eval {

// Keypoints for one evaluation pair, index-aligned between the frames.
// Coordinates are pixels; the optional target box feeds the box-max
// threshold convention.
struct KeypointAnnotation {
  std::string pair_id;
  std::vector<std::pair<double, double>> points_s;
  std::vector<std::pair<double, double>> points_t;
  std::optional<data::Box> bbox_t;
  int width_s = 0, height_s = 0;
  int width_t = 0, height_t = 0;
};

// Threshold conventions for keypoint transfer accuracy. kUnitDiagonal
// normalizes the pixel error by the target image diagonal, kUnitPerAxis
// checks each axis against its own image extent, kBboxMax thresholds at
// alpha times the larger target box side.
enum class PckConvention { kUnitDiagonal, kUnitPerAxis, kBboxMax };

const char* to_string(PckConvention c);

struct PckResult {
  std::vector<double> alphas;
  std::vector<int> correct;  // per alpha
  int total = 0;
  double value(std::size_t i) const {
    return total > 0 ? static_cast<double>(correct[i]) / total : 0.0;
  }
};

// For each source point: bilinear-read its feature in f_s, return the
// center of the target site with the smallest feature distance. Ties break
// to the lower raster index. Site centers sit at offset + stride*index with
// offset = (stride-1)/2.
std::vector<std::pair<double, double>> nn_match(
    const Tensor& f_s, const Tensor& f_t,
    const std::vector<std::pair<double, double>>& points_s, int stride);

// A keypoint counts as correct iff its error is strictly below the
// threshold at each alpha. predicted[i] is index-aligned with
// annotations[i].points_s. The box-max convention requires bbox_t and
// reports the offending pair id when it is missing.
PckResult pck(const std::vector<KeypointAnnotation>& annotations,
              const std::vector<std::vector<std::pair<double, double>>>& predicted,
              const std::vector<double>& alphas, PckConvention convention);

// Area-weighted mean of per-part IoU between warped source parts and their
// target parts. Masks are [H,W] tensors, nonzero = inside; weights are the
// target part areas. flow_chain maps a source pixel to target pixels;
// warped masks are built by rounding each mapped pixel to the nearest
// lattice point.
double weighted_iou(
    const std::vector<Tensor>& source_parts, const std::vector<Tensor>& target_parts,
    const std::function<std::pair<double, double>(double, double)>& flow_chain);

// Fraction of sampled object pixels whose predicted target position is
// strictly within 5 px of the ground truth once the target frame is scaled
// so its larger dimension is eval_max_dim. Maps are [2,H,W] target pixel
// coordinates per source pixel; sampling is uniform with replacement over
// the nonzero mask, driven by the given rng.
double dense_flow_pck(const Tensor& gt_map, const Tensor& pred_map,
                      const Tensor& object_mask, int n_samples, Rng rng, int target_h,
                      int target_w, double threshold_px = 5.0,
                      double eval_max_dim = 100.0);

// True when mirroring the second image lowers the mean per-site feature
// distance to the first image's features. Ties keep the unflipped image.
bool flip_select(const Tensor& image_s, const Tensor& image_t, const Backbone& net);

// Mean intersection-over-union across index-aligned mask lists. A pair
// whose masks are both empty counts as 1.
double coseg_iou(const std::vector<Tensor>& predicted, const std::vector<Tensor>& gt);

// Slide a gray square over the target image and record, per position, how
// much the feature similarity between the two probe points drops. Square
// positions step by probe_stride and must fit fully inside the image; the
// heatmap is [grid_h, grid_w] in sweep order. The square's fill defaults to
// the target image's mean pixel.
Tensor receptive_field_probe(const Tensor& image_s, const Tensor& image_t,
                             std::pair<double, double> point_s,
                             std::pair<double, double> point_t, const Backbone& net,
                             int square_side, int probe_stride,
                             std::optional<std::array<double, 3>> gray = std::nullopt);

}  // namespace msf::eval
