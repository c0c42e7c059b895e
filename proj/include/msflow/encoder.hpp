#pragma once

#include <utility>
#include <vector>

#include "msflow/dataset.hpp"
#include "msflow/model.hpp"
#include "msflow/rng.hpp"
#include "msflow/tensor.hpp"

// Metric learning on point correspondences: Siamese feature extraction,
// contrastive loss, and hard negative mining.
namespace msf::enc {

// [3,H,W] image -> [1,embed_dim,h,w] of unit-norm site features.
Tensor extract_features(const Backbone& net, const Tensor& image);

// Differentiable bilinear reads of a feature map at pixel coordinates.
// Points outside the site-center lattice are clamped to it, so every read
// is a convex blend of real sites. Returns [K, C].
Tensor features_at_points(const Tensor& fmap,
                          const std::vector<std::pair<double, double>>& pts_px,
                          int stride);

// pos: squared distance. neg: squared hinge max(0, margin - d)^2. f_a and
// f_b are [D] vectors or [K,D] row batches; rows average into the scalar.
Tensor contrastive_loss(const Tensor& f_a, const Tensor& f_b, bool positive,
                        double margin);

struct HardNegatives {
  // Site-center pixel coordinates, ascending feature distance.
  std::vector<std::pair<double, double>> points;
  std::vector<double> distances;
  bool truncated = false;  // fewer than `count` sites lay outside the radius
};

// The `count` sites of target_map nearest to f_src in feature space whose
// pixel distance from gt_point exceeds radius_px. f_src is [D] or [1,D];
// target_map is [1,D,h,w].
HardNegatives mine_hard_negatives(const Tensor& f_src, const Tensor& target_map,
                                  std::pair<double, double> gt_point_px,
                                  double radius_px, int count, int stride);

// One training pair: both images at the training resolution, matches in
// pixel units. Augmentation happens inside the trainer and remaps the
// correspondences; see AugmentationRecord.
struct TrainSample {
  Tensor image_a;  // [3,H,W]
  Tensor image_b;
  std::vector<data::Quad> corrs;
};

// What was applied to one image of a pair, in application order. remap()
// maps an original pixel coordinate through the recorded transform.
struct AugmentationRecord {
  bool mirror = false;
  int shift_x = 0, shift_y = 0;  // replicate-pad then crop, net pixel shift
  double rotate_deg = 0.0;
  int width = 0, height = 0;

  std::pair<double, double> remap(double x, double y) const;
};

struct EncoderTrainConfig {
  int epochs = 12;
  double lr = 0.05;
  double momentum = 0.9;
  double margin = 1.0;
  int negatives = 60;           // hard negatives per correspondence
  double radius_px = 32.0;      // positive radius at the training resolution
  int max_corrs_per_pair = 16;  // correspondences sampled per step
  bool augment = true;
  int max_shift = 4;            // pad/crop translation extent, px
  double max_rotate_deg = 8.0;
};

struct TrainCurve {
  std::vector<double> epoch_loss;  // mean per-sample loss per epoch
};

// SGD over the contrastive objective. Deterministic for a fixed rng seed;
// aborts with a diagnostic naming the sample when the loss goes non-finite.
TrainCurve train_encoder(const std::vector<TrainSample>& samples, Backbone& net,
                         const EncoderTrainConfig& config, Rng rng);

}  // namespace msf::enc
