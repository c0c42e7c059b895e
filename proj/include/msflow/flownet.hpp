#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "msflow/encoder.hpp"
#include "msflow/rng.hpp"
#include "msflow/tensor.hpp"

namespace msf::flow {

// Affine parameters [6] = (a11, a12, tx, a21, a22, ty) mapping normalized
// source coordinates to normalized target coordinates. Identity is
// (1,0,0,0,1,0). Kept as a tensor so gradients reach the localization net.
using AffineParams = Tensor;

// Flow field [1,2,h,w]: per-site displacement in normalized coordinates from
// source sites into the affine-aligned target. Zero field composed with the
// identity affine is the identity warp.
using FlowField = Tensor;

// Foreground prediction for one frame of a pair: probability map [1,1,h,w]
// in (0,1) and its binary mask (strict 0.5 threshold, values in {0,1}).
struct SegmentationOutput {
  Tensor prob;
  Tensor mask;
};

struct FlowNetConfig {
  int feat_dim = 128;    // channels of the encoder feature maps
  int loc_hidden = 32;   // localization conv width
  int trunk_hidden = 32; // refinement encoder width (decoder uses the same)
};

// Alignment network operating on a pair of same-shape feature maps
// [1,D,h,w] with h and w even. Three pieces share the input concatenation:
//  - localize: two conv blocks, global average pool, linear to 6 affine
//    parameters; the linear layer starts at zero weight with identity bias,
//    so the net predicts the identity transform at step 0.
//  - refine: conv encoder, 2x downsample, conv, 2x upsample with a skip
//    concatenation, conv; the 2-channel flow head starts at zero, so the
//    initial flow is exactly zero.
//  - segment: the refinement trunk with a separate zero-initialized
//    1-channel head plus a sigmoid; probability 0.5 everywhere at step 0.
class FlowNet {
 public:
  FlowNet(const FlowNetConfig& config, Rng& rng);

  // [1,D,h,w] x2 -> [6]; inputs must share one shape.
  AffineParams localize(const Tensor& f_s, const Tensor& f_t) const;

  // Residual flow between the source map and the affine-aligned target map.
  FlowField refine(const Tensor& f_s, const Tensor& f_t_warped) const;

  // Foreground probability for the first argument's frame.
  Tensor segment_prob(const Tensor& f_s, const Tensor& f_t_warped) const;
  SegmentationOutput segment(const Tensor& f_s, const Tensor& f_t_warped) const;

  const FlowNetConfig& config() const { return config_; }
  std::vector<Tensor> parameters() const;
  std::vector<std::pair<std::string, Tensor>> named_parameters() const;

  // Directory checkpoint: one tensor file per parameter plus a JSON config.
  void save(const std::filesystem::path& dir) const;
  static FlowNet load(const std::filesystem::path& dir);

 private:
  Tensor trunk(const Tensor& f_s, const Tensor& f_t_warped) const;

  FlowNetConfig config_;
  Tensor loc1_k_, loc1_b_, loc2_k_, loc2_b_, loc_w_, loc_b_;
  Tensor enc1_k_, enc1_b_, enc2_k_, enc2_b_, dec_k_, dec_b_;
  Tensor flow_k_, flow_b_, seg_k_, seg_b_;
};

// Identity affine parameters as a constant tensor.
AffineParams identity_params();

// grid_sample(f_t, affine_grid(theta)): the target features pulled back onto
// the source site grid. Identity theta returns the input bit for bit.
Tensor affine_warp(const Tensor& f_t, const AffineParams& theta);

// grid_sample(f_t_warped, identity grid + flow): the second warp stage.
Tensor flow_warp(const Tensor& f_t_warped, const FlowField& flow);

// Mean over sites of the per-site channel L2 norm of (f_s - f_t_warped);
// the squared flag switches to the mean squared norm.
Tensor loss_affine(const Tensor& f_s, const Tensor& f_t_warped, bool squared = false);
Tensor loss_flow(const Tensor& f_s, const Tensor& f_t_refined, bool squared = false);

// Mined-correspondence consistency. Each target point is pulled through the
// inverse affine and the flow field back into the source frame; the loss is
// the mean pixel error against the stored source points, scaled by the
// inverse source diagonal. Points are pixel coordinates in an (h_s, w_s)
// frame. Requires at least one correspondence.
Tensor loss_corr(const std::vector<data::Quad>& corrs, const AffineParams& theta,
                 const FlowField& flow, int h_s, int w_s);

// Mean binary cross-entropy between a probability map and a {0,1} proxy
// mask of equal shape; probabilities are clamped to [1e-7, 1-1e-7].
Tensor loss_mask(const Tensor& prob, const Tensor& proxy);

struct LossWeights {
  double gamma = 4.0;  // flow term
  double mu = 1.0;     // correspondence term
  double nu = 1.0;     // mask term
};

// l_affine + gamma*l_flow + mu*l_corr + nu*l_mask. Callers sum one such
// total per pair direction.
Tensor loss_total(const Tensor& l_affine, const Tensor& l_flow, const Tensor& l_corr,
                  const Tensor& l_mask, const LossWeights& weights = {});

// Binary [1,1,h,w] mask that is 1 exactly on lattice points within `radius`
// of at least one of the given (x, y) points, in the mask's own pixel frame.
Tensor proxy_mask(const std::vector<std::pair<double, double>>& points, int h, int w,
                  double radius);

// Normalized sampling grid [1,h,w,2] of the full transform: each source site
// p maps to affine(p + flow(p)). Constant output (no gradients); used for
// dense evaluation and single-resample image warping.
Tensor composed_grid(const AffineParams& theta, const FlowField& flow, int h, int w);

// Warp an image [1,C,H,W] by the full transform in one resampling step. The
// flow field is bilinearly upsampled to the image resolution first.
Tensor warp_image(const Tensor& image, const AffineParams& theta, const FlowField& flow);

// Dense pixel-coordinate map [2,h_s,w_s]: for every source pixel, the
// target pixel position under the full transform. Built from composed_grid
// with the flow upsampled to the source resolution; constant output.
Tensor dense_pixel_map(const AffineParams& theta, const FlowField& flow, int h_s,
                       int w_s, int h_t, int w_t);

// Map individual source pixel positions through the full transform into
// target pixel positions. The flow is read bilinearly at each normalized
// source location with grid-sampling semantics (zero outside the field).
std::vector<std::pair<double, double>> transform_points(
    const AffineParams& theta, const FlowField& flow,
    const std::vector<std::pair<double, double>>& points_s, int h_s, int w_s, int h_t,
    int w_t);

struct FlowTrainConfig {
  int epochs = 40;
  double lr = 0.01;
  double momentum = 0.9;
  LossWeights weights;
  bool squared = false;        // squared-norm variant of the feature losses
  double mask_radius = 5.0;    // proxy disk radius in image pixels
  bool train_encoder = false;  // default: encoder stays frozen
  FlowNetConfig net;
};

struct FlowTrainCurve {
  // Per-epoch means of each component, summed over both pair directions.
  std::vector<double> affine, flow, corr, mask, total;
  bool corr_skipped = false;  // some pair had no correspondences
};

// SGD over both pair directions of the total loss. Feature extraction runs
// without gradients unless config.train_encoder is set.
FlowTrainCurve train_flownet(const std::vector<enc::TrainSample>& samples, Backbone& net,
                             FlowNet& flownet, const FlowTrainConfig& config, Rng rng);

}  // namespace msf::flow
