#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "msflow/msconv.hpp"
#include "msflow/rng.hpp"
#include "msflow/tensor.hpp"

namespace msf {

// Feature extractor: four conv+relu blocks with max pooling after selected
// blocks, then a 1x1 projection to embed_dim. forward() L2-normalizes the
// channel vector at every spatial site; forward_raw() leaves it unnormalized
// so callers can read activation magnitudes.
struct BackboneConfig {
  int input_size = 224;                        // training resolution
  std::vector<int> channels = {64, 128, 256, 512};
  std::vector<int> pool_after = {1, 1, 0, 0};  // 1 = 2x2 max pool after block i
  int embed_dim = 128;
  int kernel = 3;
  bool multi_scale = true;
  MsConvConfig msconv;
};

// One backbone layer: a plain conv+relu, or a MultiScaleConv.
class ConvUnit {
 public:
  ConvUnit(int in_channels, int out_channels, int k, bool multi_scale,
           const MsConvConfig& ms_config, Rng& rng);

  Tensor forward(const Tensor& x) const;
  bool multi_scale() const { return ms_ != nullptr; }
  const MultiScaleConv* ms() const { return ms_.get(); }
  Tensor plain_kernel() const { return kernel_; }
  Tensor plain_bias() const { return bias_; }

  std::vector<Tensor> parameters() const;
  std::vector<std::pair<std::string, Tensor>> named_parameters(
      const std::string& prefix) const;

 private:
  std::unique_ptr<MultiScaleConv> ms_;
  Tensor kernel_;  // plain path
  Tensor bias_;
  int k_;
};

class Backbone {
 public:
  Backbone(BackboneConfig config, Rng& rng);

  // [N,3,H,W] -> [N,embed_dim,h,w], unit channel norm at every site.
  Tensor forward(const Tensor& images) const;
  // Same map before normalization.
  Tensor forward_raw(const Tensor& images) const;

  int stride() const;              // image px per feature site
  double site_offset() const;      // image px of feature site 0's center
  int min_input() const;           // smallest accepted H and W

  const BackboneConfig& config() const { return config_; }
  const std::vector<ConvUnit>& layers() const { return layers_; }

  std::vector<Tensor> parameters() const;
  std::vector<std::pair<std::string, Tensor>> named_parameters() const;

  // Mixture weights per multi-scale layer, in layer order, for the
  // layer x dilation report. Empty for a plain backbone.
  std::vector<std::pair<std::string, std::vector<double>>> mixture_report() const;

  void save(const std::filesystem::path& dir) const;
  static Backbone load(const std::filesystem::path& dir);

 private:
  BackboneConfig config_;
  std::vector<ConvUnit> layers_;
  Tensor embed_kernel_;
  Tensor embed_bias_;
};

// A copy of the network with every plain convolution swapped for a
// MultiScaleConv that starts as that convolution's kernel under a uniform
// mixture. A multi-scale input is returned unchanged (as a copy).
Backbone replace_convs(const Backbone& net, const MsConvConfig& ms_config);

}  // namespace msf
