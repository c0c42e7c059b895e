#pragma once

#include <string>
#include <vector>

#include "msflow/rng.hpp"
#include "msflow/tensor.hpp"

// A convolution layer evaluated at several dilation strides whose outputs
// are blended by a learned convex mixture. One kernel is shared across the
// branches by default; the mixture weights are softmax(logits) so they stay
// on the simplex under plain gradient steps.
namespace msf {

struct MsConvConfig {
  std::vector<int> dilations = {1, 2, 3, 4, 5};
  bool share_kernel = true;
  // true: blend relu(conv_d(x)); false: relu(blend of conv_d(x)).
  bool fuse_after_activation = true;
};

class MultiScaleConv {
 public:
  // Kernel k must be odd so padding d*(k-1)/2 preserves the spatial extent.
  MultiScaleConv(int in_channels, int out_channels, int k, MsConvConfig config,
                 Rng& rng);

  Tensor forward(const Tensor& x) const;

  // softmax(logits) as plain numbers, for reports.
  std::vector<double> mixture_weights() const;

  const MsConvConfig& config() const { return config_; }
  const std::vector<int>& dilations() const { return config_.dilations; }
  Tensor logits() const { return logits_; }
  // Branch kernel; with a shared kernel every index returns the same tensor.
  Tensor kernel(int branch = 0) const;
  Tensor bias() const { return bias_; }

  // Trainable tensors in a fixed order: kernel(s), bias, logits.
  std::vector<Tensor> parameters() const;
  // Named with a caller-supplied prefix, for checkpoints.
  std::vector<std::pair<std::string, Tensor>> named_parameters(
      const std::string& prefix) const;
  void load_parameters(const std::vector<Tensor>& values);

 private:
  MsConvConfig config_;
  int in_channels_;
  int out_channels_;
  int k_;
  std::vector<Tensor> kernels_;  // size 1 when shared
  Tensor bias_;
  Tensor logits_;
};

}  // namespace msf
