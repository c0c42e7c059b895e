#include "msflow/msconv.hpp"

#include <algorithm>
#include <cmath>

#include "msflow/common.hpp"
#include "msflow/ops.hpp"

namespace msf {

namespace {

Tensor he_kernel(int co, int ci, int k, Rng& rng) {
  const std::size_t n = static_cast<std::size_t>(co) * ci * k * k;
  std::vector<float> data(n);
  const double stddev = std::sqrt(2.0 / (static_cast<double>(ci) * k * k));
  for (auto& v : data) v = static_cast<float>(rng.normal(0.0, stddev));
  return Tensor::param({co, ci, k, k}, std::move(data));
}

}  // namespace

MultiScaleConv::MultiScaleConv(int in_channels, int out_channels, int k,
                               MsConvConfig config, Rng& rng)
    : config_(std::move(config)),
      in_channels_(in_channels),
      out_channels_(out_channels),
      k_(k) {
  MSF_CHECK(in_channels > 0 && out_channels > 0, "msconv: channels must be positive");
  MSF_CHECK(k >= 1 && k % 2 == 1, "msconv: kernel size " << k << " must be odd");
  MSF_CHECK(!config_.dilations.empty(), "msconv: empty dilation list");
  for (std::size_t i = 0; i < config_.dilations.size(); ++i) {
    MSF_CHECK(config_.dilations[i] >= 1, "msconv: dilation " << config_.dilations[i]);
    MSF_CHECK(i == 0 || config_.dilations[i] > config_.dilations[i - 1],
              "msconv: dilations must be strictly increasing");
  }
  const int n_kernels =
      config_.share_kernel ? 1 : static_cast<int>(config_.dilations.size());
  for (int i = 0; i < n_kernels; ++i) {
    kernels_.push_back(he_kernel(out_channels, in_channels, k, rng));
  }
  bias_ = Tensor::param({out_channels}, std::vector<float>(out_channels, 0.0f));
  // Zero logits: the layer starts as an unbiased average over scales.
  logits_ = Tensor::param({static_cast<int>(config_.dilations.size())},
                          std::vector<float>(config_.dilations.size(), 0.0f));
}

Tensor MultiScaleConv::kernel(int branch) const {
  MSF_CHECK(branch >= 0 && branch < static_cast<int>(config_.dilations.size()),
            "msconv: branch " << branch << " out of range");
  return config_.share_kernel ? kernels_[0] : kernels_[branch];
}

Tensor MultiScaleConv::forward(const Tensor& x) const {
  MSF_CHECK(x.defined() && x.rank() == 4, "msconv: input must be [N,C,H,W]");
  const int dmax = config_.dilations.back();
  const int need = dmax * (k_ - 1) + 1;
  MSF_CHECK(x.dim(2) >= need && x.dim(3) >= need,
            "msconv: input " << x.dim(2) << "x" << x.dim(3)
                             << " too small for dilation " << dmax
                             << " (needs at least " << need << "x" << need << ")");

  const Tensor weights = ops::softmax(logits_);
  Tensor fused;
  for (std::size_t i = 0; i < config_.dilations.size(); ++i) {
    const int d = config_.dilations[i];
    const int pad = d * (k_ - 1) / 2;
    Tensor y = ops::conv2d(x, kernel(static_cast<int>(i)), bias_, 1, pad, d);
    if (config_.fuse_after_activation) y = ops::relu(y);
    y = ops::scale_by_index(y, weights, static_cast<int>(i));
    // Summed in dilation order so the reduction is bit-reproducible.
    fused = fused.defined() ? ops::add(fused, y) : y;
  }
  if (!config_.fuse_after_activation) fused = ops::relu(fused);
  return fused;
}

std::vector<double> MultiScaleConv::mixture_weights() const {
  auto logits = logits_.data();
  double mx = logits[0];
  for (float v : logits) mx = std::max(mx, static_cast<double>(v));
  std::vector<double> w(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    w[i] = std::exp(static_cast<double>(logits[i]) - mx);
    sum += w[i];
  }
  for (auto& v : w) v /= sum;
  return w;
}

std::vector<Tensor> MultiScaleConv::parameters() const {
  std::vector<Tensor> params = kernels_;
  params.push_back(bias_);
  params.push_back(logits_);
  return params;
}

std::vector<std::pair<std::string, Tensor>> MultiScaleConv::named_parameters(
    const std::string& prefix) const {
  std::vector<std::pair<std::string, Tensor>> named;
  if (kernels_.size() == 1) {
    named.emplace_back(prefix + ".kernel", kernels_[0]);
  } else {
    for (std::size_t i = 0; i < kernels_.size(); ++i) {
      named.emplace_back(prefix + ".kernel" + std::to_string(i), kernels_[i]);
    }
  }
  named.emplace_back(prefix + ".bias", bias_);
  named.emplace_back(prefix + ".logits", logits_);
  return named;
}

void MultiScaleConv::load_parameters(const std::vector<Tensor>& values) {
  auto params = parameters();
  MSF_CHECK(values.size() == params.size(),
            "msconv: expected " << params.size() << " tensors, got " << values.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    MSF_CHECK(params[i].shape() == values[i].shape(),
              "msconv: tensor " << i << " shape " << shape_str(values[i].shape())
                                << " != " << shape_str(params[i].shape()));
    std::copy(values[i].data().begin(), values[i].data().end(),
              params[i].mutable_data().begin());
  }
}

}  // namespace msf
