#include "msflow/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include <json.hpp>

#include "msflow/checkpoint.hpp"
#include "msflow/common.hpp"
#include "msflow/ops.hpp"

namespace msf {

using nlohmann::json;

namespace {

Tensor he_tensor(Shape shape, double fan_in, Rng& rng) {
  std::vector<float> data(shape_numel(shape));
  const double stddev = std::sqrt(2.0 / fan_in);
  for (auto& v : data) v = static_cast<float>(rng.normal(0.0, stddev));
  return Tensor::param(std::move(shape), std::move(data));
}

void copy_into_param(Tensor param, const Tensor& value) {
  MSF_CHECK(param.shape() == value.shape(),
            "checkpoint tensor shape " << shape_str(value.shape()) << " != expected "
                                       << shape_str(param.shape()));
  std::copy(value.data().begin(), value.data().end(), param.mutable_data().begin());
}

json config_to_json(const BackboneConfig& c) {
  json j;
  j["input_size"] = c.input_size;
  j["channels"] = c.channels;
  j["pool_after"] = c.pool_after;
  j["embed_dim"] = c.embed_dim;
  j["kernel"] = c.kernel;
  j["multi_scale"] = c.multi_scale;
  j["msconv"] = {{"dilations", c.msconv.dilations},
                 {"share_kernel", c.msconv.share_kernel},
                 {"fuse_after_activation", c.msconv.fuse_after_activation}};
  return j;
}

BackboneConfig config_from_json(const json& j) {
  BackboneConfig c;
  c.input_size = j.at("input_size").get<int>();
  c.channels = j.at("channels").get<std::vector<int>>();
  c.pool_after = j.at("pool_after").get<std::vector<int>>();
  c.embed_dim = j.at("embed_dim").get<int>();
  c.kernel = j.at("kernel").get<int>();
  c.multi_scale = j.at("multi_scale").get<bool>();
  const auto& m = j.at("msconv");
  c.msconv.dilations = m.at("dilations").get<std::vector<int>>();
  c.msconv.share_kernel = m.at("share_kernel").get<bool>();
  c.msconv.fuse_after_activation = m.at("fuse_after_activation").get<bool>();
  return c;
}

}  // namespace

ConvUnit::ConvUnit(int in_channels, int out_channels, int k, bool multi_scale,
                   const MsConvConfig& ms_config, Rng& rng)
    : k_(k) {
  if (multi_scale) {
    ms_ = std::make_unique<MultiScaleConv>(in_channels, out_channels, k, ms_config, rng);
  } else {
    kernel_ = he_tensor({out_channels, in_channels, k, k},
                        static_cast<double>(in_channels) * k * k, rng);
    bias_ = Tensor::param({out_channels}, std::vector<float>(out_channels, 0.0f));
  }
}

Tensor ConvUnit::forward(const Tensor& x) const {
  if (ms_) return ms_->forward(x);
  return ops::relu(ops::conv2d(x, kernel_, bias_, 1, k_ / 2, 1));
}

std::vector<Tensor> ConvUnit::parameters() const {
  if (ms_) return ms_->parameters();
  return {kernel_, bias_};
}

std::vector<std::pair<std::string, Tensor>> ConvUnit::named_parameters(
    const std::string& prefix) const {
  if (ms_) return ms_->named_parameters(prefix);
  return {{prefix + ".kernel", kernel_}, {prefix + ".bias", bias_}};
}

Backbone::Backbone(BackboneConfig config, Rng& rng) : config_(std::move(config)) {
  MSF_CHECK(!config_.channels.empty(), "backbone: empty channel list");
  MSF_CHECK(config_.channels.size() == config_.pool_after.size(),
            "backbone: channels (" << config_.channels.size() << ") and pool_after ("
                                   << config_.pool_after.size() << ") differ in length");
  MSF_CHECK(config_.embed_dim > 0, "backbone: embed_dim must be positive");
  MSF_CHECK(config_.kernel >= 1 && config_.kernel % 2 == 1,
            "backbone: kernel size " << config_.kernel << " must be odd");
  int in = 3;
  for (std::size_t i = 0; i < config_.channels.size(); ++i) {
    Rng layer_rng = rng.stream("conv" + std::to_string(i + 1));
    layers_.emplace_back(in, config_.channels[i], config_.kernel, config_.multi_scale,
                         config_.msconv, layer_rng);
    in = config_.channels[i];
  }
  Rng embed_rng = rng.stream("embed");
  embed_kernel_ = he_tensor({config_.embed_dim, in, 1, 1}, in, embed_rng);
  embed_bias_ = Tensor::param({config_.embed_dim},
                              std::vector<float>(config_.embed_dim, 0.0f));
}

int Backbone::stride() const {
  int s = 1;
  for (int p : config_.pool_after) {
    if (p) s *= 2;
  }
  return s;
}

double Backbone::site_offset() const { return (stride() - 1) / 2.0; }

int Backbone::min_input() const {
  // Each layer needs its own input to cover the largest kernel span, and
  // every pool needs even extents; the latter is implied by divisibility by
  // the total stride, which forward() checks separately.
  int need = 1;
  int scale = 1;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const int span = layers_[i].multi_scale()
                         ? config_.msconv.dilations.back() * (config_.kernel - 1) + 1
                         : config_.kernel;
    need = std::max(need, scale * span);
    if (config_.pool_after[i]) scale *= 2;
  }
  const int s = stride();
  return ((need + s - 1) / s) * s;
}

Tensor Backbone::forward_raw(const Tensor& images) const {
  MSF_CHECK(images.defined() && images.rank() == 4 && images.dim(1) == 3,
            "backbone: input must be [N,3,H,W], got "
                << (images.defined() ? shape_str(images.shape()) : "undefined"));
  const int h = images.dim(2);
  const int w = images.dim(3);
  const int lo = min_input();
  MSF_CHECK(h >= lo && w >= lo, "backbone: input " << h << "x" << w
                                                   << " below the minimum input size "
                                                   << lo << "x" << lo);
  const int s = stride();
  MSF_CHECK(h % s == 0 && w % s == 0,
            "backbone: input " << h << "x" << w << " must be divisible by the stride "
                               << s);
  Tensor x = images;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    x = layers_[i].forward(x);
    if (config_.pool_after[i]) x = ops::max_pool2(x);
  }
  return ops::conv2d(x, embed_kernel_, embed_bias_, 1, 0, 1);
}

Tensor Backbone::forward(const Tensor& images) const {
  return ops::l2_normalize_sites(forward_raw(images));
}

std::vector<Tensor> Backbone::parameters() const {
  std::vector<Tensor> params;
  for (const auto& layer : layers_) {
    for (auto& t : layer.parameters()) params.push_back(t);
  }
  params.push_back(embed_kernel_);
  params.push_back(embed_bias_);
  return params;
}

std::vector<std::pair<std::string, Tensor>> Backbone::named_parameters() const {
  std::vector<std::pair<std::string, Tensor>> named;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    for (auto& entry : layers_[i].named_parameters("conv" + std::to_string(i + 1))) {
      named.push_back(std::move(entry));
    }
  }
  named.emplace_back("embed.kernel", embed_kernel_);
  named.emplace_back("embed.bias", embed_bias_);
  return named;
}

std::vector<std::pair<std::string, std::vector<double>>> Backbone::mixture_report()
    const {
  std::vector<std::pair<std::string, std::vector<double>>> report;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (!layers_[i].multi_scale()) continue;
    report.emplace_back("conv" + std::to_string(i + 1),
                        layers_[i].ms()->mixture_weights());
  }
  return report;
}

void Backbone::save(const std::filesystem::path& dir) const {
  save_named_tensors(dir, named_parameters());
  std::ofstream out(dir / "backbone.json");
  MSF_CHECK(out.good(), "backbone: cannot write " << (dir / "backbone.json").string());
  out << config_to_json(config_).dump(2) << "\n";
}

Backbone Backbone::load(const std::filesystem::path& dir) {
  std::ifstream in(dir / "backbone.json");
  MSF_CHECK(in.good(), "backbone: cannot open " << (dir / "backbone.json").string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    MSF_CHECK(false, (dir / "backbone.json").string() << ": " << e.what());
  }
  Rng rng(0);
  Backbone net(config_from_json(j), rng);
  std::map<std::string, Tensor> stored;
  for (auto& [name, t] : load_named_tensors(dir)) stored.emplace(name, std::move(t));
  for (auto& [name, param] : net.named_parameters()) {
    auto it = stored.find(name);
    MSF_CHECK(it != stored.end(), "backbone: checkpoint missing tensor '" << name << "'");
    copy_into_param(param, it->second);
  }
  return net;
}

Backbone replace_convs(const Backbone& net, const MsConvConfig& ms_config) {
  BackboneConfig config = net.config();
  config.multi_scale = true;
  config.msconv = ms_config;
  Rng rng(0);
  Backbone out(config, rng);
  for (std::size_t i = 0; i < net.layers().size(); ++i) {
    const auto& src = net.layers()[i];
    const auto& dst = out.layers()[i];
    MSF_CHECK(dst.multi_scale(), "replace_convs: expected a multi-scale layer");
    if (src.multi_scale()) {
      const auto src_params = src.parameters();
      const auto dst_params = dst.parameters();
      MSF_CHECK(src_params.size() == dst_params.size(),
                "replace_convs: layer " << i << " has a different branch structure");
      for (std::size_t p = 0; p < src_params.size(); ++p) {
        copy_into_param(dst_params[p], src_params[p]);
      }
    } else {
      // Every branch starts as the plain kernel; logits stay uniform.
      const int n_branches =
          ms_config.share_kernel ? 1 : static_cast<int>(ms_config.dilations.size());
      for (int b = 0; b < n_branches; ++b) {
        copy_into_param(dst.ms()->kernel(b), src.plain_kernel());
      }
      copy_into_param(dst.ms()->bias(), src.plain_bias());
    }
  }
  const auto src_named = net.named_parameters();
  const auto dst_named = out.named_parameters();
  for (const auto& [name, param] : dst_named) {
    if (name.rfind("embed.", 0) != 0) continue;
    for (const auto& [src_name, src_param] : src_named) {
      if (src_name == name) copy_into_param(param, src_param);
    }
  }
  return out;
}

}  // namespace msf
