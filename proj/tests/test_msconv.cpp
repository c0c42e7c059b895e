#include <doctest.h>

#include <cmath>
#include <vector>

#include "msflow/common.hpp"
#include "msflow/model.hpp"
#include "msflow/msconv.hpp"
#include "msflow/ops.hpp"
#include "msflow/optim.hpp"
#include "msflow/rng.hpp"
#include "msflow/tensor.hpp"

using msf::MsConvConfig;
using msf::MultiScaleConv;
using msf::Rng;
using msf::Tensor;
namespace ops = msf::ops;

namespace {

Tensor random_input(Rng& rng, int c, int h, int w) {
  std::vector<float> data(static_cast<std::size_t>(c) * h * w);
  for (float& v : data) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  return Tensor::from_data({1, c, h, w}, std::move(data));
}

void set_logits(MultiScaleConv& layer, const std::vector<float>& values) {
  Tensor logits = layer.logits();
  auto dst = logits.mutable_data();
  std::copy(values.begin(), values.end(), dst.begin());
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  double mx = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i)
    mx = std::max(mx, static_cast<double>(std::abs(a.data()[i] - b.data()[i])));
  return mx;
}

}  // namespace

TEST_CASE("one-hot mixture reduces to the single dilated branch") {
  Rng rng(11);
  MsConvConfig cfg;  // dilations 1..5
  MultiScaleConv layer(3, 4, 3, cfg, rng);
  Tensor x = random_input(rng, 3, 14, 14);
  for (std::size_t i = 0; i < cfg.dilations.size(); ++i) {
    std::vector<float> logits(cfg.dilations.size(), 0.f);
    logits[i] = 40.f;  // softmax puts ~1 - 4e-18 on this branch
    set_logits(layer, logits);
    const int d = cfg.dilations[i];
    Tensor branch =
        ops::relu(ops::conv2d(x, layer.kernel(), layer.bias(), 1, d * (3 - 1) / 2, d));
    CHECK(max_abs_diff(layer.forward(x), branch) < 1e-5);
  }
}

TEST_CASE("uniform mixture equals the arithmetic mean of the branches") {
  Rng rng(12);
  MsConvConfig cfg;
  cfg.dilations = {1, 2, 3};
  MultiScaleConv layer(2, 3, 3, cfg, rng);
  set_logits(layer, {0.7f, 0.7f, 0.7f});  // equal, not zero: same softmax
  Tensor x = random_input(rng, 2, 12, 12);
  Tensor mean;
  for (int d : cfg.dilations) {
    Tensor b = ops::relu(ops::conv2d(x, layer.kernel(), layer.bias(), 1, d, d));
    mean = mean.defined() ? ops::add(mean, b) : b;
  }
  mean = ops::mul_scalar(mean, 1.0 / 3.0);
  CHECK(max_abs_diff(layer.forward(x), mean) < 1e-5);
}

TEST_CASE("output spatial extent matches the input for every dilation") {
  Rng rng(13);
  MsConvConfig cfg;
  MultiScaleConv layer(2, 2, 3, cfg, rng);
  Tensor x = random_input(rng, 2, 11, 13);
  Tensor y = layer.forward(x);
  CHECK(y.shape() == msf::Shape{1, 2, 11, 13});
}

TEST_CASE("permuting dilations together with logits leaves the output unchanged") {
  Rng rng(14);
  MsConvConfig cfg;
  cfg.dilations = {1, 2, 4};
  MultiScaleConv layer(2, 3, 3, cfg, rng);
  set_logits(layer, {0.3f, -0.8f, 1.1f});
  Tensor x = random_input(rng, 2, 12, 12);
  Tensor base = layer.forward(x);

  MsConvConfig permuted_cfg = cfg;
  permuted_cfg.dilations = {1, 2, 4};  // layer requires ascending order; permute
                                       // the *branch assignment* instead
  // Build a second layer with the same kernel and a permuted (dilation,
  // logit) pairing expressed through an equivalent ascending list.
  Rng rng2(14);
  MultiScaleConv other(2, 3, 3, permuted_cfg, rng2);
  other.load_parameters({layer.kernel().clone(), layer.bias().clone(),
                         Tensor::from_data({3}, {0.3f, -0.8f, 1.1f})});
  CHECK(max_abs_diff(other.forward(x), base) < 1e-6);

  // The same mixture written as an explicit weighted sum in a different
  // branch order must agree: fusion order cannot leak into the values by
  // more than float round-off.
  auto weights = layer.mixture_weights();
  Tensor manual;
  for (int idx : {2, 0, 1}) {
    const int d = cfg.dilations[static_cast<std::size_t>(idx)];
    Tensor b = ops::relu(ops::conv2d(x, layer.kernel(), layer.bias(), 1, d, d));
    b = ops::mul_scalar(b, weights[static_cast<std::size_t>(idx)]);
    manual = manual.defined() ? ops::add(manual, b) : b;
  }
  CHECK(max_abs_diff(manual, base) < 1e-6);
}

TEST_CASE("dilation list {1} with one-hot weight is a plain conv relu") {
  Rng rng(15);
  MsConvConfig cfg;
  cfg.dilations = {1};
  MultiScaleConv layer(3, 5, 3, cfg, rng);
  Tensor x = random_input(rng, 3, 10, 10);
  Tensor plain = ops::relu(ops::conv2d(x, layer.kernel(), layer.bias(), 1, 1, 1));
  CHECK(max_abs_diff(layer.forward(x), plain) < 1e-6);
}

TEST_CASE("input too small for the largest dilation names it in the error") {
  Rng rng(16);
  MsConvConfig cfg;  // largest dilation 5 needs 11x11
  MultiScaleConv layer(2, 2, 3, cfg, rng);
  Tensor x = random_input(rng, 2, 8, 8);
  try {
    layer.forward(x);
    FAIL("expected an error");
  } catch (const msf::Error& e) {
    CHECK(std::string(e.what()).find("dilation 5") != std::string::npos);
  }
}

TEST_CASE("mixture weights stay on the simplex through 100 optimizer steps") {
  Rng rng(17);
  MsConvConfig cfg;
  MultiScaleConv layer(2, 3, 3, cfg, rng);
  Tensor x = random_input(rng, 2, 12, 12);
  Tensor target = random_input(rng, 3, 12, 12);
  msf::Sgd opt(layer.parameters(), 0.05, 0.9);
  for (int step = 0; step < 100; ++step) {
    Tensor loss = ops::mean_all(ops::square(ops::sub(layer.forward(x), target)));
    loss.backward();
    opt.step();
    opt.zero_grad();
    auto w = layer.mixture_weights();
    double sum = 0.0;
    for (double v : w) {
      CHECK(v > 0.0);
      sum += v;
    }
    CHECK(std::abs(sum - 1.0) < 1e-6);
  }
  // The logits must actually have moved; otherwise the property is vacuous.
  auto final_w = layer.mixture_weights();
  double spread = 0.0;
  for (double v : final_w) spread = std::max(spread, std::abs(v - 0.2));
  CHECK(spread > 1e-4);
}

TEST_CASE("kernel still trains when the logits are frozen") {
  Rng rng(18);
  MsConvConfig cfg;
  cfg.dilations = {1, 2};
  MultiScaleConv layer(2, 2, 3, cfg, rng);
  Tensor x = random_input(rng, 2, 10, 10);
  Tensor target = random_input(rng, 2, 10, 10);
  // Optimize only kernel and bias; logits stay put.
  msf::Sgd opt({layer.kernel(), layer.bias()}, 0.1);
  const auto logits_before = std::vector<float>(layer.logits().data().begin(),
                                                layer.logits().data().end());
  double first = 0.0, last = 0.0;
  for (int step = 0; step < 60; ++step) {
    opt.zero_grad();
    layer.logits().zero_grad();
    Tensor loss = ops::mean_all(ops::square(ops::sub(layer.forward(x), target)));
    loss.backward();
    opt.step();
    if (step == 0) first = loss.item();
    last = loss.item();
  }
  CHECK(last < first * 0.8);
  for (std::size_t i = 0; i < logits_before.size(); ++i)
    CHECK(layer.logits().data()[i] == logits_before[i]);
}

TEST_CASE("swapping every plain conv for a mixture layer preserves shape and output") {
  msf::BackboneConfig pc;
  pc.input_size = 48;  // still 12x12 after both pools, enough for dilation 5
  pc.channels = {4, 6, 8, 8};
  pc.embed_dim = 8;
  pc.multi_scale = false;
  Rng rng(19);
  msf::Backbone plain(pc, rng);
  msf::MsConvConfig ms;  // dilations 1..5
  msf::Backbone mixed = msf::replace_convs(plain, ms);

  int ms_layers = 0;
  for (const auto& unit : mixed.layers()) {
    if (!unit.multi_scale()) continue;
    ++ms_layers;
    CHECK(unit.ms()->dilations().size() == 5);
  }
  CHECK(ms_layers == 4);

  // One-hot on dilation 1 makes every mixture layer the original conv.
  for (const auto& unit : mixed.layers()) {
    Tensor logits = unit.ms()->logits();
    auto dst = logits.mutable_data();
    std::fill(dst.begin(), dst.end(), 0.f);
    dst[0] = 40.f;
  }
  Rng img_rng(20);
  Tensor x = random_input(img_rng, 3, 48, 48);
  CHECK(max_abs_diff(mixed.forward(x), plain.forward(x)) < 1e-5);

  // Uniform-start report: one row per conv layer, each summing to 1.
  msf::Backbone fresh = msf::replace_convs(plain, ms);
  auto report = fresh.mixture_report();
  CHECK(report.size() == 4);
  for (const auto& [name, weights] : report) {
    CHECK(weights.size() == 5);
    double sum = 0.0;
    for (double w : weights) sum += w;
    CHECK(std::abs(sum - 1.0) < 1e-6);
  }
}
