#include "msflow/optim.hpp"

#include "msflow/common.hpp"

namespace msf {

Sgd::Sgd(std::vector<Tensor> params, double lr, double momentum)
    : params_(std::move(params)), lr_(lr), momentum_(momentum) {
  MSF_CHECK(lr > 0.0, "Sgd: learning rate must be positive, got " << lr);
  MSF_CHECK(momentum >= 0.0 && momentum < 1.0,
            "Sgd: momentum must be in [0,1), got " << momentum);
  velocity_.reserve(params_.size());
  for (const Tensor& p : params_) {
    MSF_CHECK(p.defined() && p.requires_grad(),
              "Sgd: every parameter must be a defined tensor with requires_grad");
    velocity_.emplace_back(p.numel(), 0.f);
  }
}

void Sgd::set_lr(double lr) {
  MSF_CHECK(lr > 0.0, "Sgd: learning rate must be positive, got " << lr);
  lr_ = lr;
}

void Sgd::step() {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto g = params_[i].grad();
    if (g.empty()) continue;
    auto data = params_[i].mutable_data();
    auto& v = velocity_[i];
    for (std::size_t j = 0; j < data.size(); ++j) {
      v[j] = static_cast<float>(momentum_ * v[j] + g[j]);
      data[j] -= static_cast<float>(lr_ * v[j]);
    }
  }
}

void Sgd::zero_grad() {
  for (Tensor& p : params_) p.zero_grad();
}

}  // namespace msf
