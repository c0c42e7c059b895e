#pragma once

#include <vector>

#include "msflow/tensor.hpp"

namespace msf {

// Plain SGD with classical momentum. Velocity buffers persist across steps
// and are keyed by parameter order, so the same construction order must be
// used when resuming.
class Sgd {
 public:
  Sgd(std::vector<Tensor> params, double lr, double momentum = 0.0);

  // v = momentum * v + grad; p -= lr * v. Parameters whose grad buffer was
  // never touched this round are treated as having zero gradient.
  void step();
  void zero_grad();

  double lr() const { return lr_; }
  void set_lr(double lr);

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<float>> velocity_;
  double lr_;
  double momentum_;
};

}  // namespace msf
