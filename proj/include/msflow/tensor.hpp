#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace msf {

// Tensor extents, outermost first. Data is always dense row major float32.
using Shape = std::vector<int>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

struct TensorImpl {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;  // allocated lazily on first accumulation
  bool requires_grad = false;

  // Reverse-mode tape. backward_fn reads this->grad and accumulates into the
  // parents' grad buffers. Empty for leaves.
  std::vector<std::shared_ptr<TensorImpl>> parents;
  std::function<void(TensorImpl&)> backward_fn;

  std::size_t numel() const { return data.size(); }
  // Zero-filled grad buffer, created on demand.
  std::span<float> grad_buf();
};

// Handle with shared ownership of the storage and tape node. Copying a
// Tensor aliases it; clone() makes a detached deep copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, float value);
  static Tensor from_data(Shape shape, std::vector<float> data);
  // Leaf that participates in backward (a trainable parameter).
  static Tensor param(Shape shape, std::vector<float> data);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  int dim(int i) const;
  int rank() const;
  std::size_t numel() const;

  std::span<const float> data() const;
  // Direct writes are for leaves only; writing through this on a node that
  // has a tape entry would corrupt gradients.
  std::span<float> mutable_data();

  float at(std::initializer_list<int> idx) const;
  float item() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool value);
  std::span<const float> grad() const;  // empty until backward reaches it
  void zero_grad();

  Tensor clone() const;

  // Reverse-mode sweep from a scalar. Seeds d(self)/d(self) = 1, walks the
  // tape in reverse topological order, visits each node once. Activations
  // are never mutated; only grad buffers are written.
  void backward() const;

  TensorImpl* impl() const { return impl_.get(); }
  std::shared_ptr<TensorImpl> impl_ptr() const { return impl_; }

  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// While one of these is alive (per thread), newly created ops record no tape
// entries and their results have requires_grad = false.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

bool grad_enabled();

// Shared factory for op results: wires parents and the backward closure if
// grad mode is on and any input requires grad.
Tensor make_op_result(Shape shape, std::vector<float> data,
                      const std::vector<Tensor>& inputs,
                      std::function<void(TensorImpl&)> backward_fn);

}  // namespace msf
