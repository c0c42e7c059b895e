#include "msflow/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "msflow/common.hpp"

namespace msf {

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(s[i]);
  }
  out += "]";
  return out;
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) {
    MSF_CHECK(d >= 0, "shape " << shape_str(s) << " has negative extent");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::span<float> TensorImpl::grad_buf() {
  if (grad.size() != data.size()) grad.assign(data.size(), 0.f);
  return grad;
}

namespace {
thread_local bool g_grad_enabled = true;

std::shared_ptr<TensorImpl> make_impl(Shape shape, std::vector<float> data) {
  MSF_CHECK(shape_numel(shape) == data.size(),
            "tensor data size " << data.size() << " does not match shape "
                                << shape_str(shape));
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  return impl;
}
}  // namespace

Tensor Tensor::zeros(Shape shape) {
  const std::size_t n = shape_numel(shape);
  return Tensor(make_impl(std::move(shape), std::vector<float>(n, 0.f)));
}

Tensor Tensor::full(Shape shape, float value) {
  const std::size_t n = shape_numel(shape);
  return Tensor(make_impl(std::move(shape), std::vector<float>(n, value)));
}

Tensor Tensor::from_data(Shape shape, std::vector<float> data) {
  return Tensor(make_impl(std::move(shape), std::move(data)));
}

Tensor Tensor::param(Shape shape, std::vector<float> data) {
  Tensor t(make_impl(std::move(shape), std::move(data)));
  t.impl_->requires_grad = true;
  return t;
}

const Shape& Tensor::shape() const {
  MSF_CHECK(impl_, "shape() on undefined tensor");
  return impl_->shape;
}

int Tensor::dim(int i) const {
  const Shape& s = shape();
  MSF_CHECK(i >= 0 && i < static_cast<int>(s.size()),
            "dim " << i << " out of range for shape " << shape_str(s));
  return s[i];
}

int Tensor::rank() const { return static_cast<int>(shape().size()); }

std::size_t Tensor::numel() const {
  MSF_CHECK(impl_, "numel() on undefined tensor");
  return impl_->numel();
}

std::span<const float> Tensor::data() const {
  MSF_CHECK(impl_, "data() on undefined tensor");
  return impl_->data;
}

std::span<float> Tensor::mutable_data() {
  MSF_CHECK(impl_, "mutable_data() on undefined tensor");
  MSF_CHECK(!impl_->backward_fn,
            "mutable_data() on a non-leaf tensor would invalidate its tape entry");
  return impl_->data;
}

float Tensor::at(std::initializer_list<int> idx) const {
  const Shape& s = shape();
  MSF_CHECK(idx.size() == s.size(), "at(): " << idx.size()
                                             << " indices for rank " << s.size());
  std::size_t flat = 0;
  int i = 0;
  for (int v : idx) {
    MSF_CHECK(v >= 0 && v < s[i],
              "at(): index " << v << " out of range for dim " << i << " of "
                             << shape_str(s));
    flat = flat * static_cast<std::size_t>(s[i]) + static_cast<std::size_t>(v);
    ++i;
  }
  return impl_->data[flat];
}

float Tensor::item() const {
  MSF_CHECK(numel() == 1, "item() on tensor of shape " << shape_str(shape()));
  return impl_->data[0];
}

bool Tensor::requires_grad() const {
  MSF_CHECK(impl_, "requires_grad() on undefined tensor");
  return impl_->requires_grad;
}

Tensor& Tensor::set_requires_grad(bool value) {
  MSF_CHECK(impl_, "set_requires_grad() on undefined tensor");
  MSF_CHECK(!value || !impl_->backward_fn,
            "set_requires_grad(true) is only valid on leaves");
  impl_->requires_grad = value;
  return *this;
}

std::span<const float> Tensor::grad() const {
  MSF_CHECK(impl_, "grad() on undefined tensor");
  return impl_->grad;
}

void Tensor::zero_grad() {
  MSF_CHECK(impl_, "zero_grad() on undefined tensor");
  std::fill(impl_->grad.begin(), impl_->grad.end(), 0.f);
}

Tensor Tensor::clone() const {
  MSF_CHECK(impl_, "clone() on undefined tensor");
  return Tensor(make_impl(impl_->shape, impl_->data));
}

void Tensor::backward() const {
  MSF_CHECK(impl_, "backward() on undefined tensor");
  MSF_CHECK(numel() == 1,
            "backward() requires a scalar root, got shape " << shape_str(shape()));
  MSF_CHECK(impl_->requires_grad,
            "backward() on a tensor that does not require grad");

  // Reverse topological order via iterative post-order DFS. Only nodes that
  // require grad are on the tape, so pruned branches are never walked.
  std::vector<TensorImpl*> order;
  std::unordered_set<TensorImpl*> visited;
  struct Frame {
    TensorImpl* node;
    std::size_t next_parent;
  };
  std::vector<Frame> stack;
  stack.push_back({impl_.get(), 0});
  visited.insert(impl_.get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    bool descended = false;
    while (f.next_parent < f.node->parents.size()) {
      TensorImpl* p = f.node->parents[f.next_parent++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.push_back({p, 0});
        descended = true;
        break;
      }
    }
    if (!descended && f.next_parent >= f.node->parents.size()) {
      order.push_back(f.node);
      stack.pop_back();
    }
  }

  // Intermediate grads are scratch for this sweep; only leaves accumulate
  // across calls.
  for (TensorImpl* node : order)
    if (node->backward_fn) std::fill(node->grad.begin(), node->grad.end(), 0.f);

  impl_->grad_buf()[0] = 1.f;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* node = *it;
    if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
  }
}

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

bool grad_enabled() { return g_grad_enabled; }

Tensor make_op_result(Shape shape, std::vector<float> data,
                      const std::vector<Tensor>& inputs,
                      std::function<void(TensorImpl&)> backward_fn) {
  Tensor out(Tensor::from_data(std::move(shape), std::move(data)));
  if (!grad_enabled()) return out;
  bool any = false;
  for (const Tensor& t : inputs) {
    if (t.defined() && t.requires_grad()) any = true;
  }
  if (!any) return out;
  TensorImpl* impl = out.impl();
  impl->requires_grad = true;
  impl->parents.reserve(inputs.size());
  for (const Tensor& t : inputs) {
    if (t.defined() && t.requires_grad()) impl->parents.push_back(t.impl_ptr());
  }
  impl->backward_fn = std::move(backward_fn);
  return out;
}

}  // namespace msf
