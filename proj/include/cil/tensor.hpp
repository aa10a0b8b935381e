#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <new>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cil/errors.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace cil {

/// Keeps large freed blocks in the process heap. Training allocates and
/// frees the same activation sizes every step; without this each step
/// re-maps and page-faults them.
inline void retain_freed_memory() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

/// 64-byte aligned storage. Vectorised reductions peel a different number
/// of leading elements depending on the start address, which changes the
/// summation order; a fixed alignment keeps results reproducible.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }
  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

using Storage = std::vector<float, AlignedAllocator<float>>;

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

/// Dense row-major float32 array with an optional gradient buffer.
///
/// Tensor is a shared handle: copies alias the same storage. The autograd
/// tape holds handles to the tensors it needs for the backward pass, so an
/// op's inputs stay alive until the tape is consumed. Use clone() for a deep
/// copy.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, float fill = 0.0f, bool requires_grad = false)
      : impl_(std::make_shared<Impl>()) {
    impl_->data.assign(shape_numel(shape), fill);
    impl_->shape = std::move(shape);
    impl_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<float> values, bool requires_grad = false)
      : impl_(std::make_shared<Impl>()) {
    if (shape_numel(shape) != values.size()) {
      throw ShapeError("tensor shape " + shape_string(shape) + " holds " +
                       std::to_string(shape_numel(shape)) + " values, got " +
                       std::to_string(values.size()));
    }
    impl_->shape = std::move(shape);
    impl_->data.assign(values.begin(), values.end());
    impl_->requires_grad = requires_grad;
  }

  bool defined() const { return impl_ != nullptr; }

  const Shape& shape() const { return impl().shape; }
  std::size_t rank() const { return impl().shape.size(); }
  std::size_t dim(std::size_t axis) const {
    if (axis >= rank()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_string(shape()));
    return impl().shape[axis];
  }
  std::size_t numel() const { return impl().data.size(); }

  std::span<float> data() { return impl().data; }
  std::span<const float> data() const { return impl().data; }
  float* ptr() { return impl().data.data(); }
  const float* ptr() const { return impl().data.data(); }

  bool requires_grad() const { return impl().requires_grad; }
  void set_requires_grad(bool on) { impl().requires_grad = on; }

  bool has_grad() const { return impl().grad_present; }
  std::span<float> grad() { return impl().grad; }
  std::span<const float> grad() const { return impl().grad; }

  /// Allocates a zero gradient if none is present.
  std::span<float> ensure_grad() {
    auto& d = impl();
    if (!d.grad_present) {
      d.grad.assign(d.data.size(), 0.0f);
      d.grad_present = true;
    }
    return d.grad;
  }

  void zero_grad() {
    auto& d = impl();
    if (d.grad_present) std::fill(d.grad.begin(), d.grad.end(), 0.0f);
  }

  void drop_grad() {
    auto& d = impl();
    d.grad.clear();
    d.grad.shrink_to_fit();
    d.grad_present = false;
  }

  float item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape()));
    return impl().data[0];
  }

  /// Deep copy of the values; no gradient, not tracked.
  Tensor clone() const {
    Tensor t;
    t.impl_ = std::make_shared<Impl>();
    t.impl_->shape = shape();
    t.impl_->data = impl().data;
    return t;
  }

  bool is_same(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  struct Impl {
    Shape shape;
    Storage data;
    Storage grad;
    bool requires_grad = false;
    bool grad_present = false;
  };

  Impl& impl() {
    if (!impl_) throw ContractError("use of an undefined tensor");
    return *impl_;
  }
  const Impl& impl() const {
    if (!impl_) throw ContractError("use of an undefined tensor");
    return *impl_;
  }

  std::shared_ptr<Impl> impl_;
};

/// Ordered record of differentiable operations.
///
/// Ops append a node holding a backward closure. backward() walks the nodes
/// in reverse recording order, which is a valid reverse topological order
/// because a node's inputs always exist before it is recorded. The tape is
/// single-use: after backward() it is cleared and refuses further use.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  /// A tape that never records (evaluation, feature extraction).
  static Tape inference() {
    Tape t;
    t.enabled_ = false;
    return t;
  }

  bool recording() const { return enabled_ && !consumed_; }
  bool consumed() const { return consumed_; }
  std::size_t size() const { return nodes_.size(); }

  /// True when an op over `inputs` must be recorded.
  bool tracks(std::initializer_list<const Tensor*> inputs) const {
    if (!recording()) return false;
    return std::any_of(inputs.begin(), inputs.end(),
                       [](const Tensor* t) { return t && t->defined() && t->requires_grad(); });
  }

  void record(Tensor output, std::function<void()> backward_fn) {
    if (consumed_) throw TapeError("recording on a consumed tape");
    nodes_.push_back(Node{std::move(output), std::move(backward_fn)});
  }

  void backward(Tensor& loss) {
    if (consumed_) throw TapeError("backward on a consumed tape");
    if (loss.numel() != 1) {
      throw TapeError("backward needs a scalar loss, got shape " + shape_string(loss.shape()));
    }
    const bool on_tape = std::any_of(nodes_.begin(), nodes_.end(),
                                     [&](const Node& n) { return n.output.is_same(loss); });
    if (!on_tape) throw TapeError("loss tensor was not produced on this tape");

    loss.ensure_grad()[0] = 1.0f;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (it->output.has_grad()) it->backward();
    }
    nodes_.clear();
    consumed_ = true;
  }

 private:
  struct Node {
    Tensor output;
    std::function<void()> backward;
  };

  std::vector<Node> nodes_;
  bool enabled_ = true;
  bool consumed_ = false;
};

}  // namespace cil
