#pragma once

// Dense row-major float64 tensors with a reverse-mode tape.
//
// Operations record an adjoint closure on the thread's active Tape whenever
// one of their inputs requires a gradient. Tape::backward replays the
// closures in reverse order; a tape can be consumed once.

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "spotkit/error.hpp"

namespace spotkit::tensor {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

struct TensorImpl {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;

  std::vector<double>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : impl_(std::make_shared<TensorImpl>()) {
    for (auto e : shape) require(e > 0, ErrorKind::shape, "tensor extents must be positive: " + shape_str(shape));
    impl_->value.assign(numel(shape), fill);
    impl_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<double> values) : impl_(std::make_shared<TensorImpl>()) {
    for (auto e : shape) require(e > 0, ErrorKind::shape, "tensor extents must be positive: " + shape_str(shape));
    require(numel(shape) == values.size(), ErrorKind::shape,
            "value count " + std::to_string(values.size()) + " does not match shape " + shape_str(shape));
    impl_->shape = std::move(shape);
    impl_->value = std::move(values);
  }

  static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }

  bool defined() const noexcept { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t size() const { return impl_->value.size(); }

  std::span<const double> values() const { return impl_->value; }
  std::span<double> mutable_values() { return impl_->value; }
  double operator[](std::size_t i) const { return impl_->value[i]; }
  double& operator[](std::size_t i) { return impl_->value[i]; }

  double item() const {
    require(size() == 1, ErrorKind::shape, "item() on non-scalar tensor " + shape_str(shape()));
    return impl_->value[0];
  }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  Tensor& set_requires_grad(bool on = true) {
    impl_->requires_grad = on;
    return *this;
  }

  /// Gradient accumulated by the last backward passes; zeros if never reached.
  std::vector<double> grad() const {
    if (impl_->grad.size() != impl_->value.size()) return std::vector<double>(impl_->value.size(), 0.0);
    return impl_->grad;
  }
  void zero_grad() { impl_->grad.assign(impl_->value.size(), 0.0); }

  /// Copy of the values detached from any tape.
  Tensor detach() const { return Tensor(shape(), impl_->value); }

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

/// A learnable tensor with a stable name (checkpoints, diagnostics).
struct NamedTensor {
  std::string name;
  Tensor tensor;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::function<void()> adjoint) { records_.push_back(std::move(adjoint)); }
  std::size_t size() const noexcept { return records_.size(); }
  bool consumed() const noexcept { return consumed_; }

  /// Seeds d(loss)/d(loss) = 1 and replays every adjoint once, newest first.
  /// A second call on the same tape is rejected.
  void backward(const Tensor& loss) {
    require(!consumed_, ErrorKind::invalid_argument, "backward called twice on the same tape");
    require(loss.defined() && loss.size() == 1, ErrorKind::shape,
            "backward needs a scalar loss, got " + (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
    consumed_ = true;
    if (!loss.requires_grad()) return;
    loss.impl()->ensure_grad()[0] += 1.0;
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) (*it)();
    records_.clear();
  }

 private:
  std::vector<std::function<void()>> records_;
  bool consumed_ = false;
};

namespace detail {
inline Tape*& active_tape_slot() {
  thread_local Tape* tape = nullptr;
  return tape;
}
}  // namespace detail

inline Tape* active_tape() { return detail::active_tape_slot(); }

/// Makes `tape` the recording target of the current thread for its lifetime.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape) : previous_(detail::active_tape_slot()) { detail::active_tape_slot() = &tape; }
  ~TapeScope() { detail::active_tape_slot() = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

/// Suspends recording (e.g. for inference) until destroyed.
class NoGradScope {
 public:
  NoGradScope() : previous_(detail::active_tape_slot()) { detail::active_tape_slot() = nullptr; }
  ~NoGradScope() { detail::active_tape_slot() = previous_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

namespace detail {

inline bool any_requires_grad(std::initializer_list<const Tensor*> inputs) {
  for (const Tensor* t : inputs)
    if (t && t->defined() && t->requires_grad()) return true;
  return false;
}

// Records `adjoint` for `out` when a tape is active and some input needs a
// gradient. The adjoint receives the output impl (value + grad).
template <class Adjoint>
void attach(Tensor& out, std::initializer_list<const Tensor*> inputs, Adjoint&& adjoint) {
  Tape* tape = active_tape();
  if (!tape || !any_requires_grad(inputs)) return;
  out.impl()->requires_grad = true;
  tape->record([o = out.impl(), fn = std::forward<Adjoint>(adjoint)]() mutable {
    if (o->grad.size() != o->value.size()) return;  // output never reached
    fn(*o);
  });
}

inline std::vector<double>* grad_sink(const Tensor& t) {
  return t.requires_grad() ? &t.impl()->ensure_grad() : nullptr;
}

}  // namespace detail

inline bool all_finite(const Tensor& t) {
  for (double v : t.values())
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace spotkit::tensor
