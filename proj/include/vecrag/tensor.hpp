// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace vecrag {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

// Dense row-major tensor of doubles. Copying a Tensor copies the handle, not
// the storage; ops below share storage through these handles so gradients
// written during the backward pass land in the tensors the caller holds.
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, double fill, bool requires_grad = false)
      : impl_(std::make_shared<Impl>()) {
    impl_->shape = std::move(shape);
    impl_->value.assign(shape_numel(impl_->shape), fill);
    impl_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
      : impl_(std::make_shared<Impl>()) {
    if (shape_numel(shape) != values.size()) {
      throw std::invalid_argument("tensor: " + shape_str(shape) + " does not hold " +
                                  std::to_string(values.size()) + " values");
    }
    impl_->shape = std::move(shape);
    impl_->value = std::move(values);
    impl_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return Tensor(std::move(shape), 0.0, requires_grad);
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return Tensor(Shape{}, std::vector<double>{v}, requires_grad);
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t ndim() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->value.size(); }

  // Last two dimensions, the 2-D view most ops work in.
  std::size_t rows() const { return ndim() >= 2 ? shape()[ndim() - 2] : 1; }
  std::size_t cols() const { return ndim() >= 1 ? shape().back() : 1; }

  // The handle is the unit of constness: a const Tensor still exposes its
  // shared storage for writes, like any other shared-ownership handle.
  double* data() const { return impl_->value.data(); }
  std::vector<double>& values() const { return impl_->value; }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  void set_requires_grad(bool b) const { impl_->requires_grad = b; }

  bool has_grad() const { return impl_ && !impl_->grad.empty(); }

  /// Allocates (zeroed) the gradient buffer if absent.
  void ensure_grad() const {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->value.size(), 0.0);
  }

  double* grad() const {
    ensure_grad();
    return impl_->grad.data();
  }
  const std::vector<double>& grad_vec() const {
    ensure_grad();
    return impl_->grad;
  }

  void zero_grad() const {
    if (!impl_->grad.empty()) impl_->grad.assign(impl_->value.size(), 0.0);
  }

  double item() const {
    if (numel() != 1) {
      throw std::invalid_argument("item: tensor " + shape_str(shape()) + " is not a scalar");
    }
    return impl_->value[0];
  }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  struct Impl {
    Shape shape;
    std::vector<double> value;
    mutable std::vector<double> grad;  // empty until first needed
    bool requires_grad = false;
  };
  std::shared_ptr<Impl> impl_;
};

// Records the backward rule of every op executed while the tape is alive.
// Nodes are appended in execution order, which is already topological, so the
// backward pass is a reverse replay. One tape must stay on one thread.
class Tape {
 public:
  Tape() : prev_(current_tls()) { current_tls() = this; }
  ~Tape() { current_tls() = prev_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current() { return current_tls(); }

  void record(std::function<void()> backward_rule) {
    nodes_.push_back(std::move(backward_rule));
  }

  std::size_t node_count() const { return nodes_.size(); }

  void replay_backward() {
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

 private:
  static Tape*& current_tls() {
    thread_local Tape* current = nullptr;
    return current;
  }

  std::vector<std::function<void()>> nodes_;
  Tape* prev_ = nullptr;
};

/// True when ops should record backward rules for this set of inputs.
inline bool tracking(std::initializer_list<const Tensor*> inputs) {
  if (Tape::current() == nullptr) return false;
  for (const Tensor* t : inputs) {
    if (t->defined() && t->requires_grad()) return true;
  }
  return false;
}

/// Seeds the scalar loss with gradient 1 and replays the tape in reverse.
/// Tensors with requires_grad=false are never written to.
inline void backward_all(Tensor& loss, Tape& tape) {
  if (!loss.defined() || loss.numel() != 1) {
    throw std::invalid_argument("backward_all: loss must be a scalar tensor");
  }
  loss.grad()[0] += 1.0;
  tape.replay_backward();
}

}  // namespace vecrag
