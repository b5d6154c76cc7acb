#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "evdepth/core/error.hpp"

namespace evdepth {

using Shape = std::vector<int64_t>;

inline int64_t numel_of(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

inline Shape strides_of(const Shape& s) {
  Shape st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i)
    st[i] = st[i + 1] * s[i + 1];
  return st;
}

// Global toggle for per-op finiteness checks (slow; used by gradcheck/tests).
inline bool& debug_check_finite() {
  static bool flag = false;
  return flag;
}

template <typename T>
struct TensorData {
  Shape shape;
  std::vector<T> v;  // values, row-major contiguous
  std::vector<T> g;  // gradient, allocated on first accumulation
  bool requires_grad = false;
};

// Shared-storage handle over a dense row-major value buffer. Values are
// immutable once an op has produced them; only the grad buffer accumulates.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0))
      : d_(std::make_shared<TensorData<T>>()) {
    d_->shape = std::move(shape);
    d_->v.assign(static_cast<size_t>(numel_of(d_->shape)), fill);
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }

  static Tensor from(Shape shape, std::vector<T> values) {
    if (numel_of(shape) != static_cast<int64_t>(values.size()))
      throw ShapeError("tensor init: shape " + shape_str(shape) + " needs " +
                       std::to_string(numel_of(shape)) + " values, got " +
                       std::to_string(values.size()));
    Tensor t;
    t.d_ = std::make_shared<TensorData<T>>();
    t.d_->shape = std::move(shape);
    t.d_->v = std::move(values);
    return t;
  }

  static Tensor scalar(T value) { return from({1}, {value}); }

  bool defined() const { return static_cast<bool>(d_); }
  const Shape& shape() const { return d_->shape; }
  int rank() const { return static_cast<int>(d_->shape.size()); }
  int64_t dim(int i) const { return d_->shape[static_cast<size_t>(i)]; }
  int64_t numel() const { return static_cast<int64_t>(d_->v.size()); }

  T* data() { return d_->v.data(); }
  const T* data() const { return d_->v.data(); }
  std::vector<T>& values() { return d_->v; }
  const std::vector<T>& values() const { return d_->v; }

  T item() const {
    if (numel() != 1)
      throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
    return d_->v[0];
  }

  bool requires_grad() const { return d_ && d_->requires_grad; }
  Tensor& set_requires_grad(bool b) {
    d_->requires_grad = b;
    return *this;
  }

  bool has_grad() const { return d_ && !d_->g.empty(); }
  // Grad buffer, zero-initialized on first access.
  T* grad() {
    if (d_->g.empty()) d_->g.assign(d_->v.size(), T(0));
    return d_->g.data();
  }
  const std::vector<T>& grad_values() const { return d_->g; }
  void zero_grad() {
    if (!d_->g.empty()) d_->g.assign(d_->v.size(), T(0));
  }
  void drop_grad() { d_->g.clear(); }

  // Value copy that is detached from any recorded computation.
  Tensor detach() const {
    Tensor t;
    t.d_ = std::make_shared<TensorData<T>>();
    t.d_->shape = d_->shape;
    t.d_->v = d_->v;
    return t;
  }

  bool same_storage(const Tensor& o) const { return d_ == o.d_; }

 private:
  std::shared_ptr<TensorData<T>> d_;
};

// Reverse-mode tape: ops are recorded in execution order and replayed in
// exact reverse order. One tape per logical thread of execution.
template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape*& current() {
    static thread_local Tape* cur = nullptr;
    return cur;
  }

  void record(std::function<void()> backward) {
    ops_.push_back(std::move(backward));
  }

  size_t num_ops() const { return ops_.size(); }

  // Seeds d(loss)/d(loss) = 1 and replays all recorded ops backwards.
  void backward(Tensor<T> loss) {
    if (loss.numel() != 1)
      throw ShapeError("backward() needs a scalar loss, got " +
                       shape_str(loss.shape()));
    loss.grad()[0] += T(1);
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
  }

  void clear() { ops_.clear(); }

 private:
  std::vector<std::function<void()>> ops_;
};

// RAII activation of a tape on the current thread.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& t) : prev_(Tape<T>::current()) {
    Tape<T>::current() = &t;
  }
  ~TapeScope() { Tape<T>::current() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* prev_;
};

}  // namespace evdepth
