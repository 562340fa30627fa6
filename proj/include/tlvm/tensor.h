#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace tlvm {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {
struct TensorImpl;
}

// Dense row-major float64 array. Tensor is a shared handle: copies alias the
// same storage. Ops never modify their inputs; only the optimizer and
// initializers write through mutable_data().
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, bool requires_grad = false);
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const { return shape().at(axis); }
  std::size_t numel() const;

  std::span<const double> data() const;
  std::span<double> mutable_data() const;
  double item() const;

  bool requires_grad() const;
  void set_requires_grad(bool value) const;

  bool has_grad() const;
  std::span<const double> grad() const;
  // Zero-initialised on first access.
  std::span<double> grad_buffer() const;
  void zero_grad() const;
  void clear_grad() const;

  // A new leaf that shares this tensor's data buffer but owns its gradient.
  Tensor alias() const;
  // Deep copy of the data; no gradient, requires_grad false.
  Tensor clone() const;

  const void* id() const { return impl_.get(); }
  bool same(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

// Ordered record of differentiable ops. Ops append themselves to the tape that
// is active on the calling thread (see TapeScope) whenever any input requires
// a gradient.
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  void record(std::string_view op, std::vector<Tensor> inputs, Tensor output,
              BackwardFn backward);

  // Seeds d(loss)/d(loss) = 1 and replays every reachable op in reverse,
  // accumulating into grad buffers. Throws if loss is not a scalar.
  void backward(const Tensor& loss);

  std::size_t size() const { return entries_.size(); }
  std::string_view op_name(std::size_t index) const { return entries_.at(index).op; }
  void clear() { entries_.clear(); }

 private:
  struct Entry {
    std::string op;
    std::vector<Tensor> inputs;
    Tensor output;
    BackwardFn backward;
  };
  std::vector<Entry> entries_;
};

Tape* active_tape();

class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

// Suspends recording on this thread, e.g. for inference inside a training step.
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

}  // namespace tlvm
