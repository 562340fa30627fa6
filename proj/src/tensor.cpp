#include "tlvm/tensor.h"

#include <algorithm>
#include <numeric>
#include <sstream>

#include "tlvm/error.h"

namespace tlvm {

namespace detail {
struct TensorImpl {
  Shape shape;
  std::shared_ptr<std::vector<double>> data;
  std::vector<double> grad;
  bool requires_grad = false;
};
}  // namespace detail

namespace {
thread_local Tape* g_active_tape = nullptr;
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, bool requires_grad)
    : Tensor(shape, std::vector<double>(shape_numel(shape), 0.0), requires_grad) {}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) {
  for (std::size_t extent : shape) {
    if (extent == 0) {
      throw Error(ErrorCode::kShapeMismatch,
                  "tensor extents must be positive, got " + shape_string(shape));
    }
  }
  if (values.size() != shape_numel(shape)) {
    throw Error(ErrorCode::kShapeMismatch,
                "tensor of shape " + shape_string(shape) + " needs " +
                    std::to_string(shape_numel(shape)) + " values, got " +
                    std::to_string(values.size()));
  }
  impl_ = std::make_shared<detail::TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->data = std::make_shared<std::vector<double>>(std::move(values));
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(Shape{}, std::vector<double>{value}, requires_grad);
}

const Shape& Tensor::shape() const { return impl_->shape; }
std::size_t Tensor::numel() const { return impl_->data->size(); }
std::span<const double> Tensor::data() const { return *impl_->data; }
std::span<double> Tensor::mutable_data() const { return *impl_->data; }

double Tensor::item() const {
  if (numel() != 1) {
    throw Error(ErrorCode::kShapeMismatch,
                "item() on non-scalar tensor " + shape_string(shape()));
  }
  return (*impl_->data)[0];
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }
void Tensor::set_requires_grad(bool value) const { impl_->requires_grad = value; }
bool Tensor::has_grad() const { return !impl_->grad.empty(); }
std::span<const double> Tensor::grad() const { return impl_->grad; }

std::span<double> Tensor::grad_buffer() const {
  if (impl_->grad.empty()) impl_->grad.assign(numel(), 0.0);
  return impl_->grad;
}

void Tensor::zero_grad() const {
  if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

void Tensor::clear_grad() const {
  impl_->grad.clear();
  impl_->grad.shrink_to_fit();
}

Tensor Tensor::alias() const {
  Tensor out;
  out.impl_ = std::make_shared<detail::TensorImpl>();
  out.impl_->shape = impl_->shape;
  out.impl_->data = impl_->data;
  out.impl_->requires_grad = impl_->requires_grad;
  return out;
}

Tensor Tensor::clone() const { return Tensor(shape(), *impl_->data, false); }

void Tape::record(std::string_view op, std::vector<Tensor> inputs, Tensor output,
                  BackwardFn backward) {
  entries_.push_back(
      Entry{std::string(op), std::move(inputs), std::move(output), std::move(backward)});
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw Error(ErrorCode::kShapeMismatch,
                "backward() needs a scalar loss, got " +
                    (loss.defined() ? shape_string(loss.shape()) : std::string("undefined")));
  }
  const auto found = std::find_if(entries_.begin(), entries_.end(),
                                  [&](const Entry& e) { return e.output.same(loss); });
  if (found == entries_.end()) {
    throw Error(ErrorCode::kInvalidArgument, "loss was not produced on this tape");
  }
  loss.grad_buffer()[0] += 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (!it->output.has_grad()) continue;  // not on a path to the loss
    it->backward();
  }
}

Tape* active_tape() { return g_active_tape; }

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

NoGradScope::NoGradScope() : previous_(g_active_tape) { g_active_tape = nullptr; }
NoGradScope::~NoGradScope() { g_active_tape = previous_; }

}  // namespace tlvm
