#include "gcnforge/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "gcnforge/error.hpp"

namespace gcnforge {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (const auto d : shape) n *= d;
  return n;
}

namespace {

void check_shape(const Shape& shape) {
  if (shape.empty()) throw ShapeError("tensor shape must have at least one axis");
  for (const auto d : shape) {
    if (d == 0) throw ShapeError("tensor shape " + shape_str(shape) + " has a zero dimension");
  }
}

}  // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  check_shape(shape);
  auto impl = std::make_shared<Impl>();
  impl->data.assign(shape_numel(shape), 0.0);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  if (requires_grad) impl->grad.assign(impl->data.size(), 0.0);
  return Tensor(std::move(impl));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  check_shape(shape);
  if (values.size() != shape_numel(shape)) {
    throw ShapeError("tensor shape " + shape_str(shape) + " needs " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  for (const double v : values) {
    if (!std::isfinite(v)) throw NumericError("non-finite value in tensor construction");
  }
  auto impl = std::make_shared<Impl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  if (requires_grad) impl->grad.assign(impl->data.size(), 0.0);
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

const Tensor::Impl& Tensor::impl() const {
  if (!impl_) throw Error("use of an undefined tensor");
  return *impl_;
}

Tensor::Impl& Tensor::impl() {
  if (!impl_) throw Error("use of an undefined tensor");
  return *impl_;
}

const Shape& Tensor::shape() const { return impl().shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(s));
  }
  return s[axis];
}

std::size_t Tensor::numel() const { return impl().data.size(); }

std::size_t Tensor::cols() const { return shape().back(); }

std::size_t Tensor::rows() const { return numel() / cols(); }

std::span<double> Tensor::data() { return impl().data; }

std::span<const double> Tensor::data() const { return impl().data; }

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return impl().data[0];
}

bool Tensor::requires_grad() const { return impl().requires_grad; }

void Tensor::set_requires_grad(bool flag) {
  auto& i = impl();
  i.requires_grad = flag;
  if (flag && i.grad.empty()) i.grad.assign(i.data.size(), 0.0);
}

bool Tensor::has_grad() const { return !impl().grad.empty(); }

std::span<double> Tensor::grad() const {
  auto& i = const_cast<Impl&>(impl());
  if (i.grad.empty()) i.grad.assign(i.data.size(), 0.0);
  return i.grad;
}

void Tensor::zero_grad() {
  auto& g = impl().grad;
  std::fill(g.begin(), g.end(), 0.0);
}

Tensor Tensor::clone() const {
  const auto& src = impl();
  auto copy = std::make_shared<Impl>();
  copy->shape = src.shape;
  copy->data = src.data;
  copy->requires_grad = src.requires_grad;
  if (src.requires_grad) copy->grad.assign(src.data.size(), 0.0);
  return Tensor(std::move(copy));
}

void require_finite(const Tensor& t, std::string_view what) {
  // v * 0 is NaN exactly when v is not finite; the sum vectorizes.
  double probe = 0.0;
  for (const double v : t.data()) probe += v * 0.0;
  if (probe == 0.0) return;
  for (const double v : t.data()) {
    if (!std::isfinite(v)) {
      throw NumericError("non-finite value in " + std::string(what) + " (shape " +
                         shape_str(t.shape()) + ")");
    }
  }
}

}  // namespace gcnforge
