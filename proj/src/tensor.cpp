#include "spadapt/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

namespace spadapt {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

const char* dtype_name(DType dtype) {
  return dtype == DType::f32 ? "float32" : "float64";
}

Tensor::Tensor(Shape shape, DType dtype) {
  impl_ = std::make_shared<Impl>();
  const auto n = shape_numel(shape);
  impl_->shape = std::move(shape);
  impl_->dtype = dtype;
  if (dtype == DType::f32) {
    impl_->data = AlignedVec<float>(n, 0.0f);
  } else {
    impl_->data = AlignedVec<double>(n, 0.0);
  }
}

Tensor Tensor::from_doubles(Shape shape, std::span<const double> values, DType dtype) {
  if (shape_numel(shape) != values.size()) {
    throw TensorError("from_doubles: shape " + shape_str(shape) + " needs " +
                      std::to_string(shape_numel(shape)) + " values, got " +
                      std::to_string(values.size()));
  }
  Tensor t(std::move(shape), dtype);
  dispatch(dtype, [&](auto tag) {
    using T = decltype(tag);
    auto out = t.mutable_values<T>();
    for (std::size_t i = 0; i < values.size(); ++i) out[i] = static_cast<T>(values[i]);
  });
  return t;
}

Tensor Tensor::from_doubles(Shape shape, std::initializer_list<double> values, DType dtype) {
  return from_doubles(std::move(shape), std::span<const double>(values.begin(), values.size()),
                      dtype);
}

Tensor Tensor::scalar(double value, DType dtype) {
  const double v[1] = {value};
  return from_doubles({}, std::span<const double>(v, 1), dtype);
}

void Tensor::require_defined() const {
  if (!impl_) throw TensorError("use of undefined tensor");
}

const Shape& Tensor::shape() const {
  require_defined();
  return impl_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw TensorError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(s));
  }
  return s[axis];
}

std::size_t Tensor::numel() const { return shape_numel(shape()); }

DType Tensor::dtype() const {
  require_defined();
  return impl_->dtype;
}

double Tensor::at(std::size_t flat_index) const {
  return dispatch(dtype(), [&](auto tag) -> double {
    using T = decltype(tag);
    auto v = values<T>();
    if (flat_index >= v.size()) throw TensorError("flat index out of range");
    return static_cast<double>(v[flat_index]);
  });
}

double Tensor::item() const {
  if (numel() != 1) throw TensorError("item() on tensor of shape " + shape_str(shape()));
  return at(0);
}

std::vector<double> Tensor::to_doubles() const {
  return dispatch(dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto v = values<T>();
    return std::vector<double>(v.begin(), v.end());
  });
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool flag) {
  require_defined();
  impl_->requires_grad = flag;
  return *this;
}

bool Tensor::has_grad() const { return impl_ && impl_->has_grad; }

std::vector<double> Tensor::grad_doubles() const {
  if (!has_grad()) return std::vector<double>(numel(), 0.0);
  return dispatch(dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto g = grad<T>();
    return std::vector<double>(g.begin(), g.end());
  });
}

void Tensor::zero_grad() const {
  if (!has_grad()) return;
  dispatch(dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto g = mutable_grad<T>();
    std::fill(g.begin(), g.end(), T(0));
  });
}

void Tensor::clear_grad() const {
  if (!impl_) return;
  impl_->has_grad = false;
  impl_->grad = AlignedVec<float>{};
}

Tensor Tensor::clone() const {
  require_defined();
  Tensor t;
  t.impl_ = std::make_shared<Impl>();
  t.impl_->shape = impl_->shape;
  t.impl_->dtype = impl_->dtype;
  t.impl_->data = impl_->data;
  t.impl_->requires_grad = impl_->requires_grad;
  return t;
}

Tensor Tensor::to(DType target) const {
  if (target == dtype()) return clone();
  const auto d = to_doubles();
  Tensor t = from_doubles(shape(), d, target);
  t.impl_->requires_grad = impl_->requires_grad;
  return t;
}

Tensor Tensor::reshaped(Shape new_shape) const {
  if (shape_numel(new_shape) != numel()) {
    throw TensorError("cannot reshape " + shape_str(shape()) + " to " + shape_str(new_shape));
  }
  Tensor t = clone();
  t.impl_->shape = std::move(new_shape);
  t.impl_->requires_grad = false;
  return t;
}

bool Tensor::bit_equal(const Tensor& other) const {
  if (!defined() || !other.defined()) return defined() == other.defined();
  if (shape() != other.shape() || dtype() != other.dtype()) return false;
  return dispatch(dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto a = values<T>();
    auto b = other.values<T>();
    return std::memcmp(a.data(), b.data(), a.size() * sizeof(T)) == 0;
  });
}

void check_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
  if (a.dtype() != b.dtype()) {
    throw TensorError(std::string(op) + ": mixed dtypes " + dtype_name(a.dtype()) + " and " +
                      dtype_name(b.dtype()));
  }
}

void check_finite(const Tensor& t, const char* op) {
  dispatch(t.dtype(), [&](auto tag) {
    using T = decltype(tag);
    for (T v : t.values<T>()) {
      if (!std::isfinite(v)) {
        throw NonFiniteError(std::string(op) + ": produced a non-finite value");
      }
    }
  });
}

}  // namespace spadapt
