#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <memory>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

namespace spadapt {

enum class DType : std::uint8_t { f32 = 1, f64 = 2 };

using Shape = std::vector<std::size_t>;

/// Cache-line aligned storage. Eigen picks its vectorized reduction split from
/// the runtime address, so fixed alignment keeps float sums reproducible.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}
  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), kAlign));
  }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }
  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

template <typename T>
using AlignedVec = std::vector<T, AlignedAllocator<T>>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);
const char* dtype_name(DType dtype);

template <typename T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>,
                "only float32 and float64 tensors are supported");
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

class TensorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when an op produces NaN or Inf, or a gradient contains one.
class NonFiniteError : public TensorError {
 public:
  using TensorError::TensorError;
};

/// Calls `fn(T{})` with T = float or double according to `dtype`.
template <typename Fn>
decltype(auto) dispatch(DType dtype, Fn&& fn) {
  if (dtype == DType::f32) return fn(float{});
  return fn(double{});
}

/// Dense row-major n-dimensional array with an optional gradient buffer.
///
/// Tensor is a shared handle: copies alias the same storage, which is what the
/// autograd graph needs to accumulate gradients into parameters. Use clone()
/// for an independent copy.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, DType dtype);

  template <typename T>
  static Tensor from_values(Shape shape, std::vector<T> values);
  static Tensor from_doubles(Shape shape, std::span<const double> values, DType dtype);
  static Tensor from_doubles(Shape shape, std::initializer_list<double> values,
                             DType dtype = DType::f64);
  static Tensor scalar(double value, DType dtype);

  bool defined() const { return impl_ != nullptr; }
  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;
  DType dtype() const;

  template <typename T>
  std::span<const T> values() const;
  template <typename T>
  std::span<T> mutable_values();

  double at(std::size_t flat_index) const;
  double item() const;
  std::vector<double> to_doubles() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool flag);

  bool has_grad() const;
  template <typename T>
  std::span<const T> grad() const;
  /// Gradient buffer, allocated as zeros on first access. Gradients are
  /// accumulation state of the shared storage, so this is usable through a
  /// const handle.
  template <typename T>
  std::span<T> mutable_grad() const;
  std::vector<double> grad_doubles() const;
  void zero_grad() const;
  void clear_grad() const;

  Tensor clone() const;
  Tensor to(DType dtype) const;
  /// Copy with a new shape of equal element count (not differentiable).
  Tensor reshaped(Shape shape) const;

  /// True when shape, dtype and every stored bit are equal.
  bool bit_equal(const Tensor& other) const;

 private:
  using Buffer = std::variant<AlignedVec<float>, AlignedVec<double>>;
  struct Impl {
    Shape shape;
    DType dtype = DType::f32;
    Buffer data;
    bool requires_grad = false;
    bool has_grad = false;
    Buffer grad;
  };

  void require_defined() const;

  std::shared_ptr<Impl> impl_;
};

void check_same_dtype(const Tensor& a, const Tensor& b, const char* op);
void check_finite(const Tensor& t, const char* op);

// ---------------------------------------------------------------------------

template <typename T>
Tensor Tensor::from_values(Shape shape, std::vector<T> values) {
  if (shape_numel(shape) != values.size()) {
    throw TensorError("from_values: shape " + shape_str(shape) + " needs " +
                      std::to_string(shape_numel(shape)) + " values, got " +
                      std::to_string(values.size()));
  }
  Tensor t;
  t.impl_ = std::make_shared<Impl>();
  t.impl_->shape = std::move(shape);
  t.impl_->dtype = dtype_of<T>();
  t.impl_->data = AlignedVec<T>(values.begin(), values.end());
  return t;
}

template <typename T>
std::span<const T> Tensor::values() const {
  require_defined();
  if (impl_->dtype != dtype_of<T>()) {
    throw TensorError(std::string("tensor dtype is ") + dtype_name(impl_->dtype) +
                      ", requested " + dtype_name(dtype_of<T>()));
  }
  return std::get<AlignedVec<T>>(impl_->data);
}

template <typename T>
std::span<T> Tensor::mutable_values() {
  require_defined();
  if (impl_->dtype != dtype_of<T>()) {
    throw TensorError(std::string("tensor dtype is ") + dtype_name(impl_->dtype) +
                      ", requested " + dtype_name(dtype_of<T>()));
  }
  return std::get<AlignedVec<T>>(impl_->data);
}

template <typename T>
std::span<const T> Tensor::grad() const {
  require_defined();
  if (!impl_->has_grad) throw TensorError("tensor has no gradient");
  return std::get<AlignedVec<T>>(impl_->grad);
}

template <typename T>
std::span<T> Tensor::mutable_grad() const {
  require_defined();
  if (impl_->dtype != dtype_of<T>()) throw TensorError("gradient dtype mismatch");
  if (!impl_->has_grad) {
    impl_->grad = AlignedVec<T>(shape_numel(impl_->shape), T(0));
    impl_->has_grad = true;
  }
  return std::get<AlignedVec<T>>(impl_->grad);
}

}  // namespace spadapt
