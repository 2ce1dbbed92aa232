#pragma once

#include <cmath>
#include <random>
#include <vector>

#include "spadapt/tensor.hpp"

namespace spadapt::detail {

inline Tensor make_param(Shape shape, DType dtype) {
  Tensor t(std::move(shape), dtype);
  t.set_requires_grad(true);
  return t;
}

inline Tensor normal_param(Shape shape, DType dtype, std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  Tensor t = Tensor::from_doubles(std::move(shape), v, dtype);
  t.set_requires_grad(true);
  return t;
}

inline Tensor uniform_param(Shape shape, DType dtype, std::mt19937_64& rng, double bound) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  Tensor t = Tensor::from_doubles(std::move(shape), v, dtype);
  t.set_requires_grad(true);
  return t;
}

inline Tensor constant_param(Shape shape, DType dtype, double value) {
  std::vector<double> v(shape_numel(shape), value);
  Tensor t = Tensor::from_doubles(std::move(shape), v, dtype);
  t.set_requires_grad(true);
  return t;
}

/// Independent copy that keeps the requires_grad flag.
inline Tensor deep_copy(const Tensor& t) {
  Tensor c = t.clone();
  c.set_requires_grad(t.requires_grad());
  return c;
}

/// Kaiming-normal (fan-in, relu gain) conv weight [F, C, kh, kw].
inline Tensor kaiming_conv(std::size_t f, std::size_t c, std::size_t kh, std::size_t kw,
                           DType dtype, std::mt19937_64& rng) {
  return normal_param({f, c, kh, kw}, dtype, rng, std::sqrt(2.0 / static_cast<double>(c * kh * kw)));
}

}  // namespace spadapt::detail
