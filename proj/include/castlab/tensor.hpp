#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace castlab {

/// Dense row-major tensor of 64-bit floats, 1-3 dims.
/// Values are immutable by convention once handed to a Tape.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::vector<std::size_t> s, std::vector<double> d)
      : shape(std::move(s)), data(std::move(d)) {
    if (numel(shape) != data.size())
      throw std::invalid_argument("Tensor: shape/data size mismatch");
  }

  static std::size_t numel(const std::vector<std::size_t>& s) {
    std::size_t n = 1;
    for (auto e : s) n *= e;
    return n;
  }

  static Tensor zeros(std::vector<std::size_t> s) {
    std::size_t n = numel(s);
    return Tensor(std::move(s), std::vector<double>(n, 0.0));
  }
  static Tensor ones(std::vector<std::size_t> s) {
    std::size_t n = numel(s);
    return Tensor(std::move(s), std::vector<double>(n, 1.0));
  }
  static Tensor scalar(double v) { return Tensor({1}, {v}); }
  static Tensor row(std::vector<double> v) {
    std::size_t n = v.size();
    return Tensor({n}, std::move(v));
  }
  static Tensor matrix(std::size_t r, std::size_t c, std::vector<double> v) {
    return Tensor({r, c}, std::move(v));
  }

  std::size_t size() const { return data.size(); }
  std::size_t ndim() const { return shape.size(); }

  std::size_t rows() const {
    if (shape.size() != 2) throw std::logic_error("Tensor::rows: not 2-D");
    return shape[0];
  }
  std::size_t cols() const {
    if (shape.size() != 2) throw std::logic_error("Tensor::cols: not 2-D");
    return shape[1];
  }

  double& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

/// NaN/Inf is an error state, never silently propagated.
inline void check_finite(const Tensor& t, const std::string& where) {
  if (!t.all_finite())
    throw std::runtime_error("non-finite values in " + where);
}

inline void check_same_shape(const Tensor& a, const Tensor& b,
                             const std::string& where) {
  if (!a.same_shape(b))
    throw std::invalid_argument("shape mismatch in " + where);
}

}  // namespace castlab
