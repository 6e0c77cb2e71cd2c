#pragma once

#include <cstddef>
#include <stdexcept>
#include <vector>

#include "castlab/autograd.hpp"
#include "castlab/tensor.hpp"

namespace castlab {

/// Learnable group-wise weight scaling. For layer k with shape R x C and
/// group count n, factors[k] is R x n; segment width C/n must be a multiple
/// of M so every N:M group lies inside one segment.
struct ScalingFactors {
  std::vector<Tensor> factors;  // aligned with the sparsifiable layer order
  std::size_t groups = 2;       // n

  bool empty() const { return factors.empty(); }
};

inline void check_scaling_divisibility(std::size_t cols, std::size_t n,
                                       std::size_t m_group) {
  if (n == 0 || cols % n != 0)
    throw std::invalid_argument("scaling: n does not divide C");
  if ((cols / n) % m_group != 0)
    throw std::invalid_argument("scaling: segment width not a multiple of M");
}

/// All-ones initialization.
inline ScalingFactors init_scaling(
    const std::vector<std::pair<std::size_t, std::size_t>>& layer_shapes,
    std::size_t n, std::size_t m_group) {
  ScalingFactors s;
  s.groups = n;
  s.factors.reserve(layer_shapes.size());
  for (auto [r, c] : layer_shapes) {
    check_scaling_divisibility(c, n, m_group);
    s.factors.push_back(Tensor::ones({r, n}));
  }
  return s;
}

/// Entry (r,c) multiplied by a[r, c / (C/n)]. Non-recorded version; the
/// differentiable path is Tape::row_segment_scale.
inline Tensor apply_group_scaling(const Tensor& w, const Tensor& a) {
  if (w.ndim() != 2 || a.ndim() != 2 || w.rows() != a.rows() ||
      w.cols() % a.cols() != 0)
    throw std::invalid_argument("apply_group_scaling: shape mismatch");
  std::size_t seg = w.cols() / a.cols();
  Tensor y = w;
  for (std::size_t r = 0; r < w.rows(); ++r)
    for (std::size_t c = 0; c < w.cols(); ++c) y.at(r, c) *= a.at(r, c / seg);
  return y;
}

/// Materialize the scaling into the layer weights; forward with folded
/// weights and unit factors is exactly equivalent.
inline Tensor fold_scaling(const Tensor& w, const Tensor& a) {
  return apply_group_scaling(w, a);
}

/// Negative factors invert the magnitude/ranking correspondence; surfaced
/// as a diagnostic rather than altered.
inline bool has_nonpositive_factor(const ScalingFactors& s) {
  for (const Tensor& a : s.factors)
    for (double v : a.data)
      if (v <= 0.0) return true;
  return false;
}

}  // namespace castlab
