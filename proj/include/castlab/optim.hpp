#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>

#include "castlab/sparsity.hpp"
#include "castlab/tensor.hpp"

namespace castlab {

/// sign(0) := 0, so a parameter exactly at zero receives no decay.
inline double sign_of(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

/// First/second moment per parameter entry plus the step counter.
struct MomentState {
  Tensor mu;
  Tensor v;
  std::uint64_t t = 0;

  static MomentState zeros_like(const Tensor& w) {
    return MomentState{Tensor::zeros(w.shape), Tensor::zeros(w.shape), 0};
  }
};

struct AdamSConfig {
  double lambda = 0.0;        // decay strength, gradient-magnitude units
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t total_steps = 1;     // T
  std::uint64_t mask_refresh = 10;   // T1

  void validate() const {
    if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1)
      throw std::invalid_argument("AdamSConfig: betas out of range");
    if (lambda < 0) throw std::invalid_argument("AdamSConfig: lambda < 0");
    if (total_steps < 1 || mask_refresh < 1)
      throw std::invalid_argument("AdamSConfig: T, T1 >= 1 required");
  }
};

/// alpha_t = t/T, the gradient/decay blend factor.
inline double alpha_at(std::uint64_t t, std::uint64_t total) {
  if (total == 0) throw std::invalid_argument("alpha_at: T = 0");
  if (t > total) throw std::invalid_argument("alpha_at: t > T");
  return double(t) / double(total);
}

struct Schedule {
  enum class Kind { Constant, WarmupCosine } kind = Kind::Constant;
  double base = 1e-3;
  std::uint64_t warmup_steps = 0;
};

/// Constant, or linear warmup then cosine to 10% of base at t = T.
inline double lr_at(const Schedule& s, std::uint64_t t, std::uint64_t total) {
  if (s.kind == Schedule::Kind::Constant) return s.base;
  if (t < s.warmup_steps)
    return s.base * double(t + 1) / double(s.warmup_steps);
  std::uint64_t span = total > s.warmup_steps ? total - s.warmup_steps : 1;
  double x = double(t - s.warmup_steps) / double(span);
  constexpr double kPi = 3.14159265358979323846;
  return s.base * (0.1 + 0.9 * 0.5 * (1.0 + std::cos(kPi * x)));
}

/// AdamS (decoupled proportional L1 decay on masked entries; v driven by the
/// momentum-plus-decay signal, not the raw gradient).
/// mask == nullptr treats every entry as unmasked.
inline void adams_step(Tensor& theta, const Tensor& grad, const Mask* mask,
                       MomentState& st, const AdamSConfig& cfg,
                       std::uint64_t t, double lr) {
  cfg.validate();
  check_same_shape(theta, grad, "adams_step");
  check_finite(grad, "adams_step grad");
  if (st.t != t - 1) throw std::logic_error("adams_step: step counter mismatch");
  double alpha = alpha_at(t, cfg.total_steps);
  double bc1 = 1.0 - std::pow(cfg.beta1, double(t));
  double bc2 = 1.0 - std::pow(cfg.beta2, double(t));
  for (std::size_t i = 0; i < theta.size(); ++i) {
    double mu = cfg.beta1 * st.mu[i] + (1.0 - cfg.beta1) * grad[i];
    st.mu[i] = mu;
    bool masked = mask && mask->bits[i] == 0;
    double mu_t = masked
                      ? (1.0 - alpha) * mu + alpha * cfg.lambda * sign_of(theta[i])
                      : mu;
    double v = cfg.beta2 * st.v[i] + (1.0 - cfg.beta2) * mu_t * mu_t;
    st.v[i] = v;
    double mu_hat = mu_t / bc1;
    double v_hat = v / bc2;
    theta[i] -= lr * mu_hat / (std::sqrt(v_hat) + cfg.eps);
  }
  st.t = t;
}

/// Adam with L1 decay folded into the gradient (both moments see the decay).
inline void adam_l1_step(Tensor& theta, const Tensor& grad, const Mask* mask,
                         MomentState& st, double lambda, double beta1,
                         double beta2, double eps, double lr) {
  check_same_shape(theta, grad, "adam_l1_step");
  check_finite(grad, "adam_l1_step grad");
  std::uint64_t t = st.t + 1;
  double bc1 = 1.0 - std::pow(beta1, double(t));
  double bc2 = 1.0 - std::pow(beta2, double(t));
  for (std::size_t i = 0; i < theta.size(); ++i) {
    bool masked = mask && mask->bits[i] == 0;
    double g = grad[i] + (masked ? lambda * sign_of(theta[i]) : 0.0);
    st.mu[i] = beta1 * st.mu[i] + (1.0 - beta1) * g;
    st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * g * g;
    double mu_hat = st.mu[i] / bc1;
    double v_hat = st.v[i] / bc2;
    theta[i] -= lr * mu_hat / (std::sqrt(v_hat) + eps);
  }
  st.t = t;
}

/// AdamW-style: standard Adam moments, decay applied to the parameters.
inline void adamw_l1_step(Tensor& theta, const Tensor& grad, const Mask* mask,
                          MomentState& st, double lambda, double beta1,
                          double beta2, double eps, double lr) {
  check_same_shape(theta, grad, "adamw_l1_step");
  check_finite(grad, "adamw_l1_step grad");
  std::uint64_t t = st.t + 1;
  double bc1 = 1.0 - std::pow(beta1, double(t));
  double bc2 = 1.0 - std::pow(beta2, double(t));
  for (std::size_t i = 0; i < theta.size(); ++i) {
    st.mu[i] = beta1 * st.mu[i] + (1.0 - beta1) * grad[i];
    st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * grad[i] * grad[i];
    double mu_hat = st.mu[i] / bc1;
    double v_hat = st.v[i] / bc2;
    bool masked = mask && mask->bits[i] == 0;
    double decay = masked ? lambda * sign_of(theta[i]) : 0.0;
    theta[i] -= lr * (mu_hat / (std::sqrt(v_hat) + eps) + decay);
  }
  st.t = t;
}

/// SR-STE: plain SGD on the STE-proxied gradient, L2 decay on masked entries.
/// The caller is responsible for having computed grad with the sparse forward.
inline void srste_step(Tensor& theta, const Tensor& grad_at_masked_forward,
                       const Mask* mask, double lambda, double lr) {
  check_same_shape(theta, grad_at_masked_forward, "srste_step");
  check_finite(grad_at_masked_forward, "srste_step grad");
  for (std::size_t i = 0; i < theta.size(); ++i) {
    bool masked = mask && mask->bits[i] == 0;
    double decay = masked ? lambda * theta[i] : 0.0;
    theta[i] -= lr * (grad_at_masked_forward[i] + decay);
  }
}

/// Textbook bias-corrected Adam.
inline void adam_step(Tensor& theta, const Tensor& grad, MomentState& st,
                      double beta1, double beta2, double eps, double lr) {
  check_same_shape(theta, grad, "adam_step");
  check_finite(grad, "adam_step grad");
  std::uint64_t t = st.t + 1;
  double bc1 = 1.0 - std::pow(beta1, double(t));
  double bc2 = 1.0 - std::pow(beta2, double(t));
  for (std::size_t i = 0; i < theta.size(); ++i) {
    st.mu[i] = beta1 * st.mu[i] + (1.0 - beta1) * grad[i];
    st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * grad[i] * grad[i];
    double mu_hat = st.mu[i] / bc1;
    double v_hat = st.v[i] / bc2;
    theta[i] -= lr * mu_hat / (std::sqrt(v_hat) + eps);
  }
  st.t = t;
}

}  // namespace castlab
