#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <vector>

#include "vsemb/common.hpp"
#include "vsemb/tensor.hpp"

namespace vsemb {

inline constexpr double kTwoPi = 6.283185307179586476925286766559;

// log N(f; mean, variance * I) for an isotropic Gaussian.
inline double gaussian_log_density(std::span<const double> f,
                                   std::span<const double> mean,
                                   double variance) {
  if (!(variance > 0.0) || !std::isfinite(variance))
    throw ConfigError("gaussian_log_density: variance must be positive");
  if (f.size() != mean.size())
    throw ConfigError("gaussian_log_density: dimension mismatch");
  double quad = 0.0;
  for (std::size_t i = 0; i < f.size(); ++i) {
    const double d = f[i] - mean[i];
    quad += d * d;
  }
  const double c = double(f.size());
  const double out = -0.5 * c * std::log(kTwoPi * variance) - quad / (2.0 * variance);
  if (!std::isfinite(quad))
    throw ConfigError("gaussian_log_density: non-finite input");
  return out;
}

// Max-shifted log(sum(exp(v))).
inline double log_sum_exp(std::span<const double> v) {
  if (v.empty()) throw ConfigError("log_sum_exp: empty input");
  double m = -std::numeric_limits<double>::infinity();
  for (double x : v) m = std::max(m, x);
  if (!std::isfinite(m)) return m;  // all -inf, or contains +inf
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

// ---------------------------------------------------------------------------
// Adaptive-moment optimizer (bias-corrected first/second moments).
// ---------------------------------------------------------------------------
struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct OptimizerState {
  AdamConfig config;
  std::size_t step = 0;
  std::vector<double> m;  // first moment, parameter shape
  std::vector<double> v;  // second moment, parameter shape

  OptimizerState() = default;
  OptimizerState(std::size_t n_params, AdamConfig cfg)
      : config(cfg), m(n_params, 0.0), v(n_params, 0.0) {
    if (cfg.learning_rate <= 0.0)
      throw ConfigError("adam: learning rate must be positive");
  }
};

inline void adam_step(std::span<double> params, std::span<const double> grads,
                      OptimizerState& state) {
  if (params.size() != grads.size() || params.size() != state.m.size())
    throw ConfigError("adam_step: shape mismatch");
  const AdamConfig& c = state.config;
  state.step += 1;
  const double bc1 = 1.0 - std::pow(c.beta1, double(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, double(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.m[i] = c.beta1 * state.m[i] + (1.0 - c.beta1) * grads[i];
    state.v[i] = c.beta2 * state.v[i] + (1.0 - c.beta2) * grads[i] * grads[i];
    const double mhat = state.m[i] / bc1;
    const double vhat = state.v[i] / bc2;
    params[i] -= c.learning_rate * mhat / (std::sqrt(vhat) + c.epsilon);
  }
}

// ---------------------------------------------------------------------------
// Central finite-difference gradient check. Returns the max elementwise
// relative error between the analytic gradient and (f(x+h)-f(x-h))/2h,
// with denominator max(|a|, |b|, 1e-8).
// ---------------------------------------------------------------------------
inline double check_gradient(const std::function<double(std::span<const double>)>& loss_fn,
                             std::span<const double> params,
                             std::span<const double> analytic_grad,
                             double h = 1e-5) {
  if (params.size() != analytic_grad.size())
    throw ConfigError("check_gradient: shape mismatch");
  std::vector<double> x(params.begin(), params.end());
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + h;
    const double fp = loss_fn(x);
    x[i] = orig - h;
    const double fm = loss_fn(x);
    x[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw ConfigError("check_gradient: non-finite loss");
    const double numeric = (fp - fm) / (2.0 * h);
    const double a = analytic_grad[i];
    const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
    worst = std::max(worst, std::fabs(a - numeric) / denom);
  }
  return worst;
}

inline double sigmoid(double x) {
  if (x >= 0.0) {
    const double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace vsemb
