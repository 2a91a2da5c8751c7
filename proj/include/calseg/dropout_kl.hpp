#pragma once

#include <algorithm>
#include <cmath>

namespace calseg {

// Approximation of KL(q(w) || p(w)) for multiplicative Gaussian noise
// q(w) = N(theta, alpha theta^2) against the log-uniform prior:
//   KL ~= k1 - k1 sigmoid(k2 + k3 log_alpha) + 0.5 log(1 + 1/alpha)
// which is positive, decreasing in alpha, and vanishes as alpha -> inf.
inline constexpr double kDropoutK1 = 0.63576;
inline constexpr double kDropoutK2 = 1.87320;
inline constexpr double kDropoutK3 = 1.48695;
inline constexpr double kLogAlphaMin = -8.0;
inline constexpr double kLogAlphaMax = 2.0;

inline double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// log(1 + exp(x)) without overflow.
inline double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

/// The approximation itself, defined for any finite log_alpha.
inline double dropout_kl_approximation(double log_alpha) {
  return kDropoutK1 - kDropoutK1 * stable_sigmoid(kDropoutK2 + kDropoutK3 * log_alpha) + 0.5 * softplus(-log_alpha);
}

/// Per-weight penalty; log_alpha is clamped to [kLogAlphaMin, kLogAlphaMax].
inline double dropout_kl_entry(double log_alpha) {
  return dropout_kl_approximation(std::clamp(log_alpha, kLogAlphaMin, kLogAlphaMax));
}

/// d(dropout_kl_entry)/d(log_alpha); zero outside the clamp range.
inline double dropout_kl_entry_derivative(double log_alpha) {
  if (log_alpha < kLogAlphaMin || log_alpha > kLogAlphaMax) return 0.0;
  const double s = stable_sigmoid(kDropoutK2 + kDropoutK3 * log_alpha);
  return -kDropoutK1 * kDropoutK3 * s * (1.0 - s) - 0.5 * stable_sigmoid(-log_alpha);
}

}  // namespace calseg
