#pragma once

// Independent reference computations used by the unit and acceptance tests.
// None of these call into the library's numeric code.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <vector>

namespace oracle {

/// 1 - IoU by pixel counting; empty-empty is 0.
inline double iou_distance(const std::vector<int>& a, const std::vector<int>& b) {
  int inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    inter += (a[i] == 1 && b[i] == 1) ? 1 : 0;
    uni += (a[i] == 1 || b[i] == 1) ? 1 : 0;
  }
  return uni == 0 ? 0.0 : 1.0 - static_cast<double>(inter) / static_cast<double>(uni);
}

inline double mean_distance(const std::vector<std::vector<int>>& a, const std::vector<std::vector<int>>& b) {
  double s = 0.0;
  for (const auto& x : a)
    for (const auto& y : b) s += iou_distance(x, y);
  return s / (static_cast<double>(a.size()) * static_cast<double>(b.size()));
}

/// Exhaustive ordered-pair enumeration, diagonal included.
inline double ged_squared(const std::vector<std::vector<int>>& s, const std::vector<std::vector<int>>& y) {
  return 2.0 * mean_distance(s, y) - mean_distance(s, s) - mean_distance(y, y);
}

/// Direct normalized cross-correlation in long double, population std.
inline double ncc(const std::vector<double>& a, const std::vector<double>& b) {
  const long double n = static_cast<long double>(a.size());
  long double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  long double va = 0, vb = 0, cab = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    va += (a[i] - ma) * (a[i] - ma);
    vb += (b[i] - mb) * (b[i] - mb);
    cab += (a[i] - ma) * (b[i] - mb);
  }
  const long double sa = std::sqrt(va / n), sb = std::sqrt(vb / n);
  return static_cast<double>(cab / (n * sa * sb));
}

/// KL(N(1, alpha) noise || log-uniform), normalized to vanish as alpha -> inf:
///   -0.5 log alpha + E_{e ~ N(1, alpha)} log|e| + (gamma_E + log 2) / 2.
/// The expectation is integrated over both half-lines with x = +-exp(t), which
/// removes the log singularity at 0; the trapezoid rule on the smooth
/// integrand converges spectrally.
inline double dropout_kl_quadrature(double alpha) {
  const double sd = std::sqrt(alpha);
  const double norm = 1.0 / (sd * std::sqrt(2.0 * std::numbers::pi));
  auto density = [&](double x) { return norm * std::exp(-0.5 * (x - 1.0) * (x - 1.0) / alpha); };
  const double lo = -60.0, hi = std::log(1.0 + 40.0 * sd);
  const int n = 400000;
  const double h = (hi - lo) / n;
  double s = 0.0;
  for (int k = 0; k <= n; ++k) {
    const double t = lo + h * k;
    const double e = std::exp(t);
    const double f = t * (density(e) + density(-e)) * e;
    s += (k == 0 || k == n) ? 0.5 * f : f;
  }
  const double expected_log_abs = s * h;
  return -0.5 * std::log(alpha) + expected_log_abs + 0.5 * (std::numbers::egamma + std::numbers::ln2);
}

/// Monte-Carlo KL(q || p) = E_q[log q(z) - log p(z)] for diagonal Gaussians.
inline double gaussian_kl_mc(const std::vector<double>& mq, const std::vector<double>& vq,
                             const std::vector<double>& mp, const std::vector<double>& vp, int samples,
                             std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01;
  long double acc = 0;
  for (int s = 0; s < samples; ++s) {
    double lr = 0.0;
    for (std::size_t d = 0; d < mq.size(); ++d) {
      const double z = mq[d] + std::sqrt(vq[d]) * n01(rng);
      const double lq = -0.5 * std::log(2 * std::numbers::pi * vq[d]) - 0.5 * (z - mq[d]) * (z - mq[d]) / vq[d];
      const double lp = -0.5 * std::log(2 * std::numbers::pi * vp[d]) - 0.5 * (z - mp[d]) * (z - mp[d]) / vp[d];
      lr += lq - lp;
    }
    acc += lr;
  }
  return static_cast<double>(acc / samples);
}

}  // namespace oracle
