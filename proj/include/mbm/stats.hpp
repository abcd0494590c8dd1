#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "mbm/errors.hpp"

namespace mbm {

inline constexpr double kLogTwoPi = 1.8378770664093454836;

inline double normal_logpdf(double x, double mean, double sd) {
  const double z = (x - mean) / sd;
  return -0.5 * kLogTwoPi - std::log(sd) - 0.5 * z * z;
}

inline double normal_cdf(double x) {
  return 0.5 * std::erfc(-x / std::numbers::sqrt2);
}

// Unnormalized log density of a half-Student-t(nu, scale) on x > 0.
inline double half_t_logpdf_unnorm(double x, double nu, double scale) {
  return -0.5 * (nu + 1.0) * std::log1p(x * x / (nu * scale * scale));
}

// d/dx of the above.
inline double half_t_dlogpdf(double x, double nu, double scale) {
  return -(nu + 1.0) * x / (nu * scale * scale + x * x);
}

template <typename It>
inline double logsumexp(It begin, It end) {
  double m = -std::numeric_limits<double>::infinity();
  for (It it = begin; it != end; ++it) m = std::max(m, static_cast<double>(*it));
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (It it = begin; it != end; ++it) s += std::exp(static_cast<double>(*it) - m);
  return m + std::log(s);
}

inline double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

// Unbiased sample standard deviation; 0 for fewer than two values.
inline double sd_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

// Linear-interpolated quantile (R type 7) on a copy of the data.
inline double quantile(std::vector<double> v, double p) {
  if (v.empty()) throw Error("quantile of empty sample");
  std::sort(v.begin(), v.end());
  if (p <= 0.0) return v.front();
  if (p >= 1.0) return v.back();
  const double h = p * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const double frac = h - static_cast<double>(lo);
  if (lo + 1 >= v.size()) return v.back();
  return v[lo] * (1.0 - frac) + v[lo + 1] * frac;
}

}  // namespace mbm
