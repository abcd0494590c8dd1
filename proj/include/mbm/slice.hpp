#pragma once

#include <cmath>
#include <limits>

#include "mbm/rng.hpp"

namespace mbm {

// Univariate slice sampler with stepping out and shrinkage (Neal 2003).
// `logf` is the log density up to a constant; returns one new point.
template <class F>
double slice_sample(F&& logf, double x0, Rng& rng, double width = 1.0,
                    int max_steps = 50) {
  const double log_y = logf(x0) + std::log(rng.uniform());

  double lo = x0 - width * rng.uniform();
  double hi = lo + width;
  int j = static_cast<int>(std::floor(max_steps * rng.uniform()));
  int k = max_steps - 1 - j;
  while (j-- > 0 && logf(lo) > log_y) lo -= width;
  while (k-- > 0 && logf(hi) > log_y) hi += width;

  for (int iter = 0; iter < 1000; ++iter) {
    const double x1 = lo + (hi - lo) * rng.uniform();
    if (logf(x1) > log_y) return x1;
    if (x1 < x0) lo = x1; else hi = x1;
    if (hi - lo < 1e-300) break;
  }
  return x0;  // pathological target; keep the current point
}

}  // namespace mbm
