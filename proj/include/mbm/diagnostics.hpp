#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <vector>

#include "mbm/errors.hpp"

namespace mbm {

// Split-chain potential scale reduction and effective sample size
// (Gelman et al., BDA3; Geyer initial-monotone truncation for the
// autocorrelation sum).
namespace detail {

// Splits each chain in half; returns per-sequence views as (offset, length).
inline void split_sequences(int n_chains, int n_draws, std::vector<std::pair<int, int>>& seqs) {
  seqs.clear();
  const int half = n_draws / 2;
  for (int c = 0; c < n_chains; ++c) {
    seqs.emplace_back(c * n_draws, half);
    seqs.emplace_back(c * n_draws + n_draws - half, half);
  }
}

}  // namespace detail

// `draws` is the concatenation of chains ((chains*n) x K), chain-major.
inline Eigen::VectorXd split_rhat(const Eigen::MatrixXd& draws, int n_chains) {
  const int total = static_cast<int>(draws.rows());
  const int K = static_cast<int>(draws.cols());
  const int n = total / n_chains;
  Eigen::VectorXd out(K);
  std::vector<std::pair<int, int>> seqs;
  detail::split_sequences(n_chains, n, seqs);
  const int M = static_cast<int>(seqs.size());
  const int L = seqs[0].second;
  if (L < 2) {
    out.setOnes();
    return out;
  }
  for (int k = 0; k < K; ++k) {
    double grand = 0.0;
    Eigen::VectorXd means(M), vars(M);
    for (int m = 0; m < M; ++m) {
      auto seg = draws.col(k).segment(seqs[m].first, L);
      means(m) = seg.mean();
      vars(m) = (seg.array() - means(m)).square().sum() / (L - 1);
      grand += means(m);
    }
    grand /= M;
    const double W = vars.mean();
    const double B = L * (means.array() - grand).square().sum() / (M - 1);
    if (W <= 0.0) {
      out(k) = 1.0;  // constant parameter
      continue;
    }
    const double var_plus = (L - 1.0) / L * W + B / L;
    out(k) = std::sqrt(var_plus / W);
  }
  return out;
}

// Effective sample size per parameter over split chains.
inline Eigen::VectorXd effective_sample_size(const Eigen::MatrixXd& draws, int n_chains) {
  const int total = static_cast<int>(draws.rows());
  const int K = static_cast<int>(draws.cols());
  const int n = total / n_chains;
  Eigen::VectorXd out(K);
  std::vector<std::pair<int, int>> seqs;
  detail::split_sequences(n_chains, n, seqs);
  const int M = static_cast<int>(seqs.size());
  const int L = seqs[0].second;
  const int max_lag = std::min(L - 1, 500);

  for (int k = 0; k < K; ++k) {
    Eigen::VectorXd means(M);
    double grand = 0.0;
    for (int m = 0; m < M; ++m) {
      means(m) = draws.col(k).segment(seqs[m].first, L).mean();
      grand += means(m);
    }
    grand /= M;
    double W = 0.0;
    for (int m = 0; m < M; ++m)
      W += (draws.col(k).segment(seqs[m].first, L).array() - means(m)).square().sum() /
           (L - 1);
    W /= M;
    if (W <= 0.0) {
      out(k) = static_cast<double>(M) * L;
      continue;
    }
    const double B = L * (means.array() - grand).square().sum() / (M - 1);
    const double var_plus = (L - 1.0) / L * W + B / L;

    // Mean autocovariance across sequences, biased 1/L normalization.
    auto mean_acov = [&](int t) {
      double acc = 0.0;
      for (int m = 0; m < M; ++m) {
        auto seg = draws.col(k).segment(seqs[m].first, L);
        double s = 0.0;
        for (int i = 0; i + t < L; ++i) s += (seg(i) - means(m)) * (seg(i + t) - means(m));
        acc += s / L;
      }
      return acc / M;
    };

    double tau = -1.0;
    double prev_pair = std::numeric_limits<double>::infinity();
    for (int t = 0; t + 1 <= max_lag; t += 2) {
      const double rho_even = 1.0 - (W - mean_acov(t)) / var_plus;
      const double rho_odd = 1.0 - (W - mean_acov(t + 1)) / var_plus;
      double pair = rho_even + rho_odd;
      if (pair < 0.0) break;
      pair = std::min(pair, prev_pair);  // enforce monotone decrease
      prev_pair = pair;
      tau += 2.0 * pair;
      if (pair < 1e-8) break;
    }
    tau = std::max(tau, 1.0 / std::log10(static_cast<double>(M) * L + 10.0));
    out(k) = static_cast<double>(M) * L / tau;
  }
  return out;
}

}  // namespace mbm
