#pragma once

#include <Eigen/Dense>
#include <optional>
#include <string>
#include <vector>

#include "mbm/dataset.hpp"
#include "mbm/errors.hpp"
#include "mbm/inference.hpp"
#include "mbm/metrics.hpp"
#include "mbm/model.hpp"
#include "mbm/rng.hpp"

namespace mbm {

// Posterior predictive score simulations: one column per posterior draw,
// rows aligned with the source dataset's records.
struct PredictiveSims {
  Eigen::MatrixXd sims;  // N x R
  EvalDataset source;    // provides (a_n, x_n, y_n) alignment

  Eigen::Index draw_count() const { return sims.cols(); }
};

namespace detail {

// s_{n,r} ~ N(mu_n(lambda_r), sigma_n(lambda_r)^2), processed in draw blocks
// to bound the transient mu/sigma storage.
inline Eigen::MatrixXd simulate_scores_matrix(const GaussianModel& model,
                                              const Eigen::MatrixXd& params, Rng& rng) {
  const auto N = static_cast<Eigen::Index>(model.n());
  const Eigen::Index R = params.rows();
  Eigen::MatrixXd sims(N, R);
  for (Eigen::Index r = 0; r < R; ++r) {
    Eigen::VectorXd mu = model.mu_row(params.row(r));
    Eigen::VectorXd sigma = model.sigma_row(params.row(r));
    for (Eigen::Index n = 0; n < N; ++n)
      sims(n, r) = mu(n) + sigma(n) * rng.normal();
  }
  return sims;
}

}  // namespace detail

// Simulates the posterior predictive over the dataset the draws were fit on.
// Covariates are held fixed at their observed values; only the score is
// replaced by a model draw.
inline PredictiveSims simulate_predictive(const ModelSpec& spec, const PosteriorDraws& draws,
                                          const EvalDataset& d, std::uint64_t seed) {
  GaussianModel model(spec, d);
  if (draws.spec_hash != model.spec_hash())
    throw StalenessError("posterior draws do not match this (model, dataset) pair");
  Rng rng(seed);
  return {detail::simulate_scores_matrix(model, draws.params, rng), d};
}

// Model-based metric: pools all (record, draw) simulations inside the
// subpopulation and applies the nonparametric estimator to the pooled sample.
inline double mbm_estimate(const PredictiveSims& sims, const SubpopKey& key,
                           const MetricKind& m) {
  auto rows = sims.source.match_rows(key);
  ScoreSample pooled;
  const Eigen::Index R = sims.sims.cols();
  std::size_t n_pos = 0;
  for (std::size_t n : rows)
    if (sims.source.label(n)) ++n_pos;
  pooled.pos.reserve(n_pos * static_cast<std::size_t>(R));
  pooled.neg.reserve((rows.size() - n_pos) * static_cast<std::size_t>(R));
  for (std::size_t n : rows) {
    auto& bucket = sims.source.label(n) ? pooled.pos : pooled.neg;
    const auto row = sims.sims.row(static_cast<Eigen::Index>(n));
    for (Eigen::Index r = 0; r < R; ++r) bucket.push_back(row(r));
  }
  try {
    return evaluate_metric(pooled, m);
  } catch (const InsufficientClassError& e) {
    throw InsufficientClassError(std::string(e.what()) + " [" + key.to_string() + "]");
  } catch (const UndefinedMetricError& e) {
    throw UndefinedMetricError(std::string(e.what()) + " [" + key.to_string() + "]");
  }
}

// Point estimate for one (cell, metric); failures carried per cell, not fatal.
struct PointEstimate {
  SubpopKey key;
  std::size_t cell_size = 0;
  MetricKind metric;
  std::optional<double> value;
  std::string error;
  std::string provenance;  // "empirical" | "mbm" | "fallback"
};

inline std::vector<PointEstimate> mbm_all(const PredictiveSims& sims,
                                          const std::vector<std::string>& attrs,
                                          const std::vector<MetricKind>& metrics) {
  std::vector<PointEstimate> out;
  for (const auto& [key, count] : enumerate_subpops(sims.source, attrs)) {
    for (const auto& m : metrics) {
      PointEstimate est;
      est.key = key;
      est.cell_size = count;
      est.metric = m;
      est.provenance = "mbm";
      try {
        est.value = mbm_estimate(sims, key, m);
      } catch (const Error& e) {
        est.error = e.what();
      }
      out.push_back(std::move(est));
    }
  }
  return out;
}

// Empirical (subsample) analogue of mbm_all, for side-by-side reporting.
inline std::vector<PointEstimate> empirical_all(const EvalDataset& d,
                                                const std::vector<std::string>& attrs,
                                                const std::vector<MetricKind>& metrics) {
  std::vector<PointEstimate> out;
  for (const auto& [key, count] : enumerate_subpops(d, attrs)) {
    for (const auto& m : metrics) {
      PointEstimate est;
      est.key = key;
      est.cell_size = count;
      est.metric = m;
      est.provenance = "empirical";
      try {
        est.value = empirical_estimate(d, key, m);
      } catch (const Error& e) {
        est.error = e.what();
      }
      out.push_back(std::move(est));
    }
  }
  return out;
}

}  // namespace mbm
