#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <future>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "mbm/dataset.hpp"
#include "mbm/errors.hpp"
#include "mbm/inference.hpp"
#include "mbm/metrics.hpp"
#include "mbm/predictive.hpp"
#include "mbm/rng.hpp"
#include "mbm/stats.hpp"

namespace mbm {

struct BootstrapPlan {
  enum class Mode { Exact, ImportanceWeighted, Empirical };
  int replicates = 100;  // B
  Mode mode = Mode::ImportanceWeighted;
  std::uint64_t seed = 0;
  std::vector<double> interval_levels{0.5, 0.95};
  int draws_out = 1000;    // resampled posterior size / exact refit draw count
  int exact_warmup = 1000; // warmup sweeps for exact-mode refits
  int threads = 0;         // 0 = hardware concurrency

  void validate() const {
    if (replicates < 1) throw ConfigError("bootstrap needs at least one replicate");
    for (double l : interval_levels)
      if (!(l > 0.0 && l < 1.0))
        throw ConfigError("interval levels must lie strictly inside (0,1)");
    if (draws_out < 1) throw ConfigError("draws_out must be >= 1");
  }
};

// One row of the truncated self-normalized weight matrix.
struct WeightRow {
  Eigen::VectorXd log_raw;     // log likelihood ratios log w~_r
  Eigen::VectorXd normalized;  // truncated, self-normalized; sums to 1
  double ess = 0.0;            // 1 / sum w^2, in [1, R]
};

struct MetricEstimate {
  SubpopKey key;
  std::size_t cell_size = 0;
  MetricKind metric;
  std::optional<double> point;
  std::string point_error;
  std::vector<double> replicates;  // NaN marks a missing replicate
  std::size_t n_missing = 0;
  struct Interval {
    double level, lo, hi;
  };
  std::vector<Interval> intervals;
  double range_lo = std::numeric_limits<double>::quiet_NaN();
  double range_hi = std::numeric_limits<double>::quiet_NaN();
  std::string provenance;
};

struct BootstrapResult {
  std::vector<MetricEstimate> estimates;
  std::vector<double> ess;  // per replicate (importance mode only)
  std::vector<std::string> warnings;
};

// ---------------------------------------------------------------------------
// Bootstrap datasets
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<std::size_t> bootstrap_indices(std::size_t n, std::uint64_t seed,
                                                  int b) {
  Rng rng(SeedSequence(seed).derive("bootstrap", static_cast<std::uint64_t>(b)));
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = rng.below(n);
  return idx;
}

inline int default_threads(int requested) {
  if (requested > 0) return requested;
  const unsigned hc = std::thread::hardware_concurrency();
  return hc == 0 ? 1 : static_cast<int>(hc);
}

// Runs fn(b) for b in [0, B) across threads; fn must write only to its slot.
template <typename Fn>
inline void parallel_for_replicates(int B, int threads, Fn&& fn) {
  threads = std::min(threads, B);
  if (threads <= 1) {
    for (int b = 0; b < B; ++b) fn(b);
    return;
  }
  std::atomic<int> next{0};
  auto worker = [&] {
    for (int b = next.fetch_add(1); b < B; b = next.fetch_add(1)) fn(b);
  };
  std::vector<std::thread> pool;
  for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
  for (auto& th : pool) th.join();
}

}  // namespace detail

// N-row resample with replacement; deterministic given (seed, b).
inline EvalDataset bootstrap_dataset(const EvalDataset& d, std::uint64_t seed, int b) {
  if (d.size() == 0) throw ValidationError("cannot bootstrap an empty dataset");
  return d.take_rows(detail::bootstrap_indices(d.size(), seed, b));
}

// ---------------------------------------------------------------------------
// Importance weights
// ---------------------------------------------------------------------------

// Truncation at sqrt(R) times the mean weight, then self-normalization.
// All arithmetic happens after subtracting the max log weight, which leaves
// the (scale-free) truncation rule and the normalized output unchanged.
inline WeightRow truncate_normalize(Eigen::VectorXd log_raw) {
  const Eigen::Index R = log_raw.size();
  WeightRow out;
  out.log_raw = std::move(log_raw);
  const double m = out.log_raw.maxCoeff();
  if (!std::isfinite(m)) throw Error("importance weights are not finite");
  Eigen::ArrayXd w = (out.log_raw.array() - m).exp();
  const double cap = std::sqrt(static_cast<double>(R)) * w.mean();
  w = w.min(cap);
  out.normalized = (w / w.sum()).matrix();
  out.ess = 1.0 / out.normalized.squaredNorm();
  return out;
}

// Log weight of each posterior draw for a bootstrap dataset given by record
// multiplicities: log w~_r = sum_n (c_n - 1) loglik[r, n]. The prior terms of
// the posterior ratio cancel; only the likelihood ratio remains.
inline WeightRow importance_weights(const PosteriorDraws& draws, const EvalDataset& d,
                                    const std::vector<int>& resample_counts) {
  if (resample_counts.size() != d.size())
    throw ShapeError("resample counts must have one entry per record");
  long total = 0;
  for (int c : resample_counts) total += c;
  if (total != static_cast<long>(d.size()))
    throw ValidationError("resample counts must sum to the dataset size");
  if (draws.loglik.cols() != static_cast<Eigen::Index>(d.size()))
    throw ShapeError("log-likelihood cache does not match the dataset");
  if (!draws.loglik.allFinite())
    throw ValidationError("log-likelihood cache contains non-finite entries");

  Eigen::VectorXd cm1(d.size());
  for (std::size_t n = 0; n < d.size(); ++n)
    cm1(static_cast<Eigen::Index>(n)) = resample_counts[n] - 1.0;
  // Exact zero when every count is one: 0 * ll sums to 0 bit-exactly.
  Eigen::VectorXd log_raw = draws.loglik * cm1;
  return truncate_normalize(std::move(log_raw));
}

// ---------------------------------------------------------------------------
// Posterior resampling
// ---------------------------------------------------------------------------

// Categorical draw with replacement proportional to the truncated weights;
// log-likelihood cache rows are carried along with the parameters.
inline PosteriorDraws resample_posterior(const PosteriorDraws& draws,
                                         const Eigen::VectorXd& weights, int draws_out,
                                         std::uint64_t seed) {
  if (weights.size() != draws.params.rows())
    throw ShapeError("weight row length must equal the draw count");
  Eigen::VectorXd cum(weights.size());
  double acc = 0.0;
  for (Eigen::Index r = 0; r < weights.size(); ++r) {
    acc += weights(r);
    cum(r) = acc;
  }
  Rng rng(seed);
  PosteriorDraws out;
  out.layout = draws.layout;
  out.param_names = draws.param_names;
  out.spec_hash = draws.spec_hash;
  out.n_chains = 1;
  out.params.resize(draws_out, draws.params.cols());
  out.loglik.resize(draws_out, draws.loglik.cols());
  for (int i = 0; i < draws_out; ++i) {
    const double u = rng.uniform() * acc;
    const auto* begin = cum.data();
    const auto* it = std::lower_bound(begin, begin + cum.size(), u);
    Eigen::Index r = std::min<Eigen::Index>(it - begin, cum.size() - 1);
    out.params.row(i) = draws.params.row(r);
    out.loglik.row(i) = draws.loglik.row(r);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Bootstrap drivers
// ---------------------------------------------------------------------------

namespace detail {

struct ReplicateTable {
  // replicates[k][b] for cell-metric slot k
  std::vector<std::vector<double>> values;
};

inline void finalize_estimates(std::vector<MetricEstimate>& ests,
                               const ReplicateTable& table,
                               const std::vector<double>& levels) {
  for (std::size_t k = 0; k < ests.size(); ++k) {
    auto& est = ests[k];
    est.replicates = table.values[k];
    std::vector<double> ok;
    ok.reserve(est.replicates.size());
    for (double v : est.replicates)
      if (std::isfinite(v)) ok.push_back(v);
    est.n_missing = est.replicates.size() - ok.size();
    if (ok.empty()) continue;
    est.range_lo = *std::min_element(ok.begin(), ok.end());
    est.range_hi = *std::max_element(ok.begin(), ok.end());
    for (double level : levels) {
      MetricEstimate::Interval iv;
      iv.level = level;
      iv.lo = quantile(ok, (1.0 - level) / 2.0);
      iv.hi = quantile(ok, (1.0 + level) / 2.0);
      est.intervals.push_back(iv);
    }
  }
}

inline std::vector<MetricEstimate> init_estimates(const EvalDataset& d,
                                                  const std::vector<SubpopKey>& keys,
                                                  const std::vector<MetricKind>& metrics,
                                                  const std::string& provenance) {
  std::vector<MetricEstimate> ests;
  for (const auto& key : keys) {
    const std::size_t size = d.match_rows(key).size();
    for (const auto& m : metrics) {
      MetricEstimate est;
      est.key = key;
      est.cell_size = size;
      est.metric = m;
      est.provenance = provenance;
      ests.push_back(std::move(est));
    }
  }
  return ests;
}

}  // namespace detail

// Bootstrap of the model-based metrics. Exact mode refits the posterior on
// each bootstrap dataset; importance mode reweights and resamples the
// original draws. Both modes consume identical (seed, b)-derived datasets,
// so their replicates are paired.
inline BootstrapResult mbm_bootstrap(const ModelSpec& spec, const PosteriorDraws& draws,
                                     const EvalDataset& d, const BootstrapPlan& plan,
                                     const std::vector<SubpopKey>& keys,
                                     const std::vector<MetricKind>& metrics,
                                     const SamplerSettings& exact_settings = {}) {
  plan.validate();
  if (plan.mode == BootstrapPlan::Mode::Empirical)
    throw ConfigError("empirical mode is served by empirical_bootstrap");
  GaussianModel model(spec, d);
  if (draws.spec_hash != model.spec_hash())
    throw StalenessError("posterior draws do not match this (model, dataset) pair");

  SeedSequence seeds(plan.seed);
  BootstrapResult result;
  result.estimates = detail::init_estimates(d, keys, metrics, "mbm");

  // Full-data point estimates.
  {
    auto sims = simulate_predictive(spec, draws, d, seeds.derive("point-sims"));
    for (auto& est : result.estimates) {
      try {
        est.point = mbm_estimate(sims, est.key, est.metric);
      } catch (const Error& e) {
        est.point_error = e.what();
      }
    }
  }

  const int B = plan.replicates;
  detail::ReplicateTable table;
  table.values.assign(result.estimates.size(),
                      std::vector<double>(static_cast<std::size_t>(B),
                                          std::numeric_limits<double>::quiet_NaN()));
  std::vector<double> ess(static_cast<std::size_t>(B),
                          std::numeric_limits<double>::quiet_NaN());

  const bool importance = plan.mode == BootstrapPlan::Mode::ImportanceWeighted;
  detail::parallel_for_replicates(
      B, detail::default_threads(plan.threads), [&](int b) {
        auto idx = detail::bootstrap_indices(d.size(), plan.seed, b);
        EvalDataset db = d.take_rows(idx);
        Eigen::MatrixXd params;
        if (importance) {
          std::vector<int> counts(d.size(), 0);
          for (std::size_t i : idx) ++counts[i];
          WeightRow row = importance_weights(draws, d, counts);
          ess[static_cast<std::size_t>(b)] = row.ess;
          params = resample_posterior(draws, row.normalized, plan.draws_out,
                                      seeds.derive("boot-resample",
                                                   static_cast<std::uint64_t>(b)))
                       .params;
        } else {
          SamplerSettings st = exact_settings;
          st.warmup = plan.exact_warmup;
          auto [refit, diag] = sample_posterior(
              spec, db, plan.draws_out,
              seeds.derive("boot-refit", static_cast<std::uint64_t>(b)), st);
          params = std::move(refit.params);
        }
        GaussianModel model_b(spec, db);
        Rng rng(seeds.derive("boot-sims", static_cast<std::uint64_t>(b)));
        PredictiveSims sims{detail::simulate_scores_matrix(model_b, params, rng), db};
        std::size_t k = 0;
        for (const auto& key : keys) {
          for (const auto& m : metrics) {
            try {
              table.values[k][static_cast<std::size_t>(b)] = mbm_estimate(sims, key, m);
            } catch (const Error&) {
              // missing replicate
            }
            ++k;
          }
        }
      });

  detail::finalize_estimates(result.estimates, table, plan.interval_levels);
  if (importance) {
    std::vector<double> finite;
    for (double e : ess)
      if (std::isfinite(e)) finite.push_back(e);
    if (!finite.empty()) {
      result.ess = ess;
      const double median = quantile(finite, 0.5);
      if (median < static_cast<double>(draws.draw_count()) / 10.0)
        result.warnings.push_back(
            "median importance-weight ESS below draws/10; intervals may be unstable");
    }
  }
  return result;
}

// Classical bootstrap of the subsample estimators; consumes the same
// (seed, b)-derived datasets as the model-based modes.
inline BootstrapResult empirical_bootstrap(const EvalDataset& d, const BootstrapPlan& plan,
                                           const std::vector<SubpopKey>& keys,
                                           const std::vector<MetricKind>& metrics) {
  plan.validate();
  BootstrapResult result;
  result.estimates = detail::init_estimates(d, keys, metrics, "empirical");
  for (auto& est : result.estimates) {
    try {
      est.point = empirical_estimate(d, est.key, est.metric);
    } catch (const Error& e) {
      est.point_error = e.what();
    }
  }

  const int B = plan.replicates;
  detail::ReplicateTable table;
  table.values.assign(result.estimates.size(),
                      std::vector<double>(static_cast<std::size_t>(B),
                                          std::numeric_limits<double>::quiet_NaN()));
  detail::parallel_for_replicates(
      B, detail::default_threads(plan.threads), [&](int b) {
        EvalDataset db = bootstrap_dataset(d, plan.seed, b);
        std::size_t k = 0;
        for (const auto& key : keys) {
          for (const auto& m : metrics) {
            try {
              table.values[k][static_cast<std::size_t>(b)] = empirical_estimate(db, key, m);
            } catch (const Error&) {
            }
            ++k;
          }
        }
      });
  detail::finalize_estimates(result.estimates, table, plan.interval_levels);
  return result;
}

}  // namespace mbm
