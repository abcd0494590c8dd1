#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "mbm/dataset.hpp"
#include "mbm/errors.hpp"
#include "mbm/inference.hpp"
#include "mbm/predictive.hpp"
#include "mbm/stats.hpp"

namespace mbm {

// ---------------------------------------------------------------------------
// Gaussian KDE with Silverman bandwidth
// ---------------------------------------------------------------------------

class KdeDensity {
 public:
  explicit KdeDensity(std::vector<double> train) : train_(std::move(train)) {
    if (train_.size() < 2)
      throw InsufficientDataError("KDE needs at least two training scores");
    const double sd = sd_of(train_);
    const double iqr = quantile(train_, 0.75) - quantile(train_, 0.25);
    const double n_factor =
        std::pow(static_cast<double>(train_.size()), -0.2);
    double h = 0.9 * std::min(sd, iqr / 1.34) * n_factor;
    h = std::max(h, 1e-3 * sd);
    if (h <= 0.0) {
      // All training scores identical; any positive width keeps the density
      // finite and proper.
      h = 1e-3 * std::max(1.0, std::abs(mean_of(train_)));
    }
    bandwidth_ = h;
  }

  double bandwidth() const { return bandwidth_; }

  double logpdf(double query) const {
    double m = -std::numeric_limits<double>::infinity();
    std::vector<double> zs;
    zs.reserve(train_.size());
    for (double x : train_) {
      const double z = (query - x) / bandwidth_;
      zs.push_back(-0.5 * z * z);
    }
    m = logsumexp(zs.begin(), zs.end());
    return m - std::log(static_cast<double>(train_.size())) - std::log(bandwidth_) -
           0.5 * kLogTwoPi;
  }

 private:
  std::vector<double> train_;
  double bandwidth_ = 1.0;
};

inline double kde_logpdf(const std::vector<double>& train, double query) {
  return KdeDensity(train).logpdf(query);
}

// ---------------------------------------------------------------------------
// Cross-validated model checking
// ---------------------------------------------------------------------------

// Out-of-fold comparison for one (subpopulation cell, class) stratum.
struct CellCheckResult {
  SubpopKey key;
  int label = 0;
  std::size_t n_scored = 0;  // held-out records scored (each exactly once)
  std::size_t n_paired = 0;  // records where the KDE baseline existed
  double model_ll = 0.0;     // mean out-of-fold log predictive density
  double kde_ll = 0.0;       // same, over paired records (NaN when n_paired=0)
  double diff_se = 0.0;      // SE of the paired per-record differences
  enum class Verdict { ModelOk, Fallback } verdict = Verdict::ModelOk;

  bool fallback() const { return verdict == Verdict::Fallback; }
};

struct CvSettings {
  int folds = 5;
  double margin_se = 1.0;  // fallback when kde - model > margin_se * SE
  int fit_draws = 1000;    // reduced draw count for the per-fold refits
  SamplerSettings sampler{.warmup = 1000, .chains = 2};
};

namespace detail {

// Stratified fold assignment: jointly on (cell x class) where the stratum has
// at least K members, otherwise on class alone. Deterministic given the seed.
inline std::vector<int> assign_folds(const std::vector<int>& cell_of,
                                     const std::vector<std::int8_t>& labels, int K,
                                     Rng& rng) {
  const std::size_t N = labels.size();
  std::map<std::pair<int, int>, std::vector<std::size_t>> strata;
  for (std::size_t n = 0; n < N; ++n)
    strata[{cell_of[n], labels[n]}].push_back(n);

  std::vector<int> fold(N, -1);
  std::vector<std::vector<std::size_t>> leftover(2);
  for (auto& [key, rows] : strata) {
    if (static_cast<int>(rows.size()) >= K) {
      std::shuffle(rows.begin(), rows.end(), rng.engine());
      for (std::size_t i = 0; i < rows.size(); ++i)
        fold[rows[i]] = static_cast<int>(i % static_cast<std::size_t>(K));
    } else {
      auto& pool = leftover[static_cast<std::size_t>(key.second)];
      pool.insert(pool.end(), rows.begin(), rows.end());
    }
  }
  for (auto& pool : leftover) {
    std::sort(pool.begin(), pool.end());
    std::shuffle(pool.begin(), pool.end(), rng.engine());
    for (std::size_t i = 0; i < pool.size(); ++i)
      fold[pool[i]] = static_cast<int>(i % static_cast<std::size_t>(K));
  }
  return fold;
}

}  // namespace detail

// Compares the evaluation model's out-of-fold log predictive density against
// a per-(cell, class) KDE baseline. Fallback is declared when the KDE is
// better by more than `margin_se` standard errors of the paired per-record
// differences; a stratum with no usable KDE keeps the model by default.
inline std::vector<CellCheckResult> cv_compare(const ModelSpec& spec, const EvalDataset& d,
                                               const std::vector<std::string>& attrs,
                                               const CvSettings& settings,
                                               std::uint64_t seed) {
  if (settings.folds < 2) throw ConfigError("cross validation needs at least 2 folds");
  const int K = settings.folds;

  // Cell index over the checking attributes (mixed radix on level codes).
  std::vector<int> attr_pos;
  std::vector<int> radix;
  for (const auto& a : attrs) {
    int p = d.attr_pos(a);
    if (p < 0) throw KeyError("unknown attribute '" + a + "'");
    attr_pos.push_back(p);
    radix.push_back(static_cast<int>(d.attr_schema()[p].levels.size()));
  }
  auto cell_code = [&](std::size_t n) {
    int code = 0;
    for (std::size_t i = 0; i < attr_pos.size(); ++i)
      code = code * radix[i] + d.attr_code(static_cast<std::size_t>(attr_pos[i]), n);
    return code;
  };
  std::vector<int> cell_of(d.size());
  for (std::size_t n = 0; n < d.size(); ++n) cell_of[n] = cell_code(n);

  SeedSequence seeds(seed);
  Rng fold_rng(seeds.derive("folds"));
  auto fold = detail::assign_folds(cell_of, d.labels(), K, fold_rng);

  // Per-record out-of-fold log densities.
  std::vector<double> model_ll(d.size()), kde_ll(d.size());
  std::vector<bool> kde_ok(d.size(), false);

  GaussianModel full_model(spec, d);
  for (int k = 0; k < K; ++k) {
    std::vector<std::size_t> train_rows, test_rows;
    for (std::size_t n = 0; n < d.size(); ++n)
      (fold[n] == k ? test_rows : train_rows).push_back(n);
    if (test_rows.empty()) continue;
    if (train_rows.empty()) throw ConfigError("a CV fold holds the entire dataset");
    EvalDataset train = d.take_rows(train_rows);

    auto [draws, diag] = sample_posterior(spec, train, settings.fit_draws,
                                          seeds.derive("fit", static_cast<std::uint64_t>(k)),
                                          settings.sampler);
    // log mean predictive density over draws, for every record; only the
    // held-out columns are consumed.
    Eigen::MatrixXd ll = full_model.loglik_all(draws.params);
    const double logR = std::log(static_cast<double>(ll.rows()));
    for (std::size_t n : test_rows) {
      auto col = ll.col(static_cast<Eigen::Index>(n));
      model_ll[n] = logsumexp(col.data(), col.data() + col.size()) - logR;
    }

    // KDE baseline per (cell, class) from the training rows.
    std::map<std::pair<int, int>, std::vector<double>> train_scores;
    for (std::size_t n : train_rows)
      train_scores[{cell_of[n], d.label(n)}].push_back(d.score(n));
    std::map<std::pair<int, int>, std::optional<KdeDensity>> kdes;
    for (std::size_t n : test_rows) {
      const std::pair<int, int> key{cell_of[n], d.label(n)};
      auto it = kdes.find(key);
      if (it == kdes.end()) {
        std::optional<KdeDensity> kde;
        auto ts = train_scores.find(key);
        if (ts != train_scores.end() && ts->second.size() >= 2)
          kde.emplace(ts->second);
        it = kdes.emplace(key, std::move(kde)).first;
      }
      if (it->second) {
        kde_ll[n] = it->second->logpdf(d.score(n));
        kde_ok[n] = true;
      }
    }
  }

  // Aggregate per (cell, class).
  std::map<std::pair<int, int>, std::vector<std::size_t>> strata;
  for (std::size_t n = 0; n < d.size(); ++n) strata[{cell_of[n], d.label(n)}].push_back(n);

  std::vector<CellCheckResult> out;
  for (const auto& [stratum, rows] : strata) {
    CellCheckResult res;
    int code = stratum.first;
    for (std::size_t i = attr_pos.size(); i-- > 0;) {
      res.key.bindings[attrs[i]] =
          d.attr_schema()[static_cast<std::size_t>(attr_pos[i])].levels
              [static_cast<std::size_t>(code % radix[i])];
      code /= radix[i];
    }
    res.label = stratum.second;
    res.n_scored = rows.size();
    double m_sum = 0.0;
    std::vector<double> diffs;
    double kde_sum = 0.0;
    for (std::size_t n : rows) {
      m_sum += model_ll[n];
      if (kde_ok[n]) {
        diffs.push_back(kde_ll[n] - model_ll[n]);
        kde_sum += kde_ll[n];
      }
    }
    res.model_ll = m_sum / static_cast<double>(rows.size());
    res.n_paired = diffs.size();
    res.kde_ll = diffs.empty() ? std::numeric_limits<double>::quiet_NaN()
                               : kde_sum / static_cast<double>(diffs.size());
    if (diffs.size() >= 2) {
      const double mean_diff = mean_of(diffs);
      res.diff_se = sd_of(diffs) / std::sqrt(static_cast<double>(diffs.size()));
      if (mean_diff > settings.margin_se * res.diff_se)
        res.verdict = CellCheckResult::Verdict::Fallback;
    }
    out.push_back(std::move(res));
  }
  return out;
}

// Per-subpopulation fallback: a key reverts to the empirical estimate when
// any of its class strata lost to the KDE baseline.
inline std::vector<PointEstimate> apply_fallback(
    const std::vector<PointEstimate>& mbm, const std::vector<CellCheckResult>& checks,
    const std::vector<PointEstimate>& empirical) {
  std::map<std::string, bool> key_falls_back;
  for (const auto& c : checks) {
    auto& flag = key_falls_back[c.key.to_string()];
    flag = flag || c.fallback();
  }
  std::map<std::pair<std::string, std::string>, const PointEstimate*> emp_index;
  for (const auto& e : empirical) emp_index[{e.key.to_string(), e.metric.name()}] = &e;

  std::vector<PointEstimate> out;
  out.reserve(mbm.size());
  for (const auto& est : mbm) {
    auto fb = key_falls_back.find(est.key.to_string());
    if (fb == key_falls_back.end() || !fb->second) {
      out.push_back(est);
      out.back().provenance = est.provenance.empty() ? "mbm" : est.provenance;
      continue;
    }
    auto emp = emp_index.find({est.key.to_string(), est.metric.name()});
    if (emp == emp_index.end())
      throw Error("fallback merge: no empirical estimate for cell " + est.key.to_string() +
                  " metric " + est.metric.name());
    out.push_back(*emp->second);
    out.back().provenance = "fallback";
  }
  return out;
}

}  // namespace mbm
