#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "mbm/dataset.hpp"
#include "mbm/errors.hpp"

namespace mbm {

// Metric selector: AUC, or FPR/PPV at a fixed score threshold.
struct MetricKind {
  enum class Kind { Auc, Fpr, Ppv } kind = Kind::Auc;
  double threshold = 0.0;  // used by Fpr/Ppv only

  static MetricKind auc() { return {Kind::Auc, 0.0}; }
  static MetricKind fpr(double tau) { return {Kind::Fpr, tau}; }
  static MetricKind ppv(double tau) { return {Kind::Ppv, tau}; }

  std::string name() const {
    switch (kind) {
      case Kind::Auc: return "auc";
      case Kind::Fpr: return "fpr";
      case Kind::Ppv: return "ppv";
    }
    return "?";
  }

  bool operator==(const MetricKind& o) const {
    return kind == o.kind && (kind == Kind::Auc || threshold == o.threshold);
  }
};

// Scores split by true class.
struct ScoreSample {
  std::vector<double> pos;  // y = 1
  std::vector<double> neg;  // y = 0

  static ScoreSample from_dataset(const EvalDataset& d) {
    ScoreSample s;
    for (std::size_t n = 0; n < d.size(); ++n)
      (d.label(n) ? s.pos : s.neg).push_back(d.score(n));
    return s;
  }
};

// ---------------------------------------------------------------------------
// AUC
// ---------------------------------------------------------------------------

// Mann-Whitney U-statistic with the mid-rank tie convention (ties count 0.5).
// Rank-based, O((n1+n0) log(n1+n0)); exactly equal to the pairwise sum.
inline double auc_u_statistic(const ScoreSample& s) {
  const std::size_t n1 = s.pos.size(), n0 = s.neg.size();
  if (n1 == 0) throw InsufficientClassError("AUC undefined: no positive examples");
  if (n0 == 0) throw InsufficientClassError("AUC undefined: no negative examples");

  std::vector<std::pair<double, bool>> all;  // (score, is_positive)
  all.reserve(n1 + n0);
  for (double v : s.pos) all.emplace_back(v, true);
  for (double v : s.neg) all.emplace_back(v, false);
  std::sort(all.begin(), all.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });

  // Sum of positive mid-ranks; ranks are 1-based. Mid-ranks are multiples of
  // 0.5, so the arithmetic below is exact for sample sizes below 2^52.
  double rank_sum_pos = 0.0;
  std::size_t i = 0;
  while (i < all.size()) {
    std::size_t j = i;
    std::size_t pos_in_tie = 0;
    while (j < all.size() && all[j].first == all[i].first) {
      if (all[j].second) ++pos_in_tie;
      ++j;
    }
    const double mid_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
    rank_sum_pos += mid_rank * static_cast<double>(pos_in_tie);
    i = j;
  }
  const double u = rank_sum_pos - 0.5 * static_cast<double>(n1) * static_cast<double>(n1 + 1);
  return u / (static_cast<double>(n1) * static_cast<double>(n0));
}

// Trapezoidal area under the empirical ROC curve. Equal scores collapse into
// a single ROC vertex, which reproduces the 0.5 tie weight of the U-statistic.
inline double auc_roc_integration(const ScoreSample& s) {
  const std::size_t n1 = s.pos.size(), n0 = s.neg.size();
  if (n1 == 0) throw InsufficientClassError("AUC undefined: no positive examples");
  if (n0 == 0) throw InsufficientClassError("AUC undefined: no negative examples");

  std::vector<std::pair<double, bool>> all;
  all.reserve(n1 + n0);
  for (double v : s.pos) all.emplace_back(v, true);
  for (double v : s.neg) all.emplace_back(v, false);
  // Descending: the ROC is traced from the highest threshold down.
  std::sort(all.begin(), all.end(),
            [](const auto& a, const auto& b) { return a.first > b.first; });

  double area2 = 0.0;  // twice the area, in pair-count units
  double tp = 0.0, fp = 0.0;
  std::size_t i = 0;
  while (i < all.size()) {
    std::size_t j = i;
    double d_tp = 0.0, d_fp = 0.0;
    while (j < all.size() && all[j].first == all[i].first) {
      if (all[j].second) d_tp += 1.0; else d_fp += 1.0;
      ++j;
    }
    area2 += d_fp * (2.0 * tp + d_tp);  // trapezoid over the fp increment
    tp += d_tp;
    fp += d_fp;
    i = j;
  }
  return 0.5 * area2 / (static_cast<double>(n1) * static_cast<double>(n0));
}

// ---------------------------------------------------------------------------
// Threshold metrics (strict '>' at the threshold)
// ---------------------------------------------------------------------------

inline double fpr_at(const ScoreSample& s, double tau) {
  if (s.neg.empty()) throw InsufficientClassError("FPR undefined: no negative examples");
  std::size_t above = 0;
  for (double v : s.neg)
    if (v > tau) ++above;
  return static_cast<double>(above) / static_cast<double>(s.neg.size());
}

inline double ppv_at(const ScoreSample& s, double tau) {
  std::size_t tp = 0, fp = 0;
  for (double v : s.pos)
    if (v > tau) ++tp;
  for (double v : s.neg)
    if (v > tau) ++fp;
  if (tp + fp == 0)
    throw UndefinedMetricError("PPV undefined: no scores above threshold");
  return static_cast<double>(tp) / static_cast<double>(tp + fp);
}

// Smallest observed negative score tau with fpr_at(s, tau) <= target, i.e.
// the empirical (1-target)-quantile of the negatives under the strict-'>'
// convention. Observed values only; no interpolation.
inline double threshold_for_fpr(const ScoreSample& s, double target) {
  if (s.neg.empty()) throw InsufficientClassError("threshold undefined: no negative examples");
  std::vector<double> neg = s.neg;
  std::sort(neg.begin(), neg.end(), std::greater<double>());
  const std::size_t n0 = neg.size();
  // Walk candidates from the largest negative down; the count of negatives
  // strictly above neg[k] is at most k, so the first k with k/n0 <= target
  // gives the smallest admissible observed value.
  const auto allowed = static_cast<std::size_t>(std::floor(target * static_cast<double>(n0)));
  const std::size_t k = std::min(allowed, n0 - 1);
  // Ties: equal values below index k do not raise the exceed count.
  return neg[k];
}

inline double evaluate_metric(const ScoreSample& s, const MetricKind& m) {
  switch (m.kind) {
    case MetricKind::Kind::Auc: return auc_u_statistic(s);
    case MetricKind::Kind::Fpr: return fpr_at(s, m.threshold);
    case MetricKind::Kind::Ppv: return ppv_at(s, m.threshold);
  }
  throw Error("unreachable metric kind");
}

// Subsample (empirical) estimator: restrict to the subpopulation, then
// dispatch. Errors are re-tagged with the key for per-cell reporting.
inline double empirical_estimate(const EvalDataset& d, const SubpopKey& key,
                                 const MetricKind& m) {
  auto rows = d.match_rows(key);
  ScoreSample s;
  for (std::size_t n : rows) (d.label(n) ? s.pos : s.neg).push_back(d.score(n));
  try {
    return evaluate_metric(s, m);
  } catch (const InsufficientClassError& e) {
    throw InsufficientClassError(std::string(e.what()) + " [" + key.to_string() + "]");
  } catch (const UndefinedMetricError& e) {
    throw UndefinedMetricError(std::string(e.what()) + " [" + key.to_string() + "]");
  }
}

}  // namespace mbm
