#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>

#include "mbm/resample.hpp"

using namespace mbm;

namespace {

EvalDataset score_data(std::size_t n, std::uint64_t seed) {
  EvalDataset d({{"g", {"a", "b"}}}, {});
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    EvalRecord rec;
    rec.attrs["g"] = rng.bernoulli(0.5) ? "a" : "b";
    rec.label = rng.bernoulli(0.4) ? 1 : 0;
    rec.score = (rec.attrs["g"] == "a" ? 0.3 : -0.3) + 1.1 * rec.label + 0.8 * rng.normal();
    d.append(rec);
  }
  return d;
}

}  // namespace

TEST_CASE("bootstrap_dataset resamples with replacement deterministically") {
  auto d = score_data(1000, 3);
  auto a = bootstrap_dataset(d, 42, 7);
  auto b = bootstrap_dataset(d, 42, 7);
  CHECK(a.fingerprint() == b.fingerprint());
  CHECK(a.size() == d.size());
  CHECK(bootstrap_dataset(d, 42, 8).fingerprint() != a.fingerprint());

  // Single-row dataset: the single row repeated once.
  auto one = d.take_rows({0});
  auto boot1 = bootstrap_dataset(one, 9, 0);
  REQUIRE(boot1.size() == 1);
  CHECK(boot1.score(0) == one.score(0));

  // Expected distinct fraction ~ 1 - 1/e over replicates.
  double distinct_sum = 0.0;
  const int reps = 60;
  for (int b2 = 0; b2 < reps; ++b2) {
    auto idx = detail::bootstrap_indices(d.size(), 5, b2);
    std::set<std::size_t> uniq(idx.begin(), idx.end());
    distinct_sum += static_cast<double>(uniq.size()) / static_cast<double>(d.size());
  }
  CHECK_THAT(distinct_sum / reps, Catch::Matchers::WithinAbs(1.0 - std::exp(-1.0), 0.02));
}

TEST_CASE("truncated self-normalized weights match the hand-computed example") {
  Eigen::VectorXd lw(4);
  lw << std::log(4.0), 0.0, 0.0, 0.0;  // raw weights (4, 1, 1, 1)
  auto row = truncate_normalize(lw);
  // mean 1.75, cap 2*1.75 = 3.5 -> (3.5, 1, 1, 1) -> /6.5
  CHECK_THAT(row.normalized(0), Catch::Matchers::WithinAbs(0.5385, 1e-4));
  CHECK_THAT(row.normalized(1), Catch::Matchers::WithinAbs(0.1538, 1e-4));
  CHECK_THAT(row.normalized(2), Catch::Matchers::WithinAbs(0.1538, 1e-4));
  CHECK_THAT(row.normalized(3), Catch::Matchers::WithinAbs(0.1538, 1e-4));
  CHECK_THAT(row.normalized.sum(), Catch::Matchers::WithinAbs(1.0, 1e-12));
}

TEST_CASE("identity bootstrap weights are exactly uniform") {
  auto d = score_data(200, 5);
  auto spec = parse_formula("S ~ g + Y");
  auto draws = sample_conjugate(spec, d, 64, 11);
  std::vector<int> counts(d.size(), 1);
  auto row = importance_weights(draws, d, counts);
  for (Eigen::Index r = 0; r < row.normalized.size(); ++r)
    CHECK(row.normalized(r) == 1.0 / 64.0);  // bit-exact through the log-space path
  CHECK(row.ess == 64.0);
}

TEST_CASE("weight invariants hold on random resamples") {
  auto d = score_data(300, 7);
  auto spec = parse_formula("S ~ g + Y");
  auto draws = sample_conjugate(spec, d, 200, 13);
  const double R = 200.0;
  for (int b = 0; b < 100; ++b) {
    auto idx = detail::bootstrap_indices(d.size(), 99, b);
    std::vector<int> counts(d.size(), 0);
    for (auto i : idx) ++counts[i];
    auto row = importance_weights(draws, d, counts);
    CHECK_THAT(row.normalized.sum(), Catch::Matchers::WithinAbs(1.0, 1e-12));
    CHECK(row.normalized.minCoeff() >= 0.0);
    CHECK(row.ess >= 1.0 - 1e-9);
    CHECK(row.ess <= R + 1e-9);
    // Truncation never increases a weight: max normalized <= cap/sum.
    Eigen::ArrayXd raw = (row.log_raw.array() - row.log_raw.maxCoeff()).exp();
    const double cap = std::sqrt(R) * raw.mean();
    CHECK(row.normalized.maxCoeff() <= cap / raw.min(cap).sum() + 1e-12);
  }

  std::vector<int> bad(d.size(), 1);
  bad[0] = 3;
  CHECK_THROWS_AS(importance_weights(draws, d, bad), ValidationError);
}

TEST_CASE("resample_posterior follows the weights") {
  auto d = score_data(100, 9);
  auto spec = parse_formula("S ~ g");
  auto draws = sample_conjugate(spec, d, 50, 17);

  SECTION("degenerate weights select a single draw") {
    Eigen::VectorXd w = Eigen::VectorXd::Zero(50);
    w(31) = 1.0;
    auto out = resample_posterior(draws, w, 40, 3);
    for (int i = 0; i < 40; ++i) {
      CHECK(out.params.row(i) == draws.params.row(31));
      CHECK(out.loglik.row(i) == draws.loglik.row(31));
    }
  }
  SECTION("uniform weights sample draws near-uniformly") {
    Eigen::VectorXd w = Eigen::VectorXd::Constant(50, 1.0 / 50.0);
    const int R_out = 20000;
    auto out = resample_posterior(draws, w, R_out, 5);
    std::map<double, int> hits;  // keyed by the sigma draw, unique per row
    for (int i = 0; i < R_out; ++i) ++hits[out.params(i, 2)];
    double chi2 = 0.0;
    const double expect = R_out / 50.0;
    for (int r = 0; r < 50; ++r) {
      const double sigma = draws.params(r, 2);
      const double got = hits.count(sigma) ? hits[sigma] : 0;
      chi2 += (got - expect) * (got - expect) / expect;
    }
    CHECK(chi2 < 110.0);  // ~chi2(49), far tail
  }
  SECTION("deterministic under a fixed seed") {
    Eigen::VectorXd w = Eigen::VectorXd::Constant(50, 1.0 / 50.0);
    auto a = resample_posterior(draws, w, 100, 21);
    auto b = resample_posterior(draws, w, 100, 21);
    CHECK(a.params == b.params);
  }
}

TEST_CASE("importance-mode bootstrap brackets the point estimate") {
  auto d = score_data(400, 23);
  auto spec = parse_formula("S ~ g + Y");
  auto draws = sample_conjugate(spec, d, 1000, 29);
  BootstrapPlan plan;
  plan.replicates = 60;
  plan.seed = 31;
  plan.draws_out = 500;
  std::vector<SubpopKey> keys{SubpopKey{}, SubpopKey{{{"g", "a"}}}};
  auto res = mbm_bootstrap(spec, draws, d, plan, keys, {MetricKind::auc()});
  REQUIRE(res.estimates.size() == 2);
  for (const auto& est : res.estimates) {
    REQUIRE(est.point.has_value());
    CHECK(est.n_missing == 0);
    REQUIRE(est.intervals.size() == 2);
    const auto& iv95 = est.intervals[1];
    CHECK(iv95.level == 0.95);
    CHECK(iv95.lo <= *est.point + 0.05);
    CHECK(iv95.hi >= *est.point - 0.05);
    CHECK(iv95.hi - iv95.lo < 0.4);
    CHECK(est.intervals[0].hi - est.intervals[0].lo <= iv95.hi - iv95.lo + 1e-12);
  }
}

TEST_CASE("exact and importance modes consume identical bootstrap datasets") {
  auto d = score_data(150, 41);
  auto spec = parse_formula("S ~ g + Y");
  auto draws = sample_conjugate(spec, d, 400, 43);
  BootstrapPlan plan;
  plan.replicates = 3;
  plan.seed = 47;
  plan.draws_out = 200;
  // Same (seed, b) index stream regardless of mode.
  auto i1 = detail::bootstrap_indices(d.size(), plan.seed, 2);
  auto i2 = detail::bootstrap_indices(d.size(), plan.seed, 2);
  CHECK(i1 == i2);

  plan.mode = BootstrapPlan::Mode::Exact;
  auto exact = mbm_bootstrap(spec, draws, d, plan, {SubpopKey{}}, {MetricKind::auc()});
  plan.mode = BootstrapPlan::Mode::ImportanceWeighted;
  auto iw = mbm_bootstrap(spec, draws, d, plan, {SubpopKey{}}, {MetricKind::auc()});
  REQUIRE(exact.estimates.size() == 1);
  REQUIRE(iw.estimates.size() == 1);
  // Paired replicates from the same data should be close at this sample size.
  for (int b = 0; b < 3; ++b)
    CHECK_THAT(exact.estimates[0].replicates[static_cast<std::size_t>(b)],
               Catch::Matchers::WithinAbs(
                   iw.estimates[0].replicates[static_cast<std::size_t>(b)], 0.1));
}

TEST_CASE("empirical bootstrap records missing replicates for degenerate cells") {
  // One positive in a tiny cell: many bootstrap resamples lose it entirely.
  EvalDataset d({{"g", {"a", "b"}}}, {});
  Rng rng(3);
  for (int i = 0; i < 60; ++i) {
    EvalRecord rec;
    rec.attrs["g"] = i < 6 ? "b" : "a";
    rec.label = (i == 0 || i >= 30) ? 1 : 0;  // cell b has exactly one positive
    rec.score = 0.5 * rec.label + rng.normal();
    d.append(rec);
  }
  BootstrapPlan plan;
  plan.replicates = 100;
  plan.seed = 7;
  auto res = empirical_bootstrap(d, plan, {SubpopKey{{{"g", "b"}}}}, {MetricKind::auc()});
  REQUIRE(res.estimates.size() == 1);
  CHECK(res.estimates[0].n_missing > 0);
  CHECK(res.estimates[0].n_missing < 100);
}

TEST_CASE("empirical AUC interval width shrinks with sample size") {
  double prev_width = 10.0;
  for (std::size_t n : {50u, 200u, 800u}) {
    auto d = score_data(n, 1234);
    BootstrapPlan plan;
    plan.replicates = 120;
    plan.seed = 9;
    auto res = empirical_bootstrap(d, plan, {SubpopKey{}}, {MetricKind::auc()});
    const auto& iv = res.estimates[0].intervals[1];
    const double width = iv.hi - iv.lo;
    CHECK(width < prev_width);
    prev_width = width;
  }
}

TEST_CASE("bootstrap runs are reproducible") {
  auto d = score_data(120, 55);
  BootstrapPlan plan;
  plan.replicates = 30;
  plan.seed = 77;
  auto a = empirical_bootstrap(d, plan, {SubpopKey{}}, {MetricKind::auc()});
  auto b = empirical_bootstrap(d, plan, {SubpopKey{}}, {MetricKind::auc()});
  CHECK(a.estimates[0].replicates == b.estimates[0].replicates);
}
