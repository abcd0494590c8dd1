#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "mbm/checking.hpp"

using namespace mbm;

namespace {

EvalDataset additive_data(std::size_t n, std::uint64_t seed) {
  EvalDataset d({{"g", {"a", "b"}}, {"r", {"p", "q"}}}, {});
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    EvalRecord rec;
    const int gc = static_cast<int>(rng.below(2));
    const int rc = static_cast<int>(rng.below(2));
    rec.attrs["g"] = gc == 0 ? "a" : "b";
    rec.attrs["r"] = rc == 0 ? "p" : "q";
    rec.label = rng.bernoulli(0.4) ? 1 : 0;
    rec.score = 0.4 * gc - 0.3 * rc + 1.2 * rec.label + 0.6 * rng.normal();
    d.append(rec);
  }
  return d;
}

}  // namespace

TEST_CASE("kde log density follows the kernel-sum formula") {
  std::vector<double> train{-1.0, 1.0};
  KdeDensity kde(train);
  // Direct evaluation of the two-kernel sum at the midpoint.
  const double h = kde.bandwidth();
  const double phi = std::exp(-0.5 / (h * h)) / std::sqrt(2.0 * M_PI);
  const double expected = std::log(phi / h);  // both kernels contribute equally
  CHECK_THAT(kde_logpdf(train, 0.0), Catch::Matchers::WithinAbs(expected, 1e-12));

  // Bandwidth follows Silverman's rule on this sample.
  const double sd = sd_of(train);
  const double iqr = 1.0;  // type-7 quartiles of {-1,1} are -0.5 and 0.5
  const double silverman = 0.9 * std::min(sd, iqr / 1.34) * std::pow(2.0, -0.2);
  CHECK_THAT(h, Catch::Matchers::WithinAbs(silverman, 1e-12));
}

TEST_CASE("kde density integrates to one") {
  Rng rng(4);
  std::vector<double> train;
  for (int i = 0; i < 40; ++i) train.push_back(0.7 * rng.normal() + 0.2);
  KdeDensity kde(train);
  double lo = -8.0, hi = 8.0;
  const int steps = 200000;
  double acc = 0.0;
  for (int i = 0; i <= steps; ++i) {
    const double q = lo + (hi - lo) * i / steps;
    const double w = (i == 0 || i == steps) ? 0.5 : 1.0;
    acc += w * std::exp(kde.logpdf(q));
  }
  acc *= (hi - lo) / steps;
  CHECK_THAT(acc, Catch::Matchers::WithinAbs(1.0, 1e-6));
}

TEST_CASE("kde handles zero-variance training sets") {
  std::vector<double> train(10, 0.0);
  KdeDensity kde(train);
  CHECK(std::isfinite(kde.logpdf(0.0)));
  CHECK(kde.bandwidth() > 0.0);
  CHECK_THROWS_AS(KdeDensity({1.0}), InsufficientDataError);
}

TEST_CASE("well-specified model beats the KDE baseline in most cells") {
  auto d = additive_data(2000, 77);
  auto spec = parse_formula("S ~ g + r + Y");
  CvSettings cv;
  auto checks = cv_compare(spec, d, {"g", "r"}, cv, 123);
  REQUIRE(checks.size() == 8);  // 4 cells x 2 classes

  std::size_t scored = 0;
  int model_wins = 0;
  for (const auto& c : checks) {
    scored += c.n_scored;
    if (c.model_ll > c.kde_ll) ++model_wins;
    CHECK_FALSE(c.fallback());  // no verdict should favor the KDE here
  }
  CHECK(scored == d.size());  // every held-out record scored exactly once
  CHECK(model_wins >= 7);     // >= 80% of cells
}

TEST_CASE("a badly misspecified model falls back") {
  // Scores depend strongly on g, model ignores all structure and the noise
  // scale is wrong within cells.
  EvalDataset d({{"g", {"a", "b"}}}, {});
  Rng rng(5);
  for (int i = 0; i < 800; ++i) {
    EvalRecord rec;
    const int gc = i % 2;
    rec.attrs["g"] = gc == 0 ? "a" : "b";
    rec.label = rng.bernoulli(0.5) ? 1 : 0;
    rec.score = 6.0 * gc + 0.3 * rng.normal();
    d.append(rec);
  }
  auto spec = parse_formula("S ~ 1");  // pools both modes into one Gaussian
  CvSettings cv;
  auto checks = cv_compare(spec, d, {"g"}, cv, 9);
  int fallbacks = 0;
  for (const auto& c : checks)
    if (c.fallback()) ++fallbacks;
  CHECK(fallbacks == static_cast<int>(checks.size()));
}

TEST_CASE("cv_compare is deterministic given the seed") {
  auto d = additive_data(400, 11);
  auto spec = parse_formula("S ~ g + r + Y");
  CvSettings cv;
  cv.fit_draws = 300;
  auto a = cv_compare(spec, d, {"g"}, cv, 55);
  auto b = cv_compare(spec, d, {"g"}, cv, 55);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].model_ll == b[i].model_ll);
    CHECK(a[i].kde_ll == b[i].kde_ll);
    CHECK(a[i].verdict == b[i].verdict);
  }
}

TEST_CASE("leave-one-out agrees with K=5 on a well-separated case") {
  auto d = additive_data(30, 21);
  auto spec = parse_formula("S ~ Y");
  CvSettings cv5;
  cv5.fit_draws = 400;
  CvSettings loo = cv5;
  loo.folds = 30;
  auto a = cv_compare(spec, d, {"g"}, cv5, 3);
  auto b = cv_compare(spec, d, {"g"}, loo, 3);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].verdict == b[i].verdict);
}

TEST_CASE("apply_fallback merges per cell with provenance") {
  SubpopKey ka{{{"g", "a"}}}, kb{{{"g", "b"}}};
  auto mk = [](const SubpopKey& k, double v, const char* prov) {
    PointEstimate e;
    e.key = k;
    e.metric = MetricKind::auc();
    e.value = v;
    e.provenance = prov;
    return e;
  };
  std::vector<PointEstimate> mbm{mk(ka, 0.8, "mbm"), mk(kb, 0.7, "mbm")};
  std::vector<PointEstimate> emp{mk(ka, 0.75, "empirical"), mk(kb, 0.65, "empirical")};

  auto mkcheck = [](const SubpopKey& k, int y, bool fb) {
    CellCheckResult c;
    c.key = k;
    c.label = y;
    c.verdict = fb ? CellCheckResult::Verdict::Fallback : CellCheckResult::Verdict::ModelOk;
    return c;
  };

  SECTION("all ok: output equals MBM input") {
    auto merged = apply_fallback(
        mbm, {mkcheck(ka, 0, false), mkcheck(kb, 1, false)}, emp);
    CHECK(*merged[0].value == 0.8);
    CHECK(merged[0].provenance == "mbm");
    CHECK(*merged[1].value == 0.7);
  }
  SECTION("all fallback: output equals empirical input") {
    auto merged = apply_fallback(
        mbm, {mkcheck(ka, 1, true), mkcheck(kb, 0, true)}, emp);
    CHECK(*merged[0].value == 0.75);
    CHECK(merged[0].provenance == "fallback");
    CHECK(*merged[1].value == 0.65);
  }
  SECTION("mixed: any flagged class stratum trips the cell") {
    auto merged = apply_fallback(
        mbm, {mkcheck(ka, 0, false), mkcheck(ka, 1, true), mkcheck(kb, 1, false)}, emp);
    CHECK(merged[0].provenance == "fallback");
    CHECK(merged[1].provenance == "mbm");
  }
  SECTION("missing empirical estimate for a flagged cell is an error") {
    std::vector<PointEstimate> partial{mk(ka, 0.75, "empirical")};
    CHECK_THROWS_AS(apply_fallback(mbm, {mkcheck(kb, 0, true)}, partial), Error);
  }
}
