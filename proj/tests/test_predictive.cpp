#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "mbm/predictive.hpp"

using namespace mbm;

namespace {

EvalDataset two_group_data(std::size_t n, std::uint64_t seed) {
  EvalDataset d({{"g", {"a", "b"}}, {"h", {"x", "y"}}}, {});
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    EvalRecord rec;
    const bool ga = rng.bernoulli(0.5);
    rec.attrs["g"] = ga ? "a" : "b";
    rec.attrs["h"] = ga ? "x" : "y";  // h mirrors g exactly
    rec.label = rng.bernoulli(0.4) ? 1 : 0;
    rec.score = (ga ? 0.4 : -0.2) + 1.2 * rec.label + 0.7 * rng.normal();
    d.append(rec);
  }
  return d;
}

}  // namespace

TEST_CASE("zero-noise draws with matching means reproduce the observed scores") {
  EvalDataset d({{"g", {"a", "b"}}}, {});
  EvalRecord rec;
  rec.attrs["g"] = "a";
  rec.label = 0;
  rec.score = 1.5;
  d.append(rec);
  rec.attrs["g"] = "b";
  rec.score = -2.25;
  d.append(rec);

  auto spec = parse_formula("S ~ g");
  GaussianModel model(spec, d);
  PosteriorDraws draws;
  draws.layout = model.layout();
  draws.param_names = model.layout().names;
  draws.spec_hash = model.spec_hash();
  draws.params.resize(3, 3);  // [intercept, g[b], sigma]
  for (int r = 0; r < 3; ++r) {
    draws.params(r, 0) = 1.5;
    draws.params(r, 1) = -3.75;
    draws.params(r, 2) = 0.0;
  }
  auto sims = simulate_predictive(spec, draws, d, 77);
  for (int r = 0; r < 3; ++r) {
    CHECK(sims.sims(0, r) == 1.5);
    CHECK(sims.sims(1, r) == -2.25);
  }
}

TEST_CASE("stale draws are rejected") {
  auto d = two_group_data(40, 1);
  auto spec = parse_formula("S ~ g");
  auto draws = sample_conjugate(spec, d, 50, 3);
  auto d2 = two_group_data(40, 2);  // different data, same schema
  CHECK_THROWS_AS(simulate_predictive(spec, draws, d2, 5), StalenessError);
  auto spec2 = parse_formula("S ~ g + Y");
  CHECK_THROWS_AS(simulate_predictive(spec2, draws, d, 5), StalenessError);
}

TEST_CASE("per-draw column means track the conditional means") {
  auto d = two_group_data(400, 9);
  auto spec = parse_formula("S ~ g + Y");
  auto draws = sample_conjugate(spec, d, 200, 21);
  auto sims = simulate_predictive(spec, draws, d, 22);
  GaussianModel model(spec, d);
  for (int r = 0; r < 200; r += 40) {
    auto mu = model.mu_row(draws.params.row(r));
    const double sigma = draws.params(r, model.layout().sigma_index);
    const double expected = mu.mean();
    const double got = sims.sims.col(r).mean();
    CHECK_THAT(got, Catch::Matchers::WithinAbs(
                        expected, 3.0 * sigma / std::sqrt(static_cast<double>(d.size()))));
  }
}

TEST_CASE("pooled predictive CDF matches a quadrature oracle") {
  // Intercept-only model; the posterior predictive CDF is integrated
  // numerically over a dense (beta, sigma) grid of the exact posterior.
  EvalDataset d({{"g", {"a"}}}, {});
  Rng gen(123);
  for (int i = 0; i < 50; ++i) {
    EvalRecord rec;
    rec.attrs["g"] = "a";
    rec.label = i % 2;
    rec.score = 0.3 + 0.9 * gen.normal();
    d.append(rec);
  }
  auto spec = parse_formula("S ~ 1");
  auto draws = sample_conjugate(spec, d, 4000, 31);
  auto sims = simulate_predictive(spec, draws, d, 32);

  // Exact posterior on a grid: p(beta, sigma | y) up to a constant.
  const auto& y = d.scores();
  const double ybar = mean_of(y);
  const double ysd = sd_of(y);
  const int nb = 220, ns = 220;
  std::vector<double> betas(nb), sigmas(ns);
  for (int i = 0; i < nb; ++i)
    betas[i] = ybar - 6.0 * ysd / std::sqrt(50.0) +
               12.0 * ysd / std::sqrt(50.0) * i / (nb - 1.0);
  for (int j = 0; j < ns; ++j)
    sigmas[j] = ysd * std::exp(-1.2 + 2.4 * j / (ns - 1.0));
  const PriorConfig prior;
  Eigen::MatrixXd logpost(nb, ns);
  for (int i = 0; i < nb; ++i)
    for (int j = 0; j < ns; ++j) {
      double lp = normal_logpdf(betas[i], 0.0, prior.intercept_sd) +
                  half_t_logpdf_unnorm(sigmas[j], 3.0, prior.resid_sd_scale) +
                  std::log(sigmas[j]);  // log-uniform grid measure correction
      for (double v : y) lp += normal_logpdf(v, betas[i], sigmas[j]);
      logpost(i, j) = lp;
    }
  const double lmax = logpost.maxCoeff();
  Eigen::MatrixXd w = (logpost.array() - lmax).exp();
  const double wsum = w.sum();

  auto oracle_cdf = [&](double q) {
    double acc = 0.0;
    for (int i = 0; i < nb; ++i)
      for (int j = 0; j < ns; ++j)
        acc += w(i, j) * normal_cdf((q - betas[i]) / sigmas[j]);
    return acc / wsum;
  };

  std::vector<double> pooled(sims.sims.data(), sims.sims.data() + sims.sims.size());
  std::sort(pooled.begin(), pooled.end());
  for (double p : {0.1, 0.3, 0.5, 0.7, 0.9}) {
    const double q = pooled[static_cast<std::size_t>(p * (pooled.size() - 1))];
    const double empirical = p;
    CHECK_THAT(oracle_cdf(q), Catch::Matchers::WithinAbs(empirical, 0.01));
  }
}

TEST_CASE("R=1 reduces MBM to the empirical estimator on the simulated column") {
  auto d = two_group_data(120, 5);
  auto spec = parse_formula("S ~ g + Y");
  auto draws = sample_conjugate(spec, d, 1, 3);
  auto sims = simulate_predictive(spec, draws, d, 8);

  EvalDataset replaced = d;
  std::vector<double> col(sims.sims.data(), sims.sims.data() + sims.sims.rows());
  replaced.set_scores(col);

  SubpopKey key{{{"g", "a"}}};
  for (auto m : {MetricKind::auc(), MetricKind::fpr(0.0)}) {
    CHECK(mbm_estimate(sims, key, m) == empirical_estimate(replaced, key, m));
  }
}

TEST_CASE("keys selecting the same rows give identical MBM estimates") {
  auto d = two_group_data(200, 13);
  auto spec = parse_formula("S ~ g + Y");
  auto draws = sample_conjugate(spec, d, 300, 17);
  auto sims = simulate_predictive(spec, draws, d, 19);
  // g=a and h=x bind the same records by construction.
  CHECK(mbm_estimate(sims, SubpopKey{{{"g", "a"}}}, MetricKind::auc()) ==
        mbm_estimate(sims, SubpopKey{{{"h", "x"}}}, MetricKind::auc()));
}

TEST_CASE("MBM estimates stay in [0,1] and stabilize with more draws") {
  auto d = two_group_data(300, 23);
  auto spec = parse_formula("S ~ g + Y");
  auto draws = sample_conjugate(spec, d, 4000, 29);
  auto sims = simulate_predictive(spec, draws, d, 30);

  PredictiveSims head;
  head.sims = sims.sims.leftCols(500);
  head.source = sims.source;

  for (auto m : {MetricKind::auc(), MetricKind::fpr(0.2), MetricKind::ppv(0.2)}) {
    const double full = mbm_estimate(sims, SubpopKey{}, m);
    const double part = mbm_estimate(head, SubpopKey{}, m);
    CHECK(full >= 0.0);
    CHECK(full <= 1.0);
    CHECK_THAT(part, Catch::Matchers::WithinAbs(full, 0.01));
  }
}

TEST_CASE("pooled AUC tracks the mean of per-column AUCs") {
  auto d = two_group_data(250, 33);
  auto spec = parse_formula("S ~ g + Y");
  auto draws = sample_conjugate(spec, d, 400, 41);
  auto sims = simulate_predictive(spec, draws, d, 43);

  const double pooled = mbm_estimate(sims, SubpopKey{}, MetricKind::auc());
  double acc = 0.0;
  for (Eigen::Index r = 0; r < sims.sims.cols(); ++r) {
    ScoreSample col;
    for (std::size_t n = 0; n < d.size(); ++n)
      (d.label(n) ? col.pos : col.neg).push_back(sims.sims(static_cast<Eigen::Index>(n), r));
    acc += auc_u_statistic(col);
  }
  CHECK_THAT(pooled, Catch::Matchers::WithinAbs(acc / sims.sims.cols(), 0.02));
}

TEST_CASE("mbm_all fans out over cells and records per-cell failures") {
  EvalDataset d({{"g", {"a", "b"}}}, {});
  Rng rng(3);
  for (int i = 0; i < 60; ++i) {
    EvalRecord rec;
    rec.attrs["g"] = i % 3 == 0 ? "b" : "a";
    rec.label = (i % 3 != 0) && rng.bernoulli(0.5) ? 1 : 0;  // g=b has no positives
    rec.score = 0.2 * rec.label + rng.normal();
    d.append(rec);
  }
  auto spec = parse_formula("S ~ g");
  auto draws = sample_conjugate(spec, d, 100, 7);
  auto sims = simulate_predictive(spec, draws, d, 9);

  auto ests = mbm_all(sims, {"g"}, {MetricKind::auc(), MetricKind::fpr(0.0)});
  REQUIRE(ests.size() == 4);
  int failures = 0;
  for (const auto& e : ests) {
    if (!e.value) {
      ++failures;
      CHECK(e.metric == MetricKind::auc());
      CHECK(e.key.bindings.at("g") == "b");
      CHECK_FALSE(e.error.empty());
    }
  }
  CHECK(failures == 1);

  auto again = mbm_all(sims, {"g"}, {MetricKind::auc(), MetricKind::fpr(0.0)});
  for (std::size_t i = 0; i < ests.size(); ++i) {
    CHECK(ests[i].value.has_value() == again[i].value.has_value());
    if (ests[i].value) CHECK(*ests[i].value == *again[i].value);
  }
}
