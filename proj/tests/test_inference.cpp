#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "mbm/diagnostics.hpp"
#include "mbm/inference.hpp"
#include "mbm/model.hpp"
#include "mbm/nuts.hpp"

using namespace mbm;

namespace {

// Additive-structure synthetic data with known coefficients.
EvalDataset make_synthetic(std::size_t n, std::uint64_t seed, double noise_sd = 0.8) {
  EvalDataset d({{"g", {"a", "b"}}, {"r", {"p", "q", "w"}}}, {"x"});
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    EvalRecord rec;
    const int gc = static_cast<int>(rng.below(2));
    const int rc = static_cast<int>(rng.below(3));
    rec.attrs["g"] = gc == 0 ? "a" : "b";
    rec.attrs["r"] = rc == 0 ? "p" : (rc == 1 ? "q" : "w");
    const double x = rng.normal();
    rec.covariates["x"] = x;
    rec.label = rng.bernoulli(0.4) ? 1 : 0;
    rec.score = 0.5 + 0.7 * gc - 0.4 * (rc == 1) + 0.9 * (rc == 2) + 0.3 * x +
                1.1 * rec.label + noise_sd * rng.normal();
    d.append(rec);
  }
  return d;
}

double finite_diff_check(const ModelSpec& spec, const EvalDataset& d, bool non_centered,
                         std::uint64_t seed, int n_points = 20) {
  GaussianModel model(spec, d);
  detail::UnconstrainedPosterior target(model, non_centered);
  Rng rng(seed);
  double worst = 0.0;
  for (int rep = 0; rep < n_points; ++rep) {
    Eigen::VectorXd q = target.initial_point(rng);
    for (Eigen::Index i = 0; i < q.size(); ++i) q(i) += 0.3 * rng.normal();
    Eigen::VectorXd grad(q.size()), scratch(q.size());
    target(q, grad);
    for (Eigen::Index i = 0; i < q.size(); ++i) {
      const double h = 1e-5 * std::max(1.0, std::abs(q(i)));
      Eigen::VectorXd qp = q, qm = q;
      qp(i) += h;
      qm(i) -= h;
      const double fd = (target(qp, scratch) - target(qm, scratch)) / (2.0 * h);
      const double rel = std::abs(fd - grad(i)) / std::max(1.0, std::abs(grad(i)));
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

}  // namespace

TEST_CASE("log_likelihood matches the Gaussian density oracle") {
  EvalDataset d({{"g", {"a"}}}, {});
  EvalRecord rec;
  rec.attrs["g"] = "a";
  rec.label = 0;
  rec.score = 0.0;
  d.append(rec);

  auto spec = parse_formula("S ~ 1");
  GaussianModel model(spec, d);
  // layout: [b[intercept], sigma]
  Eigen::RowVectorXd p(2);
  p << 0.0, 1.0;
  // standard normal at 0
  CHECK_THAT(model.loglik_row(p)(0),
             Catch::Matchers::WithinAbs(-0.9189385332046727, 1e-12));
  // doubling sigma with s = mu lowers the density by log 2
  Eigen::RowVectorXd p2(2);
  p2 << 0.0, 2.0;
  CHECK_THAT(model.loglik_row(p)(0) - model.loglik_row(p2)(0),
             Catch::Matchers::WithinAbs(std::log(2.0), 1e-12));

  // random instances vs a hand-written logpdf
  auto d2 = make_synthetic(50, 11);
  auto spec2 = parse_formula("S ~ g + r + Y + x");
  GaussianModel m2(spec2, d2);
  Rng rng(5);
  Eigen::RowVectorXd pr(m2.layout().total);
  for (int rep = 0; rep < 20; ++rep) {
    for (int j = 0; j < m2.layout().total; ++j) pr(j) = rng.normal();
    pr(m2.layout().sigma_index) = std::exp(pr(m2.layout().sigma_index));
    auto ll = m2.loglik_row(pr);
    auto mu = m2.mu_row(pr);
    const double sigma = pr(m2.layout().sigma_index);
    for (std::size_t n = 0; n < d2.size(); ++n)
      CHECK_THAT(ll(static_cast<Eigen::Index>(n)),
                 Catch::Matchers::WithinAbs(
                     normal_logpdf(d2.score(n), mu(static_cast<Eigen::Index>(n)), sigma),
                     1e-12));
  }

  Eigen::RowVectorXd bad(3);
  bad.setZero();
  CHECK_THROWS_AS(m2.loglik_row(bad), ShapeError);
}

TEST_CASE("conjugate sampler recovers OLS under a flat-ish prior") {
  auto d = make_synthetic(2000, 42);
  PriorConfig prior;
  prior.fixed_coef_sd = 50.0;
  prior.intercept_sd = 50.0;
  auto spec = parse_formula("S ~ g + r + Y + x", "", prior);
  auto draws = sample_conjugate(spec, d, 2000, 123);

  GaussianModel model(spec, d);
  const auto& X = model.design().mean.fixed;
  Eigen::VectorXd ols =
      (X.transpose() * X).ldlt().solve(X.transpose() * model.response());

  const int P = model.layout().beta_count;
  for (int j = 0; j < P; ++j) {
    auto col = draws.params.col(j);
    const double mean = col.mean();
    const double sd = std::sqrt((col.array() - mean).square().sum() / (col.size() - 1));
    CHECK_THAT(mean, Catch::Matchers::WithinAbs(ols(j), 3.0 * sd / std::sqrt(2000.0) +
                                                             1e-3 * std::abs(ols(j)) + 5e-4));
  }
}

TEST_CASE("conjugate sampler recovers a constant response location") {
  EvalDataset d({{"g", {"a"}}}, {});
  for (int i = 0; i < 40; ++i) {
    EvalRecord rec;
    rec.attrs["g"] = "a";
    rec.label = i % 2;
    rec.score = 3.25 + 1e-6 * (i % 5);  // tiny jitter keeps sigma sampling sane
    d.append(rec);
  }
  auto spec = parse_formula("S ~ 1");
  auto draws = sample_conjugate(spec, d, 1000, 7);
  CHECK_THAT(draws.params.col(0).mean(), Catch::Matchers::WithinAbs(3.25, 0.01));
}

TEST_CASE("samplers are deterministic given the seed") {
  auto d = make_synthetic(120, 3);
  auto spec = parse_formula("S ~ g + x");
  auto a = sample_conjugate(spec, d, 50, 99);
  auto b = sample_conjugate(spec, d, 50, 99);
  CHECK(a.params == b.params);

  SamplerSettings st;
  st.warmup = 200;
  st.chains = 2;
  auto [m1, g1] = sample_mcmc(spec, d, 100, 99, st);
  auto [m2, g2] = sample_mcmc(spec, d, 100, 99, st);
  CHECK(m1.params == m2.params);
}

TEST_CASE("loglik cache is coherent with log_likelihood") {
  auto d = make_synthetic(60, 17);
  auto spec = parse_formula("S ~ g + Y");
  auto draws = sample_conjugate(spec, d, 20, 5);
  GaussianModel model(spec, d);
  for (int r = 0; r < 20; ++r) {
    auto ll = model.loglik_row(draws.params.row(r));
    for (Eigen::Index n = 0; n < ll.size(); ++n)
      CHECK(draws.loglik(r, n) == ll(n));
  }
}

TEST_CASE("analytic gradients match finite differences across model families") {
  auto d = make_synthetic(80, 29);
  CHECK(finite_diff_check(parse_formula("S ~ g + r + Y + x"), d, true, 1) < 1e-5);
  CHECK(finite_diff_check(parse_formula("S ~ x + (1 | (g+r)^2)"), d, true, 2) < 1e-5);
  CHECK(finite_diff_check(parse_formula("S ~ x + (1 | g:r)"), d, false, 3) < 1e-5);
  CHECK(finite_diff_check(parse_formula("S ~ g + x + (1 | r)", "sigma ~ g + (1 | r)"), d,
                          true, 4) < 1e-5);
}

TEST_CASE("NUTS samples a standard normal correctly") {
  const int dim = 5;
  auto target = [](const Eigen::VectorXd& q, Eigen::VectorXd& grad) {
    grad = -q;
    return -0.5 * q.squaredNorm();
  };
  Rng rng(21);
  NutsStats stats;
  Eigen::VectorXd q0 = Eigen::VectorXd::Constant(dim, 0.5);
  auto draws = nuts_sample(target, q0, 500, 2000, rng, stats);
  REQUIRE(draws.rows() == 2000);
  CHECK(stats.divergences == 0);
  CHECK(stats.accept_rate > 0.6);

  auto ess = effective_sample_size(draws, 1);
  for (int k = 0; k < dim; ++k) {
    const double mean = draws.col(k).mean();
    const double sd =
        std::sqrt((draws.col(k).array() - mean).square().sum() / (draws.rows() - 1));
    const double mcse = sd / std::sqrt(std::max(1.0, ess(k)));
    CHECK(std::abs(mean) < 3.5 * mcse + 0.01);
    CHECK_THAT(sd, Catch::Matchers::WithinAbs(1.0, 0.12));
  }
}

TEST_CASE("HMC and conjugate sampler agree on a fixed-effects model") {
  auto d = make_synthetic(400, 5);
  auto spec = parse_formula("S ~ g + r + Y + x");
  auto conj = sample_conjugate(spec, d, 4000, 11);
  SamplerSettings st;
  st.warmup = 600;
  st.chains = 2;
  auto [hmc, diag] = sample_mcmc(spec, d, 2000, 13, st);

  CHECK(diag.max_rhat < 1.05);
  auto ess_c = effective_sample_size(conj.params, 1);
  const int P = hmc.layout.beta_count;
  for (int j = 0; j <= P; ++j) {  // betas and sigma
    auto cc = conj.params.col(j);
    auto hc = hmc.params.col(j);
    const double mc = cc.mean(), mh = hc.mean();
    const double sdc = std::sqrt((cc.array() - mc).square().sum() / (cc.size() - 1));
    const double sdh = std::sqrt((hc.array() - mh).square().sum() / (hc.size() - 1));
    const double mcse_c = sdc / std::sqrt(std::max(1.0, ess_c(j)));
    const double mcse_h = sdh / std::sqrt(std::max(1.0, diag.min_ess));
    const double tol = 3.0 * std::sqrt(mcse_c * mcse_c + mcse_h * mcse_h) + 1e-4;
    INFO("param " << hmc.param_names[static_cast<std::size_t>(j)]);
    CHECK_THAT(mh, Catch::Matchers::WithinAbs(mc, tol));
  }
}

TEST_CASE("non-centered and centered parameterizations agree") {
  auto d = make_synthetic(250, 31);
  auto spec = parse_formula("S ~ x + (1 | g) + (1 | r)");
  SamplerSettings nc;
  nc.warmup = 800;
  nc.chains = 2;
  SamplerSettings cc = nc;
  cc.non_centered = false;
  auto [dn, gn] = sample_mcmc(spec, d, 2400, 7, nc);
  auto [dc, gc] = sample_mcmc(spec, d, 2400, 9, cc);

  for (int j = 0; j < dn.layout.total; ++j) {
    auto a = dn.params.col(j);
    auto b = dc.params.col(j);
    const double ma = a.mean(), mb = b.mean();
    const double sda = std::sqrt((a.array() - ma).square().sum() / (a.size() - 1));
    const double sdb = std::sqrt((b.array() - mb).square().sum() / (b.size() - 1));
    const double mcse = std::sqrt(sda * sda / std::max(40.0, gn.min_ess) +
                                  sdb * sdb / std::max(40.0, gc.min_ess));
    INFO("param " << dn.param_names[static_cast<std::size_t>(j)]);
    CHECK_THAT(mb, Catch::Matchers::WithinAbs(ma, 3.0 * mcse + 0.02));
  }
}

TEST_CASE("posterior intervals cover generating coefficients (smoke)") {
  // 90% intervals should cover the truth in at least 80% of replicated fits.
  int covered = 0, total = 0;
  for (int rep = 0; rep < 50; ++rep) {
    auto d = make_synthetic(300, 1000 + static_cast<std::uint64_t>(rep));
    auto spec = parse_formula("S ~ g + r + Y + x");
    auto draws = sample_conjugate(spec, d, 500, 2000 + static_cast<std::uint64_t>(rep), 300);
    const std::vector<double> truth = {0.5, 0.7, -0.4, 0.9, 1.1, 0.3};
    for (int j = 0; j < 6; ++j) {
      std::vector<double> col(draws.params.col(j).data(),
                              draws.params.col(j).data() + draws.params.rows());
      const double lo = quantile(col, 0.05), hi = quantile(col, 0.95);
      if (truth[static_cast<std::size_t>(j)] >= lo &&
          truth[static_cast<std::size_t>(j)] <= hi)
        ++covered;
      ++total;
    }
  }
  CHECK(static_cast<double>(covered) / total >= 0.8);
}

TEST_CASE("sampler preconditions are enforced") {
  auto d = make_synthetic(50, 2);
  CHECK_THROWS_AS(sample_conjugate(parse_formula("S ~ (1 | g)"), d, 10, 1), ConfigError);
  CHECK_THROWS_AS(sample_conjugate(parse_formula("S ~ g", "sigma ~ g"), d, 10, 1),
                  ConfigError);
  CHECK_THROWS_AS(sample_conjugate(parse_formula("S ~ g"), d, 0, 1), ConfigError);
}
