#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <algorithm>
#include <cstdint>
#include <future>
#include <string>
#include <vector>

#include "mbm/dataset.hpp"
#include "mbm/diagnostics.hpp"
#include "mbm/errors.hpp"
#include "mbm/formula.hpp"
#include "mbm/model.hpp"
#include "mbm/nuts.hpp"
#include "mbm/rng.hpp"
#include "mbm/slice.hpp"
#include "mbm/stats.hpp"

namespace mbm {

inline constexpr double kHalfTDf = 3.0;

struct SamplerSettings {
  int warmup = 1000;
  int chains = 4;
  double target_accept = 0.8;
  int max_depth = 10;
  bool adapt_mass = true;
  bool non_centered = true;  // u = tau * u_tilde parameterization
};

struct SamplerDiagnostics {
  int divergence_count = 0;
  double accept_rate = 1.0;
  std::vector<std::string> param_names;
  Eigen::VectorXd split_rhat;
  double max_rhat = 1.0;
  double min_ess = 0.0;
  double step_size = 0.0;
  std::vector<std::string> warnings;
};

// The set of posterior parameter draws for one evaluation model, with the
// per-record log-likelihood cache that drives importance-weighted
// bootstrapping and predictive checks.
struct PosteriorDraws {
  Eigen::MatrixXd params;  // R x K, natural scale (see ParamLayout)
  std::vector<std::string> param_names;
  ParamLayout layout;
  Eigen::MatrixXd loglik;  // R x N
  std::uint64_t spec_hash = 0;
  int n_chains = 1;

  Eigen::Index draw_count() const { return params.rows(); }
};

namespace detail {

inline Eigen::VectorXd beta_prior_sds(const PriorConfig& prior, int p) {
  Eigen::VectorXd sds = Eigen::VectorXd::Constant(p, prior.fixed_coef_sd);
  if (p > 0) sds(0) = prior.intercept_sd;  // the intercept column is first
  return sds;
}

// Log posterior (up to a constant) and gradient over the unconstrained
// parameter vector, response centered internally. Layout:
//   [ beta | u~ per mean group | log tau per mean group |
//     log sigma                              (homoscedastic)
//     gamma | u~^s per group | log tau^s     (heteroscedastic) ]
class UnconstrainedPosterior {
 public:
  UnconstrainedPosterior(const GaussianModel& model, bool non_centered)
      : model_(model), non_centered_(non_centered) {
    const auto& y = model.response();
    y_mean_ = y.mean();
    yc_ = y.array() - y_mean_;
    yc_sd_ = std::max(std::sqrt(yc_.squaredNorm() /
                                std::max<Eigen::Index>(1, yc_.size() - 1)),
                      1e-3);
    const auto& lay = model.layout();
    const auto& des = model.design();
    p_ = lay.beta_count;
    beta_sds_ = beta_prior_sds(model.spec().prior, p_);
    int at = p_;
    for (const auto& g : des.mean.groups) {
      u_offsets_.push_back(at);
      u_sizes_.push_back(g.n_levels());
      at += g.n_levels();
    }
    lt_offset_ = at;
    at += static_cast<int>(des.mean.groups.size());
    if (!lay.hetero) {
      ls_offset_ = at++;
    } else {
      gamma_offset_ = at;
      pg_ = lay.gamma_count;
      at += pg_;
      for (const auto& g : des.sigma->groups) {
        us_offsets_.push_back(at);
        us_sizes_.push_back(g.n_levels());
        at += g.n_levels();
      }
      lts_offset_ = at;
      at += static_cast<int>(des.sigma->groups.size());
    }
    dim_ = at;
  }

  int dim() const { return dim_; }

  Eigen::VectorXd initial_point(Rng& rng) const {
    Eigen::VectorXd q = Eigen::VectorXd::Zero(dim_);
    const double ls0 = std::log(yc_sd_);
    if (ls_offset_ >= 0) q(ls_offset_) = ls0;
    if (pg_ > 0) q(gamma_offset_) = ls0;
    for (std::size_t g = 0; g < u_offsets_.size(); ++g) q(lt_offset_ + g) = std::log(0.5);
    for (std::size_t g = 0; g < us_offsets_.size(); ++g) q(lts_offset_ + g) = std::log(0.5);
    for (int i = 0; i < dim_; ++i) q(i) += 0.2 * (rng.uniform() - 0.5);
    return q;
  }

  double operator()(const Eigen::VectorXd& q, Eigen::VectorXd& grad) const {
    const auto& des = model_.design();
    const auto& prior = model_.spec().prior;
    const Eigen::Index N = yc_.size();
    grad.setZero(dim_);
    double lp = 0.0;

    // Conditional mean.
    Eigen::VectorXd mu = des.mean.fixed * q.head(p_);
    std::vector<double> tau(u_offsets_.size());
    for (std::size_t g = 0; g < u_offsets_.size(); ++g) {
      tau[g] = std::exp(q(lt_offset_ + g));
      const auto& cells = des.mean.groups[g].cell;
      const double scale = non_centered_ ? tau[g] : 1.0;
      for (Eigen::Index n = 0; n < N; ++n)
        mu(n) += scale * q(u_offsets_[g] + cells[n]);
    }
    Eigen::VectorXd r = yc_ - mu;

    // Log-likelihood and residual-driven gradients.
    Eigen::VectorXd w(N);  // r_n / sigma_n^2
    Eigen::VectorXd v;     // r_n^2 / sigma_n^2 - 1 (heteroscedastic path)
    if (ls_offset_ >= 0) {
      const double ls = q(ls_offset_);
      const double sigma = std::exp(ls);
      const double inv2 = std::exp(-2.0 * ls);
      const double rsq = r.squaredNorm();
      lp += -0.5 * kLogTwoPi * N - N * ls - 0.5 * inv2 * rsq;
      w = inv2 * r;
      grad(ls_offset_) += inv2 * rsq - N;
      // half-t prior on sigma with log-transform Jacobian
      lp += half_t_logpdf_unnorm(sigma, kHalfTDf, prior.resid_sd_scale) + ls;
      grad(ls_offset_) +=
          sigma * half_t_dlogpdf(sigma, kHalfTDf, prior.resid_sd_scale) + 1.0;
    } else {
      Eigen::VectorXd eta = des.sigma->fixed * q.segment(gamma_offset_, pg_);
      std::vector<double> taus(us_offsets_.size());
      for (std::size_t g = 0; g < us_offsets_.size(); ++g) {
        taus[g] = std::exp(q(lts_offset_ + g));
        const auto& cells = des.sigma->groups[g].cell;
        for (Eigen::Index n = 0; n < N; ++n)
          eta(n) += taus[g] * q(us_offsets_[g] + cells[n]);
      }
      Eigen::ArrayXd inv2 = (-2.0 * eta.array()).exp();
      w = (r.array() * inv2).matrix();
      v = (r.array().square() * inv2 - 1.0).matrix();
      lp += -0.5 * kLogTwoPi * N - eta.sum() - 0.5 * (r.array().square() * inv2).sum();
      grad.segment(gamma_offset_, pg_) += des.sigma->fixed.transpose() * v;
      for (std::size_t g = 0; g < us_offsets_.size(); ++g) {
        const auto& cells = des.sigma->groups[g].cell;
        Eigen::VectorXd sv = Eigen::VectorXd::Zero(us_sizes_[g]);
        for (Eigen::Index n = 0; n < N; ++n) sv(cells[n]) += v(n);
        auto ublock = q.segment(us_offsets_[g], us_sizes_[g]);
        grad.segment(us_offsets_[g], us_sizes_[g]) += taus[g] * sv;
        grad(lts_offset_ + g) += taus[g] * sv.dot(ublock);
      }
      // gamma prior N(0, sigma_coef_sd^2)
      auto gamma = q.segment(gamma_offset_, pg_);
      const double gs2 = prior.sigma_coef_sd * prior.sigma_coef_sd;
      lp += -0.5 * gamma.squaredNorm() / gs2;
      grad.segment(gamma_offset_, pg_) -= gamma / gs2;
      for (std::size_t g = 0; g < us_offsets_.size(); ++g) {
        auto ublock = q.segment(us_offsets_[g], us_sizes_[g]);
        lp += -0.5 * ublock.squaredNorm();
        grad.segment(us_offsets_[g], us_sizes_[g]) -= ublock;
        lp += half_t_logpdf_unnorm(taus[g], kHalfTDf, prior.group_sd_scale) +
              q(lts_offset_ + g);
        grad(lts_offset_ + g) +=
            taus[g] * half_t_dlogpdf(taus[g], kHalfTDf, prior.group_sd_scale) + 1.0;
      }
    }

    grad.head(p_) += des.mean.fixed.transpose() * w;

    // Mean-model random intercepts.
    for (std::size_t g = 0; g < u_offsets_.size(); ++g) {
      const auto& cells = des.mean.groups[g].cell;
      Eigen::VectorXd su = Eigen::VectorXd::Zero(u_sizes_[g]);
      for (Eigen::Index n = 0; n < N; ++n) su(cells[n]) += w(n);
      auto ublock = q.segment(u_offsets_[g], u_sizes_[g]);
      if (non_centered_) {
        grad.segment(u_offsets_[g], u_sizes_[g]) += tau[g] * su;
        grad(lt_offset_ + g) += tau[g] * su.dot(ublock);
        lp += -0.5 * ublock.squaredNorm();
        grad.segment(u_offsets_[g], u_sizes_[g]) -= ublock;
      } else {
        grad.segment(u_offsets_[g], u_sizes_[g]) += su;
        const double inv_tau2 = std::exp(-2.0 * q(lt_offset_ + g));
        lp += -static_cast<double>(u_sizes_[g]) * q(lt_offset_ + g) -
              0.5 * inv_tau2 * ublock.squaredNorm();
        grad.segment(u_offsets_[g], u_sizes_[g]) -= inv_tau2 * ublock;
        grad(lt_offset_ + g) +=
            inv_tau2 * ublock.squaredNorm() - static_cast<double>(u_sizes_[g]);
      }
      lp += half_t_logpdf_unnorm(tau[g], kHalfTDf, prior.group_sd_scale) +
            q(lt_offset_ + g);
      grad(lt_offset_ + g) +=
          tau[g] * half_t_dlogpdf(tau[g], kHalfTDf, prior.group_sd_scale) + 1.0;
    }

    // Fixed-coefficient priors.
    for (int j = 0; j < p_; ++j) {
      const double s2 = beta_sds_(j) * beta_sds_(j);
      lp += -0.5 * q(j) * q(j) / s2;
      grad(j) -= q(j) / s2;
    }
    return lp;
  }

  // Unconstrained draw -> natural-scale parameter record (ParamLayout order),
  // with the intercept un-centered back to the response scale.
  Eigen::RowVectorXd to_natural(const Eigen::VectorXd& q) const {
    const auto& lay = model_.layout();
    Eigen::RowVectorXd out(lay.total);
    out.segment(lay.beta_offset, lay.beta_count) = q.head(p_).transpose();
    out(lay.beta_offset) += y_mean_;
    for (std::size_t g = 0; g < u_offsets_.size(); ++g) {
      const double tau = std::exp(q(lt_offset_ + g));
      const double scale = non_centered_ ? tau : 1.0;
      out.segment(lay.mean_groups[g].offset, u_sizes_[g]) =
          scale * q.segment(u_offsets_[g], u_sizes_[g]).transpose();
      out(lay.tau_offset + static_cast<int>(g)) = tau;
    }
    if (!lay.hetero) {
      out(lay.sigma_index) = std::exp(q(ls_offset_));
    } else {
      out.segment(lay.gamma_offset, lay.gamma_count) =
          q.segment(gamma_offset_, pg_).transpose();
      for (std::size_t g = 0; g < us_offsets_.size(); ++g) {
        const double tau = std::exp(q(lts_offset_ + g));
        out.segment(lay.sigma_groups[g].offset, us_sizes_[g]) =
            tau * q.segment(us_offsets_[g], us_sizes_[g]).transpose();
        out(lay.sigma_tau_offset + static_cast<int>(g)) = tau;
      }
    }
    return out;
  }

 private:
  const GaussianModel& model_;
  bool non_centered_;
  double y_mean_ = 0.0, yc_sd_ = 1.0;
  Eigen::VectorXd yc_;
  Eigen::VectorXd beta_sds_;
  int dim_ = 0, p_ = 0, pg_ = 0;
  std::vector<int> u_offsets_, u_sizes_, us_offsets_, us_sizes_;
  int lt_offset_ = 0, ls_offset_ = -1, gamma_offset_ = 0, lts_offset_ = 0;
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Conjugate Gibbs sampler (fixed effects, homoscedastic)
// ---------------------------------------------------------------------------
//
// Alternates beta | sigma (exact Gaussian draw from the penalized normal
// system) with sigma | beta (slice sampling under the half-Student-t prior).
// Exact-form alternation is much cheaper than HMC and is the fast path for
// bootstrap refits.
inline PosteriorDraws sample_conjugate(const ModelSpec& spec, const EvalDataset& d,
                                       int n_draws, std::uint64_t seed,
                                       int warmup = 1000) {
  if (spec.has_random_effects())
    throw ConfigError("conjugate sampler requires a model without random effects");
  if (spec.heteroscedastic())
    throw ConfigError("conjugate sampler requires a homoscedastic model");
  if (n_draws < 1) throw ConfigError("draw count must be >= 1");

  GaussianModel model(spec, d);
  const auto& X = model.design().mean.fixed;
  const Eigen::Index N = X.rows();
  const int P = static_cast<int>(X.cols());
  const double y_mean = model.response().mean();
  Eigen::VectorXd yc = model.response().array() - y_mean;

  Eigen::MatrixXd xtx = X.transpose() * X;
  Eigen::VectorXd xty = X.transpose() * yc;
  const double yty = yc.squaredNorm();
  Eigen::VectorXd prior_sds = detail::beta_prior_sds(spec.prior, P);
  Eigen::VectorXd prior_prec = prior_sds.array().square().inverse();

  Rng rng(seed);
  const double resid_scale = spec.prior.resid_sd_scale;
  double ls = std::log(std::max(std::sqrt(yty / std::max<Eigen::Index>(1, N - 1)), 1e-3));
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(P);

  PosteriorDraws out;
  out.layout = model.layout();
  out.param_names = model.layout().names;
  out.params.resize(n_draws, model.layout().total);
  out.spec_hash = model.spec_hash();
  out.n_chains = 1;

  Eigen::VectorXd z(P);
  for (int sweep = 0; sweep < warmup + n_draws; ++sweep) {
    const double inv2 = std::exp(-2.0 * ls);
    Eigen::MatrixXd A = inv2 * xtx;
    A.diagonal() += prior_prec;
    Eigen::LLT<Eigen::MatrixXd> chol(A);
    if (chol.info() != Eigen::Success)
      throw LinalgError("posterior precision matrix is not positive definite");
    Eigen::VectorXd mean = chol.solve(inv2 * xty);
    for (int j = 0; j < P; ++j) z(j) = rng.normal();
    // beta = mean + L^-T z draws from N(mean, A^-1)
    beta = mean + chol.matrixU().solve(z);

    const double ssr =
        std::max(0.0, yty - 2.0 * beta.dot(xty) + beta.dot(xtx * beta));
    auto log_target = [&](double ls_cand) {
      const double sigma = std::exp(ls_cand);
      return -static_cast<double>(N) * ls_cand - 0.5 * ssr * std::exp(-2.0 * ls_cand) +
             half_t_logpdf_unnorm(sigma, kHalfTDf, resid_scale) + ls_cand;
    };
    ls = slice_sample(log_target, ls, rng);

    if (sweep >= warmup) {
      const int r = sweep - warmup;
      out.params(r, 0) = beta(0) + y_mean;
      for (int j = 1; j < P; ++j) out.params(r, j) = beta(j);
      out.params(r, P) = std::exp(ls);
    }
  }
  out.loglik = model.loglik_all(out.params);
  return out;
}

// ---------------------------------------------------------------------------
// Dynamic HMC sampler (all model families)
// ---------------------------------------------------------------------------

inline std::pair<PosteriorDraws, SamplerDiagnostics> sample_mcmc(
    const ModelSpec& spec, const EvalDataset& d, int n_draws, std::uint64_t seed,
    const SamplerSettings& settings = {}) {
  if (n_draws < 1) throw ConfigError("draw count must be >= 1");
  const int chains = std::max(1, settings.chains);

  GaussianModel model(spec, d);
  detail::UnconstrainedPosterior target(model, settings.non_centered);

  NutsOptions opts;
  opts.max_depth = settings.max_depth;
  opts.target_accept = settings.target_accept;
  opts.adapt_mass = settings.adapt_mass;

  std::vector<int> per_chain(chains, n_draws / chains);
  for (int c = 0; c < n_draws % chains; ++c) ++per_chain[c];

  SeedSequence seeds(seed);
  struct ChainOut {
    Eigen::MatrixXd natural;
    NutsStats stats;
  };
  auto run_chain = [&](int c) {
    detail::UnconstrainedPosterior chain_target(model, settings.non_centered);
    Rng rng(seeds.derive("chain", static_cast<std::uint64_t>(c)));
    Eigen::VectorXd q0 = chain_target.initial_point(rng);
    ChainOut out;
    Eigen::MatrixXd raw =
        nuts_sample(chain_target, q0, settings.warmup, per_chain[c], rng, out.stats, opts);
    out.natural.resize(raw.rows(), model.layout().total);
    for (Eigen::Index i = 0; i < raw.rows(); ++i)
      out.natural.row(i) = chain_target.to_natural(raw.row(i).transpose());
    return out;
  };

  std::vector<ChainOut> results(chains);
  if (chains > 1) {
    std::vector<std::future<ChainOut>> futs;
    for (int c = 0; c < chains; ++c)
      futs.push_back(std::async(std::launch::async, run_chain, c));
    for (int c = 0; c < chains; ++c) results[c] = futs[c].get();
  } else {
    results[0] = run_chain(0);
  }

  PosteriorDraws draws;
  draws.layout = model.layout();
  draws.param_names = model.layout().names;
  draws.spec_hash = model.spec_hash();
  draws.n_chains = chains;
  draws.params.resize(n_draws, model.layout().total);
  Eigen::Index at = 0;
  for (int c = 0; c < chains; ++c) {
    draws.params.middleRows(at, results[c].natural.rows()) = results[c].natural;
    at += results[c].natural.rows();
  }

  SamplerDiagnostics diag;
  diag.param_names = draws.param_names;
  double accept = 0.0;
  for (int c = 0; c < chains; ++c) {
    diag.divergence_count += results[c].stats.divergences;
    accept += results[c].stats.accept_rate;
  }
  diag.accept_rate = accept / chains;
  diag.step_size = results[0].stats.step_size;

  // Split-Rhat / ESS need equal-length chains; trim to the shortest.
  const int min_len = *std::min_element(per_chain.begin(), per_chain.end());
  if (min_len >= 4) {
    Eigen::MatrixXd stacked(static_cast<Eigen::Index>(min_len) * chains,
                            draws.params.cols());
    Eigen::Index row = 0, src = 0;
    for (int c = 0; c < chains; ++c) {
      stacked.middleRows(row, min_len) = draws.params.middleRows(src, min_len);
      row += min_len;
      src += per_chain[c];
    }
    diag.split_rhat = split_rhat(stacked, chains);
    diag.max_rhat = diag.split_rhat.maxCoeff();
    diag.min_ess = effective_sample_size(stacked, chains).minCoeff();
  }

  if (diag.divergence_count > 0.01 * n_draws)
    diag.warnings.push_back("divergent transitions exceed 1% of draws (" +
                            std::to_string(diag.divergence_count) + "/" +
                            std::to_string(n_draws) + ")");
  if (diag.max_rhat > 1.05) {
    Eigen::Index worst;
    diag.split_rhat.maxCoeff(&worst);
    diag.warnings.push_back("split-Rhat above 1.05 for parameter " +
                            draws.param_names[static_cast<std::size_t>(worst)]);
  }

  draws.loglik = model.loglik_all(draws.params);
  return {std::move(draws), std::move(diag)};
}

// Dispatches on the model family: exact conjugate alternation when the model
// is fixed-effects homoscedastic, dynamic HMC otherwise.
inline std::pair<PosteriorDraws, SamplerDiagnostics> sample_posterior(
    const ModelSpec& spec, const EvalDataset& d, int n_draws, std::uint64_t seed,
    const SamplerSettings& settings = {}) {
  if (!spec.has_random_effects() && !spec.heteroscedastic()) {
    auto draws = sample_conjugate(spec, d, n_draws, seed, settings.warmup);
    return {std::move(draws), SamplerDiagnostics{}};
  }
  return sample_mcmc(spec, d, n_draws, seed, settings);
}

}  // namespace mbm
