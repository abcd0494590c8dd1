#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <vector>

#include "mbm/errors.hpp"
#include "mbm/rng.hpp"

namespace mbm {

// Dynamic Hamiltonian Monte Carlo with multinomial trajectory sampling,
// dual-averaging step-size adaptation, and diagonal mass-matrix estimation
// during warmup (Hoffman & Gelman 2014; Betancourt 2017).
//
// The target is any callable `double target(const VectorXd& q, VectorXd& grad)`
// returning the log density (up to a constant) and filling its gradient.
struct NutsOptions {
  int max_depth = 10;
  double target_accept = 0.8;
  bool adapt_mass = true;
  double divergence_threshold = 1000.0;
};

struct NutsStats {
  int divergences = 0;        // post-warmup divergent transitions
  double accept_rate = 0.0;   // mean accept-stat over kept iterations
  double step_size = 0.0;
  Eigen::VectorXd inv_mass;
};

namespace detail {

template <class Target>
class NutsSampler {
 public:
  NutsSampler(Target& target, int dim, const NutsOptions& opts, Rng& rng)
      : target_(target), dim_(dim), opts_(opts), rng_(rng) {
    inv_mass_ = Eigen::VectorXd::Ones(dim);
  }

  // Runs warmup + sampling from q0; returns kept draws row by row.
  Eigen::MatrixXd run(Eigen::VectorXd q, int warmup, int n_draws, NutsStats& stats) {
    grad_.resize(dim_);
    logp_ = target_(q, grad_);
    if (!std::isfinite(logp_))
      throw LinalgError("log density not finite at the initial point");

    init_adaptation(warmup);
    find_initial_step(q);
    dual_reset();

    for (int m = 1; m <= warmup; ++m) {
      double accept = transition(q);
      dual_update(accept);
      update_mass_window(q, m, warmup);
    }
    step_size_ = std::exp(log_step_avg_);

    Eigen::MatrixXd draws(n_draws, dim_);
    double accept_sum = 0.0;
    stats.divergences = 0;
    for (int i = 0; i < n_draws; ++i) {
      accept_sum += transition(q);
      if (diverged_) ++stats.divergences;
      draws.row(i) = q.transpose();
    }
    stats.accept_rate = n_draws > 0 ? accept_sum / n_draws : 0.0;
    stats.step_size = step_size_;
    stats.inv_mass = inv_mass_;
    return draws;
  }

 private:
  struct Leaf {
    Eigen::VectorXd q, p, grad;
    double logp = 0.0;
  };

  struct Subtree {
    Leaf minus, plus;           // trajectory endpoints
    Eigen::VectorXd proposal;
    double log_weight = -std::numeric_limits<double>::infinity();
    double accept_sum = 0.0;
    int leaves = 0;
    bool divergent = false;
    bool turned = false;
  };

  double kinetic(const Eigen::VectorXd& p) const {
    return 0.5 * p.dot(inv_mass_.cwiseProduct(p));
  }

  Leaf leapfrog(const Leaf& from, double eps) {
    Leaf out;
    out.p = from.p + 0.5 * eps * from.grad;
    out.q = from.q + eps * inv_mass_.cwiseProduct(out.p);
    out.grad.resize(dim_);
    out.logp = target_(out.q, out.grad);
    out.p += 0.5 * eps * out.grad;
    return out;
  }

  bool uturn(const Leaf& minus, const Leaf& plus) const {
    Eigen::VectorXd dq = plus.q - minus.q;
    return dq.dot(inv_mass_.cwiseProduct(minus.p)) < 0.0 ||
           dq.dot(inv_mass_.cwiseProduct(plus.p)) < 0.0;
  }

  Subtree build_tree(const Leaf& from, double eps_signed, int depth, double h0) {
    if (depth == 0) {
      Leaf leaf = leapfrog(from, eps_signed);
      Subtree t;
      const double h = std::isfinite(leaf.logp)
                           ? -leaf.logp + kinetic(leaf.p)
                           : std::numeric_limits<double>::infinity();
      const double dh = h0 - h;  // log importance weight of this state
      t.divergent = !(dh > -opts_.divergence_threshold);
      t.log_weight = t.divergent ? -std::numeric_limits<double>::infinity() : dh;
      t.accept_sum = std::isfinite(dh) ? std::min(1.0, std::exp(dh)) : 0.0;
      t.leaves = 1;
      t.proposal = leaf.q;
      t.minus = leaf;
      t.plus = std::move(leaf);
      return t;
    }
    Subtree first = build_tree(from, eps_signed, depth - 1, h0);
    if (first.divergent || first.turned) return first;
    const Leaf& outer = eps_signed > 0 ? first.plus : first.minus;
    Subtree second = build_tree(outer, eps_signed, depth - 1, h0);

    Subtree merged;
    merged.accept_sum = first.accept_sum + second.accept_sum;
    merged.leaves = first.leaves + second.leaves;
    merged.divergent = second.divergent;
    merged.minus = eps_signed > 0 ? std::move(first.minus) : std::move(second.minus);
    merged.plus = eps_signed > 0 ? std::move(second.plus) : std::move(first.plus);
    merged.log_weight = log_add(first.log_weight, second.log_weight);
    // Multinomial sampling within the subtree.
    const double p_second = std::exp(second.log_weight - merged.log_weight);
    merged.proposal = (rng_.uniform() < p_second) ? std::move(second.proposal)
                                                  : std::move(first.proposal);
    merged.turned = second.turned || uturn(merged.minus, merged.plus);
    return merged;
  }

  // One NUTS transition; returns the mean accept-stat across visited states.
  double transition(Eigen::VectorXd& q) {
    Leaf init;
    init.q = q;
    init.grad = grad_;
    init.logp = logp_;
    init.p.resize(dim_);
    for (int i = 0; i < dim_; ++i) init.p(i) = rng_.normal() / std::sqrt(inv_mass_(i));

    const double h0 = -init.logp + kinetic(init.p);
    Leaf minus = init, plus = init;
    Eigen::VectorXd proposal = q;
    double log_weight = 0.0;  // the initial state has weight exp(h0 - h0) = 1
    double accept_sum = 0.0;
    int leaves = 0;
    diverged_ = false;

    for (int depth = 0; depth < opts_.max_depth; ++depth) {
      const double dir = rng_.uniform() < 0.5 ? -1.0 : 1.0;
      Subtree sub = build_tree(dir > 0 ? plus : minus, dir * step_size_, depth, h0);
      accept_sum += sub.accept_sum;
      leaves += sub.leaves;
      if (sub.divergent) {
        diverged_ = true;
        break;
      }
      if (sub.turned) break;
      // Biased progressive sampling toward the new subtree.
      if (std::log(rng_.uniform()) < sub.log_weight - log_weight)
        proposal = sub.proposal;
      log_weight = log_add(log_weight, sub.log_weight);
      if (dir > 0) plus = std::move(sub.plus); else minus = std::move(sub.minus);
      if (uturn(minus, plus)) break;
    }

    q = proposal;
    logp_ = target_(q, grad_);  // refresh cache at the accepted point
    return leaves > 0 ? accept_sum / leaves : 0.0;
  }

  static double log_add(double a, double b) {
    if (a == -std::numeric_limits<double>::infinity()) return b;
    if (b == -std::numeric_limits<double>::infinity()) return a;
    const double m = std::max(a, b);
    return m + std::log(std::exp(a - m) + std::exp(b - m));
  }

  // Doubling/halving heuristic for the starting step size.
  void find_initial_step(const Eigen::VectorXd& q0) {
    Leaf leaf;
    leaf.q = q0;
    leaf.grad = grad_;
    leaf.logp = logp_;
    leaf.p.resize(dim_);
    for (int i = 0; i < dim_; ++i) leaf.p(i) = rng_.normal() / std::sqrt(inv_mass_(i));
    const double h0 = -leaf.logp + kinetic(leaf.p);
    step_size_ = 1.0;
    auto dh_at = [&](double eps) {
      Leaf moved = leapfrog(leaf, eps);
      if (!std::isfinite(moved.logp)) return -std::numeric_limits<double>::infinity();
      return h0 - (-moved.logp + kinetic(moved.p));
    };
    double dh = dh_at(step_size_);
    while (!std::isfinite(dh) && step_size_ > 1e-10) {
      step_size_ *= 0.5;
      dh = dh_at(step_size_);
    }
    const double a = dh > std::log(0.5) ? 1.0 : -1.0;
    for (int iter = 0; iter < 50; ++iter) {
      if (a * dh <= -a * std::log(2.0)) break;
      step_size_ *= std::pow(2.0, a);
      dh = dh_at(step_size_);
      if (!std::isfinite(dh)) {
        step_size_ *= 0.5;
        break;
      }
    }
  }

  // --- dual averaging ---
  void dual_reset() {
    mu_ = std::log(10.0 * step_size_);
    log_step_avg_ = std::log(step_size_);
    h_bar_ = 0.0;
    adapt_iter_ = 0;
  }

  void dual_update(double accept) {
    static constexpr double kGamma = 0.05, kT0 = 10.0, kKappa = 0.75;
    ++adapt_iter_;
    const double m = static_cast<double>(adapt_iter_);
    h_bar_ = (1.0 - 1.0 / (m + kT0)) * h_bar_ +
             (opts_.target_accept - accept) / (m + kT0);
    const double log_step = mu_ - std::sqrt(m) / kGamma * h_bar_;
    const double eta = std::pow(m, -kKappa);
    log_step_avg_ = eta * log_step + (1.0 - eta) * log_step_avg_;
    step_size_ = std::exp(log_step);
  }

  // --- mass-matrix windows (75 | 25,50,100,... | 50 schedule) ---
  void init_adaptation(int warmup) {
    window_ends_.clear();
    if (!opts_.adapt_mass || warmup < 150) return;
    int start = 75;
    const int end = warmup - 50;
    int size = 25;
    while (start < end) {
      int stop = start + size;
      if (stop + 2 * size > end) stop = end;  // absorb the remainder
      window_ends_.push_back(stop);
      start = stop;
      size *= 2;
    }
    welford_reset();
  }

  void update_mass_window(const Eigen::VectorXd& q, int m, int warmup) {
    (void)warmup;
    if (window_ends_.empty() || window_idx_ >= window_ends_.size()) return;
    if (m > 75) welford_add(q);
    if (m == window_ends_[window_idx_]) {
      if (welford_n_ >= 10) {
        const double n = static_cast<double>(welford_n_);
        Eigen::VectorXd var =
            (welford_m2_ / (n - 1.0)) * (n / (n + 5.0)) +
            Eigen::VectorXd::Constant(dim_, 1e-3 * (5.0 / (n + 5.0)));
        inv_mass_ = var;
      }
      welford_reset();
      ++window_idx_;
      // Step size must be retuned for the new metric.
      step_size_ = std::exp(log_step_avg_);
      dual_reset();
    }
  }

  void welford_reset() {
    welford_n_ = 0;
    welford_mean_ = Eigen::VectorXd::Zero(dim_);
    welford_m2_ = Eigen::VectorXd::Zero(dim_);
  }

  void welford_add(const Eigen::VectorXd& q) {
    ++welford_n_;
    Eigen::VectorXd delta = q - welford_mean_;
    welford_mean_ += delta / static_cast<double>(welford_n_);
    welford_m2_ += delta.cwiseProduct(q - welford_mean_);
  }

  Target& target_;
  int dim_;
  NutsOptions opts_;
  Rng& rng_;
  Eigen::VectorXd inv_mass_;
  Eigen::VectorXd grad_;
  double logp_ = 0.0;
  double step_size_ = 1.0;
  bool diverged_ = false;
  double mu_ = 0.0, log_step_avg_ = 0.0, h_bar_ = 0.0;
  int adapt_iter_ = 0;
  std::vector<int> window_ends_;
  std::size_t window_idx_ = 0;
  long welford_n_ = 0;
  Eigen::VectorXd welford_mean_, welford_m2_;
};

}  // namespace detail

template <class Target>
Eigen::MatrixXd nuts_sample(Target& target, const Eigen::VectorXd& q0, int warmup,
                            int n_draws, Rng& rng, NutsStats& stats,
                            const NutsOptions& opts = {}) {
  detail::NutsSampler<Target> sampler(target, static_cast<int>(q0.size()), opts, rng);
  return sampler.run(q0, warmup, n_draws, stats);
}

}  // namespace mbm
