#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "mbm/dataset.hpp"
#include "mbm/design.hpp"
#include "mbm/errors.hpp"
#include "mbm/formula.hpp"
#include "mbm/stats.hpp"

namespace mbm {

// Natural-scale layout of one parameter record (one posterior draw):
//
//   [ beta | u per mean group | tau per mean group |
//     sigma                                (homoscedastic)
//     gamma | u^s per sigma group | tau^s  (heteroscedastic) ]
//
// Random intercepts are stored materialized (u = tau * u_tilde), so a draw
// row is directly usable for prediction without knowing the sampler's
// internal parameterization.
struct ParamLayout {
  struct Block {
    std::string name;
    int offset = 0;
    int count = 0;
  };

  int beta_offset = 0;
  int beta_count = 0;
  std::vector<Block> mean_groups;
  int tau_offset = 0;  // one tau per mean group
  bool hetero = false;
  int sigma_index = -1;  // homoscedastic only
  int gamma_offset = 0;
  int gamma_count = 0;
  std::vector<Block> sigma_groups;
  int sigma_tau_offset = 0;  // one tau per sigma group
  int total = 0;
  std::vector<std::string> names;
};

// Binds a parsed ModelSpec to a dataset: holds the design matrices and the
// parameter layout, and evaluates per-record Gaussian log-likelihoods and
// conditional (mu, sigma) under any parameter record.
class GaussianModel {
 public:
  GaussianModel(const ModelSpec& spec, const EvalDataset& d)
      : spec_(spec), design_(build_design(spec, d)), n_(d.size()) {
    y_ = Eigen::Map<const Eigen::VectorXd>(d.scores().data(),
                                           static_cast<Eigen::Index>(d.size()));
    build_layout();
    spec_hash_ = compute_hash(spec, d);
  }

  const ModelSpec& spec() const { return spec_; }
  const DesignSet& design() const { return design_; }
  const ParamLayout& layout() const { return layout_; }
  std::size_t n() const { return n_; }
  const Eigen::VectorXd& response() const { return y_; }
  std::uint64_t spec_hash() const { return spec_hash_; }

  static std::uint64_t compute_hash(const ModelSpec& spec, const EvalDataset& d) {
    std::uint64_t h = fnv1a(print_formula(spec));
    h = fnv1a(print_sigma_formula(spec), h);
    auto mix_d = [&h](double v) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, 8);
      h ^= bits;
      h *= 0x100000001b3ULL;
    };
    mix_d(spec.prior.fixed_coef_sd);
    mix_d(spec.prior.intercept_sd);
    mix_d(spec.prior.group_sd_scale);
    mix_d(spec.prior.resid_sd_scale);
    mix_d(spec.prior.sigma_coef_sd);
    return mix64(h ^ d.fingerprint());
  }

  // Conditional mean for every record under one parameter record.
  Eigen::VectorXd mu_row(const Eigen::Ref<const Eigen::RowVectorXd>& p) const {
    check_shape(p);
    Eigen::VectorXd mu =
        design_.mean.fixed * p.segment(layout_.beta_offset, layout_.beta_count).transpose();
    for (std::size_t g = 0; g < design_.mean.groups.size(); ++g) {
      const auto& blk = layout_.mean_groups[g];
      const auto& cells = design_.mean.groups[g].cell;
      for (std::size_t i = 0; i < n_; ++i)
        mu(static_cast<Eigen::Index>(i)) += p(blk.offset + cells[i]);
    }
    return mu;
  }

  // Conditional sd for every record under one parameter record.
  Eigen::VectorXd sigma_row(const Eigen::Ref<const Eigen::RowVectorXd>& p) const {
    check_shape(p);
    if (!layout_.hetero)
      return Eigen::VectorXd::Constant(static_cast<Eigen::Index>(n_),
                                       p(layout_.sigma_index));
    Eigen::VectorXd eta =
        design_.sigma->fixed *
        p.segment(layout_.gamma_offset, layout_.gamma_count).transpose();
    for (std::size_t g = 0; g < design_.sigma->groups.size(); ++g) {
      const auto& blk = layout_.sigma_groups[g];
      const auto& cells = design_.sigma->groups[g].cell;
      for (std::size_t i = 0; i < n_; ++i)
        eta(static_cast<Eigen::Index>(i)) += p(blk.offset + cells[i]);
    }
    return eta.array().exp();
  }

  // Per-record log density log N(s_n | mu_n, sigma_n^2).
  Eigen::VectorXd loglik_row(const Eigen::Ref<const Eigen::RowVectorXd>& p) const {
    Eigen::VectorXd mu = mu_row(p);
    Eigen::VectorXd sigma = sigma_row(p);
    Eigen::ArrayXd z = (y_ - mu).array() / sigma.array();
    return (-0.5 * kLogTwoPi - sigma.array().log() - 0.5 * z.square()).matrix();
  }

  // R x N matrix of log densities; the loglik cache of a PosteriorDraws.
  Eigen::MatrixXd loglik_all(const Eigen::MatrixXd& params) const {
    const Eigen::Index R = params.rows();
    Eigen::MatrixXd out(R, static_cast<Eigen::Index>(n_));
    for (Eigen::Index r = 0; r < R; ++r)
      out.row(r) = loglik_row(params.row(r)).transpose();
    return out;
  }

  // (mu, sigma) across all draws for one out-of-sample design row.
  void predict_mu_sigma(const Eigen::MatrixXd& params, const DesignRowSet& row,
                        Eigen::VectorXd& mu, Eigen::VectorXd& sigma) const {
    const Eigen::Index R = params.rows();
    mu = params.middleCols(layout_.beta_offset, layout_.beta_count) * row.mean.fixed;
    for (std::size_t g = 0; g < layout_.mean_groups.size(); ++g)
      mu += params.col(layout_.mean_groups[g].offset + row.mean.group_cells[g]);
    if (!layout_.hetero) {
      sigma = params.col(layout_.sigma_index);
    } else {
      Eigen::VectorXd eta =
          params.middleCols(layout_.gamma_offset, layout_.gamma_count) * row.sigma->fixed;
      for (std::size_t g = 0; g < layout_.sigma_groups.size(); ++g)
        eta += params.col(layout_.sigma_groups[g].offset + row.sigma->group_cells[g]);
      sigma = eta.array().exp().matrix();
    }
    (void)R;
  }

 private:
  void check_shape(const Eigen::Ref<const Eigen::RowVectorXd>& p) const {
    if (p.size() != layout_.total)
      throw ShapeError("parameter record has " + std::to_string(p.size()) +
                       " entries, model expects " + std::to_string(layout_.total));
  }

  void build_layout() {
    int at = 0;
    layout_.beta_offset = at;
    layout_.beta_count = design_.mean.fixed_cols();
    for (const auto& nm : design_.mean.fixed_names) layout_.names.push_back("b[" + nm + "]");
    at += layout_.beta_count;
    for (const auto& g : design_.mean.groups) {
      layout_.mean_groups.push_back({g.name, at, g.n_levels()});
      for (const auto& l : g.level_names)
        layout_.names.push_back("u[" + g.name + "][" + l + "]");
      at += g.n_levels();
    }
    layout_.tau_offset = at;
    for (const auto& g : design_.mean.groups) {
      layout_.names.push_back("tau[" + g.name + "]");
      ++at;
    }
    layout_.hetero = spec_.heteroscedastic();
    if (!layout_.hetero) {
      layout_.sigma_index = at;
      layout_.names.push_back("sigma");
      ++at;
    } else {
      layout_.gamma_offset = at;
      layout_.gamma_count = design_.sigma->fixed_cols();
      for (const auto& nm : design_.sigma->fixed_names)
        layout_.names.push_back("g[" + nm + "]");
      at += layout_.gamma_count;
      for (const auto& g : design_.sigma->groups) {
        layout_.sigma_groups.push_back({g.name, at, g.n_levels()});
        for (const auto& l : g.level_names)
          layout_.names.push_back("us[" + g.name + "][" + l + "]");
        at += g.n_levels();
      }
      layout_.sigma_tau_offset = at;
      for (const auto& g : design_.sigma->groups) {
        layout_.names.push_back("taus[" + g.name + "]");
        ++at;
      }
    }
    layout_.total = at;
  }

  ModelSpec spec_;
  DesignSet design_;
  std::size_t n_;
  Eigen::VectorXd y_;
  ParamLayout layout_;
  std::uint64_t spec_hash_ = 0;
};

// Per-record log densities under a single parameter record.
inline Eigen::VectorXd log_likelihood(const ModelSpec& spec, const EvalDataset& d,
                                      const Eigen::Ref<const Eigen::RowVectorXd>& params) {
  return GaussianModel(spec, d).loglik_row(params);
}

}  // namespace mbm
