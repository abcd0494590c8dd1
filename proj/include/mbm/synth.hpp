#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <cmath>
#include <fstream>
#include <functional>
#include <json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "mbm/dataset.hpp"
#include "mbm/errors.hpp"
#include "mbm/metrics.hpp"
#include "mbm/predictive.hpp"
#include "mbm/rng.hpp"

namespace mbm {

// ---------------------------------------------------------------------------
// Population specification
// ---------------------------------------------------------------------------

// One demographic cell: sampling weight, a multivariate Gaussian over the
// continuous risk factors, and independent Bernoulli rates for the binary
// risk factors.
struct PopulationCell {
  SubpopKey key;
  double weight = 0.0;
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
  Eigen::MatrixXd chol;  // lower Cholesky factor of cov
  std::vector<double> bernoulli;
};

struct PopulationSpec {
  std::vector<AttrSchema> attributes;
  std::vector<std::string> risk_factors;    // continuous, e.g. ln.sysbp
  std::vector<std::string> binary_factors;  // e.g. diabetes, htn_treatment
  std::vector<PopulationCell> cells;

  static PopulationSpec from_json(const nlohmann::json& j);
  static PopulationSpec load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open population spec '" + path + "'");
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("population spec '" + path + "': " + e.what());
    }
    return from_json(j);
  }
};

inline PopulationSpec PopulationSpec::from_json(const nlohmann::json& j) {
  PopulationSpec spec;
  try {
    for (const auto& a : j.at("attributes"))
      spec.attributes.push_back(
          {a.at("name").get<std::string>(), a.at("levels").get<std::vector<std::string>>()});
    spec.risk_factors = j.at("risk_factors").get<std::vector<std::string>>();
    spec.binary_factors = j.at("binary_factors").get<std::vector<std::string>>();
    const auto d = static_cast<Eigen::Index>(spec.risk_factors.size());
    for (const auto& c : j.at("cells")) {
      PopulationCell cell;
      for (const auto& [k, v] : c.at("key").items())
        cell.key.bindings[k] = v.get<std::string>();
      cell.weight = c.at("weight").get<double>();
      if (!(cell.weight > 0.0))
        throw ConfigError("cell " + cell.key.to_string() + ": weight must be positive");
      auto mean = c.at("mean").get<std::vector<double>>();
      if (static_cast<Eigen::Index>(mean.size()) != d)
        throw ConfigError("cell " + cell.key.to_string() + ": mean length mismatch");
      cell.mean = Eigen::Map<Eigen::VectorXd>(mean.data(), d);
      cell.cov.resize(d, d);
      const auto& cov = c.at("cov");
      for (Eigen::Index r = 0; r < d; ++r)
        for (Eigen::Index q = 0; q < d; ++q) cell.cov(r, q) = cov.at(r).at(q).get<double>();
      if (!cell.cov.isApprox(cell.cov.transpose(), 1e-10))
        throw ConfigError("cell " + cell.key.to_string() + ": covariance not symmetric");
      Eigen::LLT<Eigen::MatrixXd> llt(cell.cov +
                                      1e-12 * Eigen::MatrixXd::Identity(d, d));
      if (llt.info() != Eigen::Success)
        throw ConfigError("cell " + cell.key.to_string() +
                          ": covariance not positive semidefinite");
      cell.chol = llt.matrixL();
      cell.bernoulli = c.at("bernoulli").get<std::vector<double>>();
      if (cell.bernoulli.size() != spec.binary_factors.size())
        throw ConfigError("cell " + cell.key.to_string() + ": bernoulli length mismatch");
      for (double p : cell.bernoulli)
        if (!(p >= 0.0 && p <= 1.0))
          throw ConfigError("cell " + cell.key.to_string() +
                            ": bernoulli probabilities must lie in [0,1]");
      spec.cells.push_back(std::move(cell));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("population spec: ") + e.what());
  }
  if (spec.cells.empty()) throw ConfigError("population spec has no cells");
  // Every cell key must bind every attribute with an allowed level.
  for (const auto& cell : spec.cells) {
    for (const auto& a : spec.attributes) {
      auto it = cell.key.bindings.find(a.name);
      if (it == cell.key.bindings.end())
        throw ConfigError("cell " + cell.key.to_string() + " does not bind '" + a.name + "'");
      if (a.level_index(it->second) < 0)
        throw ConfigError("cell " + cell.key.to_string() + ": unknown level for '" +
                          a.name + "'");
    }
  }
  return spec;
}

// ---------------------------------------------------------------------------
// Risk score
// ---------------------------------------------------------------------------

// One simulated unit before the predictive score is attached.
struct SynthUnit {
  const PopulationSpec* spec = nullptr;
  std::size_t cell = 0;
  Eigen::VectorXd risk_values;   // aligned with spec->risk_factors
  std::vector<int> binary;       // aligned with spec->binary_factors

  const std::string& attr_level(const std::string& name) const {
    return spec->cells[cell].key.bindings.at(name);
  }
  double risk_factor(const std::string& name) const {
    for (std::size_t i = 0; i < spec->risk_factors.size(); ++i)
      if (spec->risk_factors[i] == name)
        return risk_values(static_cast<Eigen::Index>(i));
    throw ConfigError("risk factor '" + name + "' not in population spec");
  }
  int binary_factor(const std::string& name) const {
    for (std::size_t i = 0; i < spec->binary_factors.size(); ++i)
      if (spec->binary_factors[i] == name) return binary[i];
    throw ConfigError("binary factor '" + name + "' not in population spec");
  }
};

using RiskScoreFn = std::function<double(const SynthUnit&)>;

// Documented stand-in for a published cardiovascular risk equation: a
// survival-form score risk = 1 - exp(-exp(lin)) over blood pressure, lipids,
// diabetes, treatment status, age bin, and sex. Ground truth downstream is
// self-consistent for any choice here because labels and metrics both derive
// from it.
inline RiskScoreFn builtin_logistic_risk() {
  return [](const SynthUnit& u) {
    const auto& cells = u.spec->cells[u.cell].key.bindings;
    int age_idx = 0, male = 0;
    if (auto it = cells.find("age_bin"); it != cells.end()) {
      for (const auto& a : u.spec->attributes)
        if (a.name == "age_bin") age_idx = a.level_index(it->second);
    }
    if (auto it = cells.find("gender"); it != cells.end()) male = it->second == "male";
    const double index = -23.4 + 3.0 * u.risk_factor("ln.sysbp") +
                         1.8 * u.risk_factor("ln.tc") - 2.0 * u.risk_factor("ln.hdl") +
                         1.1 * age_idx + 0.6 * male +
                         5.5 * u.binary_factor("diabetes") +
                         3.5 * u.binary_factor("htn_treatment");
    // Sharpness 60 around the index value that maps to 10% risk: risk is
    // near 0 or near 1 except in a narrow boundary band, the shape published
    // risk equations take once the major factors stack up.
    const double lin = -2.25 + 60.0 * (index + 2.26);
    return 1.0 - std::exp(-std::exp(lin));
  };
}

// ---------------------------------------------------------------------------
// Score mechanisms
// ---------------------------------------------------------------------------

struct ScoreMechanism {
  enum class Structure { None, Simple, Interactions } structure = Structure::None;
  enum class Noise { Homoscedastic, Heteroscedastic } noise = Noise::Homoscedastic;

  static ScoreMechanism parse(const std::string& name) {
    ScoreMechanism m;
    std::string base = name;
    if (base.size() > 7 && base.substr(base.size() - 7) == "-hetero") {
      m.noise = Noise::Heteroscedastic;
      base = base.substr(0, base.size() - 7);
    }
    if (base == "none") m.structure = Structure::None;
    else if (base == "simple") m.structure = Structure::Simple;
    else if (base == "interactions") m.structure = Structure::Interactions;
    else throw ConfigError("unknown score mechanism '" + name + "'");
    return m;
  }

  std::string name() const {
    std::string base = structure == Structure::None ? "none"
                       : structure == Structure::Simple ? "simple"
                                                        : "interactions";
    return noise == Noise::Heteroscedastic ? base + "-hetero" : base;
  }
};

// Fixed constants of the three score mechanisms; mirrored by the manifest
// file data/mechanism_constants.json, which a test checks against drift.
struct MechanismConstants {
  double none_beta_y0 = -3.5, none_beta_y1 = -2.0, none_sd = 1.25;
  double simple_grid_lo = -0.2, simple_grid_hi = 0.2;
  double simple_beta_y0 = -3.0, simple_beta_y1 = -2.5, simple_sd = 0.5;
  double inter_grid_abs = 0.4472135954999579;  // sqrt(0.2)
  double inter_risk_weight = 0.7, inter_risk_mean_weight = 0.3, inter_sd = 0.5;
  double hetero_scale = 1.0, hetero_floor = 0.5;  // sigma_n = fac*sd + 0.5*sd
};

inline const MechanismConstants& mechanism_constants() {
  static const MechanismConstants k{};
  return k;
}

// ---------------------------------------------------------------------------
// Population generation
// ---------------------------------------------------------------------------

struct SynthPopulation {
  EvalDataset data;          // scores zero until simulate_scores
  std::vector<double> risk;  // f_n, the true risk score per unit
  std::vector<std::size_t> cell_index;
};

inline SynthPopulation generate_population(const PopulationSpec& spec,
                                           const RiskScoreFn& risk_fn, double cutoff,
                                           std::size_t n_pop, std::uint64_t seed) {
  if (n_pop < 1) throw ConfigError("population size must be >= 1");
  std::vector<std::string> covs = spec.risk_factors;
  covs.insert(covs.end(), spec.binary_factors.begin(), spec.binary_factors.end());
  EvalDataset data(spec.attributes, covs);
  data.reserve(n_pop);

  double total = 0.0;
  for (const auto& c : spec.cells) total += c.weight;
  std::vector<double> cum;
  cum.reserve(spec.cells.size());
  double acc = 0.0;
  for (const auto& c : spec.cells) {
    acc += c.weight / total;
    cum.push_back(acc);
  }

  Rng rng(seed);
  SynthPopulation pop;
  pop.risk.reserve(n_pop);
  pop.cell_index.reserve(n_pop);
  const auto dim = static_cast<Eigen::Index>(spec.risk_factors.size());
  Eigen::VectorXd z(dim);
  for (std::size_t n = 0; n < n_pop; ++n) {
    const double u = rng.uniform();
    const std::size_t ci =
        std::min(static_cast<std::size_t>(
                     std::lower_bound(cum.begin(), cum.end(), u) - cum.begin()),
                 spec.cells.size() - 1);
    const auto& cell = spec.cells[ci];

    SynthUnit unit;
    unit.spec = &spec;
    unit.cell = ci;
    for (Eigen::Index i = 0; i < dim; ++i) z(i) = rng.normal();
    unit.risk_values = cell.mean + cell.chol * z;
    unit.binary.resize(spec.binary_factors.size());
    for (std::size_t i = 0; i < spec.binary_factors.size(); ++i)
      unit.binary[i] = rng.bernoulli(cell.bernoulli[i]) ? 1 : 0;

    const double f = risk_fn(unit);
    ProtoRecord rec;
    rec.attrs = cell.key.bindings;
    for (std::size_t i = 0; i < spec.risk_factors.size(); ++i)
      rec.covariates[spec.risk_factors[i]] = unit.risk_values(static_cast<Eigen::Index>(i));
    for (std::size_t i = 0; i < spec.binary_factors.size(); ++i)
      rec.covariates[spec.binary_factors[i]] = unit.binary[i];
    rec.label = f >= cutoff ? 1 : 0;
    data.append_proto(rec, 0.0);
    pop.risk.push_back(f);
    pop.cell_index.push_back(ci);
  }
  pop.data = std::move(data);
  return pop;
}

// ---------------------------------------------------------------------------
// Score simulation
// ---------------------------------------------------------------------------

namespace detail {

// Evenly spaced grid over [lo, hi]; a single level sits at lo.
inline std::vector<double> level_grid(double lo, double hi, std::size_t n) {
  std::vector<double> g(n, lo);
  for (std::size_t i = 1; i < n; ++i)
    g[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
  return g;
}

inline int required_attr(const EvalDataset& d, const std::string& name) {
  int p = d.attr_pos(name);
  if (p < 0)
    throw ConfigError("score mechanism requires attribute '" + name +
                      "' in the population spec");
  return p;
}

}  // namespace detail

inline std::vector<double> simulate_scores(const SynthPopulation& pop,
                                           const ScoreMechanism& mech,
                                           std::uint64_t seed) {
  const auto& d = pop.data;
  const std::size_t N = d.size();
  const auto& k = mechanism_constants();
  std::vector<double> mu(N);
  double sd = 0.0;

  switch (mech.structure) {
    case ScoreMechanism::Structure::None: {
      for (std::size_t n = 0; n < N; ++n)
        mu[n] = d.label(n) ? k.none_beta_y1 : k.none_beta_y0;
      sd = k.none_sd;
      break;
    }
    case ScoreMechanism::Structure::Simple: {
      const int pg = detail::required_attr(d, "gender");
      const int pr = detail::required_attr(d, "race");
      const int pa = detail::required_attr(d, "age_bin");
      const int pb = detail::required_attr(d, "bmi_bin");
      auto grid = [&](int p) {
        return detail::level_grid(k.simple_grid_lo, k.simple_grid_hi,
                                  d.attr_schema()[static_cast<std::size_t>(p)].levels.size());
      };
      const auto bg = grid(pg), br = grid(pr), ba = grid(pa), bb = grid(pb);
      for (std::size_t n = 0; n < N; ++n) {
        mu[n] = bg[static_cast<std::size_t>(d.attr_code(pg, n))] +
                br[static_cast<std::size_t>(d.attr_code(pr, n))] +
                ba[static_cast<std::size_t>(d.attr_code(pa, n))] +
                bb[static_cast<std::size_t>(d.attr_code(pb, n))] +
                (d.label(n) ? k.simple_beta_y1 : k.simple_beta_y0);
      }
      sd = k.simple_sd;
      break;
    }
    case ScoreMechanism::Structure::Interactions: {
      const int pg = detail::required_attr(d, "gender");
      const int pr = detail::required_attr(d, "race");
      const int pa = detail::required_attr(d, "age_bin");
      const int pb = detail::required_attr(d, "bmi_bin");
      auto grid = [&](int p) {
        return detail::level_grid(-k.inter_grid_abs, k.inter_grid_abs,
                                  d.attr_schema()[static_cast<std::size_t>(p)].levels.size());
      };
      const auto bg = grid(pg), br = grid(pr), ba = grid(pa), bb = grid(pb);
      const double f_mean = mean_of(pop.risk);
      for (std::size_t n = 0; n < N; ++n) {
        mu[n] = ba[static_cast<std::size_t>(d.attr_code(pa, n))] *
                    br[static_cast<std::size_t>(d.attr_code(pr, n))] +
                bg[static_cast<std::size_t>(d.attr_code(pg, n))] *
                    bb[static_cast<std::size_t>(d.attr_code(pb, n))] +
                k.inter_risk_weight * pop.risk[n] + k.inter_risk_mean_weight * f_mean;
      }
      sd = k.inter_sd;
      break;
    }
  }

  std::vector<double> sigma(N, sd);
  if (mech.noise == ScoreMechanism::Noise::Heteroscedastic) {
    // fac_n = logistic(-mu_n), normalized by its population max; the noise
    // scale is globally coupled through that max (two passes).
    double max_fac = 0.0;
    std::vector<double> fac(N);
    for (std::size_t n = 0; n < N; ++n) {
      fac[n] = 1.0 / (1.0 + std::exp(mu[n]));
      max_fac = std::max(max_fac, fac[n]);
    }
    for (std::size_t n = 0; n < N; ++n)
      sigma[n] = (fac[n] / max_fac) * k.hetero_scale * sd + k.hetero_floor * sd;
  }

  Rng rng(seed);
  std::vector<double> scores(N);
  for (std::size_t n = 0; n < N; ++n) scores[n] = mu[n] + sigma[n] * rng.normal();
  return scores;
}

// Attaches simulated scores, returning a complete evaluation dataset.
inline EvalDataset with_scores(const SynthPopulation& pop, std::vector<double> scores) {
  EvalDataset out = pop.data;
  out.set_scores(std::move(scores));
  return out;
}

// ---------------------------------------------------------------------------
// Ground truth
// ---------------------------------------------------------------------------

struct GroundTruth {
  double threshold = 0.0;  // population threshold tau*
  std::vector<PointEstimate> cells;  // per-subpopulation true metrics
  PointEstimate population_auc;      // whole-population reference values

  const PointEstimate* find(const SubpopKey& key, const MetricKind& m) const {
    for (const auto& c : cells)
      if (c.key == key && c.metric == m) return &c;
    return nullptr;
  }
};

// Population-level threshold at the FPR target, then per-cell AUC / FPR / PPV
// on the full simulated population.
inline GroundTruth ground_truth(const EvalDataset& population,
                                const std::vector<std::string>& attrs,
                                double fpr_target = 0.01) {
  GroundTruth gt;
  auto sample = ScoreSample::from_dataset(population);
  gt.threshold = threshold_for_fpr(sample, fpr_target);
  const std::vector<MetricKind> kinds{MetricKind::auc(), MetricKind::fpr(gt.threshold),
                                      MetricKind::ppv(gt.threshold)};
  gt.cells = empirical_all(population, attrs, kinds);
  for (auto& c : gt.cells) c.provenance = "truth";
  gt.population_auc.key = SubpopKey{};
  gt.population_auc.cell_size = population.size();
  gt.population_auc.metric = MetricKind::auc();
  gt.population_auc.value = auc_u_statistic(sample);
  gt.population_auc.provenance = "truth";
  return gt;
}

// Uniform subsample without replacement (partial Fisher-Yates).
inline EvalDataset subsample(const EvalDataset& population, std::size_t n,
                             std::uint64_t seed) {
  if (n > population.size())
    throw ConfigError("subsample size exceeds the population size");
  std::vector<std::size_t> idx(population.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = i + rng.below(idx.size() - i);
    std::swap(idx[i], idx[j]);
  }
  idx.resize(n);
  return population.take_rows(idx);
}

}  // namespace mbm
