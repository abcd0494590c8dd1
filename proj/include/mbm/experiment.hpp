#pragma once

#include <array>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "mbm/pipeline.hpp"

namespace mbm {

// One (replicate, method, cell, metric) outcome against ground truth.
struct ExperimentRecord {
  std::string regime;
  std::size_t size = 0;
  int rep = 0;
  std::string method;
  SubpopKey key;
  std::size_t cell_size = 0;  // size within the subsample
  std::string metric;
  std::optional<double> point;
  std::optional<double> truth;
  bool has_intervals = false;
  bool in50 = false, in95 = false, in_range = false;
  double width95 = std::numeric_limits<double>::quiet_NaN();
  std::size_t n_replicates = 0, n_missing = 0;
};

// Aggregate over cells x repetitions for one (regime, size, method, metric).
struct ExperimentAggregate {
  std::string regime;
  std::size_t size = 0;
  std::string method;
  std::string metric;
  std::size_t n_points = 0;       // point estimates compared to truth
  double mae = 0.0;
  double rel_mae = 1.0;           // 1 for the empirical method by construction
  // Cell-size bins (0,100], (100,500], >500
  std::array<double, 3> mae_bin{};
  std::array<double, 3> rel_bin{};
  std::array<std::size_t, 3> n_bin{};
  std::size_t n_intervals = 0;    // rows with usable intervals
  double coverage50 = 0.0, coverage95 = 0.0, coverage_range = 0.0;
  double mean_width95 = 0.0;
  double mean_nonmissing = 0.0;   // non-missing replicate count per row
};

struct ExperimentResult {
  std::vector<ExperimentRecord> records;
  std::vector<ExperimentAggregate> summary;
};

namespace detail {

inline int size_bin(std::size_t n) {
  if (n <= 100) return 0;
  if (n <= 500) return 1;
  return 2;
}

inline void record_estimates(std::vector<ExperimentRecord>& records,
                             const std::vector<MetricEstimate>& ests,
                             const std::string& regime, std::size_t size, int rep,
                             const std::string& method,
                             const std::map<std::pair<std::string, std::string>, double>&
                                 truth_index) {
  for (const auto& e : ests) {
    ExperimentRecord rec;
    rec.regime = regime;
    rec.size = size;
    rec.rep = rep;
    rec.method = method;
    rec.key = e.key;
    rec.cell_size = e.cell_size;
    rec.metric = e.metric.name();
    rec.point = e.point;
    auto t = truth_index.find({e.key.to_string(), e.metric.name()});
    if (t != truth_index.end()) rec.truth = t->second;
    rec.n_replicates = e.replicates.size();
    rec.n_missing = e.n_missing;
    const auto* iv50 = find_interval(e, 0.5);
    const auto* iv95 = find_interval(e, 0.95);
    if (iv50 && iv95 && rec.truth) {
      rec.has_intervals = true;
      rec.in50 = iv50->lo <= *rec.truth && *rec.truth <= iv50->hi;
      rec.in95 = iv95->lo <= *rec.truth && *rec.truth <= iv95->hi;
      rec.in_range = e.range_lo <= *rec.truth && *rec.truth <= e.range_hi;
      rec.width95 = iv95->hi - iv95->lo;
    }
    records.push_back(std::move(rec));
  }
}

}  // namespace detail

// Repeated-subsampling harness over synthetic regimes: per repetition it
// draws a fresh subsample, runs the empirical and model-based bootstrap
// estimators, and scores everything against the population ground truth.
inline ExperimentResult run_experiment(const RunConfig& cfg) {
  if (!cfg.synth) throw ConfigError("the experiment harness requires a synth dataset source");
  const auto& sc = *cfg.synth;
  SeedSequence seeds(cfg.seed);

  auto pop_spec = PopulationSpec::load(sc.population_spec);
  auto pop = generate_population(pop_spec, builtin_logistic_risk(), sc.cutoff, sc.n_pop,
                                 seeds.derive("generate"));

  ExperimentResult out;
  for (const auto& regime : cfg.experiment.regimes) {
    auto scores = simulate_scores(pop, ScoreMechanism::parse(regime),
                                  seeds.derive("scores:" + regime));
    EvalDataset full = with_scores(pop, std::move(scores));
    auto truth = ground_truth(full, cfg.subpop_attrs, cfg.metrics.fpr_target);
    const auto kinds = detail::metric_kinds(cfg.metrics, truth.threshold);

    std::map<std::pair<std::string, std::string>, double> truth_index;
    std::vector<SubpopKey> keys{SubpopKey{}};
    for (const auto& t : truth.cells) {
      if (t.value) truth_index[{t.key.to_string(), t.metric.name()}] = *t.value;
      if (t.metric == kinds.front()) keys.push_back(t.key);
    }
    for (const auto& m : kinds) {
      try {
        truth_index[{SubpopKey{}.to_string(), m.name()}] = empirical_estimate(full, {}, m);
      } catch (const Error&) {
      }
    }

    for (std::size_t size : cfg.experiment.sizes) {
      for (int rep = 0; rep < cfg.experiment.repetitions; ++rep) {
        const std::string tag =
            regime + ":" + std::to_string(size) + ":" + std::to_string(rep);
        EvalDataset sub = subsample(full, std::min(size, full.size()),
                                    seeds.derive("subsample:" + tag));

        BootstrapPlan emp_plan = cfg.bootstrap_plan(seeds.derive("boot:" + tag));
        emp_plan.mode = BootstrapPlan::Mode::Empirical;
        auto emp = empirical_bootstrap(sub, emp_plan, keys, kinds);
        detail::record_estimates(out.records, emp.estimates, regime, size, rep,
                                 "empirical", truth_index);

        for (const auto& [name, mc] : cfg.models) {
          auto spec = parse_formula(mc.formula, mc.sigma_formula, cfg.priors);
          const std::uint64_t fit_seed = seeds.derive("fit:" + name + ":" + tag);
          PosteriorDraws draws;
          if (mc.sampler == "hmc" || spec.has_random_effects() || spec.heteroscedastic()) {
            auto [dd, diag] = sample_mcmc(spec, sub, cfg.draws, fit_seed, cfg.sampler);
            draws = std::move(dd);
          } else {
            draws = sample_conjugate(spec, sub, cfg.draws, fit_seed, cfg.sampler.warmup);
          }
          BootstrapPlan plan = cfg.bootstrap_plan(seeds.derive("boot:" + tag));
          auto res = mbm_bootstrap(spec, draws, sub, plan, keys, kinds, cfg.sampler);
          detail::record_estimates(out.records, res.estimates, regime, size, rep, name,
                                   truth_index);
        }
      }
    }
  }

  // Aggregation; the empirical method is the denominator for relative error.
  struct Acc {
    double abs_err = 0.0;
    std::size_t n = 0;
    std::array<double, 3> abs_bin{};
    std::array<std::size_t, 3> n_bin{};
    std::size_t n_iv = 0;
    std::size_t in50 = 0, in95 = 0, in_range = 0;
    double width = 0.0;
    double nonmissing = 0.0;
  };
  std::map<std::tuple<std::string, std::size_t, std::string, std::string>, Acc> acc;
  for (const auto& r : out.records) {
    if (!r.truth) continue;
    auto& a = acc[{r.regime, r.size, r.method, r.metric}];
    if (r.point) {
      const double err = std::abs(*r.point - *r.truth);
      a.abs_err += err;
      ++a.n;
      const int bin = detail::size_bin(r.cell_size);
      a.abs_bin[bin] += err;
      ++a.n_bin[bin];
    }
    if (r.has_intervals) {
      ++a.n_iv;
      a.in50 += r.in50;
      a.in95 += r.in95;
      a.in_range += r.in_range;
      a.width += r.width95;
      a.nonmissing += static_cast<double>(r.n_replicates - r.n_missing);
    }
  }
  for (const auto& [k, a] : acc) {
    ExperimentAggregate agg;
    agg.regime = std::get<0>(k);
    agg.size = std::get<1>(k);
    agg.method = std::get<2>(k);
    agg.metric = std::get<3>(k);
    agg.n_points = a.n;
    agg.mae = a.n ? a.abs_err / a.n : std::numeric_limits<double>::quiet_NaN();
    for (int b = 0; b < 3; ++b) {
      agg.mae_bin[b] =
          a.n_bin[b] ? a.abs_bin[b] / a.n_bin[b] : std::numeric_limits<double>::quiet_NaN();
      agg.n_bin[b] = a.n_bin[b];
    }
    agg.n_intervals = a.n_iv;
    if (a.n_iv) {
      agg.coverage50 = static_cast<double>(a.in50) / a.n_iv;
      agg.coverage95 = static_cast<double>(a.in95) / a.n_iv;
      agg.coverage_range = static_cast<double>(a.in_range) / a.n_iv;
      agg.mean_width95 = a.width / a.n_iv;
      agg.mean_nonmissing = a.nonmissing / a.n_iv;
    }
    out.summary.push_back(std::move(agg));
  }
  // Relative errors against the empirical row of the same stratum.
  std::map<std::tuple<std::string, std::size_t, std::string>, const ExperimentAggregate*>
      emp_index;
  for (const auto& agg : out.summary)
    if (agg.method == "empirical") emp_index[{agg.regime, agg.size, agg.metric}] = &agg;
  for (auto& agg : out.summary) {
    auto it = emp_index.find({agg.regime, agg.size, agg.metric});
    if (it == emp_index.end()) continue;
    const auto& emp = *it->second;
    agg.rel_mae = emp.mae > 0 ? agg.mae / emp.mae : std::numeric_limits<double>::quiet_NaN();
    for (int b = 0; b < 3; ++b)
      agg.rel_bin[b] = (agg.n_bin[b] && emp.n_bin[b] && emp.mae_bin[b] > 0)
                           ? agg.mae_bin[b] / emp.mae_bin[b]
                           : std::numeric_limits<double>::quiet_NaN();
  }
  return out;
}

// Long-format records plus the summary table, as CSV and JSON.
inline void experiment_emit(const ExperimentResult& result, const std::string& out_dir) {
  ensure_dir(out_dir);
  {
    std::string csv =
        "regime,size,rep,method,subpopulation,cell_size,metric,point,truth,"
        "in50,in95,in_range,width95,n_replicates,n_missing\n";
    for (const auto& r : result.records) {
      csv += r.regime + "," + std::to_string(r.size) + "," + std::to_string(r.rep) + "," +
             r.method + "," + detail::csv_escape(r.key.to_string()) + "," +
             std::to_string(r.cell_size) + "," + r.metric + ",";
      csv += detail::fmt_opt(r.point) + "," + detail::fmt_opt(r.truth) + ",";
      if (r.has_intervals) {
        csv += std::string(r.in50 ? "1" : "0") + "," + (r.in95 ? "1" : "0") + "," +
               (r.in_range ? "1" : "0") + "," + detail::format_double(r.width95);
      } else {
        csv += ",,,";
      }
      csv += "," + std::to_string(r.n_replicates) + "," + std::to_string(r.n_missing) + "\n";
    }
    write_text(out_dir + "/experiment_records.csv", csv);
  }
  nlohmann::json jsum = nlohmann::json::array();
  {
    std::string csv =
        "regime,size,method,metric,n_points,mae,rel_mae,"
        "mae_small,mae_mid,mae_large,rel_small,rel_mid,rel_large,"
        "n_small,n_mid,n_large,n_intervals,coverage50,coverage95,coverage_range,"
        "mean_width95,mean_nonmissing\n";
    auto fmt = [](double v) {
      return std::isfinite(v) ? detail::format_double(v) : std::string();
    };
    for (const auto& a : result.summary) {
      csv += a.regime + "," + std::to_string(a.size) + "," + a.method + "," + a.metric +
             "," + std::to_string(a.n_points) + "," + fmt(a.mae) + "," + fmt(a.rel_mae) +
             ",";
      for (int b = 0; b < 3; ++b) csv += fmt(a.mae_bin[b]) + ",";
      for (int b = 0; b < 3; ++b) csv += fmt(a.rel_bin[b]) + ",";
      for (int b = 0; b < 3; ++b) csv += std::to_string(a.n_bin[b]) + ",";
      csv += std::to_string(a.n_intervals) + "," + fmt(a.coverage50) + "," +
             fmt(a.coverage95) + "," + fmt(a.coverage_range) + "," + fmt(a.mean_width95) +
             "," + fmt(a.mean_nonmissing) + "\n";
      nlohmann::json row{{"regime", a.regime},
                         {"size", a.size},
                         {"method", a.method},
                         {"metric", a.metric},
                         {"n_points", a.n_points},
                         {"mae", a.mae},
                         {"rel_mae", a.rel_mae},
                         {"n_intervals", a.n_intervals},
                         {"coverage50", a.coverage50},
                         {"coverage95", a.coverage95},
                         {"coverage_range", a.coverage_range},
                         {"mean_width95", a.mean_width95},
                         {"mean_nonmissing", a.mean_nonmissing}};
      for (int b = 0; b < 3; ++b) {
        const char* names[] = {"small", "mid", "large"};
        row[std::string("mae_") + names[b]] =
            std::isfinite(a.mae_bin[b]) ? nlohmann::json(a.mae_bin[b]) : nullptr;
        row[std::string("rel_") + names[b]] =
            std::isfinite(a.rel_bin[b]) ? nlohmann::json(a.rel_bin[b]) : nullptr;
        row[std::string("n_") + names[b]] = a.n_bin[b];
      }
      jsum.push_back(std::move(row));
    }
    write_text(out_dir + "/experiment_summary.csv", csv);
  }
  write_text(out_dir + "/experiment_summary.json", jsum.dump(1) + "\n");
}

}  // namespace mbm
