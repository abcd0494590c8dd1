#pragma once

#include <cstdlib>
#include <json.hpp>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mbm/checking.hpp"
#include "mbm/dataset.hpp"
#include "mbm/errors.hpp"
#include "mbm/inference.hpp"
#include "mbm/io.hpp"
#include "mbm/metrics.hpp"
#include "mbm/predictive.hpp"
#include "mbm/resample.hpp"
#include "mbm/synth.hpp"

namespace mbm {

inline constexpr const char* kVersion = "0.1.0";

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

struct MetricsConfig {
  std::vector<std::string> kinds{"auc", "fpr", "ppv"};
  double fpr_target = 0.01;
  std::optional<double> threshold;  // explicit deployment threshold
};

struct ModelConfig {
  std::string formula;
  std::string sigma_formula;
  std::string sampler = "auto";  // auto | conjugate | hmc
};

struct SynthSourceConfig {
  std::string population_spec;
  std::string regime = "none";
  std::size_t n_pop = 200000;
  std::size_t subsample_n = 5000;
  double cutoff = 0.10;
};

struct CsvSourceConfig {
  std::string path;
  SchemaConfig schema;
};

struct ExperimentConfig {
  std::vector<std::string> regimes{"none"};
  std::vector<std::size_t> sizes{5000};
  int repetitions = 10;
};

struct RunConfig {
  std::uint64_t seed = 1;
  std::string output_dir = "out";
  std::optional<CsvSourceConfig> csv;
  std::optional<SynthSourceConfig> synth;
  std::vector<std::string> subpop_attrs;
  MetricsConfig metrics;
  std::vector<std::pair<std::string, ModelConfig>> models;
  PriorConfig priors;
  SamplerSettings sampler;
  int draws = 4000;
  int boot_replicates = 100;
  std::string boot_mode = "importance_weighted";
  int draws_out = 1000;
  std::vector<double> interval_levels{0.5, 0.95};
  int boot_threads = 0;
  CvSettings cv;
  bool run_cv = true;
  bool empirical_only = false;
  ExperimentConfig experiment;
  nlohmann::json raw;

  std::uint64_t hash() const { return config_hash(raw); }

  BootstrapPlan bootstrap_plan(std::uint64_t plan_seed) const {
    BootstrapPlan plan;
    plan.replicates = boot_replicates;
    plan.seed = plan_seed;
    plan.draws_out = draws_out;
    plan.interval_levels = interval_levels;
    plan.threads = boot_threads;
    if (boot_mode == "exact") plan.mode = BootstrapPlan::Mode::Exact;
    else if (boot_mode == "importance_weighted")
      plan.mode = BootstrapPlan::Mode::ImportanceWeighted;
    else throw ConfigError("unknown bootstrap mode '" + boot_mode + "'");
    return plan;
  }

  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::string& path) { return from_json(load_json(path)); }
};

namespace detail {

inline SchemaConfig schema_from_json(const nlohmann::json& j) {
  SchemaConfig cfg;
  try {
    for (const auto& a : j.at("attributes")) {
      AttrColumnConfig ac;
      ac.name = a.at("name").get<std::string>();
      ac.column = a.value("column", ac.name);
      if (a.contains("levels")) ac.levels = a.at("levels").get<std::vector<std::string>>();
      if (a.contains("bins")) {
        BinSpec bins;
        bins.edges = a.at("bins").at("edges").get<std::vector<double>>();
        if (bins.edges.size() < 2 ||
            !std::is_sorted(bins.edges.begin(), bins.edges.end()))
          throw ConfigError("attribute '" + ac.name + "': bin edges must be sorted");
        if (a.at("bins").contains("labels")) {
          bins.labels = a.at("bins").at("labels").get<std::vector<std::string>>();
          if (bins.labels.size() + 1 != bins.edges.size())
            throw ConfigError("attribute '" + ac.name + "': need one label per bin");
        }
        ac.bins = std::move(bins);
      }
      cfg.attributes.push_back(std::move(ac));
    }
    if (j.contains("covariates"))
      for (const auto& c : j.at("covariates")) {
        CovColumnConfig cc;
        cc.name = c.at("name").get<std::string>();
        cc.column = c.value("column", cc.name);
        cfg.covariates.push_back(std::move(cc));
      }
    cfg.label_column = j.at("label").get<std::string>();
    cfg.score_column = j.at("score").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("schema config: ") + e.what());
  }
  return cfg;
}

}  // namespace detail

inline RunConfig RunConfig::from_json(const nlohmann::json& j) {
  RunConfig cfg;
  cfg.raw = j;
  try {
    cfg.seed = j.value("seed", std::uint64_t{1});
    cfg.output_dir = j.value("output_dir", std::string("out"));
    if (const char* env = std::getenv("MBM_OUTPUT_DIR"); env && *env)
      cfg.output_dir = env;

    const auto& ds = j.at("dataset");
    if (ds.contains("csv")) {
      CsvSourceConfig src;
      src.path = ds.at("csv").get<std::string>();
      src.schema = detail::schema_from_json(ds.at("schema"));
      cfg.csv = std::move(src);
    }
    if (ds.contains("synth")) {
      const auto& s = ds.at("synth");
      SynthSourceConfig src;
      src.population_spec = s.at("population_spec").get<std::string>();
      src.regime = s.value("regime", std::string("none"));
      ScoreMechanism::parse(src.regime);  // validate early
      src.n_pop = s.value("n_pop", std::size_t{200000});
      src.subsample_n = s.value("subsample", std::size_t{5000});
      src.cutoff = s.value("cutoff", 0.10);
      cfg.synth = std::move(src);
    }
    if (cfg.csv.has_value() == cfg.synth.has_value())
      throw ConfigError("dataset must name exactly one of 'csv' or 'synth'");

    cfg.subpop_attrs = j.at("subpopulations").get<std::vector<std::string>>();

    if (j.contains("metrics")) {
      const auto& m = j.at("metrics");
      if (m.contains("kinds")) cfg.metrics.kinds = m.at("kinds").get<std::vector<std::string>>();
      cfg.metrics.fpr_target = m.value("fpr_target", 0.01);
      if (m.contains("threshold") && !m.at("threshold").is_null())
        cfg.metrics.threshold = m.at("threshold").get<double>();
    }
    if (cfg.metrics.kinds.empty()) throw ConfigError("at least one metric is required");
    for (const auto& k : cfg.metrics.kinds)
      if (k != "auc" && k != "fpr" && k != "ppv")
        throw ConfigError("unknown metric '" + k + "'");

    if (j.contains("priors")) {
      const auto& p = j.at("priors");
      cfg.priors.fixed_coef_sd = p.value("fixed_coef_sd", cfg.priors.fixed_coef_sd);
      cfg.priors.intercept_sd = p.value("intercept_sd", cfg.priors.intercept_sd);
      cfg.priors.group_sd_scale = p.value("group_sd_scale", cfg.priors.group_sd_scale);
      cfg.priors.resid_sd_scale = p.value("resid_sd_scale", cfg.priors.resid_sd_scale);
      cfg.priors.sigma_coef_sd = p.value("sigma_coef_sd", cfg.priors.sigma_coef_sd);
      cfg.priors.validate();
    }

    if (j.contains("models"))
      for (const auto& [name, m] : j.at("models").items()) {
        ModelConfig mc;
        mc.formula = m.at("formula").get<std::string>();
        mc.sigma_formula = m.value("sigma_formula", std::string());
        mc.sampler = m.value("sampler", std::string("auto"));
        if (mc.sampler != "auto" && mc.sampler != "conjugate" && mc.sampler != "hmc")
          throw ConfigError("model '" + name + "': unknown sampler '" + mc.sampler + "'");
        parse_formula(mc.formula, mc.sigma_formula, cfg.priors);  // validate early
        cfg.models.emplace_back(name, std::move(mc));
      }

    cfg.empirical_only = j.value("empirical_only", false);
    if (cfg.models.empty() && !cfg.empirical_only)
      throw ConfigError("configure at least one model or set empirical_only");

    if (j.contains("sampler")) {
      const auto& s = j.at("sampler");
      cfg.draws = s.value("draws", 4000);
      cfg.sampler.warmup = s.value("warmup", 1000);
      cfg.sampler.chains = s.value("chains", 4);
      cfg.sampler.target_accept = s.value("target_accept", 0.8);
      cfg.sampler.max_depth = s.value("max_depth", 10);
      cfg.sampler.adapt_mass = s.value("adapt_mass", true);
      cfg.sampler.non_centered = s.value("non_centered", true);
    }
    if (j.contains("bootstrap")) {
      const auto& b = j.at("bootstrap");
      cfg.boot_replicates = b.value("replicates", 100);
      cfg.boot_mode = b.value("mode", std::string("importance_weighted"));
      cfg.draws_out = b.value("draws_out", 1000);
      if (b.contains("levels")) cfg.interval_levels = b.at("levels").get<std::vector<double>>();
      cfg.boot_threads = b.value("threads", 0);
    }
    if (j.contains("cv")) {
      const auto& c = j.at("cv");
      cfg.run_cv = c.value("enabled", true);
      cfg.cv.folds = c.value("folds", 5);
      cfg.cv.margin_se = c.value("margin_se", 1.0);
      cfg.cv.fit_draws = c.value("fit_draws", 1000);
      cfg.cv.sampler = cfg.sampler;
      cfg.cv.sampler.chains = c.value("chains", 2);
      cfg.cv.sampler.warmup = c.value("warmup", 1000);
    } else {
      cfg.cv.sampler = cfg.sampler;
      cfg.cv.sampler.chains = 2;
    }
    if (j.contains("experiment")) {
      const auto& e = j.at("experiment");
      if (e.contains("regimes"))
        cfg.experiment.regimes = e.at("regimes").get<std::vector<std::string>>();
      if (e.contains("sizes"))
        cfg.experiment.sizes = e.at("sizes").get<std::vector<std::size_t>>();
      cfg.experiment.repetitions = e.value("repetitions", 10);
      for (const auto& r : cfg.experiment.regimes) ScoreMechanism::parse(r);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("run config: ") + e.what());
  }
  return cfg;
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

struct ReportRow {
  std::string method;  // "empirical" or the model name
  MetricEstimate est;
};

struct DiagnosticsSummary {
  int divergence_count = 0;
  double accept_rate = 1.0;
  double max_rhat = 1.0;
  double min_ess = 0.0;
  std::vector<std::string> warnings;
};

struct Report {
  std::string config_hash_hex;
  std::uint64_t seed = 0;
  std::string version = kVersion;
  double threshold = 0.0;
  std::string threshold_source;  // "explicit" | "population" | "dataset"
  std::vector<ReportRow> rows;
  std::map<std::string, std::vector<CellCheckResult>> checks;
  std::map<std::string, DiagnosticsSummary> diagnostics;
  std::vector<PointEstimate> truth;  // synth sources only
};

// --- JSON (de)serialization -------------------------------------------------

namespace detail {

inline nlohmann::json key_to_json(const SubpopKey& key) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, v] : key.bindings) j[k] = v;
  return j;
}

inline SubpopKey key_from_json(const nlohmann::json& j) {
  SubpopKey key;
  for (const auto& [k, v] : j.items()) key.bindings[k] = v.get<std::string>();
  return key;
}

inline nlohmann::json metric_to_json(const MetricKind& m) {
  nlohmann::json j{{"kind", m.name()}};
  if (m.kind != MetricKind::Kind::Auc) j["threshold"] = m.threshold;
  return j;
}

inline MetricKind metric_from_json(const nlohmann::json& j) {
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "auc") return MetricKind::auc();
  const double tau = j.at("threshold").get<double>();
  if (kind == "fpr") return MetricKind::fpr(tau);
  if (kind == "ppv") return MetricKind::ppv(tau);
  throw ConfigError("unknown metric kind '" + kind + "'");
}

inline nlohmann::json optional_to_json(const std::optional<double>& v) {
  if (!v) return nullptr;
  return *v;
}

inline nlohmann::json estimate_to_json(const MetricEstimate& e) {
  nlohmann::json j;
  j["key"] = key_to_json(e.key);
  j["n"] = e.cell_size;
  j["metric"] = metric_to_json(e.metric);
  j["point"] = optional_to_json(e.point);
  if (!e.point_error.empty()) j["point_error"] = e.point_error;
  j["provenance"] = e.provenance;
  if (!e.replicates.empty()) {
    j["n_replicates"] = e.replicates.size();
    j["n_missing"] = e.n_missing;
    nlohmann::json ivs = nlohmann::json::array();
    for (const auto& iv : e.intervals)
      ivs.push_back({{"level", iv.level}, {"lo", iv.lo}, {"hi", iv.hi}});
    j["intervals"] = ivs;
    if (std::isfinite(e.range_lo)) j["range"] = {e.range_lo, e.range_hi};
    nlohmann::json reps = nlohmann::json::array();
    for (double r : e.replicates)
      reps.push_back(std::isfinite(r) ? nlohmann::json(r) : nlohmann::json(nullptr));
    j["replicates"] = reps;
  }
  return j;
}

inline MetricEstimate estimate_from_json(const nlohmann::json& j) {
  MetricEstimate e;
  e.key = key_from_json(j.at("key"));
  e.cell_size = j.at("n").get<std::size_t>();
  e.metric = metric_from_json(j.at("metric"));
  if (!j.at("point").is_null()) e.point = j.at("point").get<double>();
  e.point_error = j.value("point_error", std::string());
  e.provenance = j.value("provenance", std::string());
  if (j.contains("replicates")) {
    for (const auto& r : j.at("replicates"))
      e.replicates.push_back(r.is_null() ? std::numeric_limits<double>::quiet_NaN()
                                         : r.get<double>());
    e.n_missing = j.value("n_missing", std::size_t{0});
    for (const auto& iv : j.at("intervals"))
      e.intervals.push_back({iv.at("level").get<double>(), iv.at("lo").get<double>(),
                             iv.at("hi").get<double>()});
    if (j.contains("range")) {
      e.range_lo = j.at("range").at(0).get<double>();
      e.range_hi = j.at("range").at(1).get<double>();
    }
  }
  return e;
}

inline nlohmann::json check_to_json(const CellCheckResult& c) {
  nlohmann::json j;
  j["key"] = key_to_json(c.key);
  j["class"] = c.label;
  j["n_scored"] = c.n_scored;
  j["n_paired"] = c.n_paired;
  j["model_ll"] = c.model_ll;
  j["kde_ll"] = std::isfinite(c.kde_ll) ? nlohmann::json(c.kde_ll) : nlohmann::json(nullptr);
  j["diff_se"] = c.diff_se;
  j["verdict"] = c.fallback() ? "fallback" : "model_ok";
  return j;
}

inline CellCheckResult check_from_json(const nlohmann::json& j) {
  CellCheckResult c;
  c.key = key_from_json(j.at("key"));
  c.label = j.at("class").get<int>();
  c.n_scored = j.at("n_scored").get<std::size_t>();
  c.n_paired = j.at("n_paired").get<std::size_t>();
  c.model_ll = j.at("model_ll").get<double>();
  c.kde_ll = j.at("kde_ll").is_null() ? std::numeric_limits<double>::quiet_NaN()
                                      : j.at("kde_ll").get<double>();
  c.diff_se = j.at("diff_se").get<double>();
  c.verdict = j.at("verdict").get<std::string>() == "fallback"
                  ? CellCheckResult::Verdict::Fallback
                  : CellCheckResult::Verdict::ModelOk;
  return c;
}

inline nlohmann::json point_to_json(const PointEstimate& p) {
  nlohmann::json j;
  j["key"] = key_to_json(p.key);
  j["n"] = p.cell_size;
  j["metric"] = metric_to_json(p.metric);
  j["value"] = optional_to_json(p.value);
  if (!p.error.empty()) j["error"] = p.error;
  j["provenance"] = p.provenance;
  return j;
}

inline PointEstimate point_from_json(const nlohmann::json& j) {
  PointEstimate p;
  p.key = key_from_json(j.at("key"));
  p.cell_size = j.at("n").get<std::size_t>();
  p.metric = metric_from_json(j.at("metric"));
  if (!j.at("value").is_null()) p.value = j.at("value").get<double>();
  p.error = j.value("error", std::string());
  p.provenance = j.value("provenance", std::string());
  return p;
}

}  // namespace detail

inline nlohmann::json report_to_json(const Report& r) {
  nlohmann::json j;
  j["manifest"] = {{"config_hash", r.config_hash_hex},
                   {"seed", r.seed},
                   {"version", r.version}};
  j["threshold"] = r.threshold;
  j["threshold_source"] = r.threshold_source;
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.rows) {
    nlohmann::json e = detail::estimate_to_json(row.est);
    e["method"] = row.method;
    rows.push_back(std::move(e));
  }
  j["estimates"] = rows;
  nlohmann::json checks = nlohmann::json::object();
  for (const auto& [model, list] : r.checks) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& c : list) arr.push_back(detail::check_to_json(c));
    checks[model] = std::move(arr);
  }
  j["checks"] = checks;
  nlohmann::json diags = nlohmann::json::object();
  for (const auto& [model, d] : r.diagnostics)
    diags[model] = {{"divergences", d.divergence_count},
                    {"accept_rate", d.accept_rate},
                    {"max_rhat", d.max_rhat},
                    {"min_ess", d.min_ess},
                    {"warnings", d.warnings}};
  j["diagnostics"] = diags;
  nlohmann::json truth = nlohmann::json::array();
  for (const auto& t : r.truth) truth.push_back(detail::point_to_json(t));
  j["truth"] = truth;
  return j;
}

inline Report report_from_json(const nlohmann::json& j) {
  Report r;
  r.config_hash_hex = j.at("manifest").at("config_hash").get<std::string>();
  r.seed = j.at("manifest").at("seed").get<std::uint64_t>();
  r.version = j.at("manifest").at("version").get<std::string>();
  r.threshold = j.at("threshold").get<double>();
  r.threshold_source = j.at("threshold_source").get<std::string>();
  for (const auto& e : j.at("estimates")) {
    ReportRow row;
    row.method = e.at("method").get<std::string>();
    row.est = detail::estimate_from_json(e);
    r.rows.push_back(std::move(row));
  }
  for (const auto& [model, arr] : j.at("checks").items()) {
    std::vector<CellCheckResult> list;
    for (const auto& c : arr) list.push_back(detail::check_from_json(c));
    r.checks[model] = std::move(list);
  }
  for (const auto& [model, d] : j.at("diagnostics").items()) {
    DiagnosticsSummary ds;
    ds.divergence_count = d.at("divergences").get<int>();
    ds.accept_rate = d.at("accept_rate").get<double>();
    ds.max_rhat = d.at("max_rhat").get<double>();
    ds.min_ess = d.at("min_ess").get<double>();
    ds.warnings = d.at("warnings").get<std::vector<std::string>>();
    r.diagnostics[model] = std::move(ds);
  }
  for (const auto& t : j.at("truth")) r.truth.push_back(detail::point_from_json(t));
  return r;
}

// ---------------------------------------------------------------------------
// Pipeline stages
// ---------------------------------------------------------------------------

struct ResolvedData {
  EvalDataset dataset;
  std::optional<GroundTruth> truth;
  std::optional<EvalDataset> population;  // synth sources only
};

// Builds the evaluation dataset from the configured source. Synthetic
// sources also produce the full population and its ground-truth metrics.
inline ResolvedData resolve_dataset(const RunConfig& cfg, bool keep_population = false) {
  ResolvedData out;
  if (cfg.csv) {
    out.dataset = load_csv(cfg.csv->path, cfg.csv->schema);
    return out;
  }
  const auto& s = *cfg.synth;
  SeedSequence seeds(cfg.seed);
  auto pop_spec = PopulationSpec::load(s.population_spec);
  auto pop = generate_population(pop_spec, builtin_logistic_risk(), s.cutoff, s.n_pop,
                                 seeds.derive("generate"));
  auto scores = simulate_scores(pop, ScoreMechanism::parse(s.regime), seeds.derive("scores"));
  EvalDataset full = with_scores(pop, std::move(scores));
  out.truth = ground_truth(full, cfg.subpop_attrs, cfg.metrics.fpr_target);
  out.dataset = subsample(full, std::min(s.subsample_n, full.size()), seeds.derive("subsample"));
  if (keep_population) out.population = std::move(full);
  return out;
}

namespace detail {

inline std::vector<MetricKind> metric_kinds(const MetricsConfig& cfg, double threshold) {
  std::vector<MetricKind> kinds;
  for (const auto& k : cfg.kinds) {
    if (k == "auc") kinds.push_back(MetricKind::auc());
    else if (k == "fpr") kinds.push_back(MetricKind::fpr(threshold));
    else kinds.push_back(MetricKind::ppv(threshold));
  }
  return kinds;
}

inline std::vector<SubpopKey> subpop_keys(const EvalDataset& d,
                                          const std::vector<std::string>& attrs) {
  std::vector<SubpopKey> keys{SubpopKey{}};
  for (const auto& [key, count] : enumerate_subpops(d, attrs)) keys.push_back(key);
  return keys;
}

}  // namespace detail

// Fits (or loads from the run cache) the posterior for one configured model.
inline std::pair<PosteriorDraws, DiagnosticsSummary> fit_model(
    const RunConfig& cfg, const std::string& name, const ModelConfig& mc,
    const EvalDataset& d) {
  auto spec = parse_formula(mc.formula, mc.sigma_formula, cfg.priors);
  const std::string cache_dir = cfg.output_dir + "/cache";
  const std::string path =
      cache_dir + "/draws-" + name + "-" + hash_hex(cfg.hash()) + ".bin";
  DiagnosticsSummary diag;
  if (std::filesystem::exists(path)) {
    try {
      return {load_draws(path, spec, d), diag};
    } catch (const Error&) {
      // stale or corrupt cache entry; refit below
    }
  }
  SeedSequence seeds(cfg.seed);
  const std::uint64_t fit_seed = seeds.derive("fit:" + name);
  PosteriorDraws draws;
  if (mc.sampler == "conjugate" ||
      (mc.sampler == "auto" && !spec.has_random_effects() && !spec.heteroscedastic())) {
    draws = sample_conjugate(spec, d, cfg.draws, fit_seed, cfg.sampler.warmup);
  } else {
    auto [dd, sd] = sample_mcmc(spec, d, cfg.draws, fit_seed, cfg.sampler);
    draws = std::move(dd);
    diag.divergence_count = sd.divergence_count;
    diag.accept_rate = sd.accept_rate;
    diag.max_rhat = sd.max_rhat;
    diag.min_ess = sd.min_ess;
    diag.warnings = sd.warnings;
  }
  ensure_dir(cache_dir);
  save_draws(draws, path);
  return {std::move(draws), std::move(diag)};
}

// Executes the full procedure: empirical estimates, then per model
// fit -> check -> model-based metrics -> bootstrap -> fallback merge.
// Per-cell estimator failures are soft; configuration and IO errors throw.
inline Report run_pipeline(const RunConfig& cfg, bool with_bootstrap = true) {
  auto resolved = resolve_dataset(cfg);
  const EvalDataset& d = resolved.dataset;

  Report report;
  report.config_hash_hex = hash_hex(cfg.hash());
  report.seed = cfg.seed;

  if (cfg.metrics.threshold) {
    report.threshold = *cfg.metrics.threshold;
    report.threshold_source = "explicit";
  } else if (resolved.truth) {
    report.threshold = resolved.truth->threshold;
    report.threshold_source = "population";
  } else {
    report.threshold = threshold_for_fpr(ScoreSample::from_dataset(d), cfg.metrics.fpr_target);
    report.threshold_source = "dataset";
  }
  const auto kinds = detail::metric_kinds(cfg.metrics, report.threshold);
  const auto keys = detail::subpop_keys(d, cfg.subpop_attrs);
  if (resolved.truth) report.truth = resolved.truth->cells;

  SeedSequence seeds(cfg.seed);

  // Empirical estimates (always computed; they are the fallback source).
  std::vector<MetricEstimate> empirical;
  if (with_bootstrap) {
    BootstrapPlan plan = cfg.bootstrap_plan(seeds.derive("bootstrap:empirical"));
    plan.mode = BootstrapPlan::Mode::Empirical;
    empirical = empirical_bootstrap(d, plan, keys, kinds).estimates;
  } else {
    for (const auto& key : keys) {
      const std::size_t size = d.match_rows(key).size();
      for (const auto& m : kinds) {
        MetricEstimate est;
        est.key = key;
        est.cell_size = size;
        est.metric = m;
        est.provenance = "empirical";
        try {
          est.point = empirical_estimate(d, key, m);
        } catch (const Error& e) {
          est.point_error = e.what();
        }
        empirical.push_back(std::move(est));
      }
    }
  }
  for (const auto& est : empirical) report.rows.push_back({"empirical", est});

  if (cfg.empirical_only) return report;

  for (const auto& [name, mc] : cfg.models) {
    auto spec = parse_formula(mc.formula, mc.sigma_formula, cfg.priors);
    auto [draws, diag] = fit_model(cfg, name, mc, d);
    if (diag.min_ess > 0 || diag.divergence_count > 0 || !diag.warnings.empty() ||
        diag.max_rhat != 1.0)
      report.diagnostics[name] = diag;

    std::vector<CellCheckResult> checks;
    if (cfg.run_cv) {
      checks = cv_compare(spec, d, cfg.subpop_attrs, cfg.cv, seeds.derive("cv:" + name));
      report.checks[name] = checks;
    }

    std::vector<MetricEstimate> ests;
    if (with_bootstrap) {
      BootstrapPlan plan = cfg.bootstrap_plan(seeds.derive("bootstrap"));
      auto res = mbm_bootstrap(spec, draws, d, plan, keys, kinds, cfg.sampler);
      ests = std::move(res.estimates);
    } else {
      auto sims = simulate_predictive(spec, draws, d, seeds.derive("sims:" + name));
      for (const auto& key : keys) {
        const std::size_t size = d.match_rows(key).size();
        for (const auto& m : kinds) {
          MetricEstimate est;
          est.key = key;
          est.cell_size = size;
          est.metric = m;
          est.provenance = "mbm";
          try {
            est.point = mbm_estimate(sims, key, m);
          } catch (const Error& e) {
            est.point_error = e.what();
          }
          ests.push_back(std::move(est));
        }
      }
    }

    // Fallback merge: any flagged class stratum reverts the whole cell to
    // the empirical estimate.
    if (!checks.empty()) {
      std::map<std::string, bool> falls_back;
      for (const auto& c : checks) {
        auto& flag = falls_back[c.key.to_string()];
        flag = flag || c.fallback();
      }
      std::map<std::pair<std::string, std::string>, const MetricEstimate*> emp_index;
      for (const auto& e : empirical)
        emp_index[{e.key.to_string(), e.metric.name()}] = &e;
      for (auto& est : ests) {
        auto fb = falls_back.find(est.key.to_string());
        if (fb == falls_back.end() || !fb->second) continue;
        auto emp = emp_index.find({est.key.to_string(), est.metric.name()});
        if (emp == emp_index.end()) continue;  // whole-population key has no checks
        est = *emp->second;
        est.provenance = "fallback";
      }
    }
    for (auto& est : ests) report.rows.push_back({name, std::move(est)});
  }
  return report;
}

// ---------------------------------------------------------------------------
// Report emission
// ---------------------------------------------------------------------------

namespace detail {

inline std::string fmt_opt(const std::optional<double>& v) {
  return v ? format_double(*v) : std::string();
}

inline const MetricEstimate::Interval* find_interval(const MetricEstimate& e, double level) {
  for (const auto& iv : e.intervals)
    if (std::abs(iv.level - level) < 1e-9) return &iv;
  return nullptr;
}

}  // namespace detail

// Writes report.json plus flat CSV tables (estimates, checks, forest-plot
// long format). Deterministic column and row order.
inline void report_emit(const Report& report, const std::string& out_dir) {
  ensure_dir(out_dir);
  write_text(out_dir + "/report.json", report_to_json(report).dump(1) + "\n");

  std::map<std::pair<std::string, std::string>, double> truth_index;
  for (const auto& t : report.truth)
    if (t.value) truth_index[{t.key.to_string(), t.metric.name()}] = *t.value;

  {
    std::string csv =
        "method,subpopulation,n,metric,threshold,point,point_error,lo50,hi50,lo95,hi95,"
        "range_lo,range_hi,n_replicates,n_missing,provenance,truth\n";
    for (const auto& row : report.rows) {
      const auto& e = row.est;
      const auto* iv50 = detail::find_interval(e, 0.5);
      const auto* iv95 = detail::find_interval(e, 0.95);
      csv += row.method + "," + detail::csv_escape(e.key.to_string()) + "," +
             std::to_string(e.cell_size) + "," + e.metric.name() + ",";
      csv += (e.metric.kind == MetricKind::Kind::Auc
                  ? std::string()
                  : detail::format_double(e.metric.threshold)) +
             ",";
      csv += detail::fmt_opt(e.point) + "," + detail::csv_escape(e.point_error) + ",";
      csv += (iv50 ? detail::format_double(iv50->lo) : "") + ",";
      csv += (iv50 ? detail::format_double(iv50->hi) : "") + ",";
      csv += (iv95 ? detail::format_double(iv95->lo) : "") + ",";
      csv += (iv95 ? detail::format_double(iv95->hi) : "") + ",";
      csv += (std::isfinite(e.range_lo) ? detail::format_double(e.range_lo) : "") + ",";
      csv += (std::isfinite(e.range_hi) ? detail::format_double(e.range_hi) : "") + ",";
      csv += std::to_string(e.replicates.size()) + "," + std::to_string(e.n_missing) + ",";
      csv += e.provenance + ",";
      auto t = truth_index.find({e.key.to_string(), e.metric.name()});
      csv += t == truth_index.end() ? "" : detail::format_double(t->second);
      csv += "\n";
    }
    write_text(out_dir + "/estimates.csv", csv);
  }

  // Relative NLL per (cell, class): model and KDE side by side, scaled so
  // the KDE sits at 1 (lower is better).
  {
    std::string csv =
        "model,subpopulation,class,n_scored,n_paired,model_nll,kde_nll,rel_nll,verdict\n";
    for (const auto& [model, checks] : report.checks) {
      for (const auto& c : checks) {
        const double model_nll = -c.model_ll;
        const double kde_nll = -c.kde_ll;
        csv += model + "," + detail::csv_escape(c.key.to_string()) + "," +
               std::to_string(c.label) + "," + std::to_string(c.n_scored) + "," +
               std::to_string(c.n_paired) + "," + detail::format_double(model_nll) + ",";
        csv += std::isfinite(kde_nll) ? detail::format_double(kde_nll) : "";
        csv += ",";
        csv += (std::isfinite(kde_nll) && kde_nll != 0.0)
                   ? detail::format_double(model_nll / kde_nll)
                   : "";
        csv += ",";
        csv += c.fallback() ? "fallback" : "model_ok";
        csv += "\n";
      }
    }
    write_text(out_dir + "/checks.csv", csv);
  }

  // Forest-plot long format.
  {
    std::string csv = "subpopulation,n,method,metric,point,lo95,hi95,truth,provenance\n";
    for (const auto& row : report.rows) {
      const auto& e = row.est;
      const auto* iv95 = detail::find_interval(e, 0.95);
      csv += detail::csv_escape(e.key.to_string()) + "," + std::to_string(e.cell_size) +
             "," + row.method + "," + e.metric.name() + ",";
      csv += detail::fmt_opt(e.point) + ",";
      csv += (iv95 ? detail::format_double(iv95->lo) : "") + ",";
      csv += (iv95 ? detail::format_double(iv95->hi) : "") + ",";
      auto t = truth_index.find({e.key.to_string(), e.metric.name()});
      csv += (t == truth_index.end() ? "" : detail::format_double(t->second)) + ",";
      csv += e.provenance;
      csv += "\n";
    }
    write_text(out_dir + "/forest.csv", csv);
  }
}

}  // namespace mbm
