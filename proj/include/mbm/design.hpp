#pragma once

#include <Eigen/Dense>
#include <optional>
#include <string>
#include <vector>

#include "mbm/dataset.hpp"
#include "mbm/errors.hpp"
#include "mbm/formula.hpp"

namespace mbm {

// Random-intercept block: one coefficient per level of the (possibly crossed)
// grouping factor. Levels come from the schema cross product, so cells never
// observed in the data keep their column and are informed by the prior alone.
struct RandomGroup {
  std::string name;
  std::vector<std::string> level_names;
  std::vector<int> cell;  // per-row level index

  int n_levels() const { return static_cast<int>(level_names.size()); }
};

// Fixed-effect block (dense, reference-level encoded) plus random-intercept
// groups (index form; materialized one-hot only on demand).
struct Design {
  Eigen::MatrixXd fixed;  // N x P
  std::vector<std::string> fixed_names;
  std::vector<RandomGroup> groups;

  std::size_t rows() const { return static_cast<std::size_t>(fixed.rows()); }
  int fixed_cols() const { return static_cast<int>(fixed.cols()); }

  int total_cols() const {
    int p = fixed_cols();
    for (const auto& g : groups) p += g.n_levels();
    return p;
  }

  // Flat layout: fixed columns first, then each group's level columns.
  std::vector<std::string> column_names() const {
    std::vector<std::string> names = fixed_names;
    for (const auto& g : groups)
      for (const auto& l : g.level_names) names.push_back(g.name + "[" + l + "]");
    return names;
  }

  // Group id per flat column; -1 for fixed-effect columns.
  std::vector<int> group_index() const {
    std::vector<int> idx(static_cast<std::size_t>(total_cols()), -1);
    std::size_t c = static_cast<std::size_t>(fixed_cols());
    for (std::size_t g = 0; g < groups.size(); ++g)
      for (int l = 0; l < groups[g].n_levels(); ++l) idx[c++] = static_cast<int>(g);
    return idx;
  }

  // One-hot materialization of the full design; intended for tests and
  // small-model inspection, not the fitting path.
  Eigen::MatrixXd dense() const {
    Eigen::MatrixXd out(fixed.rows(), total_cols());
    out.leftCols(fixed.cols()) = fixed;
    int offset = fixed_cols();
    for (const auto& g : groups) {
      out.middleCols(offset, g.n_levels()).setZero();
      for (std::size_t n = 0; n < g.cell.size(); ++n)
        out(static_cast<Eigen::Index>(n), offset + g.cell[n]) = 1.0;
      offset += g.n_levels();
    }
    return out;
  }
};

// Single-record design row: fixed part dense, random part as cell indices.
struct DesignRow {
  Eigen::VectorXd fixed;
  std::vector<int> group_cells;  // aligned with Design::groups

  Eigen::VectorXd dense(const Design& d) const {
    Eigen::VectorXd out = Eigen::VectorXd::Zero(d.total_cols());
    out.head(fixed.size()) = fixed;
    int offset = d.fixed_cols();
    for (std::size_t g = 0; g < d.groups.size(); ++g) {
      out(offset + group_cells[g]) = 1.0;
      offset += d.groups[g].n_levels();
    }
    return out;
  }
};

struct DesignSet {
  Design mean;
  std::optional<Design> sigma;
};

struct DesignRowSet {
  DesignRow mean;
  std::optional<DesignRow> sigma;
};

namespace detail {

// Resolves a formula symbol against the dataset schema. The reserved name
// "Y" denotes the binary label, entering as a categorical factor {0,1},
// unless an attribute or covariate shadows it.
struct FactorRef {
  enum class Kind { Attribute, Covariate, Label } kind;
  int pos = -1;  // attr/cov position

  bool categorical() const { return kind != Kind::Covariate; }
};

inline FactorRef resolve_symbol(const EvalDataset& d, const std::string& name) {
  if (int a = d.attr_pos(name); a >= 0) return {FactorRef::Kind::Attribute, a};
  if (int c = d.cov_pos(name); c >= 0) return {FactorRef::Kind::Covariate, c};
  if (name == "Y") return {FactorRef::Kind::Label, -1};
  throw NameError("name '" + name +
                  "' does not resolve to an attribute, covariate, or the label Y");
}

inline const std::vector<std::string>& factor_levels(const EvalDataset& d,
                                                     const FactorRef& ref) {
  static const std::vector<std::string> label_levels = {"0", "1"};
  if (ref.kind == FactorRef::Kind::Label) return label_levels;
  return d.attr_schema()[ref.pos].levels;
}

inline int factor_code(const EvalDataset& d, const FactorRef& ref, std::size_t n) {
  if (ref.kind == FactorRef::Kind::Label) return d.label(n);
  return d.attr_code(static_cast<std::size_t>(ref.pos), n);
}

inline int factor_code(const EvalDataset& d, const FactorRef& ref, const ProtoRecord& rec,
                       const std::string& name) {
  if (ref.kind == FactorRef::Kind::Label) {
    if (rec.label != 0 && rec.label != 1)
      throw ValidationError("record label must be 0 or 1");
    return rec.label;
  }
  auto it = rec.attrs.find(name);
  if (it == rec.attrs.end()) throw SchemaError("record missing attribute '" + name + "'");
  int code = d.attr_schema()[ref.pos].level_index(it->second);
  if (code < 0)
    throw LevelError("level '" + it->second + "' of attribute '" + name +
                     "' not present in schema");
  return code;
}

// Shared between whole-dataset and single-row construction so the two can
// never drift apart in column layout.
template <typename CatCode, typename CovValue>
inline void emit_fixed_row(const EvalDataset& d, const std::vector<Term>& terms,
                           CatCode cat_code, CovValue cov_value, double* row) {
  std::size_t c = 0;
  for (const auto& t : terms) {
    switch (t.kind) {
      case Term::Kind::Intercept:
        row[c++] = 1.0;
        break;
      case Term::Kind::Symbol: {
        auto ref = resolve_symbol(d, t.a);
        if (ref.categorical()) {
          const auto& levels = factor_levels(d, ref);
          int code = cat_code(ref, t.a);
          for (std::size_t l = 1; l < levels.size(); ++l)
            row[c++] = (code == static_cast<int>(l)) ? 1.0 : 0.0;
        } else {
          row[c++] = cov_value(ref, t.a);
        }
        break;
      }
      case Term::Kind::Pair: {
        auto ra = resolve_symbol(d, t.a);
        auto rb = resolve_symbol(d, t.b);
        if (!ra.categorical() || !rb.categorical())
          throw NameError("interaction '" + t.to_string() +
                          "' requires categorical factors");
        const auto& la = factor_levels(d, ra);
        const auto& lb = factor_levels(d, rb);
        int ca = cat_code(ra, t.a), cb = cat_code(rb, t.b);
        for (std::size_t i = 1; i < la.size(); ++i)
          for (std::size_t j = 1; j < lb.size(); ++j)
            row[c++] = (ca == static_cast<int>(i) && cb == static_cast<int>(j)) ? 1.0 : 0.0;
        break;
      }
    }
  }
}

inline std::vector<std::string> fixed_column_names(const EvalDataset& d,
                                                   const std::vector<Term>& terms) {
  std::vector<std::string> names;
  for (const auto& t : terms) {
    switch (t.kind) {
      case Term::Kind::Intercept:
        names.push_back("intercept");
        break;
      case Term::Kind::Symbol: {
        auto ref = resolve_symbol(d, t.a);
        if (ref.categorical()) {
          const auto& levels = factor_levels(d, ref);
          for (std::size_t l = 1; l < levels.size(); ++l)
            names.push_back(t.a + "[" + levels[l] + "]");
        } else {
          names.push_back(t.a);
        }
        break;
      }
      case Term::Kind::Pair: {
        auto ra = resolve_symbol(d, t.a);
        auto rb = resolve_symbol(d, t.b);
        if (!ra.categorical() || !rb.categorical())
          throw NameError("interaction '" + t.to_string() +
                          "' requires categorical factors");
        const auto& la = factor_levels(d, ra);
        const auto& lb = factor_levels(d, rb);
        for (std::size_t i = 1; i < la.size(); ++i)
          for (std::size_t j = 1; j < lb.size(); ++j)
            names.push_back(t.a + "[" + la[i] + "]:" + t.b + "[" + lb[j] + "]");
        break;
      }
    }
  }
  return names;
}

inline RandomGroup build_group(const EvalDataset& d, const GroupExpr& expr) {
  RandomGroup g;
  g.name = expr.name();
  std::vector<FactorRef> refs;
  for (const auto& f : expr.factors) {
    auto ref = resolve_symbol(d, f);
    if (!ref.categorical())
      throw NameError("random intercept group '" + g.name +
                      "' requires categorical factors");
    refs.push_back(ref);
  }
  if (refs.size() == 1) {
    g.level_names = factor_levels(d, refs[0]);
    g.cell.resize(d.size());
    for (std::size_t n = 0; n < d.size(); ++n) g.cell[n] = factor_code(d, refs[0], n);
  } else {
    const auto& la = factor_levels(d, refs[0]);
    const auto& lb = factor_levels(d, refs[1]);
    for (const auto& x : la)
      for (const auto& y : lb) g.level_names.push_back(x + ":" + y);
    g.cell.resize(d.size());
    const int Lb = static_cast<int>(lb.size());
    for (std::size_t n = 0; n < d.size(); ++n)
      g.cell[n] = factor_code(d, refs[0], n) * Lb + factor_code(d, refs[1], n);
  }
  return g;
}

inline int group_cell_for_record(const EvalDataset& d, const GroupExpr& expr,
                                 const ProtoRecord& rec) {
  std::vector<FactorRef> refs;
  for (const auto& f : expr.factors) refs.push_back(resolve_symbol(d, f));
  if (refs.size() == 1) return factor_code(d, refs[0], rec, expr.factors[0]);
  const int Lb = static_cast<int>(factor_levels(d, refs[1]).size());
  return factor_code(d, refs[0], rec, expr.factors[0]) * Lb +
         factor_code(d, refs[1], rec, expr.factors[1]);
}

inline Design build_one_design(const EvalDataset& d, const std::vector<Term>& terms,
                               const std::vector<GroupExpr>& group_exprs) {
  Design out;
  out.fixed_names = fixed_column_names(d, terms);
  const auto P = static_cast<Eigen::Index>(out.fixed_names.size());
  out.fixed.resize(static_cast<Eigen::Index>(d.size()), P);
  std::vector<double> row(out.fixed_names.size());
  for (std::size_t n = 0; n < d.size(); ++n) {
    emit_fixed_row(
        d, terms,
        [&](const FactorRef& ref, const std::string&) { return factor_code(d, ref, n); },
        [&](const FactorRef& ref, const std::string&) {
          return d.covariate(static_cast<std::size_t>(ref.pos), n);
        },
        row.data());
    for (Eigen::Index p = 0; p < P; ++p) out.fixed(static_cast<Eigen::Index>(n), p) = row[p];
  }
  for (const auto& expr : group_exprs) out.groups.push_back(build_group(d, expr));
  return out;
}

inline DesignRow build_one_row(const EvalDataset& d, const std::vector<Term>& terms,
                               const std::vector<GroupExpr>& group_exprs,
                               const ProtoRecord& rec) {
  DesignRow out;
  auto names = fixed_column_names(d, terms);
  out.fixed.resize(static_cast<Eigen::Index>(names.size()));
  std::vector<double> row(names.size());
  emit_fixed_row(
      d, terms,
      [&](const FactorRef& ref, const std::string& name) {
        return factor_code(d, ref, rec, name);
      },
      [&](const FactorRef& ref, const std::string& name) {
        auto it = rec.covariates.find(name);
        if (it == rec.covariates.end())
          throw SchemaError("record missing covariate '" + name + "'");
        return it->second;
      },
      row.data());
  for (std::size_t p = 0; p < row.size(); ++p)
    out.fixed(static_cast<Eigen::Index>(p)) = row[p];
  for (const auto& expr : group_exprs)
    out.group_cells.push_back(group_cell_for_record(d, expr, rec));
  return out;
}

}  // namespace detail

// Builds the mean design matrix (and the variance design when the spec is
// heteroscedastic). Column ordering is deterministic: terms in formula order,
// levels in schema order, reference (first) level dropped for fixed effects.
inline DesignSet build_design(const ModelSpec& spec, const EvalDataset& d) {
  if (d.size() == 0) throw ValidationError("cannot build a design for an empty dataset");
  DesignSet out;
  out.mean = detail::build_one_design(d, spec.mean_terms, spec.random_groups);
  if (spec.heteroscedastic())
    out.sigma = detail::build_one_design(d, *spec.sigma_terms, spec.sigma_random_groups);
  return out;
}

// Design row for one record (score not required); same column layout as
// build_design over the same schema.
inline DesignRowSet predict_design_row(const ModelSpec& spec, const EvalDataset& schema_source,
                                       const ProtoRecord& rec) {
  DesignRowSet out;
  out.mean = detail::build_one_row(schema_source, spec.mean_terms, spec.random_groups, rec);
  if (spec.heteroscedastic())
    out.sigma =
        detail::build_one_row(schema_source, *spec.sigma_terms, spec.sigma_random_groups, rec);
  return out;
}

}  // namespace mbm
