#include <catch2/catch_amalgamated.hpp>

#include "mbm/dataset.hpp"
#include "mbm/design.hpp"
#include "mbm/formula.hpp"

using namespace mbm;

namespace {

// Two attributes, one binary label, one covariate; enough to exercise every
// term kind.
EvalDataset tiny_dataset() {
  EvalDataset d({{"g", {"u", "v"}}, {"r", {"p", "q", "w"}}}, {"bmi"});
  auto add = [&](const char* g, const char* r, double bmi, int y, double s) {
    EvalRecord rec;
    rec.attrs["g"] = g;
    rec.attrs["r"] = r;
    rec.covariates["bmi"] = bmi;
    rec.label = y;
    rec.score = s;
    d.append(rec);
  };
  add("u", "p", 20.0, 0, -1.0);
  add("u", "q", 25.0, 0, -0.5);
  add("v", "p", 30.0, 1, 0.5);
  add("v", "w", 35.0, 1, 1.0);
  return d;
}

}  // namespace

TEST_CASE("simple formula parses mains with implicit intercept") {
  auto spec = parse_formula("S ~ g + Y");
  REQUIRE(spec.mean_terms.size() == 3);
  CHECK(spec.mean_terms[0] == Term::intercept());
  CHECK(spec.mean_terms[1] == Term::symbol("g"));
  CHECK(spec.mean_terms[2] == Term::symbol("Y"));
  CHECK(spec.random_groups.empty());
  CHECK_FALSE(spec.heteroscedastic());
}

TEST_CASE("pairwise expansion yields k mains plus k(k-1)/2 pairs") {
  auto spec = parse_formula("S ~ (a+b+c)^2");
  // mains a,b,c then ab,ac,bc
  REQUIRE(spec.mean_terms.size() == 1 + 3 + 3);
  CHECK(spec.mean_terms[4] == Term::pair("a", "b"));
  CHECK(spec.mean_terms[5] == Term::pair("a", "c"));

  // Brute-force enumeration oracle for k up to 8.
  for (int k = 1; k <= 8; ++k) {
    std::string names;
    for (int i = 0; i < k; ++i) names += (i ? "+x" : "x") + std::to_string(i);
    auto s = parse_formula("S ~ (" + names + ")^2");
    std::size_t pairs = 0;
    for (int i = 0; i < k; ++i)
      for (int j = i + 1; j < k; ++j) ++pairs;
    CHECK(s.mean_terms.size() == 1 + static_cast<std::size_t>(k) + pairs);
  }
}

TEST_CASE("random intercept expansion covers marginals and crossings") {
  auto spec = parse_formula("S ~ (1 | (gender+race)^2) + bmi");
  REQUIRE(spec.random_groups.size() == 3);
  CHECK(spec.random_groups[0].name() == "gender");
  CHECK(spec.random_groups[1].name() == "race");
  CHECK(spec.random_groups[2].name() == "gender:race");
  REQUIRE(spec.mean_terms.size() == 2);
  CHECK(spec.mean_terms[1] == Term::symbol("bmi"));
}

TEST_CASE("sigma formula marks heteroscedasticity") {
  auto spec = parse_formula("S ~ g", "sigma ~ g + Y");
  REQUIRE(spec.heteroscedastic());
  CHECK(spec.sigma_terms->size() == 3);
  CHECK_THROWS_AS(parse_formula("S ~ g", "tau ~ g"), FormulaSyntaxError);
}

TEST_CASE("syntax errors carry a position") {
  CHECK_THROWS_MATCHES(parse_formula("S ~ g + + Y"), FormulaSyntaxError,
                       Catch::Matchers::MessageMatches(
                           Catch::Matchers::ContainsSubstring("position")));
  CHECK_THROWS_AS(parse_formula("S ~ (a+b)^3"), FormulaSyntaxError);
  CHECK_THROWS_AS(parse_formula("S ~ g * Y"), FormulaSyntaxError);
  CHECK_THROWS_AS(parse_formula("S ~ (1 | (1 | g))"), FormulaSyntaxError);
  CHECK_THROWS_AS(parse_formula("~ g"), FormulaSyntaxError);
}

TEST_CASE("print/parse round trip") {
  auto spec = parse_formula("S ~ (a+b)^2 + bmi + (1 | (g+r)^2)", "sigma ~ g");
  auto spec2 = parse_formula(print_formula(spec), print_sigma_formula(spec));
  CHECK(spec2 == spec);
}

TEST_CASE("design matrix uses reference encoding for fixed effects") {
  auto d = tiny_dataset();
  auto spec = parse_formula("S ~ Y");
  auto ds = build_design(spec, d);
  REQUIRE(ds.mean.fixed_names == std::vector<std::string>{"intercept", "Y[1]"});
  Eigen::MatrixXd expected(4, 2);
  expected << 1, 0, 1, 0, 1, 1, 1, 1;
  CHECK(ds.mean.fixed == expected);
  CHECK_FALSE(ds.sigma.has_value());
}

TEST_CASE("random intercepts use one column per level") {
  auto d = tiny_dataset();
  auto spec = parse_formula("S ~ (1 | g)");
  auto ds = build_design(spec, d);
  REQUIRE(ds.mean.groups.size() == 1);
  CHECK(ds.mean.groups[0].name == "g");
  CHECK(ds.mean.groups[0].level_names == std::vector<std::string>{"u", "v"});
  CHECK(ds.mean.groups[0].cell == std::vector<int>{0, 0, 1, 1});
  auto gi = ds.mean.group_index();
  REQUIRE(gi.size() == 3);  // intercept + 2 level columns
  CHECK(gi[0] == -1);
  CHECK(gi[1] == 0);
  CHECK(gi[2] == 0);
}

TEST_CASE("crossed random group enumerates the schema cross product") {
  auto d = tiny_dataset();
  auto spec = parse_formula("S ~ (1 | g:r)");
  auto ds = build_design(spec, d);
  REQUIRE(ds.mean.groups.size() == 1);
  // 2 x 3 levels even though only 4 combinations are observed.
  CHECK(ds.mean.groups[0].n_levels() == 6);
  CHECK(ds.mean.groups[0].level_names[0] == "u:p");
  CHECK(ds.mean.groups[0].cell == std::vector<int>{0, 1, 3, 5});
}

TEST_CASE("interaction column count follows reference encoding") {
  auto d = tiny_dataset();
  auto spec = parse_formula("S ~ g:r");
  auto ds = build_design(spec, d);
  // (2-1)*(3-1) interaction columns + intercept
  CHECK(ds.mean.fixed_names.size() == 1 + 2);
  CHECK(ds.mean.fixed_names[1] == "g[v]:r[q]");

  // Oracle: column count formula over a grid of factor sizes.
  auto spec2 = parse_formula("S ~ (g+r+Y)^2");
  auto ds2 = build_design(spec2, d);
  // mains: 1 + 2 + 1; pairs: 1*2 + 1*1 + 2*1
  CHECK(ds2.mean.fixed_names.size() == 1 + (1 + 2 + 1) + (2 + 1 + 2));
}

TEST_CASE("predict_design_row matches the built matrix row by row") {
  auto d = tiny_dataset();
  auto spec = parse_formula("S ~ (g+r)^2 + bmi + (1 | g:r)", "sigma ~ r");
  auto ds = build_design(spec, d);
  for (std::size_t n = 0; n < d.size(); ++n) {
    auto row = predict_design_row(spec, d, d.proto_record(n));
    CHECK(row.mean.fixed == ds.mean.fixed.row(static_cast<Eigen::Index>(n)).transpose());
    REQUIRE(row.mean.group_cells.size() == 1);
    CHECK(row.mean.group_cells[0] == ds.mean.groups[0].cell[n]);
    REQUIRE(row.sigma.has_value());
    CHECK(row.sigma->fixed == ds.sigma->fixed.row(static_cast<Eigen::Index>(n)).transpose());
  }
}

TEST_CASE("reference-level record hits only intercept and covariates") {
  auto d = tiny_dataset();
  auto spec = parse_formula("S ~ g + r + Y + bmi");
  ProtoRecord rec;
  rec.attrs = {{"g", "u"}, {"r", "p"}};
  rec.covariates = {{"bmi", 22.0}};
  rec.label = 0;
  auto row = predict_design_row(spec, d, rec);
  CHECK(row.mean.fixed(0) == 1.0);
  for (Eigen::Index i = 1; i + 1 < row.mean.fixed.size(); ++i)
    CHECK(row.mean.fixed(i) == 0.0);
  CHECK(row.mean.fixed(row.mean.fixed.size() - 1) == 22.0);
}

TEST_CASE("unseen level and unresolved names raise") {
  auto d = tiny_dataset();
  auto spec = parse_formula("S ~ g");
  ProtoRecord rec;
  rec.attrs = {{"g", "Z"}, {"r", "p"}};
  rec.covariates = {{"bmi", 22.0}};
  CHECK_THROWS_AS(predict_design_row(spec, d, rec), LevelError);
  CHECK_THROWS_AS(build_design(parse_formula("S ~ nope"), d), NameError);
  CHECK_THROWS_AS(build_design(parse_formula("S ~ g:bmi"), d), NameError);
}

TEST_CASE("column names are deterministic across rebuilds") {
  auto d = tiny_dataset();
  auto spec = parse_formula("S ~ (g+r+Y)^2 + bmi + (1 | (g+r)^2)");
  auto a = build_design(spec, d).mean.column_names();
  auto b = build_design(spec, d).mean.column_names();
  CHECK(a == b);
}
