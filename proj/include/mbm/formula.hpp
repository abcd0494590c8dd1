#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mbm/errors.hpp"

namespace mbm {

// Weakly-informative proper defaults. Proper priors keep the bootstrap
// importance-weight ratios well-defined and regularize random intercepts for
// cells never observed in the data.
struct PriorConfig {
  double fixed_coef_sd = 5.0;   // Gaussian prior scale on fixed coefficients
  double intercept_sd = 5.0;    // applied after internal response centering
  double group_sd_scale = 2.5;  // half-Student-t(3) scale on group sds
  double resid_sd_scale = 2.5;  // half-Student-t(3) scale on residual sd
  double sigma_coef_sd = 1.0;   // Gaussian prior scale on log-variance coefficients

  void validate() const {
    if (fixed_coef_sd <= 0 || intercept_sd <= 0 || group_sd_scale <= 0 ||
        resid_sd_scale <= 0 || sigma_coef_sd <= 0)
      throw ConfigError("prior scales must be positive");
  }

  bool operator==(const PriorConfig&) const = default;
};

// A parsed fixed-effect term. Whether a symbol is a categorical factor or a
// continuous covariate is resolved against the dataset schema when the
// design matrix is built.
struct Term {
  enum class Kind { Intercept, Symbol, Pair } kind = Kind::Intercept;
  std::string a;  // symbol name (Symbol, Pair)
  std::string b;  // second factor (Pair)

  static Term intercept() { return {Kind::Intercept, "", ""}; }
  static Term symbol(std::string name) { return {Kind::Symbol, std::move(name), ""}; }
  static Term pair(std::string x, std::string y) {
    return {Kind::Pair, std::move(x), std::move(y)};
  }

  bool operator==(const Term&) const = default;

  std::string to_string() const {
    switch (kind) {
      case Kind::Intercept: return "1";
      case Kind::Symbol: return a;
      case Kind::Pair: return a + ":" + b;
    }
    return "?";
  }
};

// Random-intercept group: one factor, or the crossing of two.
struct GroupExpr {
  std::vector<std::string> factors;  // size 1 or 2

  bool operator==(const GroupExpr&) const = default;

  std::string name() const {
    std::string out;
    for (const auto& f : factors) {
      if (!out.empty()) out += ":";
      out += f;
    }
    return out;
  }
};

// Parsed evaluation-model specification: mean formula, optional log-linear
// variance formula, random-intercept groups for each, priors.
struct ModelSpec {
  std::string response = "S";
  std::vector<Term> mean_terms;                // always starts with the intercept
  std::vector<GroupExpr> random_groups;        // mean-model random intercepts
  std::optional<std::vector<Term>> sigma_terms;
  std::vector<GroupExpr> sigma_random_groups;  // only with sigma_terms set
  PriorConfig prior;

  bool heteroscedastic() const { return sigma_terms.has_value(); }
  bool has_random_effects() const {
    return !random_groups.empty() || !sigma_random_groups.empty();
  }

  bool operator==(const ModelSpec&) const = default;
};

namespace detail {

struct Token {
  enum class Type { Ident, Number, Tilde, Plus, LParen, RParen, Bar, Caret, Colon, End };
  Type type;
  std::string text;
  std::size_t pos;
};

class FormulaLexer {
 public:
  explicit FormulaLexer(const std::string& src) : src_(src) {}

  Token next() {
    while (i_ < src_.size() && (src_[i_] == ' ' || src_[i_] == '\t')) ++i_;
    const std::size_t start = i_;
    if (i_ >= src_.size()) return {Token::Type::End, "", start};
    const char c = src_[i_];
    switch (c) {
      case '~': ++i_; return {Token::Type::Tilde, "~", start};
      case '+': ++i_; return {Token::Type::Plus, "+", start};
      case '(': ++i_; return {Token::Type::LParen, "(", start};
      case ')': ++i_; return {Token::Type::RParen, ")", start};
      case '|': ++i_; return {Token::Type::Bar, "|", start};
      case '^': ++i_; return {Token::Type::Caret, "^", start};
      case ':': ++i_; return {Token::Type::Colon, ":", start};
      default: break;
    }
    if (c >= '0' && c <= '9') {
      std::string num;
      while (i_ < src_.size() && src_[i_] >= '0' && src_[i_] <= '9') num += src_[i_++];
      return {Token::Type::Number, num, start};
    }
    if (is_ident_start(c)) {
      std::string id;
      while (i_ < src_.size() && is_ident_char(src_[i_])) id += src_[i_++];
      return {Token::Type::Ident, id, start};
    }
    throw FormulaSyntaxError("formula syntax error at position " + std::to_string(start) +
                             ": unexpected character '" + std::string(1, c) + "'");
  }

 private:
  static bool is_ident_start(char c) {
    return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c == '_' || c == '.';
  }
  static bool is_ident_char(char c) {
    return is_ident_start(c) || (c >= '0' && c <= '9');
  }
  const std::string& src_;
  std::size_t i_ = 0;
};

// Recursive-descent parser for the evaluation-model formula grammar:
//
//   formula   := ident '~' rhs
//   rhs       := term ('+' term)*
//   term      := '1'
//              | ident (':' ident)?
//              | '(' ident ('+' ident)+ ')' '^2'      -- mains + all pairs
//              | '(' '1' '|' group ')'                -- random intercepts
//   group     := ident (':' ident)?
//              | '(' ident ('+' ident)+ ')' '^2'      -- each main + each pair
//
// '(a+b+c)^2' expands to main effects a, b, c plus the pairwise products
// a:b, a:c, b:c. Inside '(1 | ...)' the same expansion generates one random
// intercept group per marginal factor and per pairwise crossing.
class FormulaParser {
 public:
  explicit FormulaParser(const std::string& src) : src_(src), lexer_(src) { advance(); }

  // Parses "response ~ rhs"; terms land in `terms`, random groups in `groups`.
  std::string parse(std::vector<Term>& terms, std::vector<GroupExpr>& groups) {
    expect(Token::Type::Ident, "response name");
    std::string response = tok_.text;
    advance();
    expect(Token::Type::Tilde, "'~'");
    advance();
    parse_term(terms, groups);
    while (tok_.type == Token::Type::Plus) {
      advance();
      parse_term(terms, groups);
    }
    if (tok_.type != Token::Type::End)
      fail("unexpected trailing input");
    return response;
  }

 private:
  void parse_term(std::vector<Term>& terms, std::vector<GroupExpr>& groups) {
    if (tok_.type == Token::Type::Number) {
      if (tok_.text != "1") fail("only the literal intercept '1' is allowed here");
      add_term(terms, Term::intercept());
      advance();
      return;
    }
    if (tok_.type == Token::Type::Ident) {
      std::string a = tok_.text;
      advance();
      if (tok_.type == Token::Type::Colon) {
        advance();
        expect(Token::Type::Ident, "factor name after ':'");
        add_term(terms, Term::pair(a, tok_.text));
        advance();
      } else {
        add_term(terms, Term::symbol(a));
      }
      return;
    }
    if (tok_.type == Token::Type::LParen) {
      advance();
      if (tok_.type == Token::Type::Number && tok_.text == "1") {
        // (1 | group-expression)
        advance();
        expect(Token::Type::Bar, "'|'");
        advance();
        parse_group_expr(groups);
        expect(Token::Type::RParen, "')'");
        advance();
        return;
      }
      auto names = parse_name_sum();
      expect(Token::Type::RParen, "')'");
      advance();
      parse_caret2();
      for (const auto& n : names) add_term(terms, Term::symbol(n));
      for (std::size_t i = 0; i < names.size(); ++i)
        for (std::size_t j = i + 1; j < names.size(); ++j)
          add_term(terms, Term::pair(names[i], names[j]));
      return;
    }
    fail("expected a term");
  }

  void parse_group_expr(std::vector<GroupExpr>& groups) {
    if (tok_.type == Token::Type::Ident) {
      std::string a = tok_.text;
      advance();
      if (tok_.type == Token::Type::Colon) {
        advance();
        expect(Token::Type::Ident, "factor name after ':'");
        add_group(groups, {{a, tok_.text}});
        advance();
      } else {
        add_group(groups, {{a}});
      }
      return;
    }
    if (tok_.type == Token::Type::LParen) {
      advance();
      if (tok_.type == Token::Type::Number)
        fail("nested random-effect bars are not supported");
      auto names = parse_name_sum();
      expect(Token::Type::RParen, "')'");
      advance();
      parse_caret2();
      for (const auto& n : names) add_group(groups, {{n}});
      for (std::size_t i = 0; i < names.size(); ++i)
        for (std::size_t j = i + 1; j < names.size(); ++j)
          add_group(groups, {{names[i], names[j]}});
      return;
    }
    if (tok_.type == Token::Type::Bar)
      fail("nested random-effect bars are not supported");
    fail("expected a grouping expression");
  }

  std::vector<std::string> parse_name_sum() {
    std::vector<std::string> names;
    expect(Token::Type::Ident, "factor name");
    names.push_back(tok_.text);
    advance();
    while (tok_.type == Token::Type::Plus) {
      advance();
      expect(Token::Type::Ident, "factor name");
      names.push_back(tok_.text);
      advance();
    }
    return names;
  }

  void parse_caret2() {
    expect(Token::Type::Caret, "'^2'");
    advance();
    if (tok_.type != Token::Type::Number || tok_.text != "2")
      fail("only pairwise expansion '^2' is supported");
    advance();
  }

  static void add_term(std::vector<Term>& terms, Term t) {
    for (const auto& e : terms)
      if (e == t) return;  // duplicates collapse
    terms.push_back(std::move(t));
  }

  static void add_group(std::vector<GroupExpr>& groups, GroupExpr g) {
    for (const auto& e : groups)
      if (e == g) return;
    groups.push_back(std::move(g));
  }

  void expect(Token::Type type, const std::string& what) {
    if (tok_.type != type) fail("expected " + what);
  }

  [[noreturn]] void fail(const std::string& msg) {
    throw FormulaSyntaxError("formula syntax error at position " + std::to_string(tok_.pos) +
                             " in \"" + src_ + "\": " + msg);
  }

  void advance() { tok_ = lexer_.next(); }

  const std::string& src_;
  FormulaLexer lexer_;
  Token tok_;
};

}  // namespace detail

// Parses the mean formula and an optional "sigma ~ ..." variance formula.
// The intercept is always included (explicitly via '1' or implicitly).
inline ModelSpec parse_formula(const std::string& text,
                               const std::string& sigma_text = "",
                               const PriorConfig& prior = {}) {
  prior.validate();
  ModelSpec spec;
  spec.prior = prior;
  {
    std::vector<Term> terms;
    detail::FormulaParser parser(text);
    spec.response = parser.parse(terms, spec.random_groups);
    spec.mean_terms.push_back(Term::intercept());
    for (auto& t : terms)
      if (t.kind != Term::Kind::Intercept) spec.mean_terms.push_back(std::move(t));
  }
  if (!sigma_text.empty()) {
    std::vector<Term> terms;
    std::vector<GroupExpr> groups;
    detail::FormulaParser parser(sigma_text);
    std::string lhs = parser.parse(terms, groups);
    if (lhs != "sigma")
      throw FormulaSyntaxError("variance formula must start with 'sigma ~', got '" + lhs + "'");
    std::vector<Term> out;
    out.push_back(Term::intercept());
    for (auto& t : terms)
      if (t.kind != Term::Kind::Intercept) out.push_back(std::move(t));
    spec.sigma_terms = std::move(out);
    spec.sigma_random_groups = std::move(groups);
  }
  return spec;
}

namespace detail {

inline std::string print_rhs(const std::vector<Term>& terms,
                             const std::vector<GroupExpr>& groups) {
  std::string rhs = "1";
  for (const auto& t : terms)
    if (t.kind != Term::Kind::Intercept) rhs += " + " + t.to_string();
  for (const auto& g : groups) rhs += " + (1 | " + g.name() + ")";
  return rhs;
}

}  // namespace detail

// Canonical flat form; parse(print_formula(spec)) reproduces the spec.
inline std::string print_formula(const ModelSpec& spec) {
  return spec.response + " ~ " + detail::print_rhs(spec.mean_terms, spec.random_groups);
}

inline std::string print_sigma_formula(const ModelSpec& spec) {
  if (!spec.heteroscedastic()) return "";
  return "sigma ~ " + detail::print_rhs(*spec.sigma_terms, spec.sigma_random_groups);
}

}  // namespace mbm
