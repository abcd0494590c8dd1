#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mbm/errors.hpp"
#include "mbm/rng.hpp"

namespace mbm {

// ---------------------------------------------------------------------------
// Schemas
// ---------------------------------------------------------------------------

struct AttrSchema {
  std::string name;
  std::vector<std::string> levels;  // allowed levels, in canonical order

  int level_index(const std::string& level) const {
    for (std::size_t i = 0; i < levels.size(); ++i)
      if (levels[i] == level) return static_cast<int>(i);
    return -1;
  }
};

// A single observation: demographic attributes, continuous covariates,
// binary outcome, and the predictive model's score.
struct EvalRecord {
  std::map<std::string, std::string> attrs;
  std::map<std::string, double> covariates;
  int label = 0;
  double score = 0.0;
};

// Attributes + covariates + label, without a score; the unit predictive
// simulation and design-row construction operate on.
struct ProtoRecord {
  std::map<std::string, std::string> attrs;
  std::map<std::string, double> covariates;
  int label = 0;
};

// Subset of attribute bindings; an empty key denotes the whole population.
struct SubpopKey {
  std::map<std::string, std::string> bindings;

  bool empty() const { return bindings.empty(); }

  bool operator==(const SubpopKey& o) const { return bindings == o.bindings; }
  bool operator<(const SubpopKey& o) const { return bindings < o.bindings; }

  std::string to_string() const {
    if (bindings.empty()) return "(all)";
    std::string out;
    for (const auto& [k, v] : bindings) {
      if (!out.empty()) out += ",";
      out += k + "=" + v;
    }
    return out;
  }
};

// ---------------------------------------------------------------------------
// EvalDataset
// ---------------------------------------------------------------------------
//
// Column-oriented storage: attribute cells are small integer level codes,
// covariates and scores are contiguous doubles. Immutable after construction;
// safe to share across concurrent workers.
class EvalDataset {
 public:
  EvalDataset() = default;

  EvalDataset(std::vector<AttrSchema> attr_schema, std::vector<std::string> cov_schema)
      : attr_schema_(std::move(attr_schema)), cov_schema_(std::move(cov_schema)) {
    attr_codes_.resize(attr_schema_.size());
    cov_values_.resize(cov_schema_.size());
  }

  const std::vector<AttrSchema>& attr_schema() const { return attr_schema_; }
  const std::vector<std::string>& cov_schema() const { return cov_schema_; }

  std::size_t size() const { return labels_.size(); }

  int attr_pos(const std::string& name) const {
    for (std::size_t i = 0; i < attr_schema_.size(); ++i)
      if (attr_schema_[i].name == name) return static_cast<int>(i);
    return -1;
  }

  int cov_pos(const std::string& name) const {
    for (std::size_t i = 0; i < cov_schema_.size(); ++i)
      if (cov_schema_[i] == name) return static_cast<int>(i);
    return -1;
  }

  // Level code of attribute `a` for row `n`.
  int attr_code(std::size_t a, std::size_t n) const { return attr_codes_[a][n]; }
  const std::string& attr_level(std::size_t a, std::size_t n) const {
    return attr_schema_[a].levels[attr_codes_[a][n]];
  }
  double covariate(std::size_t c, std::size_t n) const { return cov_values_[c][n]; }
  int label(std::size_t n) const { return labels_[n]; }
  double score(std::size_t n) const { return scores_[n]; }
  const std::vector<double>& scores() const { return scores_; }
  const std::vector<std::int8_t>& labels() const { return labels_; }

  void append(const EvalRecord& rec) {
    append_proto({rec.attrs, rec.covariates, rec.label}, rec.score);
  }

  void append_proto(const ProtoRecord& rec, double score) {
    if (rec.label != 0 && rec.label != 1)
      throw ValidationError("label must be 0 or 1, got " + std::to_string(rec.label));
    if (!std::isfinite(score)) throw ValidationError("score is not finite");
    std::vector<int> codes(attr_schema_.size());
    for (std::size_t a = 0; a < attr_schema_.size(); ++a) {
      auto it = rec.attrs.find(attr_schema_[a].name);
      if (it == rec.attrs.end())
        throw SchemaError("record missing attribute '" + attr_schema_[a].name + "'");
      int code = attr_schema_[a].level_index(it->second);
      if (code < 0)
        throw LevelError("level '" + it->second + "' not allowed for attribute '" +
                         attr_schema_[a].name + "'");
      codes[a] = code;
    }
    std::vector<double> covs(cov_schema_.size());
    for (std::size_t c = 0; c < cov_schema_.size(); ++c) {
      auto it = rec.covariates.find(cov_schema_[c]);
      if (it == rec.covariates.end())
        throw SchemaError("record missing covariate '" + cov_schema_[c] + "'");
      if (!std::isfinite(it->second))
        throw ValidationError("covariate '" + cov_schema_[c] + "' is not finite");
      covs[c] = it->second;
    }
    for (std::size_t a = 0; a < attr_schema_.size(); ++a) attr_codes_[a].push_back(codes[a]);
    for (std::size_t c = 0; c < cov_schema_.size(); ++c) cov_values_[c].push_back(covs[c]);
    labels_.push_back(static_cast<std::int8_t>(rec.label));
    scores_.push_back(score);
  }

  EvalRecord record(std::size_t n) const {
    EvalRecord rec;
    for (std::size_t a = 0; a < attr_schema_.size(); ++a)
      rec.attrs[attr_schema_[a].name] = attr_level(a, n);
    for (std::size_t c = 0; c < cov_schema_.size(); ++c)
      rec.covariates[cov_schema_[c]] = cov_values_[c][n];
    rec.label = labels_[n];
    rec.score = scores_[n];
    return rec;
  }

  ProtoRecord proto_record(std::size_t n) const {
    auto rec = record(n);
    return {std::move(rec.attrs), std::move(rec.covariates), rec.label};
  }

  // Validates a key against the schema; throws KeyError on unknown names/levels.
  // Returns (attr position, level code) pairs.
  std::vector<std::pair<int, int>> resolve_key(const SubpopKey& key) const {
    std::vector<std::pair<int, int>> out;
    for (const auto& [name, level] : key.bindings) {
      int a = attr_pos(name);
      if (a < 0) throw KeyError("unknown attribute '" + name + "' in subpopulation key");
      int code = attr_schema_[a].level_index(level);
      if (code < 0)
        throw KeyError("level '" + level + "' not allowed for attribute '" + name + "'");
      out.emplace_back(a, code);
    }
    return out;
  }

  bool matches(std::size_t n, const std::vector<std::pair<int, int>>& resolved) const {
    for (const auto& [a, code] : resolved)
      if (attr_codes_[a][n] != code) return false;
    return true;
  }

  std::vector<std::size_t> match_rows(const SubpopKey& key) const {
    auto resolved = resolve_key(key);
    std::vector<std::size_t> rows;
    for (std::size_t n = 0; n < size(); ++n)
      if (matches(n, resolved)) rows.push_back(n);
    return rows;
  }

  EvalDataset take_rows(const std::vector<std::size_t>& rows) const {
    EvalDataset out(attr_schema_, cov_schema_);
    out.reserve(rows.size());
    for (std::size_t n : rows) {
      for (std::size_t a = 0; a < attr_schema_.size(); ++a)
        out.attr_codes_[a].push_back(attr_codes_[a][n]);
      for (std::size_t c = 0; c < cov_schema_.size(); ++c)
        out.cov_values_[c].push_back(cov_values_[c][n]);
      out.labels_.push_back(labels_[n]);
      out.scores_.push_back(scores_[n]);
    }
    return out;
  }

  void reserve(std::size_t n) {
    for (auto& col : attr_codes_) col.reserve(n);
    for (auto& col : cov_values_) col.reserve(n);
    labels_.reserve(n);
    scores_.reserve(n);
  }

  // Replaces the score column; used when attaching simulated scores.
  void set_scores(std::vector<double> scores) {
    if (scores.size() != size()) throw ShapeError("score column length mismatch");
    for (double s : scores)
      if (!std::isfinite(s)) throw ValidationError("score is not finite");
    scores_ = std::move(scores);
  }

  // Stable content fingerprint (schema, values); drives cache keys and
  // staleness checks for posterior draws.
  std::uint64_t fingerprint() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix_str = [&h](const std::string& s) { h = fnv1a(s, h); h = fnv1a("\x1f", h); };
    auto mix_u64 = [&h](std::uint64_t v) {
      for (int i = 0; i < 8; ++i) { h ^= (v >> (8 * i)) & 0xff; h *= 0x100000001b3ULL; }
    };
    for (const auto& a : attr_schema_) {
      mix_str(a.name);
      for (const auto& l : a.levels) mix_str(l);
    }
    for (const auto& c : cov_schema_) mix_str(c);
    mix_u64(size());
    for (const auto& col : attr_codes_)
      for (int v : col) mix_u64(static_cast<std::uint64_t>(v));
    for (const auto& col : cov_values_)
      for (double v : col) { std::uint64_t bits; std::memcpy(&bits, &v, 8); mix_u64(bits); }
    for (auto v : labels_) mix_u64(static_cast<std::uint64_t>(v));
    for (double v : scores_) { std::uint64_t bits; std::memcpy(&bits, &v, 8); mix_u64(bits); }
    return h;
  }

 private:
  std::vector<AttrSchema> attr_schema_;
  std::vector<std::string> cov_schema_;
  std::vector<std::vector<int>> attr_codes_;     // [attr][row]
  std::vector<std::vector<double>> cov_values_;  // [cov][row]
  std::vector<std::int8_t> labels_;
  std::vector<double> scores_;
};

// ---------------------------------------------------------------------------
// Subset and enumeration
// ---------------------------------------------------------------------------

inline EvalDataset subset(const EvalDataset& d, const SubpopKey& key) {
  return d.take_rows(d.match_rows(key));
}

// One entry per observed cross-product cell, sorted ascending by count and
// then lexicographically by the key's canonical string. Empty cells omitted.
inline std::vector<std::pair<SubpopKey, std::size_t>> enumerate_subpops(
    const EvalDataset& d, const std::vector<std::string>& attrs) {
  std::vector<int> pos;
  for (const auto& name : attrs) {
    int a = d.attr_pos(name);
    if (a < 0) throw KeyError("unknown attribute '" + name + "'");
    pos.push_back(a);
  }
  std::map<std::vector<int>, std::size_t> counts;
  std::vector<int> cell(pos.size());
  for (std::size_t n = 0; n < d.size(); ++n) {
    for (std::size_t i = 0; i < pos.size(); ++i) cell[i] = d.attr_code(pos[i], n);
    ++counts[cell];
  }
  std::vector<std::pair<SubpopKey, std::size_t>> out;
  out.reserve(counts.size());
  for (const auto& [codes, count] : counts) {
    SubpopKey key;
    for (std::size_t i = 0; i < pos.size(); ++i)
      key.bindings[attrs[i]] = d.attr_schema()[pos[i]].levels[codes[i]];
    out.emplace_back(std::move(key), count);
  }
  std::stable_sort(out.begin(), out.end(), [](const auto& x, const auto& y) {
    if (x.second != y.second) return x.second < y.second;
    return x.first.to_string() < y.first.to_string();
  });
  return out;
}

// ---------------------------------------------------------------------------
// CSV ingestion
// ---------------------------------------------------------------------------

// Bins for a numeric column: intervals are left-closed, right-open
// [e0,e1), [e1,e2), ...; values outside [e0, e_last) are rejected.
struct BinSpec {
  std::vector<double> edges;
  std::vector<std::string> labels;  // optional; defaults to "[lo,hi)"

  std::string label(std::size_t i) const {
    if (!labels.empty()) return labels[i];
    std::ostringstream os;
    os << "[" << edges[i] << "," << edges[i + 1] << ")";
    return os.str();
  }

  int bin_of(double v) const {
    if (!(v >= edges.front()) || !(v < edges.back())) return -1;
    auto it = std::upper_bound(edges.begin(), edges.end(), v);
    return static_cast<int>(it - edges.begin()) - 1;
  }
};

struct AttrColumnConfig {
  std::string name;                   // attribute name in the dataset
  std::string column;                 // CSV column header
  std::vector<std::string> levels;    // optional explicit level ordering
  std::optional<BinSpec> bins;        // optional numeric binning
};

struct CovColumnConfig {
  std::string name;
  std::string column;
};

// Declarative column mapping for load_csv.
struct SchemaConfig {
  std::vector<AttrColumnConfig> attributes;
  std::vector<CovColumnConfig> covariates;
  std::string label_column;
  std::string score_column;
};

namespace detail {

// Minimal RFC-4180-ish field splitter: handles quoted fields and escaped
// quotes; no embedded newlines.
inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') { cur += '"'; ++i; }
        else quoted = false;
      } else cur += c;
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  fields.push_back(cur);
  return fields;
}

inline bool parse_double(const std::string& s, double& out) {
  const char* first = s.data();
  const char* last = s.data() + s.size();
  while (first != last && (*first == ' ' || *first == '\t')) ++first;
  while (last != first && (*(last - 1) == ' ' || *(last - 1) == '\t')) --last;
  auto [ptr, ec] = std::from_chars(first, last, out);
  return ec == std::errc() && ptr == last && first != last;
}

inline std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += "\"\"";
    out += c;
  }
  out += "\"";
  return out;
}

// Shortest round-trip decimal representation.
inline std::string format_double(double v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

}  // namespace detail

inline EvalDataset load_csv(const std::string& path, const SchemaConfig& cfg) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw SchemaError("'" + path + "': no header row");
  auto header = detail::split_csv_line(line);
  auto col_of = [&](const std::string& name) {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return static_cast<int>(i);
    throw SchemaError("'" + path + "': missing column '" + name + "'");
  };

  std::vector<int> attr_cols, cov_cols;
  for (const auto& a : cfg.attributes) attr_cols.push_back(col_of(a.column));
  for (const auto& c : cfg.covariates) cov_cols.push_back(col_of(c.column));
  int label_col = col_of(cfg.label_column);
  int score_col = col_of(cfg.score_column);

  // First pass: read raw rows, collect observed levels for inferred attributes.
  std::vector<std::vector<std::string>> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || (line.size() == 1 && line[0] == '\r')) continue;
    auto fields = detail::split_csv_line(line);
    if (fields.size() != header.size())
      throw ParseError("'" + path + "' row " + std::to_string(lineno) + ": expected " +
                       std::to_string(header.size()) + " fields, got " +
                       std::to_string(fields.size()));
    rows.push_back(std::move(fields));
  }
  if (rows.empty()) throw ValidationError("'" + path + "': dataset has no records");

  std::vector<AttrSchema> attr_schema;
  for (std::size_t ai = 0; ai < cfg.attributes.size(); ++ai) {
    const auto& acfg = cfg.attributes[ai];
    AttrSchema as{acfg.name, {}};
    if (acfg.bins) {
      for (std::size_t b = 0; b + 1 < acfg.bins->edges.size(); ++b)
        as.levels.push_back(acfg.bins->label(b));
    } else if (!acfg.levels.empty()) {
      as.levels = acfg.levels;
    } else {
      // Inferred levels are sorted lexicographically.
      std::set<std::string> seen;
      for (const auto& r : rows) seen.insert(r[attr_cols[ai]]);
      as.levels.assign(seen.begin(), seen.end());
    }
    attr_schema.push_back(std::move(as));
  }
  std::vector<std::string> cov_schema;
  for (const auto& c : cfg.covariates) cov_schema.push_back(c.name);

  EvalDataset d(std::move(attr_schema), std::move(cov_schema));
  d.reserve(rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const std::size_t rowno = r + 2;  // 1-based, counting the header
    EvalRecord rec;
    for (std::size_t ai = 0; ai < cfg.attributes.size(); ++ai) {
      const auto& acfg = cfg.attributes[ai];
      const std::string& raw = rows[r][attr_cols[ai]];
      if (acfg.bins) {
        double v;
        if (!detail::parse_double(raw, v))
          throw ParseError("'" + path + "' row " + std::to_string(rowno) +
                           ": non-numeric value '" + raw + "' for binned attribute '" +
                           acfg.name + "'");
        int b = acfg.bins->bin_of(v);
        if (b < 0)
          throw ValidationError("'" + path + "' row " + std::to_string(rowno) + ": value " +
                                raw + " outside bin range for attribute '" + acfg.name + "'");
        rec.attrs[acfg.name] = acfg.bins->label(static_cast<std::size_t>(b));
      } else {
        rec.attrs[acfg.name] = raw;
      }
    }
    for (std::size_t ci = 0; ci < cfg.covariates.size(); ++ci) {
      double v;
      if (!detail::parse_double(rows[r][cov_cols[ci]], v))
        throw ParseError("'" + path + "' row " + std::to_string(rowno) +
                         ": non-numeric covariate '" + cfg.covariates[ci].name + "' value '" +
                         rows[r][cov_cols[ci]] + "'");
      rec.covariates[cfg.covariates[ci].name] = v;
    }
    const std::string& rawy = rows[r][label_col];
    double y;
    if (!detail::parse_double(rawy, y) || (y != 0.0 && y != 1.0))
      throw ValidationError("'" + path + "' row " + std::to_string(rowno) +
                            ": label must be 0 or 1, got '" + rawy + "'");
    rec.label = static_cast<int>(y);
    double s;
    if (!detail::parse_double(rows[r][score_col], s))
      throw ParseError("'" + path + "' row " + std::to_string(rowno) +
                       ": non-numeric score '" + rows[r][score_col] + "'");
    if (!std::isfinite(s))
      throw ValidationError("'" + path + "' row " + std::to_string(rowno) +
                            ": score is not finite");
    rec.score = s;
    try {
      d.append(rec);
    } catch (const LevelError& e) {
      throw LevelError("'" + path + "' row " + std::to_string(rowno) + ": " + e.what());
    } catch (const ValidationError& e) {
      throw ValidationError("'" + path + "' row " + std::to_string(rowno) + ": " + e.what());
    }
  }
  return d;
}

// Writes attrs, covariates, label, score with level strings as-is.
// load_csv(write_csv(d)) with the matching schema is value-identical.
inline void write_csv(const EvalDataset& d, const std::string& path,
                      const std::string& label_column = "y",
                      const std::string& score_column = "s") {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path + "'");
  std::string header;
  for (const auto& a : d.attr_schema()) header += detail::csv_escape(a.name) + ",";
  for (const auto& c : d.cov_schema()) header += detail::csv_escape(c) + ",";
  header += label_column + "," + score_column;
  out << header << "\n";
  for (std::size_t n = 0; n < d.size(); ++n) {
    std::string row;
    for (std::size_t a = 0; a < d.attr_schema().size(); ++a)
      row += detail::csv_escape(d.attr_level(a, n)) + ",";
    for (std::size_t c = 0; c < d.cov_schema().size(); ++c)
      row += detail::format_double(d.covariate(c, n)) + ",";
    row += std::to_string(static_cast<int>(d.label(n))) + ",";
    row += detail::format_double(d.score(n));
    out << row << "\n";
  }
  if (!out) throw IoError("write failed for '" + path + "'");
}

}  // namespace mbm
