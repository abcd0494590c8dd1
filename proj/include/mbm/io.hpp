#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <string>
#include <vector>

#include "mbm/dataset.hpp"
#include "mbm/errors.hpp"
#include "mbm/inference.hpp"
#include "mbm/model.hpp"

namespace mbm {

// ---------------------------------------------------------------------------
// Posterior draw persistence
// ---------------------------------------------------------------------------
//
// Columnar binary layout: header, parameter names, then the parameter matrix
// and log-likelihood cache row-major. Byte-identical across reruns with the
// same inputs, which is what makes stages resumable and verifiable.

namespace detail {

constexpr std::uint32_t kDrawsMagic = 0x4d424d44;  // "MBMD"
constexpr std::uint32_t kDrawsVersion = 1;

template <typename T>
void write_pod(std::ofstream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
void read_pod(std::ifstream& in, T& v) {
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
}

inline void write_string(std::ofstream& out, const std::string& s) {
  write_pod(out, static_cast<std::uint64_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::ifstream& in) {
  std::uint64_t len = 0;
  read_pod(in, len);
  std::string s(len, '\0');
  in.read(s.data(), static_cast<std::streamsize>(len));
  return s;
}

inline void write_matrix(std::ofstream& out, const Eigen::MatrixXd& m) {
  write_pod(out, static_cast<std::uint64_t>(m.rows()));
  write_pod(out, static_cast<std::uint64_t>(m.cols()));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) write_pod(out, m(r, c));
}

inline Eigen::MatrixXd read_matrix(std::ifstream& in) {
  std::uint64_t rows = 0, cols = 0;
  read_pod(in, rows);
  read_pod(in, cols);
  Eigen::MatrixXd m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) read_pod(in, m(r, c));
  return m;
}

}  // namespace detail

// Writes params + loglik cache; the layout is reconstructed from the spec at
// load time, so only names and matrices are stored.
inline void save_draws(const PosteriorDraws& draws, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path + "'");
  detail::write_pod(out, detail::kDrawsMagic);
  detail::write_pod(out, detail::kDrawsVersion);
  detail::write_pod(out, draws.spec_hash);
  detail::write_pod(out, static_cast<std::uint32_t>(draws.n_chains));
  detail::write_pod(out, static_cast<std::uint64_t>(draws.param_names.size()));
  for (const auto& n : draws.param_names) detail::write_string(out, n);
  detail::write_matrix(out, draws.params);
  detail::write_matrix(out, draws.loglik);
  if (!out) throw IoError("write failed for '" + path + "'");
}

// Loads draws previously saved for exactly this (spec, dataset) pair; the
// stored hash must match or the cache is considered stale.
inline PosteriorDraws load_draws(const std::string& path, const ModelSpec& spec,
                                 const EvalDataset& d) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::uint32_t magic = 0, version = 0;
  detail::read_pod(in, magic);
  detail::read_pod(in, version);
  if (magic != detail::kDrawsMagic || version != detail::kDrawsVersion)
    throw IoError("'" + path + "' is not a draws file of a supported version");
  PosteriorDraws draws;
  detail::read_pod(in, draws.spec_hash);
  std::uint32_t chains = 0;
  detail::read_pod(in, chains);
  draws.n_chains = static_cast<int>(chains);
  std::uint64_t n_names = 0;
  detail::read_pod(in, n_names);
  draws.param_names.resize(n_names);
  for (auto& n : draws.param_names) n = detail::read_string(in);
  draws.params = detail::read_matrix(in);
  draws.loglik = detail::read_matrix(in);
  if (!in) throw IoError("truncated draws file '" + path + "'");

  GaussianModel model(spec, d);
  if (draws.spec_hash != model.spec_hash())
    throw StalenessError("draws file '" + path + "' does not match this model and dataset");
  draws.layout = model.layout();
  if (draws.param_names != model.layout().names ||
      draws.params.cols() != model.layout().total)
    throw StalenessError("draws file '" + path + "' has a mismatched parameter layout");
  return draws;
}

// CSV export with header = parameter names.
inline void write_draws_csv(const PosteriorDraws& draws, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path + "'");
  std::string header;
  for (std::size_t k = 0; k < draws.param_names.size(); ++k) {
    if (k) header += ",";
    header += detail::csv_escape(draws.param_names[k]);
  }
  out << header << "\n";
  for (Eigen::Index r = 0; r < draws.params.rows(); ++r) {
    std::string row;
    for (Eigen::Index k = 0; k < draws.params.cols(); ++k) {
      if (k) row += ",";
      row += detail::format_double(draws.params(r, k));
    }
    out << row << "\n";
  }
}

// ---------------------------------------------------------------------------
// Predictive simulation persistence
// ---------------------------------------------------------------------------

inline void save_sims_matrix(const Eigen::MatrixXd& sims, std::uint64_t tag,
                             const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path + "'");
  detail::write_pod(out, std::uint32_t{0x4d424d53});  // "MBMS"
  detail::write_pod(out, tag);
  detail::write_matrix(out, sims);
  if (!out) throw IoError("write failed for '" + path + "'");
}

inline Eigen::MatrixXd load_sims_matrix(const std::string& path, std::uint64_t expected_tag) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::uint32_t magic = 0;
  std::uint64_t tag = 0;
  detail::read_pod(in, magic);
  detail::read_pod(in, tag);
  if (magic != 0x4d424d53) throw IoError("'" + path + "' is not a simulation matrix file");
  if (tag != expected_tag)
    throw StalenessError("simulation file '" + path + "' does not match the current run");
  auto m = detail::read_matrix(in);
  if (!in) throw IoError("truncated simulation file '" + path + "'");
  return m;
}

// ---------------------------------------------------------------------------
// Hashing and small helpers
// ---------------------------------------------------------------------------

// Stable hash of a canonical JSON dump; object keys are sorted by njson.
inline std::uint64_t config_hash(const nlohmann::json& j) {
  return fnv1a(j.dump());
}

inline std::string hash_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

inline void ensure_dir(const std::string& path) {
  std::error_code ec;
  std::filesystem::create_directories(path, ec);
  if (ec) throw IoError("cannot create directory '" + path + "': " + ec.message());
}

inline void write_text(const std::string& path, const std::string& content) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << content;
  if (!out) throw IoError("write failed for '" + path + "'");
}

inline nlohmann::json load_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("'" + path + "': " + e.what());
  }
  return j;
}

}  // namespace mbm
