#pragma once

#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <string_view>
#include <system_error>
#include <utility>
#include <vector>

#include "collapse/central_path.hpp"
#include "collapse/metrics.hpp"
#include "collapse/perturbation.hpp"
#include "collapse/types.hpp"

namespace collapse {
namespace io {

/// Shortest round-trip decimal form, locale independent; the reason CSV
/// output is byte-identical across runs and machines.
template <typename Scalar>
std::string format_number(Scalar v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  if (res.ec != std::errc())
    throw std::runtime_error("format_number: conversion failed");
  return std::string(buf, res.ptr);
}

inline std::string format_number(long v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

template <typename Scalar>
Scalar parse_number(std::string_view token, const char* what) {
  // from_chars rejects leading '+' and whitespace; trim spaces only.
  std::size_t b = token.find_first_not_of(" \t\r");
  std::size_t e = token.find_last_not_of(" \t\r");
  if (b == std::string_view::npos)
    throw std::invalid_argument(std::string("empty numeric field in ") + what);
  token = token.substr(b, e - b + 1);
  Scalar out{};
  const auto res = std::from_chars(token.data(), token.data() + token.size(), out);
  if (res.ec != std::errc() || res.ptr != token.data() + token.size())
    throw std::invalid_argument(std::string("bad numeric field '") +
                                std::string(token) + "' in " + what);
  return out;
}

/// Feature/weight matrix CSV: `# d=<d> K=<K> n=<n>`, optional extra comment
/// lines, then one row of the matrix per line (row-major).
template <typename Scalar>
std::string matrix_csv(const Matrix<Scalar>& m, const Dims& dims,
                       const std::vector<std::string>& comments = {}) {
  std::string out = "# d=" + format_number(dims.d) + " K=" +
                    format_number(dims.K) + " n=" + format_number(dims.n) +
                    "\n";
  for (const auto& c : comments) out += "# " + c + "\n";
  for (Index r = 0; r < m.rows(); ++r) {
    for (Index c = 0; c < m.cols(); ++c) {
      if (c > 0) out += ',';
      out += format_number(m(r, c));
    }
    out += '\n';
  }
  return out;
}

namespace detail {

inline Index parse_dim_field(const std::string& line, const char* key) {
  const std::size_t pos = line.find(key);
  if (pos == std::string::npos)
    throw std::invalid_argument(std::string("matrix CSV header missing ") + key);
  const char* first = line.data() + pos + std::char_traits<char>::length(key);
  long value = 0;
  const auto res = std::from_chars(first, line.data() + line.size(), value);
  if (res.ec != std::errc() || value < 1)
    throw std::invalid_argument(std::string("bad dimension for ") + key);
  return static_cast<Index>(value);
}

inline void split_fields(const std::string& line, std::vector<std::string_view>& out) {
  out.clear();
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    if (comma == std::string::npos) {
      out.emplace_back(line.data() + start, line.size() - start);
      return;
    }
    out.emplace_back(line.data() + start, comma - start);
    start = comma + 1;
  }
}

}  // namespace detail

/// Reads the format written by matrix_csv. The first comment line must
/// carry the dims; later comment lines are skipped.
template <typename Scalar>
std::pair<Matrix<Scalar>, Dims> read_matrix_csv(std::istream& in) {
  std::string line;
  Dims dims{};
  bool have_dims = false;
  Matrix<Scalar> m;
  Index row = 0;
  std::vector<std::string_view> fields;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') {
      if (!have_dims && line.find("d=") != std::string::npos) {
        dims.d = detail::parse_dim_field(line, "d=");
        dims.K = detail::parse_dim_field(line, "K=");
        dims.n = detail::parse_dim_field(line, "n=");
        validate(dims);
        m.resize(dims.d, dims.K * dims.n);
        have_dims = true;
      }
      continue;
    }
    if (!have_dims)
      throw std::invalid_argument("matrix CSV: data before dims header");
    if (row >= m.rows()) throw std::invalid_argument("matrix CSV: extra rows");
    detail::split_fields(line, fields);
    if (static_cast<Index>(fields.size()) != m.cols())
      throw std::invalid_argument("matrix CSV: wrong column count");
    for (Index c = 0; c < m.cols(); ++c)
      m(row, c) = parse_number<Scalar>(fields[static_cast<std::size_t>(c)],
                                       "matrix CSV");
    ++row;
  }
  if (!have_dims) throw std::invalid_argument("matrix CSV: missing dims header");
  if (row != m.rows()) throw std::invalid_argument("matrix CSV: missing rows");
  return {std::move(m), dims};
}

inline std::string metric_header() {
  return "step,t,nc1_tilde,nc1_fisher,nc2,nc3,trSW,trSB";
}

template <typename Scalar>
std::string metric_row(const MetricReport<Scalar>& r) {
  std::string out = format_number(r.step) + ',' + format_number(r.t) + ',' +
                    format_number(r.nc1_tilde) + ',' +
                    format_number(r.nc1_fisher) + ',' + format_number(r.nc2) +
                    ',';
  if (r.nc3) out += format_number(*r.nc3);
  out += ',' + format_number(r.tr_sw) + ',' + format_number(r.tr_sb);
  return out;
}

inline std::string flow_header() { return metric_header() + ",loss"; }

template <typename Scalar>
std::string flow_row(const FlowSample<Scalar>& s) {
  return metric_row(s.metrics) + ',' + format_number(s.loss);
}

inline std::string spectrum_header() {
  return "k,ktilde,index,sigma_numeric,sigma_analytic,abs_err";
}

/// One row per singular value, 1-based index column. Analytic columns are
/// left empty when no closed form applies (non-collapsed base).
template <typename Scalar>
void append_spectrum_rows(std::string& out, const BlockSpectrum<Scalar>& numeric,
                          const std::vector<Scalar>* analytic) {
  if (analytic && analytic->size() != numeric.singular_values.size())
    throw std::invalid_argument("append_spectrum_rows: length mismatch");
  for (std::size_t i = 0; i < numeric.singular_values.size(); ++i) {
    out += format_number(numeric.k) + ',' + format_number(numeric.ktilde) +
           ',' + format_number(static_cast<long>(i + 1)) + ',' +
           format_number(numeric.singular_values[i]) + ',';
    if (analytic) {
      const Scalar a = (*analytic)[i];
      out += format_number(a) + ',' +
             format_number(std::abs(numeric.singular_values[i] - a));
    } else {
      out += ',';
    }
    out += '\n';
  }
}

inline void save_text(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  f.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!f) throw std::runtime_error("write failed: " + path);
}

inline std::string load_text(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for reading: " + path);
  std::string out((std::istreambuf_iterator<char>(f)),
                  std::istreambuf_iterator<char>());
  return out;
}

}  // namespace io
}  // namespace collapse
