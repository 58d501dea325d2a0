#pragma once

#include <Eigen/Sparse>

#include <charconv>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <unordered_map>
#include <variant>
#include <vector>

#include "gplvm/error.hpp"
#include "gplvm/linalg.hpp"

namespace gplvm {

using SparseMatrix = Eigen::SparseMatrix<double, Eigen::ColMajor>;

/// Cells x genes expression values with labels. Storage is dense or sparse
/// (column-major, so a gene column is cheap to densify on demand).
class ExpressionMatrix {
public:
  ExpressionMatrix() = default;
  ExpressionMatrix(Matrix values, std::vector<std::string> cells,
                   std::vector<std::string> genes, bool processed = false)
      : storage_(std::move(values)), cell_ids_(std::move(cells)),
        gene_ids_(std::move(genes)), processed_(processed) {
    check_labels();
  }
  ExpressionMatrix(SparseMatrix values, std::vector<std::string> cells,
                   std::vector<std::string> genes, bool processed = false)
      : storage_(std::move(values)), cell_ids_(std::move(cells)),
        gene_ids_(std::move(genes)), processed_(processed) {
    std::get<SparseMatrix>(storage_).makeCompressed();
    check_labels();
  }

  Index rows() const {
    return std::visit([](const auto &m) { return Index(m.rows()); }, storage_);
  }
  Index cols() const {
    return std::visit([](const auto &m) { return Index(m.cols()); }, storage_);
  }
  bool is_sparse() const { return std::holds_alternative<SparseMatrix>(storage_); }
  bool processed() const { return processed_; }
  void set_processed(bool p) { processed_ = p; }

  const std::vector<std::string> &cell_ids() const { return cell_ids_; }
  const std::vector<std::string> &gene_ids() const { return gene_ids_; }

  Vector column(Index d) const {
    if (is_sparse()) {
      return Vector(std::get<SparseMatrix>(storage_).col(d));
    }
    return std::get<Matrix>(storage_).col(d);
  }

  Matrix dense() const {
    if (is_sparse()) {
      return Matrix(std::get<SparseMatrix>(storage_));
    }
    return std::get<Matrix>(storage_);
  }

  const SparseMatrix &sparse() const { return std::get<SparseMatrix>(storage_); }
  const Matrix &dense_ref() const { return std::get<Matrix>(storage_); }

  Index gene_index(const std::string &gene) const {
    for (std::size_t i = 0; i < gene_ids_.size(); ++i) {
      if (gene_ids_[i] == gene) {
        return static_cast<Index>(i);
      }
    }
    return -1;
  }

private:
  void check_labels() const {
    require(static_cast<Index>(cell_ids_.size()) == rows(),
            ErrorKind::dimension_mismatch,
            "expected " + std::to_string(rows()) + " cell labels, got " +
                std::to_string(cell_ids_.size()));
    require(static_cast<Index>(gene_ids_.size()) == cols(),
            ErrorKind::dimension_mismatch,
            "expected " + std::to_string(cols()) + " gene labels, got " +
                std::to_string(gene_ids_.size()));
  }

  std::variant<Matrix, SparseMatrix> storage_;
  std::vector<std::string> cell_ids_;
  std::vector<std::string> gene_ids_;
  bool processed_ = false;
};

namespace io {

inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) {
    s.remove_prefix(1);
  }
  while (!s.empty() &&
         (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) {
    s.remove_suffix(1);
  }
  return s;
}

inline std::vector<std::string> split(std::string_view line, char sep = ',') {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(sep, start);
    out.emplace_back(trim(line.substr(start, pos - start)));
    if (pos == std::string_view::npos) {
      break;
    }
    start = pos + 1;
  }
  return out;
}

inline bool parse_double(std::string_view s, double &out) {
  s = trim(s);
  if (!s.empty() && s.front() == '+') {
    s.remove_prefix(1);
  }
  const auto res = std::from_chars(s.data(), s.data() + s.size(), out);
  return res.ec == std::errc() && res.ptr == s.data() + s.size() && !s.empty();
}

inline std::ifstream open_input(const std::string &path) {
  std::ifstream in(path);
  require(in.good(), ErrorKind::io, "cannot open input file '" + path + "'");
  return in;
}

inline std::ofstream open_output(const std::string &path) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), ErrorKind::io, "cannot open output file '" + path + "'");
  return out;
}

inline std::string parse_error(const std::string &path, std::size_t line,
                               const std::string &what) {
  return path + ":" + std::to_string(line) + ": " + what;
}

/// One non-empty entry per line (label files, marker gene lists).
inline std::vector<std::string> read_lines(const std::string &path) {
  auto in = open_input(path);
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    const auto t = trim(line);
    if (!t.empty()) {
      out.emplace_back(t);
    }
  }
  return out;
}

inline void write_lines(const std::string &path,
                        const std::vector<std::string> &lines) {
  auto out = open_output(path);
  for (const auto &l : lines) {
    out << l << '\n';
  }
}

/// Dense CSV: header "<corner>,gene_1,...,gene_D", then "cell,v_1,...,v_D".
inline ExpressionMatrix read_dense_csv(const std::string &path) {
  auto in = open_input(path);
  std::string line;
  std::size_t line_no = 0;
  std::vector<std::string> genes;
  while (std::getline(in, line)) {
    ++line_no;
    if (!trim(line).empty()) {
      auto header = split(line);
      genes.assign(header.begin() + 1, header.end());
      break;
    }
  }
  require(!genes.empty(), ErrorKind::parse,
          parse_error(path, line_no, "missing header row with gene labels"));
  std::vector<std::string> cells;
  std::vector<double> values;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) {
      continue;
    }
    auto fields = split(line);
    require(fields.size() == genes.size() + 1, ErrorKind::parse,
            parse_error(path, line_no,
                        "expected " + std::to_string(genes.size() + 1) +
                            " fields, got " + std::to_string(fields.size())));
    cells.push_back(fields[0]);
    for (std::size_t j = 1; j < fields.size(); ++j) {
      double v = 0.0;
      require(parse_double(fields[j], v), ErrorKind::parse,
              parse_error(path, line_no, "invalid number '" + fields[j] + "'"));
      values.push_back(v);
    }
  }
  const auto n = static_cast<Index>(cells.size());
  const auto d = static_cast<Index>(genes.size());
  Matrix m(n, d);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < d; ++j) {
      m(i, j) = values[static_cast<std::size_t>(i * d + j)];
    }
  }
  return ExpressionMatrix(std::move(m), std::move(cells), std::move(genes));
}

inline void write_dense_csv(const std::string &path, const ExpressionMatrix &e,
                            const std::string &corner = "cell_id") {
  auto out = open_output(path);
  out << corner;
  for (const auto &g : e.gene_ids()) {
    out << ',' << g;
  }
  out << '\n';
  const Matrix m = e.dense();
  for (Index i = 0; i < m.rows(); ++i) {
    out << e.cell_ids()[static_cast<std::size_t>(i)];
    for (Index j = 0; j < m.cols(); ++j) {
      out << ',' << format_double(m(i, j));
    }
    out << '\n';
  }
}

/// MatrixMarket coordinate file (rows = cells, columns = genes unless
/// `transpose`), duplicates summed. `real`, `integer` and `pattern` fields.
inline ExpressionMatrix read_matrix_market(const std::string &path,
                                           const std::string &cell_labels,
                                           const std::string &gene_labels,
                                           bool transpose = false) {
  auto in = open_input(path);
  std::string line;
  std::size_t line_no = 0;
  require(static_cast<bool>(std::getline(in, line)), ErrorKind::parse,
          parse_error(path, 1, "empty file"));
  ++line_no;
  std::istringstream banner(line);
  std::string tag, object, format, field, symmetry;
  banner >> tag >> object >> format >> field >> symmetry;
  require(tag == "%%MatrixMarket" && object == "matrix" && format == "coordinate",
          ErrorKind::parse,
          parse_error(path, line_no, "expected a MatrixMarket coordinate banner"));
  require(field == "real" || field == "integer" || field == "pattern",
          ErrorKind::parse,
          parse_error(path, line_no, "unsupported field type '" + field + "'"));
  require(symmetry == "general", ErrorKind::parse,
          parse_error(path, line_no, "only general symmetry is supported"));
  const bool pattern = field == "pattern";

  long long nrow = -1, ncol = -1, nnz = -1;
  while (std::getline(in, line)) {
    ++line_no;
    const auto t = trim(line);
    if (t.empty() || t.front() == '%') {
      continue;
    }
    std::istringstream size_line{std::string(t)};
    require(static_cast<bool>(size_line >> nrow >> ncol >> nnz) && nrow >= 0 &&
                ncol >= 0 && nnz >= 0,
            ErrorKind::parse, parse_error(path, line_no, "invalid size line"));
    break;
  }
  require(nrow >= 0, ErrorKind::parse, parse_error(path, line_no, "missing size line"));

  std::vector<Eigen::Triplet<double>> triplets;
  triplets.reserve(static_cast<std::size_t>(nnz));
  long long seen = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto t = trim(line);
    if (t.empty() || t.front() == '%') {
      continue;
    }
    std::istringstream entry{std::string(t)};
    long long i = 0, j = 0;
    std::string vtext;
    require(static_cast<bool>(entry >> i >> j), ErrorKind::parse,
            parse_error(path, line_no, "invalid coordinate entry"));
    double v = 1.0;
    if (!pattern) {
      require(static_cast<bool>(entry >> vtext) && parse_double(vtext, v),
              ErrorKind::parse, parse_error(path, line_no, "invalid value"));
    }
    require(i >= 1 && i <= nrow && j >= 1 && j <= ncol, ErrorKind::parse,
            parse_error(path, line_no, "coordinate outside the declared shape"));
    if (transpose) {
      std::swap(i, j);
    }
    triplets.emplace_back(static_cast<Index>(i - 1), static_cast<Index>(j - 1), v);
    ++seen;
  }
  require(seen == nnz, ErrorKind::parse,
          parse_error(path, line_no,
                      "declared " + std::to_string(nnz) + " entries, found " +
                          std::to_string(seen)));
  const Index rows = transpose ? ncol : nrow;
  const Index cols = transpose ? nrow : ncol;
  SparseMatrix m(rows, cols);
  m.setFromTriplets(triplets.begin(), triplets.end()); // sums duplicates
  auto cells = read_lines(cell_labels);
  auto genes = read_lines(gene_labels);
  require(static_cast<Index>(cells.size()) == rows, ErrorKind::parse,
          cell_labels + ": expected " + std::to_string(rows) + " cell labels, got " +
              std::to_string(cells.size()));
  require(static_cast<Index>(genes.size()) == cols, ErrorKind::parse,
          gene_labels + ": expected " + std::to_string(cols) + " gene labels, got " +
              std::to_string(genes.size()));
  return ExpressionMatrix(std::move(m), std::move(cells), std::move(genes));
}

inline void write_matrix_market(const std::string &path,
                                const std::string &cell_labels,
                                const std::string &gene_labels,
                                const ExpressionMatrix &e) {
  SparseMatrix m = e.is_sparse() ? e.sparse() : e.dense().sparseView(0.0, 0.0);
  m.prune(0.0, 0.0);
  auto out = open_output(path);
  out << "%%MatrixMarket matrix coordinate real general\n";
  out << m.rows() << ' ' << m.cols() << ' ' << m.nonZeros() << '\n';
  for (Index j = 0; j < m.outerSize(); ++j) {
    for (SparseMatrix::InnerIterator it(m, j); it; ++it) {
      out << it.row() + 1 << ' ' << it.col() + 1 << ' ' << format_double(it.value())
          << '\n';
    }
  }
  write_lines(cell_labels, e.cell_ids());
  write_lines(gene_labels, e.gene_ids());
}

enum class ExpressionFormat { dense_csv, matrix_market };

struct ExpressionSource {
  ExpressionFormat format = ExpressionFormat::dense_csv;
  std::string path;
  std::string cell_labels;
  std::string gene_labels;
  bool transpose = false;
};

inline ExpressionMatrix load_expression(const ExpressionSource &src) {
  if (src.format == ExpressionFormat::matrix_market) {
    return read_matrix_market(src.path, src.cell_labels, src.gene_labels,
                              src.transpose);
  }
  return read_dense_csv(src.path);
}

} // namespace io

} // namespace gplvm
