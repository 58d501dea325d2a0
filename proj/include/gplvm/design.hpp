#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "gplvm/error.hpp"
#include "gplvm/expression.hpp"

namespace gplvm {

/// Per-cell metadata keyed by cell id; values kept as text until a design is
/// built, so a column can be read as categorical or continuous.
struct CovariateTable {
  std::vector<std::string> cell_ids;
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> values; // [column][row]

  Index rows() const { return static_cast<Index>(cell_ids.size()); }

  Index column_index(const std::string &name) const {
    const auto it = std::find(columns.begin(), columns.end(), name);
    require(it != columns.end(), ErrorKind::configuration,
            "covariate column '" + name + "' not found");
    return static_cast<Index>(it - columns.begin());
  }

  const std::vector<std::string> &column(const std::string &name) const {
    return values[static_cast<std::size_t>(column_index(name))];
  }

  /// Rows reordered to `cells`; every requested cell must be present.
  CovariateTable aligned_to(const std::vector<std::string> &cells) const {
    std::unordered_map<std::string, std::size_t> pos;
    for (std::size_t i = 0; i < cell_ids.size(); ++i) {
      pos.emplace(cell_ids[i], i);
    }
    CovariateTable out;
    out.cell_ids = cells;
    out.columns = columns;
    out.values.assign(columns.size(), {});
    std::vector<std::string> missing;
    for (const auto &c : cells) {
      const auto it = pos.find(c);
      if (it == pos.end()) {
        missing.push_back(c);
        continue;
      }
      for (std::size_t k = 0; k < columns.size(); ++k) {
        out.values[k].push_back(values[k][it->second]);
      }
    }
    if (!missing.empty()) {
      std::string msg = "cells missing from covariate table:";
      for (std::size_t i = 0; i < std::min<std::size_t>(missing.size(), 10); ++i) {
        msg += " " + missing[i];
      }
      if (missing.size() > 10) {
        msg += " (+" + std::to_string(missing.size() - 10) + " more)";
      }
      throw Error(ErrorKind::configuration, msg);
    }
    return out;
  }
};

namespace io {

/// CSV with a header row; the first column holds cell ids.
inline CovariateTable read_covariates_csv(const std::string &path) {
  auto in = open_input(path);
  std::string line;
  std::size_t line_no = 0;
  CovariateTable t;
  while (std::getline(in, line)) {
    ++line_no;
    if (!trim(line).empty()) {
      auto header = split(line);
      t.columns.assign(header.begin() + 1, header.end());
      break;
    }
  }
  require(line_no > 0, ErrorKind::parse, parse_error(path, 1, "empty covariate file"));
  t.values.assign(t.columns.size(), {});
  std::set<std::string> seen;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) {
      continue;
    }
    auto fields = split(line);
    require(fields.size() == t.columns.size() + 1, ErrorKind::parse,
            parse_error(path, line_no,
                        "expected " + std::to_string(t.columns.size() + 1) +
                            " fields, got " + std::to_string(fields.size())));
    require(seen.insert(fields[0]).second, ErrorKind::parse,
            parse_error(path, line_no, "duplicate cell id '" + fields[0] + "'"));
    t.cell_ids.push_back(fields[0]);
    for (std::size_t k = 0; k < t.columns.size(); ++k) {
      require(!fields[k + 1].empty(), ErrorKind::parse,
              parse_error(path, line_no, "empty value in column '" + t.columns[k] + "'"));
      t.values[k].push_back(fields[k + 1]);
    }
  }
  return t;
}

} // namespace io

enum class ColumnKind { categorical, continuous };

struct DesignColumnSpec {
  std::string name;
  ColumnKind kind = ColumnKind::categorical;
};

/// "name" is categorical; "name:num" is continuous.
inline std::vector<DesignColumnSpec> parse_design_spec(const std::string &text) {
  std::vector<DesignColumnSpec> out;
  if (io::trim(text).empty()) {
    return out;
  }
  for (const auto &item : io::split(text)) {
    require(!item.empty(), ErrorKind::configuration, "empty design column name");
    const auto colon = item.rfind(':');
    if (colon == std::string::npos) {
      out.push_back({item, ColumnKind::categorical});
      continue;
    }
    const std::string kind = item.substr(colon + 1);
    require(kind == "num" || kind == "cat", ErrorKind::configuration,
            "design column kind must be 'cat' or 'num', got '" + kind + "'");
    out.push_back({item.substr(0, colon),
                   kind == "num" ? ColumnKind::continuous : ColumnKind::categorical});
  }
  return out;
}

struct DesignMatrix {
  Matrix values; // N x P
  std::vector<std::string> labels;
};

/// Fitted covariate encoding: one-hot levels (sorted) per categorical column
/// in spec order, then standardised continuous columns.
class DesignEncoder {
public:
  struct Column {
    std::string name;
    ColumnKind kind = ColumnKind::categorical;
    std::vector<std::string> levels; // categorical
    double mean = 0.0;               // continuous
    double sd = 1.0;
  };

  static DesignEncoder fit(const CovariateTable &table,
                           const std::vector<DesignColumnSpec> &spec) {
    DesignEncoder enc;
    std::set<std::string> names;
    for (const auto &s : spec) {
      require(names.insert(s.name).second, ErrorKind::configuration,
              "design column '" + s.name + "' listed twice");
    }
    auto ordered = spec;
    std::stable_partition(ordered.begin(), ordered.end(), [](const DesignColumnSpec &s) {
      return s.kind == ColumnKind::categorical;
    });
    for (const auto &s : ordered) {
      const auto &vals = table.column(s.name);
      Column c;
      c.name = s.name;
      c.kind = s.kind;
      if (s.kind == ColumnKind::categorical) {
        std::set<std::string> lv(vals.begin(), vals.end());
        c.levels.assign(lv.begin(), lv.end());
        require(!c.levels.empty(), ErrorKind::configuration,
                "categorical column '" + s.name + "' has no levels");
      } else {
        const Vector v = parse_numeric(s.name, vals);
        require(v.size() > 1, ErrorKind::configuration,
                "continuous column '" + s.name + "' needs at least two cells");
        c.mean = v.mean();
        c.sd = std::sqrt((v.array() - c.mean).square().sum() /
                         static_cast<double>(v.size()));
        require(c.sd > 0.0, ErrorKind::configuration,
                "continuous column '" + s.name +
                    "' has zero variance and cannot be standardised");
      }
      enc.columns_.push_back(std::move(c));
    }
    return enc;
  }

  Index width() const {
    Index w = 0;
    for (const auto &c : columns_) {
      w += c.kind == ColumnKind::categorical ? static_cast<Index>(c.levels.size()) : 1;
    }
    return w;
  }

  std::vector<std::string> labels() const {
    std::vector<std::string> out;
    for (const auto &c : columns_) {
      if (c.kind == ColumnKind::categorical) {
        for (const auto &l : c.levels) {
          out.push_back(c.name + "=" + l);
        }
      } else {
        out.push_back(c.name);
      }
    }
    return out;
  }

  DesignMatrix transform(const CovariateTable &table) const {
    DesignMatrix dm;
    dm.values = Matrix::Zero(table.rows(), width());
    dm.labels = labels();
    Index offset = 0;
    for (const auto &c : columns_) {
      const auto &vals = table.column(c.name);
      if (c.kind == ColumnKind::categorical) {
        std::set<std::string> unseen;
        for (Index i = 0; i < table.rows(); ++i) {
          const auto &v = vals[static_cast<std::size_t>(i)];
          const auto it = std::lower_bound(c.levels.begin(), c.levels.end(), v);
          if (it == c.levels.end() || *it != v) {
            unseen.insert(v);
            continue;
          }
          dm.values(i, offset + (it - c.levels.begin())) = 1.0;
        }
        if (!unseen.empty()) {
          std::string msg = "column '" + c.name + "' has levels not seen when fitting:";
          for (const auto &u : unseen) {
            msg += " " + u;
          }
          throw Error(ErrorKind::configuration, msg);
        }
        offset += static_cast<Index>(c.levels.size());
      } else {
        const Vector v = parse_numeric(c.name, vals);
        dm.values.col(offset) = (v.array() - c.mean) / c.sd;
        ++offset;
      }
    }
    return dm;
  }

  const std::vector<Column> &columns() const { return columns_; }

  nlohmann::ordered_json to_json() const {
    auto arr = nlohmann::ordered_json::array();
    for (const auto &c : columns_) {
      nlohmann::ordered_json j;
      j["name"] = c.name;
      if (c.kind == ColumnKind::categorical) {
        j["kind"] = "categorical";
        j["levels"] = c.levels;
      } else {
        j["kind"] = "continuous";
        j["mean"] = c.mean;
        j["sd"] = c.sd;
      }
      arr.push_back(std::move(j));
    }
    return arr;
  }

  static DesignEncoder from_json(const nlohmann::ordered_json &arr) {
    DesignEncoder enc;
    for (const auto &j : arr) {
      Column c;
      c.name = j.at("name").get<std::string>();
      if (j.at("kind").get<std::string>() == "categorical") {
        c.kind = ColumnKind::categorical;
        c.levels = j.at("levels").get<std::vector<std::string>>();
      } else {
        c.kind = ColumnKind::continuous;
        c.mean = j.at("mean").get<double>();
        c.sd = j.at("sd").get<double>();
      }
      enc.columns_.push_back(std::move(c));
    }
    return enc;
  }

private:
  static Vector parse_numeric(const std::string &name,
                              const std::vector<std::string> &vals) {
    Vector v(static_cast<Index>(vals.size()));
    for (std::size_t i = 0; i < vals.size(); ++i) {
      double x = 0.0;
      require(io::parse_double(vals[i], x) && std::isfinite(x), ErrorKind::parse,
              "continuous column '" + name + "' has non-numeric value '" + vals[i] +
                  "'");
      v[static_cast<Index>(i)] = x;
    }
    return v;
  }

  std::vector<Column> columns_;
};

inline DesignMatrix build_design(const CovariateTable &table,
                                 const std::vector<DesignColumnSpec> &spec) {
  return DesignEncoder::fit(table, spec).transform(table);
}

/// Ordered categories mapped to 0..k-1 and standardised. Without an explicit
/// order, numeric levels sort numerically, otherwise lexicographically.
inline Vector encode_severity(const std::vector<std::string> &values,
                              const std::vector<std::string> &order = {}) {
  require(!values.empty(), ErrorKind::configuration, "severity column is empty");
  std::vector<std::string> levels = order;
  if (levels.empty()) {
    std::set<std::string> lv(values.begin(), values.end());
    levels.assign(lv.begin(), lv.end());
    bool numeric = true;
    for (const auto &l : levels) {
      double x = 0.0;
      numeric = numeric && io::parse_double(l, x);
    }
    if (numeric) {
      std::stable_sort(levels.begin(), levels.end(),
                       [](const std::string &a, const std::string &b) {
                         double x = 0.0, y = 0.0;
                         io::parse_double(a, x);
                         io::parse_double(b, y);
                         return x < y;
                       });
    }
  }
  std::map<std::string, double> code;
  for (std::size_t k = 0; k < levels.size(); ++k) {
    code.emplace(levels[k], static_cast<double>(k));
  }
  Vector v(static_cast<Index>(values.size()));
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto it = code.find(values[i]);
    require(it != code.end(), ErrorKind::configuration,
            "severity level '" + values[i] + "' is not in the declared order");
    v[static_cast<Index>(i)] = it->second;
  }
  const double mu = v.mean();
  const double sd =
      std::sqrt((v.array() - mu).square().sum() / static_cast<double>(v.size()));
  v.array() -= mu;
  if (sd > 0.0) {
    v /= sd;
  }
  return v;
}

namespace io {

inline void write_design_csv(const std::string &path, const DesignMatrix &dm,
                             const std::vector<std::string> &cells) {
  auto out = open_output(path);
  out << "cell_id";
  for (const auto &l : dm.labels) {
    out << ',' << l;
  }
  out << '\n';
  for (Index i = 0; i < dm.values.rows(); ++i) {
    out << cells[static_cast<std::size_t>(i)];
    for (Index j = 0; j < dm.values.cols(); ++j) {
      out << ',' << format_double(dm.values(i, j));
    }
    out << '\n';
  }
}

} // namespace io

} // namespace gplvm
