#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "gplvm/error.hpp"
#include "gplvm/expression.hpp"

namespace gplvm {

inline constexpr double kTargetRowSum = 10000.0;
inline constexpr int kHvgBins = 20;

namespace detail {

inline Vector row_sums(const ExpressionMatrix &m) {
  if (m.is_sparse()) {
    Vector s = Vector::Zero(m.rows());
    const SparseMatrix &sp = m.sparse();
    for (Index j = 0; j < sp.outerSize(); ++j) {
      for (SparseMatrix::InnerIterator it(sp, j); it; ++it) {
        s[it.row()] += it.value();
      }
    }
    return s;
  }
  return m.dense_ref().rowwise().sum();
}

inline bool any_negative(const ExpressionMatrix &m) {
  if (m.is_sparse()) {
    const SparseMatrix &sp = m.sparse();
    for (Index k = 0; k < sp.nonZeros(); ++k) {
      if (sp.valuePtr()[k] < 0.0) {
        return true;
      }
    }
    return false;
  }
  return (m.dense_ref().array() < 0.0).any();
}

} // namespace detail

/// Scales each row to sum to `target`. All-zero rows are dropped and reported.
inline ExpressionMatrix normalize_total(const ExpressionMatrix &m,
                                        Warnings *warnings = nullptr,
                                        double target = kTargetRowSum) {
  require(!detail::any_negative(m), ErrorKind::configuration,
          "raw counts must be non-negative");
  const Vector sums = detail::row_sums(m);
  std::vector<Index> keep;
  std::vector<std::string> cells;
  std::vector<std::string> dropped;
  std::vector<Index> new_index(static_cast<std::size_t>(m.rows()), -1);
  for (Index i = 0; i < m.rows(); ++i) {
    if (sums[i] > 0.0) {
      new_index[static_cast<std::size_t>(i)] = static_cast<Index>(keep.size());
      keep.push_back(i);
      cells.push_back(m.cell_ids()[static_cast<std::size_t>(i)]);
    } else {
      dropped.push_back(m.cell_ids()[static_cast<std::size_t>(i)]);
    }
  }
  if (!dropped.empty()) {
    std::string msg = "dropped " + std::to_string(dropped.size()) +
                      " all-zero cell(s):";
    for (const auto &c : dropped) {
      msg += " " + c;
    }
    warn(warnings, msg);
  }
  require(!keep.empty(), ErrorKind::configuration, "every cell has zero counts");

  if (m.is_sparse()) {
    const SparseMatrix &sp = m.sparse();
    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(static_cast<std::size_t>(sp.nonZeros()));
    for (Index j = 0; j < sp.outerSize(); ++j) {
      for (SparseMatrix::InnerIterator it(sp, j); it; ++it) {
        const Index r = new_index[static_cast<std::size_t>(it.row())];
        if (r >= 0) {
          trip.emplace_back(r, j, it.value() * target / sums[it.row()]);
        }
      }
    }
    SparseMatrix out(static_cast<Index>(keep.size()), sp.cols());
    out.setFromTriplets(trip.begin(), trip.end());
    return ExpressionMatrix(std::move(out), std::move(cells), m.gene_ids());
  }
  const Matrix &d = m.dense_ref();
  Matrix out(static_cast<Index>(keep.size()), d.cols());
  for (std::size_t k = 0; k < keep.size(); ++k) {
    out.row(static_cast<Index>(k)) = d.row(keep[k]) * (target / sums[keep[k]]);
  }
  return ExpressionMatrix(std::move(out), std::move(cells), m.gene_ids());
}

inline ExpressionMatrix log1p_transform(const ExpressionMatrix &m) {
  if (m.is_sparse()) {
    SparseMatrix sp = m.sparse();
    for (Index k = 0; k < sp.nonZeros(); ++k) {
      sp.valuePtr()[k] = std::log1p(sp.valuePtr()[k]);
    }
    return ExpressionMatrix(std::move(sp), m.cell_ids(), m.gene_ids(), true);
  }
  Matrix d = m.dense_ref().unaryExpr([](double v) { return std::log1p(v); });
  return ExpressionMatrix(std::move(d), m.cell_ids(), m.gene_ids(), true);
}

/// Normalised dispersion per gene: var/mean of the (log) values, z-scored
/// within equal-width bins of mean expression. Genes alone in a bin, or in a
/// bin with zero spread, score 0; zero-mean genes score -inf.
inline Vector normalized_dispersion(const ExpressionMatrix &m, int n_bins = kHvgBins) {
  const Index d = m.cols();
  const double n = static_cast<double>(m.rows());
  Vector mean(d), disp(d);
  for (Index j = 0; j < d; ++j) {
    const Vector col = m.column(j);
    const double mu = col.sum() / n;
    const double var =
        m.rows() > 1 ? (col.array() - mu).square().sum() / (n - 1.0) : 0.0;
    mean[j] = mu;
    disp[j] = mu > 0.0 ? var / mu : -std::numeric_limits<double>::infinity();
  }
  Vector out = Vector::Zero(d);
  const double lo = mean.minCoeff();
  const double hi = mean.maxCoeff();
  const double width = (hi - lo) / n_bins;
  std::vector<std::vector<Index>> bins(static_cast<std::size_t>(n_bins));
  // Genes visited in label order so bin statistics do not depend on column order.
  std::vector<Index> by_label(static_cast<std::size_t>(d));
  std::iota(by_label.begin(), by_label.end(), Index{0});
  std::sort(by_label.begin(), by_label.end(), [&](Index a, Index b) {
    return m.gene_ids()[static_cast<std::size_t>(a)] <
           m.gene_ids()[static_cast<std::size_t>(b)];
  });
  for (Index j : by_label) {
    if (!std::isfinite(disp[j])) {
      out[j] = disp[j];
      continue;
    }
    int b = width > 0.0 ? static_cast<int>((mean[j] - lo) / width) : 0;
    b = std::clamp(b, 0, n_bins - 1);
    bins[static_cast<std::size_t>(b)].push_back(j);
  }
  for (const auto &bin : bins) {
    if (bin.size() < 2) {
      continue;
    }
    double s = 0.0;
    for (Index j : bin) {
      s += disp[j];
    }
    const double mu = s / static_cast<double>(bin.size());
    double ss = 0.0;
    for (Index j : bin) {
      ss += (disp[j] - mu) * (disp[j] - mu);
    }
    const double sd = std::sqrt(ss / static_cast<double>(bin.size() - 1));
    if (sd > 0.0) {
      for (Index j : bin) {
        out[j] = (disp[j] - mu) / sd;
      }
    }
  }
  return out;
}

/// Indices of the `n_hvg` most dispersed genes, returned in original order.
inline std::vector<Index> select_hvg(const ExpressionMatrix &m, Index n_hvg) {
  require(n_hvg > 0, ErrorKind::configuration,
          "number of highly variable genes must be positive, got " +
              std::to_string(n_hvg));
  std::vector<Index> idx(static_cast<std::size_t>(m.cols()));
  std::iota(idx.begin(), idx.end(), Index{0});
  if (n_hvg >= m.cols()) {
    return idx;
  }
  const Vector score = normalized_dispersion(m);
  std::sort(idx.begin(), idx.end(), [&](Index a, Index b) {
    if (score[a] != score[b]) {
      return score[a] > score[b];
    }
    return m.gene_ids()[static_cast<std::size_t>(a)] <
           m.gene_ids()[static_cast<std::size_t>(b)];
  });
  idx.resize(static_cast<std::size_t>(n_hvg));
  std::sort(idx.begin(), idx.end());
  return idx;
}

inline ExpressionMatrix select_genes(const ExpressionMatrix &m,
                                     const std::vector<Index> &genes) {
  std::vector<std::string> ids;
  for (Index j : genes) {
    ids.push_back(m.gene_ids()[static_cast<std::size_t>(j)]);
  }
  if (m.is_sparse()) {
    const SparseMatrix &sp = m.sparse();
    SparseMatrix out(sp.rows(), static_cast<Index>(genes.size()));
    std::vector<Eigen::Triplet<double>> trip;
    for (std::size_t k = 0; k < genes.size(); ++k) {
      for (SparseMatrix::InnerIterator it(sp, genes[k]); it; ++it) {
        trip.emplace_back(it.row(), static_cast<Index>(k), it.value());
      }
    }
    out.setFromTriplets(trip.begin(), trip.end());
    return ExpressionMatrix(std::move(out), m.cell_ids(), std::move(ids), m.processed());
  }
  Matrix out(m.rows(), static_cast<Index>(genes.size()));
  for (std::size_t k = 0; k < genes.size(); ++k) {
    out.col(static_cast<Index>(k)) = m.dense_ref().col(genes[k]);
  }
  return ExpressionMatrix(std::move(out), m.cell_ids(), std::move(ids), m.processed());
}

/// Row-normalise to 10,000, log1p, keep `n_hvg` genes.
inline ExpressionMatrix preprocess(const ExpressionMatrix &m, Index n_hvg = 5000,
                                   Warnings *warnings = nullptr) {
  require(n_hvg > 0, ErrorKind::configuration,
          "number of highly variable genes must be positive, got " +
              std::to_string(n_hvg));
  require(!m.processed(), ErrorKind::configuration,
          "input is already marked as processed");
  ExpressionMatrix logged = log1p_transform(normalize_total(m, warnings));
  return select_genes(logged, select_hvg(logged, n_hvg));
}

} // namespace gplvm
