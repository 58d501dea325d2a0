#pragma once

#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "gplvm/error.hpp"
#include "gplvm/expression.hpp"
#include "gplvm/model.hpp"

namespace gplvm {

/// For each cell, the fraction of its k nearest neighbours (Euclidean, self
/// excluded, ties at equal distance broken by lower index) with the same label.
template <typename Label>
Vector knn_purity(const Matrix &latents, const std::vector<Label> &labels, Index k = 100) {
  const Index n = latents.rows();
  require(static_cast<Index>(labels.size()) == n, ErrorKind::dimension_mismatch,
          "need one label per cell");
  require(k >= 1 && k < n, ErrorKind::configuration,
          "k must be in [1, N-1] = [1, " + std::to_string(n - 1) + "], got " +
              std::to_string(k));
  Vector out(n);
  std::vector<std::pair<double, Index>> dist(static_cast<std::size_t>(n - 1));
  for (Index i = 0; i < n; ++i) {
    std::size_t t = 0;
    for (Index j = 0; j < n; ++j) {
      if (j == i) {
        continue;
      }
      const double d2 = (latents.row(i) - latents.row(j)).squaredNorm();
      dist[t++] = {d2, j};
    }
    std::nth_element(dist.begin(), dist.begin() + (k - 1), dist.end());
    Index same = 0;
    for (Index r = 0; r < k; ++r) {
      same += labels[static_cast<std::size_t>(dist[static_cast<std::size_t>(r)].second)] ==
                      labels[static_cast<std::size_t>(i)]
                  ? 1
                  : 0;
    }
    out[i] = static_cast<double>(same) / static_cast<double>(k);
  }
  return out;
}

struct SignatureOptions {
  Index n_bins = 25;
  Index n_background = 50;
  std::uint64_t seed = 0;
  std::optional<std::vector<std::string>> background; // explicit override
};

struct SignatureScore {
  Vector score;
  std::vector<std::string> background_genes;
};

namespace detail {

inline std::vector<Index> gene_indices(const ExpressionMatrix &m,
                                       const std::vector<std::string> &genes,
                                       const std::string &what) {
  std::vector<Index> idx;
  std::vector<std::string> missing;
  for (const auto &g : genes) {
    const Index j = m.gene_index(g);
    if (j < 0) {
      missing.push_back(g);
    } else {
      idx.push_back(j);
    }
  }
  if (!missing.empty()) {
    std::string msg = what + " genes not found:";
    for (const auto &g : missing) {
      msg += " " + g;
    }
    throw Error(ErrorKind::configuration, msg);
  }
  return idx;
}

inline Vector mean_of_genes(const ExpressionMatrix &m, const std::vector<Index> &idx) {
  Vector s = Vector::Zero(m.rows());
  if (idx.empty()) {
    return s;
  }
  for (Index j : idx) {
    s += m.column(j);
  }
  return s / static_cast<double>(idx.size());
}

} // namespace detail

/// Mean expression of the gene set minus the mean of a background set with
/// matched expression: genes are ranked by mean expression and cut into
/// `n_bins` equal-count bins, and for each target gene up to `n_background`
/// non-target genes are drawn (seeded) from its bin. The background is the
/// union of those draws.
inline SignatureScore signature_score(const ExpressionMatrix &m,
                                      const std::vector<std::string> &genes,
                                      const SignatureOptions &opt = {}) {
  require(!genes.empty(), ErrorKind::configuration, "signature gene list is empty");
  require(opt.n_bins >= 1 && opt.n_background >= 0, ErrorKind::configuration,
          "signature bins must be positive and background size non-negative");
  const auto target = detail::gene_indices(m, genes, "signature");
  SignatureScore out;
  std::vector<Index> background;
  if (opt.background) {
    background = detail::gene_indices(m, *opt.background, "background");
  } else {
    const Index d = m.cols();
    Vector mean(d);
    for (Index j = 0; j < d; ++j) {
      mean[j] = m.column(j).mean();
    }
    std::vector<Index> order(static_cast<std::size_t>(d));
    std::iota(order.begin(), order.end(), Index{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](Index a, Index b) { return mean[a] < mean[b]; });
    std::vector<Index> bin_of(static_cast<std::size_t>(d));
    for (Index r = 0; r < d; ++r) {
      bin_of[static_cast<std::size_t>(order[static_cast<std::size_t>(r)])] =
          std::min(opt.n_bins - 1, r * opt.n_bins / d);
    }
    const std::set<Index> target_set(target.begin(), target.end());
    std::map<Index, std::vector<Index>> pool; // bin -> non-target genes, by index
    for (Index j = 0; j < d; ++j) {
      if (!target_set.count(j)) {
        pool[bin_of[static_cast<std::size_t>(j)]].push_back(j);
      }
    }
    std::mt19937_64 rng(opt.seed);
    std::set<Index> chosen;
    for (Index t : target) {
      std::vector<Index> cand = pool[bin_of[static_cast<std::size_t>(t)]];
      std::shuffle(cand.begin(), cand.end(), rng);
      const auto take = std::min<std::size_t>(cand.size(),
                                              static_cast<std::size_t>(opt.n_background));
      chosen.insert(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(take));
    }
    background.assign(chosen.begin(), chosen.end());
  }
  for (Index j : background) {
    out.background_genes.push_back(m.gene_ids()[static_cast<std::size_t>(j)]);
  }
  out.score = detail::mean_of_genes(m, target) - detail::mean_of_genes(m, background);
  return out;
}

struct DimensionCorrelation {
  Vector r;                        // one per latent dimension
  std::vector<bool> zero_variance; // r forced to 0 where set
};

inline double pearson(const Vector &a, const Vector &b, bool *degenerate = nullptr) {
  const Vector ca = a.array() - a.mean();
  const Vector cb = b.array() - b.mean();
  const double den = std::sqrt(ca.squaredNorm() * cb.squaredNorm());
  if (degenerate != nullptr) {
    *degenerate = !(den > 0.0);
  }
  return den > 0.0 ? ca.dot(cb) / den : 0.0;
}

/// Pearson r between each latent dimension and the score over the masked cells.
inline DimensionCorrelation lv_signature_correlation(const Matrix &latents,
                                                     const Vector &score,
                                                     const std::vector<bool> &mask = {}) {
  require(score.size() == latents.rows(), ErrorKind::dimension_mismatch,
          "score must have one value per cell");
  require(mask.empty() || static_cast<Index>(mask.size()) == latents.rows(),
          ErrorKind::dimension_mismatch, "mask must have one entry per cell");
  std::vector<Index> rows;
  for (Index i = 0; i < latents.rows(); ++i) {
    if (mask.empty() || mask[static_cast<std::size_t>(i)]) {
      rows.push_back(i);
    }
  }
  require(rows.size() >= 3, ErrorKind::configuration,
          "correlation needs at least 3 selected cells, got " + std::to_string(rows.size()));
  const Vector s = detail::select_entries(score, rows);
  DimensionCorrelation out;
  out.r.resize(latents.cols());
  for (Index q = 0; q < latents.cols(); ++q) {
    const Vector col = detail::select_entries(latents.col(q), rows);
    bool degenerate = false;
    out.r[q] = pearson(col, s, &degenerate);
    out.zero_variance.push_back(degenerate);
  }
  return out;
}

/// SE-ARD dimensions (index 1..Q-1) by inverse lengthscale, largest first;
/// equal lengthscales keep index order.
inline std::vector<Index> rank_dimensions(const KernelSpec &spec) {
  std::vector<Index> dims;
  for (Index q = 1; q < spec.q_total; ++q) {
    dims.push_back(q);
  }
  std::stable_sort(dims.begin(), dims.end(), [&](Index a, Index b) {
    return 1.0 / spec.lengthscales[a] > 1.0 / spec.lengthscales[b];
  });
  return dims;
}

struct SweepBaseline {
  Vector x;   // Q
  Vector phi; // P
};

/// Per-dimension median of X and the most frequent design row (earliest on ties).
inline SweepBaseline default_baseline(const ModelState &state, const Matrix &phi) {
  SweepBaseline b;
  b.x.resize(state.q());
  for (Index q = 0; q < state.q(); ++q) {
    std::vector<double> v(state.x.col(q).data(), state.x.col(q).data() + state.x.rows());
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    b.x[q] = n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  }
  b.phi = Vector::Zero(state.p());
  if (state.p() > 0 && phi.rows() > 0) {
    std::map<std::vector<double>, std::pair<Index, Index>> counts; // row -> (count, first)
    for (Index i = 0; i < phi.rows(); ++i) {
      std::vector<double> key(static_cast<std::size_t>(phi.cols()));
      for (Index j = 0; j < phi.cols(); ++j) {
        key[static_cast<std::size_t>(j)] = phi(i, j);
      }
      auto [it, fresh] = counts.try_emplace(key, Index{0}, i);
      ++it->second.first;
    }
    Index best_count = -1, best_first = 0;
    for (const auto &[key, cf] : counts) {
      if (cf.first > best_count || (cf.first == best_count && cf.second < best_first)) {
        best_count = cf.first;
        best_first = cf.second;
      }
    }
    b.phi = phi.row(best_first).transpose();
  }
  return b;
}

struct GeneCurve {
  Index gene = 0;
  double range = 0.0;
  Vector mean; // predicted mean at each grid value
};

struct SweepResult {
  std::vector<double> grid;
  std::vector<GeneCurve> top; // ranked by range, ties by gene index
};

/// Predicted mean expression of every gene as one latent dimension moves along
/// the grid with all other inputs held at the baseline; genes ranked by the
/// range of the predicted mean.
inline SweepResult severity_sweep(const ModelState &state, Index sweep_dim,
                                  const std::vector<double> &grid,
                                  const SweepBaseline &baseline, Index top_k = 20) {
  require(!grid.empty(), ErrorKind::configuration, "sweep grid is empty");
  require(sweep_dim >= 0 && sweep_dim < state.q(), ErrorKind::out_of_range,
          "sweep dimension " + std::to_string(sweep_dim) + " outside [0, " +
              std::to_string(state.q()) + ")");
  require(baseline.x.size() == state.q() && baseline.phi.size() == state.p(),
          ErrorKind::dimension_mismatch, "baseline must have Q latent and P design values");
  require(top_k >= 0, ErrorKind::configuration, "top_k must be non-negative");
  const auto g = static_cast<Index>(grid.size());
  Matrix xs = baseline.x.transpose().replicate(g, 1);
  for (Index i = 0; i < g; ++i) {
    xs(i, sweep_dim) = grid[static_cast<std::size_t>(i)];
  }
  const Matrix ps = baseline.phi.transpose().replicate(g, 1);
  const Matrix means = predict_mean_all(xs, ps, state); // G x D
  std::vector<GeneCurve> curves;
  for (Index d = 0; d < state.num_genes(); ++d) {
    GeneCurve c;
    c.gene = d;
    c.mean = means.col(d);
    c.range = c.mean.maxCoeff() - c.mean.minCoeff();
    curves.push_back(std::move(c));
  }
  std::stable_sort(curves.begin(), curves.end(),
                   [](const GeneCurve &a, const GeneCurve &b) { return a.range > b.range; });
  curves.resize(std::min<std::size_t>(curves.size(), static_cast<std::size_t>(top_k)));
  return {grid, std::move(curves)};
}

/// Mean per-dimension correlation between `truth` and `estimate` after
/// aligning the estimate by an orthogonal Procrustes rotation (both centred).
inline double procrustes_correlation(const Matrix &truth, const Matrix &estimate) {
  require(truth.rows() == estimate.rows() && truth.cols() == estimate.cols(),
          ErrorKind::dimension_mismatch, "Procrustes inputs must have equal shape");
  const Matrix a = truth.rowwise() - truth.colwise().mean();
  const Matrix b = estimate.rowwise() - estimate.colwise().mean();
  Eigen::JacobiSVD<Matrix> svd(b.transpose() * a, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Matrix aligned = b * svd.matrixU() * svd.matrixV().transpose();
  double s = 0.0;
  for (Index q = 0; q < a.cols(); ++q) {
    s += pearson(a.col(q), aligned.col(q));
  }
  return s / static_cast<double>(a.cols());
}

namespace io {

inline void write_hash_header(std::ostream &out, const std::string &checkpoint_hash) {
  out << "# checkpoint_sha256: " << checkpoint_hash << '\n';
}

inline void write_purity_csv(const std::string &path, const std::string &hash,
                             const std::vector<std::string> &cells, const Vector &purity) {
  auto out = open_output(path);
  write_hash_header(out, hash);
  out << "cell_id,purity\n";
  for (Index i = 0; i < purity.size(); ++i) {
    out << cells[static_cast<std::size_t>(i)] << ',' << format_double(purity[i]) << '\n';
  }
}

inline void write_correlation_csv(const std::string &path, const std::string &hash,
                                  const std::vector<std::string> &dims,
                                  const DimensionCorrelation &c) {
  auto out = open_output(path);
  write_hash_header(out, hash);
  out << "dimension,pearson_r,zero_variance\n";
  for (Index q = 0; q < c.r.size(); ++q) {
    out << dims[static_cast<std::size_t>(q)] << ',' << format_double(c.r[q]) << ','
        << (c.zero_variance[static_cast<std::size_t>(q)] ? 1 : 0) << '\n';
  }
}

inline void write_sweep_csv(const std::string &path, const std::string &hash,
                            const std::vector<std::string> &genes, const SweepResult &r) {
  auto out = open_output(path);
  write_hash_header(out, hash);
  out << "rank,gene,range";
  for (std::size_t i = 0; i < r.grid.size(); ++i) {
    out << ",mean@" << format_double(r.grid[i]);
  }
  out << '\n';
  for (std::size_t k = 0; k < r.top.size(); ++k) {
    const auto &c = r.top[k];
    out << k + 1 << ',' << genes[static_cast<std::size_t>(c.gene)] << ','
        << format_double(c.range);
    for (Index i = 0; i < c.mean.size(); ++i) {
      out << ',' << format_double(c.mean[i]);
    }
    out << '\n';
  }
}

} // namespace io

} // namespace gplvm
