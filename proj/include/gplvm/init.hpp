#pragma once

#include <Eigen/QR>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "gplvm/design.hpp"
#include "gplvm/encoder.hpp"
#include "gplvm/expression.hpp"
#include "gplvm/model.hpp"

namespace gplvm {

inline constexpr Index kExactPcaLimit = 20000;

struct PcaResult {
  Matrix scores;     // N x k, centred data projected on the components
  Matrix components; // D x k, orthonormal columns
  Vector singular_values;
  bool randomized = false;
};

namespace detail {

/// Flip each component so its largest-magnitude loading is positive.
inline void fix_signs(PcaResult &r) {
  for (Index k = 0; k < r.components.cols(); ++k) {
    Index arg = 0;
    r.components.col(k).cwiseAbs().maxCoeff(&arg);
    if (r.components(arg, k) < 0.0) {
      r.components.col(k) *= -1.0;
      r.scores.col(k) *= -1.0;
    }
  }
}

inline Matrix orthonormal_basis(const Matrix &a) {
  Eigen::HouseholderQR<Matrix> qr(a);
  return qr.householderQ() * Matrix::Identity(a.rows(), a.cols());
}

} // namespace detail

/// Randomised range finder with power iterations, then an exact SVD of the
/// small projected matrix.
inline PcaResult randomized_pca(const Matrix &centred, Index k, std::uint64_t seed,
                                Index oversample = 10, int power_iters = 4) {
  const Index l = std::min<Index>(k + oversample, std::min(centred.rows(), centred.cols()));
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix omega(centred.cols(), l);
  for (Index j = 0; j < l; ++j) {
    for (Index i = 0; i < omega.rows(); ++i) {
      omega(i, j) = normal(rng);
    }
  }
  Matrix q = detail::orthonormal_basis(centred * omega);
  for (int it = 0; it < power_iters; ++it) {
    q = detail::orthonormal_basis(centred.transpose() * q);
    q = detail::orthonormal_basis(centred * q);
  }
  const Matrix b = q.transpose() * centred; // l x D
  Eigen::JacobiSVD<Matrix> svd(b, Eigen::ComputeThinU | Eigen::ComputeThinV);
  PcaResult r;
  r.components = svd.matrixV().leftCols(k);
  r.singular_values = svd.singularValues().head(k);
  r.scores = centred * r.components;
  r.randomized = true;
  return r;
}

/// Top-k principal components of the column-centred data. Exact SVD up to
/// 20,000 rows, randomised above.
inline PcaResult pca(const Matrix &y, Index k, std::uint64_t seed = 0,
                     Index exact_limit = kExactPcaLimit) {
  require(k >= 0 && k <= std::min(y.rows(), y.cols()), ErrorKind::configuration,
          "cannot extract " + std::to_string(k) + " components from a " +
              std::to_string(y.rows()) + " x " + std::to_string(y.cols()) + " matrix");
  const Matrix centred = y.rowwise() - y.colwise().mean();
  PcaResult r;
  if (k == 0) {
    r.scores = Matrix(y.rows(), 0);
    r.components = Matrix(y.cols(), 0);
    return r;
  }
  if (y.rows() <= exact_limit) {
    Eigen::BDCSVD<Matrix> svd(centred, Eigen::ComputeThinU | Eigen::ComputeThinV);
    r.components = svd.matrixV().leftCols(k);
    r.singular_values = svd.singularValues().head(k);
    r.scores = centred * r.components;
  } else {
    r = randomized_pca(centred, k, seed);
  }
  detail::fix_signs(r);
  return r;
}

enum class DimensionRole { periodic, rbf, extra };

inline const char *role_name(DimensionRole r) {
  switch (r) {
  case DimensionRole::periodic:
    return "periodic";
  case DimensionRole::rbf:
    return "rbf";
  case DimensionRole::extra:
    return "severity";
  }
  return "rbf";
}

struct InitOptions {
  int q = 11; // total latent dims, including the extra dimension when given
  Index m = 147;
  std::vector<std::string> cc_markers;
  std::optional<Vector> extra_init; // e.g. encoded severity, one per cell
  std::uint64_t seed = 0;
  bool encoder = false;
  std::vector<Index> encoder_hidden = {128, 32};
  bool encoder_appends_covariates = false;
  ZetaMode zeta_mode = ZetaMode::per_gene;
  double inducing_noise_variance = 0.01;
};

inline std::vector<DimensionRole> dimension_roles(int q, bool extra) {
  std::vector<DimensionRole> roles(static_cast<std::size_t>(q), DimensionRole::rbf);
  roles[0] = DimensionRole::periodic;
  if (extra) {
    roles.back() = DimensionRole::extra;
  }
  return roles;
}

namespace detail {

inline Vector standardize(Vector v) {
  const double mu = v.mean();
  v.array() -= mu;
  const double sd = std::sqrt(v.squaredNorm() / static_cast<double>(v.size()));
  if (sd > 0.0) {
    v /= sd;
  }
  return v;
}

/// Mean of per-marker z-scores, then standardised.
inline Vector cell_cycle_score(const ExpressionMatrix &m,
                               const std::vector<std::string> &markers) {
  Vector score = Vector::Zero(m.rows());
  if (markers.empty()) {
    return score;
  }
  std::vector<std::string> missing;
  std::vector<Index> cols;
  for (const auto &g : markers) {
    const Index j = m.gene_index(g);
    if (j < 0) {
      missing.push_back(g);
    } else {
      cols.push_back(j);
    }
  }
  if (!missing.empty()) {
    std::string msg = "cell-cycle marker genes not found in the expression matrix:";
    for (const auto &g : missing) {
      msg += " " + g;
    }
    throw Error(ErrorKind::configuration, msg);
  }
  for (Index j : cols) {
    score += standardize(m.column(j));
  }
  return standardize(score / static_cast<double>(cols.size()));
}

} // namespace detail

/// Initial model state: periodic dim from the cell-cycle score, PCs for the
/// SE-ARD dims, optional extra dim, inducing inputs from perturbed data rows.
inline ModelState initialize(const ExpressionMatrix &expr, const Matrix &phi,
                             const InitOptions &opt) {
  const Index n = expr.rows();
  const Index d = expr.cols();
  const int p = static_cast<int>(phi.cols());
  const int extra = opt.extra_init ? 1 : 0;
  require(phi.rows() == n, ErrorKind::dimension_mismatch,
          "design matrix has " + std::to_string(phi.rows()) + " rows, expected " +
              std::to_string(n));
  require(opt.q >= 1 + extra, ErrorKind::configuration,
          "Q must leave room for the periodic dimension" +
              std::string(extra ? " and the extra dimension" : ""));
  require(opt.m > p, ErrorKind::configuration,
          "the number of inducing points M = " + std::to_string(opt.m) +
              " must be strictly greater than the number of covariate columns P = " +
              std::to_string(p) +
              "; the linear part needs M > P inducing inputs to span covariate space");
  require(!opt.extra_init || opt.extra_init->size() == n, ErrorKind::dimension_mismatch,
          "extra initialisation must have one value per cell");
  require(n > 0 && d > 0, ErrorKind::configuration, "expression matrix is empty");

  const Matrix y = expr.dense();
  const int n_pc = opt.q - 1 - extra;
  require(n_pc <= std::min(n, d), ErrorKind::configuration,
          "cannot take " + std::to_string(n_pc) + " principal components from " +
              std::to_string(n) + " cells x " + std::to_string(d) + " genes");

  ModelState s;
  s.x = Matrix::Zero(n, opt.q);
  s.x.col(0) = detail::cell_cycle_score(expr, opt.cc_markers);
  if (n_pc > 0) {
    PcaResult pc = pca(y, n_pc, opt.seed);
    // Common scale keeps relative PC variances; PC1 gets unit variance.
    const double sd1 =
        std::sqrt(pc.scores.col(0).squaredNorm() / static_cast<double>(n));
    if (sd1 > 0.0) {
      pc.scores /= sd1;
    }
    s.x.middleCols(1, n_pc) = pc.scores;
  }
  if (extra) {
    s.x.col(opt.q - 1) = *opt.extra_init;
  }

  const double mean_y = y.mean();
  const double var_y = (y.array() - mean_y).square().sum() / static_cast<double>(y.size());
  const double var_pos = var_y > 0.0 ? var_y : 1.0;
  s.spec = KernelSpec::with_dims(opt.q, p);
  s.spec.signal_variance = var_pos / 2.0;
  s.spec.linear_scale = 0.1;
  s.mean_f = mean_y;
  s.noise_variance = 0.5 * var_pos;
  s.zeta = Matrix::Zero(p, d);
  s.zeta_mode = opt.zeta_mode;

  // Inducing inputs: rows of (X | Phi) without replacement while possible.
  std::mt19937_64 rng(opt.seed ^ 0x2545f4914f6cdd1dULL);
  std::vector<Index> rows(static_cast<std::size_t>(n));
  std::iota(rows.begin(), rows.end(), Index{0});
  std::shuffle(rows.begin(), rows.end(), rng);
  std::normal_distribution<double> jitter(0.0, std::sqrt(opt.inducing_noise_variance));
  Matrix z(opt.m, opt.q + p);
  for (Index i = 0; i < opt.m; ++i) {
    const Index r = rows[static_cast<std::size_t>(i % n)];
    z.row(i).head(opt.q) = s.x.row(r);
    if (p > 0) {
      z.row(i).tail(p) = phi.row(r);
    }
    for (Index j = 0; j < z.cols(); ++j) {
      z(i, j) += jitter(rng);
    }
  }
  s.z = InducingInputs(std::move(z), opt.q, p);

  if (opt.encoder) {
    const Index in_dim = d + (opt.encoder_appends_covariates ? p : 0);
    s.encoder = EncoderParams::initialise(in_dim, opt.encoder_hidden, opt.q,
                                          opt.seed ^ 0x9e3779b97f4a7c15ULL);
    s.encoder_appends_covariates = opt.encoder_appends_covariates;
  }

  const GramBundle g = gram_bundle(Matrix(0, opt.q), Matrix(0, p), s.z, s.spec);
  const CholeskyFactor kmm = jittered_cholesky(g.kmm, "K~mm");
  s.var_means = Matrix::Zero(opt.m, d);
  s.var_chol.assign(static_cast<std::size_t>(d), kmm.lower);
  s.validate();
  return s;
}

} // namespace gplvm
