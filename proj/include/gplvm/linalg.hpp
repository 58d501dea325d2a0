#pragma once

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <string>
#include <string_view>

#include "gplvm/error.hpp"

namespace gplvm {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

inline constexpr std::array<double, 4> kJitterLadder = {0.0, 1e-8, 1e-6, 1e-4};

// A pivot below this fraction of the largest diagonal entry is treated as a
// failed factorisation even when Eigen reports success.
inline constexpr double kRelativePivotFloor = 1e-12;

struct CholeskyFactor {
  Matrix lower;
  double jitter = 0.0;

  Index size() const { return lower.rows(); }

  /// Solves (L L^T) x = b.
  template <typename Rhs> Matrix solve(const Eigen::MatrixBase<Rhs> &b) const {
    Matrix y = lower.triangularView<Eigen::Lower>().solve(b);
    return lower.transpose().triangularView<Eigen::Upper>().solve(y);
  }

  /// L^{-1} b
  template <typename Rhs>
  Matrix solve_lower(const Eigen::MatrixBase<Rhs> &b) const {
    return lower.triangularView<Eigen::Lower>().solve(b);
  }

  /// L^{-T} b
  template <typename Rhs>
  Matrix solve_upper(const Eigen::MatrixBase<Rhs> &b) const {
    return lower.transpose().triangularView<Eigen::Upper>().solve(b);
  }

  double log_det() const {
    return 2.0 * lower.diagonal().array().log().sum();
  }
};

inline bool all_finite(const Matrix &m) { return m.allFinite(); }

/// Cholesky of A + delta*I for the smallest delta on the ladder that yields a
/// numerically positive factor.
inline CholeskyFactor jittered_cholesky(const Matrix &a,
                                        std::string_view name = "matrix") {
  require(a.rows() == a.cols(), ErrorKind::dimension_mismatch,
          std::string(name) + " must be square");
  require(a.allFinite(), ErrorKind::non_finite,
          std::string(name) + " has non-finite entries");
  const Index m = a.rows();
  if (m == 0) {
    return {Matrix(0, 0), 0.0};
  }
  const double scale = std::max(a.diagonal().cwiseAbs().maxCoeff(), 1e-300);
  for (double delta : kJitterLadder) {
    Matrix shifted = a;
    shifted.diagonal().array() += delta;
    Eigen::LLT<Matrix> llt(shifted);
    if (llt.info() != Eigen::Success) {
      continue;
    }
    Matrix l = llt.matrixL();
    const double min_pivot = l.diagonal().minCoeff();
    if (!(min_pivot > 0.0) || min_pivot * min_pivot < kRelativePivotFloor * scale) {
      continue;
    }
    return {std::move(l), delta};
  }
  throw Error(ErrorKind::ill_conditioned,
              std::string(name) + " is not positive definite even with jitter " +
                  std::to_string(kJitterLadder.back()));
}

/// Lower triangle with the diagonal halved.
inline Matrix phi_lower(const Matrix &a) {
  Matrix out = a.triangularView<Eigen::Lower>();
  out.diagonal() *= 0.5;
  return out;
}

/// Reverse-mode adjoint of the Cholesky factorisation. Given L = chol(A) and
/// the adjoint of L (only its lower triangle is read), returns the symmetric
/// adjoint of A.
inline Matrix cholesky_adjoint(const Matrix &lower, const Matrix &lower_bar) {
  Matrix lbar = lower_bar.triangularView<Eigen::Lower>();
  Matrix p = phi_lower(lower.transpose() * lbar);
  // L^{-T} P L^{-1}
  Matrix tmp = lower.transpose().triangularView<Eigen::Upper>().solve(p);
  Matrix abar =
      lower.transpose().triangularView<Eigen::Upper>().solve(tmp.transpose());
  abar.transposeInPlace();
  return 0.5 * (abar + abar.transpose());
}

inline double sum_log_abs_diag(const Matrix &a) {
  double s = 0.0;
  for (Index i = 0; i < a.rows(); ++i) {
    s += std::log(std::abs(a(i, i)));
  }
  return s;
}

} // namespace gplvm
