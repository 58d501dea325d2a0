#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "gplvm/error.hpp"
#include "gplvm/linalg.hpp"

namespace gplvm {

/// Hyperparameters of k = k_per(x_1) * k_se-ard(x_2..x_Q) + nu <phi, phi'>.
/// The periodic factor always acts on latent dimension 0 with period 2*pi.
struct KernelSpec {
  double signal_variance = 1.0;
  Vector lengthscales = Vector::Ones(1);
  double linear_scale = 0.1;
  int q_total = 1;
  int p_linear = 0;

  static KernelSpec with_dims(int q, int p) {
    KernelSpec spec;
    spec.q_total = q;
    spec.p_linear = p;
    spec.lengthscales = Vector::Ones(q);
    return spec;
  }

  void validate() const {
    require(q_total >= 1, ErrorKind::configuration,
            "latent dimension Q must be at least 1");
    require(p_linear >= 0, ErrorKind::configuration,
            "design column count must be non-negative");
    require(lengthscales.size() == q_total, ErrorKind::dimension_mismatch,
            "expected " + std::to_string(q_total) + " lengthscales, got " +
                std::to_string(lengthscales.size()));
    require(std::isfinite(signal_variance) && signal_variance > 0.0,
            ErrorKind::configuration, "signal variance must be positive");
    require(std::isfinite(linear_scale) && linear_scale >= 0.0,
            ErrorKind::configuration, "linear scale must be non-negative");
    for (Index q = 0; q < lengthscales.size(); ++q) {
      require(std::isfinite(lengthscales[q]) && lengthscales[q] > 0.0,
              ErrorKind::configuration,
              "lengthscale " + std::to_string(q) + " must be positive");
    }
  }
};

/// Inducing inputs Z = [Z_per | Z_rbf | Z_lin] (M x (Q + P)).
///
/// `sentinel` marks rows standing in for the +-infinity rows of the
/// block-decomposed form: the periodic x SE-ARD kernel against such a row is
/// structurally zero. In block form the remaining rows must carry Z_lin = 0.
struct InducingInputs {
  Matrix values;
  std::vector<bool> sentinel;
  int q = 1;
  int p = 0;

  InducingInputs() = default;
  InducingInputs(Matrix z, int q_dims, int p_dims)
      : values(std::move(z)), q(q_dims), p(p_dims) {}

  Index count() const { return values.rows(); }
  bool block_form() const { return !sentinel.empty(); }
  bool is_sentinel(Index row) const {
    return block_form() && sentinel[static_cast<std::size_t>(row)];
  }

  auto latent_block() const { return values.leftCols(q); }
  auto linear_block() const { return values.rightCols(p); }

  std::vector<Index> rows_where(bool flag) const {
    std::vector<Index> out;
    for (Index i = 0; i < count(); ++i) {
      if (is_sentinel(i) == flag) {
        out.push_back(i);
      }
    }
    return out;
  }

  void validate() const {
    require(values.cols() == q + p, ErrorKind::dimension_mismatch,
            "inducing inputs must have Q + P = " + std::to_string(q + p) +
                " columns, got " + std::to_string(values.cols()));
    require(count() > p, ErrorKind::configuration,
            "the number of inducing points (" + std::to_string(count()) +
                ") must be strictly greater than the number of design "
                "columns (" +
                std::to_string(p) +
                "): at least P + 1 points are needed to span a hyperplane in "
                "covariate space");
    require(values.allFinite(), ErrorKind::non_finite,
            "inducing inputs contain non-finite values");
    if (block_form()) {
      require(static_cast<Index>(sentinel.size()) == count(),
              ErrorKind::dimension_mismatch,
              "sentinel mask length must equal the inducing count");
      for (Index i = 0; i < count(); ++i) {
        if (!is_sentinel(i) && p > 0) {
          require(values.row(i).tail(p).isZero(0.0), ErrorKind::configuration,
                  "block-form inducing row " + std::to_string(i) +
                      " must have a zero linear block");
        }
      }
    }
  }
};

struct GramBundle {
  Vector knn_diag; // N
  Matrix knm;      // N x M
  Matrix kmm;      // M x M
};

namespace detail {

/// Periodic x SE-ARD exponent for rows of two matrices (first Q columns).
template <typename A, typename B>
double nonlinear_exponent(const Eigen::MatrixBase<A> &x, Index i,
                          const Eigen::MatrixBase<B> &z, Index j,
                          const KernelSpec &spec) {
  const double d0 = x(i, 0) - z(j, 0);
  const double s = std::sin(std::abs(d0) / 2.0);
  const double l0 = spec.lengthscales[0];
  double e = -2.0 * s * s / (l0 * l0);
  for (int q = 1; q < spec.q_total; ++q) {
    const double dq = x(i, q) - z(j, q);
    const double lq = spec.lengthscales[q];
    e -= dq * dq / (2.0 * lq * lq);
  }
  return e;
}

inline void check_finite(const Matrix &m, const char *what) {
  require(m.allFinite(), ErrorKind::non_finite,
          std::string(what) + " contains non-finite values");
}

} // namespace detail

/// Scalar evaluation of the augmented covariance function.
inline double kernel_eval(const Vector &x, const Vector &x2, const Vector &phi,
                          const Vector &phi2, const KernelSpec &spec) {
  require(x.size() == spec.q_total && x2.size() == spec.q_total,
          ErrorKind::dimension_mismatch,
          "latent inputs must have length Q = " + std::to_string(spec.q_total));
  require(phi.size() == spec.p_linear && phi2.size() == spec.p_linear,
          ErrorKind::dimension_mismatch,
          "covariate inputs must have length P = " +
              std::to_string(spec.p_linear));
  const Matrix xr = x.transpose();
  const Matrix zr = x2.transpose();
  return spec.signal_variance *
             std::exp(detail::nonlinear_exponent(xr, 0, zr, 0, spec)) +
         spec.linear_scale * phi.dot(phi2);
}

inline GramBundle gram_bundle(const Matrix &x, const Matrix &phi,
                              const InducingInputs &z, const KernelSpec &spec) {
  spec.validate();
  require(x.cols() == spec.q_total, ErrorKind::dimension_mismatch,
          "X must have Q = " + std::to_string(spec.q_total) + " columns");
  require(phi.rows() == x.rows() && phi.cols() == spec.p_linear,
          ErrorKind::dimension_mismatch,
          "design matrix must be N x P = " + std::to_string(x.rows()) + " x " +
              std::to_string(spec.p_linear));
  require(z.q == spec.q_total && z.p == spec.p_linear,
          ErrorKind::dimension_mismatch,
          "inducing partition does not match the kernel spec");
  require(z.values.cols() == z.q + z.p, ErrorKind::dimension_mismatch,
          "inducing inputs have the wrong column count");
  detail::check_finite(x, "latent inputs X");
  detail::check_finite(phi, "design matrix");
  detail::check_finite(z.values, "inducing inputs Z");

  const Index n = x.rows();
  const Index m = z.count();
  const auto zlat = z.latent_block();
  const Matrix zlin = z.linear_block();
  const double sf2 = spec.signal_variance;
  const double nu = spec.linear_scale;

  GramBundle out;
  out.knn_diag = Vector::Constant(n, sf2);
  if (spec.p_linear > 0) {
    out.knn_diag += nu * phi.rowwise().squaredNorm();
  }

  out.knm.resize(n, m);
  for (Index j = 0; j < m; ++j) {
    if (z.is_sentinel(j)) {
      out.knm.col(j).setZero();
      continue;
    }
    for (Index i = 0; i < n; ++i) {
      out.knm(i, j) =
          sf2 * std::exp(detail::nonlinear_exponent(x, i, zlat, j, spec));
    }
  }
  if (spec.p_linear > 0) {
    out.knm.noalias() += nu * phi * zlin.transpose();
  }

  out.kmm.resize(m, m);
  for (Index i = 0; i < m; ++i) {
    for (Index j = 0; j <= i; ++j) {
      double v = 0.0;
      if (!z.is_sentinel(i) && !z.is_sentinel(j)) {
        v = sf2 * std::exp(detail::nonlinear_exponent(zlat, i, zlat, j, spec));
      }
      out.kmm(i, j) = v;
      out.kmm(j, i) = v;
    }
  }
  if (spec.p_linear > 0) {
    out.kmm.noalias() += nu * zlin * zlin.transpose();
  }
  return out;
}

/// Dense N x N augmented Gram matrix K_nn + nu * Phi Phi^T (test scale only).
inline Matrix gram_full(const Matrix &x, const Matrix &phi,
                        const KernelSpec &spec) {
  spec.validate();
  require(x.cols() == spec.q_total && phi.rows() == x.rows() &&
              phi.cols() == spec.p_linear,
          ErrorKind::dimension_mismatch, "inconsistent X / design shapes");
  const Index n = x.rows();
  Matrix k(n, n);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j <= i; ++j) {
      const double v = spec.signal_variance *
                       std::exp(detail::nonlinear_exponent(x, i, x, j, spec));
      k(i, j) = v;
      k(j, i) = v;
    }
  }
  if (spec.p_linear > 0) {
    k.noalias() += spec.linear_scale * phi * phi.transpose();
  }
  return k;
}

/// Adjoints of the kernel hyperparameters, all with respect to log values.
struct KernelGradient {
  double log_signal_variance = 0.0;
  Vector log_lengthscales;
  double log_linear_scale = 0.0;

  explicit KernelGradient(int q = 0) : log_lengthscales(Vector::Zero(q)) {}
};

/// Reverse pass through gram_bundle. Accumulates into x_bar (N x Q),
/// z_bar (M x (Q+P)) and the hyperparameter adjoint.
inline void gram_backward(const Matrix &x, const Matrix &phi,
                          const InducingInputs &z, const KernelSpec &spec,
                          const Vector &knn_bar, const Matrix &knm_bar,
                          const Matrix &kmm_bar, Matrix &x_bar, Matrix &z_bar,
                          KernelGradient &hyper_bar) {
  const Index n = x.rows();
  const Index m = z.count();
  const int q_dims = spec.q_total;
  const int p_dims = spec.p_linear;
  const auto zlat = z.latent_block();
  const Matrix zlin = z.linear_block();
  const double sf2 = spec.signal_variance;
  const double nu = spec.linear_scale;
  const Vector inv_l2 = spec.lengthscales.array().square().inverse();

  // knn_diag = sf2 + nu |phi_n|^2
  hyper_bar.log_signal_variance += sf2 * knn_bar.sum();
  if (p_dims > 0) {
    hyper_bar.log_linear_scale +=
        nu * knn_bar.dot(phi.rowwise().squaredNorm());
  }

  auto accumulate_pair = [&](double g, auto &&xa, Index ia, auto &&xb,
                             Index ib, double k, double *ga, double *gb,
                             Index stride_a, Index stride_b) {
    // g * dk where k = sf2 * exp(E); ga/gb point at row starts (column-major
    // with given strides) for the adjoints of the two inputs.
    const double gk = g * k;
    hyper_bar.log_signal_variance += gk;
    const double d0 = xa(ia, 0) - xb(ib, 0);
    const double s = std::sin(d0 / 2.0);
    hyper_bar.log_lengthscales[0] += gk * 4.0 * s * s * inv_l2[0];
    const double dd0 = -gk * std::sin(d0) * inv_l2[0];
    if (ga != nullptr) {
      ga[0] += dd0;
    }
    if (gb != nullptr) {
      gb[0] -= dd0;
    }
    for (int q = 1; q < q_dims; ++q) {
      const double dq = xa(ia, q) - xb(ib, q);
      hyper_bar.log_lengthscales[q] += gk * dq * dq * inv_l2[q];
      const double ddq = -gk * dq * inv_l2[q];
      if (ga != nullptr) {
        ga[q * stride_a] += ddq;
      }
      if (gb != nullptr) {
        gb[q * stride_b] -= ddq;
      }
    }
  };

  const Index xs = x_bar.rows();
  const Index zs = z_bar.rows();
  for (Index j = 0; j < m; ++j) {
    if (z.is_sentinel(j)) {
      continue;
    }
    for (Index i = 0; i < n; ++i) {
      const double g = knm_bar(i, j);
      if (g == 0.0) {
        continue;
      }
      const double k =
          sf2 * std::exp(detail::nonlinear_exponent(x, i, zlat, j, spec));
      accumulate_pair(g, x, i, zlat, j, k, x_bar.data() + i,
                      z_bar.data() + j, xs, zs);
    }
  }
  for (Index i = 0; i < m; ++i) {
    if (z.is_sentinel(i)) {
      continue;
    }
    for (Index j = 0; j < m; ++j) {
      if (z.is_sentinel(j)) {
        continue;
      }
      const double g = kmm_bar(i, j);
      if (g == 0.0) {
        continue;
      }
      const double k =
          sf2 * std::exp(detail::nonlinear_exponent(zlat, i, zlat, j, spec));
      accumulate_pair(g, zlat, i, zlat, j, k, z_bar.data() + i,
                      z_bar.data() + j, zs, zs);
    }
  }

  if (p_dims > 0) {
    // knm += nu * Phi Zlin^T ; kmm += nu * Zlin Zlin^T
    hyper_bar.log_linear_scale +=
        nu * (knm_bar.cwiseProduct(phi * zlin.transpose())).sum();
    hyper_bar.log_linear_scale +=
        nu * (kmm_bar.cwiseProduct(zlin * zlin.transpose())).sum();
    Matrix zlin_bar = nu * knm_bar.transpose() * phi;
    zlin_bar.noalias() += nu * (kmm_bar + kmm_bar.transpose()) * zlin;
    z_bar.rightCols(p_dims) += zlin_bar;
  }
}

} // namespace gplvm
