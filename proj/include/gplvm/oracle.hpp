#pragma once

// Dense reference computations for tests. Everything below the `dense`
// helpers works on std::vector storage with its own kernel, Cholesky and
// solves, so agreement with the main path is a meaningful check.

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "gplvm/elbo.hpp"
#include "gplvm/error.hpp"
#include "gplvm/kernel.hpp"
#include "gplvm/model.hpp"

namespace gplvm::oracle {

inline constexpr Index kMaxDenseCells = 200;
inline constexpr double kLog2Pi = 1.8378770664093453;

/// Row-major dense matrix.
struct Dense {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> a;

  Dense() = default;
  Dense(std::size_t r, std::size_t c, double v = 0.0) : rows(r), cols(c), a(r * c, v) {}

  double &operator()(std::size_t i, std::size_t j) { return a[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return a[i * cols + j]; }

  static Dense from(const Matrix &m) {
    Dense d(static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols()));
    for (std::size_t i = 0; i < d.rows; ++i) {
      for (std::size_t j = 0; j < d.cols; ++j) {
        d(i, j) = m(static_cast<Index>(i), static_cast<Index>(j));
      }
    }
    return d;
  }
  std::vector<double> row(std::size_t i) const {
    return std::vector<double>(a.begin() + static_cast<std::ptrdiff_t>(i * cols),
                               a.begin() + static_cast<std::ptrdiff_t>((i + 1) * cols));
  }
  std::vector<double> col(std::size_t j) const {
    std::vector<double> v(rows);
    for (std::size_t i = 0; i < rows; ++i) {
      v[i] = (*this)(i, j);
    }
    return v;
  }
};

inline Dense multiply(const Dense &x, const Dense &y, bool transpose_y = false) {
  const std::size_t inner = x.cols;
  const std::size_t out_cols = transpose_y ? y.rows : y.cols;
  Dense out(x.rows, out_cols);
  for (std::size_t i = 0; i < x.rows; ++i) {
    for (std::size_t j = 0; j < out_cols; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < inner; ++k) {
        s += x(i, k) * (transpose_y ? y(j, k) : y(k, j));
      }
      out(i, j) = s;
    }
  }
  return out;
}

inline Dense transpose(const Dense &x) {
  Dense t(x.cols, x.rows);
  for (std::size_t i = 0; i < x.rows; ++i) {
    for (std::size_t j = 0; j < x.cols; ++j) {
      t(j, i) = x(i, j);
    }
  }
  return t;
}

/// Plain Cholesky (Cholesky–Banachiewicz). Returns false on a non-positive pivot.
inline bool cholesky(const Dense &a, Dense &l) {
  const std::size_t n = a.rows;
  l = Dense(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      double s = a(i, j);
      for (std::size_t k = 0; k < j; ++k) {
        s -= l(i, k) * l(j, k);
      }
      if (i == j) {
        if (!(s > 0.0)) {
          return false;
        }
        l(i, i) = std::sqrt(s);
      } else {
        l(i, j) = s / l(j, j);
      }
    }
  }
  return true;
}

/// Cholesky with diagonal jitter escalation; throws when nothing works.
inline Dense cholesky_jittered(Dense a, const std::string &name) {
  const double ladder[] = {0.0, 1e-10, 1e-8, 1e-6};
  double prev = 0.0;
  for (double delta : ladder) {
    for (std::size_t i = 0; i < a.rows; ++i) {
      a(i, i) += delta - prev;
    }
    prev = delta;
    Dense l;
    if (cholesky(a, l)) {
      return l;
    }
  }
  throw Error(ErrorKind::ill_conditioned, "oracle: " + name + " is not positive definite");
}

/// Solves L x = b (forward substitution).
inline std::vector<double> forward(const Dense &l, std::vector<double> b) {
  for (std::size_t i = 0; i < l.rows; ++i) {
    for (std::size_t k = 0; k < i; ++k) {
      b[i] -= l(i, k) * b[k];
    }
    b[i] /= l(i, i);
  }
  return b;
}

/// Solves L^T x = b (back substitution).
inline std::vector<double> backward(const Dense &l, std::vector<double> b) {
  for (std::size_t ii = l.rows; ii-- > 0;) {
    for (std::size_t k = ii + 1; k < l.rows; ++k) {
      b[ii] -= l(k, ii) * b[k];
    }
    b[ii] /= l(ii, ii);
  }
  return b;
}

inline std::vector<double> chol_solve(const Dense &l, const std::vector<double> &b) {
  return backward(l, forward(l, b));
}

inline double log_det_from_chol(const Dense &l) {
  double s = 0.0;
  for (std::size_t i = 0; i < l.rows; ++i) {
    s += 2.0 * std::log(l(i, i));
  }
  return s;
}

inline double dot(const std::vector<double> &x, const std::vector<double> &y) {
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    s += x[i] * y[i];
  }
  return s;
}

/// log N(y | mean, L L^T)
inline double gaussian_log_density(const std::vector<double> &y,
                                   const std::vector<double> &mean, const Dense &l) {
  std::vector<double> r(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    r[i] = y[i] - mean[i];
  }
  const auto w = forward(l, r);
  return -0.5 * (static_cast<double>(y.size()) * kLog2Pi + log_det_from_chol(l) +
                 dot(w, w));
}

/// Periodic x SE-ARD factor only (no linear term), written from the closed form.
inline double nonlinear_kernel(const std::vector<double> &x, const std::vector<double> &x2,
                               double sf2, const std::vector<double> &ls) {
  const double s = std::sin(std::abs(x[0] - x2[0]) / 2.0);
  double e = -2.0 * s * s / (ls[0] * ls[0]);
  for (std::size_t q = 1; q < x.size(); ++q) {
    const double diff = x[q] - x2[q];
    e -= diff * diff / (2.0 * ls[q] * ls[q]);
  }
  return sf2 * std::exp(e);
}

struct Hyper {
  double sf2 = 1.0;
  std::vector<double> ls;
  double nu = 0.0;

  static Hyper of(const KernelSpec &spec) {
    Hyper h;
    h.sf2 = spec.signal_variance;
    h.nu = spec.linear_scale;
    h.ls.assign(spec.lengthscales.data(),
                spec.lengthscales.data() + spec.lengthscales.size());
    return h;
  }
};

/// Test-scale dense model for one set of inputs: per-gene marginal
/// N(mu_f + Phi zeta_d, K_nn + nu Phi Phi^T + noise I).
struct DenseModel {
  Dense x;   // N x Q
  Dense phi; // N x P
  Hyper hyper;
  double mean_f = 0.0;
  Dense zeta; // P x D
  double noise = 1.0;

  static DenseModel from(const Matrix &x, const Matrix &phi, const KernelSpec &spec,
                         double mean_f, const Matrix &zeta, double noise) {
    require(x.rows() <= kMaxDenseCells, ErrorKind::configuration,
            "oracle: dense model limited to " + std::to_string(kMaxDenseCells) +
                " cells, got " + std::to_string(x.rows()));
    DenseModel m;
    m.x = Dense::from(x);
    m.phi = Dense::from(phi);
    m.hyper = Hyper::of(spec);
    m.mean_f = mean_f;
    m.zeta = Dense::from(zeta);
    m.noise = noise;
    return m;
  }

  std::size_t n() const { return x.rows; }
  std::size_t p() const { return phi.cols; }

  Dense k_nonlinear() const {
    Dense k(n(), n());
    for (std::size_t i = 0; i < n(); ++i) {
      for (std::size_t j = 0; j < n(); ++j) {
        k(i, j) = nonlinear_kernel(x.row(i), x.row(j), hyper.sf2, hyper.ls);
      }
    }
    return k;
  }

  std::vector<double> mean(std::size_t d) const {
    std::vector<double> mu(n(), mean_f);
    for (std::size_t i = 0; i < n(); ++i) {
      for (std::size_t k = 0; k < p(); ++k) {
        mu[i] += phi(i, k) * zeta(k, d);
      }
    }
    return mu;
  }
};

/// Random effects B integrated out with Delta = nu I: the likelihood covariance
/// is A + nu Phi Phi^T with A = K_nn + noise I, evaluated through the Woodbury
/// identity and the matrix determinant lemma.
inline double integrated_log_marginal(const DenseModel &model, const Matrix &y) {
  const std::size_t n = model.n();
  const std::size_t p = model.p();
  Dense a = model.k_nonlinear();
  for (std::size_t i = 0; i < n; ++i) {
    a(i, i) += model.noise;
  }
  const Dense la = cholesky_jittered(a, "K_nn + noise I");
  // W = L_A^{-1} Phi  (n x p)
  Dense w(n, p);
  for (std::size_t k = 0; k < p; ++k) {
    const auto c = forward(la, model.phi.col(k));
    for (std::size_t i = 0; i < n; ++i) {
      w(i, k) = c[i];
    }
  }
  // C = I + nu W^T W  (p x p)
  Dense c(p, p);
  for (std::size_t i = 0; i < p; ++i) {
    for (std::size_t j = 0; j < p; ++j) {
      double s = 0.0;
      for (std::size_t r = 0; r < n; ++r) {
        s += w(r, i) * w(r, j);
      }
      c(i, j) = (i == j ? 1.0 : 0.0) + model.hyper.nu * s;
    }
  }
  Dense lc;
  const bool ok = cholesky(c, lc);
  require(ok, ErrorKind::ill_conditioned, "oracle: capacitance matrix not positive definite");
  const double log_det = log_det_from_chol(la) + log_det_from_chol(lc);

  double total = 0.0;
  for (Index d = 0; d < y.cols(); ++d) {
    const auto mu = model.mean(static_cast<std::size_t>(d));
    std::vector<double> r(n);
    for (std::size_t i = 0; i < n; ++i) {
      r[i] = y(static_cast<Index>(i), d) - mu[i];
    }
    const auto u = forward(la, r); // L_A^{-1} r
    // r^T (A + nu Phi Phi^T)^{-1} r = u^T u - nu (W^T u)^T C^{-1} (W^T u)
    std::vector<double> wt(p, 0.0);
    for (std::size_t k = 0; k < p; ++k) {
      for (std::size_t i = 0; i < n; ++i) {
        wt[k] += w(i, k) * u[i];
      }
    }
    const auto v = forward(lc, wt);
    const double quad = dot(u, u) - model.hyper.nu * dot(v, v);
    total += -0.5 * (static_cast<double>(n) * kLog2Pi + log_det + quad);
  }
  return total;
}

inline double exact_log_marginal(const Matrix &y, const Matrix &x, const Matrix &phi,
                                 const KernelSpec &spec, double mean_f,
                                 const Matrix &zeta, double noise) {
  return integrated_log_marginal(DenseModel::from(x, phi, spec, mean_f, zeta, noise), y);
}

/// Same quantity through the augmented kernel of the main path: one dense
/// Gram matrix K_nn + nu Phi Phi^T + noise I.
inline double augmented_log_marginal(const Matrix &y, const Matrix &x, const Matrix &phi,
                                     const KernelSpec &spec, double mean_f,
                                     const Matrix &zeta, double noise) {
  require(x.rows() <= kMaxDenseCells, ErrorKind::configuration,
          "oracle: dense model limited to " + std::to_string(kMaxDenseCells) + " cells");
  Matrix k = gram_full(x, phi, spec);
  k.diagonal().array() += noise;
  Eigen::LLT<Matrix> llt(k);
  require(llt.info() == Eigen::Success, ErrorKind::ill_conditioned,
          "augmented Gram matrix is not positive definite");
  const Matrix l = llt.matrixL();
  const double log_det = 2.0 * l.diagonal().array().log().sum();
  double total = 0.0;
  for (Index d = 0; d < y.cols(); ++d) {
    Vector r = y.col(d).array() - mean_f;
    if (phi.cols() > 0) {
      r -= phi * zeta.col(d);
    }
    const Vector w = l.triangularView<Eigen::Lower>().solve(r);
    total += -0.5 * (static_cast<double>(x.rows()) * kLog2Pi + log_det + w.squaredNorm());
  }
  return total;
}

inline double exact_log_marginal(const Matrix &y, const Matrix &phi,
                                 const ModelState &s) {
  return exact_log_marginal(y, s.x, phi, s.spec, s.mean_f, s.zeta, s.noise_variance);
}

/// Log marginal of a single gene with a rank-one design, with the scalar
/// random effect b ~ N(0, nu) integrated numerically: trapezoid rule on
/// [-12 sd, 12 sd], evaluated on a coarse and a fine grid.
struct QuadratureResult {
  double coarse = 0.0;
  double fine = 0.0;
};

inline QuadratureResult quadrature_log_marginal(const DenseModel &model,
                                                const std::vector<double> &y,
                                                std::size_t coarse_points = 1001) {
  require(model.p() == 1, ErrorKind::configuration,
          "oracle: quadrature needs exactly one design column");
  require(model.hyper.nu > 0.0, ErrorKind::configuration,
          "oracle: quadrature needs a positive random-effect variance");
  const std::size_t n = model.n();
  Dense a = model.k_nonlinear();
  for (std::size_t i = 0; i < n; ++i) {
    a(i, i) += model.noise;
  }
  const Dense la = cholesky_jittered(a, "K_nn + noise I");
  const auto base = model.mean(0);
  const double sd = std::sqrt(model.hyper.nu);
  auto integrate = [&](std::size_t points) {
    const double lo = -12.0 * sd;
    const double h = 24.0 * sd / static_cast<double>(points - 1);
    std::vector<double> logs(points);
    for (std::size_t k = 0; k < points; ++k) {
      const double b = lo + h * static_cast<double>(k);
      std::vector<double> mu = base;
      for (std::size_t i = 0; i < n; ++i) {
        mu[i] += model.phi(i, 0) * b;
      }
      const double prior = -0.5 * (kLog2Pi + std::log(model.hyper.nu) + b * b / model.hyper.nu);
      const double w = (k == 0 || k + 1 == points) ? 0.5 : 1.0;
      logs[k] = gaussian_log_density(y, mu, la) + prior + std::log(w * h);
    }
    const double mx = *std::max_element(logs.begin(), logs.end());
    double s = 0.0;
    for (double v : logs) {
      s += std::exp(v - mx);
    }
    return mx + std::log(s);
  };
  return {integrate(coarse_points), integrate(2 * coarse_points - 1)};
}

/// q(f*) = \int p(f* | u) q(u) du at test inputs, by dense Gaussian
/// conditioning on the joint prior of (f*, u). Sentinel inducing rows carry
/// no periodic x SE-ARD covariance.
struct DenseConditional {
  std::vector<double> mean;
  std::vector<double> variance;
};

inline DenseConditional conditional(const Matrix &x_star, const Matrix &phi_star,
                                    const InducingInputs &z, const KernelSpec &spec,
                                    const Vector &m, const Matrix &s) {
  const Hyper h = Hyper::of(spec);
  const auto q = static_cast<std::size_t>(spec.q_total);
  const auto p = static_cast<std::size_t>(spec.p_linear);
  const Dense xs = Dense::from(x_star);
  const Dense ps = Dense::from(phi_star);
  const Dense zz = Dense::from(z.values);
  const std::size_t ns = xs.rows;
  const std::size_t mm = zz.rows;
  auto zlat = [&](std::size_t j) {
    auto r = zz.row(j);
    r.resize(q);
    return r;
  };
  auto zlin = [&](std::size_t j) {
    auto r = zz.row(j);
    return std::vector<double>(r.begin() + static_cast<std::ptrdiff_t>(q), r.end());
  };
  auto k_star_u = [&](std::size_t i, std::size_t j) {
    double v = z.is_sentinel(static_cast<Index>(j))
                   ? 0.0
                   : nonlinear_kernel(xs.row(i), zlat(j), h.sf2, h.ls);
    if (p > 0) {
      v += h.nu * dot(ps.row(i), zlin(j));
    }
    return v;
  };
  Dense kuu(mm, mm);
  for (std::size_t i = 0; i < mm; ++i) {
    for (std::size_t j = 0; j < mm; ++j) {
      double v = 0.0;
      if (!z.is_sentinel(static_cast<Index>(i)) && !z.is_sentinel(static_cast<Index>(j))) {
        v = nonlinear_kernel(zlat(i), zlat(j), h.sf2, h.ls);
      }
      if (p > 0) {
        v += h.nu * dot(zlin(i), zlin(j));
      }
      kuu(i, j) = v;
    }
  }
  const Dense l = cholesky_jittered(kuu, "K_uu");
  const Dense sd = Dense::from(s);
  std::vector<double> mv(m.data(), m.data() + m.size());
  DenseConditional out;
  for (std::size_t i = 0; i < ns; ++i) {
    std::vector<double> ku(mm);
    for (std::size_t j = 0; j < mm; ++j) {
      ku[j] = k_star_u(i, j);
    }
    const auto a = chol_solve(l, ku); // K_uu^{-1} k_u
    double prior = h.sf2;
    if (p > 0) {
      prior += h.nu * dot(ps.row(i), ps.row(i));
    }
    double sa = 0.0;
    for (std::size_t r = 0; r < mm; ++r) {
      for (std::size_t c = 0; c < mm; ++c) {
        sa += a[r] * sd(r, c) * a[c];
      }
    }
    out.mean.push_back(dot(a, mv));
    out.variance.push_back(prior - dot(ku, a) + sa);
  }
  return out;
}

struct EquivalenceReport {
  double integrated = 0.0;
  double augmented = 0.0;
  double difference = 0.0;
  double elbo = std::numeric_limits<double>::quiet_NaN();
  bool identity_ok = false;
  bool bound_ok = true;
  bool ok() const { return identity_ok && bound_ok; }
};

/// Compares the integrated-random-effects likelihood with the augmented-kernel
/// likelihood, and (when a state is given) checks the ELBO stays below both.
inline EquivalenceReport equivalence_check(const Matrix &y, const Matrix &phi,
                                           const ModelState &state,
                                           double tol = 1e-8, bool with_elbo = true) {
  EquivalenceReport r;
  r.integrated = exact_log_marginal(y, phi, state);
  r.augmented = augmented_log_marginal(y, state.x, phi, state.spec, state.mean_f,
                                       state.zeta, state.noise_variance);
  r.difference = std::abs(r.integrated - r.augmented);
  r.identity_ok = r.difference < tol;
  if (with_elbo) {
    r.elbo = elbo_full(y, phi, state).total;
    r.bound_ok = r.elbo <= r.integrated + 1e-6;
  }
  return r;
}

} // namespace gplvm::oracle
