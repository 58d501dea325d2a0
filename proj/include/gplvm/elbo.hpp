#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "gplvm/error.hpp"
#include "gplvm/kernel.hpp"
#include "gplvm/linalg.hpp"
#include "gplvm/model.hpp"

namespace gplvm {

/// Terms of the factorised bound. `kl_latent` is the amortised KL(q(X)||p(X))
/// and stays zero for point-estimate latents.
struct ElboBreakdown {
  double expected_loglik = 0.0;
  double trace_penalty = 0.0;
  double nystrom_penalty = 0.0;
  double kl = 0.0;
  double kl_latent = 0.0;
  double total = 0.0;

  void finalize() {
    total = expected_loglik - trace_penalty - nystrom_penalty - kl - kl_latent;
  }
};

/// KL(N(m, S) || N(0, K)).
inline double kl_gaussians(const Vector &m, const Matrix &s, const Matrix &k,
                           Warnings *warnings = nullptr) {
  const Index dim = m.size();
  require(s.rows() == dim && s.cols() == dim && k.rows() == dim &&
              k.cols() == dim,
          ErrorKind::dimension_mismatch, "KL arguments have mismatched shapes");
  const CholeskyFactor lk = jittered_cholesky(k, "prior covariance K");
  CholeskyFactor ls = jittered_cholesky(s, "variational covariance S");
  if (ls.jitter > 0.0) {
    warn(warnings, "S singular: log det taken with jitter " +
                       std::to_string(ls.jitter));
  }
  const double trace = lk.solve(s).trace();
  const double maha = lk.solve_lower(m).squaredNorm();
  return 0.5 * (trace + maha - static_cast<double>(dim) + lk.log_det() -
                ls.log_det());
}

namespace detail {

inline void check_term(double value, const char *name) {
  require(std::isfinite(value), ErrorKind::non_finite,
          std::string("ELBO term '") + name + "' is not finite");
}

/// Sum over genes of KL(q(u_d) || p(u_d)) using C_d directly.
inline double kl_sum(const ModelState &state, const CholeskyFactor &chol) {
  const Index m = state.num_inducing();
  const double log_det_k = chol.log_det();
  double total = 0.0;
  for (Index d = 0; d < state.num_genes(); ++d) {
    const Matrix &c = state.var_chol[static_cast<std::size_t>(d)];
    const double trace = chol.solve_lower(c).squaredNorm();
    const double maha = chol.solve_lower(state.var_means.col(d)).squaredNorm();
    const double log_det_s = 2.0 * sum_log_abs_diag(c);
    total += 0.5 * (trace + maha - static_cast<double>(m) + log_det_k - log_det_s);
  }
  return total;
}

/// Likelihood-side terms for a block of rows, scaled by `scale`.
inline ElboBreakdown likelihood_terms(const Matrix &y, const Matrix &phi,
                                      const Matrix &x, const ModelState &state,
                                      double scale) {
  const GramBundle bundle = gram_bundle(x, phi, state.z, state.spec);
  const ConditionalCache cache = ConditionalCache::build(bundle);
  const double s2 = state.noise_variance;
  const Index b = y.rows();
  const Index dgenes = y.cols();

  Matrix mean = cache.lambda.transpose() * state.var_means;
  mean.array() += state.mean_f;
  if (state.p() > 0) {
    for (Index d = 0; d < dgenes; ++d) {
      mean.col(d) += phi * zeta_for_gene(state, d);
    }
  }
  const Matrix resid = y - mean;

  double trace = 0.0;
  for (Index d = 0; d < dgenes; ++d) {
    const Matrix v = state.var_chol[static_cast<std::size_t>(d)].transpose() *
                     cache.lambda;
    trace += v.squaredNorm();
  }

  ElboBreakdown out;
  const double log_norm = -0.5 * std::log(2.0 * std::numbers::pi * s2);
  out.expected_loglik =
      scale * (static_cast<double>(b * dgenes) * log_norm -
               resid.squaredNorm() / (2.0 * s2));
  out.nystrom_penalty =
      scale * static_cast<double>(dgenes) * cache.qnn.sum() / (2.0 * s2);
  out.trace_penalty = scale * trace / (2.0 * s2);
  return out;
}

inline void check_shapes(const Matrix &y, const Matrix &phi,
                         const ModelState &state) {
  state.validate();
  require(y.rows() == state.num_cells() && y.cols() == state.num_genes(),
          ErrorKind::dimension_mismatch,
          "Y must be N x D = " + std::to_string(state.num_cells()) + " x " +
              std::to_string(state.num_genes()));
  require(phi.rows() == state.num_cells() && phi.cols() == state.p(),
          ErrorKind::dimension_mismatch, "design matrix must be N x P");
}

inline ElboBreakdown finish(ElboBreakdown out, const ModelState &state) {
  const GramBundle zz = gram_bundle(Matrix(0, state.q()), Matrix(0, state.p()),
                                    state.z, state.spec);
  const CholeskyFactor chol = jittered_cholesky(zz.kmm, "K_mm");
  out.kl = kl_sum(state, chol);
  check_term(out.expected_loglik, "expected log-likelihood");
  check_term(out.trace_penalty, "trace penalty");
  check_term(out.nystrom_penalty, "Nystrom penalty");
  check_term(out.kl, "KL");
  out.finalize();
  return out;
}

} // namespace detail

inline ElboBreakdown elbo_full(const Matrix &y, const Matrix &phi,
                               const ModelState &state) {
  detail::check_shapes(y, phi, state);
  return detail::finish(detail::likelihood_terms(y, phi, state.x, state, 1.0),
                        state);
}

/// Unbiased estimate from the rows in `batch`: likelihood terms scaled by N/B,
/// KL unscaled.
inline ElboBreakdown elbo_minibatch(const Matrix &y, const Matrix &phi,
                                    const std::vector<Index> &batch,
                                    const ModelState &state) {
  detail::check_shapes(y, phi, state);
  require(!batch.empty(), ErrorKind::configuration, "empty minibatch");
  for (Index i : batch) {
    require(i >= 0 && i < state.num_cells(), ErrorKind::out_of_range,
            "minibatch index " + std::to_string(i) + " out of range");
  }
  const double scale = static_cast<double>(state.num_cells()) /
                       static_cast<double>(batch.size());
  return detail::finish(
      detail::likelihood_terms(detail::select_rows(y, batch),
                               detail::select_rows(phi, batch),
                               detail::select_rows(state.x, batch), state,
                               scale),
      state);
}

/// Closed-form optimum of q(u_d) for fixed hyperparameters and inputs:
/// S = K (K + K_mn K_nm / s2)^{-1} K,  m = S K^{-1} K_mn r_d / s2.
inline void set_optimal_variational(const Matrix &y, const Matrix &phi,
                                    ModelState &state) {
  detail::check_shapes(y, phi, state);
  const GramBundle bundle = gram_bundle(state.x, phi, state.z, state.spec);
  const CholeskyFactor chol = jittered_cholesky(bundle.kmm, "K_mm");
  Matrix k = chol.lower * chol.lower.transpose();
  const double s2 = state.noise_variance;
  Matrix sigma = k + bundle.knm.transpose() * bundle.knm / s2;
  const CholeskyFactor sig = jittered_cholesky(sigma, "K_mm + K_mn K_nm / s2");
  const Matrix s = k * sig.solve(k);
  const Matrix s_sym = 0.5 * (s + s.transpose());
  const CholeskyFactor ls = jittered_cholesky(s_sym, "optimal S");
  for (Index d = 0; d < state.num_genes(); ++d) {
    Vector r = y.col(d).array() - state.mean_f;
    if (state.p() > 0) {
      r -= phi * zeta_for_gene(state, d);
    }
    state.var_means.col(d) = k * sig.solve(bundle.knm.transpose() * r) / s2;
    state.var_chol[static_cast<std::size_t>(d)] = ls.lower;
  }
}

} // namespace gplvm
