#pragma once

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

#include "gplvm/encoder.hpp"
#include "gplvm/error.hpp"
#include "gplvm/kernel.hpp"
#include "gplvm/linalg.hpp"

namespace gplvm {

enum class ZetaMode { per_gene, shared };

/// Full model state: latents, inducing inputs, per-gene q(u_d) = N(m_d, C_d C_d^T),
/// kernel hyperparameters, constant mean, fixed-effect means and noise.
struct ModelState {
  Matrix x;                     // N x Q
  InducingInputs z;             // M x (Q + P)
  Matrix var_means;             // M x D, column d is m_d
  std::vector<Matrix> var_chol; // D lower-triangular M x M factors
  KernelSpec spec;
  double mean_f = 0.0;
  Matrix zeta; // P x D, column d is zeta_d
  double noise_variance = 1.0;
  ZetaMode zeta_mode = ZetaMode::per_gene;

  // Amortised latents; when set, x holds the encoder means of the training rows.
  std::optional<EncoderParams> encoder;
  bool encoder_appends_covariates = false;

  Index num_cells() const { return x.rows(); }
  Index num_genes() const { return var_means.cols(); }
  Index num_inducing() const { return z.count(); }
  int q() const { return spec.q_total; }
  int p() const { return spec.p_linear; }

  Matrix var_cov(Index d) const {
    const Matrix &c = var_chol[static_cast<std::size_t>(d)];
    return c * c.transpose();
  }

  void validate() const {
    spec.validate();
    z.validate();
    require(z.q == spec.q_total && z.p == spec.p_linear,
            ErrorKind::dimension_mismatch,
            "inducing partition does not match kernel spec");
    require(x.cols() == spec.q_total, ErrorKind::dimension_mismatch,
            "latents must have Q columns");
    const Index m = z.count();
    require(var_means.rows() == m, ErrorKind::dimension_mismatch,
            "variational means must have M rows");
    require(static_cast<Index>(var_chol.size()) == num_genes(),
            ErrorKind::dimension_mismatch,
            "need one variational Cholesky factor per gene");
    for (const auto &c : var_chol) {
      require(c.rows() == m && c.cols() == m, ErrorKind::dimension_mismatch,
              "variational Cholesky factors must be M x M");
    }
    require(zeta.rows() == spec.p_linear && zeta.cols() == num_genes(),
            ErrorKind::dimension_mismatch, "zeta must be P x D");
    require(std::isfinite(noise_variance) && noise_variance > 0.0,
            ErrorKind::configuration, "noise variance must be positive");
    if (encoder) {
      require(encoder->output_dim() == spec.q_total,
              ErrorKind::dimension_mismatch, "encoder output must have Q dims");
    }
  }
};

struct PredictiveGaussian {
  Vector mean;
  Vector variance;
  // Largest magnitude removed when clamping negative variances to zero.
  double floored = 0.0;
};

/// Factorisation shared by all genes for one set of inputs: L = chol(K_mm),
/// W = K_mm^{-1} K_mn (column n is lambda_n) and the Nystrom gap q_nn.
struct ConditionalCache {
  CholeskyFactor chol;
  Matrix a;      // L^{-1} K_mn
  Matrix lambda; // K_mm^{-1} K_mn
  Vector qnn;

  static ConditionalCache build(const GramBundle &bundle) {
    ConditionalCache c;
    c.chol = jittered_cholesky(bundle.kmm, "K_mm");
    c.a = c.chol.solve_lower(bundle.knm.transpose());
    c.lambda = c.chol.solve_upper(c.a);
    c.qnn = bundle.knn_diag - c.a.colwise().squaredNorm().transpose();
    return c;
  }

  PredictiveGaussian marginals(const Vector &m, const Matrix &s) const {
    require(m.size() == lambda.rows() && s.rows() == lambda.rows() &&
                s.cols() == lambda.rows(),
            ErrorKind::dimension_mismatch,
            "variational parameters do not match the inducing count");
    PredictiveGaussian out;
    out.mean = lambda.transpose() * m;
    const Matrix sl = s * lambda;
    out.variance = qnn + lambda.cwiseProduct(sl).colwise().sum().transpose();
    for (Index n = 0; n < out.variance.size(); ++n) {
      if (out.variance[n] < 0.0) {
        out.floored = std::max(out.floored, -out.variance[n]);
        out.variance[n] = 0.0;
      }
    }
    return out;
  }
};

/// Marginals of q(f_d) = int p(f_d | u_d) q(u_d) du_d.
inline PredictiveGaussian conditional_f_given_u(const GramBundle &bundle,
                                                const Vector &m,
                                                const Matrix &s) {
  return ConditionalCache::build(bundle).marginals(m, s);
}

/// Fixed-effect means used by a gene, honouring the shared/per-gene switch.
inline Vector zeta_for_gene(const ModelState &state, Index d) {
  if (state.zeta_mode == ZetaMode::shared) {
    return state.zeta.rowwise().mean();
  }
  return state.zeta.col(d);
}

struct PredictionOptions {
  bool observation_noise = false;
};

inline PredictiveGaussian predict_expression(const Matrix &x_star,
                                             const Matrix &phi_star,
                                             const ModelState &state, Index d,
                                             PredictionOptions opts = {}) {
  require(d >= 0 && d < state.num_genes(), ErrorKind::out_of_range,
          "gene index " + std::to_string(d) + " out of range [0, " +
              std::to_string(state.num_genes()) + ")");
  const GramBundle bundle = gram_bundle(x_star, phi_star, state.z, state.spec);
  PredictiveGaussian out = ConditionalCache::build(bundle).marginals(
      state.var_means.col(d), state.var_cov(d));
  out.mean.array() += state.mean_f;
  if (state.p() > 0) {
    out.mean += phi_star * zeta_for_gene(state, d);
  }
  if (opts.observation_noise) {
    out.variance.array() += state.noise_variance;
  }
  return out;
}

/// Predictive means for every gene at once (N* x D).
inline Matrix predict_mean_all(const Matrix &x_star, const Matrix &phi_star,
                               const ModelState &state) {
  const GramBundle bundle = gram_bundle(x_star, phi_star, state.z, state.spec);
  const ConditionalCache cache = ConditionalCache::build(bundle);
  Matrix mean = cache.lambda.transpose() * state.var_means;
  mean.array() += state.mean_f;
  if (state.p() > 0) {
    for (Index d = 0; d < state.num_genes(); ++d) {
      mean.col(d) += phi_star * zeta_for_gene(state, d);
    }
  }
  return mean;
}

namespace detail {

inline Matrix select_rows(const Matrix &m, const std::vector<Index> &rows) {
  Matrix out(static_cast<Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.row(static_cast<Index>(i)) = m.row(rows[i]);
  }
  return out;
}

inline Matrix select_block(const Matrix &m, const std::vector<Index> &idx) {
  const auto k = static_cast<Index>(idx.size());
  Matrix out(k, k);
  for (Index i = 0; i < k; ++i) {
    for (Index j = 0; j < k; ++j) {
      out(i, j) = m(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
    }
  }
  return out;
}

inline Vector select_entries(const Vector &v, const std::vector<Index> &idx) {
  Vector out(static_cast<Index>(idx.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) {
    out[static_cast<Index>(i)] = v[idx[i]];
  }
  return out;
}

inline void require_block_form(const ModelState &state) {
  require(state.z.block_form(), ErrorKind::configuration,
          "state is not in block form: inducing inputs carry no sentinel mask");
  state.z.validate();
  const auto lin = state.z.rows_where(true);
  const auto nonlin = state.z.rows_where(false);
  require(!lin.empty() && !nonlin.empty(), ErrorKind::configuration,
          "block form needs both linear (sentinel) and non-linear inducing rows");
}

} // namespace detail

/// Posterior q(f_lin) of the random-effects part alone, for a block-form state:
/// mean Phi A m_lin and marginal variances of Phi (nu I + A (S_lin - nu Z2 Z2^T) A^T) Phi^T
/// with A = Z2^T (Z2 Z2^T)^{-1} (jitter on the Z2 Z2^T factor).
inline PredictiveGaussian decompose_linear_nonlinear(const ModelState &state,
                                                     const Matrix &phi_star,
                                                     Index d) {
  detail::require_block_form(state);
  require(phi_star.cols() == state.p(), ErrorKind::dimension_mismatch,
          "design rows must have P columns");
  require(d >= 0 && d < state.num_genes(), ErrorKind::out_of_range,
          "gene index out of range");
  const auto lin = state.z.rows_where(true);
  const Matrix z2 = detail::select_rows(state.z.values, lin).rightCols(state.p());
  const double nu = state.spec.linear_scale;
  GramBundle bundle;
  bundle.knn_diag = nu * phi_star.rowwise().squaredNorm();
  bundle.knm = nu * phi_star * z2.transpose();
  bundle.kmm = nu * z2 * z2.transpose();
  const Vector m = detail::select_entries(state.var_means.col(d), lin);
  const Matrix s = detail::select_block(state.var_cov(d), lin);
  return conditional_f_given_u(bundle, m, s);
}

/// Companion of decompose_linear_nonlinear: the periodic x SE-ARD part alone.
inline PredictiveGaussian nonlinear_part(const ModelState &state,
                                         const Matrix &x_star, Index d) {
  detail::require_block_form(state);
  require(x_star.cols() == state.q(), ErrorKind::dimension_mismatch,
          "latent rows must have Q columns");
  const auto nonlin = state.z.rows_where(false);
  KernelSpec spec = state.spec;
  spec.p_linear = 0;
  InducingInputs z1(detail::select_rows(state.z.values, nonlin).leftCols(state.q()),
                    state.q(), 0);
  const GramBundle bundle =
      gram_bundle(x_star, Matrix(x_star.rows(), 0), z1, spec);
  const Vector m = detail::select_entries(state.var_means.col(d), nonlin);
  const Matrix s = detail::select_block(state.var_cov(d), nonlin);
  return conditional_f_given_u(bundle, m, s);
}

} // namespace gplvm
