#pragma once

#include <cmath>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "gplvm/elbo.hpp"
#include "gplvm/encoder.hpp"
#include "gplvm/kernel.hpp"
#include "gplvm/linalg.hpp"
#include "gplvm/model.hpp"
#include "gplvm/parallel.hpp"

namespace gplvm {

/// Adjoints of the minibatch ELBO for every free parameter block. Positive
/// hyperparameters are differentiated in log space. `x` holds one row per
/// minibatch row (in batch order).
struct ParamGradients {
  Matrix x;
  Matrix z;
  KernelGradient kernel;
  double mean_f = 0.0;
  Matrix zeta;
  double log_noise_variance = 0.0;
  Matrix var_means;
  std::vector<Matrix> var_chol;
  std::optional<EncoderParams> encoder;
};

struct GradientResult {
  ElboBreakdown value;
  ParamGradients grad;
};

struct GradientOptions {
  unsigned threads = 1;
};

namespace detail {

inline constexpr std::size_t kGeneChunk = 32;

inline Matrix effective_zeta(const ModelState &state) {
  if (state.zeta_mode == ZetaMode::per_gene || state.p() == 0) {
    return state.zeta;
  }
  const Vector shared = state.zeta.rowwise().mean();
  return shared.replicate(1, state.num_genes());
}

/// Forward + reverse pass for explicit latent rows `xb` with likelihood scale
/// `scale` (N/B). Leaves grad.encoder empty.
inline GradientResult elbo_gradients_rows(const Matrix &yb, const Matrix &phib,
                                          const Matrix &xb,
                                          const ModelState &state, double scale,
                                          const GradientOptions &opts) {
  const Index m = state.num_inducing();
  const Index b = yb.rows();
  const Index dgenes = state.num_genes();
  const double s2 = state.noise_variance;
  const double c = scale / s2;

  const GramBundle bundle = gram_bundle(xb, phib, state.z, state.spec);
  const CholeskyFactor chol = jittered_cholesky(bundle.kmm, "K_mm");
  const Matrix a = chol.solve_lower(bundle.knm.transpose()); // M x B
  const Matrix lam = chol.solve_upper(a);                    // M x B
  const Vector qnn = bundle.knn_diag - a.colwise().squaredNorm().transpose();

  const Matrix zeta_eff = effective_zeta(state);
  Matrix mean = lam.transpose() * state.var_means;
  mean.array() += state.mean_f;
  if (state.p() > 0) {
    mean.noalias() += phib * zeta_eff;
  }
  const Matrix resid = yb - mean;

  // Per-gene reductions in fixed chunks: S_sum = sum_d C_d C_d^T and
  // sum_d sum_i log|C_d,ii|.
  const std::size_t n_chunks =
      (static_cast<std::size_t>(dgenes) + kGeneChunk - 1) / kGeneChunk;
  std::vector<Matrix> chunk_s(n_chunks, Matrix::Zero(m, m));
  std::vector<double> chunk_logdiag(n_chunks, 0.0);
  parallel_chunks(static_cast<std::size_t>(dgenes), kGeneChunk, opts.threads,
                  [&](std::size_t ci, std::size_t begin, std::size_t end) {
                    for (std::size_t d = begin; d < end; ++d) {
                      const Matrix &cd = state.var_chol[d];
                      chunk_s[ci].noalias() += cd.triangularView<Eigen::Lower>() *
                                               cd.transpose();
                      chunk_logdiag[ci] += sum_log_abs_diag(cd);
                    }
                  });
  Matrix s_sum = Matrix::Zero(m, m);
  double log_diag_sum = 0.0;
  for (std::size_t ci = 0; ci < n_chunks; ++ci) {
    s_sum += chunk_s[ci];
    log_diag_sum += chunk_logdiag[ci];
  }

  const Matrix gram_lam = lam * lam.transpose();
  const Matrix k_inv = chol.solve(Matrix::Identity(m, m));
  const Matrix e = chol.solve_lower(state.var_means);

  GradientResult out;
  ElboBreakdown &v = out.value;
  const double log_norm = -0.5 * std::log(2.0 * std::numbers::pi * s2);
  v.expected_loglik = scale * (static_cast<double>(b * dgenes) * log_norm -
                               resid.squaredNorm() / (2.0 * s2));
  v.nystrom_penalty =
      scale * static_cast<double>(dgenes) * qnn.sum() / (2.0 * s2);
  v.trace_penalty = scale * gram_lam.cwiseProduct(s_sum).sum() / (2.0 * s2);
  v.kl = 0.5 * (k_inv.cwiseProduct(s_sum).sum() + e.squaredNorm() -
                static_cast<double>(m * dgenes) +
                static_cast<double>(dgenes) * chol.log_det() -
                2.0 * log_diag_sum);
  check_term(v.expected_loglik, "expected log-likelihood");
  check_term(v.trace_penalty, "trace penalty");
  check_term(v.nystrom_penalty, "Nystrom penalty");
  check_term(v.kl, "KL");
  v.finalize();

  ParamGradients &g = out.grad;
  g.log_noise_variance = -0.5 * scale * static_cast<double>(b * dgenes) +
                         scale * resid.squaredNorm() / (2.0 * s2) +
                         v.nystrom_penalty + v.trace_penalty;
  g.mean_f = c * resid.sum();
  if (state.p() > 0) {
    const Matrix zb = c * phib.transpose() * resid;
    if (state.zeta_mode == ZetaMode::shared) {
      const Vector row = zb.rowwise().sum() / static_cast<double>(dgenes);
      g.zeta = row.replicate(1, dgenes);
    } else {
      g.zeta = zb;
    }
  } else {
    g.zeta = Matrix::Zero(0, dgenes);
  }
  g.var_means = c * lam * resid - k_inv * state.var_means;

  // Adjoints flowing into the kernel matrices.
  const Matrix lam_bar = c * (state.var_means * resid.transpose() - s_sum * lam);
  const Matrix h = chol.solve_lower(lam_bar);
  Matrix a_bar = (scale * static_cast<double>(dgenes) / s2) * a + h;
  Matrix l_bar = -lam * h.transpose();
  const Matrix kmb_bar = chol.solve_upper(a_bar);
  l_bar.noalias() -= kmb_bar * a.transpose();
  const Matrix t1 = k_inv * (s_sum + state.var_means * state.var_means.transpose());
  l_bar.noalias() += chol.solve_lower(t1.transpose()).transpose();
  for (Index i = 0; i < m; ++i) {
    l_bar(i, i) -= static_cast<double>(dgenes) / chol.lower(i, i);
  }
  const Matrix kmm_bar = cholesky_adjoint(chol.lower, l_bar);
  const Vector knn_bar =
      Vector::Constant(b, -scale * static_cast<double>(dgenes) / (2.0 * s2));
  const Matrix knm_bar = kmb_bar.transpose();

  g.x = Matrix::Zero(b, state.q());
  g.z = Matrix::Zero(m, state.q() + state.p());
  g.kernel = KernelGradient(state.q());
  gram_backward(xb, phib, state.z, state.spec, knn_bar, knm_bar, kmm_bar, g.x,
                g.z, g.kernel);

  // C_d adjoint: lower((-c Lam Lam^T - K^{-1}) C_d) + diag(1 / C_ii).
  const Matrix hc = -c * gram_lam - k_inv;
  g.var_chol.resize(static_cast<std::size_t>(dgenes));
  parallel_chunks(static_cast<std::size_t>(dgenes), kGeneChunk, opts.threads,
                  [&](std::size_t, std::size_t begin, std::size_t end) {
                    for (std::size_t d = begin; d < end; ++d) {
                      const Matrix &cd = state.var_chol[d];
                      Matrix gd = hc * cd.triangularView<Eigen::Lower>();
                      gd = gd.triangularView<Eigen::Lower>();
                      for (Index i = 0; i < m; ++i) {
                        gd(i, i) += 1.0 / cd(i, i);
                      }
                      g.var_chol[d] = std::move(gd);
                    }
                  });
  return out;
}

inline Matrix encoder_input(const Matrix &yb, const Matrix &phib,
                            const ModelState &state) {
  if (!state.encoder_appends_covariates || phib.cols() == 0) {
    return yb;
  }
  Matrix in(yb.rows(), yb.cols() + phib.cols());
  in << yb, phib;
  return in;
}

} // namespace detail

/// Exact gradients of elbo_minibatch for point-estimate latents.
inline GradientResult gradients(const Matrix &y, const Matrix &phi,
                                const std::vector<Index> &batch,
                                const ModelState &state,
                                const GradientOptions &opts = {}) {
  detail::check_shapes(y, phi, state);
  require(!batch.empty(), ErrorKind::configuration, "empty minibatch");
  for (Index i : batch) {
    require(i >= 0 && i < state.num_cells(), ErrorKind::out_of_range,
            "minibatch index " + std::to_string(i) + " out of range");
  }
  const double scale = static_cast<double>(state.num_cells()) /
                       static_cast<double>(batch.size());
  return detail::elbo_gradients_rows(detail::select_rows(y, batch),
                                     detail::select_rows(phi, batch),
                                     detail::select_rows(state.x, batch), state,
                                     scale, opts);
}

/// Standard-normal draws for the reparameterised latent samples.
template <typename Rng> Matrix sample_noise(Index rows, Index cols, Rng &rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix eps(rows, cols);
  for (Index i = 0; i < rows; ++i) {
    for (Index j = 0; j < cols; ++j) {
      eps(i, j) = normal(rng);
    }
  }
  return eps;
}

/// Single-sample amortised objective and its gradients for fixed noise:
/// latents x = G(y) + sqrt(H(y)) * eps, with (N/B) sum_n KL(q(x_n)||N(0,I))
/// subtracted.
inline GradientResult encoder_gradients(const Matrix &y, const Matrix &phi,
                                        const std::vector<Index> &batch,
                                        const ModelState &state,
                                        const Matrix &noise,
                                        const GradientOptions &opts = {}) {
  require(state.encoder.has_value(), ErrorKind::configuration,
          "encoder gradients requested for a point-estimate state");
  require(y.cols() == state.num_genes() && phi.rows() == y.rows() &&
              phi.cols() == state.p(),
          ErrorKind::dimension_mismatch, "inconsistent Y / design shapes");
  require(noise.rows() == static_cast<Index>(batch.size()) &&
              noise.cols() == state.q(),
          ErrorKind::dimension_mismatch, "noise must be B x Q");
  const double scale =
      static_cast<double>(y.rows()) / static_cast<double>(batch.size());
  const Matrix yb = detail::select_rows(y, batch);
  const Matrix phib = detail::select_rows(phi, batch);
  const EncoderParams &enc = *state.encoder;
  const EncoderForward fwd =
      encoder_forward(enc, detail::encoder_input(yb, phib, state));
  const Matrix sd = fwd.var.cwiseSqrt();
  const Matrix xb = fwd.mean + sd.cwiseProduct(noise);

  GradientResult out =
      detail::elbo_gradients_rows(yb, phib, xb, state, scale, opts);
  double kl_x = 0.0;
  for (Index i = 0; i < xb.rows(); ++i) {
    kl_x += gaussian_kl_to_standard(fwd.mean.row(i).transpose(),
                                    fwd.var.row(i).transpose());
  }
  out.value.kl_latent = scale * kl_x;
  detail::check_term(out.value.kl_latent, "latent KL");
  out.value.finalize();

  const Matrix &x_bar = out.grad.x;
  const Matrix mean_bar = x_bar - scale * fwd.mean;
  const Matrix var_bar =
      x_bar.cwiseProduct(noise).cwiseQuotient(2.0 * sd) -
      (0.5 * scale) * (1.0 - fwd.var.array().inverse()).matrix();
  out.grad.encoder = encoder_backward(enc, fwd, mean_bar, var_bar);
  return out;
}

} // namespace gplvm
