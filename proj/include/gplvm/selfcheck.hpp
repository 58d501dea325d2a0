#pragma once

// Seeded numerical self-checks: the augmented-kernel identity, the ELBO bound,
// the block-form decomposition, finite-difference gradients and minibatch
// unbiasedness. Shared by the `check` command and the acceptance runner.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "gplvm/elbo.hpp"
#include "gplvm/gradients.hpp"
#include "gplvm/model.hpp"
#include "gplvm/oracle.hpp"
#include "gplvm/params.hpp"
#include "gplvm/synthetic.hpp"
#include "gplvm/trainer.hpp"

namespace gplvm::selfcheck {

struct FdReport {
  double worst_rel = 0.0;
  double worst_abs = 0.0;
  Index worst_index = -1;
  bool ok = true;
  std::string detail;
};

/// Central differences of `f` at `v`, compared to `analytic` with the rule:
/// |g| >= 1e-3 -> relative error < rel_tol; otherwise absolute error < abs_tol.
inline FdReport compare_finite_differences(
    const std::function<double(const Vector &)> &f, const Vector &v,
    const Vector &analytic, double h = 1e-5, double rel_tol = 1e-4,
    double abs_tol = 1e-6, const Vector *mask = nullptr) {
  FdReport r;
  Vector w = v;
  for (Index i = 0; i < v.size(); ++i) {
    if (mask != nullptr && (*mask)[i] == 0.0) {
      continue;
    }
    w[i] = v[i] + h;
    const double fp = f(w);
    w[i] = v[i] - h;
    const double fm = f(w);
    w[i] = v[i];
    const double fd = (fp - fm) / (2.0 * h);
    const double a = analytic[i];
    const double err = std::abs(fd - a);
    const double scale = std::max(std::abs(fd), std::abs(a));
    if (scale >= 1e-3) {
      const double rel = err / scale;
      if (rel > r.worst_rel) {
        r.worst_rel = rel;
      }
      if (rel >= rel_tol) {
        r.ok = false;
        r.worst_index = i;
        r.detail = "index " + std::to_string(i) + ": fd " + std::to_string(fd) +
                   " analytic " + std::to_string(a);
      }
    } else {
      r.worst_abs = std::max(r.worst_abs, err);
      if (err >= abs_tol) {
        r.ok = false;
        r.worst_index = i;
        r.detail = "index " + std::to_string(i) + ": fd " + std::to_string(fd) +
                   " analytic " + std::to_string(a);
      }
    }
  }
  return r;
}

struct CheckResult {
  std::string name;
  bool passed = true;
  double worst = 0.0;  // largest observed error
  double tolerance = 0.0;
  int instances = 0;
  std::string detail; // first failure, if any
};

struct CheckOptions {
  std::uint64_t seed = 0;
  int instances = 0; // 0: each check's default count
  bool inject_fault = false;
};

namespace detail {

inline std::uint64_t instance_seed(std::uint64_t seed, std::uint64_t salt, int k) {
  return splitmix64(seed ^ splitmix64(salt + static_cast<std::uint64_t>(k)));
}

inline int count_or(const CheckOptions &o, int fallback) {
  return o.instances > 0 ? o.instances : fallback;
}

inline void note_failure(CheckResult &r, int k, const std::string &what) {
  if (r.passed) {
    r.detail = "instance " + std::to_string(k) + ": " + what;
  }
  r.passed = false;
}

} // namespace detail

/// Integrated random effects (Delta = nu I) vs the augmented Gram matrix, on
/// instances with N <= 30, D <= 3, P <= 4.
inline CheckResult augmented_identity(const CheckOptions &o) {
  CheckResult r{"augmented-kernel identity", true, 0.0, 1e-8, detail::count_or(o, 50), {}};
  for (int k = 0; k < r.instances; ++k) {
    std::mt19937_64 rng(detail::instance_seed(o.seed, 0x1d, k));
    const Index n = 2 + static_cast<Index>(rng() % 29);
    const Index d = 1 + static_cast<Index>(rng() % 3);
    const int q = 1 + static_cast<int>(rng() % 3);
    const int p = static_cast<int>(rng() % 5);
    auto inst = synthetic::random_instance(rng, n, d, q, p, p + 2);
    const double integrated = oracle::exact_log_marginal(inst.y, inst.phi, inst.state);
    const auto &s = inst.state;
    // The fault perturbs one path only, so the identity must break.
    const double noise = s.noise_variance + (o.inject_fault ? 1e-3 : 0.0);
    const double augmented = oracle::augmented_log_marginal(inst.y, s.x, inst.phi, s.spec,
                                                            s.mean_f, s.zeta, noise);
    const double diff = std::abs(integrated - augmented);
    r.worst = std::max(r.worst, diff);
    if (!(diff < r.tolerance)) {
      detail::note_failure(r, k, "|difference| = " + std::to_string(diff));
    }
  }
  return r;
}

/// ELBO <= exact log marginal for random and optimally-set variational states.
inline CheckResult elbo_bound(const CheckOptions &o) {
  CheckResult r{"ELBO lower bound", true, 0.0, 1e-6, detail::count_or(o, 50), {}};
  r.worst = -std::numeric_limits<double>::infinity();
  for (int k = 0; k < r.instances; ++k) {
    std::mt19937_64 rng(detail::instance_seed(o.seed, 0x2b, k));
    const Index n = 2 + static_cast<Index>(rng() % 29);
    const Index d = 1 + static_cast<Index>(rng() % 3);
    const int p = static_cast<int>(rng() % 5);
    auto inst = synthetic::random_instance(rng, n, d, 2, p, p + 2);
    const double exact = oracle::exact_log_marginal(inst.y, inst.phi, inst.state);
    for (int pass = 0; pass < 2; ++pass) {
      if (pass == 1) {
        set_optimal_variational(inst.y, inst.phi, inst.state);
      }
      const double excess = elbo_full(inst.y, inst.phi, inst.state).total - exact;
      r.worst = std::max(r.worst, excess);
      if (!(excess <= r.tolerance)) {
        detail::note_failure(r, k, "ELBO exceeds log marginal by " + std::to_string(excess));
      }
    }
  }
  return r;
}

/// Block-form conditional equals linear + non-linear parts (plus the mean shift).
inline CheckResult decomposition(const CheckOptions &o) {
  CheckResult r{"linear/non-linear decomposition", true, 0.0, 1e-8, detail::count_or(o, 20),
                {}};
  for (int k = 0; k < r.instances; ++k) {
    std::mt19937_64 rng(detail::instance_seed(o.seed, 0x3c, k));
    const Index n = 3 + static_cast<Index>(rng() % 18);
    const int p = 1 + static_cast<int>(rng() % 4);
    const Index m1 = p + 1 + static_cast<Index>(rng() % 5);
    const Index m2 = 1 + static_cast<Index>(rng() % static_cast<std::uint64_t>(p));
    auto inst = synthetic::random_block_instance(rng, n, 2, 2, p, m1, m2);
    const auto &s = inst.state;
    for (Index d = 0; d < 2; ++d) {
      const auto full = predict_expression(s.x, inst.phi, s, d);
      const auto lin = decompose_linear_nonlinear(s, inst.phi, d);
      const auto nonlin = nonlinear_part(s, s.x, d);
      const Vector shift = (inst.phi * s.zeta.col(d)).array() + s.mean_f;
      const double em = (full.mean - lin.mean - nonlin.mean - shift).cwiseAbs().maxCoeff();
      const double ev = (full.variance - lin.variance - nonlin.variance).cwiseAbs().maxCoeff();
      const double e = std::max(em, ev);
      r.worst = std::max(r.worst, e);
      if (!(e < r.tolerance)) {
        detail::note_failure(r, k, "max deviation " + std::to_string(e));
      }
    }
  }
  return r;
}

/// Central differences on every free parameter (global blocks, latent rows and,
/// on alternate instances, an encoder network).
inline CheckResult gradient_check(const CheckOptions &o) {
  CheckResult r{"finite-difference gradients", true, 0.0, 1e-4, detail::count_or(o, 10), {}};
  for (int k = 0; k < r.instances; ++k) {
    std::mt19937_64 rng(detail::instance_seed(o.seed, 0x4d, k));
    const int p = static_cast<int>(rng() % 3);
    auto inst = synthetic::random_instance(rng, 6, 2, 2, p, p + 3);
    const bool amortised = k % 2 == 1;
    if (k % 4 == 2) {
      inst.state.zeta_mode = ZetaMode::shared;
      if (p > 0) {
        const Vector col = inst.state.zeta.col(0);
        inst.state.zeta = col.replicate(1, 2);
      }
    }
    if (amortised) {
      inst.state.encoder = EncoderParams::initialise(2 + p, {4}, 2, k);
      inst.state.encoder->var_bias.setConstant(-1.0);
      inst.state.encoder_appends_covariates = p > 0;
    }
    const std::vector<Index> batch = {0, 2, 3};
    const Matrix noise = synthetic::random_matrix(rng, 3, 2);
    auto evaluate = [&](const ModelState &s) {
      return amortised ? encoder_gradients(inst.y, inst.phi, batch, s, noise)
                       : gradients(inst.y, inst.phi, batch, s);
    };
    const auto res = evaluate(inst.state);
    Vector analytic = pack_gradient(res.grad, inst.state);
    if (o.inject_fault && k == 0) {
      analytic[0] += 1.0;
    }
    ModelState work = inst.state;
    auto f = [&](const Vector &v) {
      unpack_parameters(v, work);
      return evaluate(work).value.total;
    };
    const Vector mask = parameter_mask(inst.state);
    auto rep = compare_finite_differences(f, pack_parameters(inst.state), analytic, 1e-5,
                                          1e-4, 1e-6, &mask);
    if (rep.ok && !amortised) {
      work = inst.state;
      const Matrix &x = inst.state.x;
      auto fx = [&](const Vector &v) {
        work.x = Eigen::Map<const Matrix>(v.data(), x.rows(), x.cols());
        return gradients(inst.y, inst.phi, batch, work).value.total;
      };
      // grad.x holds one row per batch member.
      Matrix full = Matrix::Zero(x.rows(), x.cols());
      for (std::size_t b = 0; b < batch.size(); ++b) {
        full.row(batch[b]) += res.grad.x.row(static_cast<Index>(b));
      }
      const Vector gx = Eigen::Map<const Vector>(full.data(), full.size());
      rep = compare_finite_differences(fx, Eigen::Map<const Vector>(x.data(), x.size()), gx);
    }
    r.worst = std::max(r.worst, rep.worst_rel);
    if (!rep.ok) {
      detail::note_failure(r, k, rep.detail);
    }
  }
  return r;
}

/// Size-weighted average of minibatch ELBOs over one epoch's partition (KL
/// added back once) equals the full-data ELBO; batch size leaves a short tail.
inline CheckResult minibatch_unbiased(const CheckOptions &o) {
  CheckResult r{"minibatch unbiasedness", true, 0.0, 1e-10, detail::count_or(o, 10), {}};
  for (int k = 0; k < r.instances; ++k) {
    std::mt19937_64 rng(detail::instance_seed(o.seed, 0x5e, k));
    const Index b = 3 + static_cast<Index>(rng() % 3);
    const Index n = 4 * b + 1 + static_cast<Index>(rng() % static_cast<std::uint64_t>(b - 1));
    auto inst = synthetic::random_instance(rng, n, 2, 2, 2, 4);
    const auto full = elbo_full(inst.y, inst.phi, inst.state);
    double avg = 0.0;
    for (const auto &batch : minibatch_sampler(n, b, o.seed + static_cast<std::uint64_t>(k), 0)) {
      const auto e = elbo_minibatch(inst.y, inst.phi, batch, inst.state);
      avg += static_cast<double>(batch.size()) / static_cast<double>(n) * (e.total + e.kl);
    }
    const double err = std::abs(avg - full.kl - full.total) / std::max(1.0, std::abs(full.total));
    r.worst = std::max(r.worst, err);
    if (!(err < r.tolerance)) {
      detail::note_failure(r, k, "relative error " + std::to_string(err));
    }
  }
  return r;
}

inline std::vector<CheckResult> run_all(const CheckOptions &o) {
  return {augmented_identity(o), elbo_bound(o), decomposition(o), gradient_check(o),
          minibatch_unbiased(o)};
}

inline std::string format_result(const CheckResult &r) {
  std::ostringstream os;
  os << (r.passed ? "PASS" : "FAIL") << "  " << r.name << "  (" << r.instances
     << " instances, worst " << r.worst << ", tolerance " << r.tolerance << ")";
  if (!r.passed) {
    os << "  " << r.detail;
  }
  return os.str();
}

} // namespace gplvm::selfcheck
