#pragma once

// Seeded random model instances for checks and demos.

#include <cmath>
#include <cstdint>
#include <random>

#include "gplvm/model.hpp"

namespace gplvm::synthetic {

inline Matrix random_matrix(std::mt19937_64 &rng, Index rows, Index cols,
                            double sd = 1.0) {
  std::normal_distribution<double> n(0.0, sd);
  Matrix m(rows, cols);
  for (Index j = 0; j < cols; ++j) {
    for (Index i = 0; i < rows; ++i) {
      m(i, j) = n(rng);
    }
  }
  return m;
}

inline double uniform(std::mt19937_64 &rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

/// One-hot rows for a categorical with `levels` levels.
inline Matrix random_one_hot(std::mt19937_64 &rng, Index n, Index levels) {
  Matrix phi = Matrix::Zero(n, levels);
  std::uniform_int_distribution<Index> pick(0, levels - 1);
  for (Index i = 0; i < n; ++i) {
    phi(i, pick(rng)) = 1.0;
  }
  return phi;
}

inline Matrix random_spd(std::mt19937_64 &rng, Index m, double ridge = 0.5) {
  const Matrix a = random_matrix(rng, m, m);
  return a * a.transpose() / static_cast<double>(m) +
         ridge * Matrix::Identity(m, m);
}

inline Matrix random_lower(std::mt19937_64 &rng, Index m, double scale = 0.3) {
  Matrix c = random_matrix(rng, m, m, scale);
  c = c.triangularView<Eigen::Lower>();
  for (Index i = 0; i < m; ++i) {
    c(i, i) = std::abs(c(i, i)) + 0.3;
  }
  return c;
}

struct Instance {
  Matrix y;
  Matrix phi;
  ModelState state;
};

/// Random well-conditioned state with N cells, D genes, Q latent dims,
/// P design columns and M inducing points.
inline Instance random_instance(std::mt19937_64 &rng, Index n, Index d, int q,
                                int p, Index m) {
  Instance inst;
  inst.phi = random_matrix(rng, n, p, 0.7);
  ModelState &s = inst.state;
  s.x = random_matrix(rng, n, q);
  s.spec = KernelSpec::with_dims(q, p);
  s.spec.signal_variance = uniform(rng, 0.6, 1.5);
  for (int k = 0; k < q; ++k) {
    s.spec.lengthscales[k] = uniform(rng, 0.7, 1.6);
  }
  s.spec.linear_scale = uniform(rng, 0.2, 0.8);
  s.z = InducingInputs(random_matrix(rng, m, q + p), q, p);
  s.var_means = random_matrix(rng, m, d, 0.5);
  for (Index k = 0; k < d; ++k) {
    s.var_chol.push_back(random_lower(rng, m));
  }
  s.mean_f = uniform(rng, -0.5, 0.5);
  s.zeta = random_matrix(rng, p, d, 0.3);
  s.noise_variance = uniform(rng, 0.3, 0.9);
  inst.y = random_matrix(rng, n, d);
  return inst;
}

/// Block-form instance: M1 non-linear rows [Z1, 0] followed by M2 sentinel
/// rows [0, Z2]; each q(u_d) has block-diagonal covariance.
inline Instance random_block_instance(std::mt19937_64 &rng, Index n, Index d, int q,
                                      int p, Index m1, Index m2) {
  Instance inst = random_instance(rng, n, d, q, p, m1 + m2);
  ModelState &s = inst.state;
  Matrix z = Matrix::Zero(m1 + m2, q + p);
  z.topLeftCorner(m1, q) = random_matrix(rng, m1, q);
  z.bottomRightCorner(m2, p) = random_matrix(rng, m2, p);
  s.z = InducingInputs(z, q, p);
  s.z.sentinel.assign(static_cast<std::size_t>(m1 + m2), false);
  for (Index i = m1; i < m1 + m2; ++i) {
    s.z.sentinel[static_cast<std::size_t>(i)] = true;
  }
  for (auto &c : s.var_chol) {
    c.bottomLeftCorner(m2, m1).setZero();
  }
  return inst;
}

} // namespace gplvm::synthetic
