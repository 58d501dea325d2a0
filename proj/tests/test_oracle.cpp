#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "gplvm/oracle.hpp"
#include "gplvm/selfcheck.hpp"
#include "support.hpp"

namespace gplvm {
namespace {

using testing::random_instance;
using testing::random_matrix;

TEST(ExactLogMarginal, SingleCellSingleGene) {
  Matrix y(1, 1), x(1, 2), phi(1, 1), zeta(1, 1);
  y << 0.7;
  x << 0.4, -0.3;
  phi << 1.5;
  zeta << 0.2;
  KernelSpec spec = KernelSpec::with_dims(2, 1);
  spec.signal_variance = 1.2;
  spec.linear_scale = 0.3;
  const double mf = -0.1, noise = 0.25;
  // Variance sf2 + nu phi^2 + noise; mean mf + phi zeta.
  const double var = 1.2 + 0.3 * 1.5 * 1.5 + 0.25;
  const double r = 0.7 - (-0.1 + 1.5 * 0.2);
  const double expected = -0.5 * std::log(2.0 * M_PI * var) - r * r / (2.0 * var);
  EXPECT_NEAR(oracle::exact_log_marginal(y, x, phi, spec, mf, zeta, noise), expected, 1e-14);
}

TEST(ExactLogMarginal, ZeroLinearScaleIsPlainGp) {
  std::mt19937_64 rng(1);
  auto inst = random_instance(rng, 9, 2, 2, 3, 3);
  ModelState s = inst.state;
  s.spec.linear_scale = 0.0;
  // Plain GP on K_nn alone, built from the kernel module with no covariates.
  KernelSpec plain = KernelSpec::with_dims(2, 0);
  plain.signal_variance = s.spec.signal_variance;
  plain.lengthscales = s.spec.lengthscales;
  Matrix k = gram_full(s.x, Matrix(9, 0), plain);
  k.diagonal().array() += s.noise_variance;
  const Eigen::LDLT<Matrix> ldlt(k);
  double expected = 0.0;
  for (Index d = 0; d < 2; ++d) {
    const Vector r = inst.y.col(d) - (inst.phi * s.zeta.col(d)).array().matrix() -
                     Vector::Constant(9, s.mean_f);
    expected += -0.5 * (9.0 * std::log(2.0 * M_PI) +
                        ldlt.vectorD().array().log().sum() + r.dot(ldlt.solve(r)));
  }
  EXPECT_NEAR(oracle::exact_log_marginal(inst.y, inst.phi, s), expected, 1e-10);
}

TEST(ExactLogMarginal, MatchesQuadratureOverRandomEffect) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(10 + seed);
    auto inst = random_instance(rng, 6, 1, 2, 1, 3);
    const auto &s = inst.state;
    const auto model = oracle::DenseModel::from(s.x, inst.phi, s.spec, s.mean_f, s.zeta,
                                                s.noise_variance);
    std::vector<double> y(inst.y.data(), inst.y.data() + inst.y.size());
    const auto quad = oracle::quadrature_log_marginal(model, y);
    const double closed = oracle::exact_log_marginal(inst.y, inst.phi, s);
    EXPECT_NEAR(quad.fine, closed, 1e-6) << seed;
    EXPECT_NEAR(quad.coarse, quad.fine, 1e-9) << seed;
  }
}

TEST(ExactLogMarginal, RejectsLargeN) {
  std::mt19937_64 rng(2);
  const Matrix x = random_matrix(rng, 201, 1);
  KernelSpec spec = KernelSpec::with_dims(1, 0);
  EXPECT_THROW(oracle::exact_log_marginal(Matrix::Zero(201, 1), x, Matrix(201, 0), spec, 0.0,
                                          Matrix(0, 1), 1.0),
               Error);
}

TEST(Equivalence, AugmentedKernelEqualsIntegratedRandomEffects) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    std::mt19937_64 rng(500 + seed);
    const Index n = 2 + static_cast<Index>(seed % 29);
    const Index d = 1 + static_cast<Index>(seed % 3);
    const int p = static_cast<int>(seed % 5);
    auto inst = random_instance(rng, n, d, 1 + static_cast<int>(seed % 3), p, p + 2);
    const auto r = oracle::equivalence_check(inst.y, inst.phi, inst.state);
    EXPECT_LT(r.difference, 1e-8) << seed;
    EXPECT_TRUE(r.ok()) << seed;
  }
}

TEST(Equivalence, ZeroScaleAndZeroDesignReduceToPlainGp) {
  std::mt19937_64 rng(3);
  auto inst = random_instance(rng, 7, 2, 2, 2, 3);
  inst.state.spec.linear_scale = 0.0;
  inst.phi.setZero();
  const auto r = oracle::equivalence_check(inst.y, inst.phi, inst.state);
  EXPECT_LT(r.difference, 1e-10);
  ModelState plain = inst.state;
  plain.spec = KernelSpec::with_dims(2, 0);
  plain.spec.signal_variance = inst.state.spec.signal_variance;
  plain.spec.lengthscales = inst.state.spec.lengthscales;
  plain.zeta = Matrix(0, 2);
  EXPECT_NEAR(r.integrated, oracle::exact_log_marginal(inst.y, Matrix(7, 0), plain), 1e-10);
}

TEST(Equivalence, NoCovariates) {
  std::mt19937_64 rng(4);
  auto inst = random_instance(rng, 8, 2, 2, 0, 3);
  const auto r = oracle::equivalence_check(inst.y, inst.phi, inst.state);
  EXPECT_LT(r.difference, 1e-10);
  EXPECT_TRUE(r.ok());
}

TEST(Equivalence, ReportCarriesFailure) {
  std::mt19937_64 rng(5);
  auto inst = random_instance(rng, 5, 1, 1, 1, 2);
  const auto r = oracle::equivalence_check(inst.y, inst.phi, inst.state, -1.0);
  EXPECT_FALSE(r.identity_ok);
  EXPECT_FALSE(r.ok());
}

TEST(OracleCholesky, FactorsAndSolves) {
  oracle::Dense a(2, 2);
  a(0, 0) = 4.0;
  a(0, 1) = a(1, 0) = 2.0;
  a(1, 1) = 3.0;
  oracle::Dense l;
  ASSERT_TRUE(oracle::cholesky(a, l));
  EXPECT_DOUBLE_EQ(l(0, 0), 2.0);
  EXPECT_DOUBLE_EQ(l(1, 0), 1.0);
  EXPECT_DOUBLE_EQ(l(1, 1), std::sqrt(2.0));
  const auto x = oracle::chol_solve(l, {2.0, 1.0});
  EXPECT_NEAR(4.0 * x[0] + 2.0 * x[1], 2.0, 1e-15);
  EXPECT_NEAR(2.0 * x[0] + 3.0 * x[1], 1.0, 1e-15);
  EXPECT_NEAR(oracle::log_det_from_chol(l), std::log(8.0), 1e-15);
}

TEST(SelfCheck, SeededSuitePasses) {
  for (std::uint64_t seed : {0u, 7u}) {
    for (const auto &r : selfcheck::run_all({seed, 0, false})) {
      EXPECT_TRUE(r.passed) << selfcheck::format_result(r);
    }
  }
}

TEST(SelfCheck, ReportIsReproducible) {
  const auto a = selfcheck::run_all({7, 3, false});
  const auto b = selfcheck::run_all({7, 3, false});
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(selfcheck::format_result(a[i]), selfcheck::format_result(b[i]));
  }
}

TEST(SelfCheck, InjectedFaultIsReported) {
  const selfcheck::CheckOptions o{1, 2, true};
  EXPECT_FALSE(selfcheck::augmented_identity(o).passed);
  EXPECT_FALSE(selfcheck::gradient_check(o).passed);
}

} // namespace
} // namespace gplvm
