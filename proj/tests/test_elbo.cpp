#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "gplvm/elbo.hpp"
#include "gplvm/gradients.hpp"
#include "gplvm/oracle.hpp"
#include "gplvm/params.hpp"
#include "gplvm/trainer.hpp"
#include "support.hpp"

namespace gplvm {
namespace {

using testing::random_instance;
using testing::random_matrix;

// N = 1, D = 1, M = 1, Q = 1, P = 0. Reference terms from a 30-digit
// evaluation of the closed forms.
struct Scalar {
  Matrix y = Matrix::Constant(1, 1, 0.9);
  Matrix phi = Matrix(1, 0);
  ModelState state;
  Scalar() {
    state.x = Matrix::Constant(1, 1, 0.2);
    state.spec = KernelSpec::with_dims(1, 0);
    state.spec.signal_variance = 1.3;
    state.spec.lengthscales[0] = 0.8;
    state.z = InducingInputs(Matrix::Constant(1, 1, 0.5), 1, 0);
    state.var_means = Matrix::Constant(1, 1, 0.4);
    state.var_chol = {Matrix::Constant(1, 1, 0.6)};
    state.mean_f = 0.1;
    state.zeta = Matrix(0, 1);
    state.noise_variance = 0.5;
  }
  static constexpr double ell = -0.754662282287603256138324395281;
  static constexpr double nys = 0.169352143260207256341304244129;
  static constexpr double tr = 0.313102483404865682859331132395;
  static constexpr double kl = 0.342007755999736209223262089744;
  static constexpr double total = -1.57912466495241240456222186155;
};

TEST(ElboFull, ScalarClosedForm) {
  Scalar sc;
  const auto e = elbo_full(sc.y, sc.phi, sc.state);
  EXPECT_NEAR(e.expected_loglik, Scalar::ell, 1e-14);
  EXPECT_NEAR(e.nystrom_penalty, Scalar::nys, 1e-14);
  EXPECT_NEAR(e.trace_penalty, Scalar::tr, 1e-14);
  EXPECT_NEAR(e.kl, Scalar::kl, 1e-14);
  EXPECT_NEAR(e.total, Scalar::total, 1e-14);
  EXPECT_EQ(e.total, e.expected_loglik - e.trace_penalty - e.nystrom_penalty - e.kl -
                         e.kl_latent);
}

TEST(ElboMinibatch, SingleRowOfDuplicatedScalarInstance) {
  Scalar sc;
  Matrix y(2, 1), x(2, 1);
  y << 0.9, 0.9;
  x << 0.2, 0.2;
  sc.state.x = x;
  const auto e = elbo_minibatch(y, Matrix(2, 0), {0}, sc.state);
  EXPECT_NEAR(e.total, 2.0 * (Scalar::ell - Scalar::nys - Scalar::tr) - Scalar::kl, 1e-13);
}

TEST(ElboFull, KlVanishesAtPrior) {
  std::mt19937_64 rng(1);
  auto inst = random_instance(rng, 7, 3, 2, 1, 4);
  ModelState s = inst.state;
  const GramBundle g = gram_bundle(Matrix(0, 2), Matrix(0, 1), s.z, s.spec);
  const Matrix l = jittered_cholesky(g.kmm).lower;
  s.var_means.setZero();
  for (auto &c : s.var_chol) {
    c = l;
  }
  EXPECT_NEAR(elbo_full(inst.y, inst.phi, s).kl, 0.0, 1e-12);
}

TEST(ElboFull, NonFiniteTermIsNamed) {
  std::mt19937_64 rng(2);
  auto inst = random_instance(rng, 4, 1, 2, 1, 3);
  inst.y(2, 0) = std::numeric_limits<double>::infinity();
  try {
    elbo_full(inst.y, inst.phi, inst.state);
    FAIL() << "expected an error";
  } catch (const Error &e) {
    EXPECT_EQ(e.kind(), ErrorKind::non_finite);
    EXPECT_NE(std::string(e.what()).find("expected log-likelihood"), std::string::npos);
  }
}

TEST(KlGaussians, IdenticalIsZero) {
  std::mt19937_64 rng(3);
  const Matrix k = testing::random_spd(rng, 4);
  EXPECT_NEAR(kl_gaussians(Vector::Zero(4), k, k), 0.0, 1e-12);
}

TEST(KlGaussians, ScaledCovariance) {
  std::mt19937_64 rng(4);
  const Matrix k = testing::random_spd(rng, 2);
  for (double e : {0.3, 1.0, 2.5}) {
    EXPECT_NEAR(kl_gaussians(Vector::Zero(2), e * k, k), e - 1.0 - std::log(e), 1e-12);
  }
}

TEST(KlGaussians, NonNegative) {
  std::mt19937_64 rng(5);
  for (int t = 0; t < 50; ++t) {
    const Matrix k = testing::random_spd(rng, 5), s = testing::random_spd(rng, 5, 0.1);
    EXPECT_GE(kl_gaussians(random_matrix(rng, 5, 1), s, k), 0.0);
  }
}

TEST(KlGaussians, SingularSFlagsJitter) {
  std::mt19937_64 rng(6);
  const Matrix k = testing::random_spd(rng, 3);
  const Vector v = random_matrix(rng, 3, 1);
  Warnings w;
  const double kl = kl_gaussians(Vector::Zero(3), v * v.transpose(), k, &w);
  EXPECT_TRUE(std::isfinite(kl));
  ASSERT_EQ(w.messages.size(), 1u);
}

TEST(ElboMinibatch, FullBatchEqualsFull) {
  std::mt19937_64 rng(7);
  auto inst = random_instance(rng, 9, 2, 3, 2, 5);
  std::vector<Index> all(9);
  std::iota(all.begin(), all.end(), Index{0});
  EXPECT_EQ(elbo_minibatch(inst.y, inst.phi, all, inst.state).total,
            elbo_full(inst.y, inst.phi, inst.state).total);
}

TEST(ElboMinibatch, PartitionAverageIsUnbiased) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(50 + seed);
    const Index n = 10 + static_cast<Index>(seed);
    auto inst = random_instance(rng, n, 2, 2, 2, 4);
    const auto full = elbo_full(inst.y, inst.phi, inst.state);
    // Batch size 4 leaves a short final batch for most n.
    const auto batches = minibatch_sampler(n, 4, seed, 0);
    double avg = 0.0;
    for (const auto &b : batches) {
      const auto e = elbo_minibatch(inst.y, inst.phi, b, inst.state);
      avg += static_cast<double>(b.size()) / static_cast<double>(n) * (e.total + e.kl);
    }
    EXPECT_NEAR(avg - full.kl, full.total, 1e-10 * std::max(1.0, std::abs(full.total)));
  }
}

TEST(ElboBound, BelowExactLogMarginal) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(70 + seed);
    const Index n = 3 + static_cast<Index>(seed);
    auto inst = random_instance(rng, n, 1 + static_cast<Index>(seed % 3), 2,
                                static_cast<int>(seed % 4), 4);
    const double exact = oracle::exact_log_marginal(inst.y, inst.phi, inst.state);
    EXPECT_LE(elbo_full(inst.y, inst.phi, inst.state).total, exact + 1e-6);
    set_optimal_variational(inst.y, inst.phi, inst.state);
    EXPECT_LE(elbo_full(inst.y, inst.phi, inst.state).total, exact + 1e-6);
  }
}

TEST(ElboBound, InterpolatingOptimumIsTight) {
  std::mt19937_64 rng(91);
  auto inst = random_instance(rng, 6, 2, 2, 1, 6);
  ModelState &s = inst.state;
  Matrix zv(6, 3);
  zv << s.x, inst.phi;
  s.z = InducingInputs(zv, 2, 1);
  set_optimal_variational(inst.y, inst.phi, s);
  const double exact = oracle::exact_log_marginal(inst.y, inst.phi, s);
  const double elbo = elbo_full(inst.y, inst.phi, s).total;
  EXPECT_LE(elbo, exact + 1e-8);
  EXPECT_LT(exact - elbo, 1e-4);
}

TEST(ElboFull, SmallGradientStepsDoNotDecrease) {
  std::mt19937_64 rng(92);
  auto inst = random_instance(rng, 12, 2, 2, 2, 5);
  ModelState s = inst.state;
  std::vector<Index> all(12);
  std::iota(all.begin(), all.end(), Index{0});
  const Vector mask = parameter_mask(s);
  double prev = elbo_full(inst.y, inst.phi, s).total;
  for (int step = 0; step < 50; ++step) {
    const auto g = gradients(inst.y, inst.phi, all, s);
    Vector theta = pack_parameters(s);
    theta += 1e-4 * pack_gradient(g.grad, s).cwiseProduct(mask);
    unpack_parameters(theta, s);
    s.x += 1e-4 * g.grad.x;
    const double now = elbo_full(inst.y, inst.phi, s).total;
    EXPECT_GE(now, prev - 1e-7) << "step " << step;
    prev = now;
  }
}

} // namespace
} // namespace gplvm
