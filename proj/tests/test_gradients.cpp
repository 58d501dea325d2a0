#include <gtest/gtest.h>

#include <numeric>
#include <random>

#include "gplvm/elbo.hpp"
#include "gplvm/gradients.hpp"
#include "gplvm/params.hpp"
#include "support.hpp"

namespace gplvm {
namespace {

using testing::compare_finite_differences;
using testing::random_instance;

TEST(CholeskyAdjoint, MatchesFiniteDifferences) {
  std::mt19937_64 rng(3);
  const Matrix a = testing::random_spd(rng, 5);
  const Matrix weights = testing::random_matrix(rng, 5, 5);
  // f(A) = <W, chol(A)> for symmetric perturbations of A.
  auto f = [&](const Matrix &s) {
    Eigen::LLT<Matrix> llt(s);
    Matrix l = llt.matrixL();
    return weights.cwiseProduct(l).sum();
  };
  Eigen::LLT<Matrix> llt(a);
  const Matrix l = llt.matrixL();
  const Matrix abar = cholesky_adjoint(l, weights);
  const double h = 1e-6;
  for (Index i = 0; i < 5; ++i) {
    for (Index j = 0; j <= i; ++j) {
      Matrix e = Matrix::Zero(5, 5);
      e(i, j) = 1.0;
      e(j, i) = 1.0;
      const double fd = (f(a + h * e) - f(a - h * e)) / (2 * h);
      const double an = i == j ? abar(i, i) : 2.0 * abar(i, j);
      EXPECT_NEAR(fd, an, 1e-6) << i << "," << j;
    }
  }
}

TEST(Gradients, ValueMatchesElboMinibatch) {
  std::mt19937_64 rng(11);
  auto inst = random_instance(rng, 9, 3, 3, 2, 5);
  const std::vector<Index> batch = {0, 3, 4, 8};
  const auto g = gradients(inst.y, inst.phi, batch, inst.state);
  const auto e = elbo_minibatch(inst.y, inst.phi, batch, inst.state);
  EXPECT_NEAR(g.value.total, e.total, 1e-9 * std::abs(e.total));
  EXPECT_NEAR(g.value.kl, e.kl, 1e-9);
  EXPECT_NEAR(g.value.trace_penalty, e.trace_penalty, 1e-9);
}

void check_point_gradients(std::uint64_t seed, ZetaMode mode) {
  std::mt19937_64 rng(seed);
  auto inst = random_instance(rng, 7, 2, 3, 2, 4);
  inst.state.zeta_mode = mode;
  if (mode == ZetaMode::shared) {
    const Vector col = inst.state.zeta.col(0);
    inst.state.zeta = col.replicate(1, inst.state.num_genes());
  }
  const std::vector<Index> batch = {1, 2, 5};
  const auto res = gradients(inst.y, inst.phi, batch, inst.state);

  ModelState work = inst.state;
  const Vector theta = pack_parameters(inst.state);
  auto f = [&](const Vector &v) {
    unpack_parameters(v, work);
    return elbo_minibatch(inst.y, inst.phi, batch, work).total;
  };
  const Vector analytic = pack_gradient(res.grad, inst.state);
  const auto rep = compare_finite_differences(f, theta, analytic);
  EXPECT_TRUE(rep.ok) << rep.detail;

  // Latent rows.
  work = inst.state;
  Vector xv = Eigen::Map<const Vector>(inst.state.x.data(), inst.state.x.size());
  auto fx = [&](const Vector &v) {
    work.x = Eigen::Map<const Matrix>(v.data(), inst.state.x.rows(), inst.state.x.cols());
    return elbo_minibatch(inst.y, inst.phi, batch, work).total;
  };
  Matrix full_x = Matrix::Zero(inst.state.x.rows(), inst.state.x.cols());
  for (std::size_t b = 0; b < batch.size(); ++b) {
    full_x.row(batch[b]) += res.grad.x.row(static_cast<Index>(b));
  }
  const Vector ax = Eigen::Map<const Vector>(full_x.data(), full_x.size());
  const auto repx = compare_finite_differences(fx, xv, ax);
  EXPECT_TRUE(repx.ok) << repx.detail;
}

TEST(Gradients, FiniteDifferencesPerGene) {
  for (std::uint64_t s = 0; s < 4; ++s) {
    check_point_gradients(100 + s, ZetaMode::per_gene);
  }
}

TEST(Gradients, FiniteDifferencesSharedZeta) {
  for (std::uint64_t s = 0; s < 3; ++s) {
    check_point_gradients(200 + s, ZetaMode::shared);
  }
}

TEST(Gradients, BlockFormInducingInputs) {
  std::mt19937_64 rng(17);
  auto inst = testing::random_block_instance(rng, 8, 2, 2, 3, 3, 2);
  const std::vector<Index> batch = {0, 2, 3, 7};
  const auto res = gradients(inst.y, inst.phi, batch, inst.state);
  ModelState work = inst.state;
  auto f = [&](const Vector &v) {
    unpack_parameters(v, work);
    return elbo_minibatch(inst.y, inst.phi, batch, work).total;
  };
  const Vector mask = parameter_mask(inst.state);
  const auto rep = compare_finite_differences(f, pack_parameters(inst.state),
                                              pack_gradient(res.grad, inst.state), 1e-5,
                                              1e-4, 1e-6, &mask);
  EXPECT_TRUE(rep.ok) << rep.detail;
}

TEST(Gradients, KlGradientVanishesAtPrior) {
  std::mt19937_64 rng(19);
  auto inst = random_instance(rng, 6, 2, 2, 1, 4);
  ModelState s = inst.state;
  const GramBundle g = gram_bundle(Matrix(0, 2), Matrix(0, 1), s.z, s.spec);
  const Matrix l = jittered_cholesky(g.kmm).lower;
  s.var_means.setZero();
  for (auto &c : s.var_chol) {
    c = l;
  }
  // With Y = mean_f and m = 0 the residuals vanish, leaving only the KL
  // gradient on m_d, which is zero at the prior.
  const Matrix y = Matrix::Constant(6, 2, s.mean_f);
  s.zeta.setZero();
  const auto res = gradients(y, inst.phi, {0, 1, 2, 3, 4, 5}, s);
  EXPECT_LT(res.grad.var_means.cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Gradients, NoiseVarianceLeavesKlBlockUnchanged) {
  std::mt19937_64 rng(23);
  auto inst = random_instance(rng, 7, 2, 2, 2, 4);
  const std::vector<Index> batch = {1, 4, 6};
  ModelState doubled = inst.state;
  doubled.noise_variance *= 2.0;
  const auto a = gradients(inst.y, inst.phi, batch, inst.state);
  const auto b = gradients(inst.y, inst.phi, batch, doubled);
  EXPECT_EQ(a.value.kl, b.value.kl);
  EXPECT_NE(a.value.expected_loglik, b.value.expected_loglik);
  // Likelihood-side blocks move.
  EXPECT_GT((a.grad.var_means - b.grad.var_means).cwiseAbs().maxCoeff(), 1e-8);
  EXPECT_NE(a.grad.mean_f, b.grad.mean_f);
}

TEST(Gradients, ThreadCountDoesNotChangeResult) {
  std::mt19937_64 rng(29);
  auto inst = random_instance(rng, 20, 70, 2, 1, 5);
  std::vector<Index> batch(20);
  std::iota(batch.begin(), batch.end(), Index{0});
  const auto a = gradients(inst.y, inst.phi, batch, inst.state, {1});
  const auto b = gradients(inst.y, inst.phi, batch, inst.state, {3});
  EXPECT_EQ(a.value.total, b.value.total);
  EXPECT_EQ(pack_gradient(a.grad, inst.state), pack_gradient(b.grad, inst.state));
  EXPECT_EQ(a.grad.x, b.grad.x);
}

} // namespace
} // namespace gplvm
