#include <gtest/gtest.h>

#include <Eigen/QR>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>

#include "gplvm/eval.hpp"
#include "support.hpp"

namespace gplvm {
namespace {

using testing::random_matrix;
using testing::uniform;

// Full sort by (distance, index) as the neighbour reference.
Vector brute_force_purity(const Matrix &x, const std::vector<int> &labels, Index k) {
  const Index n = x.rows();
  Vector out(n);
  for (Index i = 0; i < n; ++i) {
    std::vector<std::pair<double, Index>> all;
    for (Index j = 0; j < n; ++j) {
      if (j != i) {
        all.emplace_back((x.row(i) - x.row(j)).squaredNorm(), j);
      }
    }
    std::sort(all.begin(), all.end());
    int same = 0;
    for (Index r = 0; r < k; ++r) {
      same += labels[static_cast<std::size_t>(all[static_cast<std::size_t>(r)].second)] ==
              labels[static_cast<std::size_t>(i)];
    }
    out[i] = same / static_cast<double>(k);
  }
  return out;
}

TEST(KnnPurity, IdenticalLabelsGiveOne) {
  std::mt19937_64 rng(1);
  const Vector p = knn_purity(random_matrix(rng, 12, 3), std::vector<int>(12, 4), 5);
  EXPECT_TRUE((p.array() == 1.0).all());
}

TEST(KnnPurity, SeparatedClusters) {
  std::mt19937_64 rng(2);
  Matrix x = random_matrix(rng, 20, 2, 0.1);
  std::vector<std::string> labels(20, "a");
  for (Index i = 10; i < 20; ++i) {
    x(i, 0) += 50.0;
    labels[static_cast<std::size_t>(i)] = "b";
  }
  EXPECT_TRUE((knn_purity(x, labels, 9).array() == 1.0).all());
}

TEST(KnnPurity, MatchesExhaustiveNeighbours) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(3 + seed);
    const Matrix x = random_matrix(rng, 8, 2);
    std::vector<int> labels;
    for (int i = 0; i < 8; ++i) {
      labels.push_back(static_cast<int>(rng() % 3));
    }
    for (Index k : {1, 3, 7}) {
      EXPECT_EQ(knn_purity(x, labels, k), brute_force_purity(x, labels, k));
    }
  }
}

TEST(KnnPurity, TiesBrokenByIndex) {
  // Cell 0 at the origin, cells 1 and 2 equidistant.
  Matrix x(3, 1);
  x << 0.0, 1.0, -1.0;
  const std::vector<int> labels = {0, 0, 1};
  EXPECT_EQ(knn_purity(x, labels, 1)[0], 1.0);
}

TEST(KnnPurity, RejectsKAtLeastN) {
  EXPECT_THROW(knn_purity(Matrix::Zero(4, 2), std::vector<int>(4, 0), 4), Error);
}

TEST(KnnPurity, InvariantUnderIsometry) {
  std::mt19937_64 rng(4);
  const Matrix x = random_matrix(rng, 30, 3);
  std::vector<int> labels;
  for (int i = 0; i < 30; ++i) {
    labels.push_back(static_cast<int>(rng() % 4));
  }
  const Matrix rot = Eigen::HouseholderQR<Matrix>(random_matrix(rng, 3, 3)).householderQ();
  const Matrix moved = (x * rot).rowwise() + random_matrix(rng, 1, 3).row(0);
  EXPECT_EQ(knn_purity(x, labels, 6), knn_purity(moved, labels, 6));
}

ExpressionMatrix expression(const Matrix &v) {
  std::vector<std::string> cells, genes;
  for (Index i = 0; i < v.rows(); ++i) {
    cells.push_back("c" + std::to_string(i));
  }
  for (Index j = 0; j < v.cols(); ++j) {
    genes.push_back("g" + std::to_string(j));
  }
  return ExpressionMatrix(v, cells, genes, true);
}

TEST(Signature, AllZeroGivesZero) {
  const auto s = signature_score(expression(Matrix::Zero(5, 10)), {"g1", "g2"});
  EXPECT_TRUE((s.score.array() == 0.0).all());
}

TEST(Signature, BackgroundEqualToSignatureGivesZero) {
  std::mt19937_64 rng(5);
  SignatureOptions opt;
  opt.background = std::vector<std::string>{"g3", "g1"};
  const auto s = signature_score(expression(random_matrix(rng, 6, 5)), {"g1", "g3"}, opt);
  EXPECT_LT(s.score.cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Signature, PlantedSignatureMatchesDirectArithmetic) {
  std::mt19937_64 rng(6);
  const Index n = 40, d = 100;
  Matrix v = random_matrix(rng, n, d).cwiseAbs();
  const std::vector<Index> sig = {5, 17, 42};
  for (Index i = 0; i < n / 2; ++i) {
    for (Index j : sig) {
      v(i, j) += 5.0;
    }
  }
  const auto m = expression(v);
  SignatureOptions opt;
  opt.n_background = 4;
  opt.n_bins = 10;
  opt.seed = 9;
  const auto s = signature_score(m, {"g5", "g17", "g42"}, opt);
  ASSERT_FALSE(s.background_genes.empty());
  Vector expected = (v.col(5) + v.col(17) + v.col(42)) / 3.0;
  Vector bg = Vector::Zero(n);
  for (const auto &g : s.background_genes) {
    EXPECT_TRUE(g != "g5" && g != "g17" && g != "g42");
    bg += v.col(m.gene_index(g));
  }
  expected -= bg / static_cast<double>(s.background_genes.size());
  EXPECT_LT((s.score - expected).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_GT(s.score.head(n / 2).minCoeff(), 0.0);
  // Seeded background.
  EXPECT_EQ(signature_score(m, {"g5", "g17", "g42"}, opt).background_genes,
            s.background_genes);
}

TEST(Signature, MissingGenesAreListed) {
  try {
    signature_score(expression(Matrix::Zero(3, 3)), {"g1", "PF4", "PPBP"});
    FAIL();
  } catch (const Error &e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("PF4"), std::string::npos);
    EXPECT_NE(msg.find("PPBP"), std::string::npos);
  }
}

TEST(Correlation, IdentityAndNegation) {
  std::mt19937_64 rng(7);
  const Vector s = random_matrix(rng, 12, 1);
  Matrix lat(12, 2);
  lat << s, -s;
  const auto c = lv_signature_correlation(lat, s);
  EXPECT_NEAR(c.r[0], 1.0, 1e-14);
  EXPECT_NEAR(c.r[1], -1.0, 1e-14);
}

TEST(Correlation, TextbookFormula) {
  std::mt19937_64 rng(8);
  const Vector a = random_matrix(rng, 10, 1), b = random_matrix(rng, 10, 1);
  double sa = 0, sb = 0, sab = 0, saa = 0, sbb = 0;
  for (Index i = 0; i < 10; ++i) {
    sa += a[i];
    sb += b[i];
    sab += a[i] * b[i];
    saa += a[i] * a[i];
    sbb += b[i] * b[i];
  }
  const double r = (10 * sab - sa * sb) / std::sqrt((10 * saa - sa * sa) * (10 * sbb - sb * sb));
  EXPECT_NEAR(pearson(a, b), r, 1e-12);
}

TEST(Correlation, AffineInvariance) {
  std::mt19937_64 rng(9);
  const Vector a = random_matrix(rng, 15, 1), b = random_matrix(rng, 15, 1);
  const double r = pearson(a, b);
  EXPECT_NEAR(pearson((3.0 * a).array() + 2.0, b), r, 1e-12);
  EXPECT_NEAR(pearson(a, (-0.5 * b).array() + 7.0), -r, 1e-12);
}

TEST(Correlation, ZeroVarianceFlaggedAndMaskRespected) {
  std::mt19937_64 rng(10);
  Matrix lat = random_matrix(rng, 6, 2);
  lat.col(1).setConstant(3.0);
  const Vector s = random_matrix(rng, 6, 1);
  const auto c = lv_signature_correlation(lat, s);
  EXPECT_EQ(c.r[1], 0.0);
  EXPECT_TRUE(c.zero_variance[1]);
  EXPECT_FALSE(c.zero_variance[0]);
  const std::vector<bool> mask = {true, false, true, true, false, true};
  const auto masked = lv_signature_correlation(lat, s, mask);
  Vector a(4), b(4);
  a << lat(0, 0), lat(2, 0), lat(3, 0), lat(5, 0);
  b << s[0], s[2], s[3], s[5];
  EXPECT_NEAR(masked.r[0], pearson(a, b), 1e-15);
  EXPECT_THROW(lv_signature_correlation(lat, s, {true, true, false, false, false, false}),
               Error);
}

TEST(RankDimensions, ShortestLengthscaleFirst) {
  KernelSpec spec = KernelSpec::with_dims(3, 0);
  spec.lengthscales << 9.0, 2.0, 0.5;
  EXPECT_EQ(rank_dimensions(spec), (std::vector<Index>{2, 1}));
  spec.lengthscales << 1.0, 0.5, 2.0;
  EXPECT_EQ(rank_dimensions(spec), (std::vector<Index>{1, 2}));
}

TEST(RankDimensions, EqualLengthscalesKeepIndexOrder) {
  KernelSpec spec = KernelSpec::with_dims(5, 0);
  EXPECT_EQ(rank_dimensions(spec), (std::vector<Index>{1, 2, 3, 4}));
}

TEST(RankDimensions, MatchesSortOracle) {
  std::mt19937_64 rng(11);
  for (int t = 0; t < 20; ++t) {
    KernelSpec spec = KernelSpec::with_dims(8, 0);
    for (Index q = 0; q < 8; ++q) {
      spec.lengthscales[q] = uniform(rng, 0.1, 5.0);
    }
    std::vector<std::pair<double, Index>> ref;
    for (Index q = 1; q < 8; ++q) {
      ref.emplace_back(-1.0 / spec.lengthscales[q], q);
    }
    std::sort(ref.begin(), ref.end());
    std::vector<Index> expected;
    for (const auto &r : ref) {
      expected.push_back(r.second);
    }
    EXPECT_EQ(rank_dimensions(spec), expected);
  }
}

// Q = 2 (periodic + one SE-ARD), P = 1. Inducing points spread along dim 1;
// gene 0 follows a steep curve in dim 1, the others are nearly flat.
ModelState sweep_state(std::mt19937_64 &rng, Index genes) {
  ModelState s;
  const Index m = 9;
  Matrix z(m, 3);
  for (Index i = 0; i < m; ++i) {
    z(i, 0) = 0.0;
    z(i, 1) = -2.0 + 0.5 * static_cast<double>(i);
    z(i, 2) = 0.1 * static_cast<double>(i % 3);
  }
  s.z = InducingInputs(z, 2, 1);
  s.spec = KernelSpec::with_dims(2, 1);
  s.spec.lengthscales << 1.0, 0.8;
  s.spec.linear_scale = 0.2;
  s.x = random_matrix(rng, 10, 2);
  s.var_means = 0.05 * random_matrix(rng, m, genes);
  for (Index i = 0; i < m; ++i) {
    s.var_means(i, 0) = 2.0 * std::sin(z(i, 1));
  }
  for (Index d = 0; d < genes; ++d) {
    s.var_chol.push_back(0.1 * Matrix::Identity(m, m));
  }
  s.mean_f = 0.4;
  s.zeta = random_matrix(rng, 1, genes);
  s.noise_variance = 0.2;
  return s;
}

std::vector<double> linspace(double lo, double hi, int n) {
  std::vector<double> g;
  for (int i = 0; i < n; ++i) {
    g.push_back(lo + (hi - lo) * i / (n - 1));
  }
  return g;
}

TEST(Sweep, PlantedDependentGeneRanksFirst) {
  std::mt19937_64 rng(12);
  const ModelState s = sweep_state(rng, 8);
  Matrix phi = Matrix::Ones(10, 1);
  const auto r = severity_sweep(s, 1, linspace(-2, 2, 21), default_baseline(s, phi), 5);
  ASSERT_EQ(r.top.size(), 5u);
  EXPECT_EQ(r.top[0].gene, 0);
  EXPECT_GT(r.top[0].range, 10.0 * r.top[1].range);
}

TEST(Sweep, SinglePointGridHasZeroRanges) {
  std::mt19937_64 rng(13);
  const ModelState s = sweep_state(rng, 4);
  const auto r = severity_sweep(s, 1, {0.3}, default_baseline(s, Matrix::Ones(10, 1)), 4);
  for (std::size_t k = 0; k < r.top.size(); ++k) {
    EXPECT_EQ(r.top[k].range, 0.0);
    EXPECT_EQ(r.top[k].gene, static_cast<Index>(k));
  }
}

TEST(Sweep, UntrainedModelIsFlatAtMean) {
  std::mt19937_64 rng(14);
  ModelState s = sweep_state(rng, 3);
  s.var_means.setZero();
  s.zeta.setZero();
  const auto r = severity_sweep(s, 1, linspace(-1, 1, 5), default_baseline(s, Matrix::Ones(10, 1)));
  for (const auto &c : r.top) {
    EXPECT_LT((c.mean.array() - s.mean_f).abs().maxCoeff(), 1e-15);
  }
}

TEST(Sweep, RankingIgnoresPerGeneOffsets) {
  std::mt19937_64 rng(15);
  ModelState s = sweep_state(rng, 6);
  const auto base = default_baseline(s, Matrix::Ones(10, 1));
  const auto grid = linspace(-2, 2, 11);
  const auto a = severity_sweep(s, 1, grid, base, 6);
  s.zeta = 10.0 * random_matrix(rng, 1, 6);
  const auto b = severity_sweep(s, 1, grid, base, 6);
  for (std::size_t k = 0; k < 6; ++k) {
    EXPECT_EQ(a.top[k].gene, b.top[k].gene);
    EXPECT_NEAR(a.top[k].range, b.top[k].range, 1e-12);
  }
}

TEST(Sweep, RejectsEmptyGridAndBadDimension) {
  std::mt19937_64 rng(16);
  const ModelState s = sweep_state(rng, 2);
  const auto base = default_baseline(s, Matrix::Ones(10, 1));
  EXPECT_THROW(severity_sweep(s, 1, {}, base), Error);
  EXPECT_THROW(severity_sweep(s, 2, {0.0}, base), Error);
}

TEST(Baseline, MedianAndModalDesignRow) {
  ModelState s;
  s.x = (Matrix(4, 1) << 3.0, 1.0, 4.0, 2.0).finished();
  s.spec = KernelSpec::with_dims(1, 2);
  s.zeta = Matrix::Zero(2, 1);
  Matrix phi(4, 2);
  phi << 1, 0, 0, 1, 0, 1, 1, 0;
  const auto b = default_baseline(s, phi);
  EXPECT_EQ(b.x[0], 2.5);
  EXPECT_EQ(b.phi, (Vector(2) << 1, 0).finished());
}

TEST(Procrustes, RotatedCopyCorrelatesPerfectly) {
  std::mt19937_64 rng(17);
  const Matrix t = random_matrix(rng, 50, 2);
  const Matrix rot = Eigen::HouseholderQR<Matrix>(random_matrix(rng, 2, 2)).householderQ();
  EXPECT_NEAR(procrustes_correlation(t, (t * rot).array() + 3.0), 1.0, 1e-12);
  EXPECT_LT(procrustes_correlation(t, random_matrix(rng, 50, 2)), 0.5);
}

TEST(EvalOutput, FilesCarryCheckpointHash) {
  const auto path =
      (std::filesystem::temp_directory_path() / "gplvm_eval_purity.csv").string();
  io::write_purity_csv(path, "abc123", {"c0", "c1"}, (Vector(2) << 0.5, 1.0).finished());
  std::ifstream in(path);
  std::string first, second;
  std::getline(in, first);
  std::getline(in, second);
  EXPECT_EQ(first, "# checkpoint_sha256: abc123");
  EXPECT_EQ(second, "cell_id,purity");
  std::filesystem::remove(path);
}

} // namespace
} // namespace gplvm
