#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "cli.hpp"

namespace gplvm {
namespace {

namespace fs = std::filesystem;

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "gplvm-cli");
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::map<std::string, std::string> read_manifest(const fs::path &p) {
  std::map<std::string, std::string> kv;
  for (const auto &line : io::read_lines(p.string())) {
    const auto c = line.find(": ");
    if (c != std::string::npos) {
      kv[line.substr(0, c)] = line.substr(c + 2);
    } else if (!line.empty() && line.back() == ':') {
      kv[line.substr(0, line.size() - 1)] = "";
    }
  }
  return kv;
}

// Small count matrix with a cyclic and a batch signal, plus covariates.
class Workspace : public ::testing::Test {
protected:
  fs::path dir;

  void SetUp() override {
    dir = fs::temp_directory_path() /
          ("gplvm_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir);
    fs::create_directories(dir);
    std::mt19937_64 rng(11);
    std::normal_distribution<double> g;
    std::uniform_real_distribution<double> u(0.0, 6.283);
    const int n = 60, d = 25;
    std::vector<double> load(d), shift(d);
    for (int j = 0; j < d; ++j) {
      load[j] = g(rng);
      shift[j] = g(rng);
    }
    std::ofstream counts(dir / "counts.csv"), cov(dir / "cov.csv");
    counts << "cell";
    for (int j = 0; j < d; ++j) {
      counts << ",g" << j;
    }
    counts << '\n';
    cov << "cell_id,batch,severity\n";
    const char *sev[] = {"mild", "moderate", "severe"};
    for (int i = 0; i < n; ++i) {
      const double t = u(rng);
      const int b = i % 3;
      counts << 'c' << i;
      for (int j = 0; j < d; ++j) {
        std::poisson_distribution<int> pois(std::exp(1.0 + 0.8 * std::sin(t) * load[j] + 0.4 * b * shift[j]));
        counts << ',' << pois(rng);
      }
      counts << '\n';
      cov << 'c' << i << ",b" << b << ',' << sev[(i / 3) % 3] << '\n';
    }
  }

  void TearDown() override { fs::remove_all(dir); }

  std::string p(const std::string &name) const { return (dir / name).string(); }

  std::vector<std::string> fit_args(const std::string &out) const {
    return {"fit",        "--in",     p("counts.csv"), "--covariates", p("cov.csv"),
            "--design",   "batch",    "--severity-col", "severity",    "--severity-order",
            "mild,moderate,severe",   "--q",           "4",            "--m",
            "12",         "--batch",  "20",            "--epochs",     "3",
            "--out",      p(out)};
  }
};

TEST(Sha256, KnownVector) {
  EXPECT_EQ(cli::sha256_hex("abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(Cli, UsageErrorsExitOne) {
  EXPECT_EQ(run({}).code, 1);
  EXPECT_EQ(run({"fit", "--bogus"}).code, 1);
  EXPECT_EQ(run({"fit"}).code, 1); // --in and --out are required
  EXPECT_EQ(run({"--help"}).code, 0);
}

TEST(Cli, SelfCheckPassesAndInjectedFaultExitsTwo) {
  const auto good = run({"check", "--instances", "2"});
  EXPECT_EQ(good.code, 0) << good.out;
  EXPECT_NE(good.out.find("all checks passed"), std::string::npos);
  const auto bad = run({"check", "--instances", "2", "--inject-fault"});
  EXPECT_EQ(bad.code, 2);
  EXPECT_NE(bad.out.find("FAIL"), std::string::npos);
}

TEST_F(Workspace, PreprocessWritesOutputsAndManifest) {
  const auto r = run({"preprocess", "--in", p("counts.csv"), "--hvg", "10", "--out", p("pre")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto m = io::read_dense_csv(p("pre/expression.csv"));
  EXPECT_EQ(m.cols(), 10);
  EXPECT_EQ(m.rows(), 60);
  const auto kv = read_manifest(dir / "pre/manifest.txt");
  EXPECT_EQ(kv.at("status"), "ok");
  EXPECT_EQ(kv.at("command"), "preprocess");
  EXPECT_EQ(kv.at("config.hvg"), "10");
  EXPECT_EQ(kv.at("input.expression.sha256"), cli::sha256_file(p("counts.csv")));
  EXPECT_EQ(kv.at("output.expression.sha256"), cli::sha256_file(p("pre/expression.csv")));
}

TEST_F(Workspace, PreprocessRejectsZeroHvg) {
  const auto r = run({"preprocess", "--in", p("counts.csv"), "--hvg", "0", "--out", p("pre")});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("--hvg"), std::string::npos);
}

TEST_F(Workspace, FailedRunFinalisesManifest) {
  const auto r = run({"fit", "--in", p("missing.csv"), "--out", p("fit")});
  EXPECT_EQ(r.code, 1);
  const auto kv = read_manifest(dir / "fit/manifest.txt");
  EXPECT_EQ(kv.at("status"), "failed");
  EXPECT_NE(kv.at("error").find("missing.csv"), std::string::npos);
}

TEST_F(Workspace, FitIsByteIdenticalAcrossRunsAndThreadCounts) {
  auto a = fit_args("a");
  auto b = fit_args("b");
  b.insert(b.end(), {"--threads", "3"});
  ASSERT_EQ(run(a).code, 0);
  const auto rb = run(b);
  ASSERT_EQ(rb.code, 0) << rb.err;
  EXPECT_EQ(cli::read_file(p("a/checkpoint.gplvm")), cli::read_file(p("b/checkpoint.gplvm")));
  const auto kv = read_manifest(dir / "a/manifest.txt");
  EXPECT_EQ(kv.at("status"), "ok");
  EXPECT_EQ(kv.at("seed"), "0");
  EXPECT_EQ(kv.at("output.checkpoint.sha256"), cli::sha256_file(p("a/checkpoint.gplvm")));
  EXPECT_TRUE(fs::exists(dir / "a/trace.jsonl"));
  const Checkpoint c = read_checkpoint(p("a/checkpoint.gplvm"));
  EXPECT_EQ(c.state.p(), 3);
  EXPECT_EQ(c.roles.back(), DimensionRole::extra);
  EXPECT_EQ(c.config.at("q"), 4);
  EXPECT_FALSE(c.config.contains("threads"));
}

TEST_F(Workspace, ConfigFileSectionYieldsToFlags) {
  {
    std::ofstream cfg(dir / "run.toml");
    cfg << "[fit]\nq = 3\nm = 9\nbatch = 15\nepochs = 1\n";
  }
  const auto r = run({"fit", "--config", p("run.toml"), "--in", p("counts.csv"), "--epochs",
                      "2", "--out", p("fit")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto kv = read_manifest(dir / "fit/manifest.txt");
  EXPECT_EQ(kv.at("config.q"), "3");
  EXPECT_EQ(kv.at("config.batch"), "15");
  EXPECT_EQ(kv.at("config.epochs"), "2");
  EXPECT_EQ(kv.at("input.config.sha256"), cli::sha256_file(p("run.toml")));
}

TEST_F(Workspace, TransformExportsStoredLatentsAndRejectsUnseenCells) {
  ASSERT_EQ(run(fit_args("fit")).code, 0);
  ASSERT_EQ(run({"transform", "--checkpoint", p("fit/checkpoint.gplvm"), "--out", p("tr")}).code,
            0);
  const auto lines = io::read_lines(p("tr/latents.csv"));
  ASSERT_GE(lines.size(), 4u);
  EXPECT_EQ(lines[0], "# checkpoint_sha256: " + cli::sha256_file(p("fit/checkpoint.gplvm")));
  EXPECT_EQ(lines[1], "# dimension_roles: periodic rbf rbf severity");
  EXPECT_EQ(lines[3], "cell_id,x0_periodic,x1_rbf,x2_rbf,x3_severity");
  const Checkpoint c = read_checkpoint(p("fit/checkpoint.gplvm"));
  std::string row = "c0";
  for (Index q = 0; q < 4; ++q) {
    row += "," + io::format_double(c.state.x(0, q));
  }
  EXPECT_EQ(lines[4], row);

  {
    std::ofstream f(dir / "new.csv");
    f << "cell,g0,g1\nunseen,1,2\n";
  }
  const auto r = run({"transform", "--checkpoint", p("fit/checkpoint.gplvm"), "--in",
                      p("new.csv"), "--out", p("tr2")});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("unseen"), std::string::npos);
}

TEST_F(Workspace, EncoderTransformIsInvariantToGeneOrder) {
  auto args = fit_args("fit");
  args.insert(args.end(), {"--encoder", "--encoder-hidden", "8,4", "--encoder-covariates"});
  ASSERT_EQ(run(args).code, 0);
  // Same cells under new ids, genes reversed.
  const auto m = io::read_dense_csv(p("counts.csv"));
  {
    std::ofstream f(dir / "rev.csv");
    f << "cell";
    for (Index j = m.cols() - 1; j >= 0; --j) {
      f << ',' << m.gene_ids()[static_cast<std::size_t>(j)];
    }
    f << '\n';
    const Matrix y = m.dense();
    for (Index i = 0; i < y.rows(); ++i) {
      f << m.cell_ids()[static_cast<std::size_t>(i)];
      for (Index j = y.cols() - 1; j >= 0; --j) {
        f << ',' << io::format_double(y(i, j));
      }
      f << '\n';
    }
  }
  const std::string ckpt = p("fit/checkpoint.gplvm");
  ASSERT_EQ(run({"transform", "--checkpoint", ckpt, "--in", p("counts.csv"), "--covariates",
                 p("cov.csv"), "--out", p("t1")})
                .code,
            0);
  ASSERT_EQ(run({"transform", "--checkpoint", ckpt, "--in", p("rev.csv"), "--covariates",
                 p("cov.csv"), "--out", p("t2")})
                .code,
            0);
  EXPECT_EQ(io::read_lines(p("t1/latents.csv")), io::read_lines(p("t2/latents.csv")));
  // Encoder reads covariates, so they are required.
  EXPECT_EQ(run({"transform", "--checkpoint", ckpt, "--in", p("counts.csv"), "--out", p("t3")})
                .code,
            1);
}

TEST_F(Workspace, SweepDefaultsToSeverityDimension) {
  ASSERT_EQ(run(fit_args("fit")).code, 0);
  const auto r = run({"sweep", "--checkpoint", p("fit/checkpoint.gplvm"), "--grid-points", "5",
                      "--top", "3", "--out", p("sw")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("x3_severity"), std::string::npos);
  const auto lines = io::read_lines(p("sw/sweep.csv"));
  EXPECT_EQ(std::count_if(lines.begin(), lines.end(),
                          [](const std::string &l) { return !l.empty() && l[0] != '#'; }),
            4); // header + top 3
  EXPECT_EQ(run({"sweep", "--checkpoint", p("fit/checkpoint.gplvm"), "--dim", "9", "--out",
                 p("sw2")})
                .code,
            1);
}

TEST_F(Workspace, EvalWritesPurityAndCorrelation) {
  ASSERT_EQ(run(fit_args("fit")).code, 0);
  {
    std::ofstream f(dir / "sig.txt");
    f << "g1\ng2\ng3\n";
  }
  const auto r = run({"eval", "--checkpoint", p("fit/checkpoint.gplvm"), "--covariates",
                      p("cov.csv"), "--label-col", "batch", "--k", "5", "--in", p("counts.csv"),
                      "--signature", p("sig.txt"), "--bins", "4", "--background", "3",
                      "--mask-col", "severity", "--mask-values", "mild,severe", "--out",
                      p("ev")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(io::read_lines(p("ev/purity.csv")).size(), 62u); // hash, header, 60 cells
  const auto corr = io::read_lines(p("ev/correlation.csv"));
  EXPECT_EQ(corr[1], "dimension,pearson_r,zero_variance");
  EXPECT_EQ(corr.size(), 6u);
  EXPECT_EQ(run({"eval", "--checkpoint", p("fit/checkpoint.gplvm"), "--out", p("ev2")}).code, 1);
}

} // namespace
} // namespace gplvm
