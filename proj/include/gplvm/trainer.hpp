#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "gplvm/elbo.hpp"
#include "gplvm/gradients.hpp"
#include "gplvm/optim.hpp"
#include "gplvm/params.hpp"

namespace gplvm {

struct BlockLearningRates {
  double latents = 1.0;
  double inducing = 1.0;
  double hyperparameters = 1.0;
  double variational = 1.0;

  double of(ParamBlock b) const {
    switch (b) {
    case ParamBlock::latents:
      return latents;
    case ParamBlock::inducing:
      return inducing;
    case ParamBlock::hyperparameters:
      return hyperparameters;
    case ParamBlock::variational:
      return variational;
    }
    return 1.0;
  }
};

struct TrainConfig {
  double lr_phase1 = 0.01;
  double lr_phase2 = 0.01;
  int phase1_epochs = 0;
  int total_epochs = 100;
  Index batch_size = 200;
  std::uint64_t seed = 0;
  AdamSettings adam;
  std::optional<double> grad_clip;
  int checkpoint_every = 0;
  BlockLearningRates block_lr;
  bool full_elbo_each_epoch = false;
  // Keep Adam moments for q(u) in whitened coordinates (m = L v, C = L W with
  // L = chol(K~mm)); plain coordinates are badly conditioned when K~mm is.
  bool whiten_variational = true;
  unsigned threads = 1;
  std::string label;

  void validate(Index n) const {
    require(batch_size > 0 && batch_size <= n, ErrorKind::configuration,
            "batch size must be in [1, N = " + std::to_string(n) + "], got " +
                std::to_string(batch_size));
    require(total_epochs >= 0, ErrorKind::configuration,
            "epoch count must be non-negative");
    require(phase1_epochs >= 0 && phase1_epochs <= total_epochs,
            ErrorKind::configuration,
            "phase-1 epochs must lie in [0, total epochs]");
    require(lr_phase1 > 0.0 && lr_phase2 > 0.0, ErrorKind::configuration,
            "learning rates must be positive");
    require(!grad_clip || *grad_clip > 0.0, ErrorKind::configuration,
            "gradient clip must be positive");
    require(checkpoint_every >= 0, ErrorKind::configuration,
            "checkpoint interval must be non-negative");
  }
};

struct StepRecord {
  Index step = 0;
  int epoch = 0;
  double minibatch_elbo = 0.0;
  double lr = 0.0;
  double timestamp = 0.0; // seconds since the start of fit
};

struct TrainTrace {
  std::string header;
  std::vector<StepRecord> steps;
  std::vector<double> epoch_elbo;
  std::vector<double> parameter_norms; // one per epoch, globals and latents
  double wall_time = 0.0;
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Seeded permutation of 0..N-1 for the given epoch, cut into batches; the
/// final batch may be short.
inline std::vector<std::vector<Index>>
minibatch_sampler(Index n, Index batch_size, std::uint64_t seed, int epoch) {
  require(batch_size > 0 && batch_size <= n, ErrorKind::configuration,
          "batch size must be in [1, N]");
  std::vector<Index> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), Index{0});
  if (batch_size < n) {
    std::mt19937_64 rng(splitmix64(seed ^ splitmix64(static_cast<std::uint64_t>(epoch))));
    std::shuffle(perm.begin(), perm.end(), rng);
  }
  std::vector<std::vector<Index>> batches;
  for (Index start = 0; start < n; start += batch_size) {
    const Index end = std::min(n, start + batch_size);
    batches.emplace_back(perm.begin() + start, perm.begin() + end);
  }
  return batches;
}

inline std::string describe(const TrainConfig &cfg, const ModelState &state) {
  nlohmann::ordered_json j;
  if (!cfg.label.empty()) {
    j["experiment"] = cfg.label;
  }
  j["lr_phase1"] = cfg.lr_phase1;
  j["lr_phase2"] = cfg.lr_phase2;
  j["phase1_epochs"] = cfg.phase1_epochs;
  j["epochs"] = cfg.total_epochs;
  j["batch_size"] = cfg.batch_size;
  j["seed"] = cfg.seed;
  j["q"] = state.q();
  j["p"] = state.p();
  j["m"] = state.num_inducing();
  j["n"] = state.num_cells();
  j["d"] = state.num_genes();
  j["encoder"] = state.encoder.has_value();
  j["whiten_variational"] = cfg.whiten_variational;
  j["grad_clip"] = cfg.grad_clip ? nlohmann::ordered_json(*cfg.grad_clip)
                                 : nlohmann::ordered_json(nullptr);
  return j.dump();
}

/// Newline-delimited trace: a header record, then one record per step.
inline void write_trace(std::ostream &os, const TrainTrace &trace) {
  os << "{\"config\":" << trace.header << "}\n";
  for (const auto &s : trace.steps) {
    nlohmann::ordered_json j;
    j["step"] = s.step;
    j["epoch"] = s.epoch;
    j["minibatch_elbo"] = s.minibatch_elbo;
    j["lr"] = s.lr;
    j["timestamp"] = s.timestamp;
    os << j.dump() << '\n';
  }
}

using CheckpointCallback = std::function<void(int epoch, const ModelState &)>;

namespace detail {

inline void check_gradient_finite(const Vector &g, const ParameterLayout &layout,
                                  const Matrix &x_grad) {
  for (Index i = 0; i < g.size(); ++i) {
    if (!std::isfinite(g[i])) {
      throw Error(ErrorKind::non_finite, "non-finite gradient in parameter block '" +
                                             layout.segment_at(i).name + "'");
    }
  }
  require(x_grad.allFinite(), ErrorKind::non_finite,
          "non-finite gradient in parameter block 'latents'");
}

inline Matrix whitening_factor(const ModelState &s) {
  const GramBundle g = gram_bundle(Matrix(0, s.q()), Matrix(0, s.p()), s.z, s.spec);
  return jittered_cholesky(g.kmm, "K~mm").lower;
}

/// Where m and the packed lower(C_d) sit in the flat parameter vector.
struct VariationalSlice {
  Index means = 0;
  Index chol = 0;
  Index m = 0;
  Index d = 0;

  static VariationalSlice of(const ParameterLayout &layout, const ModelState &s) {
    VariationalSlice v{0, 0, s.num_inducing(), s.num_genes()};
    for (const auto &seg : layout.segments) {
      if (seg.name == "variational means") {
        v.means = seg.offset;
      } else if (seg.name == "variational Cholesky factors") {
        v.chol = seg.offset;
      }
    }
    return v;
  }

  // Applies f to m and each C_d in place; f must map lower-triangular to
  // lower-triangular (only the lower part is written back).
  template <class F> void apply(Vector &v, F &&f) const {
    Eigen::Map<Matrix> mean(v.data() + means, m, d);
    mean = f(Matrix(mean));
    Matrix c(m, m);
    Index pos = chol;
    for (Index k = 0; k < d; ++k) {
      c.setZero();
      Index p = pos;
      for (Index j = 0; j < m; ++j) {
        for (Index i = j; i < m; ++i) {
          c(i, j) = v[p++];
        }
      }
      const Matrix out = f(c);
      for (Index j = 0; j < m; ++j) {
        for (Index i = j; i < m; ++i) {
          v[pos++] = out(i, j);
        }
      }
    }
  }
};

inline Matrix encoder_means(const ModelState &state, const Matrix &y,
                            const Matrix &phi) {
  return encoder_forward(*state.encoder, encoder_input(y, phi, state)).mean;
}

} // namespace detail

/// Minibatch stochastic variational inference. Epochs before
/// `phase1_epochs` keep the latents (or encoder) fixed and use `lr_phase1`;
/// later epochs update everything with `lr_phase2`.
inline std::pair<ModelState, TrainTrace>
fit(const Matrix &y, const Matrix &phi, const ModelState &init,
    const TrainConfig &cfg, const CheckpointCallback &on_checkpoint = {}) {
  detail::check_shapes(y, phi, init);
  cfg.validate(init.num_cells());
  ModelState state = init;
  TrainTrace trace;
  trace.header = describe(cfg, state);
  if (cfg.total_epochs == 0) {
    return {std::move(state), std::move(trace)};
  }

  const auto start = std::chrono::steady_clock::now();
  auto seconds = [&start] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
        .count();
  };

  const ParameterLayout layout = ParameterLayout::of(state);
  const std::vector<ParamBlock> blocks = layout.element_blocks();
  const Vector mask = parameter_mask(state);
  Vector theta = pack_parameters(state);
  Adam adam(layout.total, cfg.adam);
  RowAdam latent_adam(state.num_cells(), state.q(), cfg.adam);
  const bool amortised = state.encoder.has_value();
  const GradientOptions gopts{cfg.threads};
  const bool whiten = cfg.whiten_variational && cfg.block_lr.variational != 0.0;
  const auto vslice = detail::VariationalSlice::of(layout, state);

  Index step = 0;
  for (int epoch = 0; epoch < cfg.total_epochs; ++epoch) {
    const bool phase1 = epoch < cfg.phase1_epochs;
    const double lr = phase1 ? cfg.lr_phase1 : cfg.lr_phase2;
    Vector lr_vec(layout.total);
    for (Index i = 0; i < layout.total; ++i) {
      const ParamBlock b = blocks[static_cast<std::size_t>(i)];
      const double mult = (phase1 && b == ParamBlock::latents) ? 0.0 : cfg.block_lr.of(b);
      lr_vec[i] = lr * mult * mask[i];
    }
    const double latent_lr = phase1 ? 0.0 : lr * cfg.block_lr.latents;

    for (const auto &batch :
         minibatch_sampler(state.num_cells(), cfg.batch_size, cfg.seed, epoch)) {
      GradientResult res;
      if (amortised) {
        std::mt19937_64 rng(splitmix64(cfg.seed ^ 0x5eedf00dULL) ^
                            splitmix64(static_cast<std::uint64_t>(step)));
        const Matrix noise =
            sample_noise(static_cast<Index>(batch.size()), state.q(), rng);
        res = encoder_gradients(y, phi, batch, state, noise, gopts);
      } else {
        res = gradients(y, phi, batch, state, gopts);
      }
      Vector g = pack_gradient(res.grad, state);
      Matrix gx = amortised ? Matrix(0, state.q()) : res.grad.x;
      detail::check_gradient_finite(g, layout, gx);
      if (cfg.grad_clip) {
        const double norm = std::sqrt(g.squaredNorm() + gx.squaredNorm());
        if (norm > *cfg.grad_clip) {
          const double f = *cfg.grad_clip / norm;
          g *= f;
          gx *= f;
        }
      }
      if (whiten) {
        // dF/dv = L^T dF/dm, dF/dW = lower(L^T dF/dC); step in (v, W), map back.
        const Matrix l = detail::whitening_factor(state);
        const auto tri = l.triangularView<Eigen::Lower>();
        vslice.apply(theta, [&](const Matrix &a) { return Matrix(tri.solve(a)); });
        vslice.apply(g, [&](const Matrix &a) { return Matrix(tri.transpose() * a); });
        adam.step(theta, g, lr_vec);
        vslice.apply(theta, [&](const Matrix &a) { return Matrix(tri * a); });
      } else {
        adam.step(theta, g, lr_vec);
      }
      unpack_parameters(theta, state);
      if (!amortised) {
        latent_adam.step(state.x, batch, gx, latent_lr);
      }
      trace.steps.push_back({step, epoch, res.value.total, lr, seconds()});
      ++step;
    }

    if (amortised) {
      state.x = detail::encoder_means(state, y, phi);
    }
    if (cfg.full_elbo_each_epoch) {
      trace.epoch_elbo.push_back(elbo_full(y, phi, state).total);
    }
    trace.parameter_norms.push_back(
        std::sqrt(theta.squaredNorm() + state.x.squaredNorm()));
    if (on_checkpoint && cfg.checkpoint_every > 0 &&
        (epoch + 1) % cfg.checkpoint_every == 0) {
      on_checkpoint(epoch + 1, state);
    }
  }
  trace.wall_time = seconds();
  return {std::move(state), std::move(trace)};
}

} // namespace gplvm
