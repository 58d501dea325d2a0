#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "gplvm/gradients.hpp"
#include "gplvm/model.hpp"

namespace gplvm {

/// Optimiser blocks; each gets its own learning-rate multiplier.
enum class ParamBlock { inducing, hyperparameters, variational, latents };

inline const char *block_name(ParamBlock b) {
  switch (b) {
  case ParamBlock::inducing:
    return "inducing inputs";
  case ParamBlock::hyperparameters:
    return "hyperparameters";
  case ParamBlock::variational:
    return "variational parameters";
  case ParamBlock::latents:
    return "latents";
  }
  return "?";
}

/// Flat view over every global (non per-cell) parameter. Positive quantities
/// live in log space. Order: Z, log sf2, log l, log nu, mu_f, zeta, log s2,
/// m, lower(C_d) per gene, encoder blocks.
struct ParameterLayout {
  struct Segment {
    std::string name;
    ParamBlock block;
    Index offset;
    Index size;
  };
  std::vector<Segment> segments;
  Index total = 0;

  static ParameterLayout of(const ModelState &state) {
    ParameterLayout l;
    auto add = [&l](std::string name, ParamBlock block, Index size) {
      l.segments.push_back({std::move(name), block, l.total, size});
      l.total += size;
    };
    const Index m = state.num_inducing();
    add("Z", ParamBlock::inducing, state.z.values.size());
    add("log signal variance", ParamBlock::hyperparameters, 1);
    add("log lengthscales", ParamBlock::hyperparameters, state.q());
    add("log linear scale", ParamBlock::hyperparameters, 1);
    add("mean", ParamBlock::hyperparameters, 1);
    add("zeta", ParamBlock::hyperparameters, state.zeta.size());
    add("log noise variance", ParamBlock::hyperparameters, 1);
    add("variational means", ParamBlock::variational, state.var_means.size());
    add("variational Cholesky factors", ParamBlock::variational,
        state.num_genes() * m * (m + 1) / 2);
    if (state.encoder) {
      add("encoder", ParamBlock::latents, state.encoder->parameter_count());
    }
    return l;
  }

  std::vector<ParamBlock> element_blocks() const {
    std::vector<ParamBlock> out(static_cast<std::size_t>(total));
    for (const auto &s : segments) {
      std::fill_n(out.begin() + s.offset, s.size, s.block);
    }
    return out;
  }

  const Segment &segment_at(Index i) const {
    for (const auto &s : segments) {
      if (i >= s.offset && i < s.offset + s.size) {
        return s;
      }
    }
    throw Error(ErrorKind::out_of_range, "parameter index out of range");
  }
};

namespace detail {

struct Packer {
  Vector *out;
  Index pos = 0;
  void put(double v) { (*out)[pos++] = v; }
  void put(const Matrix &m) {
    for (Index j = 0; j < m.cols(); ++j) {
      for (Index i = 0; i < m.rows(); ++i) {
        put(m(i, j));
      }
    }
  }
  void put_lower(const Matrix &m) {
    for (Index j = 0; j < m.cols(); ++j) {
      for (Index i = j; i < m.rows(); ++i) {
        put(m(i, j));
      }
    }
  }
};

struct Unpacker {
  const Vector *in;
  Index pos = 0;
  double get() { return (*in)[pos++]; }
  void get(Matrix &m) {
    for (Index j = 0; j < m.cols(); ++j) {
      for (Index i = 0; i < m.rows(); ++i) {
        m(i, j) = get();
      }
    }
  }
  void get(Vector &v) {
    for (Index i = 0; i < v.size(); ++i) {
      v[i] = get();
    }
  }
  void get_lower(Matrix &m) {
    for (Index j = 0; j < m.cols(); ++j) {
      for (Index i = 0; i < m.rows(); ++i) {
        m(i, j) = i >= j ? get() : 0.0;
      }
    }
  }
};

} // namespace detail

inline Vector pack_parameters(const ModelState &state) {
  const ParameterLayout layout = ParameterLayout::of(state);
  Vector out(layout.total);
  detail::Packer p{&out};
  p.put(state.z.values);
  p.put(std::log(state.spec.signal_variance));
  for (Index q = 0; q < state.q(); ++q) {
    p.put(std::log(state.spec.lengthscales[q]));
  }
  p.put(std::log(state.spec.linear_scale));
  p.put(state.mean_f);
  p.put(state.zeta);
  p.put(std::log(state.noise_variance));
  p.put(state.var_means);
  for (const auto &c : state.var_chol) {
    p.put_lower(c);
  }
  if (state.encoder) {
    state.encoder->for_each_block([&p](const auto &blk) { p.put(Matrix(blk)); });
  }
  return out;
}

inline void unpack_parameters(const Vector &v, ModelState &state) {
  require(v.size() == ParameterLayout::of(state).total,
          ErrorKind::dimension_mismatch, "parameter vector has wrong length");
  detail::Unpacker u{&v};
  u.get(state.z.values);
  state.spec.signal_variance = std::exp(u.get());
  for (Index q = 0; q < state.q(); ++q) {
    state.spec.lengthscales[q] = std::exp(u.get());
  }
  state.spec.linear_scale = std::exp(u.get());
  state.mean_f = u.get();
  u.get(state.zeta);
  state.noise_variance = std::exp(u.get());
  u.get(state.var_means);
  for (auto &c : state.var_chol) {
    u.get_lower(c);
  }
  if (state.encoder) {
    state.encoder->for_each_block([&u](auto &blk) { u.get(blk); });
  }
}

inline Vector pack_gradient(const ParamGradients &g, const ModelState &state) {
  const ParameterLayout layout = ParameterLayout::of(state);
  Vector out(layout.total);
  detail::Packer p{&out};
  p.put(g.z);
  p.put(g.kernel.log_signal_variance);
  for (Index q = 0; q < state.q(); ++q) {
    p.put(g.kernel.log_lengthscales[q]);
  }
  p.put(g.kernel.log_linear_scale);
  p.put(g.mean_f);
  p.put(g.zeta);
  p.put(g.log_noise_variance);
  p.put(g.var_means);
  for (const auto &c : g.var_chol) {
    p.put_lower(c);
  }
  if (state.encoder) {
    require(g.encoder.has_value(), ErrorKind::configuration,
            "missing encoder gradient");
    g.encoder->for_each_block([&p](const auto &blk) { p.put(Matrix(blk)); });
  }
  return out;
}

/// 1 for free entries, 0 for structurally fixed ones (block-form Z entries:
/// the latent columns of sentinel rows and the linear columns of the others).
inline Vector parameter_mask(const ModelState &state) {
  const ParameterLayout layout = ParameterLayout::of(state);
  Vector mask = Vector::Ones(layout.total);
  if (state.z.block_form()) {
    const Index m = state.num_inducing();
    for (Index j = 0; j < state.q() + state.p(); ++j) {
      for (Index i = 0; i < m; ++i) {
        const bool latent_col = j < state.q();
        if (state.z.is_sentinel(i) == latent_col) {
          mask[j * m + i] = 0.0;
        }
      }
    }
  }
  return mask;
}

} // namespace gplvm
