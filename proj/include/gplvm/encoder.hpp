#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "gplvm/error.hpp"
#include "gplvm/linalg.hpp"

namespace gplvm {

inline constexpr double kEncoderVarianceFloor = 1e-6;

inline double softplus(double v) {
  return v > 30.0 ? v : std::log1p(std::exp(v));
}

inline double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

/// Amortised q(x_n) = N(G(y_n), diag(H(y_n))): a tanh trunk shared by a linear
/// mean head and a softplus variance head.
struct EncoderParams {
  std::vector<Matrix> trunk_weights; // layer l: width_l x width_{l-1}
  std::vector<Vector> trunk_biases;
  Matrix mean_weights;
  Vector mean_bias;
  Matrix var_weights;
  Vector var_bias;

  Index input_dim() const {
    return trunk_weights.empty() ? mean_weights.cols() : trunk_weights.front().cols();
  }
  Index output_dim() const { return mean_weights.rows(); }

  std::vector<Index> hidden_widths() const {
    std::vector<Index> w;
    for (const auto &layer : trunk_weights) {
      w.push_back(layer.rows());
    }
    return w;
  }

  Index parameter_count() const {
    Index count = mean_weights.size() + mean_bias.size() + var_weights.size() +
                  var_bias.size();
    for (std::size_t l = 0; l < trunk_weights.size(); ++l) {
      count += trunk_weights[l].size() + trunk_biases[l].size();
    }
    return count;
  }

  static EncoderParams zeros(Index input_dim, const std::vector<Index> &hidden,
                             Index output_dim) {
    EncoderParams p;
    Index prev = input_dim;
    for (Index w : hidden) {
      p.trunk_weights.push_back(Matrix::Zero(w, prev));
      p.trunk_biases.push_back(Vector::Zero(w));
      prev = w;
    }
    p.mean_weights = Matrix::Zero(output_dim, prev);
    p.mean_bias = Vector::Zero(output_dim);
    p.var_weights = Matrix::Zero(output_dim, prev);
    p.var_bias = Vector::Zero(output_dim);
    return p;
  }

  /// Glorot-uniform weights, zero biases; the variance head bias starts so
  /// that initial variances are small relative to unit-scale latents.
  static EncoderParams initialise(Index input_dim,
                                  const std::vector<Index> &hidden,
                                  Index output_dim, std::uint64_t seed) {
    EncoderParams p = zeros(input_dim, hidden, output_dim);
    std::mt19937_64 rng(seed);
    auto fill = [&rng](Matrix &w) {
      const double bound = std::sqrt(6.0 / static_cast<double>(w.rows() + w.cols()));
      std::uniform_real_distribution<double> dist(-bound, bound);
      for (Index j = 0; j < w.cols(); ++j) {
        for (Index i = 0; i < w.rows(); ++i) {
          w(i, j) = dist(rng);
        }
      }
    };
    for (auto &w : p.trunk_weights) {
      fill(w);
    }
    fill(p.mean_weights);
    fill(p.var_weights);
    p.var_bias.setConstant(-3.0);
    return p;
  }

  /// Same shapes, all zeros; used as the gradient container.
  EncoderParams zeros_like() const {
    std::vector<Index> hidden = hidden_widths();
    return zeros(input_dim(), hidden, output_dim());
  }

  template <typename F> void for_each_block(F &&f) {
    for (auto &w : trunk_weights) {
      f(w);
    }
    for (auto &b : trunk_biases) {
      f(b);
    }
    f(mean_weights);
    f(mean_bias);
    f(var_weights);
    f(var_bias);
  }
  template <typename F> void for_each_block(F &&f) const {
    for (const auto &w : trunk_weights) {
      f(w);
    }
    for (const auto &b : trunk_biases) {
      f(b);
    }
    f(mean_weights);
    f(mean_bias);
    f(var_weights);
    f(var_bias);
  }
};

/// Row-batched forward pass, keeping activations for the backward pass.
struct EncoderForward {
  std::vector<Matrix> activations; // activations[0] = input, then each trunk layer
  Matrix var_preact;               // B x Q
  Matrix mean;                     // B x Q
  Matrix var;                      // B x Q
};

inline EncoderForward encoder_forward(const EncoderParams &params,
                                      const Matrix &input) {
  require(input.cols() == params.input_dim(), ErrorKind::dimension_mismatch,
          "encoder expects rows of length " + std::to_string(params.input_dim()) +
              ", got " + std::to_string(input.cols()));
  EncoderForward fwd;
  fwd.activations.push_back(input);
  for (std::size_t l = 0; l < params.trunk_weights.size(); ++l) {
    Matrix pre = fwd.activations.back() * params.trunk_weights[l].transpose();
    pre.rowwise() += params.trunk_biases[l].transpose();
    fwd.activations.push_back(pre.array().tanh().matrix());
  }
  const Matrix &h = fwd.activations.back();
  fwd.mean = h * params.mean_weights.transpose();
  fwd.mean.rowwise() += params.mean_bias.transpose();
  fwd.var_preact = h * params.var_weights.transpose();
  fwd.var_preact.rowwise() += params.var_bias.transpose();
  fwd.var = fwd.var_preact.unaryExpr([](double v) {
    return softplus(v) + kEncoderVarianceFloor;
  });
  return fwd;
}

struct EncodedRow {
  Vector mean;
  Vector var;
};

inline EncodedRow encode(const Vector &y, const EncoderParams &params) {
  const Matrix row = y.transpose();
  EncoderForward fwd = encoder_forward(params, row);
  return {fwd.mean.row(0).transpose(), fwd.var.row(0).transpose()};
}

/// Backward pass given adjoints of the mean and variance outputs (B x Q each).
inline EncoderParams encoder_backward(const EncoderParams &params,
                                      const EncoderForward &fwd,
                                      const Matrix &mean_bar,
                                      const Matrix &var_bar) {
  EncoderParams grad = params.zeros_like();
  const Matrix &h = fwd.activations.back();
  const Matrix pre_bar =
      var_bar.cwiseProduct(fwd.var_preact.unaryExpr([](double v) { return sigmoid(v); }));
  grad.mean_weights = mean_bar.transpose() * h;
  grad.mean_bias = mean_bar.colwise().sum().transpose();
  grad.var_weights = pre_bar.transpose() * h;
  grad.var_bias = pre_bar.colwise().sum().transpose();
  Matrix h_bar = mean_bar * params.mean_weights + pre_bar * params.var_weights;
  for (std::size_t l = params.trunk_weights.size(); l-- > 0;) {
    const Matrix &out = fwd.activations[l + 1];
    const Matrix z_bar =
        h_bar.cwiseProduct((1.0 - out.array().square()).matrix());
    grad.trunk_weights[l] = z_bar.transpose() * fwd.activations[l];
    grad.trunk_biases[l] = z_bar.colwise().sum().transpose();
    h_bar = z_bar * params.trunk_weights[l];
  }
  return grad;
}

/// KL(N(mean, diag var) || N(0, I)) for one row.
inline double gaussian_kl_to_standard(const Eigen::Ref<const Vector> &mean,
                                      const Eigen::Ref<const Vector> &var) {
  return 0.5 * (var.array() + mean.array().square() - 1.0 - var.array().log()).sum();
}

struct AmortizedSample {
  EncoderForward forward;
  Matrix noise;    // B x Q standard normal draws
  Matrix latents;  // B x Q reparameterised samples
  double kl_x = 0; // sum over rows, unscaled
};

/// Draws x = mean + sqrt(var) * eps for each row of the encoder input batch.
template <typename Rng>
AmortizedSample amortized_elbo_terms(const Matrix &input,
                                     const EncoderParams &params, Rng &rng) {
  AmortizedSample s;
  s.forward = encoder_forward(params, input);
  const Index b = input.rows();
  const Index q = params.output_dim();
  s.noise.resize(b, q);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (Index i = 0; i < b; ++i) {
    for (Index j = 0; j < q; ++j) {
      s.noise(i, j) = normal(rng);
    }
  }
  s.latents = s.forward.mean +
              s.forward.var.cwiseSqrt().cwiseProduct(s.noise);
  for (Index i = 0; i < b; ++i) {
    s.kl_x += gaussian_kl_to_standard(s.forward.mean.row(i).transpose(),
                                      s.forward.var.row(i).transpose());
  }
  return s;
}

} // namespace gplvm
