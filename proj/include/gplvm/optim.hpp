#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "gplvm/linalg.hpp"

namespace gplvm {

struct AdamSettings {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Adam for gradient *ascent* with a per-element learning rate.
class Adam {
public:
  Adam() = default;
  Adam(Index size, AdamSettings settings)
      : settings_(settings), m_(Vector::Zero(size)), v_(Vector::Zero(size)) {}

  void step(Vector &theta, const Vector &grad, const Vector &lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(settings_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(settings_.beta2, static_cast<double>(t_));
    for (Index i = 0; i < theta.size(); ++i) {
      if (lr[i] == 0.0) {
        continue;
      }
      m_[i] = settings_.beta1 * m_[i] + (1.0 - settings_.beta1) * grad[i];
      v_[i] = settings_.beta2 * v_[i] + (1.0 - settings_.beta2) * grad[i] * grad[i];
      theta[i] += lr[i] * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + settings_.epsilon);
    }
  }

  std::int64_t steps() const { return t_; }

private:
  AdamSettings settings_;
  Vector m_;
  Vector v_;
  std::int64_t t_ = 0;
};

/// Lazy Adam over the rows of a matrix: only rows present in a step have their
/// moments updated. Bias correction uses the shared step count.
class RowAdam {
public:
  RowAdam() = default;
  RowAdam(Index rows, Index cols, AdamSettings settings)
      : settings_(settings), m_(Matrix::Zero(rows, cols)),
        v_(Matrix::Zero(rows, cols)) {}

  void step(Matrix &theta, const std::vector<Index> &rows, const Matrix &grad,
            double lr) {
    ++t_;
    if (lr == 0.0) {
      return;
    }
    const double c1 = 1.0 - std::pow(settings_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(settings_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < rows.size(); ++k) {
      const Index r = rows[k];
      for (Index j = 0; j < theta.cols(); ++j) {
        const double g = grad(static_cast<Index>(k), j);
        m_(r, j) = settings_.beta1 * m_(r, j) + (1.0 - settings_.beta1) * g;
        v_(r, j) = settings_.beta2 * v_(r, j) + (1.0 - settings_.beta2) * g * g;
        theta(r, j) +=
            lr * (m_(r, j) / c1) / (std::sqrt(v_(r, j) / c2) + settings_.epsilon);
      }
    }
  }

private:
  AdamSettings settings_;
  Matrix m_;
  Matrix v_;
  std::int64_t t_ = 0;
};

} // namespace gplvm
