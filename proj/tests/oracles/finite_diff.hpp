#pragma once

// Test-only numerical oracles. Nothing here calls into the analytic
// gradient code it is used to check.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>

#include "reidforge/matrix.hpp"

namespace reidforge::testing {

/// Central-difference gradient of f at x.
inline Matrix numeric_gradient(const std::function<double(const Matrix&)>& f, const Matrix& x, double step = 1e-5) {
  Matrix grad(x.rows(), x.cols());
  Matrix probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe.values()[i];
    probe.values()[i] = orig + step;
    const double up = f(probe);
    probe.values()[i] = orig - step;
    const double down = f(probe);
    probe.values()[i] = orig;
    grad.values()[i] = (up - down) / (2.0 * step);
  }
  return grad;
}

/// ||a - b|| / max(||a||, ||b||); 0 when both vanish.
inline double relative_error(const Matrix& a, const Matrix& b) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a.values()[i] - b.values()[i]) * (a.values()[i] - b.values()[i]);
    na += a.values()[i] * a.values()[i];
    nb += b.values()[i] * b.values()[i];
  }
  const double scale = std::sqrt(std::max(na, nb));
  return scale == 0.0 ? 0.0 : std::sqrt(diff) / scale;
}

inline Matrix random_matrix(std::mt19937_64& rng, std::size_t rows, std::size_t cols, double sd = 1.0) {
  std::normal_distribution<double> dist(0.0, sd);
  Matrix m(rows, cols);
  for (double& v : m.values()) v = dist(rng);
  return m;
}

inline Matrix unit_rows(Matrix m) {
  for (std::size_t r = 0; r < m.rows(); ++r) {
    double n = 0.0;
    for (double v : m.row(r)) n += v * v;
    n = std::sqrt(n);
    for (double& v : m.row(r)) v /= n;
  }
  return m;
}

}  // namespace reidforge::testing
