#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <utility>
#include <vector>

namespace mvlfmm {

/// Gauss-Legendre nodes and weights on [-1, 1] (Newton iteration on P_n).
template <typename Scalar = double>
std::pair<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>, Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>
gauss_legendre(int n) {
  using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  if (n < 1) throw std::invalid_argument("gauss_legendre: n must be >= 1");
  Vec nodes(n), weights(n);
  for (int i = 0; i < (n + 1) / 2; ++i) {
    Scalar x = std::cos(std::numbers::pi_v<Scalar> * (i + Scalar(0.75)) / (n + Scalar(0.5)));
    Scalar dp = 0;
    for (int iter = 0; iter < 100; ++iter) {
      Scalar p0 = 1, p1 = x;
      for (int k = 2; k <= n; ++k) {
        const Scalar p2 = ((2 * k - 1) * x * p1 - (k - 1) * p0) / k;
        p0 = p1;
        p1 = p2;
      }
      dp = n * (x * p1 - p0) / (x * x - 1);
      const Scalar dx = p1 / dp;
      x -= dx;
      if (std::abs(dx) < Scalar(1e-15)) break;
    }
    // Recompute the derivative at the converged node.
    Scalar p0 = 1, p1 = x;
    for (int k = 2; k <= n; ++k) {
      const Scalar p2 = ((2 * k - 1) * x * p1 - (k - 1) * p0) / k;
      p0 = p1;
      p1 = p2;
    }
    dp = n == 1 ? Scalar(1) : n * (x * p1 - p0) / (x * x - 1);
    nodes(i) = -x;
    nodes(n - 1 - i) = x;
    weights(i) = weights(n - 1 - i) = 2 / ((1 - x * x) * dp * dp);
  }
  return {nodes, weights};
}

/// Trapezoid weights for an increasing grid.
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 1> trapezoid_weights(
    const Eigen::MatrixBase<Derived>& grid) {
  using Scalar = typename Derived::Scalar;
  const Eigen::Index n = grid.size();
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> w = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>::Zero(n);
  for (Eigen::Index i = 0; i + 1 < n; ++i) {
    const Scalar h = grid(i + 1) - grid(i);
    w(i) += h / 2;
    w(i + 1) += h / 2;
  }
  return w;
}

/// Evenly spaced grid of n points on [lo, hi].
inline Eigen::VectorXd linspace(double lo, double hi, int n) {
  if (n == 1) return Eigen::VectorXd::Constant(1, lo);
  Eigen::VectorXd g(n);
  for (int i = 0; i < n; ++i) g(i) = lo + (hi - lo) * i / (n - 1);
  g(n - 1) = hi;
  return g;
}

/// Lower-triangular L with L L^T = A for symmetric positive semidefinite A.
/// Pivots below `tol * max diag` are treated as exact zeros and their column
/// is zeroed, so boundary (rank-deficient) covariance matrices factor cleanly.
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, Eigen::Dynamic> semidefinite_cholesky(
    const Eigen::MatrixBase<Derived>& a, typename Derived::Scalar tol = 1e-14) {
  using Scalar = typename Derived::Scalar;
  const Eigen::Index n = a.rows();
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> l =
      Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>::Zero(n, n);
  const Scalar scale = n > 0 ? std::max<Scalar>(a.diagonal().cwiseAbs().maxCoeff(), 1) : 1;
  for (Eigen::Index j = 0; j < n; ++j) {
    Scalar d = a(j, j) - l.row(j).head(j).squaredNorm();
    if (d <= tol * scale) continue;
    l(j, j) = std::sqrt(d);
    for (Eigen::Index i = j + 1; i < n; ++i)
      l(i, j) = (a(i, j) - l.row(i).head(j).dot(l.row(j).head(j))) / l(j, j);
  }
  return l;
}

/// Linear-interpolated empirical quantile (R type 7).
inline double quantile(std::vector<double> values, double p) {
  if (values.empty()) throw std::invalid_argument("quantile of empty sample");
  std::sort(values.begin(), values.end());
  const double h = (static_cast<double>(values.size()) - 1) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (h - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

}  // namespace mvlfmm
