#pragma once

#include "mvlfmm/datamodel.hpp"

#include <Eigen/Dense>

#include <string>
#include <vector>

namespace mvlfmm {

enum class BasisKind { constant, bspline, natural_cubic, ortho_poly, tabulated };

std::string to_string(BasisKind kind);
BasisKind parse_basis_kind(const std::string& text);

/// A finite set of real functions on [lo, hi].
///
/// Spline kinds carry the full (clamped) knot vector; natural cubic splines
/// are a linear map `transform` of the underlying cubic B-spline columns.
/// Orthogonal polynomials store their three-term recurrence. Tabulated bases
/// are piecewise linear through `table` (nodes x columns). When
/// `with_constant` is set a constant column is prepended; a non-empty `mix`
/// finally maps those columns to the reported ones (used by orthonormalize).
struct UnivariateBasis {
  BasisKind kind = BasisKind::constant;
  double lo = 0.0;
  double hi = 1.0;
  int order = 4;
  Eigen::VectorXd knots;
  Eigen::MatrixXd transform;
  int degree = 0;
  Eigen::VectorXd alpha;
  Eigen::VectorXd norm2;
  Eigen::VectorXd nodes;
  Eigen::MatrixXd table;
  bool with_constant = false;
  Eigen::MatrixXd mix;

  int size() const;
  /// Number of columns before the optional constant is prepended.
  int raw_size() const;
};

UnivariateBasis constant_basis(double lo = 0.0, double hi = 1.0);

/// B-spline basis of the given order with equally spaced interior knots;
/// n_basis = #interior knots + order.
UnivariateBasis bspline_basis(int n_basis, int order, double lo, double hi);

/// Natural cubic spline basis without intercept: n_basis - 1 equally spaced
/// interior knots, zero second derivative at both boundary knots.
UnivariateBasis natural_cubic_basis(int n_basis, double lo = 0.0, double hi = 1.0);

/// Polynomials of degree 0..degree orthogonalised over an equally spaced grid
/// of grid_size points on [lo, hi]; the first column is the constant 1.
UnivariateBasis ortho_poly_basis(int degree, int grid_size, double lo = 0.0, double hi = 1.0);

/// Piecewise-linear functions through table values at the given nodes.
UnivariateBasis tabulated_basis(const Eigen::VectorXd& nodes, const Eigen::MatrixXd& table);

/// The same basis with a constant column prepended.
UnivariateBasis with_intercept(UnivariateBasis basis);

/// Basis values (or derivatives of order `deriv` <= 2): |points| x size().
/// Points within 1e-12 of the domain are clamped; farther ones throw.
Eigen::MatrixXd eval_basis(const UnivariateBasis& basis, const Eigen::VectorXd& points,
                           int deriv = 0);

/// Exact Gram matrix of L2 inner products over the domain.
Eigen::MatrixXd gram_matrix(const UnivariateBasis& basis);

/// The basis re-expressed so that its Gram matrix is the identity.
UnivariateBasis orthonormalize(const UnivariateBasis& basis);

/// Least-squares projection of gridded values onto a basis; the design
/// factorisation is computed once and reused for every curve.
class LeastSquaresProjector {
 public:
  LeastSquaresProjector(const UnivariateBasis& basis, const Eigen::VectorXd& grid);

  /// values: N x G; returns N x B coefficients.
  Eigen::MatrixXd coefficients(const Eigen::MatrixXd& values) const;
  const Eigen::MatrixXd& design() const { return design_; }

 private:
  Eigen::MatrixXd design_;
  Eigen::MatrixXd hat_;
};

/// Per-dimension OLS coefficients (N_Total x B each).
std::vector<Eigen::MatrixXd> fit_coefficients(const MvLongDataset& data,
                                              const UnivariateBasis& basis);

}  // namespace mvlfmm
