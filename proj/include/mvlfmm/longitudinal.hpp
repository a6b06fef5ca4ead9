#pragma once

#include "mvlfmm/basis.hpp"

#include <Eigen/Dense>

#include <map>
#include <string>
#include <vector>

namespace mvlfmm {

/// Random-effect bases of one score that replace the shared column selection.
struct ScoreLevelBases {
  UnivariateBasis subject;
  UnivariateBasis side;
};

/// The xi_d(T) system on [0, 1].
///
/// `basis` supplies the D fixed intercept columns. The random designs use
/// the listed columns of `basis` unless `per_k` holds score-specific bases
/// (estimated ml-FPCA eigenfunctions), which are then used in full. A level
/// with no columns has no random effect.
struct LongitudinalBasis {
  std::string name = "custom";
  UnivariateBasis basis;
  std::vector<int> subject_columns;
  std::vector<int> side_columns;
  std::map<int, ScoreLevelBases> per_k;

  int D() const { return basis.size(); }
  Eigen::MatrixXd fixed_design(const Eigen::VectorXd& T, int deriv = 0) const;
  Eigen::MatrixXd subject_design(int k, const Eigen::VectorXd& T, int deriv = 0) const;
  Eigen::MatrixXd side_design(int k, const Eigen::VectorXd& T, int deriv = 0) const;
  int subject_size(int k) const;
  int side_size(int k) const;
};

/// Checks column indices and the constant-column rule for intercept-only sides.
void validate(const LongitudinalBasis& lb);

/// Constant plus natural cubic splines without intercept (n_spline columns).
UnivariateBasis constant_plus_natural_cubic(int n_spline);

/// Generator-matched orthogonal polynomials at both levels, all columns.
LongitudinalBasis polynomial_long_basis(int degree = 2, int grid_size = 101);
/// Random intercepts only; fixed effects on the constant + natural-cubic basis.
LongitudinalBasis naive_long_basis(int n_spline = 3);
/// Constant + natural cubics at the subject level, intercept at the side level.
LongitudinalBasis spline_long_basis(int n_spline = 3);
/// Constant + natural cubic fixed basis; random bases filled in per score.
LongitudinalBasis mlfpca_long_basis(int n_spline = 3);

}  // namespace mvlfmm
