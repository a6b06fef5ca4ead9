#include "mvlfmm/longitudinal.hpp"

#include <algorithm>
#include <stdexcept>

namespace mvlfmm {

namespace {

Eigen::MatrixXd select_columns(const Eigen::MatrixXd& m, const std::vector<int>& cols) {
  Eigen::MatrixXd out(m.rows(), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t j = 0; j < cols.size(); ++j) out.col(static_cast<Eigen::Index>(j)) = m.col(cols[j]);
  return out;
}

std::vector<int> all_columns(int n) {
  std::vector<int> cols(static_cast<std::size_t>(n));
  for (int j = 0; j < n; ++j) cols[static_cast<std::size_t>(j)] = j;
  return cols;
}

}  // namespace

Eigen::MatrixXd LongitudinalBasis::fixed_design(const Eigen::VectorXd& T, int deriv) const {
  return eval_basis(basis, T, deriv);
}

Eigen::MatrixXd LongitudinalBasis::subject_design(int k, const Eigen::VectorXd& T, int deriv) const {
  if (const auto it = per_k.find(k); it != per_k.end()) return eval_basis(it->second.subject, T, deriv);
  return select_columns(eval_basis(basis, T, deriv), subject_columns);
}

Eigen::MatrixXd LongitudinalBasis::side_design(int k, const Eigen::VectorXd& T, int deriv) const {
  if (const auto it = per_k.find(k); it != per_k.end()) return eval_basis(it->second.side, T, deriv);
  return select_columns(eval_basis(basis, T, deriv), side_columns);
}

int LongitudinalBasis::subject_size(int k) const {
  if (const auto it = per_k.find(k); it != per_k.end()) return it->second.subject.size();
  return static_cast<int>(subject_columns.size());
}

int LongitudinalBasis::side_size(int k) const {
  if (const auto it = per_k.find(k); it != per_k.end()) return it->second.side.size();
  return static_cast<int>(side_columns.size());
}

void validate(const LongitudinalBasis& lb) {
  if (lb.basis.lo != 0.0 || lb.basis.hi != 1.0)
    throw std::invalid_argument("longitudinal basis must live on [0, 1]");
  for (const auto* cols : {&lb.subject_columns, &lb.side_columns})
    for (int c : *cols)
      if (c < 0 || c >= lb.D()) throw std::invalid_argument("longitudinal column index out of range");
  if (lb.side_columns.size() == 1 && lb.per_k.empty()) {
    // An intercept-only side level must select a constant column.
    const Eigen::MatrixXd x = eval_basis(lb.basis, Eigen::VectorXd::LinSpaced(11, 0.0, 1.0));
    const Eigen::VectorXd col = x.col(lb.side_columns.front());
    if ((col.array() - col(0)).abs().maxCoeff() > 1e-12)
      throw std::invalid_argument("intercept-only side level needs the constant column");
  }
}

UnivariateBasis constant_plus_natural_cubic(int n_spline) {
  return with_intercept(natural_cubic_basis(n_spline, 0.0, 1.0));
}

LongitudinalBasis polynomial_long_basis(int degree, int grid_size) {
  LongitudinalBasis lb;
  lb.name = "polynomial";
  lb.basis = ortho_poly_basis(degree, grid_size, 0.0, 1.0);
  lb.subject_columns = all_columns(lb.D());
  lb.side_columns = all_columns(lb.D());
  return lb;
}

LongitudinalBasis naive_long_basis(int n_spline) {
  LongitudinalBasis lb;
  lb.name = "naive";
  lb.basis = constant_plus_natural_cubic(n_spline);
  lb.subject_columns = {0};
  lb.side_columns = {0};
  return lb;
}

LongitudinalBasis spline_long_basis(int n_spline) {
  LongitudinalBasis lb;
  lb.name = "spline";
  lb.basis = constant_plus_natural_cubic(n_spline);
  lb.subject_columns = all_columns(lb.D());
  lb.side_columns = {0};
  return lb;
}

LongitudinalBasis mlfpca_long_basis(int n_spline) {
  LongitudinalBasis lb;
  lb.name = "mlfpca";
  lb.basis = constant_plus_natural_cubic(n_spline);
  return lb;
}

}  // namespace mvlfmm
