#pragma once

#include "mvlfmm/basis.hpp"
#include "mvlfmm/datamodel.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <string>
#include <vector>

namespace mvlfmm {

/// Either a variance-explained threshold or a fixed number of components.
struct Truncation {
  double pve = 0.995;
  int k = 0;  // > 0 overrides pve

  static Truncation by_pve(double threshold) { return {threshold, 0}; }
  static Truncation by_k(int count) { return {1.0, count}; }
};

/// Pooled multivariate FPCA fit.
///
/// Eigenfunction k of dimension p is basis(t) * eig_coefs.row(k).segment(p*B, B).
/// `spectrum` keeps every non-negative eigenvalue so that PVE can be
/// reported for any truncation.
struct MvFpcaModel {
  MvCurve mean;
  UnivariateBasis basis;
  Eigen::MatrixXd gram;        // P*B x P*B, block diagonal
  Eigen::VectorXd mean_coefs;  // OLS coefficients of the mean, P*B
  Eigen::MatrixXd eig_coefs;   // K x P*B
  Eigen::VectorXd eigenvalues; // K
  Eigen::VectorXd pve;         // cumulative, K
  Eigen::VectorXd spectrum;    // all eigenvalues, descending, clamped at 0
  std::size_t n_obs = 0;

  int K() const { return static_cast<int>(eig_coefs.rows()); }
  int dims() const { return static_cast<int>(mean.values.rows()); }
  int basis_size() const { return basis.size(); }
};

struct ScoreTable {
  Eigen::MatrixXd scores;  // N x K
  std::vector<ObservationKey> keys;
};

/// Smallest K whose cumulative share of the spectrum reaches the threshold;
/// never more than the number of positive eigenvalues.
int choose_K(const Eigen::VectorXd& eigenvalues, double pve_threshold);

/// Weighted PCA of stacked per-dimension spline coefficients. The pointwise
/// sample mean is subtracted internally and stored on the model.
std::pair<MvFpcaModel, ScoreTable> pooled_mvfpca(const MvLongDataset& data,
                                                 const UnivariateBasis& basis,
                                                 Truncation truncation);

/// Same fit from precomputed OLS coefficients (N x P*B, dimension-major) and
/// the matching pointwise mean; lets resampling loops project curves once.
MvFpcaModel pooled_mvfpca_from_coefficients(const Eigen::MatrixXd& coefs, const MvCurve& mean,
                                            const UnivariateBasis& basis, Truncation truncation);

/// Block-diagonal Gram of P copies of the basis.
Eigen::MatrixXd block_gram(const UnivariateBasis& basis, int dims);

/// Stacked OLS coefficients, N x P*B.
Eigen::MatrixXd stacked_coefficients(const MvLongDataset& data, const UnivariateBasis& basis);

ScoreTable project_scores(const MvLongDataset& data, const MvFpcaModel& model);

/// Scores of already-projected coefficient rows (mean not yet removed).
Eigen::MatrixXd scores_from_coefficients(const Eigen::MatrixXd& coefs, const MvFpcaModel& model);

/// Eigenfunction values: K x (P * |t|), dimension-major within a row.
Eigen::MatrixXd eval_eigenfunctions(const MvFpcaModel& model, const Eigen::VectorXd& t);

/// mean + sum_k score_k psi_k on the model grid.
std::vector<MvCurve> reconstruct_curves(const MvFpcaModel& model, const ScoreTable& scores);

/// Subject-grouped K-fold cross-validated proportion of variance explained,
/// with squared norms integrated over t by the trapezoid rule.
double grouped_cv_pve(const MvLongDataset& data, const UnivariateBasis& basis, int folds,
                      Truncation truncation, std::uint64_t seed, unsigned workers = 1);

struct WithinSubjectPve {
  double mean = 0.0;
  std::vector<std::string> subjects;
  std::vector<double> per_subject;
  std::vector<Exclusion> excluded;
  std::string centering = "leave_one_subject_out_mean";
};

/// Leave-one-subject-out PVE within each subject, averaged over subjects.
WithinSubjectPve loso_within_subject_pve(const MvLongDataset& data, const UnivariateBasis& basis,
                                         Truncation truncation, unsigned workers = 1);

/// One score sequence over longitudinal time for a subject-side.
struct Trajectory {
  std::string subject_id;
  Side side = Side::left;
  std::vector<double> T;
  std::vector<double> y;
};

struct MlFpcaLevel {
  Eigen::MatrixXd functions;  // grid x components, sum_g h * phi^2 = 1
  Eigen::VectorXd values;
};

struct MlFpcaBasis {
  Eigen::VectorXd grid;
  MlFpcaLevel subject_level;
  MlFpcaLevel side_level;
  double noise_var = 0.0;
  std::vector<std::string> skipped_subjects;  // single-side subjects
};

/// Two-level method-of-moments FPCA of binned trajectories. Both moment
/// surfaces are smoothed on a tensor-product cubic B-spline basis of
/// `smooth_basis` functions per axis before the eigendecomposition.
MlFpcaBasis estimate_mlfpca_basis(const std::vector<Trajectory>& trajectories, double pve,
                                  int grid_size = 41, int smooth_basis = 8);

}  // namespace mvlfmm
