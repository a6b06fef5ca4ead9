#pragma once

#include "mvlfmm/basis.hpp"
#include "mvlfmm/datamodel.hpp"
#include "mvlfmm/model.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace mvlfmm {

struct CovariateLaw {
  enum class Kind { bernoulli, gaussian };
  Kind kind = Kind::gaussian;
  double p = 0.5;
  double mean = 0.0;
  double sd = 1.0;

  static CovariateLaw bernoulli(double p) { return {Kind::bernoulli, p, 0.0, 1.0}; }
  static CovariateLaw gaussian(double mean, double sd) { return {Kind::gaussian, 0.5, mean, sd}; }
};

/// Parameters of the generating model.
///
/// Score k of an observation is
///   y*_k = sum_d (beta0(k,d) + u_kd + v_kd) xi_d(T) + sum_a x_a betaA(k,a) + e_k
/// with u ~ N(0, diag Q_diag.row(k)), v ~ N(0, diag R_diag.row(k)) and
/// e ~ N(0, s(k)); xi is the orthogonal polynomial basis of degree D - 1 on
/// `xi_grid_size` points. The curve is mean + sum_k y*_k psi_k plus smooth
/// noise with covariance sigma^2 phi(l |t - t'|) in every dimension.
struct GeneratorParams {
  MvCurve mean;                      // P x G on the data grid
  UnivariateBasis basis;             // spline basis of the psi_k
  Eigen::MatrixXd basis_coefs;       // K x P*B, orthonormal under the block Gram
  Eigen::MatrixXd beta0;             // K x D
  Eigen::MatrixXd betaA;             // K x A
  Eigen::MatrixXd Q_diag;            // K x D
  Eigen::MatrixXd R_diag;            // K x D
  Eigen::VectorXd s;                 // K
  std::vector<CovariateLaw> covariate_law;
  std::vector<std::string> covariate_names;
  std::vector<std::string> dim_names;
  double noise_l = 0.25;
  double noise_sigma = 0.9;
  int xi_grid_size = 101;
  double strength = 1.0;  // product of applied scale_strength factors

  int K() const { return static_cast<int>(basis_coefs.rows()); }
  int D() const { return static_cast<int>(beta0.cols()); }
  int A() const { return static_cast<int>(betaA.cols()); }
  int P() const { return static_cast<int>(mean.values.rows()); }
};

/// Throws std::invalid_argument on shape mismatches, negative variances or
/// a non-orthonormal basis (tolerance 1e-6).
void validate(const GeneratorParams& params);

/// The shipped default parameters (10 scores, 3 dimensions, D = 3, two
/// covariates on a 101-point grid over [0, 100]).
GeneratorParams reference_params();

/// Variances of the d >= 2 entries of Q_diag and R_diag times factor^2.
GeneratorParams scale_strength(const GeneratorParams& params, double factor);

/// Same parameters with every fixed effect (beta0 and betaA) set to zero.
GeneratorParams without_fixed_effects(const GeneratorParams& params);

struct ScenarioConfig {
  std::string name = "baseline";
  int n_subjects = 280;
  int n_per_side = 80;
  double missing_prop = 0.1;
  double strength = 1.0;
  std::vector<std::string> models{"polynomial", "naive", "spline", "mlfpca"};
  double pve = 0.995;
  int replicates = 1;
  std::uint64_t seed = 1;
  int test_per_side = 10;
  int lmm_restarts = 3;
  bool record_timings = false;
};

/// Seed of replicate r of a scenario.
std::uint64_t replicate_seed(const ScenarioConfig& scenario, int r);

struct GeneratedTruth {
  Surface intercept;                    // mean + sum_k beta0_k . xi(T) psi_k(t)
  std::vector<Eigen::MatrixXd> covariate_curves;  // per covariate, P x G
};

struct GeneratedData {
  MvLongDataset full;
  MvLongDataset train;
  MvLongDataset test;
  GeneratedTruth truth;
};

/// Draws one dataset. The scenario's strength is applied on top of `params`.
/// Every subject has n_per_side strides per side at T = (l - 1)/(n - 1);
/// round(missing_prop * n) strides per subject-side are removed at random
/// and the first test_per_side of them form the test set.
GeneratedData generate_dataset(const GeneratorParams& params, const ScenarioConfig& scenario,
                               std::uint64_t seed);

/// Lower Cholesky factor of the smooth-noise kernel on `grid` (+1e-10 ridge).
Eigen::MatrixXd noise_factor(const Eigen::VectorXd& grid, double l, double sigma);

/// Fit configuration of a named simulation model variant.
FitConfig model_variant(const std::string& model, const GeneratorParams& params,
                        const ScenarioConfig& scenario);

struct ModelMetrics {
  std::string model;
  bool failed = false;
  std::string error;
  double ise_beta0 = 0.0;
  std::vector<double> ise_beta;  // per covariate
  double mean_ispe = 0.0;
  double fpca_seconds = 0.0;
  double fit_seconds = 0.0;
  int singular_count = 0;
  int K = 0;
  std::vector<std::string> test_subjects;  // parallel to test_ispe
  std::vector<double> test_ispe;
  std::vector<double> acf_lag1;  // lag-1 conditional-residual ACF per score
};

struct ReplicateMetrics {
  int replicate = 0;
  std::uint64_t seed = 0;
  std::vector<ModelMetrics> models;

  const ModelMetrics& model(const std::string& name) const;
};

/// Generates one dataset, runs one pooled mv-FPCA and fits every selected
/// variant on its scores. Fit failures are recorded per model.
ReplicateMetrics run_replicate(const GeneratorParams& params, const ScenarioConfig& scenario,
                               std::uint64_t seed, int replicate = 0);

/// All replicates of a scenario, distributed over `workers` threads.
std::vector<ReplicateMetrics> run_scenario(const GeneratorParams& params,
                                           const ScenarioConfig& scenario, unsigned workers);

/// (1/L) sum_p int (a_p - b_p)^2 dt by the trapezoid rule, L the grid range.
double ispe(const MvCurve& predicted, const MvCurve& observed);

/// Intercept surfaces: (1/L) sum_p int int (a - b)^2 dT dt.
double ise_intercept(const Surface& estimate, const Surface& truth);

/// Covariate curves (P x G on `grid`): (1/L) sum_p int (a - b)^2 dt.
double ise_covariate(const Eigen::MatrixXd& estimate, const Eigen::MatrixXd& truth,
                     const Eigen::VectorXd& grid);

/// Per subject: mean test ISPE of `model` over mean test ISPE of `reference`.
std::map<std::string, double> ispe_ratio_by_subject(const ModelMetrics& model,
                                                    const ModelMetrics& reference);

/// scenario,replicate,model,ise_beta0,ise_beta1,ise_beta2,mean_ispe,fpca_s,fit_s,singular_count,K
void write_metrics_csv(const std::string& scenario, const std::vector<ReplicateMetrics>& rows,
                       std::ostream& out);

/// Monte-Carlo covariance of the score vector of a single observation, with
/// covariates, random effects, residuals and T (uniform over the n_per_side
/// design points) all drawn afresh.
Eigen::MatrixXd marginal_score_covariance(const GeneratorParams& params, int n_mc,
                                          std::uint64_t seed, int n_per_side = 80);

/// Rows of V^T applied to the basis rows: rotated_k = sum_j V(j, k) basis_j.
Eigen::MatrixXd rotate_basis(const Eigen::MatrixXd& basis_coefs, const Eigen::MatrixXd& V);

enum class RecoveryMode { zero_fixed, with_fixed };

struct RecoveryResult {
  Eigen::MatrixXd mean_estimated;  // K x P*B
  Eigen::MatrixXd generating;      // K x P*B
  Eigen::MatrixXd rotated;         // K x P*B
  Eigen::MatrixXd score_covariance;
  Eigen::VectorXd error_raw;       // per function, L2 over t and dimensions
  Eigen::VectorXd error_rotated;
};

/// Averages sign-aligned estimates of the first K mv-FPCs over replicates
/// and compares them with the generating basis and its rotation by the
/// eigenvectors of the marginal score covariance.
RecoveryResult recovery_study(const GeneratorParams& params, RecoveryMode mode, int n_replicates,
                              const ScenarioConfig& scenario, std::uint64_t seed,
                              unsigned workers = 1, int n_mc = 100000);

}  // namespace mvlfmm
