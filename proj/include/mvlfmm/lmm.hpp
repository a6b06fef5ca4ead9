#pragma once

#include "mvlfmm/datamodel.hpp"
#include "mvlfmm/longitudinal.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace mvlfmm {

enum class CovStructure { unstructured, diagonal };

std::string to_string(CovStructure s);
CovStructure parse_cov_structure(const std::string& text);

/// Covariance structure of the random effects at each level. The column
/// subsets themselves are carried by LongitudinalBasis.
struct CovSpec {
  CovStructure subject = CovStructure::unstructured;
  CovStructure side = CovStructure::unstructured;
};

/// Scalar mixed-model design for one score: y = X b + Zu u_i + Zv v_ij + e.
///
/// Zu and Zv hold the per-row random-design values; the block structure is
/// given by `subject` and `group` (subject-side) row indices.
struct LongDesign {
  Eigen::VectorXd y;
  Eigen::MatrixXd X;
  Eigen::MatrixXd Zu;
  Eigen::MatrixXd Zv;
  std::vector<int> subject;
  std::vector<int> group;
  std::vector<int> stride;
  std::vector<std::string> subject_ids;
  std::vector<std::pair<std::string, Side>> group_ids;
  std::vector<int> group_subject;
  std::vector<std::string> x_names;

  Eigen::Index n() const { return y.size(); }
  int Du() const { return static_cast<int>(Zu.cols()); }
  int Dv() const { return static_cast<int>(Zv.cols()); }
};

/// X = [xi(T) | covariates], Zu / Zv from the level bases of score k.
/// Rank-deficient X raises DataError.
LongDesign build_design(const Eigen::VectorXd& scores_k, const std::vector<ObservationKey>& keys,
                        const CovariateTable& covariates,
                        const std::vector<std::string>& covariate_names,
                        const LongitudinalBasis& long_basis, int k);

struct LmmOptions {
  double tol = 1e-8;
  int max_iter = 10000;
  int n_restarts = 3;
  std::uint64_t seed = 0;
  double singular_tol = 1e-4;
};

struct ScoreLmmFit {
  Eigen::VectorXd beta;
  Eigen::MatrixXd beta_cov;
  Eigen::MatrixXd Q_star;
  Eigen::MatrixXd R_star;
  double s = 0.0;
  Eigen::MatrixXd lambda_u;  // relative Cholesky factors, Q* = s Lu Lu'
  Eigen::MatrixXd lambda_v;
  Eigen::MatrixXd blups_u;   // subjects x Du
  Eigen::MatrixXd blups_v;   // subject-sides x Dv
  std::vector<std::string> subject_ids;
  std::vector<std::pair<std::string, Side>> group_ids;
  std::vector<std::string> x_names;
  CovSpec covspec;
  double reml_deviance = 0.0;
  bool singular = false;
  bool converged = true;
  int evaluations = 0;
  std::vector<double> start_deviances;
};

/// Profiled REML deviance at relative-factor parameters theta (exposed for
/// testing and diagnostics).
class RemlProblem {
 public:
  RemlProblem(const LongDesign& design, CovSpec covspec);

  int n_theta() const { return n_theta_; }
  Eigen::VectorXd start() const;
  double deviance(const Eigen::VectorXd& theta) const;
  std::pair<Eigen::MatrixXd, Eigen::MatrixXd> factors(const Eigen::VectorXd& theta) const;
  Eigen::VectorXd theta_of(const Eigen::MatrixXd& lambda_u, const Eigen::MatrixXd& lambda_v) const;

  struct Solution {
    Eigen::VectorXd beta;
    Eigen::MatrixXd beta_cov;
    double s = 0.0;
    double deviance = 0.0;
    Eigen::MatrixXd blups_u;
    Eigen::MatrixXd blups_v;
  };
  /// Fixed effects, residual variance, deviance and conditional modes at theta.
  Solution solve(const Eigen::VectorXd& theta) const;

 private:
  struct SubjectBlock {
    std::vector<int> groups;  // global subject-side indices
    Eigen::MatrixXd ztz;
    Eigen::MatrixXd ztx;
    Eigen::VectorXd zty;
  };
  struct Work;
  bool accumulate(const Eigen::VectorXd& theta, Work& w) const;

  CovSpec covspec_;
  int du_ = 0, dv_ = 0, p_ = 0, n_theta_ = 0;
  Eigen::Index n_ = 0;
  std::size_t n_groups_ = 0;
  Eigen::MatrixXd xtx_;
  Eigen::VectorXd xty_;
  double yty_ = 0.0;
  double logdet_xtx_ = 0.0;
  std::vector<SubjectBlock> blocks_;
};

struct NelderMeadResult {
  Eigen::VectorXd x;
  double f = 0.0;
  int evaluations = 0;
  bool converged = false;
};

/// Adaptive Nelder-Mead minimiser. Stops when the simplex values agree to
/// ftol (relative) and its vertices to xtol, or after max_evals.
NelderMeadResult nelder_mead(const std::function<double(const Eigen::VectorXd&)>& f,
                             const Eigen::VectorXd& x0, double step, double ftol, double xtol,
                             int max_evals);

ScoreLmmFit fit_reml(const LongDesign& design, const CovSpec& covspec, const LmmOptions& opts = {});

/// True iff a diagonal of the relative Cholesky factor of Q*/s or R*/s is below tol.
bool detect_singular(const ScoreLmmFit& fit, double tol = 1e-4);

/// Conditional modes at the fitted variance parameters: (subjects x Du, groups x Dv).
std::pair<Eigen::MatrixXd, Eigen::MatrixXd> compute_blups(const ScoreLmmFit& fit,
                                                          const LongDesign& design);

/// y - X beta - Zu u - Zv v.
Eigen::VectorXd conditional_residuals(const ScoreLmmFit& fit, const LongDesign& design);

struct QuantilePairs {
  std::vector<double> theoretical;
  std::vector<double> sample;
};

struct ResidualDiagnostics {
  Eigen::VectorXd acf;  // lags 0..max_lag
  int max_lag = 0;
  bool lag_truncated = false;
  QuantilePairs residuals;
  std::vector<QuantilePairs> blups_u;  // per random-effect column
  std::vector<QuantilePairs> blups_v;
};

/// Pooled within-subject-side ACF of conditional residuals plus Q-Q data.
ResidualDiagnostics residual_diagnostics(const ScoreLmmFit& fit, const LongDesign& design,
                                         int max_lag);

/// Normal Q-Q pairs of the standardised sample.
QuantilePairs normal_qq(std::vector<double> sample);

}  // namespace mvlfmm
