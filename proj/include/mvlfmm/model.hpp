#pragma once

#include "mvlfmm/datamodel.hpp"
#include "mvlfmm/lmm.hpp"
#include "mvlfmm/longitudinal.hpp"
#include "mvlfmm/mvfpca.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace mvlfmm {

/// Raised when no usable model can be fitted (CLI exit code 4).
class FitError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct FitConfig {
  UnivariateBasis fpca_basis = bspline_basis(20, 4, 0.0, 100.0);
  Truncation truncation;
  LongitudinalBasis long_basis = spline_long_basis();
  CovSpec covspec;
  std::vector<std::string> covariates;
  LmmOptions lmm;
  double mlfpca_pve = 0.995;
  int mlfpca_grid = 41;
  unsigned workers = 1;
  bool record_timings = false;
};

/// Multivariate multilevel longitudinal functional model.
///
/// Score k is modelled by fits[k]; the coefficient vector of each fit is
/// [xi_1 .. xi_D, covariates...]. Immutable once assembled.
struct MvLfmmFit {
  MvFpcaModel fpca;
  LongitudinalBasis long_basis;
  std::vector<ScoreLmmFit> fits;
  std::vector<std::string> covariate_names;
  std::map<std::string, std::string> metadata;
  double fpca_seconds = 0.0;
  double fit_seconds = 0.0;

  int K() const { return static_cast<int>(fits.size()); }
  int D() const { return long_basis.D(); }
  int singular_count(int first_k = -1) const;
};

/// Centre, pooled mv-FPCA, then one REML fit per score (in parallel). For a
/// long basis named "mlfpca" the per-score random bases are estimated first
/// from working-independence residual trajectories and both covariance
/// structures are forced to diagonal.
MvLfmmFit fit_model(const MvLongDataset& train, const FitConfig& config);

/// Fits the score models on an existing mv-FPCA decomposition.
MvLfmmFit fit_on_scores(const MvFpcaModel& fpca, const ScoreTable& scores,
                        const CovariateTable& covariates, const FitConfig& config);

/// Per-score random bases of the ml-FPCA variant.
std::map<int, ScoreLevelBases> estimate_mlfpca_bases(const ScoreTable& scores,
                                                     const CovariateTable& covariates,
                                                     const FitConfig& config);

/// Mixed-model design of score k under the fitted longitudinal basis.
LongDesign score_design(const MvLfmmFit& fit, const ScoreTable& scores,
                        const CovariateTable& covariates, int k);

/// A multivariate function of t with pointwise variance (P x |t| each).
struct CurveEstimate {
  Eigen::VectorXd grid;
  Eigen::MatrixXd estimate;
  Eigen::MatrixXd variance;
};

/// Per-dimension surfaces over (t, T): values[p] is |t| x |T|.
struct Surface {
  Eigen::VectorXd t;
  Eigen::VectorXd T;
  std::vector<Eigen::MatrixXd> values;
};

/// Eigenfunction values of dimension p: |t| x K.
Eigen::MatrixXd psi_dimension(const MvFpcaModel& fpca, const Eigen::VectorXd& t, int p);

/// sum_k beta*_{a,k} psi_k(t) on the model grid; variance sums the per-k
/// terms (estimates of different scores treated as independent).
CurveEstimate fixed_effect_curve(const MvLfmmFit& fit, int covariate);

Surface intercept_surface(const MvLfmmFit& fit, const Eigen::VectorXd& t_grid,
                          const Eigen::VectorXd& T_grid);

/// One curve per longitudinal basis function d: sum_k beta*_{0,k,d} psi_k(t).
std::vector<CurveEstimate> longitudinal_coefficient_curves(const MvLfmmFit& fit);

struct BootstrapResult {
  /// draws[a] is B x (P*G), dimension-major, for covariate a.
  std::vector<Eigen::MatrixXd> draws;
  int requested = 0;
  int failed = 0;
  std::vector<std::string> failures;
};

/// Subject-resampling bootstrap of the covariate effects. Each replicate
/// reuses the mv-FPCA decomposition and longitudinal bases of `fit`, renames
/// duplicated subjects, refits the score models and evaluates beta_a(t).
BootstrapResult bootstrap_fixed_effects(const MvLongDataset& train, const MvLfmmFit& fit,
                                        const FitConfig& config, int B, std::uint64_t seed);

struct Band {
  Eigen::VectorXd lower;
  Eigen::VectorXd upper;
  Eigen::VectorXd pointwise_lower;
  Eigen::VectorXd pointwise_upper;
  Eigen::VectorXd sd;
  double critical = 0.0;
};

/// Max-statistic band from bootstrap draws (B x M) around `estimate` (M).
/// The pointwise band uses the per-point quantile of the same standardised
/// deviations, so it is nested in the simultaneous one.
Band simultaneous_band(const Eigen::VectorXd& estimate, const Eigen::MatrixXd& draws, double level);

/// Normal-theory band estimate +- z * sqrt(variance).
std::pair<Eigen::VectorXd, Eigen::VectorXd> pointwise_band(const Eigen::VectorXd& estimate,
                                                           const Eigen::VectorXd& variance,
                                                           double level);

enum class CovLevel { subject, side, error };

/// P x P covariance of the subject, side or error process between (t, T)
/// and (t2, T2); T and T2 are ignored for the error level.
Eigen::MatrixXd covariance_surface(const MvLfmmFit& fit, CovLevel level, double t, double t2,
                                   double T, double T2);

/// Covariance of two observations' curves at (t, t2).
Eigen::MatrixXd implied_covariance(const MvLfmmFit& fit, const ObservationKey& a,
                                   const ObservationKey& b, double t, double t2);

struct Prediction {
  MvCurve curve;
  Eigen::VectorXd scores;
  bool subject_seen = false;
  bool side_seen = false;
};

/// Fitted or predicted curve for a key. Unseen subjects or sides contribute
/// zero random effects. `covariates` must name every model covariate.
Prediction predict_curve(const MvLfmmFit& fit, const ObservationKey& key,
                         const std::map<std::string, double>& covariates);

/// Covariate row (model order) of a subject-side.
std::map<std::string, double> covariate_values(const MvLfmmFit& fit, const CovariateTable& table,
                                               const std::string& subject, Side side);

/// u_i(t, T), plus v_ij(t, T) when a side is given, on the model t grid.
Surface subject_trajectory(const MvLfmmFit& fit, const std::string& subject,
                           std::optional<Side> side, const Eigen::VectorXd& T_grid);

struct ChangeMetrics {
  double isd = 0.0;
  double overall_change = 0.0;
};

/// Roughness and net change of u_i + v_ij over T, with the (1/100) t-scale
/// normalisation: isd = (1/100) sum_p int int (df/dT)^2, overall change =
/// sqrt((1/100) sum_p int (f(t,1) - f(t,0))^2).
ChangeMetrics change_metrics(const MvLfmmFit& fit, const std::string& subject, Side side);

}  // namespace mvlfmm
