#include "mvlfmm/model.hpp"

#include "mvlfmm/numeric.hpp"
#include "mvlfmm/parallel.hpp"
#include "mvlfmm/rng.hpp"

#include <boost/math/distributions/normal.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <stdexcept>

namespace mvlfmm {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::uint64_t score_seed(std::uint64_t seed, int k) {
  return CounterRng(seed).derive(static_cast<std::uint64_t>(k)).next_u64();
}

// Fits every score on a fixed longitudinal basis; per-k failures other
// than data errors are collected and reported together.
std::vector<ScoreLmmFit> fit_scores(const ScoreTable& scores, const CovariateTable& covariates,
                                    const std::vector<std::string>& covariate_names,
                                    const LongitudinalBasis& lb, const CovSpec& covspec,
                                    const LmmOptions& lmm, unsigned workers) {
  const int K = static_cast<int>(scores.scores.cols());
  std::vector<ScoreLmmFit> fits(static_cast<std::size_t>(K));
  std::vector<std::string> errors(static_cast<std::size_t>(K));
  parallel_for(static_cast<std::size_t>(K), workers, [&](std::size_t k) {
    const int kk = static_cast<int>(k);
    const LongDesign design = build_design(scores.scores.col(kk), scores.keys, covariates,
                                           covariate_names, lb, kk);
    LmmOptions opts = lmm;
    opts.seed = score_seed(lmm.seed, kk);
    try {
      fits[k] = fit_reml(design, covspec, opts);
    } catch (const DataError&) {
      throw;
    } catch (const std::exception& e) {
      errors[k] = e.what();
    }
  });
  std::string message;
  for (int k = 0; k < K; ++k)
    if (!errors[static_cast<std::size_t>(k)].empty())
      message += "score " + std::to_string(k + 1) + ": " + errors[static_cast<std::size_t>(k)] + "; ";
  if (!message.empty()) throw FitError("score model fit failed: " + message);
  return fits;
}

std::pair<LongitudinalBasis, CovSpec> resolved_basis(const ScoreTable& scores,
                                                     const CovariateTable& covariates,
                                                     const FitConfig& config) {
  LongitudinalBasis lb = config.long_basis;
  CovSpec covspec = config.covspec;
  if (lb.name == "mlfpca") {
    lb.per_k = estimate_mlfpca_bases(scores, covariates, config);
    covspec = {CovStructure::diagonal, CovStructure::diagonal};
  }
  validate(lb);
  return {lb, covspec};
}

int subject_index(const MvLfmmFit& fit, const std::string& subject) {
  if (fit.fits.empty()) return -1;
  const auto& ids = fit.fits.front().subject_ids;
  const auto it = std::find(ids.begin(), ids.end(), subject);
  return it == ids.end() ? -1 : static_cast<int>(it - ids.begin());
}

int group_index(const MvLfmmFit& fit, const std::string& subject, Side side) {
  if (fit.fits.empty()) return -1;
  const auto& ids = fit.fits.front().group_ids;
  const auto it = std::find(ids.begin(), ids.end(), std::make_pair(subject, side));
  return it == ids.end() ? -1 : static_cast<int>(it - ids.begin());
}

Eigen::VectorXd single(double x) { return Eigen::VectorXd::Constant(1, x); }

// Random-effect score contributions g_k(T) of one subject (and side): K x |T|.
Eigen::MatrixXd random_scores(const MvLfmmFit& fit, int subject, int group,
                              const Eigen::VectorXd& T, int deriv) {
  Eigen::MatrixXd g = Eigen::MatrixXd::Zero(fit.K(), T.size());
  for (int k = 0; k < fit.K(); ++k) {
    const auto& f = fit.fits[static_cast<std::size_t>(k)];
    if (subject >= 0 && f.blups_u.cols() > 0)
      g.row(k) += (fit.long_basis.subject_design(k, T, deriv) * f.blups_u.row(subject).transpose()).transpose();
    if (group >= 0 && f.blups_v.cols() > 0)
      g.row(k) += (fit.long_basis.side_design(k, T, deriv) * f.blups_v.row(group).transpose()).transpose();
  }
  return g;
}

// sum_p Psi_p' diag(w) Psi_p on the model grid, scaled by 1 / domain length.
Eigen::MatrixXd normalised_score_gram(const MvFpcaModel& fpca) {
  const Eigen::VectorXd& grid = fpca.mean.grid;
  const Eigen::VectorXd w = trapezoid_weights(grid) / (grid(grid.size() - 1) - grid(0));
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(fpca.K(), fpca.K());
  for (int p = 0; p < fpca.dims(); ++p) {
    const Eigen::MatrixXd psi = psi_dimension(fpca, grid, p);
    m += psi.transpose() * w.asDiagonal() * psi;
  }
  return m;
}

CurveEstimate coefficient_curve(const MvLfmmFit& fit, int column) {
  const Eigen::VectorXd& grid = fit.fpca.mean.grid;
  CurveEstimate out;
  out.grid = grid;
  out.estimate = Eigen::MatrixXd::Zero(fit.fpca.dims(), grid.size());
  out.variance = Eigen::MatrixXd::Zero(fit.fpca.dims(), grid.size());
  Eigen::VectorXd b(fit.K()), v(fit.K());
  for (int k = 0; k < fit.K(); ++k) {
    const auto& f = fit.fits[static_cast<std::size_t>(k)];
    b(k) = f.beta(column);
    v(k) = f.beta_cov(column, column);
  }
  for (int p = 0; p < fit.fpca.dims(); ++p) {
    const Eigen::MatrixXd psi = psi_dimension(fit.fpca, grid, p);
    out.estimate.row(p) = (psi * b).transpose();
    out.variance.row(p) = (psi.array().square().matrix() * v).transpose();
  }
  return out;
}

}  // namespace

int MvLfmmFit::singular_count(int first_k) const {
  const int upto = first_k < 0 ? K() : std::min(first_k, K());
  int count = 0;
  for (int k = 0; k < upto; ++k) count += fits[static_cast<std::size_t>(k)].singular ? 1 : 0;
  return count;
}

std::map<int, ScoreLevelBases> estimate_mlfpca_bases(const ScoreTable& scores,
                                                     const CovariateTable& covariates,
                                                     const FitConfig& config) {
  const int K = static_cast<int>(scores.scores.cols());
  const auto n = static_cast<Eigen::Index>(scores.keys.size());
  LongitudinalBasis fixed;
  fixed.basis = config.long_basis.basis;
  Eigen::VectorXd T(n);
  for (Eigen::Index i = 0; i < n; ++i) T(i) = scores.keys[static_cast<std::size_t>(i)].long_time;

  std::vector<ScoreLevelBases> bases(static_cast<std::size_t>(K));
  parallel_for(static_cast<std::size_t>(K), config.workers, [&](std::size_t k) {
    const int kk = static_cast<int>(k);
    const LongDesign d = build_design(scores.scores.col(kk), scores.keys, covariates,
                                      config.covariates, fixed, kk);
    // Working-independence residuals.
    const Eigen::VectorXd beta = d.X.colPivHouseholderQr().solve(d.y);
    const Eigen::VectorXd r = d.y - d.X * beta;
    std::vector<Trajectory> trajectories(d.group_ids.size());
    std::vector<std::vector<std::pair<int, Eigen::Index>>> rows(d.group_ids.size());
    for (Eigen::Index i = 0; i < n; ++i)
      rows[static_cast<std::size_t>(d.group[static_cast<std::size_t>(i)])].push_back(
          {d.stride[static_cast<std::size_t>(i)], i});
    for (std::size_t g = 0; g < rows.size(); ++g) {
      std::sort(rows[g].begin(), rows[g].end());
      auto& tr = trajectories[g];
      tr.subject_id = d.group_ids[g].first;
      tr.side = d.group_ids[g].second;
      for (const auto& [stride, i] : rows[g]) {
        tr.T.push_back(T(i));
        tr.y.push_back(r(i));
      }
    }
    const MlFpcaBasis ml = estimate_mlfpca_basis(trajectories, config.mlfpca_pve, config.mlfpca_grid);
    bases[k] = {tabulated_basis(ml.grid, ml.subject_level.functions),
                tabulated_basis(ml.grid, ml.side_level.functions)};
  });
  std::map<int, ScoreLevelBases> out;
  for (int k = 0; k < K; ++k) out.emplace(k, std::move(bases[static_cast<std::size_t>(k)]));
  return out;
}

MvLfmmFit fit_on_scores(const MvFpcaModel& fpca, const ScoreTable& scores,
                        const CovariateTable& covariates, const FitConfig& config) {
  const auto start = Clock::now();
  MvLfmmFit fit;
  fit.fpca = fpca;
  fit.covariate_names = config.covariates;
  const auto [lb, covspec] = resolved_basis(scores, covariates, config);
  fit.long_basis = lb;
  fit.fits = fit_scores(scores, covariates, config.covariates, lb, covspec, config.lmm, config.workers);
  if (config.record_timings) fit.fit_seconds = seconds_since(start);
  fit.metadata["long_basis"] = lb.name;
  fit.metadata["covspec_subject"] = to_string(covspec.subject);
  fit.metadata["covspec_side"] = to_string(covspec.side);
  fit.metadata["lmm_seed"] = std::to_string(config.lmm.seed);
  fit.metadata["lmm_restarts"] = std::to_string(config.lmm.n_restarts);
  return fit;
}

MvLfmmFit fit_model(const MvLongDataset& train, const FitConfig& config) {
  if (train.size() == 0) throw DataError("empty training data");
  for (const auto& name : config.covariates)
    if (std::find(train.covariates.names.begin(), train.covariates.names.end(), name) == train.covariates.names.end())
      throw DataError("unknown covariate '" + name + "'");
  const auto start = Clock::now();
  auto [fpca, scores] = pooled_mvfpca(train, config.fpca_basis, config.truncation);
  const double fpca_seconds = config.record_timings ? seconds_since(start) : 0.0;
  MvLfmmFit fit = fit_on_scores(fpca, scores, train.covariates, config);
  fit.fpca_seconds = fpca_seconds;
  fit.metadata["truncation_pve"] = format_double(config.truncation.pve);
  fit.metadata["truncation_k"] = std::to_string(config.truncation.k);
  return fit;
}

LongDesign score_design(const MvLfmmFit& fit, const ScoreTable& scores,
                        const CovariateTable& covariates, int k) {
  return build_design(scores.scores.col(k), scores.keys, covariates, fit.covariate_names,
                      fit.long_basis, k);
}

Eigen::MatrixXd psi_dimension(const MvFpcaModel& fpca, const Eigen::VectorXd& t, int p) {
  const Eigen::MatrixXd all = eval_eigenfunctions(fpca, t);
  return all.middleCols(static_cast<Eigen::Index>(p) * t.size(), t.size()).transpose();
}

CurveEstimate fixed_effect_curve(const MvLfmmFit& fit, int covariate) {
  if (covariate < 0 || covariate >= static_cast<int>(fit.covariate_names.size()))
    throw std::out_of_range("covariate index out of range");
  return coefficient_curve(fit, fit.D() + covariate);
}

Surface intercept_surface(const MvLfmmFit& fit, const Eigen::VectorXd& t_grid,
                          const Eigen::VectorXd& T_grid) {
  Eigen::MatrixXd b0(fit.K(), fit.D());
  for (int k = 0; k < fit.K(); ++k) b0.row(k) = fit.fits[static_cast<std::size_t>(k)].beta.head(fit.D()).transpose();
  const Eigen::MatrixXd xi = fit.long_basis.fixed_design(T_grid);
  Surface s{t_grid, T_grid, {}};
  for (int p = 0; p < fit.fpca.dims(); ++p)
    s.values.push_back(psi_dimension(fit.fpca, t_grid, p) * b0 * xi.transpose());
  return s;
}

std::vector<CurveEstimate> longitudinal_coefficient_curves(const MvLfmmFit& fit) {
  std::vector<CurveEstimate> out;
  for (int d = 0; d < fit.D(); ++d) out.push_back(coefficient_curve(fit, d));
  return out;
}

BootstrapResult bootstrap_fixed_effects(const MvLongDataset& train, const MvLfmmFit& fit,
                                        const FitConfig& config, int B, std::uint64_t seed) {
  if (B < 1) throw std::invalid_argument("bootstrap needs B >= 1");
  const ScoreTable scores = project_scores(train, fit.fpca);
  const auto subjects = train.subjects();
  std::map<std::string, std::vector<std::size_t>> rows_of;
  for (std::size_t r = 0; r < scores.keys.size(); ++r) rows_of[scores.keys[r].subject_id].push_back(r);
  const CovSpec covspec = fit.fits.empty() ? config.covspec : fit.fits.front().covspec;
  const std::size_t A = fit.covariate_names.size();
  const Eigen::Index width = static_cast<Eigen::Index>(fit.fpca.dims()) * fit.fpca.mean.grid.size();

  std::vector<std::vector<Eigen::VectorXd>> curves(static_cast<std::size_t>(B));
  std::vector<std::string> errors(static_cast<std::size_t>(B));
  const CounterRng root(seed);
  parallel_for(static_cast<std::size_t>(B), config.workers, [&](std::size_t b) {
    CounterRng rng = root.derive(b);
    ScoreTable sample;
    CovariateTable cov;
    cov.names = train.covariates.names;
    std::vector<Eigen::Index> picked;
    std::map<std::string, int> copies;
    for (std::size_t i = 0; i < subjects.size(); ++i) {
      const std::string& id = subjects[static_cast<std::size_t>(rng.below(subjects.size()))];
      const std::string name = id + "#" + std::to_string(++copies[id]);
      for (std::size_t r : rows_of[id]) {
        ObservationKey key = scores.keys[r];
        key.subject_id = name;
        if (!cov.has_row(name, key.side)) cov.rows[key.group()] = train.covariates.row(id, key.side);
        sample.keys.push_back(key);
        picked.push_back(static_cast<Eigen::Index>(r));
      }
    }
    sample.scores = scores.scores(picked, Eigen::all);
    try {
      MvLfmmFit rep;
      rep.fpca = fit.fpca;
      rep.long_basis = fit.long_basis;
      rep.covariate_names = fit.covariate_names;
      rep.fits = fit_scores(sample, cov, fit.covariate_names, fit.long_basis, covspec, config.lmm, 1);
      for (std::size_t a = 0; a < A; ++a) {
        const Eigen::MatrixXd est = fixed_effect_curve(rep, static_cast<int>(a)).estimate;
        Eigen::VectorXd flat(width);
        for (Eigen::Index p = 0; p < est.rows(); ++p) flat.segment(p * est.cols(), est.cols()) = est.row(p).transpose();
        curves[b].push_back(flat);
      }
    } catch (const std::exception& e) {
      errors[b] = e.what();
    }
  });

  BootstrapResult out;
  out.requested = B;
  std::vector<std::size_t> ok;
  for (std::size_t b = 0; b < curves.size(); ++b) {
    if (errors[b].empty()) {
      ok.push_back(b);
    } else {
      ++out.failed;
      out.failures.push_back("replicate " + std::to_string(b) + ": " + errors[b]);
    }
  }
  for (std::size_t a = 0; a < A; ++a) {
    Eigen::MatrixXd draws(static_cast<Eigen::Index>(ok.size()), width);
    for (std::size_t r = 0; r < ok.size(); ++r) draws.row(static_cast<Eigen::Index>(r)) = curves[ok[r]][a].transpose();
    out.draws.push_back(std::move(draws));
  }
  return out;
}

Band simultaneous_band(const Eigen::VectorXd& estimate, const Eigen::MatrixXd& draws, double level) {
  if (draws.rows() == 0) throw std::invalid_argument("bootstrap array is empty");
  if (draws.cols() != estimate.size()) throw std::invalid_argument("bootstrap width mismatch");
  if (!(level > 0.0 && level < 1.0)) throw std::invalid_argument("band level must lie in (0, 1)");
  const Eigen::Index B = draws.rows(), M = draws.cols();
  Band band;
  band.sd = Eigen::VectorXd::Zero(M);
  if (B > 1) {
    const Eigen::RowVectorXd mean = draws.colwise().mean();
    band.sd = ((draws.rowwise() - mean).array().square().colwise().sum() / static_cast<double>(B - 1))
                  .sqrt()
                  .transpose();
    // Identical replicates have exactly zero spread.
    for (Eigen::Index j = 0; j < M; ++j)
      if (draws.col(j).maxCoeff() == draws.col(j).minCoeff()) band.sd(j) = 0.0;
  }
  std::vector<double> maxima(static_cast<std::size_t>(B), 0.0);
  Eigen::VectorXd pointwise_q = Eigen::VectorXd::Zero(M);
  std::vector<double> column(static_cast<std::size_t>(B));
  for (Eigen::Index j = 0; j < M; ++j) {
    if (!(band.sd(j) > 0.0)) continue;
    for (Eigen::Index b = 0; b < B; ++b) {
      const double z = std::abs(draws(b, j) - estimate(j)) / band.sd(j);
      column[static_cast<std::size_t>(b)] = z;
      maxima[static_cast<std::size_t>(b)] = std::max(maxima[static_cast<std::size_t>(b)], z);
    }
    pointwise_q(j) = quantile(column, level);
  }
  band.critical = quantile(maxima, level);
  band.lower = estimate - band.critical * band.sd;
  band.upper = estimate + band.critical * band.sd;
  band.pointwise_lower = estimate - pointwise_q.cwiseProduct(band.sd);
  band.pointwise_upper = estimate + pointwise_q.cwiseProduct(band.sd);
  return band;
}

std::pair<Eigen::VectorXd, Eigen::VectorXd> pointwise_band(const Eigen::VectorXd& estimate,
                                                           const Eigen::VectorXd& variance,
                                                           double level) {
  if (!(level > 0.0 && level < 1.0)) throw std::invalid_argument("band level must lie in (0, 1)");
  const double z = boost::math::quantile(boost::math::normal_distribution<double>(), (1.0 + level) / 2.0);
  const Eigen::VectorXd half = z * variance.cwiseMax(0.0).cwiseSqrt();
  return {estimate - half, estimate + half};
}

Eigen::MatrixXd covariance_surface(const MvLfmmFit& fit, CovLevel level, double t, double t2,
                                   double T, double T2) {
  const Eigen::MatrixXd psi1 = eval_eigenfunctions(fit.fpca, single(t));   // K x P
  const Eigen::MatrixXd psi2 = eval_eigenfunctions(fit.fpca, single(t2));
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(fit.fpca.dims(), fit.fpca.dims());
  for (int k = 0; k < fit.K(); ++k) {
    const auto& f = fit.fits[static_cast<std::size_t>(k)];
    double c = 0.0;
    switch (level) {
      case CovLevel::subject:
        if (f.Q_star.size() > 0)
          c = (fit.long_basis.subject_design(k, single(T)) * f.Q_star *
               fit.long_basis.subject_design(k, single(T2)).transpose())(0, 0);
        break;
      case CovLevel::side:
        if (f.R_star.size() > 0)
          c = (fit.long_basis.side_design(k, single(T)) * f.R_star *
               fit.long_basis.side_design(k, single(T2)).transpose())(0, 0);
        break;
      case CovLevel::error:
        c = f.s;
        break;
    }
    out += c * psi1.row(k).transpose() * psi2.row(k);
  }
  return out;
}

Eigen::MatrixXd implied_covariance(const MvLfmmFit& fit, const ObservationKey& a,
                                   const ObservationKey& b, double t, double t2) {
  if (a.subject_id != b.subject_id) return Eigen::MatrixXd::Zero(fit.fpca.dims(), fit.fpca.dims());
  Eigen::MatrixXd out = covariance_surface(fit, CovLevel::subject, t, t2, a.long_time, b.long_time);
  if (a.side != b.side) return out;
  out += covariance_surface(fit, CovLevel::side, t, t2, a.long_time, b.long_time);
  if (a.stride == b.stride) out += covariance_surface(fit, CovLevel::error, t, t2, a.long_time, b.long_time);
  return out;
}

Prediction predict_curve(const MvLfmmFit& fit, const ObservationKey& key,
                         const std::map<std::string, double>& covariates) {
  if (!(key.long_time >= 0.0 && key.long_time <= 1.0))
    throw DataError("longitudinal time must lie in [0, 1]");
  Eigen::VectorXd x(fit.D() + static_cast<Eigen::Index>(fit.covariate_names.size()));
  x.head(fit.D()) = fit.long_basis.fixed_design(single(key.long_time)).row(0).transpose();
  for (std::size_t a = 0; a < fit.covariate_names.size(); ++a) {
    const auto it = covariates.find(fit.covariate_names[a]);
    if (it == covariates.end()) throw DataError("missing covariate '" + fit.covariate_names[a] + "'");
    x(fit.D() + static_cast<Eigen::Index>(a)) = it->second;
  }
  for (const auto& [name, value] : covariates)
    if (std::find(fit.covariate_names.begin(), fit.covariate_names.end(), name) == fit.covariate_names.end())
      throw DataError("unknown covariate '" + name + "'");

  Prediction pred;
  const int subject = subject_index(fit, key.subject_id);
  const int group = group_index(fit, key.subject_id, key.side);
  pred.subject_seen = subject >= 0;
  pred.side_seen = group >= 0;
  pred.scores = random_scores(fit, subject, group, single(key.long_time), 0).col(0);
  for (int k = 0; k < fit.K(); ++k) pred.scores(k) += x.dot(fit.fits[static_cast<std::size_t>(k)].beta);

  const Eigen::VectorXd& grid = fit.fpca.mean.grid;
  pred.curve.grid = grid;
  pred.curve.values = fit.fpca.mean.values;
  for (int p = 0; p < fit.fpca.dims(); ++p)
    pred.curve.values.row(p) += (psi_dimension(fit.fpca, grid, p) * pred.scores).transpose();
  return pred;
}

std::map<std::string, double> covariate_values(const MvLfmmFit& fit, const CovariateTable& table,
                                               const std::string& subject, Side side) {
  std::map<std::string, double> out;
  const Eigen::VectorXd& row = table.row(subject, side);
  for (const auto& name : fit.covariate_names) out[name] = row(table.index_of(name));
  return out;
}

Surface subject_trajectory(const MvLfmmFit& fit, const std::string& subject,
                           std::optional<Side> side, const Eigen::VectorXd& T_grid) {
  const int i = subject_index(fit, subject);
  if (i < 0) throw DataError("unknown subject '" + subject + "'");
  int g = -1;
  if (side) {
    g = group_index(fit, subject, *side);
    if (g < 0) throw DataError("subject '" + subject + "' has no " + to_string(*side) + " side");
  }
  const Eigen::MatrixXd scores = random_scores(fit, i, g, T_grid, 0);
  const Eigen::VectorXd& grid = fit.fpca.mean.grid;
  Surface s{grid, T_grid, {}};
  for (int p = 0; p < fit.fpca.dims(); ++p) s.values.push_back(psi_dimension(fit.fpca, grid, p) * scores);
  return s;
}

ChangeMetrics change_metrics(const MvLfmmFit& fit, const std::string& subject, Side side) {
  const int i = subject_index(fit, subject);
  const int g = group_index(fit, subject, side);
  if (i < 0 || g < 0) throw DataError("unknown subject-side '" + subject + "'");
  const Eigen::MatrixXd m = normalised_score_gram(fit.fpca);
  const Eigen::VectorXd T = linspace(0.0, 1.0, 101);
  const Eigen::VectorXd wT = trapezoid_weights(T);
  const Eigen::MatrixXd slope = random_scores(fit, i, g, T, 1);
  ChangeMetrics out;
  for (Eigen::Index j = 0; j < T.size(); ++j) out.isd += wT(j) * slope.col(j).dot(m * slope.col(j));
  Eigen::VectorXd ends(2);
  ends << 0.0, 1.0;
  const Eigen::MatrixXd level = random_scores(fit, i, g, ends, 0);
  const Eigen::VectorXd delta = level.col(1) - level.col(0);
  out.overall_change = std::sqrt(std::max(0.0, delta.dot(m * delta)));
  return out;
}

}  // namespace mvlfmm
