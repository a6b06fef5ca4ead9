#include "mvlfmm/sim.hpp"

#include "mvlfmm/lmm.hpp"
#include "mvlfmm/mvfpca.hpp"
#include "mvlfmm/numeric.hpp"
#include "mvlfmm/parallel.hpp"
#include "mvlfmm/rng.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>
#include <ostream>
#include <stdexcept>

namespace mvlfmm {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

// Stream ids below the replicate root.
constexpr std::uint64_t kSubjectStream = 1;
constexpr std::uint64_t kNoiseStream = 2;
constexpr std::uint64_t kMissingStream = 3;

double draw_covariate(const CovariateLaw& law, CounterRng& rng) {
  if (law.kind == CovariateLaw::Kind::bernoulli) return rng.bernoulli(law.p) ? 1.0 : 0.0;
  return law.mean + law.sd * rng.normal();
}

Eigen::VectorXd draw_diag_normal(const Eigen::VectorXd& variances, CounterRng& rng) {
  Eigen::VectorXd out(variances.size());
  for (Eigen::Index d = 0; d < variances.size(); ++d)
    out(d) = std::sqrt(variances(d)) * rng.normal();
  return out;
}

UnivariateBasis xi_basis(const GeneratorParams& params) {
  return ortho_poly_basis(params.D() - 1, params.xi_grid_size, 0.0, 1.0);
}

// Eigenfunction values, P*G x K (dimension-major rows).
Eigen::MatrixXd psi_values(const GeneratorParams& params) {
  const Eigen::MatrixXd B = eval_basis(params.basis, params.mean.grid);
  const int nb = params.basis.size();
  const Eigen::Index G = B.rows();
  Eigen::MatrixXd out(params.P() * G, params.K());
  for (int p = 0; p < params.P(); ++p)
    out.middleRows(p * G, G) = B * params.basis_coefs.middleCols(p * nb, nb).transpose();
  return out;
}

Eigen::MatrixXd as_curve(const Eigen::VectorXd& stacked, int P, Eigen::Index G) {
  Eigen::MatrixXd out(P, G);
  for (int p = 0; p < P; ++p) out.row(p) = stacked.segment(p * G, G).transpose();
  return out;
}

GeneratedTruth make_truth(const GeneratorParams& params, const Eigen::MatrixXd& psi) {
  const Eigen::VectorXd& t = params.mean.grid;
  const Eigen::Index G = t.size();
  const int P = params.P();
  GeneratedTruth truth;
  truth.intercept.t = t;
  truth.intercept.T = linspace(0.0, 1.0, 101);
  const Eigen::MatrixXd xi = eval_basis(xi_basis(params), truth.intercept.T);
  // coef(k, T) = sum_d beta0(k, d) xi_d(T)
  const Eigen::MatrixXd coef = params.beta0 * xi.transpose();
  for (int p = 0; p < P; ++p) {
    Eigen::MatrixXd surface = psi.middleRows(p * G, G) * coef;
    surface.colwise() += params.mean.values.row(p).transpose();
    truth.intercept.values.push_back(surface);
  }
  for (int a = 0; a < params.A(); ++a)
    truth.covariate_curves.push_back(as_curve(psi * params.betaA.col(a), P, G));
  return truth;
}

Eigen::MatrixXd trapezoid_2d(const Eigen::VectorXd& t, const Eigen::VectorXd& T) {
  return trapezoid_weights(t) * trapezoid_weights(T).transpose();
}

void require_same_grid(const Eigen::VectorXd& a, const Eigen::VectorXd& b, const char* what) {
  if (a.size() != b.size() || (a - b).cwiseAbs().maxCoeff() > 1e-12)
    throw std::invalid_argument(std::string(what) + ": grids differ");
}

}  // namespace

void validate(const GeneratorParams& params) {
  const int K = params.K(), D = params.D(), P = params.P();
  const int nb = params.basis.size();
  if (K < 1 || D < 1 || P < 1) throw std::invalid_argument("generator: empty parameter set");
  if (params.basis_coefs.cols() != P * nb)
    throw std::invalid_argument("generator: basis_coefs must have P * B columns");
  if (params.mean.grid.size() != params.mean.values.cols())
    throw std::invalid_argument("generator: mean grid and values disagree");
  if (params.beta0.rows() != K || params.betaA.rows() != K || params.Q_diag.rows() != K ||
      params.R_diag.rows() != K || params.s.size() != K)
    throw std::invalid_argument("generator: every coefficient table needs K rows");
  if (params.Q_diag.cols() != D || params.R_diag.cols() != D)
    throw std::invalid_argument("generator: Q_diag and R_diag need D columns");
  if (static_cast<int>(params.covariate_law.size()) != params.A() ||
      static_cast<int>(params.covariate_names.size()) != params.A())
    throw std::invalid_argument("generator: one law and one name per covariate");
  if (static_cast<int>(params.dim_names.size()) != P)
    throw std::invalid_argument("generator: one name per dimension");
  if (params.Q_diag.minCoeff() < 0 || params.R_diag.minCoeff() < 0 || params.s.minCoeff() < 0)
    throw std::invalid_argument("generator: variances must be >= 0");
  if (params.noise_sigma < 0 || params.noise_l <= 0)
    throw std::invalid_argument("generator: noise needs sigma >= 0 and l > 0");
  const Eigen::MatrixXd W = block_gram(params.basis, P);
  const Eigen::MatrixXd M = params.basis_coefs * W * params.basis_coefs.transpose();
  if ((M - Eigen::MatrixXd::Identity(K, K)).cwiseAbs().maxCoeff() > 1e-6)
    throw std::invalid_argument("generator: basis functions are not orthonormal");
}

GeneratorParams reference_params() {
  constexpr int K = 10, P = 3, D = 3;
  const double pi = std::numbers::pi;
  GeneratorParams g;
  g.basis = bspline_basis(20, 4, 0.0, 100.0);
  g.dim_names = {"hip", "knee", "ankle"};
  g.covariate_names = {"x1", "x2"};
  g.covariate_law = {CovariateLaw::bernoulli(0.5), CovariateLaw::gaussian(0.0, 1.0)};

  const Eigen::VectorXd t = linspace(0.0, 100.0, 101);
  g.mean.grid = t;
  g.mean.values.resize(P, t.size());
  for (Eigen::Index i = 0; i < t.size(); ++i) {
    const double w = 2 * pi * t(i) / 100;
    g.mean.values(0, i) = 10 + 20 * std::cos(w);
    g.mean.values(1, i) = 35 - 25 * std::cos(w) + 10 * std::sin(2 * w);
    g.mean.values(2, i) = 5 * std::sin(w) + 3 * std::cos(2 * w);
  }

  // Harmonics of rising frequency with dimension-dependent phase and weight,
  // projected on the splines and orthonormalised in order.
  const LeastSquaresProjector projector(g.basis, t);
  const int nb = g.basis.size();
  Eigen::MatrixXd raw(K, P * nb);
  for (int k = 0; k < K; ++k) {
    Eigen::MatrixXd values(P, t.size());
    for (int p = 0; p < P; ++p) {
      const double weight = 1.0 - 0.3 * ((k + p) % P);
      for (Eigen::Index i = 0; i < t.size(); ++i)
        values(p, i) = weight * std::cos(pi * (k + 1) * t(i) / 100 + 0.7 * p + 0.3 * k);
    }
    const Eigen::MatrixXd c = projector.coefficients(values);
    for (int p = 0; p < P; ++p) raw.block(k, p * nb, 1, nb) = c.row(p);
  }
  const Eigen::MatrixXd W = block_gram(g.basis, P);
  const Eigen::MatrixXd M = raw * W * raw.transpose();
  const Eigen::MatrixXd L = M.llt().matrixL();
  g.basis_coefs = L.triangularView<Eigen::Lower>().solve(raw);

  g.beta0.resize(K, D);
  g.betaA.resize(K, 2);
  g.Q_diag.resize(K, D);
  g.R_diag.resize(K, D);
  g.s.resize(K);
  // xi_2 and xi_3 have mean square 1/101 over the grid, hence the factor 101.
  for (int k = 0; k < K; ++k) {
    const double v = 8000 * std::pow(0.6, k);
    const double sd = std::sqrt(v);
    const double sign = k % 2 == 0 ? 1.0 : -1.0;
    const double sign2 = (k / 2) % 2 == 0 ? 1.0 : -1.0;
    g.beta0.row(k) << 0.5 * sign * sd, 2 * sign2 * sd, -1.5 * sign * sd;
    g.betaA.row(k) << 0.8 * sign * sd, 0.4 * sign2 * sd;
    g.Q_diag.row(k) << 0.35 * v, 0.10 * 101 * v, 0.05 * 101 * v;
    g.R_diag.row(k) << 0.15 * v, 0.04 * 101 * v, 0.02 * 101 * v;
    g.s(k) = 0.15 * v;
  }
  return g;
}

GeneratorParams scale_strength(const GeneratorParams& params, double factor) {
  if (factor < 1) throw std::invalid_argument("scale_strength: factor must be >= 1");
  GeneratorParams out = params;
  const int D = params.D();
  if (D > 1) {
    out.Q_diag.rightCols(D - 1) *= factor * factor;
    out.R_diag.rightCols(D - 1) *= factor * factor;
  }
  out.strength *= factor;
  return out;
}

GeneratorParams without_fixed_effects(const GeneratorParams& params) {
  GeneratorParams out = params;
  out.beta0.setZero();
  out.betaA.setZero();
  return out;
}

std::uint64_t replicate_seed(const ScenarioConfig& scenario, int r) {
  return CounterRng(scenario.seed).derive(static_cast<std::uint64_t>(r)).next_u64();
}

Eigen::MatrixXd noise_factor(const Eigen::VectorXd& grid, double l, double sigma) {
  const Eigen::Index G = grid.size();
  const double phi0 = 1.0 / std::sqrt(2 * std::numbers::pi);
  Eigen::MatrixXd C(G, G);
  for (Eigen::Index i = 0; i < G; ++i)
    for (Eigen::Index j = 0; j < G; ++j) {
      const double z = l * (grid(i) - grid(j));
      C(i, j) = sigma * sigma * phi0 * std::exp(-0.5 * z * z);
    }
  C.diagonal().array() += 1e-10;
  Eigen::LLT<Eigen::MatrixXd> llt(C);
  if (llt.info() != Eigen::Success)
    throw std::runtime_error("smooth-noise kernel is not positive definite after the ridge");
  return llt.matrixL();
}

GeneratedData generate_dataset(const GeneratorParams& base, const ScenarioConfig& scenario,
                               std::uint64_t seed) {
  if (scenario.n_subjects < 1 || scenario.n_per_side < 1)
    throw std::invalid_argument("scenario needs >= 1 subject and >= 1 stride per side");
  if (scenario.missing_prop < 0 || scenario.missing_prop >= 1)
    throw std::invalid_argument("missing_prop must lie in [0, 1)");
  const GeneratorParams params =
      scenario.strength == 1.0 ? base : scale_strength(base, scenario.strength);
  validate(params);
  const int K = params.K(), P = params.P(), A = params.A();
  const int n = scenario.n_per_side;
  const Eigen::Index G = params.mean.grid.size();
  const Eigen::MatrixXd psi = psi_values(params);
  const Eigen::VectorXd T = linspace(0.0, 1.0, n);
  const Eigen::MatrixXd xi = eval_basis(xi_basis(params), T);  // n x D
  const bool noisy = params.noise_sigma > 0;
  const Eigen::MatrixXd L =
      noisy ? noise_factor(params.mean.grid, params.noise_l, params.noise_sigma) : Eigen::MatrixXd();
  const CounterRng root(seed);
  const int n_removed = static_cast<int>(std::lround(scenario.missing_prop * n));
  const int n_test = std::min(scenario.test_per_side, n_removed);

  GeneratedData out;
  for (auto* d : {&out.full, &out.train, &out.test}) {
    d->grid = params.mean.grid;
    d->dim_names = params.dim_names;
    d->covariates.names = params.covariate_names;
  }
  out.truth = make_truth(params, psi);

  std::vector<std::size_t> train_rows, test_rows;
  for (int i = 0; i < scenario.n_subjects; ++i) {
    const std::string id = "s" + std::to_string(i + 1);
    CounterRng subject_rng = root.derive(kSubjectStream).derive(static_cast<std::uint64_t>(i));
    Eigen::VectorXd x(A);
    for (int a = 0; a < A; ++a) x(a) = draw_covariate(params.covariate_law[static_cast<std::size_t>(a)], subject_rng);
    std::vector<Eigen::VectorXd> u(static_cast<std::size_t>(K));
    for (int k = 0; k < K; ++k)
      u[static_cast<std::size_t>(k)] = draw_diag_normal(params.Q_diag.row(k).transpose(), subject_rng);
    for (Side side : {Side::left, Side::right}) {
      const int j = static_cast<int>(side);
      out.full.covariates.rows[{id, side}] = x;
      CounterRng side_rng = subject_rng.derive(static_cast<std::uint64_t>(j + 1));
      std::vector<Eigen::VectorXd> v(static_cast<std::size_t>(K));
      for (int k = 0; k < K; ++k)
        v[static_cast<std::size_t>(k)] = draw_diag_normal(params.R_diag.row(k).transpose(), side_rng);

      std::vector<int> order(static_cast<std::size_t>(n));
      for (int l = 0; l < n; ++l) order[static_cast<std::size_t>(l)] = l;
      CounterRng missing_rng = root.derive(kMissingStream).derive(static_cast<std::uint64_t>(2 * i + j));
      shuffle(order, missing_rng);
      std::vector<int> role(static_cast<std::size_t>(n), 0);  // 0 train, 1 test, 2 dropped
      for (int r = 0; r < n_removed; ++r)
        role[static_cast<std::size_t>(order[static_cast<std::size_t>(r)])] = r < n_test ? 1 : 2;

      for (int l = 0; l < n; ++l) {
        const auto obs = static_cast<std::uint64_t>((2 * i + j) * n + l);
        Eigen::VectorXd ystar(K);
        for (int k = 0; k < K; ++k) {
          const auto kk = static_cast<std::size_t>(k);
          const Eigen::VectorXd c = params.beta0.row(k).transpose() + u[kk] + v[kk];
          ystar(k) = xi.row(l).dot(c) + x.dot(params.betaA.row(k).transpose()) +
                     std::sqrt(params.s(k)) * side_rng.normal();
        }
        MvCurve curve;
        curve.grid = params.mean.grid;
        curve.values = params.mean.values + as_curve(psi * ystar, P, G);
        if (noisy) {
          CounterRng noise_rng = root.derive(kNoiseStream).derive(obs);
          for (int p = 0; p < P; ++p) {
            Eigen::VectorXd z(G);
            for (Eigen::Index g = 0; g < G; ++g) z(g) = noise_rng.normal();
            curve.values.row(p) += (L * z).transpose();
          }
        }
        out.full.curves.push_back(std::move(curve));
        out.full.keys.push_back({id, side, l + 1, T(l)});
        const std::size_t row = out.full.size() - 1;
        if (role[static_cast<std::size_t>(l)] == 0) train_rows.push_back(row);
        if (role[static_cast<std::size_t>(l)] == 1) test_rows.push_back(row);
      }
    }
  }
  out.train = subset(out.full, train_rows);
  out.test = subset(out.full, test_rows);
  return out;
}

FitConfig model_variant(const std::string& model, const GeneratorParams& params,
                        const ScenarioConfig& scenario) {
  FitConfig config;
  config.fpca_basis = params.basis;
  config.truncation = Truncation::by_pve(scenario.pve);
  config.covariates = params.covariate_names;
  config.mlfpca_pve = scenario.pve;
  config.lmm.n_restarts = scenario.lmm_restarts;
  config.record_timings = scenario.record_timings;
  if (model == "polynomial") {
    config.long_basis = polynomial_long_basis(params.D() - 1, params.xi_grid_size);
  } else if (model == "naive") {
    config.long_basis = naive_long_basis();
  } else if (model == "spline") {
    config.long_basis = spline_long_basis();
  } else if (model == "mlfpca") {
    config.long_basis = mlfpca_long_basis();
  } else {
    throw std::invalid_argument("unknown model variant: " + model);
  }
  return config;
}

const ModelMetrics& ReplicateMetrics::model(const std::string& name) const {
  for (const auto& m : models)
    if (m.model == name) return m;
  throw std::out_of_range("no metrics for model " + name);
}

ReplicateMetrics run_replicate(const GeneratorParams& params, const ScenarioConfig& scenario,
                               std::uint64_t seed, int replicate) {
  if (scenario.models.empty()) throw std::invalid_argument("run_replicate: no models selected");
  ReplicateMetrics out;
  out.replicate = replicate;
  out.seed = seed;
  const GeneratedData data = generate_dataset(params, scenario, seed);

  const auto fpca_start = Clock::now();
  auto [fpca, scores] = pooled_mvfpca(data.train, params.basis, Truncation::by_pve(scenario.pve));
  const double fpca_seconds = scenario.record_timings ? seconds_since(fpca_start) : 0.0;

  for (const auto& name : scenario.models) {
    ModelMetrics m;
    m.model = name;
    m.fpca_seconds = fpca_seconds;
    m.K = fpca.K();
    try {
      const FitConfig config = model_variant(name, params, scenario);
      const auto fit_start = Clock::now();
      const MvLfmmFit fit = fit_on_scores(fpca, scores, data.train.covariates, config);
      if (scenario.record_timings) m.fit_seconds = seconds_since(fit_start);
      m.singular_count = fit.singular_count(10);

      Surface est = intercept_surface(fit, data.truth.intercept.t, data.truth.intercept.T);
      for (int p = 0; p < fpca.dims(); ++p)
        est.values[static_cast<std::size_t>(p)].colwise() += fpca.mean.values.row(p).transpose();
      m.ise_beta0 = ise_intercept(est, data.truth.intercept);
      for (int a = 0; a < params.A(); ++a)
        m.ise_beta.push_back(ise_covariate(fixed_effect_curve(fit, a).estimate,
                                           data.truth.covariate_curves[static_cast<std::size_t>(a)],
                                           fpca.mean.grid));

      double total = 0.0;
      for (std::size_t r = 0; r < data.test.size(); ++r) {
        const ObservationKey& key = data.test.keys[r];
        const auto cov = covariate_values(fit, data.full.covariates, key.subject_id, key.side);
        const double e = ispe(predict_curve(fit, key, cov).curve, data.test.curves[r]);
        m.test_subjects.push_back(key.subject_id);
        m.test_ispe.push_back(e);
        total += e;
      }
      m.mean_ispe = data.test.size() > 0 ? total / static_cast<double>(data.test.size()) : 0.0;

      for (int k = 0; k < fit.K(); ++k) {
        const LongDesign design = score_design(fit, scores, data.train.covariates, k);
        m.acf_lag1.push_back(residual_diagnostics(fit.fits[static_cast<std::size_t>(k)], design, 1).acf(1));
      }
    } catch (const std::exception& e) {
      m.failed = true;
      m.error = e.what();
    }
    out.models.push_back(std::move(m));
  }
  return out;
}

std::vector<ReplicateMetrics> run_scenario(const GeneratorParams& params,
                                           const ScenarioConfig& scenario, unsigned workers) {
  std::vector<ReplicateMetrics> out(static_cast<std::size_t>(scenario.replicates));
  parallel_for(out.size(), workers, [&](std::size_t r) {
    const int rr = static_cast<int>(r);
    out[r] = run_replicate(params, scenario, replicate_seed(scenario, rr), rr);
  });
  return out;
}

double ispe(const MvCurve& predicted, const MvCurve& observed) {
  require_same_grid(predicted.grid, observed.grid, "ispe");
  if (predicted.values.rows() != observed.values.rows())
    throw std::invalid_argument("ispe: dimension counts differ");
  const Eigen::VectorXd w = trapezoid_weights(observed.grid);
  const double range = observed.grid(observed.grid.size() - 1) - observed.grid(0);
  const Eigen::MatrixXd diff = predicted.values - observed.values;
  return (diff.array().square().matrix() * w).sum() / range;
}

double ise_intercept(const Surface& estimate, const Surface& truth) {
  require_same_grid(estimate.t, truth.t, "ise_intercept");
  require_same_grid(estimate.T, truth.T, "ise_intercept");
  if (estimate.values.size() != truth.values.size())
    throw std::invalid_argument("ise_intercept: dimension counts differ");
  const Eigen::MatrixXd w = trapezoid_2d(truth.t, truth.T);
  const double range = truth.t(truth.t.size() - 1) - truth.t(0);
  double total = 0.0;
  for (std::size_t p = 0; p < truth.values.size(); ++p)
    total += (estimate.values[p] - truth.values[p]).array().square().cwiseProduct(w.array()).sum();
  return total / range;
}

double ise_covariate(const Eigen::MatrixXd& estimate, const Eigen::MatrixXd& truth,
                     const Eigen::VectorXd& grid) {
  if (estimate.rows() != truth.rows() || estimate.cols() != truth.cols() ||
      truth.cols() != grid.size())
    throw std::invalid_argument("ise_covariate: grids differ");
  const double range = grid(grid.size() - 1) - grid(0);
  return ((estimate - truth).array().square().matrix() * trapezoid_weights(grid)).sum() / range;
}

std::map<std::string, double> ispe_ratio_by_subject(const ModelMetrics& model,
                                                    const ModelMetrics& reference) {
  auto means = [](const ModelMetrics& m) {
    std::map<std::string, std::pair<double, int>> acc;
    for (std::size_t i = 0; i < m.test_ispe.size(); ++i) {
      auto& a = acc[m.test_subjects[i]];
      a.first += m.test_ispe[i];
      ++a.second;
    }
    return acc;
  };
  const auto num = means(model), den = means(reference);
  std::map<std::string, double> out;
  for (const auto& [subject, a] : num) {
    const auto it = den.find(subject);
    if (it == den.end() || it->second.first <= 0) continue;
    out[subject] = (a.first / a.second) / (it->second.first / it->second.second);
  }
  return out;
}

void write_metrics_csv(const std::string& scenario, const std::vector<ReplicateMetrics>& rows,
                       std::ostream& out) {
  out << "scenario,replicate,model,ise_beta0,ise_beta1,ise_beta2,mean_ispe,fpca_s,fit_s,"
         "singular_count,K\n";
  for (const auto& r : rows)
    for (const auto& m : r.models) {
      out << scenario << ',' << r.replicate << ',' << m.model << ',';
      if (m.failed) {
        out << "NA,NA,NA,NA," << format_double(m.fpca_seconds) << ",NA,NA," << m.K << '\n';
        continue;
      }
      auto beta = [&](std::size_t a) {
        return a < m.ise_beta.size() ? format_double(m.ise_beta[a]) : std::string("NA");
      };
      out << format_double(m.ise_beta0) << ',' << beta(0) << ',' << beta(1) << ','
          << format_double(m.mean_ispe) << ',' << format_double(m.fpca_seconds) << ','
          << format_double(m.fit_seconds) << ',' << m.singular_count << ',' << m.K << '\n';
    }
}

Eigen::MatrixXd marginal_score_covariance(const GeneratorParams& params, int n_mc,
                                          std::uint64_t seed, int n_per_side) {
  if (n_mc < 1000) throw std::invalid_argument("marginal_score_covariance: n_mc must be >= 1000");
  const int K = params.K(), A = params.A();
  const Eigen::MatrixXd xi = eval_basis(xi_basis(params), linspace(0.0, 1.0, n_per_side));
  CounterRng rng(seed);
  Eigen::MatrixXd draws(n_mc, K);
  Eigen::VectorXd x(A);
  for (int i = 0; i < n_mc; ++i) {
    for (int a = 0; a < A; ++a) x(a) = draw_covariate(params.covariate_law[static_cast<std::size_t>(a)], rng);
    const auto l = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(n_per_side)));
    for (int k = 0; k < K; ++k) {
      const Eigen::VectorXd c = params.beta0.row(k).transpose() +
                                draw_diag_normal(params.Q_diag.row(k).transpose(), rng) +
                                draw_diag_normal(params.R_diag.row(k).transpose(), rng);
      draws(i, k) = xi.row(l).dot(c) + x.dot(params.betaA.row(k).transpose()) + std::sqrt(params.s(k)) * rng.normal();
    }
  }
  const Eigen::MatrixXd centered = draws.rowwise() - draws.colwise().mean();
  return centered.transpose() * centered / static_cast<double>(n_mc - 1);
}

Eigen::MatrixXd rotate_basis(const Eigen::MatrixXd& basis_coefs, const Eigen::MatrixXd& V) {
  if (V.rows() != basis_coefs.rows()) throw std::invalid_argument("rotate_basis: V must be K x K");
  return V.transpose() * basis_coefs;
}

RecoveryResult recovery_study(const GeneratorParams& base, RecoveryMode mode, int n_replicates,
                              const ScenarioConfig& scenario, std::uint64_t seed,
                              unsigned workers, int n_mc) {
  if (n_replicates < 2) throw std::invalid_argument("recovery_study needs >= 2 replicates");
  const GeneratorParams params = mode == RecoveryMode::zero_fixed ? without_fixed_effects(base) : base;
  const int K = params.K();
  const Eigen::MatrixXd W = block_gram(params.basis, params.P());
  const Eigen::MatrixXd& target = params.basis_coefs;

  std::vector<Eigen::MatrixXd> estimates(static_cast<std::size_t>(n_replicates));
  const CounterRng root(seed);
  parallel_for(estimates.size(), workers, [&](std::size_t r) {
    const GeneratedData data = generate_dataset(params, scenario, root.derive(r).next_u64());
    Eigen::MatrixXd est = pooled_mvfpca(data.train, params.basis, Truncation::by_k(K)).first.eig_coefs;
    for (int k = 0; k < est.rows(); ++k)
      if (est.row(k).dot(W * target.row(k).transpose()) < 0) est.row(k) *= -1;
    estimates[r] = est;
  });

  RecoveryResult out;
  out.generating = target;
  out.mean_estimated = Eigen::MatrixXd::Zero(K, target.cols());
  for (const auto& e : estimates) out.mean_estimated += e;
  out.mean_estimated /= n_replicates;

  out.score_covariance = marginal_score_covariance(params, n_mc, root.derive(~0ULL).next_u64(),
                                                   scenario.n_per_side);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(out.score_covariance);
  Eigen::MatrixXd V = eig.eigenvectors().rowwise().reverse();
  out.rotated = rotate_basis(target, V);
  for (int k = 0; k < K; ++k)
    if (out.rotated.row(k).dot(W * out.mean_estimated.row(k).transpose()) < 0) out.rotated.row(k) *= -1;

  auto errors = [&](const Eigen::MatrixXd& reference) {
    Eigen::VectorXd e(K);
    for (int k = 0; k < K; ++k) {
      const Eigen::VectorXd d = (out.mean_estimated.row(k) - reference.row(k)).transpose();
      e(k) = std::sqrt(std::max(0.0, d.dot(W * d)));
    }
    return e;
  };
  out.error_raw = errors(out.generating);
  out.error_rotated = errors(out.rotated);
  return out;
}

}  // namespace mvlfmm
