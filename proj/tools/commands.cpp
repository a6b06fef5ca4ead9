#include "commands.hpp"

#include "mvlfmm/io.hpp"
#include "mvlfmm/model.hpp"
#include "mvlfmm/numeric.hpp"
#include "mvlfmm/sim.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>
#include <tuple>

namespace mvlfmm::cli {

namespace fs = std::filesystem;

namespace {

constexpr int kSurfacePoints = 101;
constexpr int kCovariancePoints = 21;

CovStructure cov_structure(const Config& config, const std::string& key) {
  const auto text = config.get<std::string>(key, "unstructured");
  if (text == "unstructured") return CovStructure::unstructured;
  if (text == "diagonal") return CovStructure::diagonal;
  throw ConfigError("fit: " + key + " must be 'unstructured' or 'diagonal'");
}

LongitudinalBasis long_basis_for(const std::string& model, int n_spline, int degree) {
  if (model == "polynomial") return polynomial_long_basis(degree, kSurfacePoints);
  if (model == "naive") return naive_long_basis(n_spline);
  if (model == "spline") return spline_long_basis(n_spline);
  if (model == "mlfpca") return mlfpca_long_basis(n_spline);
  throw ConfigError("unknown model '" + model + "' (polynomial, naive, spline or mlfpca)");
}

struct Prepared {
  MvLongDataset train;
  MvLongDataset test;
  std::vector<Exclusion> excluded;
};

Prepared prepare(const MvLongDataset& raw, bool normalize, int holdout, std::uint64_t seed) {
  const MvLongDataset data = normalize ? normalize_long_time(raw) : raw;
  if (holdout <= 0) return {data, {}, {}};
  Split split = split_test(data, holdout, seed);
  if (split.train.size() == 0) throw DataError("no subject has enough strides for the holdout split");
  return {std::move(split.train), std::move(split.test), std::move(split.excluded)};
}

std::string meta_value(const MvLfmmFit& fit, const std::string& key) {
  const auto it = fit.metadata.find(key);
  if (it == fit.metadata.end()) throw DataError("fit bundle metadata lacks '" + key + "'");
  return it->second;
}

/// The training set a bundle was fitted on, rebuilt from the data files.
Prepared prepare_like(const MvLfmmFit& fit, const Config& config) {
  const MvLongDataset raw = load_dataset(config.path("curves"), config.path("covariates"));
  return prepare(raw, meta_value(fit, "normalize_time") == "true",
                 std::stoi(meta_value(fit, "holdout_per_side")),
                 std::stoull(meta_value(fit, "split_seed")));
}

Json exclusions_json(const std::vector<Exclusion>& excluded) {
  Json out = Json::array();
  for (const auto& e : excluded) out.push_back({{"subject_id", e.subject_id}, {"reason", e.reason}});
  return out;
}

void write_json(const fs::path& path, const Json& j) { write_file(path, j.dump(2) + "\n"); }

std::string curves_csv(const MvLongDataset& data) {
  std::ostringstream out;
  write_curves(data, out);
  return out.str();
}

/// Rows `term,dimension,t,estimate,lower_pw,upper_pw,lower_sim,upper_sim`.
void append_curve_rows(std::ostringstream& out, const std::string& term,
                       const std::vector<std::string>& dims, const CurveEstimate& c, double level,
                       const Band* sim) {
  const Eigen::Index G = c.grid.size();
  for (Eigen::Index p = 0; p < c.estimate.rows(); ++p) {
    const auto [lo, hi] = pointwise_band(c.estimate.row(p).transpose(), c.variance.row(p).transpose(), level);
    for (Eigen::Index g = 0; g < G; ++g) {
      out << term << ',' << dims[static_cast<std::size_t>(p)] << ',' << num(c.grid(g)) << ','
          << num(c.estimate(p, g)) << ',' << num(lo(g)) << ',' << num(hi(g)) << ',';
      if (sim) {
        out << num(sim->lower(p * G + g)) << ',' << num(sim->upper(p * G + g)) << '\n';
      } else {
        out << "NA,NA\n";
      }
    }
  }
}

constexpr const char* kCurveHeader = "term,dimension,t,estimate,lower_pw,upper_pw,lower_sim,upper_sim\n";

std::string fixed_effects_csv(const MvLfmmFit& fit, const std::vector<std::string>& dims, double level,
                              const std::vector<Band>* sim = nullptr) {
  std::ostringstream out;
  out << kCurveHeader;
  for (std::size_t a = 0; a < fit.covariate_names.size(); ++a)
    append_curve_rows(out, fit.covariate_names[a], dims, fixed_effect_curve(fit, static_cast<int>(a)), level,
                      sim ? &(*sim)[a] : nullptr);
  return out.str();
}

/// Full intercept function (mean included) on the model t grid and an
/// equally spaced T grid.
std::string intercept_surface_csv(const MvLfmmFit& fit, const std::vector<std::string>& dims) {
  const Eigen::VectorXd T = linspace(0.0, 1.0, kSurfacePoints);
  const Surface s = intercept_surface(fit, fit.fpca.mean.grid, T);
  std::ostringstream out;
  out << "dimension,t,T,estimate\n";
  for (std::size_t p = 0; p < s.values.size(); ++p)
    for (Eigen::Index g = 0; g < s.t.size(); ++g)
      for (Eigen::Index j = 0; j < T.size(); ++j)
        out << dims[p] << ',' << num(s.t(g)) << ',' << num(T(j)) << ','
            << num(s.values[p](g, j) + fit.fpca.mean.values(static_cast<Eigen::Index>(p), g)) << '\n';
  return out.str();
}

void write_residual_diagnostics(const fs::path& dir, const MvLfmmFit& fit, const MvLongDataset& train,
                                int max_lag) {
  const ScoreTable scores = project_scores(train, fit.fpca);
  std::ostringstream acf, qq;
  acf << "k,lag,acf\n";
  qq << "k,kind,column,theoretical,sample\n";
  auto qq_rows = [&](int k, const char* kind, std::size_t column, const QuantilePairs& q) {
    for (std::size_t i = 0; i < q.sample.size(); ++i)
      qq << k + 1 << ',' << kind << ',' << column + 1 << ',' << num(q.theoretical[i]) << ','
         << num(q.sample[i]) << '\n';
  };
  for (int k = 0; k < fit.K(); ++k) {
    const LongDesign design = score_design(fit, scores, train.covariates, k);
    const ResidualDiagnostics d = residual_diagnostics(fit.fits[static_cast<std::size_t>(k)], design, max_lag);
    for (Eigen::Index l = 0; l < d.acf.size(); ++l) acf << k + 1 << ',' << l << ',' << num(d.acf(l)) << '\n';
    qq_rows(k, "residual", 0, d.residuals);
    for (std::size_t c = 0; c < d.blups_u.size(); ++c) qq_rows(k, "blup_subject", c, d.blups_u[c]);
    for (std::size_t c = 0; c < d.blups_v.size(); ++c) qq_rows(k, "blup_side", c, d.blups_v[c]);
  }
  write_file(dir / "acf.csv", acf.str());
  write_file(dir / "qq.csv", qq.str());
}

Json fit_summary(const MvLfmmFit& fit, const MvLongDataset& train) {
  Json pve = Json::array();
  for (Eigen::Index k = 0; k < fit.fpca.pve.size(); ++k) pve.push_back(fit.fpca.pve(k));
  Json singular = Json::array();
  for (int k = 0; k < fit.K(); ++k)
    if (fit.fits[static_cast<std::size_t>(k)].singular) singular.push_back(k + 1);
  return Json{{"model", fit.metadata.count("model") ? fit.metadata.at("model") : fit.long_basis.name},
              {"K", fit.K()},
              {"pve", fit.K() > 0 ? fit.fpca.pve(fit.K() - 1) : 0.0},
              {"cumulative_pve", std::move(pve)},
              {"singular_count", fit.singular_count()},
              {"singular_scores", std::move(singular)},
              {"n_observations", train.size()},
              {"n_subjects", train.subjects().size()},
              {"covariates", fit.covariate_names}};
}

std::string singular_csv(const MvLfmmFit& fit) {
  std::ostringstream out;
  out << "k,singular,converged,reml_deviance,s,evaluations\n";
  for (int k = 0; k < fit.K(); ++k) {
    const auto& f = fit.fits[static_cast<std::size_t>(k)];
    out << k + 1 << ',' << (f.singular ? 1 : 0) << ',' << (f.converged ? 1 : 0) << ','
        << num(f.reml_deviance) << ',' << num(f.s) << ',' << f.evaluations << '\n';
  }
  return out.str();
}

// Parsed tidy curve rows: one P x G block per key.
struct CurveBlock {
  std::vector<std::string> dims;
  std::vector<std::vector<double>> t;
  std::vector<std::vector<double>> values;

  void add(const std::string& dim, double tt, double v) {
    auto it = std::find(dims.begin(), dims.end(), dim);
    std::size_t p = static_cast<std::size_t>(it - dims.begin());
    if (it == dims.end()) {
      dims.push_back(dim);
      t.emplace_back();
      values.emplace_back();
    }
    t[p].push_back(tt);
    values[p].push_back(v);
  }

  MvCurve curve(const std::string& what) const {
    MvCurve c;
    const std::size_t G = t.front().size();
    c.grid = Eigen::Map<const Eigen::VectorXd>(t.front().data(), static_cast<Eigen::Index>(G));
    c.values.resize(static_cast<Eigen::Index>(dims.size()), static_cast<Eigen::Index>(G));
    for (std::size_t p = 0; p < dims.size(); ++p) {
      if (t[p] != t.front()) throw DataError(what + ": dimensions do not share a t grid");
      for (std::size_t g = 0; g < G; ++g) c.values(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(g)) = values[p][g];
    }
    return c;
  }
};

int required_column(const CsvTable& table, const std::string& name, const std::string& file) {
  const int c = table.column(name);
  if (c < 0) throw DataError(file + ": line 1: missing column '" + name + "'");
  return c;
}

Json ispe_from_files(const std::string& predicted, const std::string& observed, std::ostringstream& out) {
  using Key = std::tuple<std::string, std::string, int>;
  auto load = [](const std::string& file) {
    const CsvTable table = read_csv(file);
    const int cs = required_column(table, "subject_id", file), cside = required_column(table, "side", file),
              cl = required_column(table, "stride", file), cd = required_column(table, "dimension", file),
              ct = required_column(table, "t", file), cv = required_column(table, "value", file);
    std::map<Key, CurveBlock> blocks;
    for (std::size_t r = 0; r < table.rows.size(); ++r) {
      const auto& f = table.rows[r];
      const int line = table.lines[r];
      const double stride = parse_number(f[static_cast<std::size_t>(cl)], line);
      blocks[{f[static_cast<std::size_t>(cs)], f[static_cast<std::size_t>(cside)], static_cast<int>(stride)}].add(
          f[static_cast<std::size_t>(cd)], parse_number(f[static_cast<std::size_t>(ct)], line),
          parse_number(f[static_cast<std::size_t>(cv)], line));
    }
    return blocks;
  };
  const auto pred = load(predicted), obs = load(observed);
  out << "subject_id,side,stride,ispe\n";
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& [key, block] : obs) {
    const auto it = pred.find(key);
    if (it == pred.end()) continue;
    const MvCurve o = block.curve(observed), p = it->second.curve(predicted);
    if (it->second.dims != block.dims) throw DataError("dimension names differ for subject " + std::get<0>(key));
    const double v = ispe(p, o);
    out << std::get<0>(key) << ',' << std::get<1>(key) << ',' << std::get<2>(key) << ',' << num(v) << '\n';
    total += v;
    ++n;
  }
  if (n == 0) throw DataError("no observation appears in both curve files");
  return Json{{"n_matched", n}, {"mean_ispe", total / static_cast<double>(n)}};
}

Json ise_from_files(const std::string& estimate, const std::string& truth, std::ostringstream& out) {
  const CsvTable est = read_csv(estimate), tru = read_csv(truth);
  const bool surface = est.column("T") >= 0;
  if (surface != (tru.column("T") >= 0)) throw DataError("cannot compare a surface with a curve file");
  // key: term for curves, T (as text) for surfaces.
  auto load = [surface](const CsvTable& table, const std::string& file) {
    const int ck = required_column(table, surface ? "T" : "term", file), cd = required_column(table, "dimension", file),
              ct = required_column(table, "t", file), cv = required_column(table, "estimate", file);
    std::vector<std::string> order;
    std::map<std::string, CurveBlock> blocks;
    for (std::size_t r = 0; r < table.rows.size(); ++r) {
      const auto& f = table.rows[r];
      const int line = table.lines[r];
      const std::string& key = f[static_cast<std::size_t>(ck)];
      if (!blocks.count(key)) order.push_back(key);
      blocks[key].add(f[static_cast<std::size_t>(cd)], parse_number(f[static_cast<std::size_t>(ct)], line),
                      parse_number(f[static_cast<std::size_t>(cv)], line));
    }
    return std::make_pair(order, blocks);
  };
  const auto [e_order, e_blocks] = load(est, estimate);
  const auto [t_order, t_blocks] = load(tru, truth);
  if (e_order.empty()) throw DataError(estimate + ": no rows");
  if (surface) {
    if (e_order != t_order) throw DataError("surface T grids differ");
    Surface a, b;
    a.T.resize(static_cast<Eigen::Index>(e_order.size()));
    for (std::size_t j = 0; j < e_order.size(); ++j) {
      a.T(static_cast<Eigen::Index>(j)) = parse_number(e_order[j], 0);
      const MvCurve ce = e_blocks.at(e_order[j]).curve(estimate), ct = t_blocks.at(e_order[j]).curve(truth);
      if (j == 0) {
        a.t = ce.grid;
        b.t = ct.grid;
        a.values.assign(static_cast<std::size_t>(ce.dims()), Eigen::MatrixXd(ce.points(), e_order.size()));
        b.values.assign(static_cast<std::size_t>(ct.dims()), Eigen::MatrixXd(ct.points(), e_order.size()));
      }
      if (ce.dims() != ct.dims() || ce.points() != ct.points()) throw DataError("surface grids differ");
      for (Eigen::Index p = 0; p < ce.dims(); ++p) {
        a.values[static_cast<std::size_t>(p)].col(static_cast<Eigen::Index>(j)) = ce.values.row(p).transpose();
        b.values[static_cast<std::size_t>(p)].col(static_cast<Eigen::Index>(j)) = ct.values.row(p).transpose();
      }
    }
    b.T = a.T;
    const double v = ise_intercept(a, b);
    out << "term,ise\nintercept," << num(v) << '\n';
    return Json{{"ise", {{"intercept", v}}}};
  }
  Json ise = Json::object();
  out << "term,ise\n";
  for (const auto& term : e_order) {
    const auto it = t_blocks.find(term);
    if (it == t_blocks.end()) continue;
    const MvCurve ce = e_blocks.at(term).curve(estimate), ct = it->second.curve(truth);
    if (ce.grid.size() != ct.grid.size() || (ce.grid - ct.grid).cwiseAbs().maxCoeff() > 1e-9 ||
        ce.dims() != ct.dims())
      throw DataError("grids differ for term " + term);
    const double v = ise_covariate(ce.values, ct.values, ce.grid);
    out << term << ',' << num(v) << '\n';
    ise[term] = v;
  }
  if (ise.empty()) throw DataError("no term appears in both effect files");
  return Json{{"ise", std::move(ise)}};
}

std::string coefficient_rows_csv(const UnivariateBasis& basis, const Eigen::VectorXd& grid,
                                 const std::vector<std::string>& dims, const RecoveryResult& r) {
  const Eigen::MatrixXd B = eval_basis(basis, grid);
  const Eigen::Index nb = B.cols();
  std::ostringstream out;
  out << "function,dimension,t,mean_estimated,generating,rotated\n";
  for (Eigen::Index k = 0; k < r.generating.rows(); ++k)
    for (std::size_t p = 0; p < dims.size(); ++p) {
      const Eigen::Index off = static_cast<Eigen::Index>(p) * nb;
      const Eigen::VectorXd est = B * r.mean_estimated.row(k).segment(off, nb).transpose();
      const Eigen::VectorXd gen = B * r.generating.row(k).segment(off, nb).transpose();
      const Eigen::VectorXd rot = B * r.rotated.row(k).segment(off, nb).transpose();
      for (Eigen::Index g = 0; g < grid.size(); ++g)
        out << k + 1 << ',' << dims[p] << ',' << num(grid(g)) << ',' << num(est(g)) << ',' << num(gen(g))
            << ',' << num(rot(g)) << '\n';
    }
  return out.str();
}

std::string replicate_dir(int r) {
  char name[32];
  std::snprintf(name, sizeof name, "replicate_%03d", r);
  return name;
}

void write_generated(const fs::path& dir, const GeneratorParams& params, const GeneratedData& data) {
  write_file(dir / "train_curves.csv", curves_csv(data.train));
  write_file(dir / "test_curves.csv", curves_csv(data.test));
  std::ostringstream cov;
  write_covariates(data.full.covariates, cov);
  write_file(dir / "covariates.csv", cov.str());

  std::ostringstream fx;
  fx << "term,dimension,t,estimate\n";
  const Eigen::VectorXd& grid = params.mean.grid;
  for (int a = 0; a < params.A(); ++a)
    for (int p = 0; p < params.P(); ++p)
      for (Eigen::Index g = 0; g < grid.size(); ++g)
        fx << params.covariate_names[static_cast<std::size_t>(a)] << ',' << params.dim_names[static_cast<std::size_t>(p)]
           << ',' << num(grid(g)) << ',' << num(data.truth.covariate_curves[static_cast<std::size_t>(a)](p, g)) << '\n';
  write_file(dir / "truth_fixed_effects.csv", fx.str());

  std::ostringstream ic;
  ic << "dimension,t,T,estimate\n";
  const Surface& s = data.truth.intercept;
  for (std::size_t p = 0; p < s.values.size(); ++p)
    for (Eigen::Index g = 0; g < s.t.size(); ++g)
      for (Eigen::Index j = 0; j < s.T.size(); ++j)
        ic << params.dim_names[p] << ',' << num(s.t(g)) << ',' << num(s.T(j)) << ',' << num(s.values[p](g, j)) << '\n';
  write_file(dir / "truth_intercept_surface.csv", ic.str());
}

}  // namespace

int cmd_fit(Config& config, const GlobalOptions& global) {
  const fs::path out(global.out);
  const MvLongDataset raw = load_dataset(config.path("curves"), config.path("covariates"));
  const bool normalize = config.get("normalize_time", true);
  const int holdout = config.get("holdout_per_side", 0);
  if (holdout < 0) throw ConfigError("fit: holdout_per_side must be >= 0");
  const Prepared data = prepare(raw, normalize, holdout, global.seed);

  const std::string model = config.get<std::string>("model", "spline");
  FitConfig fc;
  const int n_basis = config.get("fpca_basis_size", 20), order = config.get("fpca_order", 4);
  if (n_basis < order || order < 2) throw ConfigError("fit: need fpca_basis_size >= fpca_order >= 2");
  fc.fpca_basis = bspline_basis(n_basis, order, raw.grid(0), raw.grid(raw.grid.size() - 1));
  const int K = config.get("K", 0);
  const double pve = config.get("pve", 0.995);
  if (K < 0 || !(pve > 0.0 && pve <= 1.0)) throw ConfigError("fit: need K >= 0 and pve in (0, 1]");
  fc.truncation = K > 0 ? Truncation::by_k(K) : Truncation::by_pve(pve);
  fc.mlfpca_pve = pve;
  fc.long_basis = long_basis_for(model, config.get("n_spline", 3), config.get("polynomial_degree", 2));
  fc.covspec = {cov_structure(config, "covspec_subject"), cov_structure(config, "covspec_side")};
  fc.covariates = config.get<std::vector<std::string>>("covariate_names", raw.covariates.names);
  fc.lmm.n_restarts = config.get("lmm_restarts", 3);
  fc.lmm.seed = global.seed;
  fc.workers = global.workers;
  const double level = config.get("level", 0.95);
  if (!(level > 0.0 && level < 1.0)) throw ConfigError("fit: level must lie in (0, 1)");
  const int max_lag = config.get("max_lag", 5);
  if (max_lag < 1) throw ConfigError("fit: max_lag must be >= 1");

  MvLfmmFit fit;
  try {
    fit = fit_model(data.train, fc);
  } catch (const DataError&) {
    throw;
  } catch (const std::exception& e) {
    throw FitError(std::string("model fit failed: ") + e.what());
  }
  fit.metadata["model"] = model;
  fit.metadata["normalize_time"] = normalize ? "true" : "false";
  fit.metadata["holdout_per_side"] = std::to_string(holdout);
  fit.metadata["split_seed"] = std::to_string(global.seed);
  fit.metadata["level"] = format_double(level);
  std::string dim_names;
  for (const auto& d : data.train.dim_names) dim_names += (dim_names.empty() ? "" : ",") + d;
  fit.metadata["dim_names"] = dim_names;
  save_fit(fit, out.string());

  const auto& dims = data.train.dim_names;
  Json summary = fit_summary(fit, data.train);
  summary["excluded"] = exclusions_json(data.excluded);
  write_file(out / "fixed_effects.csv", fixed_effects_csv(fit, dims, level));
  {
    std::ostringstream lc;
    lc << kCurveHeader;
    const auto curves = longitudinal_coefficient_curves(fit);
    for (std::size_t d = 0; d < curves.size(); ++d)
      append_curve_rows(lc, "xi" + std::to_string(d + 1), dims, curves[d], level, nullptr);
    write_file(out / "longitudinal_coefficients.csv", lc.str());
  }
  write_file(out / "intercept_surface.csv", intercept_surface_csv(fit, dims));
  write_file(out / "singular.csv", singular_csv(fit));
  write_residual_diagnostics(out, fit, data.train, max_lag);

  if (holdout > 0) {
    MvLongDataset predicted = data.test;
    std::ostringstream per_obs;
    per_obs << "subject_id,side,stride,ispe\n";
    double total = 0.0;
    for (std::size_t i = 0; i < data.test.size(); ++i) {
      const ObservationKey& key = data.test.keys[i];
      const auto cov = covariate_values(fit, data.test.covariates, key.subject_id, key.side);
      predicted.curves[i] = predict_curve(fit, key, cov).curve;
      const double v = ispe(predicted.curves[i], data.test.curves[i]);
      total += v;
      per_obs << key.subject_id << ',' << to_string(key.side) << ',' << key.stride << ',' << num(v) << '\n';
    }
    write_file(out / "test_ispe.csv", per_obs.str());
    write_file(out / "test_observed.csv", curves_csv(data.test));
    write_file(out / "test_predicted.csv", curves_csv(predicted));
    summary["test"] = {{"n_observations", data.test.size()},
                       {"mean_ispe", data.test.size() ? total / static_cast<double>(data.test.size()) : 0.0}};
  }
  write_json(out / "summary.json", summary);
  return 0;
}

int cmd_simulate(Config& config, const GlobalOptions& global) {
  const fs::path out(global.out);
  GeneratorParams params = config.has("params") ? load_generator_params(config.path("params")) : reference_params();
  if (const auto target = config.optional_path("write_params")) save_generator_params(params, *target);

  ScenarioConfig sc;
  sc.name = config.get<std::string>("name", sc.name);
  sc.n_subjects = config.get("n_subjects", sc.n_subjects);
  sc.n_per_side = config.get("n_per_side", sc.n_per_side);
  sc.missing_prop = config.get("missing_prop", sc.missing_prop);
  sc.strength = config.get("strength", sc.strength);
  sc.models = config.get("models", sc.models);
  sc.pve = config.get("pve", sc.pve);
  sc.replicates = config.get("replicates", sc.replicates);
  sc.test_per_side = config.get("test_per_side", sc.test_per_side);
  sc.lmm_restarts = config.get("lmm_restarts", sc.lmm_restarts);
  sc.seed = global.seed;
  if (sc.strength < 1.0) throw ConfigError("simulate: strength must be >= 1");
  if (sc.replicates < 1 || sc.n_subjects < 2 || sc.n_per_side < 2)
    throw ConfigError("simulate: need replicates >= 1, n_subjects >= 2 and n_per_side >= 2");
  if (!(sc.missing_prop >= 0.0 && sc.missing_prop < 1.0)) throw ConfigError("simulate: missing_prop must lie in [0, 1)");
  for (const auto& m : sc.models) long_basis_for(m, 3, 2);
  if (sc.models.empty()) throw ConfigError("simulate: models must not be empty");

  const std::string study = config.get<std::string>("study", "metrics");
  Json summary{{"scenario", sc.name},
               {"study", study},
               {"seed", sc.seed},
               {"strength", sc.strength},
               {"strength_interpretation", "standard deviations of the non-constant random effects scaled by strength"},
               {"n_subjects", sc.n_subjects},
               {"n_per_side", sc.n_per_side},
               {"replicates", sc.replicates}};

  if (study == "recovery") {
    const std::string mode = config.require<std::string>("mode");
    RecoveryMode rm;
    if (mode == "zero_fixed") {
      rm = RecoveryMode::zero_fixed;
    } else if (mode == "with_fixed") {
      rm = RecoveryMode::with_fixed;
    } else {
      throw ConfigError("simulate: mode must be zero_fixed or with_fixed");
    }
    if (sc.replicates < 2) throw ConfigError("simulate: the recovery study needs replicates >= 2");
    const int n_mc = config.get("n_mc", 100000);
    if (n_mc < 1000) throw ConfigError("simulate: n_mc must be >= 1000");
    const RecoveryResult r = recovery_study(params, rm, sc.replicates, sc, sc.seed, global.workers, n_mc);
    write_file(out / "recovery_curves.csv", coefficient_rows_csv(params.basis, params.mean.grid, params.dim_names, r));
    std::ostringstream errs, cov;
    errs << "function,error_raw,error_rotated\n";
    for (Eigen::Index k = 0; k < r.error_raw.size(); ++k)
      errs << k + 1 << ',' << num(r.error_raw(k)) << ',' << num(r.error_rotated(k)) << '\n';
    cov << "row,col,value\n";
    for (Eigen::Index i = 0; i < r.score_covariance.rows(); ++i)
      for (Eigen::Index j = 0; j < r.score_covariance.cols(); ++j)
        cov << i + 1 << ',' << j + 1 << ',' << num(r.score_covariance(i, j)) << '\n';
    write_file(out / "recovery_errors.csv", errs.str());
    write_file(out / "score_covariance.csv", cov.str());
    summary["mode"] = mode;
    summary["n_mc"] = n_mc;
    summary["mean_error_raw"] = r.error_raw.mean();
    summary["mean_error_rotated"] = r.error_rotated.mean();
    summary["total_error_raw"] = r.error_raw.sum();
    summary["total_error_rotated"] = r.error_rotated.sum();
    write_json(out / "summary.json", summary);
    return 0;
  }
  if (study != "metrics") throw ConfigError("simulate: study must be metrics or recovery");

  if (config.get("write_datasets", false))
    for (int r = 0; r < sc.replicates; ++r)
      write_generated(out / replicate_dir(r), params, generate_dataset(params, sc, replicate_seed(sc, r)));

  const auto rows = run_scenario(params, sc, global.workers);
  std::ostringstream metrics;
  write_metrics_csv(sc.name, rows, metrics);
  write_file(out / "metrics.csv", metrics.str());

  const bool has_naive = std::find(sc.models.begin(), sc.models.end(), "naive") != sc.models.end();
  std::ostringstream ratio;
  ratio << "replicate,model,subject_id,ratio\n";
  Json per_model = Json::object();
  std::size_t failures = 0, attempts = 0;
  for (const auto& name : sc.models) {
    double ispe_sum = 0.0, ise0 = 0.0, singular = 0.0;
    std::vector<double> ise(static_cast<std::size_t>(params.A()), 0.0);
    int ok = 0, failed = 0;
    Json errors = Json::array();
    for (const auto& rep : rows) {
      const ModelMetrics& m = rep.model(name);
      ++attempts;
      if (m.failed) {
        ++failed;
        ++failures;
        errors.push_back({{"replicate", rep.replicate}, {"error", m.error}});
        continue;
      }
      ++ok;
      ispe_sum += m.mean_ispe;
      ise0 += m.ise_beta0;
      singular += m.singular_count;
      for (std::size_t a = 0; a < ise.size(); ++a) ise[a] += m.ise_beta[a];
      if (has_naive && name != "naive" && !rep.model("naive").failed)
        for (const auto& [subject, v] : ispe_ratio_by_subject(m, rep.model("naive")))
          ratio << rep.replicate << ',' << name << ',' << subject << ',' << num(v) << '\n';
    }
    const double n = ok > 0 ? ok : std::nan("");
    Json ise_json = Json::object();
    for (std::size_t a = 0; a < ise.size(); ++a) ise_json[params.covariate_names[a]] = ise[a] / n;
    per_model[name] = {{"fitted", ok},
                       {"failed", failed},
                       {"mean_ispe", ispe_sum / n},
                       {"mean_ise_beta0", ise0 / n},
                       {"mean_ise_beta", std::move(ise_json)},
                       {"mean_singular_count", singular / n},
                       {"errors", std::move(errors)}};
  }
  write_file(out / "ispe_ratio.csv", ratio.str());
  summary["models"] = std::move(per_model);
  write_json(out / "summary.json", summary);
  if (failures == attempts) throw FitError("every model fit failed in every replicate");
  return 0;
}

int cmd_predict(Config& config, const GlobalOptions& global) {
  const MvLfmmFit fit = load_fit(config.path("fit"));
  const std::string file = config.path("query");
  const CsvTable query = read_csv(file);
  const std::vector<std::string> dims = [&] {
    std::vector<std::string> d;
    const auto it = fit.metadata.find("dim_names");
    std::string names = it == fit.metadata.end() ? "" : it->second;
    std::stringstream ss(names);
    for (std::string part; std::getline(ss, part, ',');) d.push_back(part);
    if (static_cast<int>(d.size()) != fit.fpca.dims()) {
      d.clear();
      for (int p = 0; p < fit.fpca.dims(); ++p) d.push_back("d" + std::to_string(p + 1));
    }
    return d;
  }();
  const int cs = required_column(query, "subject_id", file), cside = required_column(query, "side", file),
            cT = required_column(query, "T", file);
  std::vector<int> ccov;
  for (const auto& name : fit.covariate_names) ccov.push_back(required_column(query, name, file));
  for (std::size_t c = 0; c < query.header.size(); ++c) {
    const auto& h = query.header[c];
    if (h != "subject_id" && h != "side" && h != "T" &&
        std::find(fit.covariate_names.begin(), fit.covariate_names.end(), h) == fit.covariate_names.end())
      throw DataError(file + ": line 1: unknown column '" + h + "'");
  }

  std::ostringstream out;
  out << "row,subject_id,side,T,population,side_seen,dimension,t,value\n";
  for (std::size_t r = 0; r < query.rows.size(); ++r) {
    const auto& f = query.rows[r];
    const int line = query.lines[r];
    try {
      ObservationKey key;
      key.subject_id = f[static_cast<std::size_t>(cs)];
      if (key.subject_id.empty()) throw DataError("empty subject_id");
      key.side = parse_side(f[static_cast<std::size_t>(cside)]);
      key.long_time = parse_number(f[static_cast<std::size_t>(cT)], line);
      std::map<std::string, double> cov;
      for (std::size_t a = 0; a < ccov.size(); ++a)
        cov[fit.covariate_names[a]] = parse_number(f[static_cast<std::size_t>(ccov[a])], line);
      const Prediction pred = predict_curve(fit, key, cov);
      for (Eigen::Index p = 0; p < pred.curve.dims(); ++p)
        for (Eigen::Index g = 0; g < pred.curve.points(); ++g)
          out << r + 1 << ',' << key.subject_id << ',' << to_string(key.side) << ',' << num(key.long_time) << ','
              << (pred.subject_seen ? 0 : 1) << ',' << (pred.side_seen ? 1 : 0) << ','
              << dims[static_cast<std::size_t>(p)] << ',' << num(pred.curve.grid(g)) << ','
              << num(pred.curve.values(p, g)) << '\n';
    } catch (const DataError& e) {
      const std::string msg = e.what();
      throw DataError(file + (msg.rfind("line ", 0) == 0 ? ": " : ": line " + std::to_string(line) + ": ") + msg);
    }
  }
  write_file(fs::path(global.out) / "predictions.csv", out.str());
  return 0;
}

int cmd_evaluate(Config& config, const GlobalOptions& global) {
  const fs::path out(global.out);
  const bool curves = config.has("predicted") || config.has("observed");
  const bool effects = config.has("estimate") || config.has("truth");
  if (curves == effects)
    throw ConfigError("evaluate: give either predicted + observed curve files or estimate + truth effect files");
  std::ostringstream table;
  Json result;
  if (curves) {
    result = ispe_from_files(config.path("predicted"), config.path("observed"), table);
    write_file(out / "ispe.csv", table.str());
  } else {
    result = ise_from_files(config.path("estimate"), config.path("truth"), table);
    write_file(out / "ise.csv", table.str());
  }
  write_json(out / "evaluate.json", result);
  return 0;
}

int cmd_bootstrap(Config& config, const GlobalOptions& global) {
  const fs::path out(global.out);
  const MvLfmmFit fit = load_fit(config.path("fit"));
  const Prepared data = prepare_like(fit, config);
  const int B = config.get("B", 200);
  const double level = config.get("level", 0.95);
  if (B < 2) throw ConfigError("bootstrap: B must be >= 2");
  if (!(level > 0.0 && level < 1.0)) throw ConfigError("bootstrap: level must lie in (0, 1)");
  FitConfig fc;
  fc.lmm.n_restarts = std::stoi(meta_value(fit, "lmm_restarts"));
  fc.lmm.seed = std::stoull(meta_value(fit, "lmm_seed"));
  fc.workers = global.workers;
  const BootstrapResult boot = bootstrap_fixed_effects(data.train, fit, fc, B, global.seed);
  if (boot.failed == boot.requested) throw FitError("every bootstrap replicate failed");

  std::vector<Band> bands;
  Json critical = Json::object();
  for (std::size_t a = 0; a < fit.covariate_names.size(); ++a) {
    const Eigen::MatrixXd est = fixed_effect_curve(fit, static_cast<int>(a)).estimate;
    Eigen::VectorXd flat(est.size());
    for (Eigen::Index p = 0; p < est.rows(); ++p) flat.segment(p * est.cols(), est.cols()) = est.row(p).transpose();
    bands.push_back(simultaneous_band(flat, boot.draws[a], level));
    critical[fit.covariate_names[a]] = bands.back().critical;
  }
  write_file(out / "fixed_effects.csv", fixed_effects_csv(fit, data.train.dim_names, level, &bands));
  write_json(out / "bootstrap.json", Json{{"requested", boot.requested},
                                          {"failed", boot.failed},
                                          {"failures", boot.failures},
                                          {"level", level},
                                          {"critical", std::move(critical)}});
  return 0;
}

int cmd_diagnose(Config& config, const GlobalOptions& global) {
  const fs::path out(global.out);
  const MvLfmmFit fit = load_fit(config.path("fit"));
  const Prepared data = prepare_like(fit, config);
  const int max_lag = config.get("max_lag", 5);
  const int folds = config.get("cv_folds", 5);
  if (max_lag < 1 || folds < 2) throw ConfigError("diagnose: need max_lag >= 1 and cv_folds >= 2");
  const MvLongDataset& train = data.train;
  write_residual_diagnostics(out, fit, train, max_lag);

  // Observed scores against their conditional fits.
  const ScoreTable scores = project_scores(train, fit.fpca);
  std::ostringstream traj;
  traj << "k,subject_id,side,stride,T,score,fitted\n";
  for (int k = 0; k < fit.K(); ++k) {
    const LongDesign design = score_design(fit, scores, train.covariates, k);
    const Eigen::VectorXd resid = conditional_residuals(fit.fits[static_cast<std::size_t>(k)], design);
    for (std::size_t i = 0; i < scores.keys.size(); ++i) {
      const auto& key = scores.keys[i];
      const auto r = static_cast<Eigen::Index>(i);
      traj << k + 1 << ',' << key.subject_id << ',' << to_string(key.side) << ',' << key.stride << ','
           << num(key.long_time) << ',' << num(design.y(r)) << ',' << num(design.y(r) - resid(r)) << '\n';
    }
  }
  write_file(out / "trajectories.csv", traj.str());

  std::ostringstream change;
  change << "subject_id,side,isd,overall_change\n";
  for (const auto& [subject, side] : fit.fits.front().group_ids) {
    const ChangeMetrics m = change_metrics(fit, subject, side);
    change << subject << ',' << to_string(side) << ',' << num(m.isd) << ',' << num(m.overall_change) << '\n';
  }
  write_file(out / "change_metrics.csv", change.str());

  // Covariance functions at mid-range longitudinal time.
  const Eigen::VectorXd& grid = fit.fpca.mean.grid;
  const Eigen::VectorXd t = linspace(grid(0), grid(grid.size() - 1), kCovariancePoints);
  std::ostringstream cov;
  cov << "level,dimension_row,dimension_col,t,t2,value\n";
  const std::pair<CovLevel, const char*> levels[] = {
      {CovLevel::subject, "subject"}, {CovLevel::side, "side"}, {CovLevel::error, "error"}};
  for (const auto& [level, name] : levels)
    for (Eigen::Index a = 0; a < t.size(); ++a)
      for (Eigen::Index b = 0; b < t.size(); ++b) {
        const Eigen::MatrixXd c = covariance_surface(fit, level, t(a), t(b), 0.5, 0.5);
        for (Eigen::Index p = 0; p < c.rows(); ++p)
          for (Eigen::Index q = 0; q < c.cols(); ++q)
            cov << name << ',' << train.dim_names[static_cast<std::size_t>(p)] << ','
                << train.dim_names[static_cast<std::size_t>(q)] << ',' << num(t(a)) << ',' << num(t(b)) << ','
                << num(c(p, q)) << '\n';
      }
  write_file(out / "covariance.csv", cov.str());

  std::ostringstream spectrum;
  spectrum << "component,eigenvalue,cumulative_pve\n";
  const Eigen::VectorXd& ev = fit.fpca.spectrum;
  const double total = ev.sum();
  double running = 0.0;
  for (Eigen::Index k = 0; k < ev.size(); ++k) {
    running += ev(k);
    spectrum << k + 1 << ',' << num(ev(k)) << ',' << num(total > 0 ? running / total : 0.0) << '\n';
  }
  write_file(out / "spectrum.csv", spectrum.str());

  const Truncation trunc = Truncation::by_k(fit.K());
  Json pve{{"K", fit.K()},
           {"in_sample", fit.K() > 0 ? fit.fpca.pve(fit.K() - 1) : 0.0},
           {"grouped_cv", grouped_cv_pve(train, fit.fpca.basis, folds, trunc, global.seed, global.workers)},
           {"cv_folds", folds}};
  if (config.get("within_subject", true)) {
    const WithinSubjectPve w = loso_within_subject_pve(train, fit.fpca.basis, trunc, global.workers);
    std::ostringstream per;
    per << "subject_id,pve\n";
    for (std::size_t i = 0; i < w.subjects.size(); ++i) per << w.subjects[i] << ',' << num(w.per_subject[i]) << '\n';
    write_file(out / "within_subject_pve.csv", per.str());
    pve["within_subject"] = {{"mean", w.mean}, {"centering", w.centering}, {"excluded", exclusions_json(w.excluded)}};
  }
  write_json(out / "pve.json", pve);
  return 0;
}

}  // namespace mvlfmm::cli
