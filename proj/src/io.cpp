#include "mvlfmm/io.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace mvlfmm {

namespace {

using Json = nlohmann::ordered_json;
namespace fs = std::filesystem;

Json to_json(const Eigen::VectorXd& v) {
  Json out = Json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v(i));
  return out;
}

Json to_json(const Eigen::MatrixXd& m) {
  Json data = Json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    Json row = Json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    data.push_back(std::move(row));
  }
  return Json{{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::move(data)}};
}

Eigen::VectorXd vector_of(const Json& j) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v(static_cast<Eigen::Index>(i)) = j[i].get<double>();
  return v;
}

Eigen::MatrixXd matrix_of(const Json& j) {
  const auto rows = j.at("rows").get<Eigen::Index>(), cols = j.at("cols").get<Eigen::Index>();
  const Json& data = j.at("data");
  if (static_cast<Eigen::Index>(data.size()) != rows) throw DataError("matrix row count mismatch");
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const Json& row = data[static_cast<std::size_t>(i)];
    if (static_cast<Eigen::Index>(row.size()) != cols) throw DataError("matrix column count mismatch");
    for (Eigen::Index c = 0; c < cols; ++c) m(i, c) = row[static_cast<std::size_t>(c)].get<double>();
  }
  return m;
}

Json to_json(const UnivariateBasis& b) {
  return Json{{"kind", to_string(b.kind)},
              {"lo", b.lo},
              {"hi", b.hi},
              {"order", b.order},
              {"knots", to_json(b.knots)},
              {"transform", to_json(b.transform)},
              {"degree", b.degree},
              {"alpha", to_json(b.alpha)},
              {"norm2", to_json(b.norm2)},
              {"nodes", to_json(b.nodes)},
              {"table", to_json(b.table)},
              {"with_constant", b.with_constant},
              {"mix", to_json(b.mix)}};
}

UnivariateBasis basis_of(const Json& j) {
  UnivariateBasis b;
  b.kind = parse_basis_kind(j.at("kind").get<std::string>());
  b.lo = j.at("lo").get<double>();
  b.hi = j.at("hi").get<double>();
  b.order = j.at("order").get<int>();
  b.knots = vector_of(j.at("knots"));
  b.transform = matrix_of(j.at("transform"));
  b.degree = j.at("degree").get<int>();
  b.alpha = vector_of(j.at("alpha"));
  b.norm2 = vector_of(j.at("norm2"));
  b.nodes = vector_of(j.at("nodes"));
  b.table = matrix_of(j.at("table"));
  b.with_constant = j.at("with_constant").get<bool>();
  b.mix = matrix_of(j.at("mix"));
  return b;
}

Json to_json(const LongitudinalBasis& lb) {
  Json per_k = Json::array();
  for (const auto& [k, levels] : lb.per_k)
    per_k.push_back({{"k", k}, {"subject", to_json(levels.subject)}, {"side", to_json(levels.side)}});
  return Json{{"name", lb.name},
              {"basis", to_json(lb.basis)},
              {"subject_columns", lb.subject_columns},
              {"side_columns", lb.side_columns},
              {"per_k", std::move(per_k)}};
}

LongitudinalBasis long_basis_of(const Json& j) {
  LongitudinalBasis lb;
  lb.name = j.at("name").get<std::string>();
  lb.basis = basis_of(j.at("basis"));
  lb.subject_columns = j.at("subject_columns").get<std::vector<int>>();
  lb.side_columns = j.at("side_columns").get<std::vector<int>>();
  for (const auto& e : j.at("per_k"))
    lb.per_k[e.at("k").get<int>()] = {basis_of(e.at("subject")), basis_of(e.at("side"))};
  return lb;
}

Json to_json(const MvFpcaModel& m) {
  return Json{{"grid", to_json(m.mean.grid)},
              {"mean", to_json(m.mean.values)},
              {"basis", to_json(m.basis)},
              {"gram", to_json(m.gram)},
              {"mean_coefs", to_json(m.mean_coefs)},
              {"eig_coefs", to_json(m.eig_coefs)},
              {"eigenvalues", to_json(m.eigenvalues)},
              {"pve", to_json(m.pve)},
              {"spectrum", to_json(m.spectrum)},
              {"n_obs", m.n_obs}};
}

MvFpcaModel fpca_of(const Json& j) {
  MvFpcaModel m;
  m.mean.grid = vector_of(j.at("grid"));
  m.mean.values = matrix_of(j.at("mean"));
  m.basis = basis_of(j.at("basis"));
  m.gram = matrix_of(j.at("gram"));
  m.mean_coefs = vector_of(j.at("mean_coefs"));
  m.eig_coefs = matrix_of(j.at("eig_coefs"));
  m.eigenvalues = vector_of(j.at("eigenvalues"));
  m.pve = vector_of(j.at("pve"));
  m.spectrum = vector_of(j.at("spectrum"));
  m.n_obs = j.at("n_obs").get<std::size_t>();
  return m;
}

Json to_json(const ScoreLmmFit& f) {
  Json groups = Json::array();
  for (const auto& [subject, side] : f.group_ids) groups.push_back({subject, to_string(side)});
  Json se = Json::array();
  for (Eigen::Index i = 0; i < f.beta.size(); ++i) se.push_back(std::sqrt(std::max(0.0, f.beta_cov(i, i))));
  return Json{{"x_names", f.x_names},
              {"beta", to_json(f.beta)},
              {"beta_se", std::move(se)},
              {"beta_cov", to_json(f.beta_cov)},
              {"Q_star", to_json(f.Q_star)},
              {"R_star", to_json(f.R_star)},
              {"s", f.s},
              {"lambda_u", to_json(f.lambda_u)},
              {"lambda_v", to_json(f.lambda_v)},
              {"covspec", {{"subject", to_string(f.covspec.subject)}, {"side", to_string(f.covspec.side)}}},
              {"reml_deviance", f.reml_deviance},
              {"singular", f.singular},
              {"converged", f.converged},
              {"evaluations", f.evaluations},
              {"start_deviances", f.start_deviances},
              {"subject_ids", f.subject_ids},
              {"group_ids", std::move(groups)},
              {"blups_u", to_json(f.blups_u)},
              {"blups_v", to_json(f.blups_v)}};
}

ScoreLmmFit score_fit_of(const Json& j) {
  ScoreLmmFit f;
  f.x_names = j.at("x_names").get<std::vector<std::string>>();
  f.beta = vector_of(j.at("beta"));
  f.beta_cov = matrix_of(j.at("beta_cov"));
  f.Q_star = matrix_of(j.at("Q_star"));
  f.R_star = matrix_of(j.at("R_star"));
  f.s = j.at("s").get<double>();
  f.lambda_u = matrix_of(j.at("lambda_u"));
  f.lambda_v = matrix_of(j.at("lambda_v"));
  f.covspec.subject = parse_cov_structure(j.at("covspec").at("subject").get<std::string>());
  f.covspec.side = parse_cov_structure(j.at("covspec").at("side").get<std::string>());
  f.reml_deviance = j.at("reml_deviance").get<double>();
  f.singular = j.at("singular").get<bool>();
  f.converged = j.at("converged").get<bool>();
  f.evaluations = j.at("evaluations").get<int>();
  f.start_deviances = j.at("start_deviances").get<std::vector<double>>();
  f.subject_ids = j.at("subject_ids").get<std::vector<std::string>>();
  for (const auto& g : j.at("group_ids"))
    f.group_ids.emplace_back(g.at(0).get<std::string>(), parse_side(g.at(1).get<std::string>()));
  f.blups_u = matrix_of(j.at("blups_u"));
  f.blups_v = matrix_of(j.at("blups_v"));
  return f;
}

Json parse_json(const std::string& text, const std::string& what) {
  try {
    return Json::parse(text);
  } catch (const Json::exception& e) {
    throw DataError("malformed JSON in " + what + ": " + e.what());
  }
}

template <typename Fn>
auto guarded(const std::string& what, Fn&& fn) {
  try {
    return fn();
  } catch (const DataError&) {
    throw;
  } catch (const std::exception& e) {
    throw DataError("invalid " + what + ": " + e.what());
  }
}

std::string score_file(int k) {
  char name[32];
  std::snprintf(name, sizeof name, "k_%03d.json", k + 1);
  return name;
}

}  // namespace

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::string& path, const std::string& text) {
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << text;
}

void save_fit(const MvLfmmFit& fit, const std::string& dir) {
  write_text_file((fs::path(dir) / "fpca.json").string(), to_json(fit.fpca).dump(1) + "\n");
  for (int k = 0; k < fit.K(); ++k)
    write_text_file((fs::path(dir) / "fits" / score_file(k)).string(),
                    to_json(fit.fits[static_cast<std::size_t>(k)]).dump(1) + "\n");
  Json meta{{"K", fit.K()},
            {"covariate_names", fit.covariate_names},
            {"long_basis", to_json(fit.long_basis)},
            {"metadata", fit.metadata},
            {"fpca_seconds", fit.fpca_seconds},
            {"fit_seconds", fit.fit_seconds}};
  write_text_file((fs::path(dir) / "meta.json").string(), meta.dump(1) + "\n");
}

MvLfmmFit load_fit(const std::string& dir) {
  return guarded("fit bundle " + dir, [&] {
    MvLfmmFit fit;
    const Json meta = parse_json(read_text_file((fs::path(dir) / "meta.json").string()), "meta.json");
    fit.fpca = fpca_of(parse_json(read_text_file((fs::path(dir) / "fpca.json").string()), "fpca.json"));
    fit.covariate_names = meta.at("covariate_names").get<std::vector<std::string>>();
    fit.long_basis = long_basis_of(meta.at("long_basis"));
    fit.metadata = meta.at("metadata").get<std::map<std::string, std::string>>();
    fit.fpca_seconds = meta.at("fpca_seconds").get<double>();
    fit.fit_seconds = meta.at("fit_seconds").get<double>();
    const int K = meta.at("K").get<int>();
    if (K != fit.fpca.K()) throw DataError("meta.json K disagrees with fpca.json");
    for (int k = 0; k < K; ++k) {
      const std::string name = score_file(k);
      fit.fits.push_back(score_fit_of(parse_json(read_text_file((fs::path(dir) / "fits" / name).string()), name)));
    }
    return fit;
  });
}

std::string generator_params_to_json(const GeneratorParams& g) {
  Json laws = Json::array();
  for (std::size_t a = 0; a < g.covariate_law.size(); ++a) {
    const auto& law = g.covariate_law[a];
    Json e{{"name", g.covariate_names[a]}};
    if (law.kind == CovariateLaw::Kind::bernoulli) {
      e["law"] = "bernoulli";
      e["p"] = law.p;
    } else {
      e["law"] = "gaussian";
      e["mean"] = law.mean;
      e["sd"] = law.sd;
    }
    laws.push_back(std::move(e));
  }
  const Json j{{"dimensions", g.dim_names},
               {"grid", to_json(g.mean.grid)},
               {"mean", to_json(g.mean.values)},
               {"basis", to_json(g.basis)},
               {"basis_coefs", to_json(g.basis_coefs)},
               {"beta0", to_json(g.beta0)},
               {"betaA", to_json(g.betaA)},
               {"Q_diag", to_json(g.Q_diag)},
               {"R_diag", to_json(g.R_diag)},
               {"s", to_json(g.s)},
               {"covariates", std::move(laws)},
               {"noise", {{"l", g.noise_l}, {"sigma", g.noise_sigma}}},
               {"xi_grid_size", g.xi_grid_size},
               {"strength", g.strength}};
  return j.dump(1) + "\n";
}

GeneratorParams generator_params_from_json(const std::string& text) {
  return guarded("generator parameters", [&] {
    const Json j = parse_json(text, "generator parameters");
    GeneratorParams g;
    g.dim_names = j.at("dimensions").get<std::vector<std::string>>();
    g.mean.grid = vector_of(j.at("grid"));
    g.mean.values = matrix_of(j.at("mean"));
    g.basis = basis_of(j.at("basis"));
    g.basis_coefs = matrix_of(j.at("basis_coefs"));
    g.beta0 = matrix_of(j.at("beta0"));
    g.betaA = matrix_of(j.at("betaA"));
    g.Q_diag = matrix_of(j.at("Q_diag"));
    g.R_diag = matrix_of(j.at("R_diag"));
    g.s = vector_of(j.at("s"));
    for (const auto& e : j.at("covariates")) {
      g.covariate_names.push_back(e.at("name").get<std::string>());
      const auto law = e.at("law").get<std::string>();
      if (law == "bernoulli") {
        g.covariate_law.push_back(CovariateLaw::bernoulli(e.at("p").get<double>()));
      } else if (law == "gaussian") {
        g.covariate_law.push_back(CovariateLaw::gaussian(e.at("mean").get<double>(), e.at("sd").get<double>()));
      } else {
        throw DataError("unknown covariate law '" + law + "'");
      }
    }
    g.noise_l = j.at("noise").at("l").get<double>();
    g.noise_sigma = j.at("noise").at("sigma").get<double>();
    g.xi_grid_size = j.at("xi_grid_size").get<int>();
    g.strength = j.value("strength", 1.0);
    validate(g);
    return g;
  });
}

void save_generator_params(const GeneratorParams& params, const std::string& path) {
  write_text_file(path, generator_params_to_json(params));
}

GeneratorParams load_generator_params(const std::string& path) {
  return generator_params_from_json(read_text_file(path));
}

}  // namespace mvlfmm
