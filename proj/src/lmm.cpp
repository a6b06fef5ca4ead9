#include "mvlfmm/lmm.hpp"

#include "mvlfmm/numeric.hpp"
#include "mvlfmm/rng.hpp"

#include <boost/math/distributions/normal.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numbers>
#include <numeric>
#include <stdexcept>

namespace mvlfmm {

std::string to_string(CovStructure s) {
  return s == CovStructure::unstructured ? "unstructured" : "diagonal";
}

CovStructure parse_cov_structure(const std::string& text) {
  if (text == "unstructured") return CovStructure::unstructured;
  if (text == "diagonal") return CovStructure::diagonal;
  throw std::invalid_argument("unknown covariance structure '" + text + "'");
}

LongDesign build_design(const Eigen::VectorXd& scores_k, const std::vector<ObservationKey>& keys,
                        const CovariateTable& covariates,
                        const std::vector<std::string>& covariate_names,
                        const LongitudinalBasis& long_basis, int k) {
  const auto n = static_cast<Eigen::Index>(keys.size());
  if (scores_k.size() != n) throw std::invalid_argument("scores and keys differ in length");
  if (n == 0) throw DataError("empty design");
  LongDesign d;
  d.y = scores_k;
  Eigen::VectorXd T(n);
  for (Eigen::Index i = 0; i < n; ++i) T(i) = keys[static_cast<std::size_t>(i)].long_time;

  std::vector<int> cov_index;
  for (const auto& name : covariate_names) cov_index.push_back(covariates.index_of(name));
  const Eigen::MatrixXd xi = long_basis.fixed_design(T);
  const Eigen::Index D = xi.cols();
  d.X.resize(n, D + static_cast<Eigen::Index>(cov_index.size()));
  d.X.leftCols(D) = xi;
  for (Eigen::Index j = 0; j < D; ++j) d.x_names.push_back("xi" + std::to_string(j + 1));
  d.x_names.insert(d.x_names.end(), covariate_names.begin(), covariate_names.end());

  std::map<std::string, int> subject_index;
  std::map<std::pair<std::string, Side>, int> group_index;
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& key = keys[static_cast<std::size_t>(i)];
    const auto& row = covariates.row(key.subject_id, key.side);
    for (std::size_t a = 0; a < cov_index.size(); ++a)
      d.X(i, D + static_cast<Eigen::Index>(a)) = row(cov_index[a]);
    auto [sit, snew] = subject_index.try_emplace(key.subject_id, static_cast<int>(d.subject_ids.size()));
    if (snew) d.subject_ids.push_back(key.subject_id);
    auto [git, gnew] = group_index.try_emplace(key.group(), static_cast<int>(d.group_ids.size()));
    if (gnew) {
      d.group_ids.push_back(key.group());
      d.group_subject.push_back(sit->second);
    }
    d.subject.push_back(sit->second);
    d.group.push_back(git->second);
    d.stride.push_back(key.stride);
  }

  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(d.X);
  qr.setThreshold(1e-10);
  if (qr.rank() < d.X.cols()) throw DataError("rank-deficient fixed-effects design");
  d.Zu = long_basis.subject_design(k, T);
  d.Zv = long_basis.side_design(k, T);
  return d;
}

namespace {

int factor_params(int d, CovStructure s) {
  return s == CovStructure::diagonal ? d : d * (d + 1) / 2;
}

// Lower-triangular factor from its free parameters (column-major lower part).
Eigen::MatrixXd unpack_factor(const double* theta, int d, CovStructure s) {
  Eigen::MatrixXd l = Eigen::MatrixXd::Zero(d, d);
  int pos = 0;
  for (int j = 0; j < d; ++j) {
    if (s == CovStructure::diagonal) {
      l(j, j) = theta[pos++];
      continue;
    }
    for (int i = j; i < d; ++i) l(i, j) = theta[pos++];
  }
  return l;
}

void pack_factor(const Eigen::MatrixXd& l, CovStructure s, double* theta) {
  int pos = 0;
  for (Eigen::Index j = 0; j < l.cols(); ++j) {
    if (s == CovStructure::diagonal) {
      theta[pos++] = l(j, j);
      continue;
    }
    for (Eigen::Index i = j; i < l.rows(); ++i) theta[pos++] = l(i, j);
  }
}

// Flips factor columns so that every diagonal entry is non-negative.
Eigen::MatrixXd positive_diagonal(Eigen::MatrixXd l) {
  for (Eigen::Index j = 0; j < l.cols(); ++j)
    if (l(j, j) < 0) l.col(j) = -l.col(j);
  return l;
}

}  // namespace

struct RemlProblem::Work {
  // Scratch for subject blocks with a given number of sides.
  struct Shape {
    Eigen::MatrixXd zl;
    Eigen::MatrixXd a;
    Eigen::MatrixXd wb;
    Eigen::VectorXd wc;
  };
  Eigen::MatrixXd S;
  Eigen::VectorXd rhs;
  double cc = 0.0;
  double logdet = 0.0;
  std::vector<Shape> shapes;
};

RemlProblem::RemlProblem(const LongDesign& design, CovSpec covspec)
    : covspec_(covspec),
      du_(design.Du()),
      dv_(design.Dv()),
      p_(static_cast<int>(design.X.cols())),
      n_(design.n()),
      n_groups_(design.group_ids.size()) {
  if (n_ <= p_ + 1) throw DataError("too few observations for the fixed-effects design");
  n_theta_ = factor_params(du_, covspec.subject) + factor_params(dv_, covspec.side);
  xtx_ = design.X.transpose() * design.X;
  xty_ = design.X.transpose() * design.y;
  yty_ = design.y.squaredNorm();
  const Eigen::LLT<Eigen::MatrixXd> xtx_llt(xtx_);
  if (xtx_llt.info() != Eigen::Success) throw DataError("rank-deficient fixed-effects design");
  logdet_xtx_ = 2.0 * xtx_llt.matrixLLT().diagonal().array().log().sum();

  blocks_.resize(design.subject_ids.size());
  std::vector<std::vector<Eigen::Index>> rows(blocks_.size());
  for (Eigen::Index r = 0; r < n_; ++r) rows[static_cast<std::size_t>(design.subject[static_cast<std::size_t>(r)])].push_back(r);
  for (std::size_t g = 0; g < design.group_ids.size(); ++g)
    blocks_[static_cast<std::size_t>(design.group_subject[g])].groups.push_back(static_cast<int>(g));

  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    auto& b = blocks_[i];
    const int q = du_ + static_cast<int>(b.groups.size()) * dv_;
    Eigen::MatrixXd z = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(rows[i].size()), q);
    Eigen::MatrixXd x(z.rows(), p_);
    Eigen::VectorXd y(z.rows());
    for (std::size_t r = 0; r < rows[i].size(); ++r) {
      const Eigen::Index row = rows[i][r], rr = static_cast<Eigen::Index>(r);
      z.row(rr).head(du_) = design.Zu.row(row);
      const int g = design.group[static_cast<std::size_t>(row)];
      const auto slot = std::find(b.groups.begin(), b.groups.end(), g) - b.groups.begin();
      z.row(rr).segment(du_ + slot * dv_, dv_) = design.Zv.row(row);
      x.row(rr) = design.X.row(row);
      y(rr) = design.y(row);
    }
    b.ztz = z.transpose() * z;
    b.ztx = z.transpose() * x;
    b.zty = z.transpose() * y;
  }
}

Eigen::VectorXd RemlProblem::start() const {
  return theta_of(Eigen::MatrixXd::Identity(du_, du_), Eigen::MatrixXd::Identity(dv_, dv_));
}

std::pair<Eigen::MatrixXd, Eigen::MatrixXd> RemlProblem::factors(const Eigen::VectorXd& theta) const {
  const int nu = factor_params(du_, covspec_.subject);
  return {unpack_factor(theta.data(), du_, covspec_.subject),
          unpack_factor(theta.data() + nu, dv_, covspec_.side)};
}

Eigen::VectorXd RemlProblem::theta_of(const Eigen::MatrixXd& lambda_u,
                                      const Eigen::MatrixXd& lambda_v) const {
  Eigen::VectorXd theta(n_theta_);
  pack_factor(lambda_u, covspec_.subject, theta.data());
  pack_factor(lambda_v, covspec_.side, theta.data() + factor_params(du_, covspec_.subject));
  return theta;
}

namespace {

Eigen::MatrixXd block_factor(const Eigen::MatrixXd& lu, const Eigen::MatrixXd& lv, int sides) {
  const Eigen::Index du = lu.rows(), dv = lv.rows();
  Eigen::MatrixXd l = Eigen::MatrixXd::Zero(du + sides * dv, du + sides * dv);
  l.topLeftCorner(du, du) = lu;
  for (int s = 0; s < sides; ++s) l.block(du + s * dv, du + s * dv, dv, dv) = lv;
  return l;
}

}  // namespace

bool RemlProblem::accumulate(const Eigen::VectorXd& theta, Work& w) const {
  const auto [lu, lv] = factors(theta);
  w.S = xtx_;
  w.rhs = xty_;
  w.cc = 0.0;
  w.logdet = 0.0;
  for (const auto& b : blocks_) {
    const auto sides = b.groups.size();
    if (w.shapes.size() <= sides) w.shapes.resize(sides + 1);
    auto& sh = w.shapes[sides];
    // Lambda is block diagonal (subject factor, then one side factor per
    // side), so every product with it runs block by block.
    const Eigen::Index q = b.ztz.rows();
    sh.zl.resize(q, q);
    sh.a.resize(q, q);
    sh.wb.resize(q, b.ztx.cols());
    sh.wc.resize(q);
    for (Eigen::Index o = 0; o < q;) {
      const bool subj = o < du_;
      const Eigen::MatrixXd& f = subj ? lu : lv;
      const Eigen::Index m = f.rows();
      sh.zl.middleCols(o, m).noalias() = b.ztz.middleCols(o, m) * f;
      sh.wb.middleRows(o, m).noalias() = f.transpose() * b.ztx.middleRows(o, m);
      sh.wc.segment(o, m).noalias() = f.transpose() * b.zty.segment(o, m);
      o += m;
    }
    for (Eigen::Index o = 0; o < q;) {
      const Eigen::MatrixXd& f = o < du_ ? lu : lv;
      const Eigen::Index m = f.rows();
      sh.a.middleRows(o, m).noalias() = f.transpose() * sh.zl.middleRows(o, m);
      o += m;
    }
    sh.a.diagonal().array() += 1.0;
    const Eigen::LLT<Eigen::Ref<Eigen::MatrixXd>> llt(sh.a);
    if (llt.info() != Eigen::Success) return false;
    w.logdet += 2.0 * sh.a.diagonal().array().log().sum();
    llt.matrixL().solveInPlace(sh.wb);
    llt.matrixL().solveInPlace(sh.wc);
    w.S.noalias() -= sh.wb.transpose() * sh.wb;
    w.rhs.noalias() -= sh.wb.transpose() * sh.wc;
    w.cc += sh.wc.squaredNorm();
  }
  return true;
}

double RemlProblem::deviance(const Eigen::VectorXd& theta) const {
  constexpr double kInfeasible = std::numeric_limits<double>::max();
  Work w;
  if (!accumulate(theta, w)) return kInfeasible;
  const Eigen::LLT<Eigen::MatrixXd> llt(w.S);
  if (llt.info() != Eigen::Success) return kInfeasible;
  const Eigen::VectorXd beta = llt.solve(w.rhs);
  const double r2 = yty_ - w.cc - beta.dot(w.rhs);
  if (!(r2 > 0.0)) return kInfeasible;
  const double dof = static_cast<double>(n_ - p_);
  const double logdet_s = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
  // Error-contrast form: subtracting log|X'X| makes d invariant to
  // reparameterisations of the fixed effects.
  const double d = w.logdet + logdet_s - logdet_xtx_ + dof * (1.0 + std::log(2.0 * std::numbers::pi * r2 / dof));
  return std::isfinite(d) ? d : kInfeasible;
}

RemlProblem::Solution RemlProblem::solve(const Eigen::VectorXd& theta) const {
  Work w;
  if (!accumulate(theta, w)) throw std::runtime_error("REML solve failed: singular block system");
  const Eigen::LLT<Eigen::MatrixXd> llt(w.S);
  if (llt.info() != Eigen::Success) throw std::runtime_error("REML solve failed: singular Schur complement");
  Solution sol;
  sol.beta = llt.solve(w.rhs);
  const double r2 = yty_ - w.cc - sol.beta.dot(w.rhs);
  const double dof = static_cast<double>(n_ - p_);
  sol.s = r2 / dof;
  sol.beta_cov = sol.s * llt.solve(Eigen::MatrixXd::Identity(p_, p_));
  sol.deviance = deviance(theta);

  const auto [lu, lv] = factors(theta);
  sol.blups_u = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(blocks_.size()), du_);
  sol.blups_v = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n_groups_), dv_);
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const auto& b = blocks_[i];
    const Eigen::MatrixXd lambda = block_factor(lu, lv, static_cast<int>(b.groups.size()));
    Eigen::MatrixXd a = lambda.transpose() * b.ztz * lambda;
    a.diagonal().array() += 1.0;
    const Eigen::VectorXd u_tilde =
        a.llt().solve(lambda.transpose() * (b.zty - b.ztx * sol.beta));
    const Eigen::VectorXd effects = lambda * u_tilde;
    sol.blups_u.row(static_cast<Eigen::Index>(i)) = effects.head(du_).transpose();
    for (std::size_t s = 0; s < b.groups.size(); ++s)
      sol.blups_v.row(b.groups[s]) =
          effects.segment(du_ + static_cast<Eigen::Index>(s) * dv_, dv_).transpose();
  }
  return sol;
}

NelderMeadResult nelder_mead(const std::function<double(const Eigen::VectorXd&)>& f,
                             const Eigen::VectorXd& x0, double step, double ftol, double xtol,
                             int max_evals) {
  const Eigen::Index n = x0.size();
  NelderMeadResult res;
  if (n == 0) {
    res.x = x0;
    res.f = f(x0);
    res.evaluations = 1;
    res.converged = true;
    return res;
  }
  // Dimension-adaptive coefficients (Gao and Han).
  const double dn = static_cast<double>(n);
  const double alpha = 1.0, gamma = 1.0 + 2.0 / dn, rho = 0.75 - 1.0 / (2.0 * dn),
               sigma = 1.0 - 1.0 / dn;

  std::vector<Eigen::VectorXd> x(static_cast<std::size_t>(n + 1), x0);
  std::vector<double> fx(static_cast<std::size_t>(n + 1));
  for (Eigen::Index i = 0; i < n; ++i) x[static_cast<std::size_t>(i + 1)](i) += step;
  int evals = 0;
  auto eval = [&](const Eigen::VectorXd& p) {
    ++evals;
    return f(p);
  };
  for (std::size_t i = 0; i < x.size(); ++i) fx[i] = eval(x[i]);

  std::vector<std::size_t> order(x.size());
  while (true) {
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return fx[a] < fx[b]; });
    std::vector<Eigen::VectorXd> xs;
    std::vector<double> fs;
    for (auto o : order) {
      xs.push_back(x[o]);
      fs.push_back(fx[o]);
    }
    x = std::move(xs);
    fx = std::move(fs);

    const double fbest = fx.front(), fworst = fx.back();
    double xspread = 0.0;
    for (std::size_t i = 1; i < x.size(); ++i)
      xspread = std::max(xspread, (x[i] - x[0]).cwiseAbs().maxCoeff());
    const double xscale = std::max(1.0, x[0].cwiseAbs().maxCoeff());
    if (fworst - fbest <= ftol * std::max(1.0, std::abs(fbest)) && xspread <= xtol * xscale) {
      res.converged = true;
      break;
    }
    if (evals >= max_evals) break;

    const auto worst = static_cast<std::size_t>(n);
    Eigen::VectorXd centroid = Eigen::VectorXd::Zero(n);
    for (std::size_t i = 0; i < worst; ++i) centroid += x[i];
    centroid /= dn;

    const Eigen::VectorXd xr = centroid + alpha * (centroid - x[worst]);
    const double fr = eval(xr);
    if (fr < fx[0]) {
      const Eigen::VectorXd xe = centroid + gamma * (xr - centroid);
      const double fe = eval(xe);
      if (fe < fr) {
        x[worst] = xe;
        fx[worst] = fe;
      } else {
        x[worst] = xr;
        fx[worst] = fr;
      }
      continue;
    }
    if (fr < fx[worst - 1]) {
      x[worst] = xr;
      fx[worst] = fr;
      continue;
    }
    if (fr < fx[worst]) {
      const Eigen::VectorXd xc = centroid + rho * (xr - centroid);
      const double fc = eval(xc);
      if (fc <= fr) {
        x[worst] = xc;
        fx[worst] = fc;
        continue;
      }
    } else {
      const Eigen::VectorXd xc = centroid + rho * (x[worst] - centroid);
      const double fc = eval(xc);
      if (fc < fx[worst]) {
        x[worst] = xc;
        fx[worst] = fc;
        continue;
      }
    }
    for (std::size_t i = 1; i < x.size(); ++i) {
      x[i] = x[0] + sigma * (x[i] - x[0]);
      fx[i] = eval(x[i]);
    }
  }
  res.x = x[0];
  res.f = fx[0];
  res.evaluations = evals;
  return res;
}

namespace {

// Newton iterations on the stationarity condition. Near the optimum the
// deviance is flat to rounding, so Nelder-Mead stops up to ~1e-6 away in
// theta; the gradient (Richardson-extrapolated central differences) stays
// informative there. A step is kept when it shrinks the gradient without
// raising f beyond rounding.
NelderMeadResult newton_polish(const std::function<double(const Eigen::VectorXd&)>& f,
                               NelderMeadResult start, int max_steps = 12) {
  const Eigen::Index n = start.x.size();
  if (n == 0) return start;
  auto width = [](const Eigen::VectorXd& x, Eigen::Index i) {
    return 1e-3 * std::max(1.0, std::abs(x(i)));
  };
  auto gradient = [&](const Eigen::VectorXd& x) {
    Eigen::VectorXd g(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      auto central = [&](double h) {
        Eigen::VectorXd xp = x, xm = x;
        xp(i) += h;
        xm(i) -= h;
        return (f(xp) - f(xm)) / (2 * h);
      };
      const double h = width(x, i);
      g(i) = (4 * central(h / 2) - central(h)) / 3;
    }
    start.evaluations += 4 * static_cast<int>(n);
    return g;
  };
  auto hessian = [&](const Eigen::VectorXd& x, double fx) {
    Eigen::MatrixXd hess(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double hi = width(x, i);
      Eigen::VectorXd xp = x, xm = x;
      xp(i) += hi;
      xm(i) -= hi;
      hess(i, i) = (f(xp) - 2 * fx + f(xm)) / (hi * hi);
      for (Eigen::Index j = 0; j < i; ++j) {
        const double hj = width(x, j);
        Eigen::VectorXd xpp = xp, xpm = xp, xmp = xm, xmm = xm;
        xpp(j) += hj;
        xpm(j) -= hj;
        xmp(j) += hj;
        xmm(j) -= hj;
        hess(i, j) = hess(j, i) = (f(xpp) - f(xpm) - f(xmp) + f(xmm)) / (4 * hi * hj);
      }
    }
    start.evaluations += 2 * static_cast<int>(n * n);
    return hess;
  };

  const double slack = 1e-10 * std::max(1.0, std::abs(start.f));
  Eigen::VectorXd g = gradient(start.x);
  for (int it = 0; it < max_steps && g.allFinite(); ++it) {
    const Eigen::MatrixXd hess = hessian(start.x, start.f);
    if (!hess.allFinite()) break;
    double shift = 0.0;
    Eigen::LLT<Eigen::MatrixXd> llt;
    for (int k = 0; k < 30; ++k) {
      llt.compute(hess + shift * Eigen::MatrixXd::Identity(n, n));
      if (llt.info() == Eigen::Success) break;
      shift = shift == 0.0 ? 1e-6 * std::max(1.0, hess.diagonal().cwiseAbs().maxCoeff()) : 10 * shift;
    }
    if (llt.info() != Eigen::Success) break;
    Eigen::VectorXd step = -llt.solve(g);
    bool accepted = false;
    for (int half = 0; half < 12 && !accepted; ++half, step /= 2) {
      const Eigen::VectorXd trial = start.x + step;
      const double ft = f(trial);
      ++start.evaluations;
      if (!(ft <= start.f + slack)) continue;
      const Eigen::VectorXd gt = gradient(trial);
      if (!(gt.norm() < g.norm()) && !(ft < start.f - slack)) continue;
      start.x = trial;
      start.f = ft;
      g = gt;
      accepted = true;
    }
    if (!accepted || step.cwiseAbs().maxCoeff() < 1e-9 * std::max(1.0, start.x.cwiseAbs().maxCoeff()))
      break;
  }
  return start;
}

}  // namespace

ScoreLmmFit fit_reml(const LongDesign& design, const CovSpec& covspec, const LmmOptions& opts) {
  const RemlProblem problem(design, covspec);
  const auto objective = [&](const Eigen::VectorXd& theta) { return problem.deviance(theta); };
  constexpr double kStep = 0.25;
  // The criterion tolerance is opts.tol; vertices only need to be close
  // enough for the Newton polish to take over.
  constexpr double kVertexTol = 1e-4;

  ScoreLmmFit fit;
  fit.covspec = covspec;
  const Eigen::VectorXd x0 = problem.start();
  fit.start_deviances.push_back(problem.deviance(x0));
  NelderMeadResult best = nelder_mead(objective, x0, kStep, opts.tol, kVertexTol, opts.max_iter);
  int evaluations = best.evaluations;

  CounterRng rng(opts.seed);
  for (int r = 0; r < opts.n_restarts && problem.n_theta() > 0; ++r) {
    Eigen::VectorXd start = best.x;
    for (Eigen::Index i = 0; i < start.size(); ++i)
      start(i) += 0.5 * std::max(0.1, std::abs(start(i))) * rng.normal();
    fit.start_deviances.push_back(problem.deviance(start));
    const auto run = nelder_mead(objective, start, kStep, opts.tol, kVertexTol, opts.max_iter);
    evaluations += run.evaluations;
    if (run.f < best.f) best = run;
  }

  const int before_polish = best.evaluations;
  best = newton_polish(objective, best);
  evaluations += best.evaluations - before_polish;
  const auto sol = problem.solve(best.x);
  const auto [lu, lv] = problem.factors(best.x);
  fit.lambda_u = positive_diagonal(lu);
  fit.lambda_v = positive_diagonal(lv);
  fit.beta = sol.beta;
  fit.beta_cov = sol.beta_cov;
  fit.s = sol.s;
  fit.Q_star = sol.s * fit.lambda_u * fit.lambda_u.transpose();
  fit.R_star = sol.s * fit.lambda_v * fit.lambda_v.transpose();
  fit.blups_u = sol.blups_u;
  fit.blups_v = sol.blups_v;
  fit.subject_ids = design.subject_ids;
  fit.group_ids = design.group_ids;
  fit.x_names = design.x_names;
  fit.reml_deviance = best.f;
  fit.converged = best.converged;
  fit.evaluations = evaluations;
  fit.singular = detect_singular(fit, opts.singular_tol);
  return fit;
}

bool detect_singular(const ScoreLmmFit& fit, double tol) {
  if (!(fit.s > 0.0)) return true;
  for (const auto* m : {&fit.Q_star, &fit.R_star}) {
    if (m->size() == 0) continue;
    const Eigen::MatrixXd l = semidefinite_cholesky(Eigen::MatrixXd(*m / fit.s), 1e-14);
    if ((l.diagonal().array() < tol).any()) return true;
  }
  return false;
}

std::pair<Eigen::MatrixXd, Eigen::MatrixXd> compute_blups(const ScoreLmmFit& fit,
                                                          const LongDesign& design) {
  const RemlProblem problem(design, fit.covspec);
  const auto sol = problem.solve(problem.theta_of(fit.lambda_u, fit.lambda_v));
  return {sol.blups_u, sol.blups_v};
}

Eigen::VectorXd conditional_residuals(const ScoreLmmFit& fit, const LongDesign& design) {
  Eigen::VectorXd r = design.y - design.X * fit.beta;
  for (Eigen::Index i = 0; i < design.n(); ++i) {
    const auto s = static_cast<Eigen::Index>(design.subject[static_cast<std::size_t>(i)]);
    const auto g = static_cast<Eigen::Index>(design.group[static_cast<std::size_t>(i)]);
    if (design.Du() > 0) r(i) -= design.Zu.row(i).dot(fit.blups_u.row(s));
    if (design.Dv() > 0) r(i) -= design.Zv.row(i).dot(fit.blups_v.row(g));
  }
  return r;
}

QuantilePairs normal_qq(std::vector<double> sample) {
  QuantilePairs out;
  const std::size_t n = sample.size();
  if (n == 0) return out;
  std::sort(sample.begin(), sample.end());
  const double mean = std::accumulate(sample.begin(), sample.end(), 0.0) / static_cast<double>(n);
  double ss = 0.0;
  for (double v : sample) ss += (v - mean) * (v - mean);
  const double sd = n > 1 ? std::sqrt(ss / static_cast<double>(n - 1)) : 0.0;
  const boost::math::normal_distribution<double> normal;
  const double a = n <= 10 ? 3.0 / 8.0 : 0.5;  // plotting positions
  for (std::size_t i = 0; i < n; ++i) {
    const double p = (static_cast<double>(i + 1) - a) / (static_cast<double>(n) + 1.0 - 2.0 * a);
    out.theoretical.push_back(boost::math::quantile(normal, p));
    out.sample.push_back(sd > 0.0 ? (sample[i] - mean) / sd : 0.0);
  }
  return out;
}

ResidualDiagnostics residual_diagnostics(const ScoreLmmFit& fit, const LongDesign& design,
                                         int max_lag) {
  if (max_lag < 0) throw std::invalid_argument("max_lag must be >= 0");
  const Eigen::VectorXd r = conditional_residuals(fit, design);
  std::vector<std::vector<std::pair<int, double>>> seq(design.group_ids.size());
  for (Eigen::Index i = 0; i < design.n(); ++i) {
    const auto row = static_cast<std::size_t>(i);
    seq[static_cast<std::size_t>(design.group[row])].push_back({design.stride[row], r(i)});
  }
  std::size_t shortest = std::numeric_limits<std::size_t>::max();
  for (auto& s : seq) {
    std::sort(s.begin(), s.end());
    shortest = std::min(shortest, s.size());
  }

  ResidualDiagnostics diag;
  diag.max_lag = max_lag;
  if (static_cast<std::size_t>(max_lag) >= shortest) {
    diag.max_lag = static_cast<int>(shortest) - 1;
    diag.lag_truncated = true;
  }
  const double mean = r.mean();
  diag.acf = Eigen::VectorXd::Zero(diag.max_lag + 1);
  double denom = 0.0;
  for (const auto& s : seq)
    for (std::size_t t = 0; t < s.size(); ++t) {
      const double et = s[t].second - mean;
      denom += et * et;
      for (int h = 1; h <= diag.max_lag && t + static_cast<std::size_t>(h) < s.size(); ++h)
        diag.acf(h) += et * (s[t + static_cast<std::size_t>(h)].second - mean);
    }
  if (denom > 0.0) {
    diag.acf /= denom;
    diag.acf(0) = 1.0;
  }

  diag.residuals = normal_qq(std::vector<double>(r.data(), r.data() + r.size()));
  for (Eigen::Index c = 0; c < fit.blups_u.cols(); ++c) {
    const Eigen::VectorXd col = fit.blups_u.col(c);
    diag.blups_u.push_back(normal_qq(std::vector<double>(col.data(), col.data() + col.size())));
  }
  for (Eigen::Index c = 0; c < fit.blups_v.cols(); ++c) {
    const Eigen::VectorXd col = fit.blups_v.col(c);
    diag.blups_v.push_back(normal_qq(std::vector<double>(col.data(), col.data() + col.size())));
  }
  return diag;
}

}  // namespace mvlfmm
