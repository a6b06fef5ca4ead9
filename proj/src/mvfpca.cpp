#include "mvlfmm/mvfpca.hpp"

#include "mvlfmm/numeric.hpp"
#include "mvlfmm/parallel.hpp"
#include "mvlfmm/rng.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <stdexcept>

namespace mvlfmm {

namespace {

constexpr double kZeroEigenvalue = 1e-10;  // relative to the largest eigenvalue

int positive_count(const Eigen::VectorXd& eigenvalues) {
  if (eigenvalues.size() == 0) return 0;
  const double top = eigenvalues.maxCoeff();
  if (!(top > 0.0)) return 0;
  return static_cast<int>((eigenvalues.array() > kZeroEigenvalue * top).count());
}

// Flips v so that its entry of largest magnitude is positive.
void fix_sign(Eigen::Ref<Eigen::VectorXd> v) {
  Eigen::Index at = 0;
  v.cwiseAbs().maxCoeff(&at);
  if (v(at) < 0) v = -v;
}

Eigen::VectorXd grid_weights(const Eigen::VectorXd& grid, int dims) {
  const Eigen::VectorXd w = trapezoid_weights(grid);
  Eigen::VectorXd out(dims * grid.size());
  for (int p = 0; p < dims; ++p) out.segment(p * grid.size(), grid.size()) = w;
  return out;
}

void check_grid(const MvLongDataset& data, const MvFpcaModel& model) {
  const auto& g = model.mean.grid;
  if (data.grid.size() != g.size() || (data.grid - g).cwiseAbs().maxCoeff() > 1e-9)
    throw DataError("grid mismatch between dataset and mv-FPCA model");
  if (data.dims() != model.dims()) throw DataError("dimension mismatch with mv-FPCA model");
}

MvCurve mean_of_rows(const Eigen::MatrixXd& stacked, const std::vector<std::size_t>& rows,
                     const Eigen::VectorXd& grid, int dims) {
  Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(stacked.cols());
  for (auto r : rows) acc += stacked.row(static_cast<Eigen::Index>(r));
  acc /= static_cast<double>(rows.size());
  MvCurve mean;
  mean.grid = grid;
  mean.values.resize(dims, grid.size());
  for (int p = 0; p < dims; ++p) mean.values.row(p) = acc.segment(p * grid.size(), grid.size());
  return mean;
}

Eigen::MatrixXd take_rows(const Eigen::MatrixXd& m, const std::vector<std::size_t>& rows) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i)
    out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(rows[i]));
  return out;
}

struct HeldOutSums {
  double residual = 0.0;
  double total = 0.0;
};

// Fits on `train` rows and accumulates weighted squared errors on `held` rows.
HeldOutSums held_out_sums(const Eigen::MatrixXd& stacked, const Eigen::MatrixXd& coefs,
                          const Eigen::VectorXd& weights, const MvLongDataset& data,
                          const UnivariateBasis& basis, Truncation truncation,
                          const std::vector<std::size_t>& train,
                          const std::vector<std::size_t>& held) {
  const MvCurve mean = mean_of_rows(stacked, train, data.grid, data.dims());
  const MvFpcaModel model =
      pooled_mvfpca_from_coefficients(take_rows(coefs, train), mean, basis, truncation);
  const Eigen::MatrixXd psi = eval_eigenfunctions(model, data.grid);
  const Eigen::MatrixXd scores = scores_from_coefficients(take_rows(coefs, held), model);

  Eigen::RowVectorXd mean_row(stacked.cols());
  for (int p = 0; p < data.dims(); ++p)
    mean_row.segment(p * data.grid.size(), data.grid.size()) = mean.values.row(p);
  const Eigen::MatrixXd y = take_rows(stacked, held).rowwise() - mean_row;
  const Eigen::MatrixXd resid = y - scores * psi;
  HeldOutSums sums;
  sums.residual = (resid.array().square().rowwise() * weights.transpose().array()).sum();
  sums.total = (y.array().square().rowwise() * weights.transpose().array()).sum();
  return sums;
}

}  // namespace

int choose_K(const Eigen::VectorXd& eigenvalues, double pve_threshold) {
  if (eigenvalues.size() == 0) throw std::invalid_argument("choose_K: empty spectrum");
  if (!(pve_threshold > 0.0 && pve_threshold <= 1.0))
    throw std::invalid_argument("choose_K: threshold must lie in (0, 1]");
  const int positive = positive_count(eigenvalues);
  if (positive == 0) throw std::invalid_argument("choose_K: no positive eigenvalues");
  const double total = eigenvalues.head(positive).sum();
  double cum = 0.0;
  for (int k = 0; k < positive; ++k) {
    cum += eigenvalues(k);
    if (cum >= pve_threshold * total * (1.0 - 1e-12)) return k + 1;
  }
  return positive;
}

Eigen::MatrixXd block_gram(const UnivariateBasis& basis, int dims) {
  const Eigen::MatrixXd g = gram_matrix(basis);
  const Eigen::Index b = g.rows();
  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(dims * b, dims * b);
  for (int p = 0; p < dims; ++p) w.block(p * b, p * b, b, b) = g;
  return w;
}

Eigen::MatrixXd stacked_coefficients(const MvLongDataset& data, const UnivariateBasis& basis) {
  const auto per_dim = fit_coefficients(data, basis);
  const Eigen::Index b = basis.size();
  Eigen::MatrixXd out(static_cast<Eigen::Index>(data.size()), data.dims() * b);
  for (int p = 0; p < data.dims(); ++p) out.middleCols(p * b, b) = per_dim[p];
  return out;
}

MvFpcaModel pooled_mvfpca_from_coefficients(const Eigen::MatrixXd& coefs, const MvCurve& mean,
                                            const UnivariateBasis& basis, Truncation truncation) {
  const Eigen::Index n = coefs.rows();
  if (n < 2) throw DataError("mv-FPCA needs at least 2 observations");
  const int dims = static_cast<int>(mean.values.rows());
  MvFpcaModel model;
  model.mean = mean;
  model.basis = basis;
  model.n_obs = static_cast<std::size_t>(n);
  model.gram = block_gram(basis, dims);

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> wes(model.gram);
  const Eigen::VectorXd wev = wes.eigenvalues();
  if (wev.minCoeff() < -1e-12 * std::max(1.0, wev.maxCoeff()))
    throw std::invalid_argument("mv-FPCA: Gram matrix is not positive semidefinite");
  const Eigen::VectorXd floored = wev.cwiseMax(1e-12);
  const Eigen::MatrixXd w_half =
      wes.eigenvectors() * floored.cwiseSqrt().asDiagonal() * wes.eigenvectors().transpose();
  const Eigen::MatrixXd w_inv_half = wes.eigenvectors() *
                                     floored.cwiseSqrt().cwiseInverse().asDiagonal() *
                                     wes.eigenvectors().transpose();

  model.mean_coefs = coefs.colwise().mean().transpose();
  const Eigen::MatrixXd centered = coefs.rowwise() - model.mean_coefs.transpose();
  const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(n - 1);
  Eigen::MatrixXd sandwich = w_half * cov * w_half;
  sandwich = (sandwich + sandwich.transpose()) / 2;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sandwich);
  const Eigen::Index m = sandwich.rows();
  model.spectrum = es.eigenvalues().reverse().cwiseMax(0.0);
  const Eigen::MatrixXd vecs = es.eigenvectors().rowwise().reverse();

  const int positive = positive_count(model.spectrum);
  if (positive == 0) throw DataError("mv-FPCA: data have no variation");
  int k = truncation.k;
  if (k > 0) {
    if (k > m) throw std::invalid_argument("mv-FPCA: k exceeds the number of basis coefficients");
    k = std::min(k, positive);
  } else {
    k = choose_K(model.spectrum, truncation.pve);
  }

  const double total = model.spectrum.sum();
  model.eig_coefs.resize(k, m);
  model.eigenvalues = model.spectrum.head(k);
  model.pve.resize(k);
  double cum = 0.0;
  for (int j = 0; j < k; ++j) {
    Eigen::VectorXd c = w_inv_half * vecs.col(j);
    fix_sign(c);
    model.eig_coefs.row(j) = c.transpose();
    cum += model.spectrum(j);
    model.pve(j) = cum / total;
  }
  return model;
}

std::pair<MvFpcaModel, ScoreTable> pooled_mvfpca(const MvLongDataset& data,
                                                 const UnivariateBasis& basis,
                                                 Truncation truncation) {
  if (data.size() < 2) throw DataError("mv-FPCA needs at least 2 observations");
  const auto [mean, centered] = center_dataset(data);
  const Eigen::MatrixXd coefs = stacked_coefficients(data, basis);
  MvFpcaModel model = pooled_mvfpca_from_coefficients(coefs, mean, basis, truncation);
  ScoreTable table;
  table.scores = scores_from_coefficients(coefs, model);
  table.keys = data.keys;
  return {std::move(model), std::move(table)};
}

Eigen::MatrixXd scores_from_coefficients(const Eigen::MatrixXd& coefs, const MvFpcaModel& model) {
  const Eigen::MatrixXd centered = coefs.rowwise() - model.mean_coefs.transpose();
  return centered * model.gram * model.eig_coefs.transpose();
}

ScoreTable project_scores(const MvLongDataset& data, const MvFpcaModel& model) {
  check_grid(data, model);
  ScoreTable table;
  table.scores = scores_from_coefficients(stacked_coefficients(data, model.basis), model);
  table.keys = data.keys;
  return table;
}

Eigen::MatrixXd eval_eigenfunctions(const MvFpcaModel& model, const Eigen::VectorXd& t) {
  const Eigen::MatrixXd phi = eval_basis(model.basis, t);
  const Eigen::Index b = phi.cols(), g = t.size();
  Eigen::MatrixXd out(model.K(), model.dims() * g);
  for (int p = 0; p < model.dims(); ++p)
    out.middleCols(p * g, g) = model.eig_coefs.middleCols(p * b, b) * phi.transpose();
  return out;
}

std::vector<MvCurve> reconstruct_curves(const MvFpcaModel& model, const ScoreTable& scores) {
  if (scores.scores.cols() != model.K())
    throw std::invalid_argument("score width does not match the number of components");
  const Eigen::VectorXd& grid = model.mean.grid;
  const Eigen::Index g = grid.size();
  const Eigen::MatrixXd psi = eval_eigenfunctions(model, grid);
  const Eigen::MatrixXd fitted = scores.scores * psi;
  std::vector<MvCurve> out(static_cast<std::size_t>(scores.scores.rows()));
  for (Eigen::Index i = 0; i < scores.scores.rows(); ++i) {
    auto& c = out[static_cast<std::size_t>(i)];
    c.grid = grid;
    c.values = model.mean.values;
    for (int p = 0; p < model.dims(); ++p) c.values.row(p) += fitted.row(i).segment(p * g, g);
  }
  return out;
}

double grouped_cv_pve(const MvLongDataset& data, const UnivariateBasis& basis, int folds,
                      Truncation truncation, std::uint64_t seed, unsigned workers) {
  if (folds < 2) throw std::invalid_argument("grouped_cv_pve: folds must be >= 2");
  auto subjects = data.subjects();
  if (subjects.size() < static_cast<std::size_t>(folds))
    throw DataError("grouped_cv_pve: fewer subjects than folds");
  CounterRng rng(seed);
  shuffle(subjects, rng);
  std::map<std::string, int> fold_of;
  for (std::size_t i = 0; i < subjects.size(); ++i)
    fold_of[subjects[i]] = static_cast<int>(i % static_cast<std::size_t>(folds));

  const Eigen::MatrixXd stacked = data.stacked_values();
  const Eigen::MatrixXd coefs = stacked_coefficients(data, basis);
  const Eigen::VectorXd weights = grid_weights(data.grid, data.dims());
  std::vector<HeldOutSums> sums(static_cast<std::size_t>(folds));
  parallel_for(sums.size(), workers, [&](std::size_t f) {
    std::vector<std::size_t> train, held;
    for (std::size_t i = 0; i < data.size(); ++i)
      (fold_of.at(data.keys[i].subject_id) == static_cast<int>(f) ? held : train).push_back(i);
    sums[f] = held_out_sums(stacked, coefs, weights, data, basis, truncation, train, held);
  });
  double res = 0.0, tot = 0.0;
  for (const auto& s : sums) {
    res += s.residual;
    tot += s.total;
  }
  if (!(tot > 0.0)) throw DataError("grouped_cv_pve: held-out data have no variation");
  return 1.0 - res / tot;
}

WithinSubjectPve loso_within_subject_pve(const MvLongDataset& data, const UnivariateBasis& basis,
                                         Truncation truncation, unsigned workers) {
  const auto subjects = data.subjects();
  if (subjects.size() < 2) throw DataError("loso_within_subject_pve needs at least 2 subjects");
  const Eigen::MatrixXd stacked = data.stacked_values();
  const Eigen::MatrixXd coefs = stacked_coefficients(data, basis);
  const Eigen::VectorXd weights = grid_weights(data.grid, data.dims());

  std::vector<HeldOutSums> sums(subjects.size());
  parallel_for(subjects.size(), workers, [&](std::size_t s) {
    std::vector<std::size_t> train, held;
    for (std::size_t i = 0; i < data.size(); ++i)
      (data.keys[i].subject_id == subjects[s] ? held : train).push_back(i);
    sums[s] = held_out_sums(stacked, coefs, weights, data, basis, truncation, train, held);
  });

  WithinSubjectPve out;
  double acc = 0.0;
  for (std::size_t s = 0; s < subjects.size(); ++s) {
    const double scale = std::max(1.0, sums[s].residual);
    if (!(sums[s].total > 1e-14 * scale)) {
      out.excluded.push_back({subjects[s], "curves equal the leave-one-out mean"});
      continue;
    }
    const double pve = 1.0 - sums[s].residual / sums[s].total;
    out.subjects.push_back(subjects[s]);
    out.per_subject.push_back(pve);
    acc += pve;
  }
  if (out.per_subject.empty()) throw DataError("loso_within_subject_pve: every subject excluded");
  out.mean = acc / static_cast<double>(out.per_subject.size());
  return out;
}

namespace {

Eigen::MatrixXd ratio(const Eigen::MatrixXd& sum, const Eigen::MatrixXd& count) {
  Eigen::MatrixXd out(sum.rows(), sum.cols());
  for (Eigen::Index a = 0; a < sum.rows(); ++a)
    for (Eigen::Index b = 0; b < sum.cols(); ++b)
      out(a, b) = count(a, b) > 0 ? sum(a, b) / count(a, b) : std::numeric_limits<double>::quiet_NaN();
  return out;
}

// Weighted least-squares fit of a tensor-product cubic B-spline surface to
// binned moments (weights = pair counts, NaN cells ignored), evaluated back
// on the grid. The basis size sets the smoothness; a vanishing third-difference
// penalty only pins coefficients that no observed cell determines.
Eigen::MatrixXd smooth_surface(const Eigen::MatrixXd& raw, const Eigen::MatrixXd& count,
                               int n_basis) {
  const Eigen::Index g = raw.rows();
  const Eigen::MatrixXd b = eval_basis(bspline_basis(n_basis, 4, 0.0, 1.0), linspace(0.0, 1.0, static_cast<int>(g)));
  const Eigen::Index m = b.cols();
  std::vector<std::pair<Eigen::Index, Eigen::Index>> cells;
  double total_weight = 0.0;
  for (Eigen::Index a = 0; a < g; ++a)
    for (Eigen::Index c = 0; c < g; ++c)
      if (count(a, c) > 0.0 && !std::isnan(raw(a, c))) {
        cells.push_back({a, c});
        total_weight += count(a, c);
      }
  if (cells.empty()) return Eigen::MatrixXd::Zero(g, g);

  Eigen::MatrixXd d3 = Eigen::MatrixXd::Zero(m - 3, m);
  for (Eigen::Index i = 0; i + 3 < m; ++i) d3.row(i).segment(i, 4) << -1.0, 3.0, -3.0, 1.0;
  const Eigen::Index n_cells = static_cast<Eigen::Index>(cells.size());
  const Eigen::Index n_pen = 2 * (m - 3) * m;
  Eigen::MatrixXd design = Eigen::MatrixXd::Zero(n_cells + n_pen, m * m);
  Eigen::VectorXd target = Eigen::VectorXd::Zero(n_cells + n_pen);
  for (Eigen::Index r = 0; r < n_cells; ++r) {
    const auto [a, c] = cells[static_cast<std::size_t>(r)];
    const double sw = std::sqrt(count(a, c));
    for (Eigen::Index i = 0; i < m; ++i) design.row(r).segment(i * m, m) = sw * b(a, i) * b.row(c);
    target(r) = sw * raw(a, c);
  }
  // Coefficient (i, j) sits at column i * m + j; penalise third differences along both axes.
  const double root_lambda = std::sqrt(1e-12 * total_weight / static_cast<double>(g * g));
  Eigen::Index r = n_cells;
  for (Eigen::Index q = 0; q + 3 < m; ++q)
    for (Eigen::Index j = 0; j < m; ++j, ++r)
      for (Eigen::Index i = 0; i < m; ++i) design(r, i * m + j) = root_lambda * d3(q, i);
  for (Eigen::Index q = 0; q + 3 < m; ++q)
    for (Eigen::Index i = 0; i < m; ++i, ++r)
      for (Eigen::Index j = 0; j < m; ++j) design(r, i * m + j) = root_lambda * d3(q, j);
  const Eigen::VectorXd coef = design.colPivHouseholderQr().solve(target);
  const Eigen::MatrixXd c = Eigen::Map<const Eigen::MatrixXd>(coef.data(), m, m).transpose();
  const Eigen::MatrixXd k = b * c * b.transpose();
  return (k + k.transpose()) / 2;
}

MlFpcaLevel decompose_level(Eigen::MatrixXd k, double h, double pve) {
  k = (k + k.transpose()) / 2;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(k * h);
  const Eigen::VectorXd values = es.eigenvalues().reverse().cwiseMax(0.0);
  const Eigen::MatrixXd vectors = es.eigenvectors().rowwise().reverse();
  MlFpcaLevel level;
  const int keep = positive_count(values) == 0 ? 0 : choose_K(values, pve);
  level.values = values.head(keep);
  level.functions.resize(k.rows(), keep);
  for (int j = 0; j < keep; ++j) {
    Eigen::VectorXd v = vectors.col(j) / std::sqrt(h);
    fix_sign(v);
    level.functions.col(j) = v;
  }
  return level;
}

}  // namespace

MlFpcaBasis estimate_mlfpca_basis(const std::vector<Trajectory>& trajectories, double pve,
                                  int grid_size, int smooth_basis) {
  if (grid_size < 2) throw std::invalid_argument("estimate_mlfpca_basis: grid_size must be >= 2");
  if (smooth_basis < 4) throw std::invalid_argument("estimate_mlfpca_basis: smooth_basis must be >= 4");
  const Eigen::Index g = grid_size;
  const double h = 1.0 / static_cast<double>(grid_size - 1);

  struct Binned {
    Eigen::VectorXd sum, count, squares;
  };
  std::vector<std::string> order;
  std::map<std::string, std::vector<Binned>> by_subject;
  for (const auto& tr : trajectories) {
    if (tr.T.size() != tr.y.size()) throw DataError("trajectory T and y differ in length");
    Binned b{Eigen::VectorXd::Zero(g), Eigen::VectorXd::Zero(g), Eigen::VectorXd::Zero(g)};
    for (std::size_t i = 0; i < tr.T.size(); ++i) {
      if (tr.T[i] < -1e-12 || tr.T[i] > 1.0 + 1e-12)
        throw DataError("longitudinal time outside [0, 1] in ml-FPCA input");
      const auto bin = static_cast<Eigen::Index>(std::lround(std::clamp(tr.T[i], 0.0, 1.0) / h));
      b.sum(bin) += tr.y[i];
      b.count(bin) += 1.0;
      b.squares(bin) += tr.y[i] * tr.y[i];
    }
    auto [it, inserted] = by_subject.try_emplace(tr.subject_id);
    if (inserted) order.push_back(tr.subject_id);
    it->second.push_back(std::move(b));
  }

  Eigen::MatrixXd cross_sum = Eigen::MatrixXd::Zero(g, g), cross_count = cross_sum;
  Eigen::MatrixXd within_sum = cross_sum, within_count = cross_sum;
  Eigen::VectorXd diag_sum = Eigen::VectorXd::Zero(g), diag_count = diag_sum;
  MlFpcaBasis out;
  for (const auto& id : order) {
    const auto& sides = by_subject.at(id);
    for (const auto& b : sides) {
      within_sum += b.sum * b.sum.transpose();
      within_sum.diagonal() -= b.squares;
      within_count += b.count * b.count.transpose();
      within_count.diagonal() -= b.count;
      diag_sum += b.squares;
      diag_count += b.count;
    }
    if (sides.size() < 2) {
      out.skipped_subjects.push_back(id);
      continue;
    }
    for (std::size_t a = 0; a < sides.size(); ++a)
      for (std::size_t c = a + 1; c < sides.size(); ++c) {
        cross_sum += sides[a].sum * sides[c].sum.transpose() + sides[c].sum * sides[a].sum.transpose();
        cross_count +=
            sides[a].count * sides[c].count.transpose() + sides[c].count * sides[a].count.transpose();
      }
  }

  const Eigen::MatrixXd k_subject = smooth_surface(ratio(cross_sum, cross_count), cross_count, smooth_basis);
  const Eigen::MatrixXd k_total = smooth_surface(ratio(within_sum, within_count), within_count, smooth_basis);

  double deficit = 0.0;
  int bins = 0;
  for (Eigen::Index a = 0; a < g; ++a) {
    if (diag_count(a) <= 0) continue;
    deficit += diag_sum(a) / diag_count(a) - k_total(a, a);
    ++bins;
  }
  out.noise_var = bins > 0 ? std::max(0.0, deficit / bins) : 0.0;
  out.grid = linspace(0.0, 1.0, grid_size);
  out.subject_level = decompose_level(k_subject, h, pve);
  out.side_level = decompose_level(k_total - k_subject, h, pve);
  return out;
}

}  // namespace mvlfmm
