#include "doctest.h"
#include "test_support.hpp"

#include "mvlfmm/mvfpca.hpp"

#include <cmath>

using namespace mvlfmm;

namespace {

// Generator of exactly rank-R data: R W-orthonormal coefficient vectors,
// independent scores with variances 10, 9, ..., and a smooth mean.
struct FiniteRank {
  UnivariateBasis basis;
  Eigen::MatrixXd psi_coefs;  // R x P*B
  MvLongDataset data;
};

FiniteRank finite_rank_data(int rank, int subjects, int strides, int dims, std::uint64_t seed) {
  CounterRng rng(seed);
  FiniteRank fr;
  fr.basis = bspline_basis(15, 4, 0.0, 100.0);
  fr.data = testing::toy_dataset(subjects, strides, dims, rng, 101);
  const int b = fr.basis.size();
  const Eigen::MatrixXd w = block_gram(fr.basis, dims);
  Eigen::MatrixXd c(dims * b, rank);
  for (Eigen::Index i = 0; i < c.size(); ++i) c.data()[i] = rng.normal();
  for (int k = 0; k < rank; ++k) {  // Gram-Schmidt in the W inner product
    for (int j = 0; j < k; ++j) c.col(k) -= c.col(j).dot(w * c.col(k)) * c.col(j);
    c.col(k) /= std::sqrt(c.col(k).dot(w * c.col(k)));
  }
  fr.psi_coefs = c.transpose();
  const Eigen::MatrixXd phi = eval_basis(fr.basis, fr.data.grid);
  for (auto& curve : fr.data.curves) {
    Eigen::VectorXd coef = Eigen::VectorXd::Zero(dims * b);
    for (int k = 0; k < rank; ++k) coef += std::sqrt(10.0 - k) * rng.normal() * c.col(k);
    for (int p = 0; p < dims; ++p)
      curve.values.row(p) = (phi * coef.segment(p * b, b)).transpose() +
                            Eigen::RowVectorXd::LinSpaced(101, 1.0 + p, 5.0 - p);
  }
  return fr;
}

double max_abs_diff(const std::vector<MvCurve>& a, const std::vector<MvCurve>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, (a[i].values - b[i].values).cwiseAbs().maxCoeff());
  return m;
}

double sample_variance(const Eigen::VectorXd& x) {
  const double mean = x.mean();
  return (x.array() - mean).square().sum() / static_cast<double>(x.size() - 1);
}

}  // namespace

TEST_CASE("choose_K") {
  Eigen::VectorXd ev(3);
  ev << 6, 3, 1;
  CHECK(choose_K(ev, 0.9) == 2);
  CHECK(choose_K(ev, 0.6) == 1);
  CHECK(choose_K(ev, 1.0) == 3);
  Eigen::VectorXd with_zeros(5);
  with_zeros << 6, 3, 1, 1e-18, 0;
  CHECK(choose_K(with_zeros, 1.0) == 3);
  CHECK(choose_K(Eigen::VectorXd::Constant(1, 10.0), 0.5) == 1);
  CHECK_THROWS(choose_K(Eigen::VectorXd(), 0.5));
}

TEST_CASE("pooled_mvfpca on exact rank-10 data") {
  const auto fr = finite_rank_data(10, 10, 4, 3, 21);
  const auto [model, table] = pooled_mvfpca(fr.data, fr.basis, Truncation::by_k(10));
  REQUIRE(model.K() == 10);

  const Eigen::MatrixXd ortho = model.eig_coefs * model.gram * model.eig_coefs.transpose();
  CHECK((ortho - Eigen::MatrixXd::Identity(10, 10)).cwiseAbs().maxCoeff() < 1e-8);
  for (int k = 1; k < 10; ++k) CHECK(model.eigenvalues(k) <= model.eigenvalues(k - 1));
  CHECK(model.eigenvalues.minCoeff() > 0);
  CHECK(std::abs(model.pve(9) - 1.0) < 1e-9);

  for (int k = 0; k < 10; ++k) {
    CHECK(std::abs(sample_variance(table.scores.col(k)) - model.eigenvalues(k)) <
          1e-8 * model.eigenvalues(k));
    CHECK(std::abs(table.scores.col(k).mean()) < 1e-8);
  }

  // The generating span is recovered: projecting generator functions onto
  // the estimated span loses nothing.
  const Eigen::MatrixXd cross = fr.psi_coefs * model.gram * model.eig_coefs.transpose();
  CHECK(((cross * cross.transpose()) - Eigen::MatrixXd::Identity(10, 10)).cwiseAbs().maxCoeff() <
        1e-8);

  CHECK(max_abs_diff(reconstruct_curves(model, table), fr.data.curves) < 1e-7);

  const auto by_pve = pooled_mvfpca(fr.data, fr.basis, Truncation::by_pve(1.0));
  CHECK(by_pve.first.K() == 10);
}

TEST_CASE("pooled_mvfpca on a symmetric pair") {
  CounterRng rng(8);
  auto data = testing::toy_dataset(1, 1, 2, rng, 101);
  const auto basis = bspline_basis(10, 4, 0.0, 100.0);
  const Eigen::MatrixXd phi = eval_basis(basis, data.grid);
  Eigen::VectorXd c(20);
  for (int j = 0; j < 20; ++j) c(j) = rng.normal();
  for (int p = 0; p < 2; ++p) data.curves[0].values.row(p) = (phi * c.segment(p * 10, 10)).transpose();
  data.curves[1].values = -data.curves[0].values;

  const auto [model, table] = pooled_mvfpca(data, basis, Truncation::by_pve(0.995));
  REQUIRE(model.K() == 1);
  const Eigen::MatrixXd w = block_gram(basis, 2);
  const double norm = std::sqrt(c.dot(w * c));
  const Eigen::VectorXd expected = c / norm * (model.eig_coefs(0, 0) * c(0) > 0 ? 1.0 : -1.0);
  CHECK((model.eig_coefs.row(0).transpose() - expected).cwiseAbs().maxCoeff() < 1e-10);
  CHECK(std::abs(std::abs(table.scores(0, 0)) - norm) < 1e-9);
  CHECK(table.scores(1, 0) == doctest::Approx(-table.scores(0, 0)).epsilon(1e-12));
}

TEST_CASE("project_scores and reconstruct_curves") {
  const auto fr = finite_rank_data(4, 6, 3, 2, 5);
  const auto [model, table] = pooled_mvfpca(fr.data, fr.basis, Truncation::by_k(4));

  const auto again = project_scores(fr.data, model);
  CHECK((again.scores - table.scores).cwiseAbs().maxCoeff() < 1e-10);

  MvLongDataset probe = fr.data;
  probe.curves.resize(2);
  probe.keys.resize(2);
  probe.curves[0].values = model.mean.values;
  const Eigen::MatrixXd psi = eval_eigenfunctions(model, fr.data.grid);
  probe.curves[1].values = model.mean.values;
  for (int p = 0; p < 2; ++p)
    probe.curves[1].values.row(p) += std::sqrt(model.eigenvalues(0)) * psi.row(0).segment(p * 101, 101);
  const auto s = project_scores(probe, model);
  CHECK(s.scores.row(0).cwiseAbs().maxCoeff() < 1e-10);
  CHECK(s.scores(1, 0) == doctest::Approx(std::sqrt(model.eigenvalues(0))).epsilon(1e-10));
  CHECK(s.scores.row(1).tail(3).cwiseAbs().maxCoeff() < 1e-8);

  ScoreTable zero{Eigen::MatrixXd::Zero(1, 4), {fr.data.keys[0]}};
  CHECK((reconstruct_curves(model, zero)[0].values - model.mean.values).cwiseAbs().maxCoeff() == 0.0);
  ScoreTable unit{Eigen::MatrixXd::Zero(1, 4), {fr.data.keys[0]}};
  unit.scores(0, 0) = 1.0;
  const auto one = reconstruct_curves(model, unit)[0];
  for (int p = 0; p < 2; ++p)
    CHECK((one.values.row(p) - model.mean.values.row(p) - psi.row(0).segment(p * 101, 101))
              .cwiseAbs()
              .maxCoeff() < 1e-12);

  ScoreTable wrong{Eigen::MatrixXd::Zero(1, 3), {fr.data.keys[0]}};
  CHECK_THROWS(reconstruct_curves(model, wrong));

  MvLongDataset other = fr.data;
  other.grid(3) += 0.1;
  CHECK_THROWS_AS(project_scores(other, model), DataError);
}

TEST_CASE("eigen-sandwich equals plain PCA for one dimension and an orthonormal basis") {
  CounterRng rng(17);
  const auto basis = orthonormalize(bspline_basis(8, 4, 0.0, 100.0));
  auto data = testing::toy_dataset(5, 4, 1, rng, 101);
  const Eigen::MatrixXd phi = eval_basis(basis, data.grid);
  for (auto& c : data.curves) {
    Eigen::VectorXd coef(8);
    for (int j = 0; j < 8; ++j) coef(j) = (j + 1) * rng.normal();
    c.values.row(0) = (phi * coef).transpose();
  }
  const auto [model, table] = pooled_mvfpca(data, basis, Truncation::by_k(8));

  const Eigen::MatrixXd coefs = stacked_coefficients(data, basis);
  const Eigen::MatrixXd centered = coefs.rowwise() - coefs.colwise().mean();
  const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(coefs.rows() - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  for (int k = 0; k < 8; ++k) {
    CHECK(std::abs(model.eigenvalues(k) - es.eigenvalues()(7 - k)) < 1e-10 * es.eigenvalues()(7));
    const Eigen::VectorXd v = es.eigenvectors().col(7 - k);
    const double sign = v.dot(model.eig_coefs.row(k).transpose()) > 0 ? 1.0 : -1.0;
    CHECK((sign * v - model.eig_coefs.row(k).transpose()).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("grouped_cv_pve") {
  SUBCASE("finite-rank noiseless data") {
    const auto fr = finite_rank_data(5, 12, 3, 2, 31);
    CHECK(std::abs(grouped_cv_pve(fr.data, fr.basis, 4, Truncation::by_pve(1.0), 1) - 1.0) < 1e-9);
  }
  SUBCASE("one subject per fold is leave-one-subject-out pooling") {
    CounterRng rng(3);
    const auto data = testing::toy_dataset(6, 2, 2, rng, 41);
    const auto basis = bspline_basis(8, 4, 0.0, 100.0);
    const auto trunc = Truncation::by_k(2);
    const double a = grouped_cv_pve(data, basis, 6, trunc, 1);
    const double b = grouped_cv_pve(data, basis, 6, trunc, 99, 3);
    CHECK(a == doctest::Approx(b).epsilon(1e-13));

    // Independent path: pooled_mvfpca on each complement, trapezoid norms.
    const Eigen::VectorXd w = trapezoid_weights(data.grid);
    double res = 0.0, tot = 0.0;
    for (const auto& s : data.subjects()) {
      std::vector<std::size_t> train, held;
      for (std::size_t i = 0; i < data.size(); ++i)
        (data.keys[i].subject_id == s ? held : train).push_back(i);
      const auto [model, _] = pooled_mvfpca(subset(data, train), basis, trunc);
      const auto held_data = subset(data, held);
      const auto recon = reconstruct_curves(model, project_scores(held_data, model));
      for (std::size_t i = 0; i < held.size(); ++i)
        for (int p = 0; p < 2; ++p) {
          const Eigen::ArrayXd y = held_data.curves[i].values.row(p);
          const Eigen::ArrayXd r = y - recon[i].values.row(p).transpose().array();
          const Eigen::ArrayXd d = y - model.mean.values.row(p).transpose().array();
          res += (r.square() * w.array()).sum();
          tot += (d.square() * w.array()).sum();
        }
    }
    CHECK(a == doctest::Approx(1.0 - res / tot).epsilon(1e-10));
  }
  SUBCASE("isotropic noise: one component explains about 1/(P*B)") {
    CounterRng rng(12);
    const auto basis = orthonormalize(bspline_basis(5, 4, 0.0, 100.0));
    auto data = testing::toy_dataset(100, 5, 2, rng, 101);
    const Eigen::MatrixXd phi = eval_basis(basis, data.grid);
    for (auto& c : data.curves)
      for (int p = 0; p < 2; ++p) {
        Eigen::VectorXd coef(5);
        for (int j = 0; j < 5; ++j) coef(j) = rng.normal();
        c.values.row(p) = (phi * coef).transpose();
      }
    // Oracle: the held-out share of one direction under an isotropic law.
    const double pve = grouped_cv_pve(data, basis, 10, Truncation::by_k(1), 4);
    CHECK(std::abs(pve - 0.1) < 0.02);
  }
  SUBCASE("errors") {
    CounterRng rng(3);
    const auto data = testing::toy_dataset(3, 2, 1, rng, 41);
    const auto basis = bspline_basis(6, 4, 0.0, 100.0);
    CHECK_THROWS_AS(grouped_cv_pve(data, basis, 4, Truncation{}, 1), DataError);
    CHECK_THROWS(grouped_cv_pve(data, basis, 1, Truncation{}, 1));
  }
}

TEST_CASE("loso_within_subject_pve") {
  SUBCASE("noiseless finite-rank data") {
    const auto fr = finite_rank_data(4, 10, 3, 2, 41);
    const auto res = loso_within_subject_pve(fr.data, fr.basis, Truncation::by_pve(1.0));
    CHECK(std::abs(res.mean - 1.0) < 1e-9);
    CHECK(res.per_subject.size() == 10);
  }
  SUBCASE("two identical subjects reproduce the in-sample PVE") {
    CounterRng rng(6);
    auto data = testing::toy_dataset(2, 4, 2, rng, 41);
    const std::size_t half = data.size() / 2;
    for (std::size_t i = 0; i < half; ++i) data.curves[half + i] = data.curves[i];
    const auto basis = bspline_basis(8, 4, 0.0, 100.0);
    const auto trunc = Truncation::by_k(3);
    const auto res = loso_within_subject_pve(data, basis, trunc);

    std::vector<std::size_t> first(half);
    for (std::size_t i = 0; i < half; ++i) first[i] = i;
    const auto one = subset(data, first);
    const auto [model, table] = pooled_mvfpca(one, basis, trunc);
    const auto recon = reconstruct_curves(model, table);
    const Eigen::VectorXd w = trapezoid_weights(data.grid);
    double res_ss = 0.0, tot_ss = 0.0;
    for (std::size_t i = 0; i < half; ++i)
      for (int p = 0; p < 2; ++p) {
        const Eigen::ArrayXd y = one.curves[i].values.row(p);
        res_ss += ((y - recon[i].values.row(p).transpose().array()).square() * w.array()).sum();
        tot_ss += ((y - model.mean.values.row(p).transpose().array()).square() * w.array()).sum();
      }
    const double in_sample = 1.0 - res_ss / tot_ss;
    REQUIRE(res.per_subject.size() == 2);
    CHECK(std::abs(res.per_subject[0] - in_sample) < 1e-9);
    CHECK(std::abs(res.per_subject[1] - in_sample) < 1e-9);
    CHECK(std::abs(res.mean - in_sample) < 1e-9);
  }
}

namespace {

std::vector<double> repeated_grid(int nodes, int copies) {
  std::vector<double> t;
  for (int g = 0; g < nodes; ++g)
    for (int c = 0; c < copies; ++c) t.push_back(static_cast<double>(g) / (nodes - 1));
  return t;
}

}  // namespace

TEST_CASE("estimate_mlfpca_basis: exact two-level finite-rank trajectories") {
  // Subject level spans {1, T - 1/2}; side level spans the discrete-orthogonal
  // quadratic. Sides carry opposite side effects so every moment is exact.
  const auto poly = ortho_poly_basis(2, 41);
  CounterRng rng(2);
  std::vector<Trajectory> trajectories;
  const auto T = repeated_grid(41, 2);
  const Eigen::MatrixXd xi = eval_basis(poly, Eigen::Map<const Eigen::VectorXd>(T.data(), T.size()));
  for (int i = 0; i < 30; ++i) {
    const double u0 = 2 * rng.normal(), u1 = 5 * rng.normal(), v = 3 * rng.normal();
    for (Side side : {Side::left, Side::right}) {
      Trajectory tr{"s" + std::to_string(i), side, T, {}};
      const double sv = side == Side::left ? v : -v;
      for (std::size_t r = 0; r < T.size(); ++r)
        tr.y.push_back(u0 * xi(r, 0) + u1 * xi(r, 1) + sv * xi(r, 2));
      trajectories.push_back(tr);
    }
  }
  const auto ml = estimate_mlfpca_basis(trajectories, 1.0, 41);
  CHECK(ml.subject_level.values.size() == 2);
  CHECK(ml.side_level.values.size() == 1);
  CHECK(ml.noise_var < 1e-10);
  CHECK(ml.skipped_subjects.empty());
  const double h = 1.0 / 40;
  const Eigen::MatrixXd gram = h * ml.subject_level.functions.transpose() * ml.subject_level.functions;
  CHECK((gram - Eigen::MatrixXd::Identity(2, 2)).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("estimate_mlfpca_basis: Monte-Carlo oracles at N = 200") {
  // Random intercept at the subject level only, white noise within side.
  CounterRng rng(77);
  std::vector<Trajectory> trajectories;
  std::vector<double> T(20);
  for (int l = 0; l < 20; ++l) T[l] = l / 19.0;
  for (int i = 0; i < 200; ++i) {
    const double u = 2.0 * rng.normal();
    for (Side side : {Side::left, Side::right}) {
      Trajectory tr{"s" + std::to_string(i), side, T, {}};
      for (int l = 0; l < 20; ++l) tr.y.push_back(u + rng.normal());
      trajectories.push_back(tr);
    }
  }
  trajectories.push_back({"lonely", Side::left, T, std::vector<double>(20, 0.5)});
  const auto ml = estimate_mlfpca_basis(trajectories, 0.995, 41);
  REQUIRE(ml.subject_level.values.size() >= 1);
  const Eigen::VectorXd phi1 = ml.subject_level.functions.col(0);
  CHECK((phi1.array() - phi1.mean()).abs().maxCoeff() < 0.1);
  const double top_side = ml.side_level.values.size() ? ml.side_level.values(0) : 0.0;
  CHECK(top_side < 0.05 * ml.subject_level.values(0));
  CHECK(ml.subject_level.values(0) == doctest::Approx(4.0).epsilon(0.3));
  CHECK(ml.noise_var == doctest::Approx(1.0).epsilon(0.1));
  REQUIRE(ml.skipped_subjects.size() == 1);
  CHECK(ml.skipped_subjects[0] == "lonely");
}
