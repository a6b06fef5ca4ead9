#include "doctest.h"
#include "test_support.hpp"

#include "mvlfmm/basis.hpp"
#include "mvlfmm/numeric.hpp"

#include <cmath>

using namespace mvlfmm;

namespace {

// Brute-force Gram: trapezoid rule on a fine grid.
Eigen::MatrixXd trapezoid_gram(const UnivariateBasis& b, int n = 10001) {
  const Eigen::VectorXd x = linspace(b.lo, b.hi, n);
  const Eigen::VectorXd w = trapezoid_weights(x);
  const Eigen::MatrixXd phi = eval_basis(b, x);
  return phi.transpose() * w.asDiagonal() * phi;
}

double rel_err(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  return (a - b).cwiseAbs().maxCoeff() / b.cwiseAbs().maxCoeff();
}

}  // namespace

TEST_CASE("eval_basis: constant and Bernstein") {
  const auto c = constant_basis();
  CHECK(eval_basis(c, Eigen::VectorXd::Constant(1, 0.37))(0, 0) == 1.0);

  const auto bern = bspline_basis(4, 4, 0.0, 1.0);
  const Eigen::MatrixXd row = eval_basis(bern, Eigen::VectorXd::Constant(1, 0.5));
  REQUIRE(row.cols() == 4);
  CHECK(row(0, 0) == doctest::Approx(0.125).epsilon(1e-14));
  CHECK(row(0, 1) == doctest::Approx(0.375).epsilon(1e-14));
  CHECK(row(0, 2) == doctest::Approx(0.375).epsilon(1e-14));
  CHECK(row(0, 3) == doctest::Approx(0.125).epsilon(1e-14));
}

TEST_CASE("eval_basis: B-spline partition of unity and domain checks") {
  CounterRng rng(9);
  const auto b = bspline_basis(20, 4, 0.0, 100.0);
  Eigen::VectorXd x(50);
  for (int i = 0; i < 50; ++i) x(i) = 100.0 * rng.uniform();
  x(0) = 0.0;
  x(1) = 100.0;
  const Eigen::MatrixXd phi = eval_basis(b, x);
  CHECK((phi.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-12);
  CHECK(phi.minCoeff() >= 0.0);

  CHECK_NOTHROW(eval_basis(b, Eigen::VectorXd::Constant(1, 100.0 + 1e-11)));
  CHECK_THROWS_AS(eval_basis(b, Eigen::VectorXd::Constant(1, 100.001)), std::domain_error);
  CHECK_THROWS_AS(eval_basis(b, Eigen::VectorXd::Constant(1, -0.5)), std::domain_error);
}

TEST_CASE("eval_basis: B-spline derivatives match finite differences") {
  const auto b = bspline_basis(9, 4, 0.0, 1.0);
  const double h = 1e-5;
  for (double x : {0.13, 0.45, 0.77}) {
    Eigen::VectorXd p(3);
    p << x - h, x, x + h;
    const Eigen::MatrixXd v = eval_basis(b, p);
    const Eigen::MatrixXd d1 = eval_basis(b, p, 1);
    const Eigen::MatrixXd d2 = eval_basis(b, p, 2);
    CHECK(((v.row(2) - v.row(0)) / (2 * h) - d1.row(1)).cwiseAbs().maxCoeff() < 1e-5);
    CHECK(((d1.row(2) - d1.row(0)) / (2 * h) - d2.row(1)).cwiseAbs().maxCoeff() < 1e-4);
  }
}

TEST_CASE("ortho_poly_basis reproduces the closed forms on the 101 grid") {
  const auto b = ortho_poly_basis(2, 101);
  const Eigen::VectorXd grid = linspace(0.0, 1.0, 101);
  const Eigen::MatrixXd xi = eval_basis(b, grid);
  REQUIRE(xi.cols() == 3);
  CHECK(xi.col(0).isOnes());
  CHECK(std::abs(xi(50, 1)) < 1e-14);
  CHECK(xi(100, 1) == doctest::Approx(0.5 / std::sqrt(8.585)).epsilon(1e-12));
  CHECK(xi(50, 2) == doctest::Approx(-(8.585 / 101) / std::sqrt(0.5836083)).epsilon(1e-6));
  CHECK(xi(100, 1) == doctest::Approx(0.170648).epsilon(1e-5));
  // The rounded constants give -0.111265; -0.111278 is within the 1e-3 tolerance.
  CHECK(std::abs(xi(50, 2) - -0.111278) < 1e-3);

  const Eigen::MatrixXd cross = xi.transpose() * xi;
  Eigen::MatrixXd off = cross;
  off.diagonal().setZero();
  CHECK(off.cwiseAbs().maxCoeff() < 1e-10);
  CHECK(cross(1, 1) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(cross(2, 2) == doctest::Approx(1.0).epsilon(1e-12));

  for (int g = 0; g < 101; ++g) {
    const double t = grid(g);
    CHECK(std::abs(xi(g, 1) - (t - 0.5) / std::sqrt(8.585)) < 1e-3);
    CHECK(std::abs(xi(g, 2) - ((t - 0.5) * (t - 0.5) - 8.585 / 101) / std::sqrt(0.5836083)) < 1e-3);
  }

  // Analytic derivatives of the closed forms.
  Eigen::VectorXd p(1);
  p << 0.8;
  CHECK(eval_basis(b, p, 1)(0, 1) == doctest::Approx(1 / std::sqrt(8.585)).epsilon(1e-9));
  CHECK(eval_basis(b, p, 1)(0, 2) ==
        doctest::Approx(2 * (0.8 - 0.5) / std::sqrt(0.5836083)).epsilon(1e-6));
  CHECK(eval_basis(b, p, 2)(0, 2) == doctest::Approx(2 / std::sqrt(0.5836083)).epsilon(1e-6));
}

TEST_CASE("gram_matrix: closed forms, orthonormalisation and brute force") {
  CHECK(gram_matrix(constant_basis())(0, 0) == doctest::Approx(1.0).epsilon(1e-14));
  const auto bern = bspline_basis(4, 4, 0.0, 1.0);
  CHECK(gram_matrix(bern)(0, 0) == doctest::Approx(1.0 / 7.0).epsilon(1e-13));

  // The trapezoid reference itself has error O(h^2 / span^2): a fine 20-span
  // basis on [0, 100] needs the 100 001-point grid to reach 1e-6.
  const auto fine = bspline_basis(20, 4, 0.0, 100.0);
  CHECK(rel_err(gram_matrix(fine), trapezoid_gram(fine, 100001)) < 1e-6);

  for (const auto& b : {fine, bspline_basis(8, 4, 0.0, 100.0), natural_cubic_basis(4),
                        with_intercept(natural_cubic_basis(3)), ortho_poly_basis(3, 101),
                        bspline_basis(7, 3, -1.0, 2.0)}) {
    const Eigen::MatrixXd g = gram_matrix(b);
    CHECK((g - g.transpose()).cwiseAbs().maxCoeff() == 0.0);
    CHECK(Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(g).eigenvalues().minCoeff() > -1e-12);
    if (b.knots.size() != fine.knots.size()) CHECK(rel_err(g, trapezoid_gram(b)) < 1e-6);

    const auto on = orthonormalize(b);
    CHECK((gram_matrix(on) - Eigen::MatrixXd::Identity(b.size(), b.size())).cwiseAbs().maxCoeff() <
          1e-10);
  }
}

TEST_CASE("natural_cubic_basis") {
  const auto b = natural_cubic_basis(4);
  Eigen::VectorXd ends(2);
  ends << 0.0, 1.0;
  const Eigen::MatrixXd d2 = eval_basis(b, ends, 2);
  CHECK(d2.cwiseAbs().maxCoeff() < 1e-8);
  CHECK(eval_basis(b, linspace(0, 1, 101)).cols() == 4);
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(eval_basis(b, linspace(0, 1, 101)));
  CHECK(qr.rank() == 4);
  CHECK(with_intercept(b).size() == 5);

  // Linear functions are natural splines: the intercept-augmented basis spans them.
  const auto full = with_intercept(natural_cubic_basis(3));
  const Eigen::VectorXd grid = linspace(0, 1, 101);
  const Eigen::MatrixXd x = eval_basis(full, grid);
  const Eigen::VectorXd coef = x.colPivHouseholderQr().solve(grid);
  CHECK((x * coef - grid).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("fit_coefficients") {
  CounterRng rng(4);
  const auto b = bspline_basis(12, 4, 0.0, 100.0);

  SUBCASE("curve in the span is reproduced") {
    auto data = testing::toy_dataset(1, 1, 2, rng, 101);
    const Eigen::MatrixXd design = eval_basis(b, data.grid);
    for (auto& c : data.curves)
      for (int p = 0; p < 2; ++p) {
        Eigen::VectorXd coef(12);
        for (int j = 0; j < 12; ++j) coef(j) = rng.normal();
        c.values.row(p) = (design * coef).transpose();
      }
    const auto coefs = fit_coefficients(data, b);
    for (std::size_t i = 0; i < data.size(); ++i)
      for (int p = 0; p < 2; ++p) {
        const Eigen::RowVectorXd fitted = coefs[p].row(static_cast<Eigen::Index>(i)) * design.transpose();
        CHECK((fitted - data.curves[i].values.row(p)).cwiseAbs().maxCoeff() < 1e-9);
      }
  }
  SUBCASE("constant curve") {
    auto data = testing::toy_dataset(1, 1, 1, rng, 101);
    data.curves[0].values.setConstant(3.0);
    const auto coefs = fit_coefficients(data, b);
    const Eigen::RowVectorXd fitted = coefs[0].row(0) * eval_basis(b, data.grid).transpose();
    CHECK((fitted.array() - 3.0).abs().maxCoeff() < 1e-12);
  }
  SUBCASE("square design interpolates white noise") {
    auto data = testing::toy_dataset(1, 1, 1, rng, 15);
    const auto sq = bspline_basis(15, 4, 0.0, 100.0);
    const auto coefs = fit_coefficients(data, sq);
    const Eigen::RowVectorXd fitted = coefs[0].row(0) * eval_basis(sq, data.grid).transpose();
    CHECK((fitted - data.curves[0].values.row(0)).cwiseAbs().maxCoeff() < 1e-9);
  }
  SUBCASE("rank-deficient design is rejected") {
    auto data = testing::toy_dataset(1, 1, 1, rng, 5);
    CHECK_THROWS(fit_coefficients(data, b));
  }
}
