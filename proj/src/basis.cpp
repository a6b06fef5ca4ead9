#include "mvlfmm/basis.hpp"

#include "mvlfmm/numeric.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mvlfmm {

std::string to_string(BasisKind kind) {
  switch (kind) {
    case BasisKind::constant: return "constant";
    case BasisKind::bspline: return "bspline";
    case BasisKind::natural_cubic: return "natural_cubic";
    case BasisKind::ortho_poly: return "ortho_poly";
    case BasisKind::tabulated: return "tabulated";
  }
  return "unknown";
}

BasisKind parse_basis_kind(const std::string& text) {
  for (auto k : {BasisKind::constant, BasisKind::bspline, BasisKind::natural_cubic,
                 BasisKind::ortho_poly, BasisKind::tabulated})
    if (to_string(k) == text) return k;
  throw std::invalid_argument("unknown basis kind '" + text + "'");
}

int UnivariateBasis::raw_size() const {
  switch (kind) {
    case BasisKind::constant: return 1;
    case BasisKind::bspline: return static_cast<int>(knots.size()) - order;
    case BasisKind::natural_cubic: return static_cast<int>(transform.cols());
    case BasisKind::ortho_poly: return degree + 1;
    case BasisKind::tabulated: return static_cast<int>(table.cols());
  }
  return 0;
}

int UnivariateBasis::size() const {
  if (mix.size() > 0) return static_cast<int>(mix.cols());
  return raw_size() + (with_constant ? 1 : 0);
}

namespace {

Eigen::VectorXd clamped_knots(int n_basis, int order, double lo, double hi) {
  const int n_interior = n_basis - order;
  Eigen::VectorXd knots(n_basis + order);
  for (int i = 0; i < order; ++i) {
    knots(i) = lo;
    knots(n_basis + i) = hi;
  }
  for (int j = 1; j <= n_interior; ++j) knots(order - 1 + j) = lo + (hi - lo) * j / (n_interior + 1);
  return knots;
}

// Values and derivatives (up to `deriv`) of all B-splines at x; the rows of
// the returned matrix are derivative orders, columns the basis functions.
// Follows the triangular-table derivative scheme of de Boor / Piegl-Tiller.
Eigen::MatrixXd bspline_derivatives(const Eigen::VectorXd& knots, int order, double x, int deriv) {
  const int p = order - 1;
  const int n = static_cast<int>(knots.size()) - order;
  int span = p;
  if (x >= knots(n)) {
    span = n - 1;
  } else {
    span = static_cast<int>(std::upper_bound(knots.data() + p, knots.data() + n + 1, x) - knots.data()) - 1;
  }
  span = std::clamp(span, p, n - 1);

  Eigen::MatrixXd ndu(p + 1, p + 1);
  Eigen::VectorXd left(p + 1), right(p + 1);
  ndu(0, 0) = 1.0;
  for (int j = 1; j <= p; ++j) {
    left(j) = x - knots(span + 1 - j);
    right(j) = knots(span + j) - x;
    double saved = 0.0;
    for (int r = 0; r < j; ++r) {
      ndu(j, r) = right(r + 1) + left(j - r);
      const double temp = ndu(r, j - 1) / ndu(j, r);
      ndu(r, j) = saved + right(r + 1) * temp;
      saved = left(j - r) * temp;
    }
    ndu(j, j) = saved;
  }

  Eigen::MatrixXd ders = Eigen::MatrixXd::Zero(deriv + 1, p + 1);
  for (int j = 0; j <= p; ++j) ders(0, j) = ndu(j, p);
  Eigen::MatrixXd a(2, p + 1);
  for (int r = 0; r <= p; ++r) {
    int s1 = 0, s2 = 1;
    a.setZero();
    a(0, 0) = 1.0;
    for (int k = 1; k <= std::min(deriv, p); ++k) {
      double d = 0.0;
      const int rk = r - k, pk = p - k;
      if (r >= k) {
        a(s2, 0) = a(s1, 0) / ndu(pk + 1, rk);
        d = a(s2, 0) * ndu(rk, pk);
      }
      const int j1 = rk >= -1 ? 1 : -rk;
      const int j2 = (r - 1 <= pk) ? k - 1 : p - r;
      for (int j = j1; j <= j2; ++j) {
        a(s2, j) = (a(s1, j) - a(s1, j - 1)) / ndu(pk + 1, rk + j);
        d += a(s2, j) * ndu(rk + j, pk);
      }
      if (r <= pk) {
        a(s2, k) = -a(s1, k - 1) / ndu(pk + 1, r);
        d += a(s2, k) * ndu(r, pk);
      }
      ders(k, r) = d;
      std::swap(s1, s2);
    }
  }
  double factor = p;
  for (int k = 1; k <= std::min(deriv, p); ++k) {
    ders.row(k) *= factor;
    factor *= (p - k);
  }

  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(deriv + 1, n);
  out.middleCols(span - p, p + 1) = ders;
  return out;
}

Eigen::RowVectorXd raw_row(const UnivariateBasis& b, double x, int deriv) {
  switch (b.kind) {
    case BasisKind::constant:
      return Eigen::RowVectorXd::Constant(1, deriv == 0 ? 1.0 : 0.0);
    case BasisKind::bspline:
      return bspline_derivatives(b.knots, b.order, x, deriv).row(deriv);
    case BasisKind::natural_cubic:
      return bspline_derivatives(b.knots, b.order, x, deriv).row(deriv) * b.transform;
    case BasisKind::ortho_poly: {
      // Three-term recurrence carried for value, first and second derivative.
      const int d = b.degree;
      Eigen::RowVectorXd v(d + 1), v1(d + 1), v2(d + 1);
      v(0) = 1.0; v1(0) = 0.0; v2(0) = 0.0;
      if (d >= 1) {
        v(1) = x - b.alpha(0); v1(1) = 1.0; v2(1) = 0.0;
      }
      for (int j = 1; j < d; ++j) {
        const double c = b.norm2(j) / b.norm2(j - 1);
        const double xa = x - b.alpha(j);
        v(j + 1) = xa * v(j) - c * v(j - 1);
        v1(j + 1) = v(j) + xa * v1(j) - c * v1(j - 1);
        v2(j + 1) = 2.0 * v1(j) + xa * v2(j) - c * v2(j - 1);
      }
      Eigen::RowVectorXd out = deriv == 0 ? v : (deriv == 1 ? v1 : v2);
      for (int j = 1; j <= d; ++j) out(j) /= std::sqrt(b.norm2(j));
      return out;
    }
    case BasisKind::tabulated: {
      const auto& nodes = b.nodes;
      const Eigen::Index m = nodes.size();
      Eigen::Index i = std::upper_bound(nodes.data(), nodes.data() + m, x) - nodes.data() - 1;
      i = std::clamp<Eigen::Index>(i, 0, m - 2);
      const double h = nodes(i + 1) - nodes(i);
      if (deriv >= 2) return Eigen::RowVectorXd::Zero(b.table.cols());
      if (deriv == 1) return (b.table.row(i + 1) - b.table.row(i)) / h;
      const double w = (x - nodes(i)) / h;
      return (1.0 - w) * b.table.row(i) + w * b.table.row(i + 1);
    }
  }
  throw std::logic_error("unhandled basis kind");
}

std::vector<double> breakpoints(const UnivariateBasis& b) {
  std::vector<double> pts;
  switch (b.kind) {
    case BasisKind::bspline:
    case BasisKind::natural_cubic:
      pts.assign(b.knots.data(), b.knots.data() + b.knots.size());
      break;
    case BasisKind::tabulated:
      pts.assign(b.nodes.data(), b.nodes.data() + b.nodes.size());
      break;
    default:
      pts = {b.lo, b.hi};
  }
  pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
  return pts;
}

int span_nodes(const UnivariateBasis& b) {
  switch (b.kind) {
    case BasisKind::constant: return 1;
    case BasisKind::bspline:
    case BasisKind::natural_cubic: return b.order;  // exact for degree 2*order - 2
    case BasisKind::ortho_poly: return b.degree + 1;
    case BasisKind::tabulated: return 2;
  }
  return 1;
}

}  // namespace

UnivariateBasis constant_basis(double lo, double hi) {
  UnivariateBasis b;
  b.kind = BasisKind::constant;
  b.lo = lo;
  b.hi = hi;
  return b;
}

UnivariateBasis bspline_basis(int n_basis, int order, double lo, double hi) {
  if (order < 1 || n_basis < order)
    throw std::invalid_argument("bspline_basis requires n_basis >= order >= 1");
  if (!(hi > lo)) throw std::invalid_argument("bspline_basis requires hi > lo");
  UnivariateBasis b;
  b.kind = BasisKind::bspline;
  b.lo = lo;
  b.hi = hi;
  b.order = order;
  b.knots = clamped_knots(n_basis, order, lo, hi);
  return b;
}

UnivariateBasis natural_cubic_basis(int n_basis, double lo, double hi) {
  if (n_basis < 1) throw std::invalid_argument("natural_cubic_basis requires n_basis >= 1");
  if (!(hi > lo)) throw std::invalid_argument("natural_cubic_basis requires hi > lo");
  const int raw = n_basis + 3;  // n_basis - 1 interior knots, cubic
  UnivariateBasis b;
  b.kind = BasisKind::natural_cubic;
  b.lo = lo;
  b.hi = hi;
  b.order = 4;
  b.knots = clamped_knots(raw, 4, lo, hi);

  // Second-derivative constraints at both boundaries on the B-splines without
  // the first column; the basis spans their null space.
  Eigen::MatrixXd constraints(2, raw - 1);
  constraints.row(0) = bspline_derivatives(b.knots, 4, lo, 2).row(2).tail(raw - 1);
  constraints.row(1) = bspline_derivatives(b.knots, 4, hi, 2).row(2).tail(raw - 1);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(constraints.transpose());
  const Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(raw - 1, raw - 1);
  b.transform = Eigen::MatrixXd::Zero(raw, n_basis);
  b.transform.bottomRows(raw - 1) = q.rightCols(n_basis);
  return b;
}

UnivariateBasis ortho_poly_basis(int degree, int grid_size, double lo, double hi) {
  if (degree < 0 || grid_size < degree + 1)
    throw std::invalid_argument("ortho_poly_basis requires 0 <= degree < grid_size");
  const Eigen::VectorXd x = linspace(lo, hi, grid_size);
  UnivariateBasis b;
  b.kind = BasisKind::ortho_poly;
  b.lo = lo;
  b.hi = hi;
  b.degree = degree;
  b.alpha = Eigen::VectorXd::Zero(degree);
  b.norm2 = Eigen::VectorXd::Zero(degree + 1);

  // Stieltjes procedure: discrete orthogonal polynomials over the grid.
  Eigen::VectorXd prev = Eigen::VectorXd::Zero(grid_size);
  Eigen::VectorXd cur = Eigen::VectorXd::Ones(grid_size);
  b.norm2(0) = cur.squaredNorm();
  for (int j = 0; j < degree; ++j) {
    b.alpha(j) = x.cwiseProduct(cur).dot(cur) / b.norm2(j);
    Eigen::VectorXd next = (x.array() - b.alpha(j)).matrix().cwiseProduct(cur);
    if (j > 0) next -= (b.norm2(j) / b.norm2(j - 1)) * prev;
    prev = cur;
    cur = next;
    b.norm2(j + 1) = cur.squaredNorm();
  }
  return b;
}

UnivariateBasis tabulated_basis(const Eigen::VectorXd& nodes, const Eigen::MatrixXd& table) {
  if (nodes.size() < 2 || table.rows() != nodes.size())
    throw std::invalid_argument("tabulated_basis needs >= 2 nodes and one table row per node");
  UnivariateBasis b;
  b.kind = BasisKind::tabulated;
  b.lo = nodes(0);
  b.hi = nodes(nodes.size() - 1);
  b.nodes = nodes;
  b.table = table;
  return b;
}

UnivariateBasis with_intercept(UnivariateBasis basis) {
  if (basis.mix.size() > 0) throw std::invalid_argument("with_intercept on a mixed basis");
  basis.with_constant = true;
  return basis;
}

Eigen::MatrixXd eval_basis(const UnivariateBasis& basis, const Eigen::VectorXd& points, int deriv) {
  if (deriv < 0 || deriv > 2) throw std::invalid_argument("eval_basis supports deriv 0..2");
  const int raw = basis.raw_size();
  const int cols = raw + (basis.with_constant ? 1 : 0);
  Eigen::MatrixXd out(points.size(), cols);
  const double tol = 1e-12 * std::max(1.0, std::abs(basis.hi - basis.lo));
  for (Eigen::Index i = 0; i < points.size(); ++i) {
    double x = points(i);
    if (x < basis.lo - tol || x > basis.hi + tol || !std::isfinite(x))
      throw std::domain_error("point " + std::to_string(x) + " outside basis domain [" +
                              std::to_string(basis.lo) + ", " + std::to_string(basis.hi) + "]");
    x = std::clamp(x, basis.lo, basis.hi);
    if (basis.with_constant) {
      out(i, 0) = deriv == 0 ? 1.0 : 0.0;
      out.row(i).tail(raw) = raw_row(basis, x, deriv);
    } else {
      out.row(i) = raw_row(basis, x, deriv);
    }
  }
  if (basis.mix.size() > 0) return out * basis.mix;
  return out;
}

Eigen::MatrixXd gram_matrix(const UnivariateBasis& basis) {
  const auto pts = breakpoints(basis);
  const auto [nodes, weights] = gauss_legendre(span_nodes(basis));
  const Eigen::Index m = nodes.size();
  Eigen::VectorXd x(static_cast<Eigen::Index>(pts.size() - 1) * m);
  Eigen::VectorXd w(x.size());
  for (std::size_t s = 0; s + 1 < pts.size(); ++s) {
    const double half = (pts[s + 1] - pts[s]) / 2, mid = (pts[s + 1] + pts[s]) / 2;
    for (Eigen::Index q = 0; q < m; ++q) {
      x(static_cast<Eigen::Index>(s) * m + q) = mid + half * nodes(q);
      w(static_cast<Eigen::Index>(s) * m + q) = half * weights(q);
    }
  }
  const Eigen::MatrixXd phi = eval_basis(basis, x);
  Eigen::MatrixXd g = phi.transpose() * w.asDiagonal() * phi;
  return (g + g.transpose()) / 2;
}

UnivariateBasis orthonormalize(const UnivariateBasis& basis) {
  const Eigen::MatrixXd g = gram_matrix(basis);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(g);
  if (es.eigenvalues().minCoeff() <= 1e-12 * es.eigenvalues().maxCoeff())
    throw std::invalid_argument("orthonormalize: basis Gram matrix is singular");
  const Eigen::MatrixXd inv_sqrt =
      es.eigenvectors() * es.eigenvalues().cwiseInverse().cwiseSqrt().asDiagonal() *
      es.eigenvectors().transpose();
  UnivariateBasis out = basis;
  out.mix = basis.mix.size() > 0 ? Eigen::MatrixXd(basis.mix * inv_sqrt) : inv_sqrt;
  return out;
}

LeastSquaresProjector::LeastSquaresProjector(const UnivariateBasis& basis, const Eigen::VectorXd& grid)
    : design_(eval_basis(basis, grid)) {
  if (design_.cols() > design_.rows())
    throw std::invalid_argument("more basis functions than grid points");
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(design_);
  qr.setThreshold(1e-10);
  if (qr.rank() < design_.cols())
    throw std::invalid_argument("rank-deficient basis design on the grid");
  hat_ = qr.solve(Eigen::MatrixXd::Identity(design_.rows(), design_.rows()));
}

Eigen::MatrixXd LeastSquaresProjector::coefficients(const Eigen::MatrixXd& values) const {
  return values * hat_.transpose();
}

std::vector<Eigen::MatrixXd> fit_coefficients(const MvLongDataset& data, const UnivariateBasis& basis) {
  const LeastSquaresProjector proj(basis, data.grid);
  std::vector<Eigen::MatrixXd> out;
  Eigen::MatrixXd values(static_cast<Eigen::Index>(data.size()), data.grid.size());
  for (int p = 0; p < data.dims(); ++p) {
    for (std::size_t i = 0; i < data.size(); ++i)
      values.row(static_cast<Eigen::Index>(i)) = data.curves[i].values.row(p);
    out.push_back(proj.coefficients(values));
  }
  return out;
}

}  // namespace mvlfmm
