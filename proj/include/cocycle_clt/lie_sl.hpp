#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "cocycle_clt/error.hpp"
#include "cocycle_clt/markov_sft.hpp"
#include "cocycle_clt/random.hpp"

namespace cocycle_clt {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Point of the Cartan algebra: d reals summing to zero.
struct AVector {
  Vector t;

  AVector() = default;
  explicit AVector(Vector values) : t(std::move(values)) {}
  static AVector zero(Eigen::Index d) { return AVector(Vector::Zero(d)); }

  Eigen::Index size() const { return t.size(); }
  double operator[](Eigen::Index i) const { return t(i); }
  double& operator[](Eigen::Index i) { return t(i); }
  double sum() const { return t.sum(); }
  double norm() const { return t.norm(); }

  /// Partial sum t_1 + ... + t_k.
  double chi(Eigen::Index k) const { return t.head(k).sum(); }

  AVector& operator+=(const AVector& o) { t += o.t; return *this; }
  AVector& operator-=(const AVector& o) { t -= o.t; return *this; }
  AVector& operator*=(double s) { t *= s; return *this; }
  friend AVector operator+(AVector a, const AVector& b) { return a += b; }
  friend AVector operator-(AVector a, const AVector& b) { return a -= b; }
  friend AVector operator*(AVector a, double s) { return a *= s; }
  friend AVector operator*(double s, AVector a) { return a *= s; }
  friend AVector operator-(AVector a) { a.t = -a.t; return a; }
};

/// Rebuild an AVector from partial sums chi_1..chi_{d-1} (chi_0 = chi_d = 0).
inline AVector from_chi(const std::vector<double>& chi) {
  const auto d = static_cast<Eigen::Index>(chi.size()) + 1;
  AVector out = AVector::zero(d);
  double previous = 0.0;
  for (Eigen::Index k = 0; k + 1 < d; ++k) {
    out[k] = chi[static_cast<std::size_t>(k)] - previous;
    previous = chi[static_cast<std::size_t>(k)];
  }
  out[d - 1] = -previous;
  return out;
}

/// Full flag represented by an orthonormal basis; V_k spans the first k columns.
struct Flag {
  Matrix basis;

  Eigen::Index dim() const { return basis.rows(); }
  static Flag standard(Eigen::Index d) { return Flag{Matrix::Identity(d, d)}; }
};

inline double orthonormality_error(const Flag& f) {
  const auto d = f.dim();
  return (f.basis.transpose() * f.basis - Matrix::Identity(d, d)).cwiseAbs().maxCoeff();
}

inline double operator_norm(const Matrix& m) {
  if (m.size() == 1) return std::abs(m(0, 0));
  Eigen::JacobiSVD<Matrix> svd(m);
  return svd.singularValues()(0);
}

struct PositiveQR {
  Matrix q;
  Matrix r;
};

/// Householder QR with signs fixed so that diag(R) > 0.
inline PositiveQR positive_qr(const Matrix& a) {
  const auto d = a.rows();
  Eigen::HouseholderQR<Matrix> qr(a);
  PositiveQR out{qr.householderQ() * Matrix::Identity(d, d),
                 qr.matrixQR().triangularView<Eigen::Upper>()};
  for (Eigen::Index i = 0; i < d; ++i) {
    if (out.r(i, i) < 0.0) {
      out.r.row(i) *= -1.0;
      out.q.col(i) *= -1.0;
    }
  }
  return out;
}

/// Orthonormalize an arbitrary invertible basis into a Flag.
inline Flag flag_from_basis(const Matrix& m) {
  if (m.rows() != m.cols()) fail(ErrorKind::InvalidArgument, "flag basis must be square");
  auto qr = positive_qr(m);
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    if (!(qr.r(i, i) > 1e-300)) fail(ErrorKind::NumericalBreakdown, "flag basis is singular");
  return Flag{std::move(qr.q)};
}

/// Log singular values, nonincreasing.
inline AVector cartan_kappa(const Matrix& g) {
  Eigen::JacobiSVD<Matrix> svd(g);
  if (svd.info() != Eigen::Success) fail(ErrorKind::NumericalBreakdown, "SVD failed");
  const Vector& s = svd.singularValues();
  AVector out = AVector::zero(g.rows());
  for (Eigen::Index i = 0; i < s.size(); ++i) {
    if (!(s(i) > 0.0)) fail(ErrorKind::NumericalBreakdown, "zero singular value");
    out[i] = std::log(s(i));
  }
  return out;
}

struct IwasawaStep {
  AVector sigma;
  Flag flag;
};

/// g Q = Q' R with diag(R) > 0; sigma = log diag(R), the new flag is Q'.
inline IwasawaStep iwasawa_step(const Matrix& g, const Flag& xi) {
  auto qr = positive_qr(g * xi.basis);
  AVector sigma = AVector::zero(g.rows());
  for (Eigen::Index i = 0; i < g.rows(); ++i) {
    const double r = qr.r(i, i);
    if (!(r > 1e-300)) fail(ErrorKind::NumericalBreakdown, "Iwasawa diagonal underflow");
    sigma[i] = std::log(r);
  }
  return {std::move(sigma), Flag{std::move(qr.q)}};
}

/// Lexicographically ordered k-subsets of {0..d-1}.
inline std::vector<std::vector<Eigen::Index>> combinations(Eigen::Index d, Eigen::Index k) {
  std::vector<std::vector<Eigen::Index>> out;
  std::vector<Eigen::Index> c(static_cast<std::size_t>(k));
  for (Eigen::Index i = 0; i < k; ++i) c[static_cast<std::size_t>(i)] = i;
  while (true) {
    out.push_back(c);
    Eigen::Index i = k - 1;
    while (i >= 0 && c[static_cast<std::size_t>(i)] == d - k + i) --i;
    if (i < 0) break;
    ++c[static_cast<std::size_t>(i)];
    for (Eigen::Index j = i + 1; j < k; ++j)
      c[static_cast<std::size_t>(j)] = c[static_cast<std::size_t>(j - 1)] + 1;
  }
  return out;
}

/// Matrix of the k-th exterior power; entries are k x k minors.
inline Matrix wedge_power(const Matrix& g, Eigen::Index k) {
  const auto d = g.rows();
  if (k < 1 || k > d) fail(ErrorKind::InvalidArgument, "wedge degree out of range");
  const auto idx = combinations(d, k);
  const auto m = static_cast<Eigen::Index>(idx.size());
  Matrix out(m, m);
  Matrix minor(k, k);
  for (Eigen::Index i = 0; i < m; ++i) {
    for (Eigen::Index j = 0; j < m; ++j) {
      for (Eigen::Index a = 0; a < k; ++a)
        for (Eigen::Index b = 0; b < k; ++b)
          minor(a, b) = g(idx[static_cast<std::size_t>(i)][static_cast<std::size_t>(a)],
                          idx[static_cast<std::size_t>(j)][static_cast<std::size_t>(b)]);
      out(i, j) = minor.determinant();
    }
  }
  return out;
}

struct GeneralPosition {
  double delta = 0.0;
  std::vector<double> per_k;  // index k-1 holds delta_k
};

inline GeneralPosition general_position_delta(const Flag& xi, const Flag& eta) {
  const auto d = xi.dim();
  GeneralPosition out;
  out.delta = d > 1 ? 1.0 : 0.0;
  Matrix joined(d, d);
  for (Eigen::Index k = 1; k < d; ++k) {
    joined.leftCols(k) = xi.basis.leftCols(k);
    joined.rightCols(d - k) = eta.basis.leftCols(d - k);
    const double dk = std::min(1.0, std::abs(joined.determinant()));
    out.per_k.push_back(dk);
    out.delta = std::min(out.delta, dk);
  }
  return out;
}

/// Busemann function with chi_k(H) = -log delta_k(xi, eta).
inline AVector busemann_H(const Flag& xi, const Flag& eta) {
  const auto gp = general_position_delta(xi, eta);
  if (!(gp.delta > 1e-12))
    fail(ErrorKind::NotInGeneralPosition,
         "flags not in general position (delta = " + std::to_string(gp.delta) + ")");
  std::vector<double> chi;
  chi.reserve(gp.per_k.size());
  for (double dk : gp.per_k) chi.push_back(-std::log(dk));
  return from_chi(chi);
}

/// (t_1, ..., t_d) -> (-t_d, ..., -t_1).
inline AVector opposition_iota(const AVector& t) { return AVector(-t.t.reverse()); }

/// max_k of the Frobenius distance between the projectors onto V_k.
/// ||P_a - P_b||_F^2 = 2 ||(I - P_a) B_k||_F^2, read off the lower-left
/// block of A^T B without cancellation.
inline double flag_distance(const Flag& a, const Flag& b) {
  const auto d = a.dim();
  double worst = 0.0;
  const Matrix cross = a.basis.transpose() * b.basis;
  for (Eigen::Index k = 1; k < d; ++k)
    worst = std::max(worst, 2.0 * cross.bottomLeftCorner(d - k, k).squaredNorm());
  return std::sqrt(worst);
}

inline double simplicity_margin(const AVector& lambda) {
  if (lambda.size() < 2) return 0.0;
  double m = lambda[0] - lambda[1];
  for (Eigen::Index k = 1; k + 1 < lambda.size(); ++k) m = std::min(m, lambda[k] - lambda[k + 1]);
  return m;
}

/// Haar-distributed flag (QR of a Gaussian matrix).
inline Flag random_flag(Eigen::Index d, Rng& rng) {
  Matrix g(d, d);
  for (Eigen::Index i = 0; i < d; ++i)
    for (Eigen::Index j = 0; j < d; ++j) g(i, j) = rng.normal();
  return flag_from_basis(g);
}

/// Gaussian matrix rescaled into SL_d.
inline Matrix random_sl(Eigen::Index d, Rng& rng, double scale = 1.0) {
  while (true) {
    Matrix g(d, d);
    for (Eigen::Index i = 0; i < d; ++i)
      for (Eigen::Index j = 0; j < d; ++j) g(i, j) = scale * rng.normal();
    const double det = g.determinant();
    if (std::abs(det) < 1e-3) continue;
    if (det < 0.0) g.row(0) *= -1.0;
    return g / std::pow(std::abs(det), 1.0 / static_cast<double>(d));
  }
}

inline Matrix random_rotation(Eigen::Index d, Rng& rng) {
  Matrix q = random_flag(d, rng).basis;
  if (q.determinant() < 0.0) q.col(0) *= -1.0;
  return q;
}

/// Edge-indexed SL_d matrices with f_vu = f_uv^{-1}.
class EdgeCocycle {
 public:
  EdgeCocycle() = default;
  EdgeCocycle(std::size_t vertices, Eigen::Index dim)
      : n_(vertices), d_(dim), maps_(vertices * vertices) {}

  /// Every edge of the graph carries the identity.
  static EdgeCocycle identity(const GraphSpec& graph, Eigen::Index dim) {
    EdgeCocycle f(graph.size(), dim);
    for (const auto& [u, v] : graph.edges) f.set(u, v, Matrix::Identity(dim, dim));
    return f;
  }

  /// Sets f_uv and fills f_vu with the inverse.
  void set_pair(Vertex u, Vertex v, const Matrix& m) {
    set(u, v, m);
    if (u != v) set(v, u, m.inverse());
  }

  void set(Vertex u, Vertex v, const Matrix& m) {
    if (m.rows() != d_ || m.cols() != d_) fail(ErrorKind::ValidationError, "edge matrix has wrong size");
    maps_[slot(u, v)] = m;
  }

  bool has(Vertex u, Vertex v) const { return maps_[slot(u, v)].has_value(); }

  const Matrix& at(Vertex u, Vertex v) const {
    const auto& m = maps_[slot(u, v)];
    if (!m) fail(ErrorKind::UnknownVertex, "no matrix on edge (" + std::to_string(u) + "," + std::to_string(v) + ")");
    return *m;
  }

  Eigen::Index dim() const { return d_; }
  std::size_t vertices() const { return n_; }

  /// Checks coverage of the edge set, det = 1, f_uv f_vu = I and f_vv^2 = I.
  void validate(const GraphSpec& graph, double tolerance = 1e-9) const {
    const Matrix id = Matrix::Identity(d_, d_);
    for (const auto& [u, v] : graph.edges) {
      const std::string edge = "(" + graph.name_of(u) + "," + graph.name_of(v) + ")";
      if (!has(u, v)) fail(ErrorKind::ValidationError, "edge " + edge + " has no matrix");
      const Matrix& m = at(u, v);
      const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
      if (std::abs(m.determinant() - 1.0) > tolerance * std::pow(scale, static_cast<double>(d_)))
        fail(ErrorKind::ValidationError, "matrix on edge " + edge + " does not have determinant 1");
      if (u == v) {
        if ((m * m - id).cwiseAbs().maxCoeff() > tolerance)
          fail(ErrorKind::ValidationError,
               "self-loop matrix at vertex " + graph.name_of(u) + " is not an involution");
      } else if ((m * at(v, u) - id).cwiseAbs().maxCoeff() > tolerance) {
        fail(ErrorKind::ValidationError, "matrices on " + edge + " and its reverse are not inverse");
      }
    }
  }

  /// Largest operator norm over all edges.
  double max_norm() const {
    double c = 0.0;
    for (const auto& m : maps_)
      if (m) c = std::max(c, operator_norm(*m));
    return c;
  }

 private:
  std::size_t slot(Vertex u, Vertex v) const {
    if (u < 0 || v < 0 || static_cast<std::size_t>(u) >= n_ || static_cast<std::size_t>(v) >= n_)
      fail(ErrorKind::UnknownVertex, "vertex index out of range");
    return static_cast<std::size_t>(u) * n_ + static_cast<std::size_t>(v);
  }

  std::size_t n_ = 0;
  Eigen::Index d_ = 0;
  std::vector<std::optional<Matrix>> maps_;
};

/// Ordered product f_{x_{n-1}x_n} ... f_{x_0x_1}.
inline Matrix path_product(const EdgeCocycle& f, std::span<const Vertex> path) {
  Matrix out = Matrix::Identity(f.dim(), f.dim());
  for (std::size_t i = 0; i + 1 < path.size(); ++i) out = f.at(path[i], path[i + 1]) * out;
  return out;
}

}  // namespace cocycle_clt
