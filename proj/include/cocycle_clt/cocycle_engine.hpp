#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "cocycle_clt/error.hpp"
#include "cocycle_clt/lie_sl.hpp"
#include "cocycle_clt/markov_sft.hpp"
#include "cocycle_clt/random.hpp"
#include "cocycle_clt/stats.hpp"

namespace cocycle_clt {

/// Exterior powers of every edge matrix, k = 1..d-1, precomputed once.
class WedgeTables {
 public:
  WedgeTables(const EdgeCocycle& f) : n_(f.vertices()), d_(f.dim()), tables_(static_cast<std::size_t>(f.dim() > 1 ? f.dim() - 1 : 0)) {
    for (Eigen::Index k = 1; k < d_; ++k) {
      auto& table = tables_[static_cast<std::size_t>(k - 1)];
      table.resize(n_ * n_);
      for (std::size_t u = 0; u < n_; ++u)
        for (std::size_t v = 0; v < n_; ++v)
          if (f.has(static_cast<Vertex>(u), static_cast<Vertex>(v)))
            table[u * n_ + v] = wedge_power(f.at(static_cast<Vertex>(u), static_cast<Vertex>(v)), k);
    }
  }

  const Matrix& at(Eigen::Index k, Vertex u, Vertex v) const {
    return tables_[static_cast<std::size_t>(k - 1)][static_cast<std::size_t>(u) * n_ + static_cast<std::size_t>(v)];
  }
  Eigen::Index dim() const { return d_; }

 private:
  std::size_t n_;
  Eigen::Index d_;
  std::vector<std::vector<Matrix>> tables_;
};

/// Running product in each wedge space with Frobenius renormalization after
/// every step; log-scales accumulate in c_k.
class KappaAccumulator {
 public:
  explicit KappaAccumulator(const WedgeTables& tables) : tables_(&tables), d_(tables.dim()) {
    for (Eigen::Index k = 1; k < d_; ++k) {
      const auto m = wedge_power(Matrix::Identity(d_, d_), k).rows();
      a_.push_back(Matrix::Identity(m, m));
      tmp_.push_back(Matrix(m, m));
    }
    c_.assign(a_.size(), 0.0);
    last_increment_.assign(a_.size(), 0.0);
  }

  void step(Vertex u, Vertex v) {
    for (std::size_t i = 0; i < a_.size(); ++i) {
      tmp_[i].noalias() = tables_->at(static_cast<Eigen::Index>(i) + 1, u, v) * a_[i];
      a_[i].swap(tmp_[i]);
      const double scale = a_[i].norm();
      if (!(scale > 1e-300) || !std::isfinite(scale))
        fail(ErrorKind::NumericalBreakdown, "wedge product collapsed");
      a_[i] /= scale;
      last_increment_[i] = std::log(scale);
      c_[i] += last_increment_[i];
    }
    ++steps_;
  }

  /// log-scale increments of the last step, one per k.
  const std::vector<double>& last_increment() const { return last_increment_; }
  const std::vector<double>& log_scales() const { return c_; }
  std::size_t steps() const { return steps_; }

  /// chi_k = log ||wedge^k F_n|| for k = 1..d-1.
  std::vector<double> chi() const {
    std::vector<double> out(a_.size());
    for (std::size_t i = 0; i < a_.size(); ++i) out[i] = c_[i] + std::log(operator_norm(a_[i]));
    return out;
  }

  AVector kappa() const {
    if (d_ == 1) return AVector::zero(1);
    return from_chi(chi());
  }

 private:
  const WedgeTables* tables_;
  Eigen::Index d_;
  std::vector<Matrix> a_;
  std::vector<Matrix> tmp_;
  std::vector<double> c_;
  std::vector<double> last_increment_;
  std::size_t steps_ = 0;
};

/// Flag transport with summed Iwasawa increments. Uses an in-place
/// Householder QR so the hot loop does not allocate.
class SigmaAccumulator {
 public:
  SigmaAccumulator(Flag xi) : flag_(std::move(xi)), d_(flag_.dim()), sigma_(AVector::zero(d_)),
                              last_(AVector::zero(d_)), m_(d_, d_), v_(d_) {}

  void apply(const Matrix& g) {
    m_.noalias() = g * flag_.basis;
    Matrix& q = flag_.basis;
    q.setIdentity();
    for (Eigen::Index j = 0; j + 1 < d_; ++j) {
      const Eigen::Index len = d_ - j;
      const double norm = m_.col(j).tail(len).norm();
      const double alpha = m_(j, j) >= 0.0 ? -norm : norm;
      v_.head(len) = m_.col(j).tail(len);
      v_(0) -= alpha;
      const double vv = v_.head(len).squaredNorm();
      if (vv == 0.0) continue;
      for (Eigen::Index c = j; c < d_; ++c) {
        const double s = 2.0 * v_.head(len).dot(m_.col(c).tail(len)) / vv;
        m_.col(c).tail(len) -= s * v_.head(len);
      }
      for (Eigen::Index r = 0; r < d_; ++r) {
        const double s = 2.0 * q.row(r).tail(len).dot(v_.head(len)) / vv;
        q.row(r).tail(len) -= s * v_.head(len).transpose();
      }
    }
    for (Eigen::Index i = 0; i < d_; ++i) {
      const double r = m_(i, i);
      const double a = std::abs(r);
      if (!(a > 1e-300) || !std::isfinite(a)) fail(ErrorKind::NumericalBreakdown, "Iwasawa diagonal underflow");
      if (r < 0.0) q.col(i) *= -1.0;
      last_[i] = std::log(a);
    }
    sigma_ += last_;
    ++steps_;
  }

  const AVector& sigma() const { return sigma_; }
  const AVector& last_increment() const { return last_; }
  const Flag& flag() const { return flag_; }
  std::size_t steps() const { return steps_; }

 private:
  Flag flag_;
  Eigen::Index d_;
  AVector sigma_;
  AVector last_;
  Matrix m_;
  Vector v_;
  std::size_t steps_ = 0;
};

/// Per-step trace hook: (step, vertex reached, components).
using TraceSink = std::function<void(std::size_t, Vertex, const AVector&)>;

inline AVector accumulate_kappa(std::span<const Vertex> path, const WedgeTables& tables,
                                const TraceSink& trace = {}) {
  if (path.size() < 2) fail(ErrorKind::InvalidArgument, "path must have at least one step");
  KappaAccumulator acc(tables);
  for (std::size_t i = 0; i + 1 < path.size(); ++i) {
    acc.step(path[i], path[i + 1]);
    if (trace) trace(i + 1, path[i + 1], acc.kappa());
  }
  return acc.kappa();
}

inline AVector accumulate_kappa(const Trajectory& path, const EdgeCocycle& f) {
  const WedgeTables tables(f);
  return accumulate_kappa(path.vertices, tables);
}

struct SigmaResult {
  AVector sigma;
  Flag flag;
};

inline SigmaResult accumulate_sigma(std::span<const Vertex> path, const EdgeCocycle& f, const Flag& xi,
                                    const TraceSink& trace = {}) {
  if (path.size() < 2) fail(ErrorKind::InvalidArgument, "path must have at least one step");
  SigmaAccumulator acc(xi);
  for (std::size_t i = 0; i + 1 < path.size(); ++i) {
    acc.apply(f.at(path[i], path[i + 1]));
    if (trace) trace(i + 1, path[i + 1], acc.sigma());
  }
  return {acc.sigma(), acc.flag()};
}

inline SigmaResult accumulate_sigma(const Trajectory& path, const EdgeCocycle& f, const Flag& xi) {
  return accumulate_sigma(std::span<const Vertex>(path.vertices), f, xi);
}

struct LyapunovEstimate {
  AVector lambda;
  std::vector<double> standard_errors;
  std::size_t steps = 0;
};

/// Lambda-hat = kappa(F_n)/n along one long trajectory after burn-in, with
/// batch-means errors over about sqrt(n) batches of per-step increments.
inline LyapunovEstimate estimate_lyapunov(const MarkovChain& chain, const EdgeCocycle& f, std::size_t n,
                                          std::size_t burn_in, Rng& rng, const TraceSink& trace = {}) {
  if (n < 4) fail(ErrorKind::InvalidArgument, "need at least 4 steps");
  const auto d = f.dim();
  const WedgeTables tables(f);
  Vertex x = chain.draw_stationary(rng);
  for (std::size_t i = 0; i < burn_in; ++i) x = chain.step(x, rng);

  const auto batches = static_cast<std::size_t>(std::sqrt(static_cast<double>(n)));
  const std::size_t batch_len = n / batches;
  std::vector<std::vector<double>> batch_sums(static_cast<std::size_t>(d), std::vector<double>(batches, 0.0));

  KappaAccumulator acc(tables);
  std::vector<double> t_inc(static_cast<std::size_t>(d));
  for (std::size_t i = 0; i < n; ++i) {
    const Vertex y = chain.step(x, rng);
    acc.step(x, y);
    x = y;
    if (trace) trace(i + 1, x, acc.kappa());
    const std::size_t b = i / batch_len;
    if (b >= batches) continue;
    const auto& inc = acc.last_increment();
    double previous = 0.0;
    for (std::size_t k = 0; k + 1 < static_cast<std::size_t>(d); ++k) {
      t_inc[k] = inc[k] - previous;
      previous = inc[k];
    }
    t_inc[static_cast<std::size_t>(d) - 1] = -previous;
    for (std::size_t k = 0; k < static_cast<std::size_t>(d); ++k) batch_sums[k][b] += t_inc[k];
  }

  LyapunovEstimate out;
  out.steps = n;
  out.lambda = acc.kappa() * (1.0 / static_cast<double>(n));
  for (auto& sums : batch_sums) {
    for (double& s : sums) s /= static_cast<double>(batch_len);
    out.standard_errors.push_back(stats::standard_error(sums));
  }
  return out;
}

}  // namespace cocycle_clt
