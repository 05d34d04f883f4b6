#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <exception>
#include <string>
#include <thread>
#include <vector>

#include "cocycle_clt/cocycle_engine.hpp"
#include "cocycle_clt/error.hpp"
#include "cocycle_clt/lie_sl.hpp"
#include "cocycle_clt/markov_sft.hpp"
#include "cocycle_clt/random.hpp"
#include "cocycle_clt/stationary.hpp"
#include "cocycle_clt/stats.hpp"

namespace cocycle_clt {

struct CltRecord {
  AVector V;  // (kappa(F_n) - n Lambda) / sqrt n
  AVector W;  // (sigma(F_n, xi) - n Lambda) / sqrt n
  Vertex final_vertex = 0;
};

struct CltSampleSet {
  std::size_t n = 0;
  AVector lambda;
  Flag xi;
  std::vector<CltRecord> records;

  std::size_t size() const { return records.size(); }
  Matrix V_matrix() const { return stack(&CltRecord::V); }
  Matrix W_matrix() const { return stack(&CltRecord::W); }

 private:
  Matrix stack(AVector CltRecord::*field) const {
    const auto d = lambda.size();
    Matrix m(static_cast<Eigen::Index>(records.size()), d);
    for (std::size_t i = 0; i < records.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = (records[i].*field).t.transpose();
    return m;
  }
};

/// Runs body(i) for i in [0, count) on up to `threads` workers. Each index
/// is handled exactly once and writes only its own slot, so results do not
/// depend on scheduling.
template <typename Body>
void parallel_for(std::size_t count, unsigned threads, Body&& body) {
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(std::max<std::size_t>(count, 1))));
  if (threads == 1) {
    for (std::size_t i = 0; i < count; ++i) body(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (unsigned t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = t; i < count; i += threads) body(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

/// Independent stationary trajectories of length n; replica i uses the
/// stream stream_seed(seed, "clt", i).
inline CltSampleSet run_clt(const MarkovChain& chain, const EdgeCocycle& f, std::size_t n, std::size_t replicas,
                            const Flag& xi, const AVector& lambda, std::uint64_t seed, unsigned threads = 1) {
  if (n < 1) fail(ErrorKind::InvalidArgument, "n must be at least 1");
  if (replicas < 2) fail(ErrorKind::InsufficientSamples, "need at least 2 replicas");
  if (xi.dim() != f.dim() || lambda.size() != f.dim()) fail(ErrorKind::InvalidArgument, "dimension mismatch");
  CltSampleSet out{n, lambda, xi, std::vector<CltRecord>(replicas)};
  const WedgeTables tables(f);
  const double root = std::sqrt(static_cast<double>(n));
  const AVector drift = static_cast<double>(n) * lambda;
  parallel_for(replicas, threads, [&](std::size_t i) {
    Rng rng(stream_seed(seed, "clt", i));
    KappaAccumulator kappa(tables);
    SigmaAccumulator sigma(xi);
    Vertex x = chain.draw_stationary(rng);
    for (std::size_t k = 0; k < n; ++k) {
      const Vertex y = chain.step(x, rng);
      kappa.step(x, y);
      sigma.apply(f.at(x, y));
      x = y;
    }
    out.records[i] = {(kappa.kappa() - drift) * (1.0 / root), (sigma.sigma() - drift) * (1.0 / root), x};
  });
  return out;
}

// ---------------------------------------------------------------------------
// Covariance

struct CovarianceTensor {
  Matrix matrix;
};

/// Orthonormal basis of the sum-zero subspace (Helmert contrasts), d x (d-1).
inline Matrix sum_zero_basis(Eigen::Index d) {
  Matrix e = Matrix::Zero(d, d - 1);
  for (Eigen::Index j = 0; j + 1 < d; ++j) {
    const double k = static_cast<double>(j + 1);
    const double s = 1.0 / std::sqrt(k * (k + 1.0));
    for (Eigen::Index i = 0; i <= j; ++i) e(i, j) = s;
    e(j + 1, j) = -k * s;
  }
  return e;
}

/// Eigenvalues (ascending) of the restriction to the sum-zero subspace.
inline Vector eigenvalues_on_a(const CovarianceTensor& phi) {
  const Matrix e = sum_zero_basis(phi.matrix.rows());
  const Matrix r = e.transpose() * phi.matrix * e;
  return Eigen::SelfAdjointEigenSolver<Matrix>(0.5 * (r + r.transpose())).eigenvalues();
}

struct CovarianceEstimate {
  CovarianceTensor phi;
  Vector eigenvalues;  // on the sum-zero subspace
  double min_eig_on_a = 0.0;
  bool degenerate = true;
};

constexpr double degeneracy_threshold = 1e-12;

inline CovarianceTensor sample_covariance(const Matrix& x) {
  const double n = static_cast<double>(x.rows());
  const Matrix centered = x.rowwise() - x.colwise().mean();
  return {centered.transpose() * centered / n};
}

inline CovarianceEstimate covariance_estimate(const Matrix& samples) {
  if (samples.rows() < 2) fail(ErrorKind::InsufficientSamples, "need at least 2 samples");
  CovarianceEstimate out;
  out.phi = sample_covariance(samples);
  out.eigenvalues = eigenvalues_on_a(out.phi);
  out.min_eig_on_a = out.eigenvalues.size() ? out.eigenvalues.minCoeff() : 0.0;
  out.degenerate = !(out.min_eig_on_a >= degeneracy_threshold);
  return out;
}

struct BootstrapSE {
  Matrix entries;           // SE of each entry of the covariance
  double min_eig_on_a = 0;  // SE of the smallest eigenvalue on the sum-zero subspace
};

inline BootstrapSE bootstrap_covariance_se(const Matrix& samples, std::uint64_t seed, std::size_t B = 200) {
  const auto n = samples.rows();
  const auto d = samples.cols();
  Rng rng(stream_seed(seed, "bootstrap"));
  Matrix sum = Matrix::Zero(d, d), sum2 = Matrix::Zero(d, d);
  std::vector<double> eig;
  Matrix resampled(n, d);
  for (std::size_t b = 0; b < B; ++b) {
    for (Eigen::Index i = 0; i < n; ++i) resampled.row(i) = samples.row(static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(n))));
    const auto c = sample_covariance(resampled);
    sum += c.matrix;
    sum2 += c.matrix.cwiseProduct(c.matrix);
    eig.push_back(eigenvalues_on_a(c).minCoeff());
  }
  const double bb = static_cast<double>(B);
  BootstrapSE out;
  out.entries = ((sum2 / bb - (sum / bb).cwiseProduct(sum / bb)) * (bb / (bb - 1.0))).cwiseMax(0.0).cwiseSqrt();
  out.min_eig_on_a = std::sqrt(stats::variance(eig));
  return out;
}

/// Largest entrywise deviation between two covariances in units of the
/// combined standard error.
inline double covariance_z(const CovarianceTensor& a, const Matrix& se_a, const CovarianceTensor& b, const Matrix& se_b) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < a.matrix.rows(); ++i)
    for (Eigen::Index j = 0; j < a.matrix.cols(); ++j) {
      const double se = std::hypot(se_a(i, j), se_b(i, j));
      const double diff = std::abs(a.matrix(i, j) - b.matrix(i, j));
      worst = std::max(worst, se > 0.0 ? diff / se : (diff > 0.0 ? INFINITY : 0.0));
    }
  return worst;
}

/// Refuses a run whose centering error, inflated by sqrt n, is not small
/// against the spread of the limit law.
inline void check_centering_precision(const AVector& lambda_se, std::size_t n, const CovarianceEstimate& cov) {
  const double inflated = lambda_se.norm() * std::sqrt(static_cast<double>(n));
  const double allowed = 0.05 * std::sqrt(std::max(0.0, cov.min_eig_on_a));
  if (!(inflated <= allowed))
    fail(ErrorKind::CenteringTooNoisy, "SE(Lambda) * sqrt(n) = " + std::to_string(inflated) +
                                          " exceeds 0.05 * sqrt(min eigenvalue) = " + std::to_string(allowed));
}

// ---------------------------------------------------------------------------
// Phi as a fiber integral

struct PhiIntegral {
  CovarianceTensor phi;
  Matrix se;
  Matrix noise_correction;  // mean h0 estimation variance already subtracted from phi
};

/// Second moment of s'(y0, y1, eta) with y0 ~ pi, y1 ~ p(y0, .) and eta drawn
/// from the backward fiber at y0, less the variance of the estimated h0.
inline PhiIntegral phi_integral_estimate(const CenteringData& c, std::size_t samples_m, std::uint64_t seed,
                                         unsigned threads = 1) {
  if (samples_m < 2) fail(ErrorKind::InsufficientSamples, "need at least 2 samples");
  const auto d = c.cocycle().dim();
  std::vector<CenteringData::SPrime> values(samples_m);
  parallel_for(samples_m, threads, [&](std::size_t i) {
    Rng rng(stream_seed(seed, "phi", i));
    const Vertex u = c.chain().draw_stationary(rng);
    const Vertex v = c.chain().step(u, rng);
    const auto& fiber = c.backward().samples[static_cast<std::size_t>(u)];
    if (fiber.empty()) fail(ErrorKind::InsufficientSamples, "empty backward fiber");
    values[i] = c.s_prime_with_noise(u, v, fiber[rng.below(fiber.size())]);
  });
  // the estimated h0 adds its own variance to every s' value; subtract it
  Matrix sum = Matrix::Zero(d, d), sum2 = Matrix::Zero(d, d), noise = Matrix::Zero(d, d);
  for (const auto& s : values) {
    const Matrix outer = s.value.t * s.value.t.transpose() - s.noise;
    sum += outer;
    sum2 += outer.cwiseProduct(outer);
    noise += s.noise;
  }
  const double m = static_cast<double>(samples_m);
  PhiIntegral out;
  out.phi.matrix = sum / m;
  out.noise_correction = noise / m;
  out.se = ((sum2 / m - out.phi.matrix.cwiseProduct(out.phi.matrix)) / (m - 1.0)).cwiseMax(0.0).cwiseSqrt();
  return out;
}

// ---------------------------------------------------------------------------
// Normality

struct NormalityRow {
  std::string direction;
  double ks = 0.0;
  double skewness = 0.0;
  double excess_kurtosis = 0.0;
};

struct NormalityReport {
  std::vector<NormalityRow> rows;
  std::vector<std::pair<double, double>> qq;  // sorted whitened first principal coordinate vs normal quantile
  double max_ks = 0.0;
  double critical_1pct = 0.0;
};

/// Whitened coordinates of centered samples on the sum-zero subspace.
inline Matrix whiten(const Matrix& samples, const CovarianceTensor& phi) {
  const auto d = samples.cols();
  const Matrix e = sum_zero_basis(d);
  const Matrix r = e.transpose() * phi.matrix * e;
  Eigen::SelfAdjointEigenSolver<Matrix> eig(0.5 * (r + r.transpose()));
  if (eig.eigenvalues().minCoeff() < degeneracy_threshold)
    fail(ErrorKind::DegenerateCovariance, "covariance is degenerate on the sum-zero subspace");
  const Matrix centered = samples.rowwise() - samples.colwise().mean();
  const Matrix scale = eig.eigenvalues().cwiseSqrt().cwiseInverse().asDiagonal();
  // principal directions sorted by decreasing variance
  return (centered * e * eig.eigenvectors() * scale).rowwise().reverse();
}

inline NormalityReport normality_report(const Matrix& samples, const CovarianceTensor& phi, std::uint64_t seed,
                                        std::size_t random_directions = 8) {
  const Matrix z = whiten(samples, phi);
  const auto k = z.cols();
  NormalityReport out;
  out.critical_1pct = stats::ks_critical_1pct(static_cast<std::size_t>(z.rows()));
  auto add = [&](std::string name, const Vector& coords) {
    std::vector<double> xs(coords.data(), coords.data() + coords.size());
    const auto m = stats::standardized_moments(xs);
    NormalityRow row{std::move(name), stats::ks_distance_to_normal(xs), m.skewness, m.excess_kurtosis};
    out.max_ks = std::max(out.max_ks, row.ks);
    out.rows.push_back(std::move(row));
  };
  for (Eigen::Index j = 0; j < k; ++j) add("principal_" + std::to_string(j + 1), z.col(j));
  Rng rng(stream_seed(seed, "directions"));
  for (std::size_t r = 0; r < random_directions; ++r) {
    Vector w(k);
    for (Eigen::Index j = 0; j < k; ++j) w(j) = rng.normal();
    w.normalize();
    add("random_" + std::to_string(r + 1), z * w);
  }
  std::vector<double> first(z.col(0).data(), z.col(0).data() + z.rows());
  std::sort(first.begin(), first.end());
  const double n = static_cast<double>(first.size());
  for (std::size_t i = 0; i < first.size(); ++i)
    out.qq.emplace_back(first[i], stats::normal_quantile((static_cast<double>(i) + 0.5) / n));
  return out;
}

// ---------------------------------------------------------------------------
// kappa-sigma gap and Lindeberg

struct GapSeries {
  std::vector<double> gap;  // gap[k-1] = ||sigma(F_k, xi) - kappa(F_k)||
  double max_gap = 0.0;

  /// Maximum over steps k in [from, to], 1-based inclusive.
  double max_over(std::size_t from, std::size_t to) const {
    if (from < 1 || to > gap.size() || from > to) fail(ErrorKind::InvalidArgument, "gap window out of range");
    return *std::max_element(gap.begin() + static_cast<std::ptrdiff_t>(from - 1), gap.begin() + static_cast<std::ptrdiff_t>(to));
  }
};

inline GapSeries kappa_sigma_gap(const Trajectory& path, const EdgeCocycle& f, const Flag& xi) {
  if (path.steps() < 1) fail(ErrorKind::InvalidArgument, "path needs at least one step");
  const WedgeTables tables(f);
  KappaAccumulator kappa(tables);
  SigmaAccumulator sigma(xi);
  GapSeries out;
  out.gap.reserve(path.steps());
  for (std::size_t i = 0; i + 1 < path.vertices.size(); ++i) {
    kappa.step(path.vertices[i], path.vertices[i + 1]);
    sigma.apply(f.at(path.vertices[i], path.vertices[i + 1]));
    out.gap.push_back((sigma.sigma() - kappa.kappa()).norm());
    out.max_gap = std::max(out.max_gap, out.gap.back());
  }
  return out;
}

struct LindebergRow {
  std::size_t n = 0;
  double statistic = 0.0;  // mean of ||s'||^2 1{||s'|| >= eps sqrt n} over all steps
  std::size_t tail_count = 0;
  std::size_t steps = 0;
  double max_norm = 0.0;   // largest ||s'|| seen
};

/// Per-step s' along `replicas` stationary trajectories of each length in
/// n_grid. The flag starts at a backward-fiber sample and is transported.
inline std::vector<LindebergRow> lindeberg_statistic(const CenteringData& c, double eps,
                                                     const std::vector<std::size_t>& n_grid, std::size_t replicas,
                                                     std::uint64_t seed, unsigned threads = 1) {
  if (!(eps > 0.0)) fail(ErrorKind::InvalidArgument, "eps must be positive");
  std::vector<LindebergRow> out;
  for (std::size_t g = 0; g < n_grid.size(); ++g) {
    const std::size_t n = n_grid[g];
    const double cut = eps * std::sqrt(static_cast<double>(n));
    std::vector<LindebergRow> parts(replicas);
    parallel_for(replicas, threads, [&](std::size_t r) {
      Rng rng(stream_seed(seed, "lindeberg", g * 1000003u + r));
      Vertex u = c.chain().draw_stationary(rng);
      const auto& fiber = c.backward().samples[static_cast<std::size_t>(u)];
      if (fiber.empty()) fail(ErrorKind::InsufficientSamples, "empty backward fiber");
      Flag xi = fiber[rng.below(fiber.size())];
      AVector h_here = c.h_tilde(u, xi);
      LindebergRow& part = parts[r];
      for (std::size_t k = 0; k < n; ++k) {
        const Vertex v = c.chain().step(u, rng);
        const auto step = iwasawa_step(c.cocycle().at(u, v), xi);
        const AVector h_next = c.h_tilde(v, step.flag);
        const double norm = (step.sigma - c.lambda() - h_next + h_here).norm();
        part.max_norm = std::max(part.max_norm, norm);
        if (norm >= cut) {
          part.statistic += norm * norm;
          ++part.tail_count;
        }
        u = v;
        xi = step.flag;
        h_here = h_next;
      }
      part.steps = n;
    });
    LindebergRow row;
    row.n = n;
    for (const auto& p : parts) {
      row.statistic += p.statistic;
      row.tail_count += p.tail_count;
      row.steps += p.steps;
      row.max_norm = std::max(row.max_norm, p.max_norm);
    }
    row.statistic /= static_cast<double>(std::max<std::size_t>(row.steps, 1));
    out.push_back(row);
  }
  return out;
}

}  // namespace cocycle_clt
