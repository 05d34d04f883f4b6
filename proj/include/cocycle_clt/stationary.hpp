#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numbers>
#include <memory>
#include <optional>
#include <utility>
#include <vector>

#include "cocycle_clt/cocycle_engine.hpp"
#include "cocycle_clt/error.hpp"
#include "cocycle_clt/lie_sl.hpp"
#include "cocycle_clt/markov_sft.hpp"
#include "cocycle_clt/random.hpp"
#include "cocycle_clt/stats.hpp"

namespace cocycle_clt {

enum class Direction { Forward, Backward };

constexpr std::string_view to_string(Direction d) { return d == Direction::Forward ? "forward" : "backward"; }

/// Equal-weight flag samples per vertex from one run of the chain on V x B.
/// Each sample carries the index of the contiguous time block it came from;
/// block-to-block spread is the error model for every statistic below.
struct FiberMeasure {
  Direction direction = Direction::Forward;
  std::size_t burn_in = 0;
  std::size_t thin = 1;
  std::size_t blocks = 1;
  std::vector<std::vector<Flag>> samples;
  std::vector<std::vector<std::size_t>> block_of;

  std::size_t vertices() const { return samples.size(); }
  std::size_t count(Vertex v) const { return samples[static_cast<std::size_t>(v)].size(); }
  std::size_t total() const {
    std::size_t n = 0;
    for (const auto& s : samples) n += s.size();
    return n;
  }
  Eigen::Index dim() const {
    for (const auto& s : samples)
      if (!s.empty()) return s.front().dim();
    return 0;
  }
};

/// Kernel driving a direction: P forward, the time reversal backward. In
/// both cases a step u -> v applies f_uv (backward steps v -> u in reversed
/// time use f_vu = f_uv^{-1}).
inline const Eigen::MatrixXd& direction_kernel(const MarkovChain& chain, Direction d) {
  return d == Direction::Forward ? chain.kernel() : chain.reversed_kernel();
}

inline FiberMeasure estimate_fiber_measures(const MarkovChain& chain, const EdgeCocycle& f, Direction direction,
                                            std::size_t burn_in, std::size_t samples, Rng& rng,
                                            std::size_t thin = 20, std::size_t blocks = 40) {
  if (samples < blocks) fail(ErrorKind::InvalidArgument, "fewer samples than blocks");
  if (thin < 1) fail(ErrorKind::InvalidArgument, "thin must be at least 1");
  FiberMeasure m;
  m.direction = direction;
  m.burn_in = burn_in;
  m.thin = thin;
  m.blocks = blocks;
  m.samples.resize(chain.size());
  m.block_of.resize(chain.size());
  const bool reversed = direction == Direction::Backward;

  Vertex x = chain.draw_stationary(rng);
  SigmaAccumulator acc(random_flag(f.dim(), rng));
  auto advance = [&] {
    const Vertex y = chain.step(x, rng, reversed);
    acc.apply(f.at(x, y));
    x = y;
  };
  for (std::size_t i = 0; i < burn_in; ++i) advance();
  for (std::size_t s = 0; s < samples; ++s) {
    for (std::size_t i = 0; i < thin; ++i) advance();
    m.samples[static_cast<std::size_t>(x)].push_back(acc.flag());
    m.block_of[static_cast<std::size_t>(x)].push_back(s * blocks / samples);
  }
  return m;
}

/// Flag-pair kernels evaluated many times: scratch space avoids allocation.
class FlagWorkspace {
 public:
  explicit FlagWorkspace(Eigen::Index d) : d_(d), joined_(d, d), cross_(d, d), lu_(d), chi_(d > 1 ? d - 1 : 0) {}

  double distance(const Flag& a, const Flag& b) {
    if (d_ == 2) {
      const auto& p = a.basis;
      const auto& q = b.basis;
      return std::numbers::sqrt2 * std::abs(p(0, 0) * q(1, 0) - p(1, 0) * q(0, 0));
    }
    cross_.noalias() = a.basis.transpose() * b.basis;
    double worst = 0.0;
    for (Eigen::Index k = 1; k < d_; ++k) worst = std::max(worst, cross_.bottomLeftCorner(d_ - k, k).squaredNorm());
    return std::sqrt(2.0 * worst);
  }

  /// Minimum over k of delta_k; the per-k values are left in delta_k().
  double delta(const Flag& xi, const Flag& eta) {
    double worst = 1.0;
    for (Eigen::Index k = 1; k < d_; ++k) {
      double det;
      if (d_ == 2) {
        det = xi.basis(0, 0) * eta.basis(1, 0) - xi.basis(1, 0) * eta.basis(0, 0);
      } else {
        joined_.leftCols(k) = xi.basis.leftCols(k);
        joined_.rightCols(d_ - k) = eta.basis.leftCols(d_ - k);
        lu_.compute(joined_);
        det = lu_.determinant();
      }
      chi_(k - 1) = std::min(1.0, std::abs(det));
      worst = std::min(worst, chi_(k - 1));
    }
    return worst;
  }

  /// Adds w * H(xi, eta) into out; returns false (adding nothing) when the
  /// pair is not in general position.
  bool add_busemann(const Flag& xi, const Flag& eta, double w, Vector& out) {
    if (!(delta(xi, eta) > 1e-12)) return false;
    double previous = 0.0;
    for (Eigen::Index k = 0; k + 1 < d_; ++k) {
      const double c = -std::log(chi_(k));
      out(k) += w * (c - previous);
      previous = c;
    }
    out(d_ - 1) -= w * previous;
    return true;
  }

 private:
  Eigen::Index d_;
  Matrix joined_;
  Matrix cross_;
  Eigen::PartialPivLU<Matrix> lu_;
  Vector chi_;
};

// ---------------------------------------------------------------------------
// Energy distance

struct WeightedPoint {
  Flag flag;
  double weight;
};

/// Unbiased energy statistic 2E|X-Y| - E|X-X'| - E|Y-Y'| for an
/// equal-weight X and a weighted Y (weights summing to one, diagonal pairs
/// excluded in both self terms).
inline double energy_statistic(const std::vector<const Flag*>& x, const std::vector<WeightedPoint>& y,
                               FlagWorkspace& ws) {
  const double n = static_cast<double>(x.size());
  double cross = 0.0;
  for (const Flag* a : x)
    for (const auto& b : y) cross += b.weight * ws.distance(*a, b.flag);
  cross /= n;
  double self_x = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t j = i + 1; j < x.size(); ++j) self_x += ws.distance(*x[i], *x[j]);
  self_x = 2.0 * self_x / (n * (n - 1.0));
  double self_y = 0.0, w2 = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    w2 += y[i].weight * y[i].weight;
    for (std::size_t j = i + 1; j < y.size(); ++j)
      self_y += y[i].weight * y[j].weight * ws.distance(y[i].flag, y[j].flag);
  }
  self_y = 2.0 * self_y / (1.0 - w2);
  return 2.0 * cross - self_x - self_y;
}

struct BlockStatistic {
  double value = 0.0;
  double se = 0.0;
  std::vector<double> per_block;

  /// value in units of its standard error (infinite when se is zero).
  double z() const {
    if (se > 0.0) return value / se;
    return value == 0.0 ? 0.0 : std::copysign(std::numeric_limits<double>::infinity(), value);
  }
};

inline BlockStatistic summarize_blocks(std::vector<double> per_block) {
  BlockStatistic out;
  out.value = stats::mean(per_block);
  out.se = stats::standard_error(per_block);
  out.per_block = std::move(per_block);
  return out;
}

inline std::vector<std::vector<const Flag*>> split_blocks(const FiberMeasure& m, Vertex v) {
  std::vector<std::vector<const Flag*>> out(m.blocks);
  const auto vi = static_cast<std::size_t>(v);
  for (std::size_t i = 0; i < m.samples[vi].size(); ++i) out[m.block_of[vi][i]].push_back(&m.samples[vi][i]);
  return out;
}

/// Energy statistic between the fiber at v and the one-step mixture of
/// pushed-forward fibers, per vertex, with block errors.
inline std::vector<BlockStatistic> stationarity_residual(const FiberMeasure& m, const MarkovChain& chain,
                                                         const EdgeCocycle& f, std::size_t min_samples = 1000) {
  const auto& k = direction_kernel(chain, m.direction);
  std::vector<BlockStatistic> out;
  FlagWorkspace ws(m.dim());
  std::vector<std::vector<std::vector<const Flag*>>> blocks(chain.size());
  for (Vertex v = 0; v < static_cast<Vertex>(chain.size()); ++v) {
    if (m.count(v) < min_samples)
      fail(ErrorKind::InsufficientSamples, "vertex " + chain.graph().name_of(v) + " has " +
                                               std::to_string(m.count(v)) + " samples, need " +
                                               std::to_string(min_samples));
    blocks[static_cast<std::size_t>(v)] = split_blocks(m, v);
  }
  for (Vertex v = 0; v < static_cast<Vertex>(chain.size()); ++v) {
    std::vector<double> per_block;
    for (std::size_t b = 0; b < m.blocks; ++b) {
      const auto& x = blocks[static_cast<std::size_t>(v)][b];
      std::vector<WeightedPoint> y;
      for (Vertex u = 0; u < static_cast<Vertex>(chain.size()); ++u) {
        const double kuv = k(u, v);
        const auto& src = blocks[static_cast<std::size_t>(u)][b];
        if (kuv <= 0.0 || src.empty()) continue;
        const double w = chain.pi(u) * kuv / chain.pi(v) / static_cast<double>(src.size());
        for (const Flag* s : src) y.push_back({iwasawa_step(f.at(u, v), *s).flag, w});
      }
      if (x.size() < 2 || y.size() < 2) continue;
      double total = 0.0;
      for (const auto& p : y) total += p.weight;
      for (auto& p : y) p.weight /= total;
      per_block.push_back(energy_statistic(x, y, ws));
    }
    if (per_block.size() < 2) fail(ErrorKind::InsufficientSamples, "too few populated blocks");
    out.push_back(summarize_blocks(std::move(per_block)));
  }
  return out;
}

/// Energy statistic between two fiber measures, vertex by vertex, pairing
/// block b of one run with block b of the other.
inline std::vector<BlockStatistic> fiber_energy_distance(const FiberMeasure& a, const FiberMeasure& b) {
  if (a.vertices() != b.vertices() || a.blocks != b.blocks)
    fail(ErrorKind::InvalidArgument, "fiber measures have different shapes");
  FlagWorkspace ws(a.dim());
  std::vector<BlockStatistic> out;
  for (Vertex v = 0; v < static_cast<Vertex>(a.vertices()); ++v) {
    const auto xa = split_blocks(a, v);
    const auto xb = split_blocks(b, v);
    std::vector<double> per_block;
    for (std::size_t k = 0; k < a.blocks; ++k) {
      if (xa[k].size() < 2 || xb[k].size() < 2) continue;
      std::vector<WeightedPoint> y;
      for (const Flag* p : xb[k]) y.push_back({*p, 1.0 / static_cast<double>(xb[k].size())});
      per_block.push_back(energy_statistic(xa[k], y, ws));
    }
    if (per_block.size() < 2) fail(ErrorKind::InsufficientSamples, "too few populated blocks");
    out.push_back(summarize_blocks(std::move(per_block)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Regularity

struct RegularityRow {
  Vertex vertex = 0;
  std::size_t test_flag = 0;
  double tau = 0.0;
  double estimate = 0.0;       // mean of delta^-tau over all samples
  double se = 0.0;
  double half_estimate = 0.0;  // same over the first half of the blocks
  bool stable = false;
};

struct RegularityProbe {
  std::vector<RegularityRow> rows;
  std::optional<double> largest_stable_tau;
};

/// Empirical moments of delta(xi, eta)^-tau over each fiber. Stable means
/// finite and consistent with the half-sample estimate within 3 combined SE.
inline RegularityProbe regularity_probe(const FiberMeasure& m, const std::vector<Flag>& test_flags,
                                        const std::vector<double>& tau_grid) {
  RegularityProbe out;
  FlagWorkspace ws(m.dim());
  std::map<double, bool> all_stable;
  for (Vertex v = 0; v < static_cast<Vertex>(m.vertices()); ++v) {
    const auto vi = static_cast<std::size_t>(v);
    for (std::size_t t = 0; t < test_flags.size(); ++t) {
      std::vector<double> delta(m.samples[vi].size());
      for (std::size_t i = 0; i < delta.size(); ++i) delta[i] = ws.delta(test_flags[t], m.samples[vi][i]);
      for (double tau : tau_grid) {
        std::vector<double> block_sum(m.blocks, 0.0), block_n(m.blocks, 0.0);
        for (std::size_t i = 0; i < delta.size(); ++i) {
          const double value = tau == 0.0 ? 1.0 : std::pow(delta[i], -tau);
          block_sum[m.block_of[vi][i]] += value;
          block_n[m.block_of[vi][i]] += 1.0;
        }
        RegularityRow row{v, t, tau};
        std::vector<double> means, half_means;
        double total = 0.0, count = 0.0, half_total = 0.0, half_count = 0.0;
        for (std::size_t b = 0; b < m.blocks; ++b) {
          if (block_n[b] == 0.0) continue;
          means.push_back(block_sum[b] / block_n[b]);
          total += block_sum[b];
          count += block_n[b];
          if (b < m.blocks / 2) {
            half_means.push_back(block_sum[b] / block_n[b]);
            half_total += block_sum[b];
            half_count += block_n[b];
          }
        }
        row.estimate = total / count;
        row.se = stats::standard_error(means);
        row.half_estimate = half_count > 0 ? half_total / half_count : row.estimate;
        const double half_se = stats::standard_error(half_means);
        row.stable = std::isfinite(row.estimate) && std::isfinite(row.half_estimate) &&
                     std::abs(row.estimate - row.half_estimate) <= 3.0 * std::hypot(row.se, half_se) + 1e-12;
        auto [it, inserted] = all_stable.emplace(tau, row.stable);
        if (!inserted) it->second = it->second && row.stable;
        out.rows.push_back(row);
      }
    }
  }
  for (const auto& [tau, ok] : all_stable)
    if (ok) out.largest_stable_tau = tau;
    else break;
  return out;
}

// ---------------------------------------------------------------------------
// Centering data

/// Mean of an AVector-valued functional with block errors.
struct AEstimate {
  AVector mean;
  AVector se;
  std::size_t rejected = 0;
  std::vector<Vector> block_means;  // per block index; empty where the block has no samples
};

/// Covariance of the estimation error of a.mean - b.mean, from blockwise
/// differences over blocks populated in both.
inline Matrix difference_noise(const AEstimate& a, const AEstimate& b) {
  const auto d = a.mean.size();
  std::vector<Vector> diffs;
  for (std::size_t i = 0; i < std::min(a.block_means.size(), b.block_means.size()); ++i)
    if (a.block_means[i].size() && b.block_means[i].size()) diffs.push_back(a.block_means[i] - b.block_means[i]);
  Matrix cov = Matrix::Zero(d, d);
  if (diffs.size() < 2) return cov;
  Vector mean = Vector::Zero(d);
  for (const auto& x : diffs) mean += x;
  mean /= static_cast<double>(diffs.size());
  for (const auto& x : diffs) cov += (x - mean) * (x - mean).transpose();
  const double k = static_cast<double>(diffs.size());
  return cov / ((k - 1.0) * k);
}

/// Accumulates per-block means of an AVector-valued functional over one fiber.
class BlockMean {
 public:
  BlockMean(Eigen::Index d, std::size_t blocks) : sums_(blocks, Vector::Zero(d)), counts_(blocks, 0.0), d_(d) {}

  Vector& block(std::size_t b) { return sums_[b]; }
  void count(std::size_t b) { counts_[b] += 1.0; }

  AEstimate finish(std::size_t rejected = 0) const {
    AEstimate out{AVector::zero(d_), AVector::zero(d_), rejected, std::vector<Vector>(sums_.size())};
    double n = 0.0;
    std::vector<Vector> means;
    for (std::size_t b = 0; b < sums_.size(); ++b) {
      if (counts_[b] == 0.0) continue;
      out.mean.t += sums_[b];
      n += counts_[b];
      means.push_back(sums_[b] / counts_[b]);
      out.block_means[b] = means.back();
    }
    if (n > 0) out.mean.t /= n;
    if (means.size() >= 2) {
      for (Eigen::Index i = 0; i < d_; ++i) {
        std::vector<double> c;
        for (const auto& m : means) c.push_back(m(i));
        out.se[i] = stats::standard_error(c);
      }
    }
    return out;
  }

 private:
  std::vector<Vector> sums_;
  std::vector<double> counts_;
  Eigen::Index d_;
};

/// h0(v, xi) = mean over the backward fiber at v of H(xi, zeta).
inline AEstimate estimate_h0(const FiberMeasure& backward, Vertex v, const Flag& xi) {
  const auto vi = static_cast<std::size_t>(v);
  if (vi >= backward.vertices()) fail(ErrorKind::UnknownVertex, "vertex out of range");
  const auto d = xi.dim();
  FlagWorkspace ws(d);
  BlockMean acc(d, backward.blocks);
  std::size_t rejected = 0;
  const auto& s = backward.samples[vi];
  for (std::size_t i = 0; i < s.size(); ++i) {
    const auto b = backward.block_of[vi][i];
    if (ws.add_busemann(xi, s[i], 1.0, acc.block(b))) acc.count(b);
    else ++rejected;
  }
  if (s.empty()) fail(ErrorKind::InsufficientSamples, "empty fiber");
  if (static_cast<double>(rejected) > 0.01 * static_cast<double>(s.size()))
    fail(ErrorKind::TooManyRejections, std::to_string(rejected) + " of " + std::to_string(s.size()) +
                                           " fiber samples not in general position with the flag");
  return acc.finish(rejected);
}

enum class L0Convention {
  Backward,   // -mean of iota sigma(f_uv^{-1}, .) over the backward fiber at v
  Forward,    // +mean of iota sigma(f_uv^{-1}, .) over the forward fiber at u
  Flipped,    // negated Backward
};

constexpr std::string_view to_string(L0Convention c) {
  switch (c) {
    case L0Convention::Backward: return "backward";
    case L0Convention::Forward: return "forward";
    case L0Convention::Flipped: return "flipped";
  }
  return "unknown";
}

constexpr double l0_sign(L0Convention c) { return c == L0Convention::Backward ? -1.0 : 1.0; }

inline AEstimate estimate_L0(const FiberMeasure& measure, const EdgeCocycle& f, Vertex u, Vertex v,
                             L0Convention convention = L0Convention::Backward) {
  const bool at_v = convention != L0Convention::Forward;
  const Vertex where = at_v ? v : u;
  const auto wi = static_cast<std::size_t>(where);
  if (wi >= measure.vertices() || measure.samples[wi].empty())
    fail(ErrorKind::InsufficientSamples, "no fiber samples at the edge endpoint");
  const double sign = l0_sign(convention);
  const Matrix& inverse = f.at(v, u);
  BlockMean acc(f.dim(), measure.blocks);
  const auto& s = measure.samples[wi];
  for (std::size_t i = 0; i < s.size(); ++i) {
    const auto b = measure.block_of[wi][i];
    acc.block(b) += sign * opposition_iota(iwasawa_step(inverse, s[i]).sigma).t;
    acc.count(b);
  }
  return acc.finish();
}

struct PotentialFit {
  std::vector<AVector> psi;   // psi(first vertex) = 0
  double fit_residual = 0.0;  // max edge deviation
};

/// Least-squares psi with L0(u,v) ~ -Lambda + psi(u) - psi(v) on every edge.
inline PotentialFit potential_decomposition(const GraphSpec& graph, const std::map<std::pair<Vertex, Vertex>, AVector>& L0,
                                            const AVector& lambda) {
  const auto n = static_cast<Eigen::Index>(graph.size());
  const auto d = lambda.size();
  const auto edges = static_cast<Eigen::Index>(graph.edges.size());
  Matrix a = Matrix::Zero(edges + 1, n);
  Matrix rhs = Matrix::Zero(edges + 1, d);
  Eigen::Index row = 0;
  for (const auto& [u, v] : graph.edges) {
    if (u != v) {
      a(row, u) += 1.0;
      a(row, v) -= 1.0;
    }
    rhs.row(row) = (L0.at({u, v}) + lambda).t.transpose();
    ++row;
  }
  a(edges, 0) = 1.0;  // gauge
  const Matrix psi = a.colPivHouseholderQr().solve(rhs);
  PotentialFit out;
  for (Eigen::Index v = 0; v < n; ++v) out.psi.push_back(AVector(psi.row(v).transpose()));
  for (const auto& [u, v] : graph.edges) {
    const auto predicted = -1.0 * lambda + out.psi[static_cast<std::size_t>(u)] - out.psi[static_cast<std::size_t>(v)];
    out.fit_residual = std::max(out.fit_residual, (L0.at({u, v}) - predicted).t.cwiseAbs().maxCoeff());
  }
  return out;
}

/// phi with (I - P) phi = gbar - (pi . gbar), pi . phi = 0, where
/// gbar(u) = sum_v p_uv (L0(u,v) + Lambda).
inline std::vector<AVector> poisson_potential(const MarkovChain& chain,
                                              const std::map<std::pair<Vertex, Vertex>, AVector>& L0,
                                              const AVector& lambda) {
  const auto n = static_cast<Eigen::Index>(chain.size());
  const auto d = lambda.size();
  Matrix gbar = Matrix::Zero(n, d);
  for (const auto& [e, l] : L0) gbar.row(e.first) += chain.p(e.first, e.second) * (l + lambda).t.transpose();
  gbar.rowwise() -= chain.stationary().transpose() * gbar;
  const Matrix system = Matrix::Identity(n, n) - chain.kernel() + Vector::Ones(n) * chain.stationary().transpose();
  const Matrix phi = system.partialPivLu().solve(gbar);
  std::vector<AVector> out;
  for (Eigen::Index v = 0; v < n; ++v) out.push_back(AVector(phi.row(v).transpose()));
  return out;
}

/// Immutable centering data: fiber measures, the L0 table, the edge-wise
/// potential fit and the Poisson potential that absorbs the Markov part.
class CenteringData {
 public:
  CenteringData(const MarkovChain& chain, const EdgeCocycle& f, std::shared_ptr<const FiberMeasure> backward,
                std::shared_ptr<const FiberMeasure> forward, AVector lambda,
                L0Convention convention = L0Convention::Backward)
      : chain_(&chain), f_(&f), backward_(std::move(backward)), forward_(std::move(forward)),
        lambda_(std::move(lambda)), convention_(convention) {
    if (!backward_ || backward_->direction != Direction::Backward)
      fail(ErrorKind::InvalidArgument, "centering needs a backward fiber measure");
    if (convention_ == L0Convention::Forward && !forward_)
      fail(ErrorKind::InvalidArgument, "forward L0 convention needs a forward fiber measure");
    const FiberMeasure& source = convention_ == L0Convention::Forward ? *forward_ : *backward_;
    for (const auto& [u, v] : chain.graph().edges) {
      auto est = estimate_L0(source, f, u, v, convention_);
      L0_[{u, v}] = est.mean;
      L0_se_[{u, v}] = est.se;
    }
    fit_ = potential_decomposition(chain.graph(), L0_, lambda_);
    phi_ = poisson_potential(chain, L0_, lambda_);
  }

  const MarkovChain& chain() const { return *chain_; }
  const EdgeCocycle& cocycle() const { return *f_; }
  const FiberMeasure& backward() const { return *backward_; }
  const FiberMeasure* forward() const { return forward_.get(); }
  const AVector& lambda() const { return lambda_; }
  L0Convention convention() const { return convention_; }
  const std::map<std::pair<Vertex, Vertex>, AVector>& L0() const { return L0_; }
  const std::map<std::pair<Vertex, Vertex>, AVector>& L0_se() const { return L0_se_; }
  const PotentialFit& potential() const { return fit_; }
  const std::vector<AVector>& poisson() const { return phi_; }

  AVector h0(Vertex v, const Flag& xi) const { return estimate_h0(*backward_, v, xi).mean; }

  /// h0 + phi, the potential that makes s' a martingale difference.
  AVector h_tilde(Vertex v, const Flag& xi) const { return h0(v, xi) + phi_[static_cast<std::size_t>(v)]; }

  /// s'(u, v, xi) = sigma(f_uv, xi) - Lambda - h~(v, f_uv xi) + h~(u, xi).
  AVector s_prime(Vertex u, Vertex v, const Flag& xi) const { return s_prime_with_noise(u, v, xi).value; }

  struct SPrime {
    AVector value;
    Matrix noise;  // covariance of the error from the two h0 estimates
  };

  SPrime s_prime_with_noise(Vertex u, Vertex v, const Flag& xi) const {
    const auto step = iwasawa_step(f_->at(u, v), xi);
    const auto at_u = estimate_h0(*backward_, u, xi);
    const auto at_v = estimate_h0(*backward_, v, step.flag);
    return {step.sigma - lambda_ - (at_v.mean + phi_[static_cast<std::size_t>(v)]) +
                (at_u.mean + phi_[static_cast<std::size_t>(u)]),
            difference_noise(at_u, at_v)};
  }

  /// Sum over edges of pi(u) p_uv L0(u,v); should equal -Lambda.
  AVector weighted_L0() const {
    AVector s = AVector::zero(lambda_.size());
    for (const auto& [e, l] : L0_) s += chain_->pi(e.first) * chain_->p(e.first, e.second) * l;
    return s;
  }

  /// Block SE of the weighted L0 sum.
  AVector weighted_L0_se() const {
    const FiberMeasure& source = convention_ == L0Convention::Forward ? *forward_ : *backward_;
    std::vector<Vector> sums(source.blocks, Vector::Zero(lambda_.size()));
    for (const auto& [e, l] : L0_) {
      const auto [u, v] = e;
      const Vertex where = convention_ == L0Convention::Forward ? u : v;
      const auto wi = static_cast<std::size_t>(where);
      const double sign = l0_sign(convention_);
      std::vector<Vector> bs(source.blocks, Vector::Zero(lambda_.size()));
      std::vector<double> bn(source.blocks, 0.0);
      for (std::size_t i = 0; i < source.samples[wi].size(); ++i) {
        const auto b = source.block_of[wi][i];
        bs[b] += sign * opposition_iota(iwasawa_step(f_->at(v, u), source.samples[wi][i]).sigma).t;
        bn[b] += 1.0;
      }
      for (std::size_t b = 0; b < source.blocks; ++b)
        if (bn[b] > 0) sums[b] += chain_->pi(u) * chain_->p(u, v) * bs[b] / bn[b];
    }
    AVector se = AVector::zero(lambda_.size());
    for (Eigen::Index i = 0; i < lambda_.size(); ++i) {
      std::vector<double> c;
      for (const auto& s : sums) c.push_back(s(i));
      se[i] = stats::standard_error(c);
    }
    return se;
  }

 private:
  const MarkovChain* chain_;
  const EdgeCocycle* f_;
  std::shared_ptr<const FiberMeasure> backward_;
  std::shared_ptr<const FiberMeasure> forward_;
  AVector lambda_;
  L0Convention convention_;
  std::map<std::pair<Vertex, Vertex>, AVector> L0_;
  std::map<std::pair<Vertex, Vertex>, AVector> L0_se_;
  PotentialFit fit_;
  std::vector<AVector> phi_;
};

/// r(u, xi) = sum_v p_uv [sigma(f_uv, xi) - h0(v, f_uv xi) + h0(u, xi) + L0(u,v)],
/// recomputed block by block for the error. `convention` overrides the one
/// stored in the centering data.
inline AEstimate martingale_residual(const CenteringData& c, Vertex u, const Flag& xi,
                                     std::optional<L0Convention> convention = std::nullopt) {
  const auto conv = convention.value_or(c.convention());
  const MarkovChain& chain = c.chain();
  const EdgeCocycle& f = c.cocycle();
  const auto d = f.dim();
  const FiberMeasure& back = c.backward();
  const FiberMeasure* l0_source = conv == L0Convention::Forward ? c.forward() : &back;
  if (!l0_source) fail(ErrorKind::InvalidArgument, "forward L0 convention needs a forward fiber measure");
  const std::size_t blocks = back.blocks;
  FlagWorkspace ws(d);

  // Per block: block-restricted means of every fiber functional involved.
  std::vector<Vector> total(blocks, Vector::Zero(d));
  Vector overall = Vector::Zero(d);
  auto add_mean = [&](const FiberMeasure& m, Vertex where, double weight, auto&& functional) {
    const auto wi = static_cast<std::size_t>(where);
    std::vector<Vector> bs(blocks, Vector::Zero(d));
    std::vector<double> bn(blocks, 0.0);
    Vector all = Vector::Zero(d);
    double n = 0.0;
    Vector tmp(d);
    for (std::size_t i = 0; i < m.samples[wi].size(); ++i) {
      tmp.setZero();
      if (!functional(m.samples[wi][i], tmp)) continue;
      const auto b = m.block_of[wi][i];
      bs[b] += tmp;
      bn[b] += 1.0;
      all += tmp;
      n += 1.0;
    }
    if (n == 0.0) fail(ErrorKind::InsufficientSamples, "empty fiber in martingale residual");
    overall += weight * all / n;
    for (std::size_t b = 0; b < blocks; ++b) total[b] += weight * (bn[b] > 0 ? Vector(bs[b] / bn[b]) : Vector(all / n));
  };

  Vector constant = Vector::Zero(d);
  for (Vertex v : chain.graph().neighbors(u)) {
    const double p = chain.p(u, v);
    const auto step = iwasawa_step(f.at(u, v), xi);
    constant += p * step.sigma.t;
    const Flag moved = step.flag;
    add_mean(back, v, -p, [&](const Flag& z, Vector& out) { return ws.add_busemann(moved, z, 1.0, out); });
    const double sign = l0_sign(conv);
    const Vertex where = conv == L0Convention::Forward ? u : v;
    const Matrix& inverse = f.at(v, u);
    add_mean(*l0_source, where, p, [&](const Flag& z, Vector& out) {
      out += sign * opposition_iota(iwasawa_step(inverse, z).sigma).t;
      return true;
    });
  }
  add_mean(back, u, 1.0, [&](const Flag& z, Vector& out) { return ws.add_busemann(xi, z, 1.0, out); });

  AEstimate out{AVector(constant + overall), AVector::zero(d), 0, {}};
  for (Eigen::Index i = 0; i < d; ++i) {
    std::vector<double> c1;
    for (const auto& t : total) c1.push_back(t(i));
    out.se[i] = stats::standard_error(c1);
  }
  return out;
}

/// Lambda from the stationary measure: sum pi(u) p_uv mean sigma(f_uv, .)
/// over the forward fiber at u, with block errors.
inline AEstimate stationary_lyapunov(const FiberMeasure& forward, const MarkovChain& chain, const EdgeCocycle& f) {
  const auto d = f.dim();
  const std::size_t blocks = forward.blocks;
  std::vector<Vector> total(blocks, Vector::Zero(d));
  Vector overall = Vector::Zero(d);
  for (const auto& [u, v] : chain.graph().edges) {
    const double w = chain.pi(u) * chain.p(u, v);
    const auto ui = static_cast<std::size_t>(u);
    std::vector<Vector> bs(blocks, Vector::Zero(d));
    std::vector<double> bn(blocks, 0.0);
    Vector all = Vector::Zero(d);
    for (std::size_t i = 0; i < forward.samples[ui].size(); ++i) {
      const Vector s = iwasawa_step(f.at(u, v), forward.samples[ui][i]).sigma.t;
      bs[forward.block_of[ui][i]] += s;
      bn[forward.block_of[ui][i]] += 1.0;
      all += s;
    }
    const double n = static_cast<double>(forward.samples[ui].size());
    if (n == 0) fail(ErrorKind::InsufficientSamples, "empty forward fiber");
    overall += w * all / n;
    for (std::size_t b = 0; b < blocks; ++b) total[b] += w * (bn[b] > 0 ? Vector(bs[b] / bn[b]) : Vector(all / n));
  }
  AEstimate out{AVector(overall), AVector::zero(d), 0, {}};
  for (Eigen::Index i = 0; i < d; ++i) {
    std::vector<double> c;
    for (const auto& t : total) c.push_back(t(i));
    out.se[i] = stats::standard_error(c);
  }
  return out;
}

}  // namespace cocycle_clt
