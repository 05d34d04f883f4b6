#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <vector>

#include "cocycle_clt/cocycle_engine.hpp"
#include "cocycle_clt/error.hpp"
#include "cocycle_clt/lie_sl.hpp"
#include "cocycle_clt/markov_sft.hpp"
#include "cocycle_clt/stats.hpp"

namespace cocycle_clt {

/// First-return loop at a vertex together with its probability and product.
struct ReturnLoop {
  std::vector<Vertex> loop;
  double probability = 0.0;
  Matrix product;

  std::size_t length() const { return loop.size() - 1; }
};

struct InducedLaw {
  Vertex base = 0;
  std::size_t max_len = 0;
  std::vector<ReturnLoop> loops;
  double tail_mass = 1.0;

  double enumerated_mass() const {
    double s = 0.0;
    for (const auto& l : loops) s += l.probability;
    return s;
  }

  /// Total probability of loops of each length 1..max_len.
  std::vector<double> mass_by_length() const {
    std::vector<double> m(max_len + 1, 0.0);
    for (const auto& l : loops) m[l.length()] += l.probability;
    return m;
  }
};

/// Depth-first enumeration of first returns to v of length <= max_len.
/// The tail is 1 minus the enumerated mass; no renormalization.
inline InducedLaw enumerate_first_returns(const MarkovChain& chain, const EdgeCocycle& f, Vertex v,
                                          std::size_t max_len, std::size_t cap = 10'000'000) {
  chain.check_vertex(v);
  if (max_len < 1) fail(ErrorKind::InvalidArgument, "max_len must be at least 1");
  InducedLaw law;
  law.base = v;
  law.max_len = max_len;

  std::vector<Vertex> path{v};
  const auto neighbors = [&](Vertex u) { return chain.graph().neighbors(u); };

  // explicit recursion keeps the path buffer shared across branches
  const std::function<void(Vertex, double, const Matrix&)> extend = [&](Vertex u, double p, const Matrix& m) {
    for (Vertex w : neighbors(u)) {
      const double q = p * chain.p(u, w);
      const Matrix next = f.at(u, w) * m;
      path.push_back(w);
      if (w == v) {
        if (law.loops.size() >= cap)
          fail(ErrorKind::ExplosionGuard, "more than " + std::to_string(cap) + " first-return loops");
        law.loops.push_back({path, q, next});
      } else if (path.size() - 1 < max_len) {
        extend(w, q, next);
      }
      path.pop_back();
    }
  };
  extend(v, 1.0, Matrix::Identity(f.dim(), f.dim()));
  law.tail_mass = std::max(0.0, 1.0 - law.enumerated_mass());
  return law;
}

struct TailFit {
  double lambda = 0.0;
  double amplitude = 0.0;
};

/// Least squares of log(mass at length n) against n.
inline TailFit tail_decay_fit(const InducedLaw& law) {
  const auto m = law.mass_by_length();
  std::vector<double> x, y;
  for (std::size_t n = 1; n < m.size(); ++n) {
    if (m[n] > 0.0) {
      x.push_back(static_cast<double>(n));
      y.push_back(std::log(m[n]));
    }
  }
  if (x.size() < 5) fail(ErrorKind::InsufficientData, "need at least 5 distinct loop lengths");
  const auto fit = stats::fit_line(x, y);
  return {std::exp(fit.slope), std::exp(fit.intercept)};
}

struct KacStatistic {
  double mean_return = 0.0;   // truncated sum of |l| p_l
  double lower = 0.0;         // with every tail loop at length max_len + 1
  double upper = 0.0;         // with a geometric tail at the fitted rate
  double expected = 0.0;      // 1 / pi(v)
  double bound_gap = 0.0;     // distance from expected to [lower, upper]
};

inline KacStatistic kac_statistic(const InducedLaw& law, double pi_v) {
  if (law.tail_mass > 0.1)
    fail(ErrorKind::TailTooHeavy, "tail mass " + std::to_string(law.tail_mass) + " exceeds 0.1");
  KacStatistic out;
  for (const auto& l : law.loops) out.mean_return += static_cast<double>(l.length()) * l.probability;
  const double len = static_cast<double>(law.max_len);
  out.lower = out.mean_return + law.tail_mass * (len + 1.0);
  double rate = 0.5;
  try {
    rate = tail_decay_fit(law).lambda;
  } catch (const Error&) {
  }
  rate = std::clamp(rate, 0.0, 1.0 - 1e-9);
  out.upper = out.mean_return + law.tail_mass * (len + 1.0 / (1.0 - rate));
  out.expected = 1.0 / pi_v;
  out.bound_gap = std::max({0.0, out.lower - out.expected, out.expected - out.upper});
  return out;
}

struct MomentRow {
  double tau = 0.0;
  double sum = 0.0;          // sum over enumerated loops of p_l ||f_l||^tau
  double growth_rate = 0.0;  // fitted per-length ratio of the length-n terms
  bool converges = false;
};

struct MomentProbe {
  std::vector<MomentRow> rows;
  std::optional<double> largest_convergent_tau;
};

/// Partial sums of the exponential moment, split by loop length. A grid
/// point converges when the length-n terms decay geometrically over the
/// upper half of the enumerated lengths.
inline MomentProbe exponential_moment_probe(const InducedLaw& law, const std::vector<double>& tau_grid) {
  MomentProbe out;
  for (double tau : tau_grid) {
    std::vector<double> by_len(law.max_len + 1, 0.0);
    MomentRow row;
    row.tau = tau;
    for (const auto& l : law.loops) {
      const double term = l.probability * std::pow(operator_norm(l.product), tau);
      by_len[l.length()] += term;
      row.sum += term;
    }
    std::vector<double> x, y;
    for (std::size_t n = std::max<std::size_t>(1, law.max_len / 2); n <= law.max_len; ++n) {
      if (by_len[n] > 0.0) {
        x.push_back(static_cast<double>(n));
        y.push_back(std::log(by_len[n]));
      }
    }
    if (x.size() >= 2) {
      row.growth_rate = std::exp(stats::fit_line(x, y).slope);
      row.converges = row.growth_rate < 1.0;
    } else {
      row.converges = true;
    }
    if (row.converges && (!out.largest_convergent_tau || tau > *out.largest_convergent_tau))
      out.largest_convergent_tau = tau;
    out.rows.push_back(row);
  }
  return out;
}

/// Sufficient exponent from the tail rate and the largest edge norm.
inline double moment_threshold(double lambda, double max_edge_norm) {
  return std::log(1.0 / lambda) / std::log(max_edge_norm);
}

struct InducedEstimate {
  LyapunovEstimate induced;             // per return
  std::vector<std::size_t> return_lengths;
};

/// Lyapunov spectrum of the induced iid walk. With a law, loops are drawn
/// from the enumeration and the tail is completed by rejection-simulating
/// the chain, so the sampled law is exact; without one the chain is run and
/// cut at returns. Errors are batch means over about sqrt(returns) blocks.
inline InducedEstimate induced_lyapunov(const MarkovChain& chain, const EdgeCocycle& f, Vertex v,
                                        std::size_t returns, Rng& rng, const InducedLaw* law = nullptr) {
  chain.check_vertex(v);
  if (returns < 4) fail(ErrorKind::InvalidArgument, "need at least 4 returns");
  if (law && law->tail_mass > 0.01)
    fail(ErrorKind::TailTooHeavy, "tail mass " + std::to_string(law->tail_mass) + " exceeds 0.01");
  const auto d = f.dim();
  const WedgeTables tables(f);
  KappaAccumulator acc(tables);

  std::vector<double> cumulative;
  if (law) {
    double s = 0.0;
    for (const auto& l : law->loops) cumulative.push_back(s += l.probability);
  }

  const auto batches = std::max<std::size_t>(2, static_cast<std::size_t>(std::sqrt(static_cast<double>(returns))));
  const std::size_t batch_len = returns / batches;
  std::vector<std::vector<double>> batch_sums(static_cast<std::size_t>(d), std::vector<double>(batches, 0.0));

  InducedEstimate out;
  out.return_lengths.reserve(returns);
  std::vector<Vertex> buffer;
  for (std::size_t r = 0; r < returns; ++r) {
    const auto scales_before = acc.log_scales();
    std::size_t length = 0;
    const double u = rng.uniform();
    if (law && !cumulative.empty() && u < cumulative.back()) {
      const auto it = std::upper_bound(cumulative.begin(), cumulative.end(), u);
      const auto& loop = law->loops[static_cast<std::size_t>(std::min<std::ptrdiff_t>(
          it - cumulative.begin(), static_cast<std::ptrdiff_t>(cumulative.size()) - 1))];
      for (std::size_t i = 0; i + 1 < loop.loop.size(); ++i) acc.step(loop.loop[i], loop.loop[i + 1]);
      length = loop.length();
    } else {
      // run until a return; with a law, reject returns already enumerated
      while (true) {
        buffer.assign(1, v);
        Vertex x = v;
        do {
          x = chain.step(x, rng);
          buffer.push_back(x);
        } while (x != v);
        if (!law || buffer.size() - 1 > law->max_len) break;
      }
      for (std::size_t i = 0; i + 1 < buffer.size(); ++i) acc.step(buffer[i], buffer[i + 1]);
      length = buffer.size() - 1;
    }
    out.return_lengths.push_back(length);

    const std::size_t b = r / batch_len;
    if (b >= batches) continue;
    const auto& scales = acc.log_scales();
    double previous = 0.0;
    for (std::size_t k = 0; k + 1 < static_cast<std::size_t>(d); ++k) {
      const double inc = scales[k] - scales_before[k];
      batch_sums[k][b] += inc - previous;
      previous = inc;
    }
    batch_sums[static_cast<std::size_t>(d) - 1][b] -= previous;
  }
  out.induced.steps = returns;
  out.induced.lambda = acc.kappa() * (1.0 / static_cast<double>(returns));
  for (auto& sums : batch_sums) {
    for (double& s : sums) s /= static_cast<double>(batch_len);
    out.induced.standard_errors.push_back(stats::standard_error(sums));
  }
  return out;
}

/// Largest Frobenius norm of a commutator among the first `count` loops;
/// zero when the sampled periodic data is abelian.
inline double loop_commutator_norm(const InducedLaw& law, std::size_t count = 64) {
  const std::size_t n = std::min(count, law.loops.size());
  double worst = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const Matrix& a = law.loops[i].product;
      const Matrix& b = law.loops[j].product;
      worst = std::max(worst, (a * b - b * a).norm() / (a.norm() * b.norm()));
    }
  return worst;
}

}  // namespace cocycle_clt
