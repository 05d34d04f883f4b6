#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <queue>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "cocycle_clt/error.hpp"
#include "cocycle_clt/random.hpp"

namespace cocycle_clt {

using Vertex = int;

/// Finite graph with named vertices and a directed edge set that must be
/// closed under reversal.
struct GraphSpec {
  std::vector<std::string> vertices;
  std::set<std::pair<Vertex, Vertex>> edges;

  std::size_t size() const { return vertices.size(); }

  bool has_edge(Vertex u, Vertex v) const { return edges.contains({u, v}); }

  Vertex index_of(const std::string& name) const {
    const auto it = std::find(vertices.begin(), vertices.end(), name);
    if (it == vertices.end()) fail(ErrorKind::UnknownVertex, "no vertex named '" + name + "'");
    return static_cast<Vertex>(it - vertices.begin());
  }

  const std::string& name_of(Vertex v) const {
    if (v < 0 || static_cast<std::size_t>(v) >= vertices.size())
      fail(ErrorKind::UnknownVertex, "vertex index " + std::to_string(v) + " out of range");
    return vertices[static_cast<std::size_t>(v)];
  }

  std::vector<Vertex> neighbors(Vertex u) const {
    std::vector<Vertex> out;
    for (auto it = edges.lower_bound({u, -1}); it != edges.end() && it->first == u; ++it)
      out.push_back(it->second);
    return out;
  }
};

struct GraphDiagnostics {
  bool connected = false;
  int loop_gcd = 0;
};

/// Connectivity and the gcd of closed-loop lengths at the first vertex.
inline GraphDiagnostics validate_graph(const GraphSpec& spec) {
  if (spec.vertices.empty()) fail(ErrorKind::EmptyGraph, "graph has no vertices");
  const auto n = static_cast<Vertex>(spec.size());
  for (const auto& [u, v] : spec.edges) {
    if (u < 0 || v < 0 || u >= n || v >= n)
      fail(ErrorKind::UnknownVertex, "edge endpoint out of range");
    if (!spec.has_edge(v, u))
      fail(ErrorKind::AsymmetricEdgeSet, "edge (" + spec.name_of(u) + "," + spec.name_of(v) +
                                             ") present but (" + spec.name_of(v) + "," +
                                             spec.name_of(u) + ") missing");
  }

  // BFS levels from vertex 0; for a strongly connected digraph the period
  // equals gcd over edges (u,w) of level(u) + 1 - level(w).
  std::vector<int> level(spec.size(), -1);
  std::queue<Vertex> frontier;
  level[0] = 0;
  frontier.push(0);
  while (!frontier.empty()) {
    const Vertex u = frontier.front();
    frontier.pop();
    for (Vertex w : spec.neighbors(u)) {
      if (level[static_cast<std::size_t>(w)] < 0) {
        level[static_cast<std::size_t>(w)] = level[static_cast<std::size_t>(u)] + 1;
        frontier.push(w);
      }
    }
  }
  GraphDiagnostics out;
  out.connected = std::all_of(level.begin(), level.end(), [](int l) { return l >= 0; });
  int g = 0;
  for (const auto& [u, w] : spec.edges) {
    const int lu = level[static_cast<std::size_t>(u)];
    const int lw = level[static_cast<std::size_t>(w)];
    if (lu < 0 || lw < 0) continue;
    g = std::gcd(g, std::abs(lu + 1 - lw));
  }
  out.loop_gcd = g;
  return out;
}

/// Power iteration for the left Perron vector of a row-stochastic kernel.
inline Eigen::VectorXd stationary_vector(const Eigen::MatrixXd& kernel, double tolerance = 1e-12,
                                         long max_iterations = 1'000'000) {
  const auto n = kernel.rows();
  if (n == 0 || kernel.cols() != n) fail(ErrorKind::InvalidArgument, "kernel must be square");
  Eigen::RowVectorXd pi = Eigen::RowVectorXd::Constant(n, 1.0 / static_cast<double>(n));
  Eigen::RowVectorXd next(n);
  for (long it = 0; it < max_iterations; ++it) {
    next.noalias() = pi * kernel;
    next /= next.sum();
    const double residual = (next - pi).cwiseAbs().maxCoeff();
    pi.swap(next);
    if (residual <= tolerance) {
      if ((pi * kernel - pi).cwiseAbs().maxCoeff() <= tolerance) return pi.transpose();
    }
  }
  fail(ErrorKind::NoConvergence,
       "power iteration did not converge after " + std::to_string(max_iterations) + " iterations");
}

/// Time reversal: reversed(v,u) = pi(u) * kernel(u,v) / pi(v).
inline Eigen::MatrixXd reverse_kernel(const Eigen::MatrixXd& kernel, const Eigen::VectorXd& pi) {
  const auto n = kernel.rows();
  Eigen::MatrixXd out(n, n);
  for (Eigen::Index v = 0; v < n; ++v)
    for (Eigen::Index u = 0; u < n; ++u) out(v, u) = pi(u) * kernel(u, v) / pi(v);
  return out;
}

struct FromStationary {};
using StartSpec = std::variant<Vertex, FromStationary>;

struct Trajectory {
  std::vector<Vertex> vertices;

  std::size_t steps() const { return vertices.empty() ? 0 : vertices.size() - 1; }
};

/// Immutable mixing Markov chain; safe to share across threads.
class MarkovChain {
 public:
  MarkovChain(GraphSpec graph, Eigen::MatrixXd kernel) : graph_(std::move(graph)), kernel_(std::move(kernel)) {
    const auto diag = validate_graph(graph_);
    if (!diag.connected) fail(ErrorKind::InvalidGraph, "graph is not connected");
    if (diag.loop_gcd != 1)
      fail(ErrorKind::InvalidGraph,
           "graph is periodic (loop gcd " + std::to_string(diag.loop_gcd) + ")");
    const auto n = static_cast<Eigen::Index>(graph_.size());
    if (kernel_.rows() != n || kernel_.cols() != n)
      fail(ErrorKind::ValidationError, "kernel dimension does not match vertex count");
    for (Eigen::Index u = 0; u < n; ++u) {
      for (Eigen::Index v = 0; v < n; ++v) {
        const double p = kernel_(u, v);
        const bool edge = graph_.has_edge(static_cast<Vertex>(u), static_cast<Vertex>(v));
        if (p < 0.0 || (edge != (p > 0.0)))
          fail(ErrorKind::ValidationError, "kernel entry (" + graph_.name_of(static_cast<Vertex>(u)) +
                                               "," + graph_.name_of(static_cast<Vertex>(v)) +
                                               ") inconsistent with edge set");
      }
      if (std::abs(kernel_.row(u).sum() - 1.0) > 1e-12)
        fail(ErrorKind::ValidationError,
             "kernel row " + graph_.name_of(static_cast<Vertex>(u)) + " does not sum to 1");
    }
    stationary_ = stationary_vector(kernel_);
    reversed_ = reverse_kernel(kernel_, stationary_);
    forward_table_ = make_table(kernel_);
    reversed_table_ = make_table(reversed_);
    pi_cumulative_.resize(static_cast<std::size_t>(n));
    double acc = 0.0;
    for (Eigen::Index v = 0; v < n; ++v) pi_cumulative_[static_cast<std::size_t>(v)] = acc += stationary_(v);
  }

  const GraphSpec& graph() const { return graph_; }
  std::size_t size() const { return graph_.size(); }
  const Eigen::MatrixXd& kernel() const { return kernel_; }
  const Eigen::VectorXd& stationary() const { return stationary_; }
  const Eigen::MatrixXd& reversed_kernel() const { return reversed_; }

  /// The reversal preserves the stationary vector.
  const Eigen::VectorXd& reversed_stationary() const { return stationary_; }

  double p(Vertex u, Vertex v) const { return kernel_(u, v); }
  double pi(Vertex v) const { return stationary_(v); }

  Vertex draw_stationary(Rng& rng) const { return static_cast<Vertex>(rng.categorical(pi_cumulative_)); }

  Vertex step(Vertex u, Rng& rng, bool reversed = false) const {
    const auto& row = (reversed ? reversed_table_ : forward_table_)[static_cast<std::size_t>(u)];
    return row.targets[rng.categorical(row.cumulative)];
  }

  void check_vertex(Vertex v) const { (void)graph_.name_of(v); }

 private:
  struct Row {
    std::vector<Vertex> targets;
    std::vector<double> cumulative;
  };

  std::vector<Row> make_table(const Eigen::MatrixXd& k) const {
    std::vector<Row> rows(graph_.size());
    for (std::size_t u = 0; u < graph_.size(); ++u) {
      double acc = 0.0;
      for (std::size_t v = 0; v < graph_.size(); ++v) {
        const double p = k(static_cast<Eigen::Index>(u), static_cast<Eigen::Index>(v));
        if (p > 0.0) {
          rows[u].targets.push_back(static_cast<Vertex>(v));
          rows[u].cumulative.push_back(acc += p);
        }
      }
    }
    return rows;
  }

  GraphSpec graph_;
  Eigen::MatrixXd kernel_;
  Eigen::VectorXd stationary_;
  Eigen::MatrixXd reversed_;
  std::vector<Row> forward_table_;
  std::vector<Row> reversed_table_;
  std::vector<double> pi_cumulative_;
};

inline Trajectory sample_trajectory(const MarkovChain& chain, const StartSpec& start, std::size_t length,
                                    Rng& rng) {
  Trajectory out;
  out.vertices.reserve(length + 1);
  Vertex x = 0;
  if (const auto* v = std::get_if<Vertex>(&start)) {
    chain.check_vertex(*v);
    x = *v;
  } else {
    x = chain.draw_stationary(rng);
  }
  out.vertices.push_back(x);
  for (std::size_t i = 0; i < length; ++i) {
    x = chain.step(x, rng);
    out.vertices.push_back(x);
  }
  return out;
}

/// Markov measure of the cylinder {x_i = w_0, ..., x_{i+k} = w_k}.
inline double cylinder_probability(const MarkovChain& chain, std::span<const Vertex> word) {
  if (word.empty()) fail(ErrorKind::InvalidArgument, "cylinder word must be non-empty");
  for (Vertex v : word) chain.check_vertex(v);
  double p = chain.pi(word[0]);
  for (std::size_t i = 0; i + 1 < word.size(); ++i) p *= chain.p(word[i], word[i + 1]);
  return p;
}

}  // namespace cocycle_clt
