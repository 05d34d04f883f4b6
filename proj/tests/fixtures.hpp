#pragma once

#include <Eigen/Dense>

#include <string>
#include <vector>

#include "cocycle_clt/lie_sl.hpp"
#include "cocycle_clt/markov_sft.hpp"

namespace fixtures {

using namespace cocycle_clt;

inline GraphSpec complete_graph(int n, bool self_loops = false) {
  GraphSpec g;
  for (int i = 0; i < n; ++i) g.vertices.push_back(std::string(1, static_cast<char>('a' + i)));
  for (int u = 0; u < n; ++u)
    for (int v = 0; v < n; ++v)
      if (u != v || self_loops) g.edges.insert({u, v});
  return g;
}

inline Eigen::MatrixXd uniform_kernel(const GraphSpec& g) {
  const auto n = static_cast<Eigen::Index>(g.size());
  Eigen::MatrixXd p = Eigen::MatrixXd::Zero(n, n);
  for (Vertex u = 0; u < n; ++u) {
    const auto nb = g.neighbors(u);
    for (Vertex v : nb) p(u, v) = 1.0 / static_cast<double>(nb.size());
  }
  return p;
}

inline MarkovChain k3() {
  auto g = complete_graph(3);
  auto p = uniform_kernel(g);
  return MarkovChain(g, p);
}

inline MarkovChain two_state_uniform() {
  auto g = complete_graph(2, true);
  auto p = uniform_kernel(g);
  return MarkovChain(g, p);
}

inline Eigen::MatrixXd m2(double a, double b, double c, double d) {
  Eigen::MatrixXd m(2, 2);
  m << a, b, c, d;
  return m;
}

/// Canonical non-abelian configuration: K4, uniform kernel, SL_2 data.
inline MarkovChain k4() {
  auto g = complete_graph(4);
  return MarkovChain(g, uniform_kernel(g));
}

inline EdgeCocycle k4_cocycle() {
  EdgeCocycle f(4, 2);
  f.set_pair(0, 1, m2(2, 0, 0, 0.5));
  f.set_pair(1, 2, m2(1, 1, 0, 1));
  f.set_pair(2, 0, m2(1, 0, 1, 1));
  f.set_pair(0, 3, m2(1, 2, 0, 1));
  f.set_pair(1, 3, m2(1, 0, 2, 1));
  f.set_pair(2, 3, m2(0.5, 0, 0, 2));
  return f;
}

/// Three-vertex data whose loop products at a all commute.
inline EdgeCocycle k3_cocycle() {
  EdgeCocycle f(3, 2);
  f.set_pair(0, 1, m2(2, 0, 0, 0.5));
  f.set_pair(1, 2, m2(1, 1, 0, 1));
  f.set_pair(2, 0, m2(1, 0, 1, 1));
  return f;
}

inline EdgeCocycle rotation_cocycle(const GraphSpec& g, Eigen::Index d, std::uint64_t seed) {
  Rng rng(seed);
  EdgeCocycle f(g.size(), d);
  for (const auto& [u, v] : g.edges)
    if (u < v) f.set_pair(u, v, random_rotation(d, rng));
  return f;
}

}  // namespace fixtures
