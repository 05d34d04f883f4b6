#pragma once

#include <json.hpp>

#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "cocycle_clt/error.hpp"
#include "cocycle_clt/lie_sl.hpp"
#include "cocycle_clt/markov_sft.hpp"
#include "cocycle_clt/stationary.hpp"

namespace cocycle_clt {

using json = nlohmann::json;

// Config schema (JSON):
//
//   name        string, optional
//   seed        unsigned 64-bit integer
//   dimension   d >= 2
//   vertices    list of names
//   edges       list of {"pair": [u, v], "matrix": d x d rows}; each unordered
//               edge appears once, the reverse gets the inverse; a self-loop
//               [u, u] must carry an involution
//   kernel      "uniform" or {u: {v: p_uv}}
//   xi          "standard" or a d x d matrix (orthonormalized on load)
//   lyapunov, induce, stationary, centering, clt   per-command parameters

struct LyapunovParams {
  std::size_t n = 20'000'000;
  std::size_t burn_in = 1000;
  std::size_t trace_limit = 10000;
  bool operator==(const LyapunovParams&) const = default;
};

struct InduceParams {
  std::string vertex;  // empty: first vertex
  std::size_t max_len = 14;
  std::size_t returns = 200'000;
  std::vector<double> tau_grid;
  bool operator==(const InduceParams&) const = default;
};

struct StationaryParams {
  std::size_t burn_in = 10000;
  std::size_t samples = 10000;
  std::size_t thin = 20;
  std::size_t blocks = 40;
  std::size_t test_flags = 4;
  std::vector<double> tau_grid{0.0, 0.1, 0.25, 0.5};
  bool operator==(const StationaryParams&) const = default;
};

struct CenteringParams {
  L0Convention convention = L0Convention::Backward;
  std::size_t test_flags = 10;
  bool operator==(const CenteringParams&) const = default;
};

struct CltParams {
  std::size_t n = 2000;
  std::size_t replicas = 10000;
  std::size_t bootstrap = 200;
  std::size_t phi_samples = 20000;
  std::size_t gap_n = 5000;
  double lindeberg_eps = 0.5;
  std::vector<std::size_t> lindeberg_n{250, 4000};
  std::size_t lindeberg_replicas = 16;
  bool stability = true;
  bool operator==(const CltParams&) const = default;
};

struct EdgeEntry {
  Vertex u = 0;
  Vertex v = 0;
  Matrix matrix;
  bool operator==(const EdgeEntry& o) const { return u == o.u && v == o.v && matrix == o.matrix; }
};

struct ExperimentConfig {
  std::string name;
  std::uint64_t seed = 0;
  Eigen::Index dimension = 2;
  GraphSpec graph;
  Matrix kernel;
  std::vector<EdgeEntry> edge_matrices;  // as given, one per unordered edge
  std::optional<Matrix> xi_matrix;       // empty means the standard flag
  LyapunovParams lyapunov;
  InduceParams induce;
  StationaryParams stationary;
  CenteringParams centering;
  CltParams clt;

  EdgeCocycle cocycle() const {
    EdgeCocycle f(graph.size(), dimension);
    for (const auto& e : edge_matrices) {
      if (e.u == e.v) f.set(e.u, e.v, e.matrix);
      else f.set_pair(e.u, e.v, e.matrix);
    }
    return f;
  }
  MarkovChain chain() const { return MarkovChain(graph, kernel); }
  Flag xi() const { return xi_matrix ? flag_from_basis(*xi_matrix) : Flag::standard(dimension); }
  Vertex induce_vertex() const { return induce.vertex.empty() ? 0 : graph.index_of(induce.vertex); }

  bool operator==(const ExperimentConfig& o) const {
    return name == o.name && seed == o.seed && dimension == o.dimension && graph.vertices == o.graph.vertices &&
           graph.edges == o.graph.edges && kernel == o.kernel && edge_matrices == o.edge_matrices &&
           xi_matrix == o.xi_matrix && lyapunov == o.lyapunov && induce == o.induce && stationary == o.stationary &&
           centering == o.centering && clt == o.clt;
  }
};

namespace detail {

inline Matrix matrix_from_json(const json& j, Eigen::Index d, const std::string& what) {
  if (!j.is_array() || static_cast<Eigen::Index>(j.size()) != d)
    fail(ErrorKind::ValidationError, what + " must be a " + std::to_string(d) + "x" + std::to_string(d) + " matrix");
  Matrix m(d, d);
  for (Eigen::Index r = 0; r < d; ++r) {
    const auto& row = j[static_cast<std::size_t>(r)];
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != d)
      fail(ErrorKind::ValidationError, what + " row " + std::to_string(r) + " has the wrong length");
    for (Eigen::Index c = 0; c < d; ++c) {
      if (!row[static_cast<std::size_t>(c)].is_number())
        fail(ErrorKind::ValidationError, what + " has a non-numeric entry");
      m(r, c) = row[static_cast<std::size_t>(c)].get<double>();
    }
  }
  return m;
}

inline json matrix_to_json(const Matrix& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(row);
  }
  return rows;
}

template <typename T>
void read_opt(const json& obj, const char* key, T& out) {
  if (obj.contains(key)) out = obj.at(key).get<T>();
}

inline L0Convention convention_from(const std::string& s) {
  if (s == "backward") return L0Convention::Backward;
  if (s == "forward") return L0Convention::Forward;
  if (s == "flipped") return L0Convention::Flipped;
  fail(ErrorKind::ValidationError, "unknown L0 convention '" + s + "'");
}

inline std::pair<std::size_t, std::size_t> line_and_column(const std::string& text, std::size_t byte) {
  std::size_t line = 1, col = 1;
  for (std::size_t i = 0; i < std::min(byte, text.size()); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return {line, col};
}

}  // namespace detail

inline ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig c;
  try {
    detail::read_opt(j, "name", c.name);
    c.seed = j.at("seed").get<std::uint64_t>();
    c.dimension = j.at("dimension").get<Eigen::Index>();
    if (c.dimension < 2) fail(ErrorKind::ValidationError, "dimension must be at least 2");
    c.graph.vertices = j.at("vertices").get<std::vector<std::string>>();

    for (const auto& e : j.at("edges")) {
      const auto pair = e.at("pair").get<std::vector<std::string>>();
      if (pair.size() != 2) fail(ErrorKind::ValidationError, "edge pair must name two vertices");
      const Vertex u = c.graph.index_of(pair[0]);
      const Vertex v = c.graph.index_of(pair[1]);
      const std::string label = "(" + pair[0] + "," + pair[1] + ")";
      if (c.graph.edges.count({u, v}))
        fail(ErrorKind::ValidationError, "edge " + label + " is given more than once");
      c.graph.edges.insert({u, v});
      c.graph.edges.insert({v, u});
      c.edge_matrices.push_back({u, v, detail::matrix_from_json(e.at("matrix"), c.dimension, "matrix on " + label)});
    }

    const auto n = static_cast<Eigen::Index>(c.graph.size());
    c.kernel = Matrix::Zero(n, n);
    const auto& k = j.at("kernel");
    if (k.is_string()) {
      if (k.get<std::string>() != "uniform") fail(ErrorKind::ValidationError, "kernel must be \"uniform\" or a table");
      for (Vertex u = 0; u < n; ++u) {
        const auto nb = c.graph.neighbors(u);
        for (Vertex v : nb) c.kernel(u, v) = 1.0 / static_cast<double>(nb.size());
      }
    } else {
      for (const auto& [from, row] : k.items())
        for (const auto& [to, p] : row.items()) c.kernel(c.graph.index_of(from), c.graph.index_of(to)) = p.get<double>();
    }

    if (j.contains("xi")) {
      const auto& x = j.at("xi");
      if (x.is_string()) {
        if (x.get<std::string>() != "standard") fail(ErrorKind::ValidationError, "xi must be \"standard\" or a matrix");
      } else {
        c.xi_matrix = detail::matrix_from_json(x, c.dimension, "xi");
        if (std::abs(c.xi_matrix->determinant()) < 1e-12) fail(ErrorKind::ValidationError, "xi matrix is singular");
      }
    }

    if (j.contains("lyapunov")) {
      const auto& p = j.at("lyapunov");
      detail::read_opt(p, "n", c.lyapunov.n);
      detail::read_opt(p, "burn_in", c.lyapunov.burn_in);
      detail::read_opt(p, "trace_limit", c.lyapunov.trace_limit);
    }
    if (j.contains("induce")) {
      const auto& p = j.at("induce");
      detail::read_opt(p, "vertex", c.induce.vertex);
      detail::read_opt(p, "max_len", c.induce.max_len);
      detail::read_opt(p, "returns", c.induce.returns);
      detail::read_opt(p, "tau_grid", c.induce.tau_grid);
      if (!c.induce.vertex.empty()) c.graph.index_of(c.induce.vertex);
    }
    if (j.contains("stationary")) {
      const auto& p = j.at("stationary");
      detail::read_opt(p, "burn_in", c.stationary.burn_in);
      detail::read_opt(p, "samples", c.stationary.samples);
      detail::read_opt(p, "thin", c.stationary.thin);
      detail::read_opt(p, "blocks", c.stationary.blocks);
      detail::read_opt(p, "test_flags", c.stationary.test_flags);
      detail::read_opt(p, "tau_grid", c.stationary.tau_grid);
    }
    if (j.contains("centering")) {
      const auto& p = j.at("centering");
      if (p.contains("convention")) c.centering.convention = detail::convention_from(p.at("convention").get<std::string>());
      detail::read_opt(p, "test_flags", c.centering.test_flags);
    }
    if (j.contains("clt")) {
      const auto& p = j.at("clt");
      detail::read_opt(p, "n", c.clt.n);
      detail::read_opt(p, "replicas", c.clt.replicas);
      detail::read_opt(p, "bootstrap", c.clt.bootstrap);
      detail::read_opt(p, "phi_samples", c.clt.phi_samples);
      detail::read_opt(p, "gap_n", c.clt.gap_n);
      detail::read_opt(p, "lindeberg_eps", c.clt.lindeberg_eps);
      detail::read_opt(p, "lindeberg_n", c.clt.lindeberg_n);
      detail::read_opt(p, "lindeberg_replicas", c.clt.lindeberg_replicas);
      detail::read_opt(p, "stability", c.clt.stability);
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::ValidationError, std::string("malformed config: ") + e.what());
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::UnknownVertex) fail(ErrorKind::ValidationError, e.detail());
    throw;
  }

  // full validation: graph, kernel, cocycle
  const auto chain = c.chain();
  const auto f = c.cocycle();
  f.validate(c.graph);
  (void)chain;
  return c;
}

inline ExperimentConfig parse_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    const auto [line, col] = detail::line_and_column(text, e.byte > 0 ? e.byte - 1 : 0);
    fail(ErrorKind::ParseError,
         "line " + std::to_string(line) + ", column " + std::to_string(col) + ": " + e.what());
  }
  return config_from_json(j);
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::ParseError, "cannot open config '" + path + "'");
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_config(buffer.str());
}

inline json config_to_json(const ExperimentConfig& c) {
  json j;
  j["name"] = c.name;
  j["seed"] = c.seed;
  j["dimension"] = c.dimension;
  j["vertices"] = c.graph.vertices;
  json edges = json::array();
  for (const auto& e : c.edge_matrices)
    edges.push_back({{"pair", {c.graph.name_of(e.u), c.graph.name_of(e.v)}}, {"matrix", detail::matrix_to_json(e.matrix)}});
  j["edges"] = edges;
  json kernel = json::object();
  for (Vertex u = 0; u < static_cast<Vertex>(c.graph.size()); ++u)
    for (Vertex v : c.graph.neighbors(u)) kernel[c.graph.name_of(u)][c.graph.name_of(v)] = c.kernel(u, v);
  j["kernel"] = kernel;
  j["xi"] = c.xi_matrix ? detail::matrix_to_json(*c.xi_matrix) : json("standard");
  j["lyapunov"] = {{"n", c.lyapunov.n}, {"burn_in", c.lyapunov.burn_in}, {"trace_limit", c.lyapunov.trace_limit}};
  j["induce"] = {{"vertex", c.induce.vertex},
                 {"max_len", c.induce.max_len},
                 {"returns", c.induce.returns},
                 {"tau_grid", c.induce.tau_grid}};
  j["stationary"] = {{"burn_in", c.stationary.burn_in}, {"samples", c.stationary.samples},
                     {"thin", c.stationary.thin},       {"blocks", c.stationary.blocks},
                     {"test_flags", c.stationary.test_flags}, {"tau_grid", c.stationary.tau_grid}};
  j["centering"] = {{"convention", std::string(to_string(c.centering.convention))},
                    {"test_flags", c.centering.test_flags}};
  j["clt"] = {{"n", c.clt.n},
              {"replicas", c.clt.replicas},
              {"bootstrap", c.clt.bootstrap},
              {"phi_samples", c.clt.phi_samples},
              {"gap_n", c.clt.gap_n},
              {"lindeberg_eps", c.clt.lindeberg_eps},
              {"lindeberg_n", c.clt.lindeberg_n},
              {"lindeberg_replicas", c.clt.lindeberg_replicas},
              {"stability", c.clt.stability}};
  return j;
}

inline std::string emit_config(const ExperimentConfig& c) { return config_to_json(c).dump(2) + "\n"; }

}  // namespace cocycle_clt
