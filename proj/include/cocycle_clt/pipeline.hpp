#pragma once

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "cocycle_clt/clt_harness.hpp"
#include "cocycle_clt/cocycle_engine.hpp"
#include "cocycle_clt/config.hpp"
#include "cocycle_clt/kakutani.hpp"
#include "cocycle_clt/stationary.hpp"

namespace cocycle_clt {

namespace fs = std::filesystem;

struct RunOptions {
  fs::path out = ".";
  unsigned threads = 1;
  bool trace = false;
};

inline const std::vector<std::string>& subcommands() {
  static const std::vector<std::string> names{"validate", "lyapunov", "induce", "stationary", "centering", "clt", "report"};
  return names;
}

/// Fixed 17-significant-digit rendering so reruns diff cleanly.
inline std::string fmt17(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

inline json avector_json(const AVector& a) { return std::vector<double>(a.t.data(), a.t.data() + a.size()); }

inline json matrix_json(const Matrix& m) { return detail::matrix_to_json(m); }

class CsvWriter {
 public:
  CsvWriter(const fs::path& path, const std::vector<std::string>& header) : out_(path) {
    if (!out_) fail(ErrorKind::InvalidArgument, "cannot write " + path.string());
    row(header);
  }
  void row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) out_ << (i ? "," : "") << cells[i];
    out_ << '\n';
  }

 private:
  std::ofstream out_;
};

inline void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::InvalidArgument, "cannot write " + path.string());
  out << j.dump(2) << '\n';
}

inline json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::MissingArtifact, "missing " + path.filename().string() + " in " + path.parent_path().string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    fail(ErrorKind::MissingArtifact, path.filename().string() + " is unreadable: " + e.what());
  }
}

/// Shared state for one pipeline run. Every random stream is derived from
/// the config seed and a fixed tag, so subcommands reproduce each other's
/// intermediate results exactly.
class Pipeline {
 public:
  Pipeline(ExperimentConfig config, RunOptions options)
      : config_(std::move(config)), options_(std::move(options)), chain_(config_.chain()), f_(config_.cocycle()) {}

  const ExperimentConfig& config() const { return config_; }
  const MarkovChain& chain() const { return chain_; }
  const EdgeCocycle& cocycle() const { return f_; }

  Rng stream(std::string_view tag, std::uint64_t index = 0) const { return Rng(stream_seed(config_.seed, tag, index)); }

  const LyapunovEstimate& lyapunov() {
    if (!lyapunov_) {
      auto rng = stream("lyapunov");
      TraceSink sink;
      std::unique_ptr<CsvWriter> trace;
      if (options_.trace) {
        trace = std::make_unique<CsvWriter>(options_.out / "trace.csv", trace_header());
        sink = [&](std::size_t step, Vertex v, const AVector& inc) {
          if (step > config_.lyapunov.trace_limit) return;
          std::vector<std::string> cells{std::to_string(step), chain_.graph().name_of(v)};
          for (Eigen::Index i = 0; i < inc.size(); ++i) cells.push_back(fmt17(inc[i]));
          trace->row(cells);
        };
      }
      lyapunov_ = estimate_lyapunov(chain_, f_, config_.lyapunov.n, config_.lyapunov.burn_in, rng, sink);
    }
    return *lyapunov_;
  }

  AVector lambda_se() {
    const auto& l = lyapunov();
    AVector se = AVector::zero(f_.dim());
    for (Eigen::Index i = 0; i < se.size(); ++i) se[i] = l.standard_errors[static_cast<std::size_t>(i)];
    return se;
  }

  std::shared_ptr<const FiberMeasure> fibers(Direction d, std::uint64_t replica = 0) {
    auto& slot = d == Direction::Forward ? forward_ : backward_;
    if (replica == 0 && slot) return slot;
    auto rng = stream(d == Direction::Forward ? "fiber_forward" : "fiber_backward", replica);
    const auto& p = config_.stationary;
    auto m = std::make_shared<const FiberMeasure>(
        estimate_fiber_measures(chain_, f_, d, p.burn_in, p.samples, rng, p.thin, p.blocks));
    if (replica == 0) slot = m;
    return m;
  }

  const CenteringData& centering() {
    if (!centering_)
      centering_ = std::make_unique<CenteringData>(chain_, f_, fibers(Direction::Backward), fibers(Direction::Forward),
                                                   lyapunov().lambda, config_.centering.convention);
    return *centering_;
  }

  json run(const std::string& sub) {
    fs::create_directories(options_.out);
    json result;
    if (sub == "validate") result = validate();
    else if (sub == "lyapunov") result = run_lyapunov();
    else if (sub == "induce") result = induce();
    else if (sub == "stationary") result = stationary();
    else if (sub == "centering") result = run_centering();
    else if (sub == "clt") result = clt();
    else if (sub == "report") return report();
    else fail(ErrorKind::InvalidArgument, "unknown subcommand '" + sub + "'");
    result["subcommand"] = sub;
    result["seed"] = config_.seed;
    write_json(options_.out / (sub + ".json"), result);
    return result;
  }

 private:
  std::vector<std::string> trace_header() const {
    std::vector<std::string> h{"step", "vertex"};
    for (Eigen::Index i = 0; i < f_.dim(); ++i) h.push_back("t" + std::to_string(i + 1));
    return h;
  }

  std::vector<Flag> test_flags(std::string_view tag, std::size_t count) const {
    auto rng = stream(tag);
    std::vector<Flag> out;
    for (std::size_t i = 0; i < count; ++i) out.push_back(random_flag(f_.dim(), rng));
    return out;
  }

  json validate() {
    const auto diag = validate_graph(chain_.graph());
    json pi = json::object();
    for (Vertex v = 0; v < static_cast<Vertex>(chain_.size()); ++v) pi[chain_.graph().name_of(v)] = chain_.pi(v);
    json out{{"connected", diag.connected},
             {"loop_gcd", diag.loop_gcd},
             {"stationary", pi},
             {"dimension", f_.dim()},
             {"max_edge_norm", f_.max_norm()}};
    std::cout << "pi:";
    for (Vertex v = 0; v < static_cast<Vertex>(chain_.size()); ++v)
      std::cout << ' ' << chain_.graph().name_of(v) << '=' << fmt17(chain_.pi(v));
    std::cout << "\nloop_gcd: " << diag.loop_gcd << '\n';
    return out;
  }

  json run_lyapunov() {
    const auto& l = lyapunov();
    return {{"lambda", avector_json(l.lambda)},
            {"standard_errors", l.standard_errors},
            {"steps", l.steps},
            {"simplicity_margin", simplicity_margin(l.lambda)}};
  }

  json induce() {
    const Vertex v = config_.induce_vertex();
    const auto law = enumerate_first_returns(chain_, f_, v, config_.induce.max_len);
    {
      CsvWriter csv(options_.out / "induced_law.csv", {"loop", "length", "probability", "log_norm"});
      for (const auto& l : law.loops) {
        std::string name;
        for (std::size_t i = 0; i < l.loop.size(); ++i) name += (i ? "-" : "") + chain_.graph().name_of(l.loop[i]);
        csv.row({name, std::to_string(l.length()), fmt17(l.probability), fmt17(std::log(operator_norm(l.product)))});
      }
    }
    json out{{"vertex", chain_.graph().name_of(v)},
             {"max_len", law.max_len},
             {"loops", law.loops.size()},
             {"enumerated_mass", law.enumerated_mass()},
             {"tail_mass", law.tail_mass},
             {"commutator_norm", loop_commutator_norm(law)}};
    try {
      const auto tail = tail_decay_fit(law);
      out["tail_lambda"] = tail.lambda;
      out["moment_threshold"] = moment_threshold(tail.lambda, f_.max_norm());
    } catch (const Error& e) {
      out["tail_fit_error"] = std::string(to_string(e.kind()));
    }
    try {
      const auto kac = kac_statistic(law, chain_.pi(v));
      out["kac"] = {{"mean_return", kac.mean_return}, {"lower", kac.lower}, {"upper", kac.upper},
                    {"expected", kac.expected},       {"bound_gap", kac.bound_gap}};
    } catch (const Error& e) {
      out["kac_error"] = std::string(to_string(e.kind()));
    }
    if (!config_.induce.tau_grid.empty()) {
      const auto probe = exponential_moment_probe(law, config_.induce.tau_grid);
      json rows = json::array();
      for (const auto& r : probe.rows)
        rows.push_back({{"tau", r.tau}, {"sum", r.sum}, {"growth_rate", r.growth_rate}, {"converges", r.converges}});
      out["moment_probe"] = rows;
      out["largest_convergent_tau"] = probe.largest_convergent_tau ? json(*probe.largest_convergent_tau) : json(nullptr);
    }
    // proportionality against the time average, every vertex
    const auto& lam = lyapunov();
    json per_vertex = json::array();
    for (Vertex u = 0; u < static_cast<Vertex>(chain_.size()); ++u) {
      auto rng = stream("induce", static_cast<std::uint64_t>(u));
      const auto est = induced_lyapunov(chain_, f_, u, config_.induce.returns, rng);
      const double scaled = chain_.pi(u) * est.induced.lambda[0];
      const double se = std::hypot(chain_.pi(u) * est.induced.standard_errors[0], lam.standard_errors[0]);
      per_vertex.push_back({{"vertex", chain_.graph().name_of(u)},
                            {"induced_lambda", avector_json(est.induced.lambda)},
                            {"induced_se", est.induced.standard_errors},
                            {"scaled_first", scaled},
                            {"z_vs_lambda", (scaled - lam.lambda[0]) / se}});
    }
    out["proportionality"] = per_vertex;
    out["lambda"] = avector_json(lam.lambda);
    return out;
  }

  void export_fibers(const FiberMeasure& m, const fs::path& path) const {
    std::vector<std::string> header{"vertex"};
    const auto d = m.dim();
    for (Eigen::Index c = 0; c < d; ++c)
      for (Eigen::Index r = 0; r < d; ++r) header.push_back("q" + std::to_string(r + 1) + std::to_string(c + 1));
    CsvWriter csv(path, header);
    for (Vertex v = 0; v < static_cast<Vertex>(m.vertices()); ++v)
      for (const auto& s : m.samples[static_cast<std::size_t>(v)]) {
        std::vector<std::string> cells{chain_.graph().name_of(v)};
        for (Eigen::Index i = 0; i < s.basis.size(); ++i) cells.push_back(fmt17(s.basis.data()[i]));
        csv.row(cells);
      }
  }

  static json block_rows(const std::vector<BlockStatistic>& rows) {
    json out = json::array();
    for (const auto& r : rows) out.push_back({{"value", r.value}, {"se", r.se}, {"z", r.z()}});
    return out;
  }

  json stationary() {
    const auto fw = fibers(Direction::Forward);
    const auto bw = fibers(Direction::Backward);
    export_fibers(*fw, options_.out / "fiber_forward.csv");
    export_fibers(*bw, options_.out / "fiber_backward.csv");
    const auto again = fibers(Direction::Forward, 1);
    const auto lam_stat = stationary_lyapunov(*fw, chain_, f_);
    const auto& lam = lyapunov();
    const auto probe = regularity_probe(*fw, test_flags("regularity", config_.stationary.test_flags), config_.stationary.tau_grid);
    json reg = json::array();
    for (const auto& r : probe.rows)
      reg.push_back({{"vertex", chain_.graph().name_of(r.vertex)}, {"test_flag", r.test_flag}, {"tau", r.tau},
                     {"estimate", r.estimate}, {"se", r.se}, {"stable", r.stable}});
    json counts = json::object();
    for (Vertex v = 0; v < static_cast<Vertex>(chain_.size()); ++v) counts[chain_.graph().name_of(v)] = fw->count(v);
    return {{"forward_residual", block_rows(stationarity_residual(*fw, chain_, f_))},
            {"backward_residual", block_rows(stationarity_residual(*bw, chain_, f_))},
            {"reproducibility", block_rows(fiber_energy_distance(*fw, *again))},
            {"forward_counts", counts},
            {"stationary_lambda", avector_json(lam_stat.mean)},
            {"stationary_lambda_se", avector_json(lam_stat.se)},
            {"lambda", avector_json(lam.lambda)},
            {"lambda_z", (lam_stat.mean[0] - lam.lambda[0]) / std::hypot(lam_stat.se[0], lam.standard_errors[0])},
            {"regularity", reg},
            {"largest_stable_tau", probe.largest_stable_tau ? json(*probe.largest_stable_tau) : json(nullptr)}};
  }

  static double max_z(const AEstimate& e) {
    double z = 0.0;
    for (Eigen::Index i = 0; i < e.mean.size(); ++i)
      z = std::max(z, e.se[i] > 0 ? std::abs(e.mean[i]) / e.se[i] : (e.mean[i] == 0 ? 0.0 : INFINITY));
    return z;
  }

  json run_centering() {
    const auto& c = centering();
    json l0 = json::array();
    for (const auto& [e, val] : c.L0())
      l0.push_back({{"edge", {chain_.graph().name_of(e.first), chain_.graph().name_of(e.second)}},
                    {"L0", avector_json(val)},
                    {"se", avector_json(c.L0_se().at(e))}});
    json psi = json::object(), phi = json::object();
    for (Vertex v = 0; v < static_cast<Vertex>(chain_.size()); ++v) {
      psi[chain_.graph().name_of(v)] = avector_json(c.potential().psi[static_cast<std::size_t>(v)]);
      phi[chain_.graph().name_of(v)] = avector_json(c.poisson()[static_cast<std::size_t>(v)]);
    }
    double max_l0_se = 0.0;
    for (const auto& [e, se] : c.L0_se()) max_l0_se = std::max(max_l0_se, se.t.cwiseAbs().maxCoeff());

    const auto flags = test_flags("martingale", config_.centering.test_flags);
    json conventions = json::object();
    for (auto conv : {L0Convention::Backward, L0Convention::Forward, L0Convention::Flipped}) {
      double worst = 0.0;
      for (Vertex u = 0; u < static_cast<Vertex>(chain_.size()); ++u)
        for (const auto& xi : flags) worst = std::max(worst, max_z(martingale_residual(c, u, xi, conv)));
      conventions[std::string(to_string(conv))] = worst;
    }
    const auto wl = c.weighted_L0();
    const auto wse = c.weighted_L0_se();
    return {{"convention", std::string(to_string(c.convention()))},
            {"L0", l0},
            {"psi", psi},
            {"poisson_potential", phi},
            {"fit_residual", c.potential().fit_residual},
            {"max_L0_se", max_l0_se},
            {"weighted_L0", avector_json(wl)},
            {"weighted_L0_z", (wl[0] + c.lambda()[0]) / std::hypot(wse[0], lyapunov().standard_errors[0])},
            {"martingale_max_z", conventions}};
  }

  json clt() {
    const auto& p = config_.clt;
    const auto& lam = lyapunov();
    const Flag xi = config_.xi();
    const auto samples = run_clt(chain_, f_, p.n, p.replicas, xi, lam.lambda, stream_seed(config_.seed, "clt"), options_.threads);
    const Matrix V = samples.V_matrix();
    const Matrix W = samples.W_matrix();
    {
      std::vector<std::string> header{"replica"};
      for (Eigen::Index i = 0; i < V.cols(); ++i) header.push_back("V" + std::to_string(i + 1));
      for (Eigen::Index i = 0; i < W.cols(); ++i) header.push_back("W" + std::to_string(i + 1));
      header.push_back("final_vertex");
      CsvWriter csv(options_.out / "samples.csv", header);
      for (Eigen::Index r = 0; r < V.rows(); ++r) {
        std::vector<std::string> cells{std::to_string(r)};
        for (Eigen::Index i = 0; i < V.cols(); ++i) cells.push_back(fmt17(V(r, i)));
        for (Eigen::Index i = 0; i < W.cols(); ++i) cells.push_back(fmt17(W(r, i)));
        cells.push_back(chain_.graph().name_of(samples.records[static_cast<std::size_t>(r)].final_vertex));
        csv.row(cells);
      }
    }
    const auto cv = covariance_estimate(V);
    const auto cw = covariance_estimate(W);
    const auto bv = bootstrap_covariance_se(V, stream_seed(config_.seed, "bootstrap", 0), p.bootstrap);
    const auto bw = bootstrap_covariance_se(W, stream_seed(config_.seed, "bootstrap", 1), p.bootstrap);
    write_json(options_.out / "covariance.json",
               {{"V", {{"phi", matrix_json(cv.phi.matrix)}, {"eigenvalues", std::vector<double>(cv.eigenvalues.data(), cv.eigenvalues.data() + cv.eigenvalues.size())}, {"min_eig_on_a", cv.min_eig_on_a}, {"bootstrap_se", matrix_json(bv.entries)}, {"min_eig_se", bv.min_eig_on_a}, {"degenerate", cv.degenerate}}},
                {"W", {{"phi", matrix_json(cw.phi.matrix)}, {"eigenvalues", std::vector<double>(cw.eigenvalues.data(), cw.eigenvalues.data() + cw.eigenvalues.size())}, {"min_eig_on_a", cw.min_eig_on_a}, {"bootstrap_se", matrix_json(bw.entries)}, {"min_eig_se", bw.min_eig_on_a}, {"degenerate", cw.degenerate}}}});

    json out{{"n", p.n},
             {"replicas", p.replicas},
             {"lambda", avector_json(lam.lambda)},
             {"degenerate", cv.degenerate || cw.degenerate},
             {"phi_V", matrix_json(cv.phi.matrix)},
             {"phi_W", matrix_json(cw.phi.matrix)},
             {"min_eig_on_a", cv.min_eig_on_a},
             {"min_eig_se", bv.min_eig_on_a}};
    const Vector mean_v = V.colwise().mean().transpose();
    const Vector mean_w = W.colwise().mean().transpose();
    out["mean_V"] = std::vector<double>(mean_v.data(), mean_v.data() + mean_v.size());
    out["mean_W"] = std::vector<double>(mean_w.data(), mean_w.data() + mean_w.size());
    {
      // largest |mean| / SE over coordinates; the combined SE adds the centering noise sqrt(n) se(Lambda)
      const double root_n = std::sqrt(static_cast<double>(p.n));
      const double root_N = std::sqrt(static_cast<double>(V.rows()));
      auto worst = [&](const Matrix& x, const Vector& mean, bool combined) {
        double z = 0.0;
        for (Eigen::Index i = 0; i < x.cols(); ++i) {
          const double sd = std::sqrt((x.col(i).array() - mean(i)).square().mean());
          const double se = combined ? std::hypot(sd / root_N, root_n * lambda_se()[i]) : sd / root_N;
          z = std::max(z, se > 0.0 ? std::abs(mean(i)) / se : (mean(i) == 0.0 ? 0.0 : INFINITY));
        }
        return z;
      };
      out["mean_V_z"] = worst(V, mean_v, false);
      out["mean_W_z"] = worst(W, mean_w, false);
      out["mean_V_z_combined"] = worst(V, mean_v, true);
      out["mean_W_z_combined"] = worst(W, mean_w, true);
    }
    if (cv.degenerate || cw.degenerate) {
      // no Gaussian fit is reported for a degenerate limit
      out["normality"] = nullptr;
      return out;
    }
    check_centering_precision(lambda_se(), p.n, cv);

    const auto nv = normality_report(V, cv.phi, stream_seed(config_.seed, "normality", 0));
    const auto nw = normality_report(W, cw.phi, stream_seed(config_.seed, "normality", 1));
    {
      CsvWriter csv(options_.out / "normality.csv", {"family", "direction", "ks", "skewness", "excess_kurtosis"});
      for (const auto& [family, rep] : std::array{std::pair{"V", &nv}, std::pair{"W", &nw}})
        for (const auto& r : rep->rows) csv.row({family, r.direction, fmt17(r.ks), fmt17(r.skewness), fmt17(r.excess_kurtosis)});
    }
    {
      CsvWriter csv(options_.out / "qq.csv", {"family", "sample", "normal_quantile"});
      for (const auto& [family, rep] : std::array{std::pair{"V", &nv}, std::pair{"W", &nw}})
        for (const auto& [s, q] : rep->qq) csv.row({family, fmt17(s), fmt17(q)});
    }
    out["max_ks_V"] = nv.max_ks;
    out["max_ks_W"] = nw.max_ks;

    auto rng = stream("gap");
    const auto path = sample_trajectory(chain_, FromStationary{}, p.gap_n, rng);
    const auto gap = kappa_sigma_gap(path, f_, xi);
    out["gap_max"] = gap.max_gap;
    if (p.gap_n >= 10) {
      out["gap_early"] = gap.max_over(1, p.gap_n / 10);
      out["gap_late"] = gap.max_over(p.gap_n - p.gap_n / 10, p.gap_n);
    }

    const auto& c = centering();
    const auto phi = phi_integral_estimate(c, p.phi_samples, stream_seed(config_.seed, "phi"), options_.threads);
    out["phi_integral"] = matrix_json(phi.phi.matrix);
    out["phi_integral_se"] = matrix_json(phi.se);
    out["phi_integral_noise_correction"] = matrix_json(phi.noise_correction);
    out["phi_z_V"] = covariance_z(phi.phi, phi.se, cv.phi, bv.entries);
    out["phi_z_W"] = covariance_z(phi.phi, phi.se, cw.phi, bw.entries);
    out["V_vs_W_z"] = covariance_z(cv.phi, bv.entries, cw.phi, bw.entries);

    if (p.stability) {
      const auto doubled = run_clt(chain_, f_, 2 * p.n, p.replicas, xi, lam.lambda, stream_seed(config_.seed, "clt_2n"), options_.threads);
      const Matrix V2 = doubled.V_matrix();
      const auto c2 = covariance_estimate(V2);
      const auto b2 = bootstrap_covariance_se(V2, stream_seed(config_.seed, "bootstrap", 2), p.bootstrap);
      out["phi_V_2n"] = matrix_json(c2.phi.matrix);
      out["stability_z"] = covariance_z(cv.phi, bv.entries, c2.phi, b2.entries);
    }

    json lind = json::array();
    for (const auto& r : lindeberg_statistic(c, p.lindeberg_eps, p.lindeberg_n, p.lindeberg_replicas,
                                             stream_seed(config_.seed, "lindeberg"), options_.threads))
      lind.push_back({{"n", r.n}, {"statistic", r.statistic}, {"tail_count", r.tail_count}, {"steps", r.steps}, {"max_norm", r.max_norm}});
    out["lindeberg"] = lind;
    return out;
  }

  json report() {
    const fs::path& dir = options_.out;
    if (!fs::exists(dir / "samples.csv")) fail(ErrorKind::MissingArtifact, "no clt output (samples.csv) in " + dir.string());
    json summary{{"clt", read_json(dir / "clt.json")}};
    for (const auto& sub : subcommands()) {
      if (sub == "report" || sub == "clt") continue;
      const auto path = dir / (sub + ".json");
      if (fs::exists(path)) summary[sub] = read_json(path);
    }
    if (fs::exists(dir / "covariance.json")) summary["covariance"] = read_json(dir / "covariance.json");
    summary["seed"] = config_.seed;
    summary["config"] = config_to_json(config_);
    write_json(dir / "summary.json", summary);
    return summary;
  }

  ExperimentConfig config_;
  RunOptions options_;
  MarkovChain chain_;
  EdgeCocycle f_;
  std::optional<LyapunovEstimate> lyapunov_;
  std::shared_ptr<const FiberMeasure> forward_, backward_;
  std::unique_ptr<CenteringData> centering_;
};

inline json error_json(const Error& e) {
  return {{"error", std::string(to_string(e.kind()))}, {"detail", e.detail()}};
}

}  // namespace cocycle_clt
