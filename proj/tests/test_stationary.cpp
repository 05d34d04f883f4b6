#include <catch_amalgamated.hpp>

#include <memory>

#include "cocycle_clt/stationary.hpp"
#include "fixtures.hpp"

using namespace cocycle_clt;
using Catch::Matchers::WithinAbs;

namespace {

struct Canonical {
  MarkovChain chain = fixtures::k4();
  EdgeCocycle f = fixtures::k4_cocycle();
  std::shared_ptr<const FiberMeasure> forward, backward;
  AEstimate lambda;

  Canonical() {
    Rng r1(stream_seed(31, "fiber", 0)), r2(stream_seed(31, "fiber", 1));
    forward = std::make_shared<FiberMeasure>(estimate_fiber_measures(chain, f, Direction::Forward, 10000, 10000, r1));
    backward = std::make_shared<FiberMeasure>(estimate_fiber_measures(chain, f, Direction::Backward, 10000, 10000, r2));
    lambda = stationary_lyapunov(*forward, chain, f);
  }
};

const Canonical& canonical() {
  static const Canonical c;
  return c;
}

FiberMeasure point_mass(const MarkovChain& chain, const Flag& at, std::size_t per_vertex, std::size_t blocks) {
  FiberMeasure m;
  m.blocks = blocks;
  m.samples.assign(chain.size(), std::vector<Flag>(per_vertex, at));
  m.block_of.assign(chain.size(), {});
  for (auto& b : m.block_of)
    for (std::size_t i = 0; i < per_vertex; ++i) b.push_back(i * blocks / per_vertex);
  return m;
}

double max_z(const AEstimate& e) {
  double z = 0.0;
  for (Eigen::Index i = 0; i < e.mean.size(); ++i)
    z = std::max(z, e.se[i] > 0 ? std::abs(e.mean[i]) / e.se[i] : (e.mean[i] == 0 ? 0.0 : INFINITY));
  return z;
}

}  // namespace

TEST_CASE("estimate_fiber_measures bookkeeping") {
  const auto chain = fixtures::k4();
  const auto f = fixtures::k4_cocycle();
  Rng a(1), b(1);
  const auto m1 = estimate_fiber_measures(chain, f, Direction::Forward, 100, 2000, a, 5, 10);
  const auto m2 = estimate_fiber_measures(chain, f, Direction::Forward, 100, 2000, b, 5, 10);
  CHECK(m1.total() == 2000);
  CHECK(m1.dim() == 2);
  for (Vertex v = 0; v < 4; ++v) {
    REQUIRE(m1.count(v) == m2.count(v));
    for (std::size_t i = 0; i < m1.count(v); ++i) {
      CHECK(m1.block_of[v][i] < 10);
      CHECK((m1.samples[v][i].basis - m2.samples[v][i].basis).norm() == 0.0);
    }
    CHECK(orthonormality_error(m1.samples[v].back()) < 1e-12);
  }
  CHECK_THROWS_AS(estimate_fiber_measures(chain, f, Direction::Forward, 0, 5, a, 1, 10), Error);
}

TEST_CASE("identity data leaves the start flag fixed") {
  const auto chain = fixtures::k3();
  const auto f = EdgeCocycle::identity(chain.graph(), 3);
  Rng rng(4);
  const auto m = estimate_fiber_measures(chain, f, Direction::Backward, 10, 300, rng, 2, 3);
  for (Vertex v = 0; v < 3; ++v)
    for (const auto& s : m.samples[v]) CHECK(flag_distance(s, m.samples[0][0]) < 1e-12);
}

TEST_CASE("FlagWorkspace agrees with the reference kernels") {
  for (Eigen::Index d : {2, 3, 4}) {
    Rng rng(stream_seed(5, "ws", static_cast<std::uint64_t>(d)));
    FlagWorkspace ws(d);
    for (int trial = 0; trial < 200; ++trial) {
      const auto a = random_flag(d, rng);
      const auto b = random_flag(d, rng);
      CHECK_THAT(ws.distance(a, b), WithinAbs(flag_distance(a, b), 1e-12));
      CHECK_THAT(ws.delta(a, b), WithinAbs(general_position_delta(a, b).delta, 1e-12));
      Vector h = Vector::Zero(d);
      REQUIRE(ws.add_busemann(a, b, 1.0, h));
      CHECK((h - busemann_H(a, b).t).cwiseAbs().maxCoeff() < 1e-10);
    }
    Vector h = Vector::Zero(d);
    const auto a = random_flag(d, rng);
    CHECK_FALSE(ws.add_busemann(a, a, 1.0, h));
    CHECK(h.norm() == 0.0);
  }
}

TEST_CASE("energy_statistic") {
  FlagWorkspace ws(2);
  Rng rng(8);
  const auto a = random_flag(2, rng);
  const auto b = random_flag(2, rng);
  SECTION("two point masses: 2 dist(a, b)") {
    std::vector<const Flag*> x(10, &a);
    std::vector<WeightedPoint> y(20, WeightedPoint{b, 1.0 / 20});
    CHECK_THAT(energy_statistic(x, y, ws), WithinAbs(2.0 * flag_distance(a, b), 1e-12));
  }
  SECTION("same law: centered at zero") {
    std::vector<double> values;
    for (int rep = 0; rep < 200; ++rep) {
      std::vector<Flag> xs, ys;
      for (int i = 0; i < 30; ++i) xs.push_back(random_flag(2, rng));
      for (int i = 0; i < 30; ++i) ys.push_back(random_flag(2, rng));
      std::vector<const Flag*> x;
      for (const auto& s : xs) x.push_back(&s);
      std::vector<WeightedPoint> y;
      for (const auto& s : ys) y.push_back({s, 1.0 / 30});
      values.push_back(energy_statistic(x, y, ws));
    }
    CHECK(std::abs(stats::mean(values)) < 3.0 * stats::standard_error(values));
  }
}

TEST_CASE("stationarity residual on canonical data") {
  const auto& c = canonical();
  for (const auto* m : {c.forward.get(), c.backward.get()}) {
    const auto rows = stationarity_residual(*m, c.chain, c.f);
    REQUIRE(rows.size() == 4);
    for (const auto& r : rows) {
      INFO(to_string(m->direction) << " residual " << r.value << " se " << r.se);
      CHECK(std::abs(r.z()) < 3.0);
    }
  }
  SECTION("a point-mass measure is detected") {
    const auto bad = point_mass(c.chain, c.forward->samples[0][0], 1000, 40);
    for (const auto& r : stationarity_residual(bad, c.chain, c.f)) CHECK(r.z() > 10.0);
  }
  SECTION("too few samples") {
    Rng rng(3);
    const auto small = estimate_fiber_measures(c.chain, c.f, Direction::Forward, 100, 400, rng);
    try {
      stationarity_residual(small, c.chain, c.f);
      FAIL("expected InsufficientSamples");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::InsufficientSamples);
    }
  }
}

TEST_CASE("forward fibers from independent seeds agree") {
  const auto& c = canonical();
  Rng rng(stream_seed(32, "fiber", 0));
  const auto other = estimate_fiber_measures(c.chain, c.f, Direction::Forward, 10000, 10000, rng);
  for (const auto& r : fiber_energy_distance(*c.forward, other)) CHECK(std::abs(r.z()) < 3.0);
  const auto bad = point_mass(c.chain, c.forward->samples[0][0], 1000, 40);
  for (const auto& r : fiber_energy_distance(*c.forward, bad)) CHECK(r.z() > 10.0);
}

TEST_CASE("regularity_probe") {
  const auto& c = canonical();
  Rng rng(6);
  const std::vector<Flag> tests{random_flag(2, rng), random_flag(2, rng)};
  const auto probe = regularity_probe(*c.forward, tests, {0.0, 0.25, 0.5});
  for (const auto& r : probe.rows) {
    if (r.tau == 0.0) CHECK_THAT(r.estimate, WithinAbs(1.0, 1e-12));
    CHECK(r.estimate >= 1.0);
  }
  REQUIRE(probe.largest_stable_tau);
  CHECK(*probe.largest_stable_tau >= 0.25);

  const auto bad = point_mass(c.chain, tests[0], 1000, 40);
  const auto singular = regularity_probe(bad, {tests[0]}, {0.0, 0.5});
  CHECK(singular.rows.front().stable);
  CHECK_FALSE(singular.rows.back().stable);
  CHECK(*singular.largest_stable_tau == 0.0);
}

TEST_CASE("estimate_h0") {
  const auto& c = canonical();
  Rng rng(9);
  const auto xi = random_flag(2, rng);
  const auto est = estimate_h0(*c.backward, 1, xi);
  AVector reference = AVector::zero(2);
  for (const auto& z : c.backward->samples[1]) reference += busemann_H(xi, z);
  reference *= 1.0 / static_cast<double>(c.backward->count(1));
  CHECK((est.mean - reference).t.cwiseAbs().maxCoeff() < 1e-12);
  CHECK(est.se[0] > 0.0);
  CHECK(std::abs(est.mean.sum()) < 1e-12);

  const auto bad = point_mass(c.chain, xi, 100, 10);
  try {
    estimate_h0(bad, 0, xi);
    FAIL("expected TooManyRejections");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::TooManyRejections);
  }
}

TEST_CASE("h0 varies continuously with the flag") {
  const auto& c = canonical();
  Rng rng(10);
  double worst_ratio = 0.0;
  std::vector<double> dist, diff;
  for (int i = 0; i < 100; ++i) {
    const auto xi = random_flag(2, rng);
    const double angle = 1e-3 * (1.0 + 9.0 * rng.uniform());
    Matrix turn(2, 2);
    turn << std::cos(angle), -std::sin(angle), std::sin(angle), std::cos(angle);
    const Flag near = flag_from_basis(turn * xi.basis);
    const double delta = (estimate_h0(*c.backward, 2, xi).mean - estimate_h0(*c.backward, 2, near).mean).norm();
    dist.push_back(flag_distance(xi, near));
    diff.push_back(delta);
    worst_ratio = std::max(worst_ratio, delta / dist.back());
  }
  const auto fit = stats::fit_line(dist, diff);
  CHECK(std::isfinite(fit.slope));
  CHECK(std::isfinite(worst_ratio));
  CHECK(worst_ratio < 100.0);
}

TEST_CASE("L0 estimates") {
  SECTION("identity data gives zero") {
    const auto chain = fixtures::k3();
    const auto f = EdgeCocycle::identity(chain.graph(), 2);
    Rng rng(2);
    const auto b = estimate_fiber_measures(chain, f, Direction::Backward, 10, 200, rng, 1, 10);
    for (auto conv : {L0Convention::Backward, L0Convention::Forward, L0Convention::Flipped})
      CHECK(estimate_L0(b, f, 0, 1, conv).mean.norm() == 0.0);
  }
  SECTION("weighted sum equals -Lambda") {
    const auto& c = canonical();
    const CenteringData cd(c.chain, c.f, c.backward, c.forward, c.lambda.mean);
    const auto s = cd.weighted_L0();
    const auto se = cd.weighted_L0_se();
    CHECK(std::abs(s[0] + c.lambda.mean[0]) < 3.0 * std::hypot(se[0], c.lambda.se[0]));
    CHECK(std::abs(s.sum()) < 1e-12);
  }
  SECTION("flipped is the negated default") {
    const auto& c = canonical();
    const auto a = estimate_L0(*c.backward, c.f, 0, 3, L0Convention::Backward);
    const auto b = estimate_L0(*c.backward, c.f, 0, 3, L0Convention::Flipped);
    CHECK((a.mean + b.mean).norm() < 1e-14);
  }
}

TEST_CASE("potential_decomposition") {
  const auto g = fixtures::complete_graph(4);
  AVector lambda(Vector(2));
  lambda.t << 0.3, -0.3;
  SECTION("exact potential tables are recovered") {
    std::vector<AVector> psi;
    Rng rng(12);
    for (int v = 0; v < 4; ++v) {
      AVector p(Vector(2));
      p.t << rng.normal(), 0.0;
      p.t(1) = -p.t(0);
      psi.push_back(v == 0 ? AVector::zero(2) : p);
    }
    std::map<std::pair<Vertex, Vertex>, AVector> table;
    for (const auto& [u, v] : g.edges) table[{u, v}] = -1.0 * lambda + psi[u] - psi[v];
    const auto fit = potential_decomposition(g, table, lambda);
    CHECK(fit.fit_residual < 1e-12);
    for (int v = 0; v < 4; ++v) CHECK((fit.psi[v] - psi[v]).norm() < 1e-12);

    // gauge: shifting psi by a constant leaves every prediction unchanged
    AVector shift(Vector(2));
    shift.t << 1.5, -1.5;
    for (const auto& [u, v] : g.edges) {
      const auto a = -1.0 * lambda + fit.psi[u] - fit.psi[v];
      const auto b = -1.0 * lambda + (fit.psi[u] + shift) - (fit.psi[v] + shift);
      CHECK((a - b).norm() < 1e-14);
    }
  }
  SECTION("identity data") {
    std::map<std::pair<Vertex, Vertex>, AVector> table;
    for (const auto& e : g.edges) table[e] = AVector::zero(2);
    const auto fit = potential_decomposition(g, table, AVector::zero(2));
    CHECK(fit.fit_residual < 1e-14);
    for (const auto& p : fit.psi) CHECK(p.norm() < 1e-14);
  }
}

TEST_CASE("an identity edge rules out an edge-wise potential") {
  // with f_ab = I, L0(a,b) + L0(b,a) = 0 exactly, while an edge-wise
  // potential would force -2 Lambda there
  const auto chain = fixtures::k4();
  auto f = fixtures::k4_cocycle();
  f.set_pair(0, 1, Matrix::Identity(2, 2));
  Rng r1(13), r2(14);
  const auto fwd = std::make_shared<FiberMeasure>(estimate_fiber_measures(chain, f, Direction::Forward, 5000, 8000, r1));
  const auto back = std::make_shared<FiberMeasure>(estimate_fiber_measures(chain, f, Direction::Backward, 5000, 8000, r2));
  const auto lam = stationary_lyapunov(*fwd, chain, f);
  REQUIRE(lam.mean[0] > 10.0 * lam.se[0]);
  const CenteringData cd(chain, f, back, fwd, lam.mean);
  CHECK((cd.L0().at({0, 1}) + cd.L0().at({1, 0})).norm() < 1e-14);
  CHECK(cd.potential().fit_residual > 0.5 * lam.mean[0]);
}

TEST_CASE("Poisson potential") {
  const auto& c = canonical();
  const CenteringData cd(c.chain, c.f, c.backward, c.forward, c.lambda.mean);
  const auto& phi = cd.poisson();
  // (I - P) phi = gbar - pi.gbar and pi.phi = 0
  AVector pi_phi = AVector::zero(2);
  std::vector<AVector> gbar(4, AVector::zero(2));
  for (const auto& [e, l] : cd.L0()) gbar[e.first] += c.chain.p(e.first, e.second) * (l + c.lambda.mean);
  AVector mean_g = AVector::zero(2);
  for (int u = 0; u < 4; ++u) mean_g += c.chain.pi(u) * gbar[u];
  for (int u = 0; u < 4; ++u) {
    AVector lhs = phi[u];
    for (int v = 0; v < 4; ++v) lhs -= c.chain.p(u, v) * phi[v];
    CHECK((lhs - (gbar[u] - mean_g)).norm() < 1e-12);
    pi_phi += c.chain.pi(u) * phi[u];
  }
  CHECK(pi_phi.norm() < 1e-12);
}

TEST_CASE("martingale residual") {
  SECTION("identity data") {
    const auto chain = fixtures::k3();
    const auto f = EdgeCocycle::identity(chain.graph(), 2);
    Rng rng(2);
    auto b = std::make_shared<FiberMeasure>(estimate_fiber_measures(chain, f, Direction::Backward, 10, 300, rng, 1, 10));
    const CenteringData cd(chain, f, b, nullptr, AVector::zero(2));
    // every sample equals the start flag, so pick a flag in general position with it
    Matrix turn(2, 2);
    turn << 0.6, -0.8, 0.8, 0.6;
    const auto r = martingale_residual(cd, 1, flag_from_basis(turn * b->samples[0][0].basis));
    CHECK(r.mean.norm() < 1e-12);
  }
  SECTION("canonical data: one convention passes, the others are detected") {
    const auto& c = canonical();
    const CenteringData cd(c.chain, c.f, c.backward, c.forward, c.lambda.mean);
    Rng rng(15);
    double worst = 0.0, flipped = 0.0, forward = 0.0;
    for (Vertex u = 0; u < 4; ++u)
      for (int i = 0; i < 5; ++i) {
        const auto xi = random_flag(2, rng);
        worst = std::max(worst, max_z(martingale_residual(cd, u, xi)));
        flipped = std::max(flipped, max_z(martingale_residual(cd, u, xi, L0Convention::Flipped)));
        forward = std::max(forward, max_z(martingale_residual(cd, u, xi, L0Convention::Forward)));
      }
    CHECK(worst < 3.0);
    CHECK(flipped > 10.0);
    CHECK(forward > 10.0);
  }
}

TEST_CASE("s' is a martingale difference") {
  const auto& c = canonical();
  const CenteringData cd(c.chain, c.f, c.backward, c.forward, c.lambda.mean);
  Rng rng(16);
  for (Vertex u = 0; u < 4; ++u) {
    const auto xi = random_flag(2, rng);
    AVector mean = AVector::zero(2);
    for (Vertex v : c.chain.graph().neighbors(u)) mean += c.chain.p(u, v) * cd.s_prime(u, v, xi);
    const auto r = martingale_residual(cd, u, xi);
    // sum_v p_uv s' = r - (pi . gbar), both small
    CHECK(std::abs(mean[0]) < 3.0 * r.se[0] + std::abs(r.mean[0]) + 0.01);
    CHECK(std::abs(mean.sum()) < 1e-10);
  }
}

TEST_CASE("Lambda from the stationary measure matches the time average") {
  const auto& c = canonical();
  Rng rng(17);
  const auto time_avg = estimate_lyapunov(c.chain, c.f, 2000000, 1000, rng);
  CHECK(std::abs(c.lambda.mean[0] - time_avg.lambda[0]) < 3.0 * std::hypot(c.lambda.se[0], time_avg.standard_errors[0]));
  CHECK(std::abs(c.lambda.mean.sum()) < 1e-12);
}

TEST_CASE("fiber measure examples") {
  const auto& c = canonical();
  SECTION("vertex marginal matches pi") {
    const double n = static_cast<double>(c.forward->total());
    // thinned samples are close to independent; the binomial SE is the scale
    for (Vertex v = 0; v < 4; ++v) {
      const double freq = static_cast<double>(c.forward->count(v)) / n;
      CHECK(std::abs(freq - c.chain.pi(v)) < 3.0 * std::sqrt(c.chain.pi(v) * (1 - c.chain.pi(v)) / n));
    }
  }
  SECTION("identity data: every measure is stationary") {
    const auto chain = fixtures::k3();
    const auto f = EdgeCocycle::identity(chain.graph(), 2);
    Rng rng(21);
    auto m = estimate_fiber_measures(chain, f, Direction::Forward, 10, 6000, rng, 1, 20);
    // replace the degenerate samples by an arbitrary (non-stationary for other data) cloud
    for (auto& fiber : m.samples)
      for (auto& s : fiber) s = random_flag(2, rng);
    for (const auto& r : stationarity_residual(m, chain, f)) CHECK(std::abs(r.z()) < 3.0);
  }
  SECTION("regularity at tau = 0.1 is stable") {
    Rng rng(22);
    const auto probe = regularity_probe(*c.backward, {random_flag(2, rng)}, {0.1});
    for (const auto& r : probe.rows) {
      CHECK(std::isfinite(r.estimate));
      CHECK(r.stable);
    }
  }
}

TEST_CASE("h0 examples") {
  Rng rng(23);
  SECTION("point-mass fiber gives H exactly") {
    const auto chain = fixtures::k3();
    const auto eta = random_flag(3, rng);
    const auto xi = random_flag(3, rng);
    const auto m = point_mass(chain, eta, 50, 5);
    CHECK((estimate_h0(m, 2, xi).mean - busemann_H(xi, eta)).t.cwiseAbs().maxCoeff() < 1e-12);
  }
  SECTION("two seeds agree") {
    const auto& c = canonical();
    Rng other(stream_seed(33, "fiber", 1));
    const auto b2 = estimate_fiber_measures(c.chain, c.f, Direction::Backward, 10000, 10000, other);
    for (Vertex v = 0; v < 4; ++v) {
      const auto xi = random_flag(2, rng);
      const auto a = estimate_h0(*c.backward, v, xi);
      const auto b = estimate_h0(b2, v, xi);
      CHECK(std::abs(a.mean[0] - b.mean[0]) < 3.0 * std::hypot(a.se[0], b.se[0]));
    }
  }
}

TEST_CASE("difference_noise") {
  BlockMean a(2, 4), b(2, 4);
  const double xs[4] = {1.0, 2.0, 4.0, 5.0};
  for (std::size_t i = 0; i < 4; ++i) {
    a.block(i) << xs[i], -xs[i];
    a.count(i);
    b.block(i) << 2.0 * xs[i], -2.0 * xs[i];
    b.count(i);
  }
  const auto ea = a.finish();
  const auto eb = b.finish();
  CHECK(difference_noise(ea, ea).norm() == 0.0);
  // differences -1,-2,-4,-5: sample variance 10/3, over 4 blocks
  const Matrix n = difference_noise(ea, eb);
  CHECK_THAT(n(0, 0), WithinAbs(10.0 / 12.0, 1e-14));
  CHECK_THAT(n(0, 1), WithinAbs(-10.0 / 12.0, 1e-14));
  CHECK_THAT(n(0, 0), WithinAbs(std::pow(ea.se[0], 2), 1e-14));
}
