#include <catch_amalgamated.hpp>

#include <memory>

#include "cocycle_clt/clt_harness.hpp"
#include "fixtures.hpp"

using namespace cocycle_clt;
using Catch::Matchers::WithinAbs;

namespace {

Matrix gaussian_on_a(Eigen::Index d, std::size_t n, const Matrix& mix, Rng& rng) {
  const Matrix e = sum_zero_basis(d);
  Matrix out(static_cast<Eigen::Index>(n), d);
  for (std::size_t i = 0; i < n; ++i) {
    Vector z(d - 1);
    for (Eigen::Index j = 0; j < d - 1; ++j) z(j) = rng.normal();
    out.row(static_cast<Eigen::Index>(i)) = (e * mix * z).transpose();
  }
  return out;
}

}  // namespace

TEST_CASE("sum_zero_basis is orthonormal and orthogonal to ones") {
  for (Eigen::Index d : {2, 3, 5}) {
    const Matrix e = sum_zero_basis(d);
    CHECK((e.transpose() * e - Matrix::Identity(d - 1, d - 1)).norm() < 1e-14);
    CHECK((Vector::Ones(d).transpose() * e).norm() < 1e-14);
  }
}

TEST_CASE("run_clt") {
  SECTION("identity data gives exact zeros and a degenerate covariance") {
    const auto chain = fixtures::k3();
    const auto f = EdgeCocycle::identity(chain.graph(), 3);
    const auto s = run_clt(chain, f, 50, 20, Flag::standard(3), AVector::zero(3), 1);
    for (const auto& r : s.records) {
      CHECK(r.V.norm() < 1e-14);
      CHECK(r.W.norm() < 1e-14);
    }
    CHECK(covariance_estimate(s.V_matrix()).degenerate);
  }
  SECTION("deterministic under the seed and independent of threads") {
    const auto chain = fixtures::k4();
    const auto f = fixtures::k4_cocycle();
    AVector lam(Vector(2));
    lam.t << 0.12, -0.12;
    Rng rng(2);
    const auto xi = random_flag(2, rng);
    const auto a = run_clt(chain, f, 100, 50, xi, lam, 7, 1);
    const auto b = run_clt(chain, f, 100, 50, xi, lam, 7, 3);
    CHECK((a.V_matrix() - b.V_matrix()).norm() == 0.0);
    CHECK((a.W_matrix() - b.W_matrix()).norm() == 0.0);
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a.records[i].final_vertex == b.records[i].final_vertex);
      CHECK(std::abs(a.records[i].V.sum()) < 1e-8);
      CHECK(std::abs(a.records[i].W.sum()) < 1e-8);
    }
    const auto c = run_clt(chain, f, 100, 50, xi, lam, 8, 1);
    CHECK((a.V_matrix() - c.V_matrix()).norm() > 0.0);
    CHECK_THROWS_AS(run_clt(chain, f, 100, 1, xi, lam, 7), Error);
  }
}

TEST_CASE("covariance_estimate") {
  SECTION("all-zero samples") {
    const auto c = covariance_estimate(Matrix::Zero(10, 3));
    CHECK(c.degenerate);
    CHECK(c.phi.matrix.norm() == 0.0);
  }
  SECTION("hand-computed example") {
    Matrix x(4, 2);
    x << 1, -1, -1, 1, 2, -2, -2, 2;
    const auto c = covariance_estimate(x);
    // mean 0; (1+1+4+4)/4 = 2.5 per component, off-diagonal -2.5
    CHECK_THAT(c.phi.matrix(0, 0), WithinAbs(2.5, 1e-14));
    CHECK_THAT(c.phi.matrix(0, 1), WithinAbs(-2.5, 1e-14));
    // on the sum-zero line the eigenvalue is e^T Phi e with e = (1,-1)/sqrt2
    CHECK_THAT(c.min_eig_on_a, WithinAbs(5.0, 1e-13));
    CHECK_FALSE(c.degenerate);
    CHECK(c.phi.matrix.rowwise().sum().norm() < 1e-12);
  }
  SECTION("bootstrap SE of a variance") {
    Rng rng(3);
    const std::size_t n = 4000;
    const Matrix x = gaussian_on_a(2, n, Matrix::Identity(1, 1), rng);
    const auto se = bootstrap_covariance_se(x, 4);
    // Var of the entry (1/2) z^2 average: (1/2)^2 * 2 / n
    const double expect = 0.5 * std::sqrt(2.0 / static_cast<double>(n));
    CHECK(std::abs(se.entries(0, 0) - expect) < 0.2 * expect);
    CHECK(std::abs(se.min_eig_on_a - 2.0 * expect) < 0.2 * 2.0 * expect);
  }
}

TEST_CASE("normality_report") {
  SECTION("exact normal samples pass at the 1% level") {
    Rng rng(5);
    Matrix mix(2, 2);
    mix << 1.0, 0.3, 0.0, 0.5;
    const Matrix x = gaussian_on_a(3, 5000, mix, rng);
    const auto cov = covariance_estimate(x);
    const auto report = normality_report(x, cov.phi, 6);
    REQUIRE(report.rows.size() == 2 + 8);
    for (const auto& r : report.rows) {
      INFO(r.direction);
      CHECK(r.ks <= stats::ks_critical_1pct(5000));
      CHECK(std::abs(r.skewness) < 0.2);
    }
    REQUIRE(report.qq.size() == 5000);
    CHECK(std::is_sorted(report.qq.begin(), report.qq.end()));
  }
  SECTION("skewed samples are rejected") {
    Rng rng(7);
    Matrix x(5000, 2);
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const double e = -std::log(rng.uniform());
      x.row(i) << e, -e;
    }
    const auto report = normality_report(x, covariance_estimate(x).phi, 8);
    CHECK(report.max_ks > 5.0 * stats::ks_critical_1pct(5000));
  }
  SECTION("degenerate covariance is refused") {
    try {
      normality_report(Matrix::Zero(100, 2), CovarianceTensor{Matrix::Zero(2, 2)}, 1);
      FAIL("expected DegenerateCovariance");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::DegenerateCovariance);
    }
  }
}

TEST_CASE("kappa_sigma_gap") {
  SECTION("identity data") {
    const auto chain = fixtures::k3();
    Rng rng(1);
    const auto path = sample_trajectory(chain, Vertex{0}, 200, rng);
    const auto g = kappa_sigma_gap(path, EdgeCocycle::identity(chain.graph(), 2), random_flag(2, rng));
    CHECK(g.max_gap < 1e-12);
  }
  SECTION("diagonal data from the standard flag") {
    const auto chain = fixtures::two_state_uniform();
    EdgeCocycle f(2, 2);
    const double e = std::exp(1.0);
    f.set(0, 0, fixtures::m2(-1, 0, 0, -1));
    f.set(1, 1, fixtures::m2(-1, 0, 0, -1));
    f.set_pair(0, 1, fixtures::m2(e, 0, 0, 1 / e));
    const Trajectory path{{0, 1, 1, 1}};
    // one forward step only, then involutions: sigma and kappa agree throughout
    CHECK(kappa_sigma_gap(path, f, Flag::standard(2)).max_gap < 1e-12);
  }
  SECTION("bounded on canonical data") {
    const auto chain = fixtures::k4();
    Rng rng(11);
    const auto path = sample_trajectory(chain, FromStationary{}, 5000, rng);
    const auto g = kappa_sigma_gap(path, fixtures::k4_cocycle(), random_flag(2, rng));
    REQUIRE(g.gap.size() == 5000);
    CHECK(g.max_over(4500, 5000) <= 1.1 * g.max_over(1, 500));
    CHECK_THROWS_AS(g.max_over(0, 10), Error);
  }
}

TEST_CASE("phi_integral_estimate and lindeberg_statistic") {
  SECTION("identity data") {
    const auto chain = fixtures::k3();
    const auto f = EdgeCocycle::identity(chain.graph(), 2);
    Rng rng(12);
    auto b = estimate_fiber_measures(chain, f, Direction::Backward, 10, 30, rng, 1, 10);
    // any common law on every fiber is stationary for identity data
    std::vector<Flag> cloud;
    for (int i = 0; i < 500; ++i) cloud.push_back(random_flag(2, rng));
    for (auto& fiber : b.samples) fiber.assign(cloud.begin(), cloud.end());
    for (auto& blocks : b.block_of) {
      blocks.clear();
      for (std::size_t i = 0; i < cloud.size(); ++i) blocks.push_back(i % b.blocks);
    }
    const CenteringData cd(chain, f, std::make_shared<FiberMeasure>(b), nullptr, AVector::zero(2));
    CHECK(phi_integral_estimate(cd, 200, 1).phi.matrix.norm() < 1e-24);
    for (const auto& r : lindeberg_statistic(cd, 0.1, {10, 40}, 3, 2)) CHECK(r.statistic == 0.0);
  }
  SECTION("canonical data") {
    const auto chain = fixtures::k4();
    const auto f = fixtures::k4_cocycle();
    Rng r1(13), r2(14), r3(15);
    auto fw = std::make_shared<FiberMeasure>(estimate_fiber_measures(chain, f, Direction::Forward, 5000, 4000, r1));
    auto bw = std::make_shared<FiberMeasure>(estimate_fiber_measures(chain, f, Direction::Backward, 5000, 4000, r2));
    const auto lam = estimate_lyapunov(chain, f, 1000000, 1000, r3);
    const CenteringData cd(chain, f, bw, fw, lam.lambda);

    const auto phi = phi_integral_estimate(cd, 2000, 3);
    const Matrix& m = phi.phi.matrix;
    CHECK((m - m.transpose()).norm() < 1e-15);
    CHECK(eigenvalues_on_a(phi.phi).minCoeff() > 0.0);
    CHECK(m.rowwise().sum().norm() < 1e-10);

    // the tail second moment shrinks as the cut eps sqrt n grows
    const auto rows = lindeberg_statistic(cd, 0.02, {25, 400}, 2, 4);
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].statistic > 0.0);
    CHECK(rows[1].statistic < rows[0].statistic);
    for (const auto& r : lindeberg_statistic(cd, 1e6, {25, 100}, 2, 5)) CHECK(r.statistic == 0.0);
    CHECK_THROWS_AS(lindeberg_statistic(cd, 0.0, {25}, 2, 5), Error);
  }
}

TEST_CASE("centering precision gate") {
  CovarianceEstimate cov;
  cov.min_eig_on_a = 0.25;
  AVector se(Vector(2));
  se.t << 1e-4, -1e-4;
  CHECK_NOTHROW(check_centering_precision(se, 2000, cov));
  se.t << 1e-3, -1e-3;
  try {
    check_centering_precision(se, 2000, cov);
    FAIL("expected CenteringTooNoisy");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::CenteringTooNoisy);
  }
}

TEST_CASE("rotation data is flagged degenerate") {
  const auto chain = fixtures::k4();
  const auto f = fixtures::rotation_cocycle(chain.graph(), 3, 19);
  Rng rng(20);
  const auto s = run_clt(chain, f, 200, 200, random_flag(3, rng), AVector::zero(3), 21);
  for (const auto& x : {s.V_matrix(), s.W_matrix()}) {
    const auto c = covariance_estimate(x);
    CHECK(c.degenerate);
    CHECK_THROWS_AS(normality_report(x, c.phi, 1), Error);
  }
}

TEST_CASE("covariance_z") {
  CovarianceTensor a{Matrix::Identity(2, 2)}, b{2.0 * Matrix::Identity(2, 2)};
  const Matrix se = Matrix::Constant(2, 2, 0.5);
  CHECK_THAT(covariance_z(a, se, b, se), WithinAbs(1.0 / std::hypot(0.5, 0.5), 1e-14));
}

TEST_CASE("phi_integral_estimate removes the h0 estimation variance") {
  const auto chain = fixtures::k4();
  const auto f = fixtures::k4_cocycle();
  Rng r1(41), r2(42);
  auto small = std::make_shared<FiberMeasure>(estimate_fiber_measures(chain, f, Direction::Backward, 5000, 1200, r1, 20, 20));
  const auto lam = estimate_lyapunov(chain, f, 1000000, 1000, r2);
  const CenteringData cd(chain, f, small, nullptr, lam.lambda);
  const auto phi = phi_integral_estimate(cd, 1000, 43);
  // positive on the sum-zero line and supported on it
  CHECK(phi.noise_correction(0, 0) > 0.0);
  CHECK(phi.noise_correction.rowwise().sum().norm() < 1e-12);
  CHECK((phi.noise_correction - phi.noise_correction.transpose()).norm() < 1e-15);
}
