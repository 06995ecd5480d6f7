#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>
#include <sstream>

#include "gsmp/adjoint_smp.hpp"
#include "gsmp/optimizer.hpp"
#include "gsmp/problems.hpp"
#include "oracles.hpp"

using namespace gsmp;

TEST_CASE("linear-quadratic factory") {
  const ProblemSpec pb = lq_problem(LQSpec{0.5, 1.0, 0.3, 0.2}, 1.0, 1.0, 4,
                                    VolatilityGrid({0.5, 1.0}));
  SECTION("declared capabilities") {
    CHECK(pb.y_independent_dynamics);
    CHECK(pb.beta_zero);
    CHECK(pb.a3_monotone);
    CHECK(pb.a3_prime);
  }
  SECTION("analytic derivatives agree with finite differences") {
    CHECK_NOTHROW(validate_problem(pb, 7));
    const double h = 1e-5;
    for (double x : {-0.8, 0.3, 1.4}) {
      for (double v : {-0.5, 0.9}) {
        CHECK(std::abs(pb.b.fx(x, 0.0, v) -
                       (pb.b.f(x + h, 0.0, v) - pb.b.f(x - h, 0.0, v)) / (2 * h)) <= 1e-9);
        CHECK(std::abs(pb.sigma.fv(x, 0.0, v) -
                       (pb.sigma.f(x, 0.0, v + h) - pb.sigma.f(x, 0.0, v - h)) / (2 * h)) <= 1e-9);
        CHECK(std::abs(pb.l.fv(0.1, x, 0.0, v) -
                       (pb.l.f(0.1, x, 0.0, v + h) - pb.l.f(0.1, x, 0.0, v - h)) / (2 * h)) <= 1e-9);
        CHECK(std::abs(pb.Phi.fx(x, 0.2) -
                       (pb.Phi.f(x + h, 0.2) - pb.Phi.f(x - h, 0.2)) / (2 * h)) <= 1e-9);
      }
    }
  }
  SECTION("terminal cost splits with a constant mean-field weight") {
    CHECK(pb.Phi.fy(0.3, 1.7) == Catch::Approx(0.5));
    CHECK(pb.Phi.fx(0.3, 1.7) == Catch::Approx(0.3));
    CHECK(pb.phi[3].f(2.0) == Catch::Approx(4.0));
    CHECK(pb.phi[3].d(2.0) == Catch::Approx(4.0));
  }
  SECTION("all-zero coefficients give the closed-form cost") {
    const double x0 = 1.3, T = 2.0;
    const ProblemSpec flat = lq_problem(LQSpec{}, x0, T, 4, VolatilityGrid({1.0, 2.0}));
    const ScenarioTree tree = flat.build_tree();
    // state frozen at x0: J = (x0^2 T + x0^2 + x0^2) / 2
    const double expected = 0.5 * (x0 * x0 * T + 2 * x0 * x0);
    CHECK(cost(flat, tree, ControlProcess::constant(4, 0.0)) ==
          Catch::Approx(expected).margin(1e-12));
  }
}

TEST_CASE("descent on a zero-cost problem converges immediately") {
  PolynomialProblemConfig cfg;
  cfg.b.c[3] = 1.0;
  cfg.sigma.c[0] = 1.0;
  for (auto& phi : cfg.phi) phi.c = {0.0, 1.0, 0.0};
  cfg.N = 2;
  cfg.grid = VolatilityGrid({1.0, 2.0});
  const ProblemSpec pb = make_polynomial_problem(cfg);
  REQUIRE(pb.a3_monotone);
  const ScenarioTree tree = pb.build_tree();
  const auto report = descend(pb, tree, ControlProcess::constant(2, 0.4), 50);
  CHECK(report.converged);
  CHECK(report.iterates.size() == 1);
  CHECK(report.iterates.front().residual == Catch::Approx(0.0).margin(1e-14));
}

TEST_CASE("single-volatility linear-quadratic control matches the classical solution") {
  const double A = 0.5, B = 1.0, C = 0.3, D = 0.2, T = 1.0, x0 = 1.0;
  const int N = 6;
  const ProblemSpec pb = lq_problem(LQSpec{A, B, C, D}, x0, T, N, VolatilityGrid({1.0}));
  const ScenarioTree tree = pb.build_tree();
  const auto lqr = oracles::classical_lq(A, B, C, D, T, N, 1.0);

  StepRule rule;
  rule.tolerance = 1e-7;
  const auto report =
      descend(pb, tree, ControlProcess::constant_adapted(tree, 0.0), 3000, rule);
  // the match is what matters; termination may hit the double-precision floor
  REQUIRE((report.converged ||
           report.message == "progress below double-precision resolution"));
  CHECK(cost(pb, tree, report.control) == Catch::Approx(lqr.value(x0)).margin(1e-6));

  const auto tr = simulate(pb, tree, report.control);
  double control_error = 0.0;
  for (int k = 0; k < N; ++k)
    for (std::size_t n = 0; n < tree.level_size(k); ++n)
      control_error = std::max(control_error,
                               std::abs(report.control.values()[k][n] -
                                        lqr.feedback[k] * tr.X[k].values[n]));
  CHECK(control_error <= 1e-4);
}

TEST_CASE("deterministic-in-time control on the single-volatility tree") {
  // with zero diffusion the optimal control is deterministic; the per-step
  // parameterization must reach it
  const double A = 0.4, B = 1.0, T = 1.0, x0 = 1.0;
  const int N = 5;
  const ProblemSpec pb = lq_problem(LQSpec{A, B, 0.0, 0.0}, x0, T, N, VolatilityGrid({1.0}));
  const ScenarioTree tree = pb.build_tree();
  const auto lqr = oracles::classical_lq(A, B, 0.0, 0.0, T, N, 1.0);
  StepRule rule;
  rule.tolerance = 1e-7;
  const auto report = descend(pb, tree, ControlProcess::constant(N, 0.0), 2000, rule);
  REQUIRE((report.converged ||
           report.message == "progress below double-precision resolution"));
  REQUIRE_FALSE(report.control.is_adapted());
  CHECK(cost(pb, tree, report.control) == Catch::Approx(lqr.value(x0)).margin(1e-6));
}

TEST_CASE("worst-case linear-quadratic optimization end to end") {
  const ProblemSpec pb =
      lq_problem(LQSpec{0.5, 1.0, 0.4, 0.0}, 1.0, 1.0, 5, VolatilityGrid({0.5, 1.0}));
  const ScenarioTree tree = pb.build_tree();
  StepRule rule;
  rule.tolerance = 1e-6;
  const auto report =
      descend(pb, tree, ControlProcess::constant_adapted(tree, 0.0), 2000, rule);
  REQUIRE(report.converged);

  SECTION("accepted iterates never increase the cost") {
    for (std::size_t i = 0; i + 1 < report.iterates.size(); ++i)
      CHECK(report.iterates[i + 1].cost <= report.iterates[i].cost + 1e-12);
  }
  SECTION("first-order residual within tolerance at the final control") {
    CHECK(report.iterates.back().residual >= -1e-6);
  }
  SECTION("sampled necessary condition holds at the optimum") {
    std::mt19937_64 rng(431);
    for (int s = 0; s < 25; ++s) {
      const auto u = random_admissible_control(pb, tree, rng, s % 2 == 0);
      CHECK(necessary_condition_residual(pb, tree, report.control, u) >= -1e-6);
    }
  }
  SECTION("saddle certificate at the optimum") {
    const auto cert = minimax_certificate(pb, tree, report.control, 1e-6);
    CHECK(cert.status != MinimaxCertificate::Status::inconclusive);
    CHECK(cert.residual >= -1e-6);
  }
}

TEST_CASE("descent handles a control-in-diffusion instance") {
  // ties at the optimum (the control can null the diffusion): convergence to
  // the exact residual tolerance is not guaranteed, but the trace must be
  // monotone and improve substantially
  const ProblemSpec pb =
      lq_problem(LQSpec{0.5, 1.0, 0.3, 0.2}, 1.0, 1.0, 4, VolatilityGrid({0.5, 1.0}));
  const ScenarioTree tree = pb.build_tree();
  const auto report = descend(pb, tree, ControlProcess::constant_adapted(tree, 0.0), 300);
  REQUIRE(report.iterates.size() >= 2);
  for (std::size_t i = 0; i + 1 < report.iterates.size(); ++i)
    CHECK(report.iterates[i + 1].cost <= report.iterates[i].cost + 1e-12);
  CHECK(report.iterates.back().cost < 0.3 * report.iterates.front().cost);
}

TEST_CASE("descent trace serialization") {
  const ProblemSpec pb = lq_problem(LQSpec{0.3, 1.0, 0.0, 0.0}, 1.0, 1.0, 2,
                                    VolatilityGrid({1.0}));
  const ScenarioTree tree = pb.build_tree();
  const auto report = descend(pb, tree, ControlProcess::constant(2, 0.0), 100);
  std::ostringstream os;
  export_descent_csv(report, os);
  std::istringstream is(os.str());
  std::string header;
  std::getline(is, header);
  CHECK(header == "iter,J,step,residual");
  int rows = 0;
  for (std::string line; std::getline(is, line);) ++rows;
  CHECK(rows == static_cast<int>(report.iterates.size()));
}

TEST_CASE("blown-up dynamics are reported through the result") {
  PolynomialProblemConfig cfg;
  cfg.b.c[4] = 1.0;  // b = x^2 with a huge start: the state overflows
  for (auto& phi : cfg.phi) phi.c = {0.0, 1.0, 0.0};
  cfg.Phi.c[4] = 1.0;
  cfg.l.c[9] = 1.0;
  cfg.x0 = 1e160;
  cfg.N = 2;
  cfg.grid = VolatilityGrid({1.0});
  const ProblemSpec pb = make_polynomial_problem(cfg);
  REQUIRE(pb.a3_monotone);
  const ScenarioTree tree = pb.build_tree();
  DescentReport report;
  CHECK_NOTHROW(report = descend(pb, tree, ControlProcess::constant(2, 0.0), 10));
  CHECK_FALSE(report.converged);
  CHECK(report.message.find("not finite") != std::string::npos);
}

TEST_CASE("inadmissible starting control is rejected") {
  const ProblemSpec pb =
      lq_problem(LQSpec{0.3, 1.0, 0.0, 0.0}, 1.0, 1.0, 2, VolatilityGrid({1.0}), -1.0, 1.0);
  const ScenarioTree tree = pb.build_tree();
  CHECK_THROWS_AS(descend(pb, tree, ControlProcess::constant(2, 5.0), 10),
                  std::invalid_argument);
}
