#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>
#include <sstream>

#include "gsmp/mf_gsde.hpp"
#include "gsmp/optimizer.hpp"
#include "gsmp/problems.hpp"
#include "oracles.hpp"
#include "problem_samples.hpp"

using namespace gsmp;

namespace {

ControlProcess scaled_control(const ControlProcess& v, double factor) {
  ControlProcess out = v;
  for (auto& level : out.values())
    for (double& x : level) x *= factor;
  return out;
}

}  // namespace

TEST_CASE("problem validation catches inconsistent derivatives") {
  ProblemSpec pb = lq_problem(LQSpec{0.5, 1.0, 0.3, 0.2}, 1.0, 1.0, 2, VolatilityGrid({1.0}));
  CHECK_NOTHROW(validate_problem(pb));
  pb.b.fx = [](double, double, double) { return 17.0; };  // wrong on purpose
  CHECK_THROWS_AS(validate_problem(pb), std::invalid_argument);

  ProblemSpec bad_box = lq_problem(LQSpec{}, 0.0, 1.0, 1, VolatilityGrid({1.0}), 2.0, -2.0);
  CHECK_THROWS_AS(validate_problem(bad_box), std::invalid_argument);
}

TEST_CASE("additive noise integrates exactly") {
  PolynomialProblemConfig cfg;
  cfg.sigma.c[0] = 1.0;  // b = beta = 0, sigma = 1
  for (auto& phi : cfg.phi) phi.c = {0.0, 1.0, 0.0};
  cfg.Phi.c = {0.0, 1.0, 0, 0, 0, 0, 0, 0, 0, 0};
  cfg.x0 = 0.75;
  cfg.N = 3;
  cfg.grid = VolatilityGrid({0.8, 1.5});
  const ProblemSpec pb = make_polynomial_problem(cfg);
  const ScenarioTree tree = pb.build_tree();
  const auto tr = simulate(pb, tree, ControlProcess::constant(3, 0.0));
  for (int k = 0; k <= 3; ++k)
    for (std::size_t n = 0; n < tree.level_size(k); ++n)
      CHECK(tr.X[k].values[n] == Catch::Approx(0.75 + tree.brownian(k, n)).margin(1e-13));
}

TEST_CASE("pure drift is the explicit Euler recursion") {
  PolynomialProblemConfig cfg;
  cfg.b.c[1] = 1.0;  // b = x, sigma = beta = 0
  for (auto& phi : cfg.phi) phi.c = {0.0, 1.0, 0.0};
  cfg.x0 = 1.0;
  cfg.N = 4;
  cfg.grid = VolatilityGrid({1.0, 2.0});
  const ProblemSpec pb = make_polynomial_problem(cfg);
  const ScenarioTree tree = pb.build_tree();
  const auto tr = simulate(pb, tree, ControlProcess::constant(4, 0.0));
  const double dt = tree.dt();
  for (int k = 0; k <= 4; ++k) {
    const double expected = std::pow(1.0 + dt, k);
    for (std::size_t n = 0; n < tree.level_size(k); ++n)
      CHECK(tr.X[k].values[n] == Catch::Approx(expected).margin(1e-12));
  }
}

TEST_CASE("mean-field drift follows the scalar recursion") {
  // b = worst-case mean of the state (identity marginal), sigma = 0
  PolynomialProblemConfig cfg;
  cfg.b.c[2] = 1.0;  // b(x, y, v) = y
  for (auto& phi : cfg.phi) phi.c = {0.0, 1.0, 0.0};
  cfg.x0 = 0.5;
  cfg.N = 5;
  cfg.grid = VolatilityGrid({1.0, 2.0});
  const ProblemSpec pb = make_polynomial_problem(cfg);
  const ScenarioTree tree = pb.build_tree();
  const auto tr = simulate(pb, tree, ControlProcess::constant(5, 0.0));
  double rho = 0.5;
  const double dt = tree.dt();
  for (int k = 0; k <= 5; ++k) {
    CHECK(tr.rho[1][k] == Catch::Approx(rho).margin(1e-12));
    for (std::size_t n = 0; n < tree.level_size(k); ++n)
      CHECK(tr.X[k].values[n] == Catch::Approx(rho).margin(1e-12));
    rho *= 1.0 + dt;
  }
}

TEST_CASE("stored mean-field marginals are reproducible from the state") {
  std::mt19937_64 rng(211);
  const ProblemSpec pb = samples::smooth_problem(rng, 3, VolatilityGrid({1.0, 2.0}));
  const ScenarioTree tree = pb.build_tree();
  const auto u = random_admissible_control(pb, tree, rng, true);
  const auto tr = simulate(pb, tree, u);
  for (int k = 0; k <= 3; ++k) {
    for (int i = 0; i < 5; ++i) {
      NodeField f{k, std::vector<double>(tree.level_size(k))};
      for (std::size_t n = 0; n < tree.level_size(k); ++n)
        f.values[n] = pb.phi[i].f(tr.X[k].values[n]);
      CHECK(tr.rho[i][k] == Catch::Approx(g_expectation(tree, f)).margin(1e-12));
    }
  }
}

TEST_CASE("quadratic-variation drift enters through the vol-squared increment") {
  PolynomialProblemConfig cfg;
  cfg.sigma.c[0] = 1.0;
  cfg.beta.c[0] = 1.0;  // X = x0 + B + <B>
  for (auto& phi : cfg.phi) phi.c = {0.0, 1.0, 0.0};
  cfg.x0 = 0.0;
  cfg.N = 3;
  cfg.grid = VolatilityGrid({0.7, 1.4});
  const ProblemSpec pb = make_polynomial_problem(cfg);
  REQUIRE_FALSE(pb.beta_zero);
  const ScenarioTree tree = pb.build_tree();
  const auto u = ControlProcess::constant(3, 0.0);
  const auto tr = simulate(pb, tree, u);
  for (int k = 0; k <= 3; ++k)
    for (std::size_t n = 0; n < tree.level_size(k); ++n)
      CHECK(tr.X[k].values[n] ==
            Catch::Approx(tree.brownian(k, n) + tree.quadratic_variation(k, n)).margin(1e-13));

  // the first-order machinery refuses the d<B> drift
  CHECK_THROWS_AS(variational_process(pb, tree, u, u), CapabilityError);
  CHECK_THROWS_AS(directional_derivative(pb, tree, u, u), CapabilityError);
}

TEST_CASE("state blow-up reports the offending node path") {
  PolynomialProblemConfig cfg;
  cfg.b.c[4] = 1.0;  // b = x^2
  for (auto& phi : cfg.phi) phi.c = {0.0, 1.0, 0.0};
  cfg.x0 = 1e160;
  cfg.N = 2;
  cfg.grid = VolatilityGrid({1.0});
  const ProblemSpec pb = make_polynomial_problem(cfg);
  const ScenarioTree tree = pb.build_tree();
  try {
    simulate(pb, tree, ControlProcess::constant(2, 0.0));
    FAIL("expected blow-up");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("level") != std::string::npos);
  }
}

TEST_CASE("cost functional closed forms") {
  SECTION("linear terminal cost of additive noise") {
    PolynomialProblemConfig cfg;
    cfg.sigma.c[0] = 1.0;
    cfg.Phi.c = {0.0, 1.0, 0, 0, 0, 0, 0, 0, 0, 0};  // Phi = x
    for (auto& phi : cfg.phi) phi.c = {0.0, 1.0, 0.0};
    cfg.x0 = 1.25;
    cfg.N = 2;
    cfg.grid = VolatilityGrid({1.0, 2.0});
    const ProblemSpec pb = make_polynomial_problem(cfg);
    const ScenarioTree tree = pb.build_tree();
    CHECK(cost(pb, tree, ControlProcess::constant(2, 0.0)) ==
          Catch::Approx(1.25).margin(1e-12));
  }
  SECTION("quadratic terminal cost picks the worst variance") {
    PolynomialProblemConfig cfg;
    cfg.sigma.c[0] = 1.0;
    cfg.Phi.c = {0.0, 0.0, 0.0, 0.0, 1.0, 0, 0, 0, 0, 0};  // Phi = x^2
    for (auto& phi : cfg.phi) phi.c = {0.0, 1.0, 0.0};
    cfg.x0 = 0.5;
    cfg.N = 1;
    cfg.grid = VolatilityGrid({0.6, 1.3});
    const ProblemSpec pb = make_polynomial_problem(cfg);
    const ScenarioTree tree = pb.build_tree();
    CHECK(cost(pb, tree, ControlProcess::constant(1, 0.0)) ==
          Catch::Approx(0.25 + 1.3 * 1.3).margin(1e-12));
  }
  SECTION("adding a positive running cost increases the total") {
    std::mt19937_64 rng(223);
    ProblemSpec pb = samples::duality_problem(rng, 3, VolatilityGrid({1.0, 2.0}));
    const ScenarioTree tree = pb.build_tree();
    const auto u = random_admissible_control(pb, tree, rng, false);
    const double base = cost(pb, tree, u);
    ProblemSpec more = pb;
    const RunningCost l0 = pb.l;
    more.l.f = [l0](double t, double x, double y, double v) {
      return l0.f(t, x, y, v) + 0.5 + 0.1 * x * x;
    };
    more.l.fx = [l0](double t, double x, double y, double v) {
      return l0.fx(t, x, y, v) + 0.2 * x;
    };
    CHECK(cost(more, tree, u) >= base + 0.4);
  }
}

TEST_CASE("variational process basics") {
  std::mt19937_64 rng(227);
  const ProblemSpec pb = samples::smooth_problem(rng, 3, VolatilityGrid({1.0, 2.0}));
  const ScenarioTree tree = pb.build_tree();
  const auto u_hat = random_admissible_control(pb, tree, rng, true);

  SECTION("zero direction gives the zero process") {
    const auto z =
        variational_process(pb, tree, u_hat, ControlProcess::constant_adapted(tree, 0.0));
    for (const NodeField& level : z)
      for (double v : level.values) CHECK(v == 0.0);
  }
  SECTION("positively homogeneous in the direction") {
    const auto u = random_admissible_control(pb, tree, rng, true);
    const auto v = scaled_control(control_difference(tree, u, u_hat), 0.5);
    const auto z1 = variational_process(pb, tree, u_hat, v);
    const auto z2 = variational_process(pb, tree, u_hat, scaled_control(v, 2.0));
    for (int k = 0; k <= tree.depth(); ++k)
      for (std::size_t n = 0; n < tree.level_size(k); ++n)
        CHECK(z2[k].values[n] == Catch::Approx(2.0 * z1[k].values[n]).margin(1e-12));
  }
}

TEST_CASE("state- and mean-field-free coefficients give an explicit sensitivity sum") {
  // b = bv*u, sigma = s0 + sv*u: z is a plain integral of the direction
  PolynomialProblemConfig cfg;
  const double bv = 0.7, s0 = 0.9, sv = 0.4;
  cfg.b.c[3] = bv;
  cfg.sigma.c[0] = s0;
  cfg.sigma.c[3] = sv;
  for (auto& phi : cfg.phi) phi.c = {0.0, 1.0, 0.0};
  cfg.x0 = 0.0;
  cfg.N = 3;
  cfg.grid = VolatilityGrid({1.0, 2.0});
  cfg.u_lo = -2.0;
  cfg.u_hi = 2.0;
  const ProblemSpec pb = make_polynomial_problem(cfg);
  const ScenarioTree tree = pb.build_tree();
  std::mt19937_64 rng(229);
  const auto u_hat = random_admissible_control(pb, tree, rng, true);
  const auto v = scaled_control(random_admissible_control(pb, tree, rng, true), 0.25);
  const auto z = variational_process(pb, tree, u_hat, v);
  const double dt = tree.dt();
  const double sdt = tree.sqrt_dt();
  for (std::size_t leaf = 0; leaf < tree.level_size(3); ++leaf) {
    double expected = 0.0;
    std::vector<std::size_t> chain{leaf};
    for (int k = 3; k > 0; --k) chain.push_back(tree.parent(chain.back()));
    for (int k = 0; k < 3; ++k) {
      const std::size_t node = chain[3 - k];
      const std::size_t child = chain[2 - k];
      const double db = tree.sign_of(child) * tree.grid()[tree.sigma_index_of(child)] * sdt;
      expected += bv * v.at(k, node) * dt + sv * v.at(k, node) * db;
    }
    CHECK(z[3].values[leaf] == Catch::Approx(expected).margin(1e-12));
  }
}

TEST_CASE("variational process is the first-order state expansion") {
  std::mt19937_64 rng(233);
  std::vector<double> thetas;
  for (int e = 3; e <= 10; ++e) thetas.push_back(std::ldexp(1.0, -e));

  const ProblemSpec pb = samples::smooth_problem(rng, 3, VolatilityGrid({1.0, 2.0}));
  const ScenarioTree tree = pb.build_tree();
  const auto u_hat = random_admissible_control(pb, tree, rng, true);
  const auto u = random_admissible_control(pb, tree, rng, true);
  const auto v = control_difference(tree, u, u_hat);
  const auto base = simulate(pb, tree, u_hat);
  const auto z = variational_process(pb, tree, base, u_hat, v);

  std::vector<double> errors_z, errors_state;
  for (double theta : thetas) {
    const auto bumped = simulate(pb, tree, control_axpy(tree, u_hat, theta, v));
    double err = 0.0;
    for (int k = 0; k <= 3; ++k)
      for (std::size_t n = 0; n < tree.level_size(k); ++n) {
        const double diff = bumped.X[k].values[n] - base.X[k].values[n];
        err = std::max(err, std::abs(diff / theta - z[k].values[n]));
      }
    errors_z.push_back(err);
    // worst-case expectation of the squared pathwise running maximum
    std::vector<double> running{std::abs(bumped.X[0].values[0] - base.X[0].values[0])};
    for (int k = 0; k < 3; ++k) {
      std::vector<double> next(tree.level_size(k + 1));
      for (std::size_t n = 0; n < tree.level_size(k + 1); ++n)
        next[n] = std::max(running[tree.parent(n)],
                           std::abs(bumped.X[k + 1].values[n] - base.X[k + 1].values[n]));
      running = std::move(next);
    }
    NodeField sup_sq{3, std::move(running)};
    for (double& s : sup_sq.values) s *= s;
    errors_state.push_back(g_expectation(tree, sup_sq));
  }
  CHECK(oracles::loglog_slope(thetas, errors_z) >= oracles::kOrderOne);
  CHECK(oracles::loglog_slope(thetas, errors_state) >= oracles::kOrderTwo);
}

TEST_CASE("mean-field marginal difference quotients converge to the one-sided derivative") {
  std::mt19937_64 rng(239);
  const ProblemSpec pb = samples::smooth_problem(rng, 3, VolatilityGrid({1.0, 2.0}));
  const ScenarioTree tree = pb.build_tree();
  const auto u_hat = random_admissible_control(pb, tree, rng, true);
  const auto u = random_admissible_control(pb, tree, rng, true);
  const auto v = control_difference(tree, u, u_hat);
  const auto base = simulate(pb, tree, u_hat);
  const auto z = variational_process(pb, tree, base, u_hat, v);

  const int k = 2;  // interior level
  NodeField phi2{k, std::vector<double>(tree.level_size(k))};
  NodeField dphi2_z{k, std::vector<double>(tree.level_size(k))};
  for (std::size_t n = 0; n < tree.level_size(k); ++n) {
    phi2.values[n] = pb.phi[1].f(base.X[k].values[n]);
    dphi2_z.values[n] = pb.phi[1].d(base.X[k].values[n]) * z[k].values[n];
  }
  const double limit = restricted_sup(tree, phi2, dphi2_z);
  std::vector<double> thetas, errors;
  for (int e = 3; e <= 10; ++e) {
    const double theta = std::ldexp(1.0, -e);
    const auto bumped = simulate(pb, tree, control_axpy(tree, u_hat, theta, v));
    errors.push_back(std::abs((bumped.rho[1][k] - base.rho[1][k]) / theta - limit));
    thetas.push_back(theta);
  }
  CHECK(oracles::loglog_slope(thetas, errors) >= oracles::kOrderOne);
}

TEST_CASE("directional derivative of the cost") {
  std::mt19937_64 rng(241);

  SECTION("zero direction") {
    const ProblemSpec pb = samples::smooth_problem(rng, 2, VolatilityGrid({1.0, 2.0}));
    const ScenarioTree tree = pb.build_tree();
    const auto u_hat = random_admissible_control(pb, tree, rng, false);
    CHECK(directional_derivative(pb, tree, u_hat, ControlProcess::constant(2, 0.0)) ==
          Catch::Approx(0.0).margin(1e-14));
  }
  SECTION("single-volatility grid: classical derivative, first-order FD error") {
    const ProblemSpec pb = samples::smooth_problem(rng, 3, VolatilityGrid({1.0}));
    const ScenarioTree tree = pb.build_tree();
    const auto u_hat = random_admissible_control(pb, tree, rng, true);
    const auto u = random_admissible_control(pb, tree, rng, true);
    const auto v = control_difference(tree, u, u_hat);
    const double dd = directional_derivative(pb, tree, u_hat, v);
    const double j0 = cost(pb, tree, u_hat);
    std::vector<double> thetas, errors;
    for (int e = 3; e <= 9; ++e) {
      const double theta = std::ldexp(1.0, -e);
      errors.push_back(
          std::abs((cost(pb, tree, control_axpy(tree, u_hat, theta, v)) - j0) / theta - dd));
      thetas.push_back(theta);
    }
    CHECK(oracles::loglog_slope(thetas, errors) >= oracles::kOrderOne);
  }
  SECTION("affine problems: exact agreement below the outer breakpoint") {
    for (int trial = 0; trial < 4; ++trial) {
      const ProblemSpec pb = samples::affine_problem(rng, 2, VolatilityGrid({1.0, 2.0}));
      const ScenarioTree tree = pb.build_tree();
      const auto u_hat = random_admissible_control(pb, tree, rng, true);
      const auto u = random_admissible_control(pb, tree, rng, true);
      const auto v = control_difference(tree, u, u_hat);
      const double dd = directional_derivative(pb, tree, u_hat, v);
      const double j0 = cost(pb, tree, u_hat);
      const double fd = oracles::stable_fd_slope(
          [&](double theta) { return cost(pb, tree, control_axpy(tree, u_hat, theta, v)); }, j0,
          0.25);
      CHECK(dd == Catch::Approx(fd).margin(1e-9));
    }
  }
}

TEST_CASE("trajectory export uses the documented schema") {
  PolynomialProblemConfig cfg;
  cfg.sigma.c[0] = 1.0;
  for (auto& phi : cfg.phi) phi.c = {0.0, 1.0, 0.0};
  cfg.N = 1;
  cfg.grid = VolatilityGrid({1.0});
  const ProblemSpec pb = make_polynomial_problem(cfg);
  const ScenarioTree tree = pb.build_tree();
  const auto tr = simulate(pb, tree, ControlProcess::constant(1, 0.0));
  std::ostringstream os;
  export_trajectory_csv(tree, tr, os);
  std::istringstream is(os.str());
  std::string header;
  std::getline(is, header);
  CHECK(header == "level,node_index,X,rho1,rho2,rho3,rho4,rho5");
  int rows = 0;
  for (std::string line; std::getline(is, line);) ++rows;
  CHECK(rows == 3);  // root + 2 leaves
}
