#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "gsmp/mf_gsde.hpp"
#include "gsmp/scenario_tree.hpp"

namespace gsmp {

// ============================================================================
// Built-in problem families. The polynomial family covers everything the
// others do; coefficients are trivariate quadratics in (x, y, v) with
// analytic derivatives, so no expression interpreter is needed.
// ============================================================================

/// Trivariate polynomial up to total degree 2, coefficient order
/// [1, x, y, v, x^2, x*y, x*v, y^2, y*v, v^2].
struct Poly3 {
  std::array<double, 10> c{};

  double eval(double x, double y, double v) const {
    return c[0] + c[1] * x + c[2] * y + c[3] * v + c[4] * x * x + c[5] * x * y + c[6] * x * v +
           c[7] * y * y + c[8] * y * v + c[9] * v * v;
  }
  double dx(double x, double y, double v) const {
    return c[1] + 2 * c[4] * x + c[5] * y + c[6] * v;
  }
  double dy(double x, double y, double v) const {
    return c[2] + c[5] * x + 2 * c[7] * y + c[8] * v;
  }
  double dv(double x, double y, double v) const {
    return c[3] + c[6] * x + c[8] * y + 2 * c[9] * v;
  }
  bool y_free() const { return c[2] == 0 && c[5] == 0 && c[7] == 0 && c[8] == 0; }
  bool zero() const {
    return std::all_of(c.begin(), c.end(), [](double a) { return a == 0.0; });
  }
};

/// Univariate polynomial up to degree 2, coefficient order [1, x, x^2].
struct Poly1 {
  std::array<double, 3> c{};
  double eval(double x) const { return c[0] + c[1] * x + c[2] * x * x; }
  double dx(double x) const { return c[1] + 2 * c[2] * x; }
};

struct PolynomialProblemConfig {
  Poly3 b, sigma, beta;
  Poly3 Phi;  // in (x, y); the v slots must stay zero
  Poly3 l;    // in (x, y, v); time-independent
  std::array<Poly1, 5> phi;
  double x0 = 0.0, T = 1.0;
  int N = 1;
  VolatilityGrid grid;
  double u_lo = -1.0, u_hi = 1.0;
  std::size_t node_budget = ScenarioTree::kDefaultNodeBudget;
};

namespace detail {

inline Coefficient coefficient_of(const Poly3& p) {
  return {[p](double x, double y, double v) { return p.eval(x, y, v); },
          [p](double x, double y, double v) { return p.dx(x, y, v); },
          [p](double x, double y, double v) { return p.dy(x, y, v); },
          [p](double x, double y, double v) { return p.dv(x, y, v); }};
}

inline ScalarMap scalar_of(const Poly1& p) {
  return {[p](double x) { return p.eval(x); }, [p](double x) { return p.dx(x); }};
}

}  // namespace detail

/// Assembles a ProblemSpec with exact derivatives; the capability flags are
/// computed from the coefficients, never asserted blindly:
///   a3_monotone needs Phi_y and l_y constant and non-negative,
///   a3_prime needs l y-free and Phi free of x*y and y^2 cross terms.
inline ProblemSpec make_polynomial_problem(const PolynomialProblemConfig& cfg) {
  if (cfg.Phi.c[3] != 0 || cfg.Phi.c[6] != 0 || cfg.Phi.c[8] != 0 || cfg.Phi.c[9] != 0)
    throw std::invalid_argument("make_polynomial_problem: Phi must not involve v");
  ProblemSpec pb;
  pb.b = detail::coefficient_of(cfg.b);
  pb.sigma = detail::coefficient_of(cfg.sigma);
  pb.beta = detail::coefficient_of(cfg.beta);
  const Poly3 Phi = cfg.Phi;
  pb.Phi = {[Phi](double x, double y) { return Phi.eval(x, y, 0.0); },
            [Phi](double x, double y) { return Phi.dx(x, y, 0.0); },
            [Phi](double x, double y) { return Phi.dy(x, y, 0.0); }};
  const Poly3 l = cfg.l;
  pb.l = {[l](double, double x, double y, double v) { return l.eval(x, y, v); },
          [l](double, double x, double y, double v) { return l.dx(x, y, v); },
          [l](double, double x, double y, double v) { return l.dy(x, y, v); },
          [l](double, double x, double y, double v) { return l.dv(x, y, v); }};
  for (int i = 0; i < 5; ++i) pb.phi[i] = detail::scalar_of(cfg.phi[i]);
  pb.x0 = cfg.x0;
  pb.T = cfg.T;
  pb.N = cfg.N;
  pb.grid = cfg.grid;
  pb.u_lo = cfg.u_lo;
  pb.u_hi = cfg.u_hi;
  pb.node_budget = cfg.node_budget;
  pb.y_independent_dynamics = cfg.b.y_free() && cfg.sigma.y_free();
  pb.beta_zero = cfg.beta.zero();
  const bool phi_y_const_nonneg = cfg.Phi.c[5] == 0 && cfg.Phi.c[7] == 0 && cfg.Phi.c[2] >= 0;
  const bool l_y_const_nonneg = cfg.l.c[5] == 0 && cfg.l.c[7] == 0 && cfg.l.c[8] == 0 && cfg.l.c[2] >= 0;
  pb.a3_monotone = phi_y_const_nonneg && l_y_const_nonneg;
  pb.a3_prime = cfg.l.y_free() && cfg.Phi.c[5] == 0;
  return pb;
}

/// Controlled drift with additive noise: dx = bv*u dt + s0 dB, quadratic cost.
inline ProblemSpec additive_problem(double bv, double s0, double x0, double T, int N,
                                    VolatilityGrid grid, double u_lo = -5.0, double u_hi = 5.0) {
  PolynomialProblemConfig cfg;
  cfg.b.c[3] = bv;
  cfg.sigma.c[0] = s0;
  cfg.Phi.c[4] = 0.5;                       // Phi = x^2/2
  cfg.l.c[4] = 0.5;                         // l = (x^2 + v^2)/2
  cfg.l.c[9] = 0.5;
  cfg.phi = {Poly1{{0, 1, 0}}, Poly1{{0, 1, 0}}, Poly1{{0, 1, 0}}, Poly1{{0, 1, 0}},
             Poly1{{0, 1, 0}}};
  cfg.x0 = x0;
  cfg.T = T;
  cfg.N = N;
  cfg.grid = std::move(grid);
  cfg.u_lo = u_lo;
  cfg.u_hi = u_hi;
  return make_polynomial_problem(cfg);
}

/// Mean-field drift: dx = (kappa * worst-case E[x] + bv*u) dt + s0 dB.
inline ProblemSpec meanfield_drift_problem(double kappa, double bv, double s0, double x0,
                                           double T, int N, VolatilityGrid grid,
                                           double u_lo = -5.0, double u_hi = 5.0) {
  PolynomialProblemConfig cfg;
  cfg.b.c[2] = kappa;  // drift reads its own mean-field argument
  cfg.b.c[3] = bv;
  cfg.sigma.c[0] = s0;
  cfg.Phi.c[4] = 0.5;
  cfg.l.c[9] = 0.5;
  cfg.phi = {Poly1{{0, 1, 0}}, Poly1{{0, 1, 0}}, Poly1{{0, 1, 0}}, Poly1{{0, 1, 0}},
             Poly1{{0, 1, 0}}};
  cfg.x0 = x0;
  cfg.T = T;
  cfg.N = N;
  cfg.grid = std::move(grid);
  cfg.u_lo = u_lo;
  cfg.u_hi = u_hi;
  return make_polynomial_problem(cfg);
}

/// Uniform random field on one level, for seeded checks.
inline NodeField random_node_field(const ScenarioTree& tree, int level, std::mt19937_64& rng,
                                   double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  NodeField f{level, std::vector<double>(tree.level_size(level))};
  for (double& v : f.values) v = dist(rng);
  return f;
}

inline ControlProcess random_admissible_control(const ProblemSpec& pb, const ScenarioTree& tree,
                                                std::mt19937_64& rng, bool adapted) {
  std::uniform_real_distribution<double> dist(pb.u_lo, pb.u_hi);
  if (!adapted) {
    std::vector<double> per_step(static_cast<std::size_t>(tree.depth()));
    for (double& v : per_step) v = dist(rng);
    return ControlProcess::deterministic(std::move(per_step));
  }
  std::vector<std::vector<double>> values(static_cast<std::size_t>(tree.depth()));
  for (int k = 0; k < tree.depth(); ++k) {
    values[k].resize(tree.level_size(k));
    for (double& v : values[k]) v = dist(rng);
  }
  return ControlProcess::adapted(std::move(values));
}

}  // namespace gsmp
