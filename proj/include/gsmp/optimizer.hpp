#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <limits>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "gsmp/adjoint_smp.hpp"
#include "gsmp/mf_gsde.hpp"
#include "gsmp/scenario_tree.hpp"
#include "gsmp/sublinear_calculus.hpp"

namespace gsmp {

// ============================================================================
// Projected descent on the control.
//
// The step direction comes from the adjoint representation of the cost
// derivative: a backward costate pass under a measure drawn from the argmax
// sets yields the per-node coefficient of the control perturbation. The
// worst-case cost is only piecewise smooth; iterates tend to crawl along the
// kink manifolds where branch values tie. The line search therefore runs on
// an entropically smoothed cost (each node max replaced by a temperature-tau
// log-sum-exp, whose exact gradient is the same costate pass under softmax
// branch weights), with tau driven to zero. Convergence is always declared
// on the exact first-order residual, never on the smoothed one.
// ============================================================================

struct StepRule {
  double initial_step = 1.0;
  double shrink = 0.5;
  double armijo = 1e-4;
  int max_backtracks = 40;
  double tolerance = -1.0;        // stop when the exact residual >= -tolerance; <0 = auto
  double initial_temperature = 0.1;
  double temperature_shrink = 0.2;
  double min_temperature = 1e-12;
};

struct DescentIterate {
  double cost = 0.0;
  double step = 0.0;
  double residual = 0.0;  // box minimum of the exact first-order model; <= 0
};

struct DescentReport {
  std::vector<DescentIterate> iterates;
  ControlProcess control;
  bool converged = false;
  std::string message;
};

namespace detail {

// Per-node branch weights: weights[k][n*m + s] is the mass share of sigma s
// at node n of level k. Uniform-over-argmax and softmax variants below.
using BranchWeights = std::vector<std::vector<double>>;

inline BranchWeights weights_from_masks(const ScenarioTree& tree,
                                        const std::vector<std::vector<std::uint32_t>>& masks) {
  const int m = tree.grid().size();
  BranchWeights w(masks.size());
  for (std::size_t k = 0; k < masks.size(); ++k) {
    w[k].assign(tree.level_size(static_cast<int>(k)) * m, 0.0);
    for (std::size_t n = 0; n < masks[k].size(); ++n) {
      const std::uint32_t mask = masks[k][n];
      const double share = 1.0 / std::popcount(mask);
      for (int s = 0; s < m; ++s)
        if ((mask >> s) & 1u) w[k][n * m + s] = share;
    }
  }
  return w;
}

// Smoothed worst-case expectation: the node max becomes
// tau * log sum_s exp(branch_s / tau). Returns the root value and the
// softmax branch weights, which are exactly the gradient of the smoothed
// value with respect to the branch values.
inline double soft_g_expectation(const ScenarioTree& tree, const NodeField& xi, double tau,
                                 BranchWeights* weights_out = nullptr) {
  validate_field(tree, xi);
  const int m = tree.grid().size();
  const std::size_t br = static_cast<std::size_t>(tree.branch_factor());
  if (weights_out) weights_out->assign(static_cast<std::size_t>(xi.level), {});
  std::vector<double> v = xi.values;
  for (int lev = xi.level - 1; lev >= 0; --lev) {
    std::vector<double> next(tree.level_size(lev));
    if (weights_out) (*weights_out)[lev].assign(tree.level_size(lev) * m, 0.0);
    for (std::size_t i = 0; i < next.size(); ++i) {
      const std::size_t base = i * br;
      double top = -std::numeric_limits<double>::infinity();
      for (int s = 0; s < m; ++s)
        top = std::max(top, 0.5 * (v[base + 2 * s] + v[base + 2 * s + 1]));
      double total = 0.0;
      for (int s = 0; s < m; ++s) {
        const double b = 0.5 * (v[base + 2 * s] + v[base + 2 * s + 1]);
        const double e = std::exp((b - top) / tau);
        total += e;
        if (weights_out) (*weights_out)[lev][i * m + s] = e;
      }
      if (weights_out)
        for (int s = 0; s < m; ++s) (*weights_out)[lev][i * m + s] /= total;
      next[i] = top + tau * std::log(total);
    }
    v = std::move(next);
  }
  return v[0];
}

struct ModelGradient {
  std::vector<std::vector<double>> w;  // measure-weighted coefficient of v per node
  std::vector<std::vector<double>> m;  // aggregate visitation mass per node
};

inline std::vector<std::vector<double>> weighted_masses(const ScenarioTree& tree,
                                                        const BranchWeights& weights,
                                                        int up_to) {
  const int m = tree.grid().size();
  std::vector<std::vector<double>> mu(static_cast<std::size_t>(up_to) + 1);
  mu[0] = {1.0};
  for (int k = 0; k < up_to; ++k) {
    mu[k + 1].assign(tree.level_size(k + 1), 0.0);
    for (std::size_t n = 0; n < tree.level_size(k); ++n) {
      if (mu[k][n] == 0.0) continue;
      for (int s = 0; s < m; ++s) {
        const double share = 0.5 * mu[k][n] * weights[k][n * m + s];
        if (share == 0.0) continue;
        mu[k + 1][tree.child(n, s, +1)] += share;
        mu[k + 1][tree.child(n, s, -1)] += share;
      }
    }
  }
  return mu;
}

// Backward costate pass under the weighted measure; accumulates the
// coefficient of the control perturbation into g.w and the visitation mass
// into g.m. rho4/rho5 supply the cost-side mean-field arguments (the exact
// worst-case values, or their smoothed counterparts during smoothing).
inline void accumulate_weighted_pairing(const ProblemSpec& pb, const ScenarioTree& tree,
                                        const MeanFieldTrajectory& tr,
                                        const ControlProcess& u_hat,
                                        const BranchWeights& weights, const NodeField& terminal,
                                        bool with_cost_driver,
                                        const std::vector<double>& rho5, double weight,
                                        ModelGradient& g) {
  if (weight == 0.0) return;
  const int horizon = terminal.level;
  const double dt = tree.dt();
  const double sdt = tree.sqrt_dt();
  const int m = tree.grid().size();
  const auto mu = weighted_masses(tree, weights, horizon);

  std::vector<double> p = terminal.values;
  for (int k = horizon - 1; k >= 0; --k) {
    std::vector<double> p_next(tree.level_size(k));
    const double rho1 = tr.rho[0][k], rho2 = tr.rho[1][k];
    for (std::size_t n = 0; n < tree.level_size(k); ++n) {
      const double x = tr.X[k].values[n];
      const double uv = u_hat.at(k, n);
      const double bx = pb.b.fx(x, rho2, uv);
      const double sx = pb.sigma.fx(x, rho1, uv);
      const double bv = pb.b.fv(x, rho2, uv);
      const double sv = pb.sigma.fv(x, rho1, uv);
      const double lx = with_cost_driver ? pb.l.fx(k * dt, x, rho5[k], uv) : 0.0;
      const double lv = with_cost_driver ? pb.l.fv(k * dt, x, rho5[k], uv) : 0.0;
      double pn = 0.0, hn = 0.0;
      for (int s = 0; s < m; ++s) {
        const double share = weights[k][n * m + s];
        if (share == 0.0) continue;
        const double vol = tree.grid()[s];
        const double p_up = p[tree.child(n, s, +1)];
        const double p_down = p[tree.child(n, s, -1)];
        const double q = (p_up - p_down) / (2.0 * vol * sdt);
        const double pbar = 0.5 * (p_up + p_down);
        pn += share * (pbar + (bx * pbar + lx) * dt + sx * q * vol * vol * dt);
        hn += share * ((pbar * bv + lv) * dt + q * sv * vol * vol * dt);
      }
      p_next[n] = pn;
      if (mu[k][n] != 0.0) {
        g.w[k][n] += weight * mu[k][n] * hn;
        g.m[k][n] += std::abs(weight) * mu[k][n];
      }
    }
    p = std::move(p_next);
  }
}

struct CostFields {
  NodeField psi;                     // pathwise total cost at the final level
  NodeField phi4, dphi4;             // phi4(X_N) and phi4'(X_N)
  double rho4 = 0.0;                 // mean-field argument of the terminal cost
  std::vector<double> rho5;          // per-level mean-field argument of l
};

// Total-cost field with explicit mean-field arguments (exact worst-case when
// tau < 0, smoothed otherwise).
inline CostFields cost_fields(const ProblemSpec& pb, const ScenarioTree& tree,
                              const MeanFieldTrajectory& tr, const ControlProcess& u,
                              double tau) {
  const int N = tree.depth();
  const double dt = tree.dt();
  CostFields out;
  out.phi4 = NodeField{N, std::vector<double>(tree.level_size(N))};
  out.dphi4 = NodeField{N, std::vector<double>(tree.level_size(N))};
  for (std::size_t n = 0; n < tree.level_size(N); ++n) {
    out.phi4.values[n] = pb.phi[3].f(tr.X[N].values[n]);
    out.dphi4.values[n] = pb.phi[3].d(tr.X[N].values[n]);
  }
  out.rho4 = tau < 0.0 ? tr.rho[3][N] : soft_g_expectation(tree, out.phi4, tau);
  out.rho5.assign(static_cast<std::size_t>(N), 0.0);
  NodeField phi5;
  for (int k = 0; k < N; ++k) {
    if (tau < 0.0) {
      out.rho5[k] = tr.rho[4][k];
      continue;
    }
    phi5.level = k;
    phi5.values.resize(tree.level_size(k));
    for (std::size_t n = 0; n < tree.level_size(k); ++n)
      phi5.values[n] = pb.phi[4].f(tr.X[k].values[n]);
    out.rho5[k] = soft_g_expectation(tree, phi5, tau);
  }

  std::vector<double> acc{0.0};
  for (int k = 0; k < N; ++k) {
    std::vector<double> next(tree.level_size(k + 1));
    for (std::size_t n = 0; n < tree.level_size(k); ++n) {
      const double run = acc[n] + pb.l.f(k * dt, tr.X[k].values[n], out.rho5[k], u.at(k, n)) * dt;
      const std::size_t base = n * static_cast<std::size_t>(tree.branch_factor());
      for (int j = 0; j < tree.branch_factor(); ++j) next[base + j] = run;
    }
    acc = std::move(next);
  }
  out.psi = NodeField{N, std::move(acc)};
  for (std::size_t n = 0; n < tree.level_size(N); ++n)
    out.psi.values[n] += pb.Phi.f(tr.X[N].values[n], out.rho4);
  return out;
}

// Exact gradient of the (smoothed) cost via weighted costate passes; tau < 0
// selects the exact worst case, where the weights are uniform over the
// argmax masks (the frozen-selection model of the pure-policy adjoints when
// the argmax sets are singletons).
inline ModelGradient model_gradient(const ProblemSpec& pb, const ScenarioTree& tree,
                                    const MeanFieldTrajectory& tr, const ControlProcess& u_hat,
                                    double tau = -1.0, double eps_tie = -1.0) {
  const int N = tree.depth();
  const double dt = tree.dt();
  ModelGradient g;
  g.w.resize(static_cast<std::size_t>(N));
  g.m.resize(static_cast<std::size_t>(N));
  for (int k = 0; k < N; ++k) {
    g.w[k].assign(tree.level_size(k), 0.0);
    g.m[k].assign(tree.level_size(k), 0.0);
  }
  const CostFields fields = cost_fields(pb, tree, tr, u_hat, tau);

  BranchWeights wP;
  if (tau < 0.0)
    wP = weights_from_masks(tree, maximizing_set(tree, fields.psi, eps_tie).masks);
  else
    soft_g_expectation(tree, fields.psi, tau, &wP);

  NodeField phi_x{N, std::vector<double>(tree.level_size(N))};
  for (std::size_t n = 0; n < tree.level_size(N); ++n)
    phi_x.values[n] = pb.Phi.fx(tr.X[N].values[n], fields.rho4);
  accumulate_weighted_pairing(pb, tree, tr, u_hat, wP, phi_x, true, fields.rho5, 1.0, g);

  const auto muP = weighted_masses(tree, wP, N);
  double phi_y_weight = 0.0;
  for (std::size_t n = 0; n < tree.level_size(N); ++n)
    phi_y_weight += muP[N][n] * pb.Phi.fy(tr.X[N].values[n], fields.rho4);
  if (phi_y_weight != 0.0) {
    BranchWeights wQ;
    if (tau < 0.0)
      wQ = weights_from_masks(tree, maximizing_set(tree, fields.phi4, eps_tie).masks);
    else
      soft_g_expectation(tree, fields.phi4, tau, &wQ);
    accumulate_weighted_pairing(pb, tree, tr, u_hat, wQ, fields.dphi4, false, fields.rho5,
                                phi_y_weight, g);
  }

  if (!pb.a3_prime) {
    for (int k = 1; k < N; ++k) {
      double ly_weight = 0.0;
      for (std::size_t n = 0; n < tree.level_size(k); ++n)
        ly_weight +=
            muP[k][n] * pb.l.fy(k * dt, tr.X[k].values[n], fields.rho5[k], u_hat.at(k, n));
      if (ly_weight == 0.0) continue;
      NodeField phi5{k, std::vector<double>(tree.level_size(k))};
      NodeField dphi5{k, std::vector<double>(tree.level_size(k))};
      for (std::size_t n = 0; n < tree.level_size(k); ++n) {
        phi5.values[n] = pb.phi[4].f(tr.X[k].values[n]);
        dphi5.values[n] = pb.phi[4].d(tr.X[k].values[n]);
      }
      BranchWeights wR;
      if (tau < 0.0)
        wR = weights_from_masks(tree, maximizing_set(tree, phi5, eps_tie).masks);
      else
        soft_g_expectation(tree, phi5, tau, &wR);
      accumulate_weighted_pairing(pb, tree, tr, u_hat, wR, dphi5, false, fields.rho5,
                                  ly_weight * dt, g);
    }
  }
  return g;
}

inline double smoothed_cost(const ProblemSpec& pb, const ScenarioTree& tree,
                            const ControlProcess& u, double tau) {
  const MeanFieldTrajectory tr = simulate(pb, tree, u);
  const CostFields fields = cost_fields(pb, tree, tr, u, tau);
  return soft_g_expectation(tree, fields.psi, tau);
}

}  // namespace detail

/// Minimizes the cost by box-projected descent. The line search runs on the
/// smoothed cost at the current temperature; the temperature shrinks whenever
/// a step stalls, and termination is always judged on the exact residual
/// (the box minimum of the exact first-order model).
inline DescentReport descend(const ProblemSpec& pb, const ScenarioTree& tree,
                             const ControlProcess& u0, int max_iters, StepRule rule = {}) {
  detail::require_theta_capabilities(pb, "descend");
  if (!is_admissible(u0, pb)) throw std::invalid_argument("descend: u0 not admissible");
  const int N = tree.depth();
  const double dt = tree.dt();

  DescentReport report;
  report.control = u0;
  double j_exact = 0.0, j_soft = 0.0, tau = 0.0;
  double tol = rule.tolerance;
  // a blown-up state is reported through the result, never thrown
  try {
    j_exact = cost(pb, tree, report.control);
    if (tol < 0.0) tol = 1e-6 * (1.0 + std::abs(j_exact));
    tau = rule.initial_temperature * (1.0 + std::abs(j_exact));
    j_soft = detail::smoothed_cost(pb, tree, report.control, tau);
  } catch (const std::runtime_error& e) {
    report.message = std::string("cost is not finite at the starting control: ") + e.what();
    return report;
  }

  const bool adapted = u0.is_adapted();
  // Accepts a step when the smoothed cost satisfies the Armijo bound AND the
  // exact cost does not increase: the smoothed direction may hop across kink
  // manifolds at moderate steps, but accepted iterates stay monotone in J.
  const auto try_line_search = [&](const std::vector<std::vector<double>>& dir, double slope,
                                   double j_soft_current, double& j_soft_next,
                                   double& j_exact_next, ControlProcess& candidate,
                                   double& step, double j_exact_current) {
    for (int bt = 0; bt < rule.max_backtracks; ++bt) {
      candidate = report.control;
      for (int k = 0; k < N; ++k)
        for (std::size_t i = 0; i < candidate.values()[k].size(); ++i)
          candidate.values()[k][i] = std::clamp(
              candidate.values()[k][i] + step * dir[k][adapted ? i : 0], pb.u_lo, pb.u_hi);
      try {
        const MeanFieldTrajectory tr_next = simulate(pb, tree, candidate);
        j_exact_next =
            g_expectation(tree, detail::cost_fields(pb, tree, tr_next, candidate, -1.0).psi);
        j_soft_next =
            detail::soft_g_expectation(tree, detail::cost_fields(pb, tree, tr_next, candidate, tau).psi, tau);
      } catch (const std::runtime_error&) {
        step *= rule.shrink;  // candidate state blew up; shorten and retry
        continue;
      }
      if (j_soft_next <= j_soft_current + rule.armijo * step * slope &&
          j_exact_next <= j_exact_current + 1e-12)
        return true;
      step *= rule.shrink;
    }
    return false;
  };
  const auto direction_of = [&](const detail::ModelGradient& g,
                                std::vector<std::vector<double>>& dir) {
    double slope = 0.0;
    dir.assign(static_cast<std::size_t>(N), {});
    for (int k = 0; k < N; ++k) {
      if (adapted) {
        dir[k].resize(tree.level_size(k));
        for (std::size_t n = 0; n < tree.level_size(k); ++n) {
          dir[k][n] = g.m[k][n] > 0.0 ? -g.w[k][n] / (g.m[k][n] * dt) : 0.0;
          slope += dir[k][n] * g.w[k][n];
        }
      } else {
        double w_level = 0.0, m_level = 0.0;
        for (std::size_t n = 0; n < tree.level_size(k); ++n) {
          w_level += g.w[k][n];
          m_level += g.m[k][n];
        }
        dir[k].assign(1, m_level > 0.0 ? -w_level / (m_level * dt) : 0.0);
        slope += dir[k][0] * w_level;
      }
    }
    return slope;
  };

  double warm_step = rule.initial_step;
  int rounding_floor_streak = 0;
  for (int iter = 0; iter < max_iters; ++iter) {
    if (!std::isfinite(j_exact)) {
      report.message = "cost is not finite";
      break;
    }
    const MeanFieldTrajectory tr = simulate(pb, tree, report.control);
    const detail::ModelGradient g_exact =
        detail::model_gradient(pb, tree, tr, report.control);
    const double residual = detail::corner_min(pb, report.control, g_exact.w);
    if (residual >= -tol) {
      report.iterates.push_back({j_exact, 0.0, residual});
      report.converged = true;
      report.message = "first-order residual within tolerance";
      break;
    }

    const detail::ModelGradient g_soft =
        detail::model_gradient(pb, tree, tr, report.control, tau);
    std::vector<std::vector<double>> dir;
    const double slope = direction_of(g_soft, dir);

    double step = std::min(rule.initial_step, 4.0 * warm_step);
    bool accepted = false;
    ControlProcess candidate = report.control;
    double j_soft_next = j_soft, j_exact_next = j_exact;
    if (slope < 0.0)
      accepted =
          try_line_search(dir, slope, j_soft, j_soft_next, j_exact_next, candidate, step, j_exact);
    report.iterates.push_back({j_exact, accepted ? step : 0.0, residual});

    const double tau_floor = rule.min_temperature * (1.0 + std::abs(j_exact));
    if (accepted) {
      warm_step = step;
      const double soft_progress = j_soft - j_soft_next;
      const double exact_progress = j_exact - j_exact_next;
      report.control = candidate;
      j_soft = j_soft_next;
      j_exact = j_exact_next;
      // progress at this temperature is saturated once decrements fall to
      // the smoothing bias scale; cool and continue
      if (soft_progress <= 0.05 * tau && tau > tau_floor) {
        tau = std::max(tau * rule.temperature_shrink, tau_floor);
        j_soft = detail::smoothed_cost(pb, tree, report.control, tau);
      }
      // double-precision floor: decrements below rounding cannot certify
      // further progress, stop rather than burn the iteration budget
      if (exact_progress <= 1e-15 * (1.0 + std::abs(j_exact)) && tau <= tau_floor * 5.0) {
        if (++rounding_floor_streak >= 16) {
          report.message = "progress below double-precision resolution";
          report.converged = residual >= -tol;
          break;
        }
      } else {
        rounding_floor_streak = 0;
      }
    } else {
      if (tau <= tau_floor) {
        report.message = "line search stalled at minimum temperature";
        report.converged = residual >= -tol;
        break;
      }
      tau = std::max(tau * rule.temperature_shrink, tau_floor);
      j_soft = detail::smoothed_cost(pb, tree, report.control, tau);
      warm_step = rule.initial_step;
    }
  }
  if (report.message.empty()) report.message = "iteration limit reached";
  return report;
}

/// Descent trace: iter,J,step,residual.
inline void export_descent_csv(const DescentReport& report, std::ostream& os) {
  os << "iter,J,step,residual\n";
  char buf[64];
  const auto num = [&](double x) {
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    return std::string(buf);
  };
  for (std::size_t i = 0; i < report.iterates.size(); ++i) {
    const auto& it = report.iterates[i];
    os << i << ',' << num(it.cost) << ',' << num(it.step) << ',' << num(it.residual) << '\n';
  }
}

// ============================================================================
// The packaged linear-quadratic family:
//   dx = (A x + B u) dt + (C x + D u) dB,
//   J(u) = 1/2 * worst-case of [ int (x^2 + u^2) dt + x_T^2 + E_worst[x_T^2] ].
// ============================================================================

struct LQSpec {
  double A = 0.0, B = 0.0, C = 0.0, D = 0.0;
};

inline ProblemSpec lq_problem(const LQSpec& lq, double x0, double T, int N, VolatilityGrid grid,
                              double u_lo = -10.0, double u_hi = 10.0) {
  ProblemSpec pb;
  pb.b = {[lq](double x, double, double v) { return lq.A * x + lq.B * v; },
          [lq](double, double, double) { return lq.A; },
          [](double, double, double) { return 0.0; },
          [lq](double, double, double) { return lq.B; }};
  pb.sigma = {[lq](double x, double, double v) { return lq.C * x + lq.D * v; },
              [lq](double, double, double) { return lq.C; },
              [](double, double, double) { return 0.0; },
              [lq](double, double, double) { return lq.D; }};
  pb.beta = {[](double, double, double) { return 0.0; },
             [](double, double, double) { return 0.0; },
             [](double, double, double) { return 0.0; },
             [](double, double, double) { return 0.0; }};
  const ScalarMap identity{[](double x) { return x; }, [](double) { return 1.0; }};
  const ScalarMap square{[](double x) { return x * x; }, [](double x) { return 2.0 * x; }};
  pb.phi = {identity, identity, identity, square, identity};
  pb.Phi = {[](double x, double y) { return 0.5 * (x * x + y); },
            [](double x, double) { return x; },
            [](double, double) { return 0.5; }};
  pb.l = {[](double, double x, double, double v) { return 0.5 * (x * x + v * v); },
          [](double, double x, double, double) { return x; },
          [](double, double, double, double) { return 0.0; },
          [](double, double, double, double v) { return v; }};
  pb.x0 = x0;
  pb.T = T;
  pb.N = N;
  pb.grid = std::move(grid);
  pb.u_lo = u_lo;
  pb.u_hi = u_hi;
  pb.y_independent_dynamics = true;
  pb.beta_zero = true;
  pb.a3_monotone = true;  // Phi_y = 1/2, l_y = 0
  pb.a3_prime = true;     // l is y-free and Phi splits additively
  return pb;
}

}  // namespace gsmp
