#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "gsmp/errors.hpp"
#include "gsmp/mf_gsde.hpp"
#include "gsmp/scenario_tree.hpp"
#include "gsmp/sublinear_calculus.hpp"

namespace gsmp {

// ============================================================================
// Adjoint backward equations under fixed representing measures, the duality
// pairing, and the first-order optimality machinery built on them.
//
// Under one policy the filtration is binary, so every martingale is
// representable and the orthogonal component of the costate vanishes
// identically; the backward step stores (p, q) only. The step evaluates the
// driver at the conditional mean of the children,
//     q(n)    = (p(up) - p(down)) / (2*vol*sqrt(dt)),
//     pbar(n) = (p(up) + p(down)) / 2,
//     p(n)    = pbar + (b_x*pbar + l_x)*dt + sigma_x*q*vol^2*dt,
// which makes the discrete product rule telescope without cross terms: the
// duality identities below hold to rounding, not to O(dt).
// ============================================================================

enum class AdjointKind { cost, terminal };

struct AdjointTriple {
  AdjointKind kind = AdjointKind::terminal;
  int horizon = 0;
  Policy policy;
  NodeField terminal;                   // terminal condition at `horizon`
  std::vector<std::vector<double>> p;   // levels 0..horizon, zero off support
  std::vector<std::vector<double>> q;   // levels 0..horizon-1, zero off support
};

namespace detail {

inline std::vector<std::vector<std::size_t>> support_nodes(const ScenarioTree& tree,
                                                           const Policy& p, int up_to) {
  std::vector<std::vector<std::size_t>> sup(static_cast<std::size_t>(up_to) + 1);
  sup[0] = {0};
  for (int lev = 0; lev < up_to; ++lev) {
    sup[lev + 1].reserve(sup[lev].size() * 2);
    for (std::size_t n : sup[lev]) {
      const int s = p.at(lev, n);
      sup[lev + 1].push_back(tree.child(n, s, +1));
      sup[lev + 1].push_back(tree.child(n, s, -1));
    }
  }
  return sup;
}

inline void require_duality_capabilities(const ProblemSpec& pb, const char* who) {
  if (!pb.beta_zero) throw CapabilityError(std::string(who) + ": requires beta_zero");
  if (!pb.y_independent_dynamics)
    throw CapabilityError(std::string(who) + ": requires y_independent_dynamics");
}

inline AdjointTriple solve_adjoint(const ProblemSpec& pb, const ScenarioTree& tree,
                                   const MeanFieldTrajectory& tr, const ControlProcess& u_hat,
                                   const Policy& policy, NodeField terminal, AdjointKind kind) {
  require_duality_capabilities(pb, "solve_adjoint");
  validate_control(tree, u_hat);
  validate_policy(tree, policy, terminal.level);
  const int m_lvl = terminal.level;
  const double dt = tree.dt();
  const double sdt = tree.sqrt_dt();

  AdjointTriple adj;
  adj.kind = kind;
  adj.horizon = m_lvl;
  adj.policy = policy;
  adj.terminal = terminal;
  adj.p.resize(static_cast<std::size_t>(m_lvl) + 1);
  adj.q.resize(static_cast<std::size_t>(m_lvl));
  for (int k = 0; k <= m_lvl; ++k) adj.p[k].assign(tree.level_size(k), 0.0);
  for (int k = 0; k < m_lvl; ++k) adj.q[k].assign(tree.level_size(k), 0.0);

  const auto sup = support_nodes(tree, policy, m_lvl);
  for (std::size_t n : sup[m_lvl]) adj.p[m_lvl][n] = terminal.values[n];

  for (int k = m_lvl - 1; k >= 0; --k) {
    const double rho1 = tr.rho[0][k], rho2 = tr.rho[1][k], rho5 = tr.rho[4][k];
    for (std::size_t n : sup[k]) {
      const int s = policy.at(k, n);
      const double vol = tree.grid()[s];
      const double p_up = adj.p[k + 1][tree.child(n, s, +1)];
      const double p_down = adj.p[k + 1][tree.child(n, s, -1)];
      const double q = (p_up - p_down) / (2.0 * vol * sdt);
      const double pbar = 0.5 * (p_up + p_down);
      const double x = tr.X[k].values[n];
      const double uv = u_hat.at(k, n);
      const double bx = pb.b.fx(x, rho2, uv);
      const double sx = pb.sigma.fx(x, rho1, uv);
      const double lx = kind == AdjointKind::cost ? pb.l.fx(k * dt, x, rho5, uv) : 0.0;
      const double pn = pbar + (bx * pbar + lx) * dt + sx * q * vol * vol * dt;
      if (!std::isfinite(pn))
        throw std::runtime_error("solve_adjoint: costate blew up at level " + std::to_string(k));
      adj.q[k][n] = q;
      adj.p[k][n] = pn;
    }
  }
  return adj;
}

/// Per-node coefficient pairing the control perturbation with the costate:
/// h(k,n) = (pbar*b_v [+ l_v])*dt + q*sigma_v*vol^2*dt on the support,
/// zero elsewhere.
inline std::vector<std::vector<double>> hamiltonian_v_coefficients(
    const ProblemSpec& pb, const ScenarioTree& tree, const MeanFieldTrajectory& tr,
    const ControlProcess& u_hat, const AdjointTriple& adj) {
  const double dt = tree.dt();
  std::vector<std::vector<double>> h(static_cast<std::size_t>(adj.horizon));
  const auto sup = support_nodes(tree, adj.policy, adj.horizon);
  for (int k = 0; k < adj.horizon; ++k) {
    h[k].assign(tree.level_size(k), 0.0);
    const double rho1 = tr.rho[0][k], rho2 = tr.rho[1][k], rho5 = tr.rho[4][k];
    for (std::size_t n : sup[k]) {
      const int s = adj.policy.at(k, n);
      const double vol = tree.grid()[s];
      const double p_up = adj.p[k + 1][tree.child(n, s, +1)];
      const double p_down = adj.p[k + 1][tree.child(n, s, -1)];
      const double pbar = 0.5 * (p_up + p_down);
      const double x = tr.X[k].values[n];
      const double uv = u_hat.at(k, n);
      const double bv = pb.b.fv(x, rho2, uv);
      const double sv = pb.sigma.fv(x, rho1, uv);
      const double lv =
          adj.kind == AdjointKind::cost ? pb.l.fv(k * dt, x, rho5, uv) : 0.0;
      h[k][n] = (pbar * bv + lv) * dt + adj.q[k][n] * sv * vol * vol * dt;
    }
  }
  return h;
}

inline double expectation_on_support(const std::vector<std::vector<std::size_t>>& sup, int level,
                                     const std::vector<double>& values) {
  double acc = 0.0;
  const double w = std::ldexp(1.0, -level);  // 2^-level
  for (std::size_t n : sup[level]) acc += values[n];
  return acc * w;
}

}  // namespace detail

/// Costate of the total cost under P: terminal gradient of the terminal cost,
/// running driver from the running-cost gradient.
inline AdjointTriple solve_adjoint_p(const ProblemSpec& pb, const ScenarioTree& tree,
                                     const MeanFieldTrajectory& tr, const ControlProcess& u_hat,
                                     const Policy& policy) {
  const int N = tree.depth();
  NodeField terminal{N, std::vector<double>(tree.level_size(N))};
  const double rho4 = tr.rho[3][N];
  for (std::size_t n = 0; n < terminal.values.size(); ++n)
    terminal.values[n] = pb.Phi.fx(tr.X[N].values[n], rho4);
  return detail::solve_adjoint(pb, tree, tr, u_hat, policy, std::move(terminal),
                               AdjointKind::cost);
}

/// Driverless costate with a supplied terminal field; `terminal.level` may be
/// below the tree depth (the short-horizon equations).
inline AdjointTriple solve_adjoint_terminal(const ProblemSpec& pb, const ScenarioTree& tree,
                                            const MeanFieldTrajectory& tr,
                                            const ControlProcess& u_hat, const Policy& policy,
                                            NodeField terminal) {
  return detail::solve_adjoint(pb, tree, tr, u_hat, policy, std::move(terminal),
                               AdjointKind::terminal);
}

/// |LHS - RHS| of the summation-by-parts identity for one solved adjoint:
/// cost kind:     E_P[Phi_x z_N + sum (l_x z + l_v v) dt]
///              = E_P[sum v ((pbar b_v + l_v) dt + q sigma_v vol^2 dt)],
/// terminal kind: E_P[terminal * z_m] = E_P[sum_{k<m} v (pbar b_v dt + ...)].
inline double duality_residual(const ProblemSpec& pb, const ScenarioTree& tree,
                               const MeanFieldTrajectory& tr, const ControlProcess& u_hat,
                               const AdjointTriple& adj, const ControlProcess& v) {
  detail::require_duality_capabilities(pb, "duality_residual");
  const AdaptedField z = variational_process(pb, tree, tr, u_hat, v);
  const double dt = tree.dt();
  const auto sup = detail::support_nodes(tree, adj.policy, adj.horizon);

  double lhs = 0.0;
  {
    std::vector<double> terminal_term(tree.level_size(adj.horizon), 0.0);
    for (std::size_t n : sup[adj.horizon])
      terminal_term[n] = adj.terminal.values[n] * z[adj.horizon].values[n];
    lhs = detail::expectation_on_support(sup, adj.horizon, terminal_term);
    if (adj.kind == AdjointKind::cost) {
      for (int k = 0; k < adj.horizon; ++k) {
        const double rho5 = tr.rho[4][k];
        double level_acc = 0.0;
        for (std::size_t n : sup[k]) {
          const double x = tr.X[k].values[n];
          const double uv = u_hat.at(k, n);
          level_acc += pb.l.fx(k * dt, x, rho5, uv) * z[k].values[n] +
                       pb.l.fv(k * dt, x, rho5, uv) * v.at(k, n);
        }
        lhs += level_acc * std::ldexp(1.0, -k) * dt;
      }
    }
  }

  double rhs = 0.0;
  const auto h = detail::hamiltonian_v_coefficients(pb, tree, tr, u_hat, adj);
  for (int k = 0; k < adj.horizon; ++k) {
    double level_acc = 0.0;
    for (std::size_t n : sup[k]) level_acc += v.at(k, n) * h[k][n];
    rhs += level_acc * std::ldexp(1.0, -k);
  }
  return std::abs(lhs - rhs);
}

namespace detail {

// E_P[l_y(t_k)] for every running level.
inline std::vector<double> running_y_weights(const ProblemSpec& pb, const ScenarioTree& tree,
                                             const MeanFieldTrajectory& tr,
                                             const ControlProcess& u_hat, const Policy& P) {
  const int N = tree.depth();
  const double dt = tree.dt();
  const auto sup = support_nodes(tree, P, N);
  std::vector<double> w(static_cast<std::size_t>(N), 0.0);
  for (int k = 0; k < N; ++k) {
    const double rho5 = tr.rho[4][k];
    std::vector<double> vals(tree.level_size(k), 0.0);
    for (std::size_t n : sup[k])
      vals[n] = pb.l.fy(k * dt, tr.X[k].values[n], rho5, u_hat.at(k, n));
    w[k] = expectation_on_support(sup, k, vals);
  }
  return w;
}

inline double terminal_y_weight(const ProblemSpec& pb, const ScenarioTree& tree,
                                const MeanFieldTrajectory& tr, const Policy& P) {
  const int N = tree.depth();
  const auto sup = support_nodes(tree, P, N);
  std::vector<double> vals(tree.level_size(N), 0.0);
  const double rho4 = tr.rho[3][N];
  for (std::size_t n : sup[N]) vals[n] = pb.Phi.fy(tr.X[N].values[n], rho4);
  return expectation_on_support(sup, N, vals);
}

inline void require_theta_capabilities(const ProblemSpec& pb, const char* who) {
  require_duality_capabilities(pb, who);
  if (!pb.a3_monotone)
    throw CapabilityError(std::string(who) + ": requires a3_monotone");
}

}  // namespace detail

/// The duality pairing of a measure triple with a perturbation direction,
/// evaluated directly through the variational process:
///   Theta = E_P[Phi_x z_N + sum (l_x z + l_v v) dt]
///         + E_P[Phi_y] E_Q[phi4'(X_N) z_N]
///         + sum_k E_P[l_y(t_k)] E_{R_k}[phi5'(X_k) z_k] dt.
inline double theta(const ProblemSpec& pb, const ScenarioTree& tree, const ControlProcess& u_hat,
                    const Policy& P, const Policy& Q, const std::vector<Policy>& R,
                    const ControlProcess& v) {
  detail::require_theta_capabilities(pb, "theta");
  const int N = tree.depth();
  if (static_cast<int>(R.size()) != N)
    throw std::invalid_argument("theta: needs one running measure per step");
  const double dt = tree.dt();
  const MeanFieldTrajectory tr = simulate(pb, tree, u_hat);
  const AdaptedField z = variational_process(pb, tree, tr, u_hat, v);

  const auto supP = detail::support_nodes(tree, P, N);
  double value = 0.0;
  {
    std::vector<double> vals(tree.level_size(N), 0.0);
    const double rho4 = tr.rho[3][N];
    for (std::size_t n : supP[N])
      vals[n] = pb.Phi.fx(tr.X[N].values[n], rho4) * z[N].values[n];
    value += detail::expectation_on_support(supP, N, vals);
    for (int k = 0; k < N; ++k) {
      const double rho5 = tr.rho[4][k];
      double acc = 0.0;
      for (std::size_t n : supP[k]) {
        const double x = tr.X[k].values[n];
        const double uv = u_hat.at(k, n);
        acc += pb.l.fx(k * dt, x, rho5, uv) * z[k].values[n] +
               pb.l.fv(k * dt, x, rho5, uv) * v.at(k, n);
      }
      value += acc * std::ldexp(1.0, -k) * dt;
    }
  }

  const double phi_y = detail::terminal_y_weight(pb, tree, tr, P);
  {
    NodeField dphi4_z{N, std::vector<double>(tree.level_size(N))};
    for (std::size_t n = 0; n < tree.level_size(N); ++n)
      dphi4_z.values[n] = pb.phi[3].d(tr.X[N].values[n]) * z[N].values[n];
    value += phi_y * expectation_under_policy(tree, Q, dphi4_z);
  }

  const std::vector<double> ly = detail::running_y_weights(pb, tree, tr, u_hat, P);
  for (int k = 0; k < N; ++k) {
    if (ly[k] == 0.0) continue;
    NodeField dphi5_z{k, std::vector<double>(tree.level_size(k))};
    for (std::size_t n = 0; n < tree.level_size(k); ++n)
      dphi5_z.values[n] = pb.phi[4].d(tr.X[k].values[n]) * z[k].values[n];
    value += ly[k] * expectation_under_policy(tree, R[k], dphi5_z) * dt;
  }
  return value;
}

/// The same pairing through the adjoint representation: all z terms replaced
/// by costate-weighted v integrals. Agrees with theta() to rounding.
inline double theta_via_adjoints(const ProblemSpec& pb, const ScenarioTree& tree,
                                 const ControlProcess& u_hat, const Policy& P, const Policy& Q,
                                 const std::vector<Policy>& R, const ControlProcess& v) {
  detail::require_theta_capabilities(pb, "theta_via_adjoints");
  const int N = tree.depth();
  if (static_cast<int>(R.size()) != N)
    throw std::invalid_argument("theta_via_adjoints: needs one running measure per step");
  const double dt = tree.dt();
  const MeanFieldTrajectory tr = simulate(pb, tree, u_hat);

  const auto pair_with = [&](const AdjointTriple& adj) {
    const auto sup = detail::support_nodes(tree, adj.policy, adj.horizon);
    const auto h = detail::hamiltonian_v_coefficients(pb, tree, tr, u_hat, adj);
    double acc = 0.0;
    for (int k = 0; k < adj.horizon; ++k) {
      double level_acc = 0.0;
      for (std::size_t n : sup[k]) level_acc += v.at(k, n) * h[k][n];
      acc += level_acc * std::ldexp(1.0, -k);
    }
    return acc;
  };

  double value = pair_with(solve_adjoint_p(pb, tree, tr, u_hat, P));

  const double phi_y = detail::terminal_y_weight(pb, tree, tr, P);
  {
    NodeField terminal{N, std::vector<double>(tree.level_size(N))};
    for (std::size_t n = 0; n < tree.level_size(N); ++n)
      terminal.values[n] = pb.phi[3].d(tr.X[N].values[n]);
    value += phi_y * pair_with(solve_adjoint_terminal(pb, tree, tr, u_hat, Q, terminal));
  }

  const std::vector<double> ly = detail::running_y_weights(pb, tree, tr, u_hat, P);
  for (int k = 0; k < N; ++k) {
    if (ly[k] == 0.0) continue;
    NodeField terminal{k, std::vector<double>(tree.level_size(k))};
    for (std::size_t n = 0; n < tree.level_size(k); ++n)
      terminal.values[n] = pb.phi[4].d(tr.X[k].values[n]);
    value += ly[k] * pair_with(solve_adjoint_terminal(pb, tree, tr, u_hat, R[k], terminal)) * dt;
  }
  return value;
}

/// sup over admissible measure triples of Theta[...](u - u_hat), evaluated
/// through the nested restricted sups (no enumeration). At an optimal u_hat
/// this is >= 0 for every admissible u; it coincides with the directional
/// derivative of the cost.
inline double necessary_condition_residual(const ProblemSpec& pb, const ScenarioTree& tree,
                                           const ControlProcess& u_hat, const ControlProcess& u) {
  detail::require_theta_capabilities(pb, "necessary_condition_residual");
  const MeanFieldTrajectory tr = simulate(pb, tree, u_hat);
  const ControlProcess v = control_difference(tree, u, u_hat);
  return directional_derivative(pb, tree, tr, u_hat, v);
}

struct MinimaxCertificate {
  enum class Status { exact, approximate, inconclusive };
  Status status = Status::inconclusive;
  Policy P_star, Q_star;
  double residual = 0.0;  // min over u of the (P*,Q*) pairing at u - u_hat
  double gap = 0.0;       // achieved saddle gap (0 for exact)
  int iterations = 0;
};

namespace detail {

// Coefficient field of v under the lexicographically selected measure triple,
// with the visitation mass; the first-order model behind descent probes.
struct SelectedModel {
  std::vector<std::vector<double>> w;
  std::vector<std::vector<double>> mass;
};

inline SelectedModel selected_model_field(const ProblemSpec& pb, const ScenarioTree& tree,
                                          const MeanFieldTrajectory& tr,
                                          const ControlProcess& u_hat) {
  const int N = tree.depth();
  const double dt = tree.dt();
  SelectedModel g;
  g.w.resize(static_cast<std::size_t>(N));
  g.mass.resize(static_cast<std::size_t>(N));
  for (int k = 0; k < N; ++k) {
    g.w[k].assign(tree.level_size(k), 0.0);
    g.mass[k].assign(tree.level_size(k), 0.0);
  }
  const auto add_term = [&](const AdjointTriple& adj, double weight) {
    if (weight == 0.0) return;
    const auto h = hamiltonian_v_coefficients(pb, tree, tr, u_hat, adj);
    const auto sup = support_nodes(tree, adj.policy, adj.horizon);
    for (int k = 0; k < adj.horizon; ++k) {
      const double mass = std::ldexp(1.0, -k);
      for (std::size_t n : sup[k]) {
        g.w[k][n] += weight * mass * h[k][n];
        g.mass[k][n] += std::abs(weight) * mass;
      }
    }
  };

  const NodeField psi = total_cost_field(pb, tree, tr, u_hat);
  const NodeField zero_n{N, std::vector<double>(tree.level_size(N), 0.0)};
  const Policy P = select_measure(tree, psi, zero_n);
  add_term(solve_adjoint_p(pb, tree, tr, u_hat, P), 1.0);

  NodeField phi4{N, std::vector<double>(tree.level_size(N))};
  NodeField dphi4{N, std::vector<double>(tree.level_size(N))};
  for (std::size_t n = 0; n < tree.level_size(N); ++n) {
    phi4.values[n] = pb.phi[3].f(tr.X[N].values[n]);
    dphi4.values[n] = pb.phi[3].d(tr.X[N].values[n]);
  }
  const Policy Q = select_measure(tree, phi4, zero_n);
  add_term(solve_adjoint_terminal(pb, tree, tr, u_hat, Q, dphi4),
           terminal_y_weight(pb, tree, tr, P));

  if (!pb.a3_prime) {
    const std::vector<double> ly = running_y_weights(pb, tree, tr, u_hat, P);
    for (int k = 1; k < N; ++k) {
      if (ly[k] == 0.0) continue;
      NodeField phi5{k, std::vector<double>(tree.level_size(k))};
      NodeField dphi5{k, std::vector<double>(tree.level_size(k))};
      for (std::size_t n = 0; n < tree.level_size(k); ++n) {
        phi5.values[n] = pb.phi[4].f(tr.X[k].values[n]);
        dphi5.values[n] = pb.phi[4].d(tr.X[k].values[n]);
      }
      const NodeField zero_k{k, std::vector<double>(tree.level_size(k), 0.0)};
      add_term(solve_adjoint_terminal(pb, tree, tr, u_hat, select_measure(tree, phi5, zero_k),
                                      dphi5),
               ly[k] * dt);
    }
  }
  return g;
}

// Box-corner minimum of sum_n (u(n) - u_hat(n)) * w(n), per node.
inline double corner_min(const ProblemSpec& pb, const ControlProcess& u_hat,
                         const std::vector<std::vector<double>>& w, ControlProcess* arg = nullptr) {
  double total = 0.0;
  for (std::size_t k = 0; k < w.size(); ++k) {
    for (std::size_t n = 0; n < w[k].size(); ++n) {
      const double uh = u_hat.at(static_cast<int>(k), n);
      const double lo = (pb.u_lo - uh) * w[k][n];
      const double hi = (pb.u_hi - uh) * w[k][n];
      total += std::min(lo, hi);
      if (arg) arg->values()[k][n] = lo <= hi ? pb.u_lo : pb.u_hi;
    }
  }
  return total;
}

}  // namespace detail

/// Saddle-point certificate for problems with y-free running cost and
/// additively split terminal cost. If the argmax sets of the realized total
/// cost and of phi4(X_N) are singletons the unique pair is returned with the
/// exact box minimum; otherwise a capped fictitious-play loop over mixtures
/// runs and reports the achieved saddle gap.
inline MinimaxCertificate minimax_certificate(const ProblemSpec& pb, const ScenarioTree& tree,
                                              const ControlProcess& u_hat, double tol = -1.0,
                                              int max_iterations = 10000) {
  detail::require_duality_capabilities(pb, "minimax_certificate");
  if (!pb.a3_prime) throw CapabilityError("minimax_certificate: requires a3_prime");
  const int N = tree.depth();
  const double dt = tree.dt();
  const MeanFieldTrajectory tr = simulate(pb, tree, u_hat);
  const NodeField psi = total_cost_field(pb, tree, tr, u_hat);
  NodeField phi4{N, std::vector<double>(tree.level_size(N))};
  NodeField dphi4{N, std::vector<double>(tree.level_size(N))};
  for (std::size_t n = 0; n < tree.level_size(N); ++n) {
    phi4.values[n] = pb.phi[3].f(tr.X[N].values[n]);
    dphi4.values[n] = pb.phi[3].d(tr.X[N].values[n]);
  }
  // Under the additive split the terminal y derivative is deterministic.
  const double phi_y = pb.Phi.fy(tr.X[N].values[0], tr.rho[3][N]);
  if (phi_y < 0.0)
    throw CapabilityError("minimax_certificate: terminal y-derivative must be non-negative");
  if (tol < 0.0) tol = 1e-6 * (1.0 + std::abs(g_expectation(tree, psi)));

  const ArgmaxPolicySet setP = maximizing_set(tree, psi);
  const ArgmaxPolicySet setQ = maximizing_set(tree, phi4);
  const auto reachable_singletons = [&](const ArgmaxPolicySet& set) {
    std::vector<std::size_t> frontier{0};
    std::vector<std::size_t> next;
    for (int lev = 0; lev < set.level; ++lev) {
      next.clear();
      for (std::size_t n : frontier) {
        const std::uint32_t mask = set.masks[lev][n];
        if (mask == 0 || (mask & (mask - 1)) != 0) return false;
        const int s = static_cast<int>(std::countr_zero(mask));
        next.push_back(tree.child(n, s, +1));
        next.push_back(tree.child(n, s, -1));
      }
      frontier.swap(next);
    }
    return true;
  };
  const auto extract_unique = [&](const ArgmaxPolicySet& set) {
    Policy p;
    p.choice.resize(static_cast<std::size_t>(tree.depth()));
    for (int lev = 0; lev < tree.depth(); ++lev) {
      p.choice[lev].assign(tree.level_size(lev), 0);
      if (lev < set.level)
        for (std::size_t n = 0; n < tree.level_size(lev); ++n)
          p.choice[lev][n] = static_cast<int>(std::countr_zero(set.masks[lev][n]));
    }
    return p;
  };

  // combined coefficient field of the (P, Q) pairing
  const auto coefficient_field = [&](const Policy& P, const Policy& Q) {
    const AdjointTriple adjP = solve_adjoint_p(pb, tree, tr, u_hat, P);
    const AdjointTriple adjQ = solve_adjoint_terminal(pb, tree, tr, u_hat, Q, dphi4);
    const auto hP = detail::hamiltonian_v_coefficients(pb, tree, tr, u_hat, adjP);
    const auto hQ = detail::hamiltonian_v_coefficients(pb, tree, tr, u_hat, adjQ);
    const auto supP = detail::support_nodes(tree, P, N);
    const auto supQ = detail::support_nodes(tree, Q, N);
    std::vector<std::vector<double>> w(static_cast<std::size_t>(N));
    for (int k = 0; k < N; ++k) {
      w[k].assign(tree.level_size(k), 0.0);
      const double mass = std::ldexp(1.0, -k);
      for (std::size_t n : supP[k]) w[k][n] += mass * hP[k][n];
      for (std::size_t n : supQ[k]) w[k][n] += phi_y * mass * hQ[k][n];
    }
    return w;
  };

  MinimaxCertificate cert;
  if (reachable_singletons(setP) && reachable_singletons(setQ)) {
    cert.P_star = extract_unique(setP);
    cert.Q_star = extract_unique(setQ);
    cert.residual =
        detail::corner_min(pb, u_hat, coefficient_field(cert.P_star, cert.Q_star));
    cert.status = MinimaxCertificate::Status::exact;
    cert.gap = 0.0;
    return cert;
  }

  // Fictitious play over mixtures; only the averaged coefficient field is kept.
  ControlProcess u_bar = promote_to_adapted(tree, u_hat);
  std::vector<std::vector<double>> w_avg;
  Policy P_t = select_measure(tree, psi, psi);
  Policy Q_t = select_measure(tree, phi4, phi4);
  for (int t = 1; t <= max_iterations; ++t) {
    // best response of (P, Q) to the current averaged control
    const ControlProcess v_bar = control_difference(tree, u_bar, u_hat);
    const AdaptedField z = variational_process(pb, tree, tr, u_hat, v_bar);
    std::vector<double> acc{0.0};
    for (int k = 0; k < N; ++k) {
      const double rho5 = tr.rho[4][k];
      std::vector<double> next(tree.level_size(k + 1));
      for (std::size_t n = 0; n < tree.level_size(k); ++n) {
        const double x = tr.X[k].values[n];
        const double uv = u_hat.at(k, n);
        const double run = acc[n] + (pb.l.fx(k * dt, x, rho5, uv) * z[k].values[n] +
                                     pb.l.fv(k * dt, x, rho5, uv) * v_bar.at(k, n)) *
                                        dt;
        const std::size_t base = n * static_cast<std::size_t>(tree.branch_factor());
        for (int j = 0; j < tree.branch_factor(); ++j) next[base + j] = run;
      }
      acc = std::move(next);
    }
    NodeField a_field{N, std::move(acc)};
    const double rho4 = tr.rho[3][N];
    for (std::size_t n = 0; n < tree.level_size(N); ++n)
      a_field.values[n] += pb.Phi.fx(tr.X[N].values[n], rho4) * z[N].values[n];
    NodeField b_field{N, std::vector<double>(tree.level_size(N))};
    for (std::size_t n = 0; n < tree.level_size(N); ++n)
      b_field.values[n] = dphi4.values[n] * z[N].values[n];

    P_t = select_measure(tree, psi, a_field);
    Q_t = select_measure(tree, phi4, b_field);
    const auto w_t = coefficient_field(P_t, Q_t);
    if (w_avg.empty())
      w_avg = w_t;
    else
      for (std::size_t k = 0; k < w_avg.size(); ++k)
        for (std::size_t n = 0; n < w_avg[k].size(); ++n)
          w_avg[k][n] += (w_t[k][n] - w_avg[k][n]) / t;

    // best response of u to the averaged field, then average the controls
    ControlProcess u_t = ControlProcess::constant_adapted(tree, 0.0);
    const double lower = detail::corner_min(pb, u_hat, w_avg, &u_t);
    for (int k = 0; k < N; ++k)
      for (std::size_t n = 0; n < tree.level_size(k); ++n)
        u_bar.values()[k][n] += (u_t.values()[k][n] - u_bar.values()[k][n]) / (t + 1);

    const double upper = restricted_sup(tree, psi, a_field) +
                         phi_y * restricted_sup(tree, phi4, b_field);
    cert.iterations = t;
    cert.gap = upper - lower;
    cert.residual = lower;
    if (std::abs(cert.gap) <= tol) {
      cert.status = MinimaxCertificate::Status::approximate;
      cert.P_star = P_t;
      cert.Q_star = Q_t;
      return cert;
    }
  }
  cert.status = MinimaxCertificate::Status::inconclusive;
  cert.P_star = P_t;
  cert.Q_star = Q_t;
  return cert;
}

struct SufficiencyEntry {
  double gap = 0.0;           // J(u) - J(u_hat)
  double necessary = 0.0;     // directional residual toward this u
  bool adapted = false;
};

struct SufficiencyReport {
  std::vector<SufficiencyEntry> entries;
  double tol = 0.0;
  bool pass = false;
  int witness_index = -1;  // first entry with gap < -tol, -1 if none
  ControlProcess witness;  // the offending control when witness_index >= 0
};

/// Samples admissible controls and reports J(u) - J(u_hat) for each, plus the
/// necessary-condition residual toward each sample. The samples alternate
/// deterministic and adapted and mix box-uniform draws, local perturbations
/// of u_hat, short convex probes toward box-uniform controls, and descent
/// probes along the selected-measure adjoint field (the adversarial
/// direction; at an optimal u_hat these cannot improve the cost either).
/// PASS means every gap is >= -tol. A report is always produced.
inline SufficiencyReport sufficient_condition_check(const ProblemSpec& pb,
                                                    const ScenarioTree& tree,
                                                    const ControlProcess& u_hat, int samples,
                                                    std::uint64_t rng_seed, double tol = -1.0) {
  if (!pb.a3_monotone)
    throw CapabilityError("sufficient_condition_check: requires a3_monotone");
  const double j_hat = cost(pb, tree, u_hat);
  SufficiencyReport report;
  report.tol = tol >= 0.0 ? tol : 1e-6 * (1.0 + std::abs(j_hat));
  report.pass = true;

  std::mt19937_64 rng(rng_seed);
  std::uniform_real_distribution<double> in_box(pb.u_lo, pb.u_hi);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const ControlProcess u_hat_adapted = promote_to_adapted(tree, u_hat);

  const MeanFieldTrajectory tr_hat = simulate(pb, tree, u_hat);
  const detail::SelectedModel model = detail::selected_model_field(pb, tree, tr_hat, u_hat);
  const double dt = tree.dt();

  const auto draw = [&](int index) {
    if (index % 5 == 4) {  // descent probe
      static constexpr double ladder[] = {1.0, 0.3, 0.1, 0.03, 0.01};
      const double lambda = ladder[(index / 5) % 5];
      ControlProcess u = u_hat_adapted;
      for (int k = 0; k < tree.depth(); ++k)
        for (std::size_t n = 0; n < tree.level_size(k); ++n) {
          const double mass = model.mass[k][n];
          if (mass == 0.0) continue;
          u.values()[k][n] = std::clamp(
              u.values()[k][n] - lambda * model.w[k][n] / (mass * dt), pb.u_lo, pb.u_hi);
        }
      return u;
    }
    const bool adapted = index % 2 == 1;
    const int variant = index % 3;  // 0 box-uniform, 1 local, 2 convex probe
    const double lambda = variant == 2 ? (index % 6 < 3 ? 0.05 : 0.25) : 1.0;
    const double spread = 0.05 * (pb.u_hi - pb.u_lo);
    const auto sample_value = [&](double uh) {
      double raw;
      switch (variant) {
        case 0: raw = in_box(rng); break;
        case 1: raw = uh + spread * (2.0 * unit(rng) - 1.0); break;
        default: raw = uh + lambda * (in_box(rng) - uh); break;
      }
      return std::clamp(raw, pb.u_lo, pb.u_hi);
    };
    if (!adapted) {
      std::vector<double> per_step(static_cast<std::size_t>(tree.depth()));
      for (int k = 0; k < tree.depth(); ++k) {
        double uh_level = 0.0;  // level-average of u_hat as the local anchor
        for (std::size_t n = 0; n < tree.level_size(k); ++n)
          uh_level += u_hat_adapted.values()[k][n];
        uh_level /= static_cast<double>(tree.level_size(k));
        per_step[k] = sample_value(uh_level);
      }
      return ControlProcess::deterministic(std::move(per_step));
    }
    ControlProcess u = u_hat_adapted;
    for (int k = 0; k < tree.depth(); ++k)
      for (std::size_t n = 0; n < tree.level_size(k); ++n)
        u.values()[k][n] = sample_value(u_hat_adapted.values()[k][n]);
    return u;
  };

  for (int s = 0; s < samples; ++s) {
    const ControlProcess u = draw(s);
    SufficiencyEntry entry;
    entry.adapted = u.is_adapted();
    entry.gap = cost(pb, tree, u) - j_hat;
    entry.necessary = necessary_condition_residual(pb, tree, u_hat, u);
    report.entries.push_back(entry);
    if (entry.gap < -report.tol && report.witness_index < 0) {
      report.witness_index = s;
      report.witness = u;
      report.pass = false;
    }
  }
  return report;
}

}  // namespace gsmp
