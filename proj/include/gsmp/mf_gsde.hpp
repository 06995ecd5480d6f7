#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "gsmp/errors.hpp"
#include "gsmp/scenario_tree.hpp"
#include "gsmp/sublinear_calculus.hpp"

namespace gsmp {

// ============================================================================
// Controlled mean-field dynamics on the scenario tree
//
//   X(child) = X(n) + b(X, rho2, u)*dt + sigma(X, rho1, u)*(+-vol*sqrt(dt))
//                   + beta(X, rho3, u)*vol^2*dt,
//   rho_i(k) = worst-case expectation of phi_i(X) at level k,
//
// with cost J(u) = worst-case of Phi(X_N, rho4(N)) + sum_k l(t_k, X_k,
// rho5(k), u_k)*dt, accumulated along paths. The convention "sigma reads
// rho1, b reads rho2, beta reads rho3" is fixed here once and used
// everywhere.
// ============================================================================

/// Coefficient (x, y, v) -> R with its partial derivatives.
struct Coefficient {
  std::function<double(double, double, double)> f, fx, fy, fv;
};

/// Scalar map with derivative, for the mean-field arguments phi_i.
struct ScalarMap {
  std::function<double(double)> f, d;
};

/// Terminal cost (x, y) -> R with partials.
struct TerminalCost {
  std::function<double(double, double)> f, fx, fy;
};

/// Running cost (t, x, y, v) -> R with partials in (x, y, v).
struct RunningCost {
  std::function<double(double, double, double, double)> f, fx, fy, fv;
};

struct ProblemSpec {
  Coefficient b, sigma, beta;
  std::array<ScalarMap, 5> phi;  // phi[0] is the sigma argument, phi[1] the drift argument
  TerminalCost Phi;
  RunningCost l;

  double x0 = 0.0;
  double T = 1.0;
  int N = 1;
  VolatilityGrid grid;
  double u_lo = -1.0, u_hi = 1.0;  // control box

  // Structural capabilities, asserted by the problem author.
  bool y_independent_dynamics = false;  // b, sigma ignore their y argument
  bool beta_zero = false;               // no d<B> drift
  bool a3_monotone = false;             // Phi_y >= 0 and l_y >= 0 everywhere
  bool a3_prime = false;                // l is y-free and Phi(x,y) splits additively

  std::size_t node_budget = ScenarioTree::kDefaultNodeBudget;

  ScenarioTree build_tree() const { return ScenarioTree(N, T, grid, node_budget); }
};

/// Finite-difference surrogate for the smoothness assumptions: every declared
/// derivative callback must agree with a central difference of its primitive
/// within 1e-6 relative error at sampled points. Throws on mismatch.
inline void validate_problem(const ProblemSpec& pb, std::uint64_t seed = 0) {
  if (!(pb.u_lo <= pb.u_hi)) throw std::invalid_argument("ProblemSpec: empty control box");
  if (!(std::isfinite(pb.u_lo) && std::isfinite(pb.u_hi)))
    throw std::invalid_argument("ProblemSpec: control box must be bounded");
  if (pb.N < 1 || !(pb.T > 0)) throw std::invalid_argument("ProblemSpec: bad grid parameters");

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  const double h = 1e-5;
  const auto close = [](double analytic, double fd, double scale) {
    return std::abs(analytic - fd) <= 1e-6 * (1.0 + std::abs(scale));
  };
  for (int trial = 0; trial < 16; ++trial) {
    const double x = unit(rng), y = unit(rng);
    const double v = pb.u_lo + (unit(rng) * 0.5 + 0.5) * (pb.u_hi - pb.u_lo);
    const double t = (unit(rng) * 0.5 + 0.5) * pb.T;
    for (const Coefficient* c : {&pb.b, &pb.sigma, &pb.beta}) {
      if (!close(c->fx(x, y, v), (c->f(x + h, y, v) - c->f(x - h, y, v)) / (2 * h), c->fx(x, y, v)) ||
          !close(c->fy(x, y, v), (c->f(x, y + h, v) - c->f(x, y - h, v)) / (2 * h), c->fy(x, y, v)) ||
          !close(c->fv(x, y, v), (c->f(x, y, v + h) - c->f(x, y, v - h)) / (2 * h), c->fv(x, y, v)))
        throw std::invalid_argument("ProblemSpec: coefficient derivative inconsistent with primitive");
    }
    for (const ScalarMap& m : pb.phi) {
      if (!close(m.d(x), (m.f(x + h) - m.f(x - h)) / (2 * h), m.d(x)))
        throw std::invalid_argument("ProblemSpec: phi derivative inconsistent with primitive");
    }
    if (!close(pb.Phi.fx(x, y), (pb.Phi.f(x + h, y) - pb.Phi.f(x - h, y)) / (2 * h), pb.Phi.fx(x, y)) ||
        !close(pb.Phi.fy(x, y), (pb.Phi.f(x, y + h) - pb.Phi.f(x, y - h)) / (2 * h), pb.Phi.fy(x, y)))
      throw std::invalid_argument("ProblemSpec: terminal cost derivative inconsistent");
    if (!close(pb.l.fx(t, x, y, v), (pb.l.f(t, x + h, y, v) - pb.l.f(t, x - h, y, v)) / (2 * h), pb.l.fx(t, x, y, v)) ||
        !close(pb.l.fy(t, x, y, v), (pb.l.f(t, x, y + h, v) - pb.l.f(t, x, y - h, v)) / (2 * h), pb.l.fy(t, x, y, v)) ||
        !close(pb.l.fv(t, x, y, v), (pb.l.f(t, x, y, v + h) - pb.l.f(t, x, y, v - h)) / (2 * h), pb.l.fv(t, x, y, v)))
      throw std::invalid_argument("ProblemSpec: running cost derivative inconsistent");
  }
}

/// Control process: one value per time step (deterministic) or per node
/// (adapted). Stored per level either way; deterministic levels hold a single
/// entry.
class ControlProcess {
 public:
  static ControlProcess deterministic(std::vector<double> per_step) {
    ControlProcess u;
    u.adapted_ = false;
    u.values_.reserve(per_step.size());
    for (double v : per_step) u.values_.push_back({v});
    return u;
  }
  static ControlProcess constant(int steps, double value) {
    return deterministic(std::vector<double>(static_cast<std::size_t>(steps), value));
  }
  static ControlProcess adapted(std::vector<std::vector<double>> per_node) {
    ControlProcess u;
    u.adapted_ = true;
    u.values_ = std::move(per_node);
    return u;
  }
  static ControlProcess constant_adapted(const ScenarioTree& tree, double value) {
    std::vector<std::vector<double>> v(static_cast<std::size_t>(tree.depth()));
    for (int lev = 0; lev < tree.depth(); ++lev) v[lev].assign(tree.level_size(lev), value);
    return adapted(std::move(v));
  }

  bool is_adapted() const { return adapted_; }
  int steps() const { return static_cast<int>(values_.size()); }
  double at(int level, std::size_t node) const {
    return adapted_ ? values_[level][node] : values_[level][0];
  }
  std::vector<std::vector<double>>& values() { return values_; }
  const std::vector<std::vector<double>>& values() const { return values_; }

 private:
  bool adapted_ = false;
  std::vector<std::vector<double>> values_;
};

namespace detail {

inline void validate_control(const ScenarioTree& tree, const ControlProcess& u) {
  if (u.steps() != tree.depth())
    throw std::invalid_argument("ControlProcess: step count does not match tree depth");
  if (u.is_adapted()) {
    for (int lev = 0; lev < tree.depth(); ++lev)
      if (u.values()[lev].size() != tree.level_size(lev))
        throw std::invalid_argument("ControlProcess: adapted shape mismatch at level " +
                                    std::to_string(lev));
  }
}

inline std::string node_path(const ScenarioTree& tree, int level, std::size_t node) {
  std::string path;
  std::size_t n = node;
  for (int lev = level; lev > 0; --lev) {
    path = "(s" + std::to_string(tree.sigma_index_of(n)) +
           (tree.sign_of(n) > 0 ? ",+)" : ",-)") + path;
    n = tree.parent(n);
  }
  return path.empty() ? "(root)" : path;
}

}  // namespace detail

inline bool is_admissible(const ControlProcess& u, const ProblemSpec& pb) {
  for (const auto& level : u.values())
    for (double v : level)
      if (!(v >= pb.u_lo && v <= pb.u_hi)) return false;
  return true;
}

/// Promote to per-node storage on the given tree (no-op for adapted inputs).
inline ControlProcess promote_to_adapted(const ScenarioTree& tree, const ControlProcess& u) {
  detail::validate_control(tree, u);
  if (u.is_adapted()) return u;
  std::vector<std::vector<double>> v(static_cast<std::size_t>(tree.depth()));
  for (int lev = 0; lev < tree.depth(); ++lev)
    v[lev].assign(tree.level_size(lev), u.values()[lev][0]);
  return ControlProcess::adapted(std::move(v));
}

/// u - u_hat, promoting shapes as needed. The result is a direction, not an
/// admissible control.
inline ControlProcess control_difference(const ScenarioTree& tree, const ControlProcess& u,
                                         const ControlProcess& u_hat) {
  if (u.is_adapted() == u_hat.is_adapted()) {
    ControlProcess d = u;
    for (int lev = 0; lev < d.steps(); ++lev)
      for (std::size_t i = 0; i < d.values()[lev].size(); ++i)
        d.values()[lev][i] -= u_hat.values()[lev][i];
    return d;
  }
  return control_difference(tree, promote_to_adapted(tree, u), promote_to_adapted(tree, u_hat));
}

/// u_hat + theta * v.
inline ControlProcess control_axpy(const ScenarioTree& tree, const ControlProcess& u_hat,
                                   double theta, const ControlProcess& v) {
  if (u_hat.is_adapted() == v.is_adapted()) {
    ControlProcess out = u_hat;
    for (int lev = 0; lev < out.steps(); ++lev)
      for (std::size_t i = 0; i < out.values()[lev].size(); ++i)
        out.values()[lev][i] += theta * v.values()[lev][i];
    return out;
  }
  return control_axpy(tree, promote_to_adapted(tree, u_hat), theta,
                      promote_to_adapted(tree, v));
}

struct MeanFieldTrajectory {
  AdaptedField X;                          // levels 0..N
  std::array<std::vector<double>, 5> rho;  // rho[i][k] = worst-case E[phi_{i+1}(X_k)]
};

/// Explicit left-endpoint Euler step on the tree; the mean-field terms at
/// step k use level-k values only, so no fixed point is needed.
inline MeanFieldTrajectory simulate(const ProblemSpec& pb, const ScenarioTree& tree,
                                    const ControlProcess& u) {
  detail::validate_control(tree, u);
  const int N = tree.depth();
  const double dt = tree.dt();
  const double sdt = tree.sqrt_dt();
  const int m = tree.grid().size();

  MeanFieldTrajectory tr;
  tr.X.resize(static_cast<std::size_t>(N) + 1);
  for (int k = 0; k <= N; ++k) {
    tr.X[k].level = k;
    tr.X[k].values.resize(tree.level_size(k));
  }
  tr.X[0].values[0] = pb.x0;
  for (auto& r : tr.rho) r.assign(static_cast<std::size_t>(N) + 1, 0.0);

  NodeField scratch;
  for (int k = 0; k <= N; ++k) {
    scratch.level = k;
    scratch.values.resize(tree.level_size(k));
    for (int i = 0; i < 5; ++i) {
      for (std::size_t n = 0; n < scratch.values.size(); ++n)
        scratch.values[n] = pb.phi[i].f(tr.X[k].values[n]);
      tr.rho[i][k] = g_expectation(tree, scratch);
    }
    if (k == N) break;

    const double rho1 = tr.rho[0][k], rho2 = tr.rho[1][k], rho3 = tr.rho[2][k];
    for (std::size_t n = 0; n < tree.level_size(k); ++n) {
      const double x = tr.X[k].values[n];
      const double uv = u.at(k, n);
      const double drift = pb.b.f(x, rho2, uv);
      const double diffusion = pb.sigma.f(x, rho1, uv);
      const double qv_drift = pb.beta.f(x, rho3, uv);
      for (int s = 0; s < m; ++s) {
        const double vol = tree.grid()[s];
        const double base = x + drift * dt + qv_drift * vol * vol * dt;
        const double up = base + diffusion * vol * sdt;
        const double down = base - diffusion * vol * sdt;
        if (!std::isfinite(up) || !std::isfinite(down))
          throw std::runtime_error("simulate: state blew up below node " +
                                   detail::node_path(tree, k, n) + " at level " +
                                   std::to_string(k));
        tr.X[k + 1].values[tree.child(n, s, +1)] = up;
        tr.X[k + 1].values[tree.child(n, s, -1)] = down;
      }
    }
  }
  return tr;
}

/// Pathwise total cost Phi(X_N, rho4(N)) + sum_k l(t_k, X_k, rho5(k), u_k)*dt
/// as a terminal field; its worst-case expectation is the cost functional.
inline NodeField total_cost_field(const ProblemSpec& pb, const ScenarioTree& tree,
                                  const MeanFieldTrajectory& tr, const ControlProcess& u) {
  const int N = tree.depth();
  const double dt = tree.dt();
  std::vector<double> acc{0.0};
  for (int k = 0; k < N; ++k) {
    std::vector<double> next(tree.level_size(k + 1));
    const double rho5 = tr.rho[4][k];
    for (std::size_t n = 0; n < tree.level_size(k); ++n) {
      const double running =
          acc[n] + pb.l.f(k * dt, tr.X[k].values[n], rho5, u.at(k, n)) * dt;
      const std::size_t base = n * static_cast<std::size_t>(tree.branch_factor());
      for (int j = 0; j < tree.branch_factor(); ++j) next[base + j] = running;
    }
    acc = std::move(next);
  }
  NodeField psi{N, std::move(acc)};
  const double rho4 = tr.rho[3][N];
  for (std::size_t n = 0; n < psi.values.size(); ++n)
    psi.values[n] += pb.Phi.f(tr.X[N].values[n], rho4);
  return psi;
}

inline double cost(const ProblemSpec& pb, const ScenarioTree& tree, const ControlProcess& u) {
  const MeanFieldTrajectory tr = simulate(pb, tree, u);
  return g_expectation(tree, total_cost_field(pb, tree, tr, u));
}

/// First-order sensitivity of the state to the convex perturbation
/// u_hat + theta*v, theta -> 0+. Positively homogeneous in v (additivity
/// holds only when the argmax sets involved are singletons).
inline AdaptedField variational_process(const ProblemSpec& pb, const ScenarioTree& tree,
                                        const MeanFieldTrajectory& tr,
                                        const ControlProcess& u_hat, const ControlProcess& v) {
  if (!pb.beta_zero)
    throw CapabilityError("variational_process: requires beta_zero");
  detail::validate_control(tree, u_hat);
  detail::validate_control(tree, v);
  if (!is_admissible(u_hat, pb))
    throw std::invalid_argument("variational_process: u_hat not admissible");
  const int N = tree.depth();
  const double dt = tree.dt();
  const double sdt = tree.sqrt_dt();
  const int m = tree.grid().size();

  AdaptedField z(static_cast<std::size_t>(N) + 1);
  for (int k = 0; k <= N; ++k) {
    z[k].level = k;
    z[k].values.assign(tree.level_size(k), 0.0);
  }

  NodeField phi_field, dphi_z;
  for (int k = 0; k < N; ++k) {
    const double rho1 = tr.rho[0][k], rho2 = tr.rho[1][k];
    // right derivatives of the mean-field arguments along z
    double dy_sigma_term = 0.0, dy_drift_term = 0.0;
    if (!pb.y_independent_dynamics) {
      phi_field.level = dphi_z.level = k;
      phi_field.values.resize(tree.level_size(k));
      dphi_z.values.resize(tree.level_size(k));
      for (std::size_t n = 0; n < tree.level_size(k); ++n) {
        const double x = tr.X[k].values[n];
        phi_field.values[n] = pb.phi[0].f(x);
        dphi_z.values[n] = pb.phi[0].d(x) * z[k].values[n];
      }
      dy_sigma_term = restricted_sup(tree, phi_field, dphi_z);
      for (std::size_t n = 0; n < tree.level_size(k); ++n) {
        const double x = tr.X[k].values[n];
        phi_field.values[n] = pb.phi[1].f(x);
        dphi_z.values[n] = pb.phi[1].d(x) * z[k].values[n];
      }
      dy_drift_term = restricted_sup(tree, phi_field, dphi_z);
    }
    for (std::size_t n = 0; n < tree.level_size(k); ++n) {
      const double x = tr.X[k].values[n];
      const double uv = u_hat.at(k, n);
      const double vn = v.at(k, n);
      const double zn = z[k].values[n];
      const double drift = pb.b.fx(x, rho2, uv) * zn + pb.b.fy(x, rho2, uv) * dy_drift_term +
                           pb.b.fv(x, rho2, uv) * vn;
      const double diff = pb.sigma.fx(x, rho1, uv) * zn +
                          pb.sigma.fy(x, rho1, uv) * dy_sigma_term +
                          pb.sigma.fv(x, rho1, uv) * vn;
      for (int s = 0; s < m; ++s) {
        const double vol = tree.grid()[s];
        z[k + 1].values[tree.child(n, s, +1)] = zn + drift * dt + diff * vol * sdt;
        z[k + 1].values[tree.child(n, s, -1)] = zn + drift * dt - diff * vol * sdt;
      }
    }
  }
  return z;
}

inline AdaptedField variational_process(const ProblemSpec& pb, const ScenarioTree& tree,
                                        const ControlProcess& u_hat, const ControlProcess& v) {
  const MeanFieldTrajectory tr = simulate(pb, tree, u_hat);
  return variational_process(pb, tree, tr, u_hat, v);
}

/// Directional derivative of the cost at u_hat along v = u - u_hat:
/// the restricted sup, over maximizers of the realized total cost, of the
/// first-order cost expansion along the variational process.
inline double directional_derivative(const ProblemSpec& pb, const ScenarioTree& tree,
                                     const MeanFieldTrajectory& tr, const ControlProcess& u_hat,
                                     const ControlProcess& v) {
  if (!pb.beta_zero) throw CapabilityError("directional_derivative: requires beta_zero");
  const int N = tree.depth();
  const double dt = tree.dt();
  const AdaptedField z = variational_process(pb, tree, tr, u_hat, v);

  // inner one-sided derivatives of the mean-field cost arguments
  NodeField phi4{N, std::vector<double>(tree.level_size(N))};
  NodeField dphi4_z{N, std::vector<double>(tree.level_size(N))};
  for (std::size_t n = 0; n < tree.level_size(N); ++n) {
    const double x = tr.X[N].values[n];
    phi4.values[n] = pb.phi[3].f(x);
    dphi4_z.values[n] = pb.phi[3].d(x) * z[N].values[n];
  }
  const double c_terminal = restricted_sup(tree, phi4, dphi4_z);

  std::vector<double> c_running(static_cast<std::size_t>(N), 0.0);
  if (!pb.a3_prime) {  // a3_prime asserts l is y-free, the terms vanish
    NodeField phi5, dphi5_z;
    for (int k = 0; k < N; ++k) {
      phi5.level = dphi5_z.level = k;
      phi5.values.resize(tree.level_size(k));
      dphi5_z.values.resize(tree.level_size(k));
      for (std::size_t n = 0; n < tree.level_size(k); ++n) {
        const double x = tr.X[k].values[n];
        phi5.values[n] = pb.phi[4].f(x);
        dphi5_z.values[n] = pb.phi[4].d(x) * z[k].values[n];
      }
      c_running[k] = restricted_sup(tree, phi5, dphi5_z);
    }
  }

  // accumulate the expansion along paths into a terminal field
  std::vector<double> acc{0.0};
  for (int k = 0; k < N; ++k) {
    const double rho5 = tr.rho[4][k];
    std::vector<double> next(tree.level_size(k + 1));
    for (std::size_t n = 0; n < tree.level_size(k); ++n) {
      const double x = tr.X[k].values[n];
      const double uv = u_hat.at(k, n);
      const double t = k * dt;
      const double term = pb.l.fx(t, x, rho5, uv) * z[k].values[n] +
                          pb.l.fy(t, x, rho5, uv) * c_running[k] +
                          pb.l.fv(t, x, rho5, uv) * v.at(k, n);
      const double running = acc[n] + term * dt;
      const std::size_t base = n * static_cast<std::size_t>(tree.branch_factor());
      for (int j = 0; j < tree.branch_factor(); ++j) next[base + j] = running;
    }
    acc = std::move(next);
  }
  NodeField expansion{N, std::move(acc)};
  const double rho4 = tr.rho[3][N];
  for (std::size_t n = 0; n < tree.level_size(N); ++n) {
    const double x = tr.X[N].values[n];
    expansion.values[n] +=
        pb.Phi.fx(x, rho4) * z[N].values[n] + pb.Phi.fy(x, rho4) * c_terminal;
  }
  const NodeField psi = total_cost_field(pb, tree, tr, u_hat);
  return restricted_sup(tree, psi, expansion);
}

inline double directional_derivative(const ProblemSpec& pb, const ScenarioTree& tree,
                                     const ControlProcess& u_hat, const ControlProcess& v) {
  const MeanFieldTrajectory tr = simulate(pb, tree, u_hat);
  return directional_derivative(pb, tree, tr, u_hat, v);
}

/// Trajectory export: level,node_index,X,rho1..rho5 (rho columns repeat their
/// level's value on every row).
inline void export_trajectory_csv(const ScenarioTree& tree, const MeanFieldTrajectory& tr,
                                  std::ostream& os) {
  os << "level,node_index,X,rho1,rho2,rho3,rho4,rho5\n";
  char buf[64];
  const auto num = [&](double x) {
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    return std::string(buf);
  };
  for (int k = 0; k <= tree.depth(); ++k) {
    for (std::size_t n = 0; n < tree.level_size(k); ++n) {
      os << k << ',' << n << ',' << num(tr.X[k].values[n]);
      for (int i = 0; i < 5; ++i) os << ',' << num(tr.rho[i][k]);
      os << '\n';
    }
  }
}

}  // namespace gsmp
