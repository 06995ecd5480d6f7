#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "gsmp/errors.hpp"
#include "gsmp/scenario_tree.hpp"

namespace gsmp {

// ============================================================================
// Calculus of the worst-case expectation: maximizing-measure sets, one-sided
// derivatives of lambda -> E[xi + lambda*eta], selections, and the extension
// to functionals of laws.
// ============================================================================

inline double default_tie_tolerance(double attained_value) {
  return 1e-9 * (1.0 + std::abs(attained_value));
}

/// Node-wise encoding of the measures attaining the worst-case expectation of
/// a field xi at `level`: at every non-terminal node above `level`, the set of
/// sigma indices whose branch value is within eps_tie of the node maximum.
/// A policy belongs to the encoded set iff its choice lies in the node set at
/// every node of its own support (off-support choices are irrelevant).
struct ArgmaxPolicySet {
  const ScenarioTree* tree = nullptr;
  int level = 0;       // level of the defining field
  double value = 0.0;  // attained maximum
  double eps_tie = 0.0;
  std::vector<std::vector<std::uint32_t>> masks;  // levels 0..level-1, bit s = sigma s allowed

  bool node_contains(int lev, std::size_t node, int sigma_index) const {
    return (masks[lev][node] >> sigma_index) & 1u;
  }

  /// Support-restricted membership of the measure induced by `p`.
  bool contains(const Policy& p) const {
    std::vector<std::size_t> frontier{0};
    std::vector<std::size_t> next;
    for (int lev = 0; lev < level; ++lev) {
      next.clear();
      for (std::size_t n : frontier) {
        const int c = p.at(lev, n);
        if (!node_contains(lev, n, c)) return false;
        next.push_back(tree->child(n, c, +1));
        next.push_back(tree->child(n, c, -1));
      }
      frontier.swap(next);
    }
    return true;
  }
};

namespace detail {

// One backward sweep recording, per node, the branch values over sigma.
// `masks` restricts the admissible sigma set (pass nullptr for unrestricted).
inline std::vector<std::vector<double>> dp_branch_values(
    const ScenarioTree& tree, const NodeField& xi,
    const std::vector<std::vector<std::uint32_t>>* masks, std::vector<double>* root_out) {
  validate_field(tree, xi);
  const int m = tree.grid().size();
  const std::size_t br = static_cast<std::size_t>(tree.branch_factor());
  std::vector<std::vector<double>> branch(static_cast<std::size_t>(std::max(xi.level, 0)));
  std::vector<double> v = xi.values;
  for (int lev = xi.level - 1; lev >= 0; --lev) {
    branch[lev].resize(tree.level_size(lev) * m);
    std::vector<double> next(tree.level_size(lev));
    for (std::size_t i = 0; i < next.size(); ++i) {
      const std::size_t base = i * br;
      double best = -std::numeric_limits<double>::infinity();
      for (int s = 0; s < m; ++s) {
        const double val = 0.5 * (v[base + 2 * s] + v[base + 2 * s + 1]);
        branch[lev][i * m + s] = val;
        const bool allowed = masks == nullptr || (((*masks)[lev][i] >> s) & 1u);
        if (allowed && val > best) best = val;
      }
      next[i] = best;
    }
    v = std::move(next);
  }
  if (root_out) *root_out = std::move(v);
  return branch;
}

}  // namespace detail

/// Measures attaining the worst case for xi, encoded node-wise with tie band
/// eps_tie (negative selects the default, relative to the attained value).
inline ArgmaxPolicySet maximizing_set(const ScenarioTree& tree, const NodeField& xi,
                                      double eps_tie = -1.0) {
  if (tree.grid().size() > 32)
    throw std::invalid_argument("maximizing_set: grids above 32 levels unsupported");
  ArgmaxPolicySet set;
  set.tree = &tree;
  set.level = xi.level;
  std::vector<double> root;
  const auto branch = detail::dp_branch_values(tree, xi, nullptr, &root);
  set.value = root[0];
  set.eps_tie = eps_tie >= 0.0 ? eps_tie : default_tie_tolerance(set.value);
  const int m = tree.grid().size();
  set.masks.resize(static_cast<std::size_t>(xi.level));
  for (int lev = 0; lev < xi.level; ++lev) {
    set.masks[lev].assign(tree.level_size(lev), 0u);
    for (std::size_t i = 0; i < tree.level_size(lev); ++i) {
      double best = -std::numeric_limits<double>::infinity();
      for (int s = 0; s < m; ++s) best = std::max(best, branch[lev][i * m + s]);
      std::uint32_t mask = 0;
      for (int s = 0; s < m; ++s)
        if (branch[lev][i * m + s] >= best - set.eps_tie) mask |= (1u << s);
      set.masks[lev][i] = mask;
    }
  }
  return set;
}

/// max over measures in `set` of the linear expectation of eta: the masked
/// backward recursion, single pass, deterministic reduction order.
inline double restricted_sup(const ScenarioTree& tree, const ArgmaxPolicySet& set,
                             const NodeField& eta) {
  if (eta.level != set.level)
    throw std::invalid_argument("restricted_sup: eta level differs from the argmax set's");
  std::vector<double> root;
  detail::dp_branch_values(tree, eta, &set.masks, &root);
  return root[0];
}

/// max over measures attaining E[xi] of E_P[eta]; the right derivative of
/// lambda -> E[xi + lambda*eta] at 0. A sublinear expectation in eta,
/// dominated by the unrestricted one.
inline double restricted_sup(const ScenarioTree& tree, const NodeField& xi, const NodeField& eta,
                             double eps_tie = -1.0) {
  if (xi.level != eta.level)
    throw std::invalid_argument("restricted_sup: xi and eta must live on one level");
  return restricted_sup(tree, maximizing_set(tree, xi, eps_tie), eta);
}

inline double right_derivative(const ScenarioTree& tree, const NodeField& xi,
                               const NodeField& eta, double eps_tie = -1.0) {
  return restricted_sup(tree, xi, eta, eps_tie);
}

inline double left_derivative(const ScenarioTree& tree, const NodeField& xi, const NodeField& eta,
                              double eps_tie = -1.0) {
  NodeField neg{eta.level, eta.values};
  for (double& v : neg.values) v = -v;
  return -restricted_sup(tree, xi, neg, eps_tie);
}

struct OneSidedDerivatives {
  double right = 0.0;
  double left = 0.0;
};

/// One-sided derivatives of lambda -> E[phi(xi + lambda*eta)] at 0:
/// right = sup over maximizers of phi(xi) of E[phi'(xi)*eta], left likewise
/// with -eta. phi must be C^1 with Lipschitz derivative on the range of xi.
inline OneSidedDerivatives chain_rule_derivative(const ScenarioTree& tree, const NodeField& xi,
                                                 const NodeField& eta,
                                                 const std::function<double(double)>& phi,
                                                 const std::function<double(double)>& dphi,
                                                 double eps_tie = -1.0) {
  if (xi.level != eta.level)
    throw std::invalid_argument("chain_rule_derivative: level mismatch");
  NodeField phi_xi{xi.level, std::vector<double>(xi.values.size())};
  NodeField dphi_eta{xi.level, std::vector<double>(xi.values.size())};
  for (std::size_t i = 0; i < xi.values.size(); ++i) {
    phi_xi.values[i] = phi(xi.values[i]);
    dphi_eta.values[i] = dphi(xi.values[i]) * eta.values[i];
  }
  const ArgmaxPolicySet set = maximizing_set(tree, phi_xi, eps_tie);
  OneSidedDerivatives d;
  d.right = restricted_sup(tree, set, dphi_eta);
  NodeField neg = dphi_eta;
  for (double& v : neg.values) v = -v;
  d.left = -restricted_sup(tree, set, neg);
  return d;
}

namespace detail {

// Every distinct measure in the encoded set, materialized as one policy each:
// recursively assign an allowed sigma at every node the assignment reaches.
inline std::vector<Policy> enumerate_set_measures(const ScenarioTree& tree,
                                                  const ArgmaxPolicySet& set,
                                                  std::size_t budget) {
  std::vector<Policy> out;
  Policy buf;
  buf.choice.resize(static_cast<std::size_t>(tree.depth()));
  for (int lev = 0; lev < tree.depth(); ++lev) buf.choice[lev].assign(tree.level_size(lev), 0);

  const int m = tree.grid().size();
  std::function<void(int, const std::vector<std::size_t>&)> by_level =
      [&](int lev, const std::vector<std::size_t>& frontier) {
        if (lev == set.level) {
          if (out.size() >= budget)
            throw BudgetError("gamma_distance: measure enumeration exceeds budget " +
                              std::to_string(budget));
          out.push_back(buf);
          return;
        }
        std::vector<std::size_t> next;
        std::function<void(std::size_t)> assign = [&](std::size_t pos) {
          if (pos == frontier.size()) {
            by_level(lev + 1, next);
            return;
          }
          const std::size_t n = frontier[pos];
          const std::size_t mark = next.size();
          for (int s = 0; s < m; ++s) {
            if (!set.node_contains(lev, n, s)) continue;
            buf.choice[lev][n] = s;
            next.push_back(tree.child(n, s, +1));
            next.push_back(tree.child(n, s, -1));
            assign(pos + 1);
            next.resize(mark);
          }
          buf.choice[lev][n] = 0;
        };
        assign(0);
      };
  by_level(0, {0});
  return out;
}

}  // namespace detail

/// One-sided Hausdorff distance, in total variation, from the maximizing set
/// of xi + eps*eta to the maximizing set of xi, over pure policies. Zero when
/// the node sets of the perturbed field are contained in those of xi along
/// every perturbed-reachable node; otherwise falls back to bounded
/// enumeration of both measure sets.
inline double gamma_distance(const ScenarioTree& tree, const NodeField& xi, const NodeField& eta,
                             double eps, double eps_tie = -1.0,
                             std::size_t enum_budget = std::size_t{1} << 16) {
  if (xi.level != eta.level) throw std::invalid_argument("gamma_distance: level mismatch");
  if (eps < 0) throw std::invalid_argument("gamma_distance: eps must be >= 0");
  NodeField shifted{xi.level, std::vector<double>(xi.values.size())};
  for (std::size_t i = 0; i < xi.values.size(); ++i)
    shifted.values[i] = xi.values[i] + eps * eta.values[i];
  const ArgmaxPolicySet a = maximizing_set(tree, shifted, eps_tie);
  const ArgmaxPolicySet b = maximizing_set(tree, xi, eps_tie);

  bool contained = true;
  std::vector<std::size_t> frontier{0};
  std::vector<std::size_t> next;
  for (int lev = 0; lev < a.level && contained; ++lev) {
    next.clear();
    for (std::size_t n : frontier) {
      if (a.masks[lev][n] & ~b.masks[lev][n]) {
        contained = false;
        break;
      }
      for (int s = 0; s < tree.grid().size(); ++s) {
        if (!a.node_contains(lev, n, s)) continue;
        next.push_back(tree.child(n, s, +1));
        next.push_back(tree.child(n, s, -1));
      }
    }
    if (next.size() > enum_budget)
      throw BudgetError("gamma_distance: reachable frontier exceeds budget");
    frontier.swap(next);
  }
  if (contained) return 0.0;

  const auto perturbed = detail::enumerate_set_measures(tree, a, enum_budget);
  const auto base = detail::enumerate_set_measures(tree, b, enum_budget);
  double gamma = 0.0;
  for (const Policy& p : perturbed) {
    double dist = std::numeric_limits<double>::infinity();
    for (const Policy& q : base) dist = std::min(dist, tv_distance(tree, p, q));
    gamma = std::max(gamma, dist);
  }
  return gamma;
}

/// Deterministic selection from the measures that maximize E[xi] and, among
/// those, E[eta]: at every node the smallest sigma index in the lexicographic
/// argmax set. Nodes at or below the field level get index 0.
inline Policy select_measure(const ScenarioTree& tree, const NodeField& xi, const NodeField& eta,
                             double eps_tie = -1.0) {
  if (xi.level != eta.level) throw std::invalid_argument("select_measure: level mismatch");
  const ArgmaxPolicySet set = maximizing_set(tree, xi, eps_tie);
  std::vector<double> root;
  const auto branch = detail::dp_branch_values(tree, eta, &set.masks, &root);
  const double eta_tie = eps_tie >= 0.0 ? eps_tie : default_tie_tolerance(root.empty() ? 0.0 : root[0]);
  const int m = tree.grid().size();
  Policy p;
  p.choice.resize(static_cast<std::size_t>(tree.depth()));
  for (int lev = 0; lev < tree.depth(); ++lev) p.choice[lev].assign(tree.level_size(lev), 0);
  for (int lev = 0; lev < xi.level; ++lev) {
    for (std::size_t i = 0; i < tree.level_size(lev); ++i) {
      double best = -std::numeric_limits<double>::infinity();
      for (int s = 0; s < m; ++s)
        if (set.node_contains(lev, i, s)) best = std::max(best, branch[lev][i * m + s]);
      for (int s = 0; s < m; ++s) {
        if (set.node_contains(lev, i, s) && branch[lev][i * m + s] >= best - eta_tie) {
          p.choice[lev][i] = s;
          break;
        }
      }
    }
  }
  return p;
}

/// One selection per level of a pair of adapted fields.
inline std::vector<Policy> select_measure_path(const ScenarioTree& tree, const AdaptedField& xi,
                                               const AdaptedField& eta, double eps_tie = -1.0) {
  if (xi.size() != eta.size())
    throw std::invalid_argument("select_measure_path: field count mismatch");
  std::vector<Policy> out;
  out.reserve(xi.size());
  for (std::size_t k = 0; k < xi.size(); ++k)
    out.push_back(select_measure(tree, xi[k], eta[k], eps_tie));
  return out;
}

// ============================================================================
// Laws on the real line and functionals of laws
// ============================================================================

/// Finitely supported probability law on R.
struct DiscreteLaw {
  std::vector<double> atoms;
  std::vector<double> weights;
};

/// Law of a field under one policy's path measure; atoms sorted, exact
/// duplicates merged.
inline DiscreteLaw law_under_policy(const ScenarioTree& tree, const Policy& p,
                                    const NodeField& xi) {
  detail::validate_field(tree, xi);
  detail::validate_policy(tree, p, xi.level);
  std::vector<std::pair<double, double>> atoms;
  atoms.reserve(std::size_t{1} << xi.level);
  const std::function<void(int, std::size_t, double)> walk = [&](int lev, std::size_t node,
                                                                 double mass) {
    if (lev == xi.level) {
      atoms.emplace_back(xi.values[node], mass);
      return;
    }
    const int s = p.at(lev, node);
    walk(lev + 1, tree.child(node, s, +1), mass / 2);
    walk(lev + 1, tree.child(node, s, -1), mass / 2);
  };
  walk(0, 0, 1.0);
  std::sort(atoms.begin(), atoms.end());
  DiscreteLaw law;
  for (const auto& [x, w] : atoms) {
    if (!law.atoms.empty() && law.atoms.back() == x)
      law.weights.back() += w;
    else {
      law.atoms.push_back(x);
      law.weights.push_back(w);
    }
  }
  return law;
}

/// 2-Wasserstein distance between two laws on R via the quantile coupling.
inline double wasserstein_2(const DiscreteLaw& a, const DiscreteLaw& b) {
  const auto check = [](const DiscreteLaw& law) {
    if (law.atoms.size() != law.weights.size() || law.atoms.empty())
      throw std::invalid_argument("wasserstein_2: malformed law");
    double total = 0.0;
    for (double w : law.weights) {
      if (!(w >= 0.0)) throw std::invalid_argument("wasserstein_2: negative weight");
      total += w;
    }
    if (std::abs(total - 1.0) > 1e-12)
      throw std::invalid_argument("wasserstein_2: weights must sum to 1");
  };
  check(a);
  check(b);
  const auto sorted = [](const DiscreteLaw& law) {
    std::vector<std::pair<double, double>> s(law.atoms.size());
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = {law.atoms[i], law.weights[i]};
    std::sort(s.begin(), s.end());
    return s;
  };
  const auto sa = sorted(a);
  const auto sb = sorted(b);
  std::size_t i = 0, j = 0;
  double ra = sa[0].second, rb = sb[0].second, cost = 0.0;
  while (i < sa.size() && j < sb.size()) {
    const double step = std::min(ra, rb);
    const double d = sa[i].first - sb[j].first;
    cost += step * d * d;
    ra -= step;
    rb -= step;
    if (ra <= 0.0 && i + 1 < sa.size()) ra = sa[++i].second;
    else if (ra <= 0.0) ++i;
    if (rb <= 0.0 && j + 1 < sb.size()) rb = sb[++j].second;
    else if (rb <= 0.0) ++j;
  }
  return std::sqrt(std::max(cost, 0.0));
}

/// A functional of laws with its derivative in the measure argument,
/// df(mu, y) = d/dy of the linear-functional derivative of f at mu.
struct LionsFunctional {
  std::function<double(const DiscreteLaw&)> f;
  std::function<double(const DiscreteLaw&, double)> df;
  double lipschitz_hint = 0.0;  // caller-asserted, recorded only
};

/// sup over pure policies of f(law of xi under P). Enumeration scale only.
inline double lions_sup(const ScenarioTree& tree, const NodeField& xi, const LionsFunctional& F,
                        std::size_t budget = kDefaultPolicyBudget) {
  double best = -std::numeric_limits<double>::infinity();
  for_each_policy(
      tree, xi.level,
      [&](const Policy& p) {
        const double val = F.f(law_under_policy(tree, p, xi));
        if (!std::isfinite(val)) throw std::invalid_argument("lions_sup: functional not finite");
        if (val > best) best = val;
      },
      budget);
  return best;
}

/// Right derivative of eps -> sup_P f(law(xi + eps*eta)) at 0: the maximum of
/// E_P[df(P_xi, xi) * eta] over policies attaining lions_sup (within eps_tie).
inline double lions_right_derivative(const ScenarioTree& tree, const NodeField& xi,
                                     const NodeField& eta, const LionsFunctional& F,
                                     double eps_tie = -1.0,
                                     std::size_t budget = kDefaultPolicyBudget) {
  if (xi.level != eta.level)
    throw std::invalid_argument("lions_right_derivative: level mismatch");
  const double best = lions_sup(tree, xi, F, budget);
  const double tie = eps_tie >= 0.0 ? eps_tie : default_tie_tolerance(best);
  double deriv = -std::numeric_limits<double>::infinity();
  for_each_policy(
      tree, xi.level,
      [&](const Policy& p) {
        const DiscreteLaw law = law_under_policy(tree, p, xi);
        if (F.f(law) < best - tie) return;
        // pathwise pairing of the derivative with eta under this measure
        double pairing = 0.0;
        const std::function<void(int, std::size_t, double)> walk = [&](int lev, std::size_t node,
                                                                       double mass) {
          if (lev == xi.level) {
            pairing += mass * F.df(law, xi.values[node]) * eta.values[node];
            return;
          }
          const int s = p.at(lev, node);
          walk(lev + 1, tree.child(node, s, +1), mass / 2);
          walk(lev + 1, tree.child(node, s, -1), mass / 2);
        };
        walk(0, 0, 1.0);
        if (pairing > deriv) deriv = pairing;
      },
      budget);
  return deriv;
}

}  // namespace gsmp
