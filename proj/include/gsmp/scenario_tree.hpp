#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <limits>
#include <ostream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "gsmp/errors.hpp"

namespace gsmp {

// ============================================================================
// Volatility grid and scenario tree
//
// The path space is a finite non-recombining tree. From every non-terminal
// node the process branches into 2*|grid| children, one per (volatility,
// sign) pair; an increment with volatility s and sign +-1 moves the driving
// noise by +-s*sqrt(dt) and its quadratic variation by s^2*dt. An adapted
// choice of volatility per node induces a path measure (each consistent sign
// sequence gets mass 2^-N); the worst-case expectation over all such
// measures is computed by backward dynamic programming.
// ============================================================================

/// Strictly increasing positive volatility levels spanning [sigma_lo, sigma_hi].
class VolatilityGrid {
 public:
  VolatilityGrid() = default;
  explicit VolatilityGrid(std::vector<double> values) : values_(std::move(values)) {
    if (values_.empty())
      throw std::invalid_argument("VolatilityGrid: needs at least one level");
    for (std::size_t i = 0; i < values_.size(); ++i) {
      if (!std::isfinite(values_[i]) || !(values_[i] > 0.0))
        throw std::invalid_argument("VolatilityGrid: levels must be positive and finite");
      if (i > 0 && !(values_[i] > values_[i - 1]))
        throw std::invalid_argument("VolatilityGrid: levels must be strictly increasing");
    }
  }

  int size() const { return static_cast<int>(values_.size()); }
  double operator[](int i) const { return values_[static_cast<std::size_t>(i)]; }
  double sigma_lo() const { return values_.front(); }
  double sigma_hi() const { return values_.back(); }
  const std::vector<double>& values() const { return values_; }

 private:
  std::vector<double> values_;
};

/// One real value per node of a single tree level: a random variable on the
/// discrete path space, measurable at time `level`.
struct NodeField {
  int level = 0;
  std::vector<double> values;
};

/// An adapted real-valued process: one NodeField per level.
using AdaptedField = std::vector<NodeField>;

class ScenarioTree {
 public:
  static constexpr std::size_t kDefaultNodeBudget = 5'000'000;

  ScenarioTree(int steps, double horizon, VolatilityGrid grid,
               std::size_t node_budget = kDefaultNodeBudget)
      : depth_(steps),
        horizon_(horizon),
        dt_(horizon / steps),
        sqrt_dt_(std::sqrt(horizon / steps)),
        grid_(std::move(grid)) {
    if (steps < 1) throw std::invalid_argument("ScenarioTree: steps must be >= 1");
    if (!std::isfinite(horizon) || !(horizon > 0.0))
      throw std::invalid_argument("ScenarioTree: horizon must be positive");
    const int br = branch_factor();
    if (std::pow(static_cast<long double>(br), steps) >
        static_cast<long double>(node_budget)) {
      throw BudgetError("ScenarioTree: leaf count (2*|grid|)^N exceeds node budget with N=" +
                        std::to_string(steps) + ", |grid|=" + std::to_string(grid_.size()) +
                        ", budget=" + std::to_string(node_budget));
    }
    b_.resize(static_cast<std::size_t>(steps) + 1);
    qv_.resize(static_cast<std::size_t>(steps) + 1);
    b_[0] = {0.0};
    qv_[0] = {0.0};
    for (int lev = 0; lev < steps; ++lev) {
      const std::size_t n = b_[lev].size();
      b_[lev + 1].resize(n * br);
      qv_[lev + 1].resize(n * br);
      for (std::size_t i = 0; i < n; ++i) {
        for (int s = 0; s < grid_.size(); ++s) {
          const double vol = grid_[s];
          const double step_qv = vol * vol * dt_;
          const std::size_t up = child(i, s, +1);
          const std::size_t down = child(i, s, -1);
          b_[lev + 1][up] = b_[lev][i] + vol * sqrt_dt_;
          b_[lev + 1][down] = b_[lev][i] - vol * sqrt_dt_;
          qv_[lev + 1][up] = qv_[lev][i] + step_qv;
          qv_[lev + 1][down] = qv_[lev][i] + step_qv;
        }
      }
    }
  }

  int depth() const { return depth_; }
  double horizon() const { return horizon_; }
  double dt() const { return dt_; }
  double sqrt_dt() const { return sqrt_dt_; }
  const VolatilityGrid& grid() const { return grid_; }
  int branch_factor() const { return 2 * grid_.size(); }

  std::size_t level_size(int level) const { return b_[static_cast<std::size_t>(level)].size(); }
  double brownian(int level, std::size_t node) const { return b_[level][node]; }
  double quadratic_variation(int level, std::size_t node) const { return qv_[level][node]; }

  /// Child of `node` (at some level < depth) along branch (sigma_index, sign).
  std::size_t child(std::size_t node, int sigma_index, int sign) const {
    return node * static_cast<std::size_t>(branch_factor()) +
           static_cast<std::size_t>(2 * sigma_index + (sign > 0 ? 0 : 1));
  }
  std::size_t parent(std::size_t node) const {
    return node / static_cast<std::size_t>(branch_factor());
  }
  /// Branch data of the edge leading into `node` (meaningless at the root).
  int sigma_index_of(std::size_t node) const {
    return static_cast<int>(node % static_cast<std::size_t>(branch_factor())) / 2;
  }
  int sign_of(std::size_t node) const {
    return (node % static_cast<std::size_t>(branch_factor())) % 2 == 0 ? +1 : -1;
  }

  /// Brownian value of the whole level as a NodeField.
  NodeField brownian_field(int level) const { return NodeField{level, b_[level]}; }

 private:
  int depth_;
  double horizon_;
  double dt_;
  double sqrt_dt_;
  VolatilityGrid grid_;
  std::vector<std::vector<double>> b_;
  std::vector<std::vector<double>> qv_;
};

inline ScenarioTree build_tree(int steps, double horizon, VolatilityGrid grid,
                               std::size_t node_budget = ScenarioTree::kDefaultNodeBudget) {
  return ScenarioTree(steps, horizon, std::move(grid), node_budget);
}

/// Adapted volatility selection: one sigma index per non-terminal node.
/// Two policies that differ only off their own support induce the same path
/// measure; set logic elsewhere works with induced measures, not raw maps.
struct Policy {
  std::vector<std::vector<int>> choice;  // levels 0..N-1

  int at(int level, std::size_t node) const { return choice[level][node]; }
  int levels() const { return static_cast<int>(choice.size()); }
};

inline Policy constant_policy(const ScenarioTree& tree, int sigma_index) {
  if (sigma_index < 0 || sigma_index >= tree.grid().size())
    throw std::invalid_argument("constant_policy: sigma index out of range");
  Policy p;
  p.choice.resize(static_cast<std::size_t>(tree.depth()));
  for (int lev = 0; lev < tree.depth(); ++lev)
    p.choice[lev].assign(tree.level_size(lev), sigma_index);
  return p;
}

namespace detail {

inline void validate_field(const ScenarioTree& tree, const NodeField& f) {
  if (f.level < 0 || f.level > tree.depth())
    throw std::invalid_argument("NodeField: level outside tree");
  if (f.values.size() != tree.level_size(f.level))
    throw std::invalid_argument("NodeField: value count does not match level " +
                                std::to_string(f.level));
  for (double v : f.values)
    if (!std::isfinite(v)) throw std::invalid_argument("NodeField: non-finite value");
}

inline void validate_policy(const ScenarioTree& tree, const Policy& p, int min_levels) {
  if (p.levels() < min_levels)
    throw std::invalid_argument("Policy: not defined on enough levels");
  for (int lev = 0; lev < min_levels; ++lev) {
    if (p.choice[lev].size() != tree.level_size(lev))
      throw std::invalid_argument("Policy: shape mismatch at level " + std::to_string(lev));
    for (int c : p.choice[lev])
      if (c < 0 || c >= tree.grid().size())
        throw std::invalid_argument("Policy: sigma index out of range");
  }
}

}  // namespace detail

/// Worst-case expectation of `xi` over all adapted volatility selections,
/// by backward recursion V(n) = max_s (V(child(s,+)) + V(child(s,-)))/2.
inline double g_expectation(const ScenarioTree& tree, const NodeField& xi) {
  detail::validate_field(tree, xi);
  std::vector<double> v = xi.values;
  const int m = tree.grid().size();
  const std::size_t br = static_cast<std::size_t>(tree.branch_factor());
  for (int lev = xi.level - 1; lev >= 0; --lev) {
    std::vector<double> next(tree.level_size(lev));
    for (std::size_t i = 0; i < next.size(); ++i) {
      const std::size_t base = i * br;
      double best = -std::numeric_limits<double>::infinity();
      for (int s = 0; s < m; ++s) {
        const double branch = 0.5 * (v[base + 2 * s] + v[base + 2 * s + 1]);
        if (branch > best) best = branch;
      }
      next[i] = best;
    }
    v = std::move(next);
  }
  return v[0];
}

/// Same recursion truncated at `level`: the conditional worst-case expectation.
inline NodeField conditional_g_expectation(const ScenarioTree& tree, const NodeField& xi,
                                           int level) {
  detail::validate_field(tree, xi);
  if (level < 0 || level > xi.level)
    throw std::invalid_argument("conditional_g_expectation: level must be in [0, xi.level]");
  std::vector<double> v = xi.values;
  const int m = tree.grid().size();
  const std::size_t br = static_cast<std::size_t>(tree.branch_factor());
  for (int lev = xi.level - 1; lev >= level; --lev) {
    std::vector<double> next(tree.level_size(lev));
    for (std::size_t i = 0; i < next.size(); ++i) {
      const std::size_t base = i * br;
      double best = -std::numeric_limits<double>::infinity();
      for (int s = 0; s < m; ++s) {
        const double branch = 0.5 * (v[base + 2 * s] + v[base + 2 * s + 1]);
        if (branch > best) best = branch;
      }
      next[i] = best;
    }
    v = std::move(next);
  }
  return NodeField{level, std::move(v)};
}

namespace detail {

inline double policy_expectation_rec(const ScenarioTree& tree, const Policy& p,
                                     const NodeField& xi, int lev, std::size_t node) {
  if (lev == xi.level) return xi.values[node];
  const int s = p.at(lev, node);
  return 0.5 * (policy_expectation_rec(tree, p, xi, lev + 1, tree.child(node, s, +1)) +
                policy_expectation_rec(tree, p, xi, lev + 1, tree.child(node, s, -1)));
}

}  // namespace detail

/// Linear expectation of `xi` under the path measure induced by `p`.
inline double expectation_under_policy(const ScenarioTree& tree, const Policy& p,
                                       const NodeField& xi) {
  detail::validate_field(tree, xi);
  detail::validate_policy(tree, p, xi.level);
  return detail::policy_expectation_rec(tree, p, xi, 0, 0);
}

constexpr std::size_t kDefaultPolicyBudget = std::size_t{1} << 22;

/// Visits every adapted policy on the nodes of levels 0..up_to-1 exactly once,
/// in lexicographic order (level-major, node-major, sigma ascending). Choices
/// at levels >= up_to are fixed to index 0. The Policy reference passed to the
/// callback is a reused buffer; copy it if it must outlive the call.
inline void for_each_policy(const ScenarioTree& tree, int up_to,
                            const std::function<void(const Policy&)>& fn,
                            std::size_t budget = kDefaultPolicyBudget) {
  if (up_to < 0 || up_to > tree.depth())
    throw std::invalid_argument("for_each_policy: up_to outside tree");
  const int m = tree.grid().size();
  std::size_t nodes_above = 0;
  for (int lev = 0; lev < up_to; ++lev) nodes_above += tree.level_size(lev);
  if (static_cast<double>(nodes_above) * std::log2(static_cast<double>(m)) >
      std::log2(static_cast<double>(budget)) + 1e-9) {
    throw BudgetError("for_each_policy: |grid|^" + std::to_string(nodes_above) +
                      " policies exceed enumeration budget " + std::to_string(budget));
  }
  Policy buf;
  buf.choice.resize(static_cast<std::size_t>(tree.depth()));
  for (int lev = 0; lev < tree.depth(); ++lev) buf.choice[lev].assign(tree.level_size(lev), 0);

  // flattened (level, node) positions that vary
  std::vector<std::pair<int, std::size_t>> slots;
  slots.reserve(nodes_above);
  for (int lev = 0; lev < up_to; ++lev)
    for (std::size_t i = 0; i < tree.level_size(lev); ++i) slots.emplace_back(lev, i);

  const std::function<void(std::size_t)> rec = [&](std::size_t pos) {
    if (pos == slots.size()) {
      fn(buf);
      return;
    }
    auto [lev, node] = slots[pos];
    for (int s = 0; s < m; ++s) {
      buf.choice[lev][node] = s;
      rec(pos + 1);
    }
    buf.choice[lev][node] = 0;
  };
  rec(0);
}

inline std::vector<Policy> enumerate_policies(const ScenarioTree& tree, int up_to,
                                              std::size_t budget = kDefaultPolicyBudget) {
  std::vector<Policy> out;
  for_each_policy(tree, up_to, [&](const Policy& p) { out.push_back(p); }, budget);
  return out;
}

namespace detail {

inline double tv_rec(const ScenarioTree& tree, const Policy& p, const Policy& q, int lev,
                     std::size_t node, double mass) {
  if (lev == tree.depth()) return 0.0;
  const int a = p.at(lev, node);
  const int b = q.at(lev, node);
  if (a != b) return mass;  // sub-supports disjoint from here on
  return tv_rec(tree, p, q, lev + 1, tree.child(node, a, +1), mass / 2) +
         tv_rec(tree, p, q, lev + 1, tree.child(node, a, -1), mass / 2);
}

}  // namespace detail

/// Total variation distance between the path measures induced by two policies.
inline double tv_distance(const ScenarioTree& tree, const Policy& p, const Policy& q) {
  detail::validate_policy(tree, p, tree.depth());
  detail::validate_policy(tree, q, tree.depth());
  return detail::tv_rec(tree, p, q, 0, 0, 1.0);
}

/// Debug dump, one row per node:
/// level,node_index,parent_index,sigma_index,sign,B,QV
/// (the root reports parent -1, sigma_index -1, sign 0).
inline void dump_tree_csv(const ScenarioTree& tree, std::ostream& os) {
  os << "level,node_index,parent_index,sigma_index,sign,B,QV\n";
  char buf[64];
  const auto num = [&](double x) {
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    return std::string(buf);
  };
  for (int lev = 0; lev <= tree.depth(); ++lev) {
    for (std::size_t i = 0; i < tree.level_size(lev); ++i) {
      if (lev == 0)
        os << "0,0,-1,-1,0";
      else
        os << lev << ',' << i << ',' << tree.parent(i) << ',' << tree.sigma_index_of(i) << ','
           << tree.sign_of(i);
      os << ',' << num(tree.brownian(lev, i)) << ',' << num(tree.quadratic_variation(lev, i))
         << '\n';
    }
  }
}

}  // namespace gsmp
