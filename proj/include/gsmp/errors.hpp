#pragma once

#include <stdexcept>
#include <string>

namespace gsmp {

/// Requested tree, enumeration or search exceeds its configured size budget.
class BudgetError : public std::runtime_error {
 public:
  explicit BudgetError(const std::string& what) : std::runtime_error(what) {}
};

/// Operation requires a structural capability flag the problem does not declare
/// (e.g. zero d<B> drift, y-independent dynamics).
class CapabilityError : public std::runtime_error {
 public:
  explicit CapabilityError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace gsmp
