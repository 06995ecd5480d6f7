#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "gsmp/adjoint_smp.hpp"
#include "gsmp/mf_gsde.hpp"

namespace gsmp {

/// Policies serialize as node -> sigma-index maps, one array per level.
inline nlohmann::json policy_to_json(const Policy& p) {
  nlohmann::json levels = nlohmann::json::array();
  for (const auto& level : p.choice) levels.push_back(level);
  return levels;
}

inline nlohmann::json control_to_json(const ControlProcess& u) {
  nlohmann::json j;
  j["adapted"] = u.is_adapted();
  nlohmann::json levels = nlohmann::json::array();
  for (const auto& level : u.values()) levels.push_back(level);
  j["values"] = levels;
  return j;
}

inline std::string to_string(MinimaxCertificate::Status s) {
  switch (s) {
    case MinimaxCertificate::Status::exact: return "exact";
    case MinimaxCertificate::Status::approximate: return "approximate";
    default: return "inconclusive";
  }
}

/// First-order optimality report. Keys are emitted in sorted order; the
/// document is stable across runs for fixed inputs.
inline nlohmann::json smp_report_json(const MinimaxCertificate& cert,
                                      double necessary_residual_min,
                                      const SufficiencyReport& sufficiency,
                                      const std::vector<double>& duality_residuals) {
  nlohmann::json j;
  j["residual"] = cert.residual;
  j["status"] = to_string(cert.status);
  j["saddle_gap"] = cert.gap;
  j["P_star"] = policy_to_json(cert.P_star);
  j["Q_star"] = policy_to_json(cert.Q_star);
  j["duality_residuals"] = duality_residuals;
  j["necessary_residual_min"] = necessary_residual_min;
  j["sufficiency_pass"] = sufficiency.pass;
  j["sufficiency_tol"] = sufficiency.tol;
  if (sufficiency.witness_index >= 0)
    j["witness_control"] = control_to_json(sufficiency.witness);
  else
    j["witness_control"] = nullptr;
  return j;
}

}  // namespace gsmp
