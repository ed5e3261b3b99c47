#pragma once

// Feature-space attack configuration and the projection onto the feasible set
// { x : |x - x0|_inf <= eps, delta_lb <= x - x0 <= delta_ub, lo <= x <= hi }.

#include "advmb/core.hpp"

#include <string>
#include <vector>

namespace advmb {

enum class AttackFamily { none, fgsm, pgd, eot_pgd };

inline std::string to_string(AttackFamily f) {
  switch (f) {
    case AttackFamily::none: return "none";
    case AttackFamily::fgsm: return "fgsm";
    case AttackFamily::pgd: return "pgd";
    case AttackFamily::eot_pgd: return "eot_pgd";
  }
  return "none";
}

inline AttackFamily attack_family_from_string(const std::string& s) {
  if (s == "none") return AttackFamily::none;
  if (s == "fgsm") return AttackFamily::fgsm;
  if (s == "pgd") return AttackFamily::pgd;
  if (s == "eot_pgd" || s == "eot-pgd") return AttackFamily::eot_pgd;
  throw ConfigError("unknown attack family '" + s + "'");
}

struct AttackConfig {
  AttackFamily family = AttackFamily::eot_pgd;
  double epsilon_max = 0.1;
  double alpha = 0.0;  // <= 0 selects 2.5 * epsilon_max / steps
  int steps = 10;
  // Per-feature perturbation bounds; a single entry applies to every feature.
  std::vector<double> delta_lb{-1.0};
  std::vector<double> delta_ub{1.0};
  double domain_lo = 0.0;
  double domain_hi = 1.0;
  bool target_malware_only = false;

  double step_size() const { return alpha > 0.0 ? alpha : 2.5 * epsilon_max / static_cast<double>(steps); }

  double lower(std::size_t j) const { return delta_lb.size() == 1 ? delta_lb[0] : delta_lb[j]; }
  double upper(std::size_t j) const { return delta_ub.size() == 1 ? delta_ub[0] : delta_ub[j]; }

  void validate(std::size_t dim) const {
    if (!(epsilon_max >= 0.0)) throw ConfigError("attack: epsilon_max must be >= 0");
    if (steps < 1) throw ConfigError("attack: steps must be >= 1");
    if (!(domain_lo <= domain_hi)) throw ConfigError("attack: domain_lo must be <= domain_hi");
    for (const auto* bounds : {&delta_lb, &delta_ub}) {
      if (bounds->size() != 1 && bounds->size() != dim) {
        throw DimensionError("attack: delta bounds need 1 or " + std::to_string(dim) + " entries");
      }
    }
    for (std::size_t j = 0; j < dim; ++j) {
      if (!(lower(j) <= 0.0 && upper(j) >= 0.0)) throw ConfigError("attack: need delta_lb <= 0 <= delta_ub");
    }
  }
};

/// Clamps a perturbation into the feasible set around x0 and returns x0 + delta.
/// The ball/box clamp happens first, the domain clamp last.
inline Vector project_delta(const Vector& delta, const Vector& x0, const AttackConfig& cfg) {
  require_dim(static_cast<std::size_t>(delta.size()), static_cast<std::size_t>(x0.size()), "project");
  Vector out(x0.size());
  for (Eigen::Index j = 0; j < x0.size(); ++j) {
    const auto ju = static_cast<std::size_t>(j);
    const double lo = std::max(-cfg.epsilon_max, cfg.lower(ju));
    const double hi = std::min(cfg.epsilon_max, cfg.upper(ju));
    out[j] = std::clamp(x0[j] + std::clamp(delta[j], lo, hi), cfg.domain_lo, cfg.domain_hi);
  }
  return out;
}

inline bool is_feasible(const Vector& x, const Vector& x0, const AttackConfig& cfg, double tol = 0.0) {
  for (Eigen::Index j = 0; j < x0.size(); ++j) {
    const auto ju = static_cast<std::size_t>(j);
    const double d = x[j] - x0[j];
    if (std::abs(d) > cfg.epsilon_max + tol) return false;
    if (d < cfg.lower(ju) - tol || d > cfg.upper(ju) + tol) return false;
    if (x[j] < cfg.domain_lo - tol || x[j] > cfg.domain_hi + tol) return false;
  }
  return true;
}

/// Projection of a candidate point. Feasible candidates are returned unchanged,
/// which makes the map idempotent.
inline Vector project(const Vector& x_cand, const Vector& x0, const AttackConfig& cfg) {
  require_dim(static_cast<std::size_t>(x_cand.size()), static_cast<std::size_t>(x0.size()), "project");
  if (is_feasible(x_cand, x0, cfg)) return x_cand;
  return project_delta(x_cand - x0, x0, cfg);
}

}  // namespace advmb
