#pragma once

// Expected-agreement risks on clean and adversarial data and the bound
//
//   |R_adv - R| <= tau = 1 - E_(x,y) [ exp( E_theta[ r_theta(x, x_adv, y) ] ) ],
//   r_theta = sum_c p(c | x, theta) log p(c | x_adv, theta).
//
// The inner expectation E_{y' ~ p(.|x,theta)} 1[y = y'] is evaluated in closed
// form as p(y | x, theta). All three quantities use the same particle set.

#include "advmb/attacks.hpp"
#include "advmb/json_io.hpp"

#include <array>
#include <numeric>
#include <optional>

namespace advmb {

/// (p(y=0), p(y=1))
using ClassProbs = std::array<double, 2>;

inline ClassProbs class_probs(double p_malware) { return {1.0 - p_malware, p_malware}; }

inline double r_theta(const ClassProbs& p_clean, const ClassProbs& p_adv) {
  for (const auto* pr : {&p_clean, &p_adv}) {
    const auto& q = *pr;
    if (std::abs(q[0] + q[1] - 1.0) > 1e-9) throw ValueError("r_theta: probabilities must sum to 1");
    for (double v : q) {
      if (!(v >= kProbClamp - 1e-15 && v <= 1.0 - kProbClamp + 1e-15)) {
        throw ValueError("r_theta: probability outside [kappa, 1 - kappa]");
      }
    }
  }
  return p_clean[0] * std::log(p_adv[0]) + p_clean[1] * std::log(p_adv[1]);
}

struct RiskReport {
  double R = 0.0;
  double R_adv = 0.0;
  double tau = 0.0;
  double gap = 0.0;
  bool holds = false;
  std::vector<double> per_sample_r;  // E_theta[r_theta] per row
};

inline json to_json(const RiskReport& r) {
  return {{"R", r.R}, {"R_adv", r.R_adv}, {"tau", r.tau}, {"gap", r.gap}, {"holds", r.holds}};
}

namespace detail {

inline double true_class_prob(double p_malware, std::uint8_t y) { return y == 1 ? p_malware : 1.0 - p_malware; }

}  // namespace detail

/// Mean over particles and rows of p(y | x, theta).
inline double empirical_risk(const Ensemble& e, const Dataset& d) {
  require_dim(d.feature_dim(), e.arch.input_dim(), "empirical_risk");
  if (d.size() == 0) throw ValueError("empirical_risk: empty dataset");
  const Matrix probs = particle_probs(e, d.features);
  CompensatedSum s;
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    for (Eigen::Index k = 0; k < probs.cols(); ++k) {
      s.add(detail::true_class_prob(probs(i, k), d.labels[static_cast<std::size_t>(i)]));
    }
  }
  return s.value() / static_cast<double>(probs.size());
}

/// Attacks every row (labels kept) and evaluates the same functional on the result.
inline std::pair<double, Dataset> adversarial_risk(const Ensemble& e, const Dataset& d, AttackConfig cfg) {
  cfg.target_malware_only = false;
  auto [adv, result] = attack_dataset(e, d, cfg);
  const double r = empirical_risk(e, adv);
  return {r, std::move(adv)};
}

inline RiskReport risk_bound(const Ensemble& e, const Dataset& d, const Dataset& d_adv) {
  require_dim(d.feature_dim(), e.arch.input_dim(), "risk_bound");
  require_dim(d_adv.feature_dim(), d.feature_dim(), "risk_bound adversarial data");
  if (d.size() != d_adv.size() || d.labels != d_adv.labels) {
    throw ValueError("risk_bound: clean and adversarial datasets are not row-aligned");
  }
  if (d.size() == 0) throw ValueError("risk_bound: empty dataset");
  const Matrix pc = particle_probs(e, d.features);
  const Matrix pa = particle_probs(e, d_adv.features);
  const auto n_particles = static_cast<double>(e.size());
  CompensatedSum clean, attacked, agreement;
  RiskReport rep;
  rep.per_sample_r.resize(d.size());
  for (Eigen::Index i = 0; i < pc.rows(); ++i) {
    const auto y = d.labels[static_cast<std::size_t>(i)];
    CompensatedSum r_row;
    for (Eigen::Index k = 0; k < pc.cols(); ++k) {
      clean.add(detail::true_class_prob(pc(i, k), y));
      attacked.add(detail::true_class_prob(pa(i, k), y));
      r_row.add(r_theta(class_probs(pc(i, k)), class_probs(pa(i, k))));
    }
    const double mean_r = r_row.value() / n_particles;
    rep.per_sample_r[static_cast<std::size_t>(i)] = mean_r;
    agreement.add(std::exp(mean_r));
  }
  const auto cells = static_cast<double>(pc.size());
  rep.R = clean.value() / cells;
  rep.R_adv = attacked.value() / cells;
  rep.tau = 1.0 - agreement.value() / static_cast<double>(d.size());
  rep.gap = std::abs(rep.R_adv - rep.R);
  rep.holds = rep.gap <= rep.tau + 1e-9;
  return rep;
}

/// Bound check on consecutive row batches; one report per batch.
inline std::vector<RiskReport> risk_bound_batches(const Ensemble& e, const Dataset& d, const Dataset& d_adv,
                                                  std::size_t batch_size) {
  if (batch_size == 0) throw ValueError("risk_bound_batches: batch_size must be > 0");
  std::vector<RiskReport> out;
  for (std::size_t start = 0; start < d.size(); start += batch_size) {
    std::vector<std::size_t> rows(std::min(batch_size, d.size() - start));
    std::iota(rows.begin(), rows.end(), start);
    out.push_back(risk_bound(e, gather_rows(d, rows), gather_rows(d_adv, rows)));
  }
  return out;
}

}  // namespace advmb
