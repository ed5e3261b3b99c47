#pragma once

// Sign-gradient L-inf attacks against a particle ensemble: FGSM and
// (EoT-)PGD, where the gradient at every step is the mean input gradient
// over all particles.

#include "advmb/attack_config.hpp"
#include "advmb/ensemble.hpp"

#include <vector>

namespace advmb {

struct AttackResult {
  Matrix x_adv;
  std::vector<bool> success_mask;  // misclassified at threshold 0.5
  Vector linf_used;
};

namespace detail {

// Rows are processed in fixed-size chunks so the numbers produced for a row do
// not depend on how callers batch their data.
inline constexpr Eigen::Index kAttackChunk = 256;

inline Matrix mean_input_grad(const Ensemble& e, const Matrix& x, const Vector& y) {
  Matrix g = Matrix::Zero(x.rows(), x.cols());
  for (const auto& p : e.particles) g += grad_input_batch(e.arch, p, x, y);
  g /= static_cast<double>(e.size());
  if (!g.allFinite()) throw NumericError("attack: non-finite ensemble gradient");
  return g;
}

inline void sign_step_project(Matrix& x, const Matrix& x0, const Matrix& grad, double step, const AttackConfig& cfg) {
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      const auto ju = static_cast<std::size_t>(j);
      const double lo = std::max(-cfg.epsilon_max, cfg.lower(ju));
      const double hi = std::min(cfg.epsilon_max, cfg.upper(ju));
      const double delta = (x(i, j) - x0(i, j)) + step * sign0(grad(i, j));
      x(i, j) = std::clamp(x0(i, j) + std::clamp(delta, lo, hi), cfg.domain_lo, cfg.domain_hi);
    }
  }
}

inline Matrix run_chunk(const Ensemble& e, const Matrix& x0, const Vector& y, const AttackConfig& cfg) {
  Matrix x = x0;
  if (cfg.family == AttackFamily::none) return x;
  if (cfg.family == AttackFamily::fgsm) {
    sign_step_project(x, x0, mean_input_grad(e, x, y), cfg.epsilon_max, cfg);
    return x;
  }
  const double step = cfg.step_size();
  for (int t = 0; t < cfg.steps; ++t) sign_step_project(x, x0, mean_input_grad(e, x, y), step, cfg);
  return x;
}

}  // namespace detail

inline AttackResult finish_result(const Ensemble& e, const Matrix& x0, Matrix x_adv, std::span<const std::uint8_t> labels) {
  AttackResult r;
  const Vector prob = posterior_predict_batch(e, x_adv);
  r.success_mask.resize(static_cast<std::size_t>(x0.rows()));
  r.linf_used.resize(x0.rows());
  for (Eigen::Index i = 0; i < x0.rows(); ++i) {
    const bool predicted_malware = prob[i] >= kThreshold;
    r.success_mask[static_cast<std::size_t>(i)] = predicted_malware != (labels[static_cast<std::size_t>(i)] == 1);
    r.linf_used[i] = x0.rows() > 0 && x0.cols() > 0 ? (x_adv.row(i) - x0.row(i)).cwiseAbs().maxCoeff() : 0.0;
  }
  r.x_adv = std::move(x_adv);
  return r;
}

/// Adversarial points only, without scoring them.
inline Matrix perturb(const Ensemble& e, const Matrix& x, std::span<const std::uint8_t> labels, const AttackConfig& cfg) {
  require_dim(labels.size(), static_cast<std::size_t>(x.rows()), "attack labels");
  require_dim(static_cast<std::size_t>(x.cols()), e.arch.input_dim(), "attack input");
  cfg.validate(static_cast<std::size_t>(x.cols()));
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index start = 0; start < x.rows(); start += detail::kAttackChunk) {
    const Eigen::Index len = std::min(detail::kAttackChunk, x.rows() - start);
    Vector y(len);
    for (Eigen::Index i = 0; i < len; ++i) y[i] = labels[static_cast<std::size_t>(start + i)];
    out.middleRows(start, len) = detail::run_chunk(e, x.middleRows(start, len), y, cfg);
  }
  return out;
}

/// Runs `cfg.family` on every row of `x`.
inline AttackResult attack_matrix(const Ensemble& e, const Matrix& x, std::span<const std::uint8_t> labels,
                                  const AttackConfig& cfg) {
  return finish_result(e, x, perturb(e, x, labels, cfg), labels);
}

/// One signed step of size epsilon_max along the ensemble-mean input gradient.
inline AttackResult fgsm(const Ensemble& e, const Matrix& x, std::span<const std::uint8_t> labels, AttackConfig cfg) {
  cfg.family = AttackFamily::fgsm;
  return attack_matrix(e, x, labels, cfg);
}

/// x^{t+1} = Proj(x^t + alpha * sign(mean_k grad_x loss(f(x^t; theta_k), y))), from x^0 = x.
inline AttackResult eot_pgd(const Ensemble& e, const Matrix& x, std::span<const std::uint8_t> labels, AttackConfig cfg) {
  if (cfg.family != AttackFamily::pgd) cfg.family = AttackFamily::eot_pgd;
  return attack_matrix(e, x, labels, cfg);
}

/// Attacks a dataset. With target_malware_only only rows labeled 1 move;
/// other rows are copied through unchanged. Labels never change.
inline std::pair<Dataset, AttackResult> attack_dataset(const Ensemble& e, const Dataset& d, const AttackConfig& cfg) {
  require_dim(d.feature_dim(), e.arch.input_dim(), "attack_dataset");
  if (cfg.family == AttackFamily::none || !cfg.target_malware_only) {
    auto r = attack_matrix(e, d.features, d.labels, cfg);
    Dataset adv(r.x_adv, d.labels, d.name + "+adv");
    return {std::move(adv), std::move(r)};
  }
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (d.labels[i] == 1) rows.push_back(i);
  }
  const Dataset mal = gather_rows(d, rows);
  const auto sub = attack_matrix(e, mal.features, mal.labels, cfg);
  Matrix x_adv = d.features;
  for (std::size_t k = 0; k < rows.size(); ++k) {
    x_adv.row(static_cast<Eigen::Index>(rows[k])) = sub.x_adv.row(static_cast<Eigen::Index>(k));
  }
  auto r = finish_result(e, d.features, x_adv, d.labels);
  Dataset adv(std::move(x_adv), d.labels, d.name + "+adv");
  return {std::move(adv), std::move(r)};
}

/// Number of rows violating the budget, box or domain constraints.
inline std::size_t count_violations(const Matrix& x, const Matrix& x_adv, const AttackConfig& cfg, double tol = 1e-9) {
  std::size_t bad = 0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    if (!is_feasible(x_adv.row(i).transpose(), x.row(i).transpose(), cfg, tol)) ++bad;
  }
  return bad;
}

}  // namespace advmb
