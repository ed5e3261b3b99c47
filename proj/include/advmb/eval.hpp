#pragma once

// ROC / AUC, TPR at a fixed FPR, robustness-vs-budget sweeps and the
// PGD-vs-FGSM transferability protocol.

#include "advmb/attacks.hpp"
#include "advmb/json_io.hpp"

#include <limits>
#include <numeric>
#include <string>
#include <vector>

namespace advmb {

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
  double threshold = 0.0;  // score >= threshold predicts positive
};

struct RocCurve {
  std::vector<RocPoint> points;
  double auc = 0.0;
};

/// Exact ROC: thresholds sweep the distinct scores from high to low, equal
/// scores form a single step. Starts at (0,0) with threshold +inf and ends at (1,1).
inline RocCurve roc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  require_dim(labels.size(), scores.size(), "roc");
  std::size_t pos = 0;
  for (auto y : labels) {
    if (y > 1) throw ValueError("roc: labels must be 0/1");
    pos += y;
  }
  const std::size_t neg = labels.size() - pos;
  if (pos == 0 || neg == 0) throw ValueError("roc: need at least one positive and one negative");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  RocCurve c;
  c.points.push_back({0.0, 0.0, std::numeric_limits<double>::infinity()});
  std::size_t tp = 0, fp = 0;
  for (std::size_t k = 0; k < order.size();) {
    const double s = scores[order[k]];
    for (; k < order.size() && scores[order[k]] == s; ++k) (labels[order[k]] ? tp : fp) += 1;
    c.points.push_back({static_cast<double>(fp) / static_cast<double>(neg), static_cast<double>(tp) / static_cast<double>(pos), s});
  }
  CompensatedSum area;
  for (std::size_t i = 1; i < c.points.size(); ++i) {
    const auto& a = c.points[i - 1];
    const auto& b = c.points[i];
    area.add((b.fpr - a.fpr) * (a.tpr + b.tpr) * 0.5);
  }
  c.auc = area.value();
  return c;
}

inline double auc(std::span<const double> scores, std::span<const std::uint8_t> labels) { return roc(scores, labels).auc; }

/// Largest TPR among curve points with fpr <= target (step interpolation).
inline double tpr_at_fpr(const RocCurve& c, double fpr_target) {
  double best = 0.0;
  for (const auto& p : c.points) {
    if (p.fpr <= fpr_target) best = std::max(best, p.tpr);
  }
  return best;
}

inline std::string roc_to_csv(const RocCurve& c) {
  std::string out = "fpr,tpr,threshold\n";
  std::array<char, 32> buf{};
  for (const auto& p : c.points) {
    for (double v : {p.fpr, p.tpr}) {
      const auto r = std::to_chars(buf.data(), buf.data() + buf.size(), v);
      out.append(buf.data(), r.ptr);
      out.push_back(',');
    }
    if (std::isinf(p.threshold)) {
      out += "inf";
    } else {
      const auto r = std::to_chars(buf.data(), buf.data() + buf.size(), p.threshold);
      out.append(buf.data(), r.ptr);
    }
    out.push_back('\n');
  }
  return out;
}

/// Fraction of malware rows scored >= 0.5.
inline double detection_rate(const Ensemble& e, const Matrix& x_malware) {
  if (x_malware.rows() == 0) throw ValueError("detection_rate: no malware rows");
  const Vector p = posterior_predict_batch(e, x_malware);
  return static_cast<double>((p.array() >= kThreshold).count()) / static_cast<double>(p.size());
}

struct RobustnessTable {
  std::string model;
  AttackFamily attack = AttackFamily::pgd;
  std::vector<double> budgets;
  std::vector<double> detection_rate;
};

inline json to_json(const RobustnessTable& t) {
  return {{"model", t.model}, {"attack", to_string(t.attack)}, {"budgets", t.budgets}, {"rates", t.detection_rate}};
}

/// Attacks the malware rows at each budget and reports the detection rate.
/// `base` supplies steps, alpha policy and bounds; epsilon_max and family are
/// overridden per entry. Budget 0 is the clean detection rate.
inline RobustnessTable robustness_sweep(const Ensemble& e, const Dataset& d, std::span<const double> budgets,
                                        AttackFamily family, AttackConfig base = {}, std::string model_tag = {}) {
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (d.labels[i] == 1) rows.push_back(i);
  }
  if (rows.empty()) throw ValueError("robustness_sweep: dataset has no malware rows");
  const Dataset mal = gather_rows(d, rows);
  RobustnessTable t{std::move(model_tag), family, {budgets.begin(), budgets.end()}, {}};
  for (double eps : budgets) {
    AttackConfig cfg = base;
    cfg.family = eps == 0.0 ? AttackFamily::none : family;
    cfg.epsilon_max = eps;
    cfg.target_malware_only = true;
    const Matrix x_adv = perturb(e, mal.features, mal.labels, cfg);
    t.detection_rate.push_back(detection_rate(e, x_adv));
  }
  return t;
}

struct TransferTables {
  RobustnessTable pgd;
  RobustnessTable fgsm;
};

inline TransferTables transferability(const Ensemble& e, const Dataset& d, std::span<const double> budgets,
                                      AttackConfig base = {}, std::string model_tag = {}) {
  return {robustness_sweep(e, d, budgets, AttackFamily::eot_pgd, base, model_tag),
          robustness_sweep(e, d, budgets, AttackFamily::fgsm, base, model_tag)};
}

/// Held-out AUC of the ensemble and of each particle on its own.
struct EnsembleAucs {
  double ensemble = 0.0;
  std::vector<double> particles;

  double mean_particle() const {
    return particles.empty() ? 0.0 : std::accumulate(particles.begin(), particles.end(), 0.0) / static_cast<double>(particles.size());
  }
};

inline EnsembleAucs ensemble_vs_particles(const Ensemble& e, const Dataset& d) {
  EnsembleAucs out;
  const Vector p = posterior_predict_batch(e, d.features);
  out.ensemble = auc(std::span<const double>(p.data(), static_cast<std::size_t>(p.size())), d.labels);
  const Matrix probs = particle_probs(e, d.features);
  for (Eigen::Index k = 0; k < probs.cols(); ++k) {
    const Vector col = probs.col(k);
    out.particles.push_back(auc(std::span<const double>(col.data(), static_cast<std::size_t>(col.size())), d.labels));
  }
  return out;
}

}  // namespace advmb
