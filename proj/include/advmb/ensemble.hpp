#pragma once

// A set of parameter particles sharing one architecture, and the
// posterior-predictive average over them.

#include "advmb/attack_config.hpp"
#include "advmb/dataio.hpp"
#include "advmb/network.hpp"

#include <optional>
#include <string>
#include <vector>

namespace advmb {

enum class Optimizer { sgd, adam };

inline std::string to_string(Optimizer o) { return o == Optimizer::sgd ? "sgd" : "adam"; }

inline Optimizer optimizer_from_string(const std::string& s) {
  if (s == "sgd") return Optimizer::sgd;
  if (s == "adam") return Optimizer::adam;
  throw ConfigError("unknown optimizer '" + s + "'");
}

struct TrainMeta {
  std::uint64_t seed = 0;
  int epochs = 0;
  double learning_rate = 0.0;
  Optimizer optimizer = Optimizer::sgd;
  std::size_t batch_size = 0;
  double weight_decay = 0.0;
  std::optional<AttackConfig> adv;
  std::vector<double> epoch_losses;
};

struct Ensemble {
  std::vector<ParamParticle> particles;
  Architecture arch;
  NormStats norm_stats;
  double gamma = 0.0;
  TrainMeta meta;

  std::size_t size() const { return particles.size(); }

  void validate() const {
    arch.validate();
    if (particles.empty()) throw ValueError("ensemble: needs at least one particle");
    const auto ref = zeros_like(arch);
    for (const auto& p : particles) {
      if (!p.same_shape(ref)) throw DimensionError("ensemble: particle shape does not match architecture");
      if (!p.all_finite()) throw NumericError("ensemble: non-finite parameters");
    }
  }

  /// Wraps a single particle, e.g. to evaluate one member on its own.
  static Ensemble single(const Ensemble& from, std::size_t i) {
    Ensemble e;
    e.particles = {from.particles.at(i)};
    e.arch = from.arch;
    e.norm_stats = from.norm_stats;
    e.gamma = from.gamma;
    e.meta = from.meta;
    return e;
  }
};

/// Per-particle clamped probabilities, one column per particle.
inline Matrix particle_probs(const Ensemble& e, const Matrix& x) {
  Matrix probs(x.rows(), static_cast<Eigen::Index>(e.size()));
  for (std::size_t k = 0; k < e.size(); ++k) {
    const Vector logits = forward_batch(e.arch, e.particles[k], x);
    probs.col(static_cast<Eigen::Index>(k)) = logits.unaryExpr([](double s) { return clamp_prob(sigmoid(s)); });
  }
  return probs;
}

/// Mean of per-particle probabilities for each row. Each row's terms are summed
/// in sorted order, so the result does not depend on particle order.
inline Vector posterior_predict_batch(const Ensemble& e, const Matrix& x) {
  const Matrix probs = particle_probs(e, x);
  Vector out(x.rows());
  std::vector<double> row(e.size());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (std::size_t k = 0; k < e.size(); ++k) row[k] = probs(i, static_cast<Eigen::Index>(k));
    std::sort(row.begin(), row.end());
    double s = 0.0;
    for (double v : row) s += v;
    out[i] = clamp_prob(s / static_cast<double>(row.size()));
  }
  return out;
}

inline double posterior_predict(const Ensemble& e, const Vector& x) {
  return posterior_predict_batch(e, Matrix(x.transpose()))[0];
}

}  // namespace advmb
