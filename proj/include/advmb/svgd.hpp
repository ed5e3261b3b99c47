#pragma once

// Stein variational gradient descent over network parameter particles, with
// optional adversarial batches regenerated against the current ensemble.
//
// For particles theta_1..theta_n and per-particle loss gradients g_j the
// update direction is
//
//   phi(theta) = sum_j [ k(theta_j, theta) g_j - (gamma/n) grad_{theta_j} k(theta_j, theta) ]
//
// with k(a, b) = exp(-|a - b|^2 / (2 h^2)) and h the median pairwise distance.
// Particles move by theta_i <- theta_i - lr * phi(theta_i).

#include "advmb/attacks.hpp"
#include "advmb/json_io.hpp"

#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <vector>

namespace advmb {

inline double rbf_kernel(const Vector& a, const Vector& b, double h) {
  if (!(h > 0.0)) throw ValueError("rbf_kernel: bandwidth must be > 0");
  require_dim(static_cast<std::size_t>(a.size()), static_cast<std::size_t>(b.size()), "rbf_kernel");
  return std::exp(-(a - b).squaredNorm() / (2.0 * h * h));
}

inline double rbf_kernel(const ParamParticle& a, const ParamParticle& b, double h) {
  return rbf_kernel(a.flatten(), b.flatten(), h);
}

/// Squared pairwise distances; exact zero on the diagonal.
inline Matrix pairwise_sq_dist(std::span<const Vector> theta) {
  const auto n = static_cast<Eigen::Index>(theta.size());
  Matrix d = Matrix::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) {
      d(i, j) = d(j, i) = (theta[static_cast<std::size_t>(i)] - theta[static_cast<std::size_t>(j)]).squaredNorm();
    }
  }
  return d;
}

/// Median over the n(n-1)/2 pairwise Euclidean distances (mean of the two
/// middle values for an even count). Falls back to 1 when n == 1 or the
/// median is 0.
inline double median_bandwidth_from_sq(const Matrix& sq) {
  std::vector<double> dist;
  for (Eigen::Index i = 0; i < sq.rows(); ++i) {
    for (Eigen::Index j = i + 1; j < sq.cols(); ++j) dist.push_back(std::sqrt(sq(i, j)));
  }
  if (dist.empty()) return 1.0;
  const auto mid = dist.size() / 2;
  std::nth_element(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(mid), dist.end());
  double med = dist[mid];
  if (dist.size() % 2 == 0) {
    const double lower = *std::max_element(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(mid));
    med = 0.5 * (lower + med);
  }
  return med > 0.0 ? med : 1.0;
}

inline double median_bandwidth(std::span<const Vector> theta) { return median_bandwidth_from_sq(pairwise_sq_dist(theta)); }

inline double median_bandwidth(std::span<const ParamParticle> particles) {
  std::vector<Vector> flat;
  for (const auto& p : particles) flat.push_back(p.flatten());
  return median_bandwidth(std::span<const Vector>(flat));
}

/// phi(theta_i) for every particle, on flattened parameters. The kernel
/// bandwidth defaults to the median pairwise distance.
inline std::vector<Vector> svgd_direction(std::span<const Vector> theta, std::span<const Vector> grads, double gamma,
                                          std::optional<double> bandwidth = std::nullopt) {
  require_dim(grads.size(), theta.size(), "svgd_direction");
  const std::size_t n = theta.size();
  for (std::size_t j = 0; j < n; ++j) {
    require_dim(static_cast<std::size_t>(theta[j].size()), static_cast<std::size_t>(theta[0].size()), "svgd_direction particle");
    require_dim(static_cast<std::size_t>(grads[j].size()), static_cast<std::size_t>(theta[0].size()), "svgd_direction gradient");
  }
  const Matrix sq = pairwise_sq_dist(theta);
  if (bandwidth && !(*bandwidth > 0.0 && std::isfinite(*bandwidth))) throw ValueError("svgd_direction: bandwidth must be > 0");
  const double h = bandwidth ? *bandwidth : median_bandwidth_from_sq(sq);
  const double h2 = h * h;
  const double repulse = gamma / static_cast<double>(n);
  std::vector<Vector> phi(n);
  for (std::size_t i = 0; i < n; ++i) {
    phi[i] = Vector::Zero(theta[i].size());
    for (std::size_t j = 0; j < n; ++j) {
      const double k = std::exp(-sq(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)) / (2.0 * h2));
      phi[i] += k * grads[j];
      // grad_{theta_j} k(theta_j, theta_i) = k (theta_i - theta_j) / h^2
      if (j != i && repulse != 0.0) phi[i] -= (repulse * k / h2) * (theta[i] - theta[j]);
    }
  }
  return phi;
}

inline std::vector<Gradients> svgd_direction(std::span<const ParamParticle> particles, std::span<const Gradients> grads,
                                             double gamma) {
  require_dim(grads.size(), particles.size(), "svgd_direction");
  std::vector<Vector> theta, g;
  for (std::size_t i = 0; i < particles.size(); ++i) {
    theta.push_back(particles[i].flatten());
    g.push_back(grads[i].flatten());
  }
  const auto phi = svgd_direction(std::span<const Vector>(theta), std::span<const Vector>(g), gamma);
  std::vector<Gradients> out;
  for (std::size_t i = 0; i < particles.size(); ++i) {
    Gradients d = grads[i];
    d.assign_flat(phi[i]);
    out.push_back(std::move(d));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------
struct TrainConfig {
  std::size_t n_particles = 5;
  double gamma = 1.0;
  double learning_rate = 1e-3;
  int epochs = 10;
  std::size_t batch_size = 512;
  std::optional<AttackConfig> adv;
  std::uint64_t seed = 0;
  Optimizer optimizer = Optimizer::adam;
  double weight_decay = 0.0;  // L2 term added to every particle's loss gradient
  // 0: particles initialised independently. > 0: every particle is particle 0
  // plus N(0, init_jitter^2) noise.
  double init_jitter = 0.0;

  void validate() const {
    if (n_particles == 0) throw ConfigError("train: n_particles must be >= 1");
    if (!(gamma >= 0.0)) throw ConfigError("train: gamma must be >= 0");
    if (!(learning_rate > 0.0)) throw ConfigError("train: learning_rate must be > 0");
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (batch_size == 0) throw ConfigError("train: batch_size must be >= 1");
    if (!(weight_decay >= 0.0) || !(init_jitter >= 0.0)) throw ConfigError("train: weight_decay/init_jitter must be >= 0");
  }
};

inline std::uint64_t particle_seed(std::uint64_t seed, std::size_t i) { return mix_seed(seed, 1000 + i); }

/// Row visiting order for one epoch.
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(mix_seed(seed, 100 + static_cast<std::uint64_t>(epoch)));
  std::shuffle(idx.begin(), idx.end(), rng);
  return idx;
}

inline std::vector<ParamParticle> init_particles(const Architecture& arch, const TrainConfig& cfg) {
  std::vector<ParamParticle> ps;
  if (cfg.init_jitter > 0.0) {
    const auto base = init_params(arch, particle_seed(cfg.seed, 0));
    std::mt19937_64 rng(mix_seed(cfg.seed, 999));
    std::normal_distribution<double> noise(0.0, cfg.init_jitter);
    for (std::size_t i = 0; i < cfg.n_particles; ++i) {
      Vector v = base.flatten();
      if (i > 0) {
        for (Eigen::Index k = 0; k < v.size(); ++k) v[k] += noise(rng);
      }
      auto p = base;
      p.assign_flat(v);
      p.id = static_cast<int>(i);
      ps.push_back(std::move(p));
    }
    return ps;
  }
  for (std::size_t i = 0; i < cfg.n_particles; ++i) {
    auto p = init_params(arch, particle_seed(cfg.seed, i));
    p.id = static_cast<int>(i);
    ps.push_back(std::move(p));
  }
  return ps;
}

namespace detail {

struct AdamState {
  Vector m, v;
  long t = 0;
};

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEps = 1e-8;

}  // namespace detail

/// Optional per-epoch hook, e.g. for progress logging.
using EpochCallback = std::function<void(int epoch, double mean_loss)>;

inline Ensemble train(const Dataset& train_d, const Dataset& val_d, const TrainConfig& cfg, const Architecture& arch,
                      const NormStats& norm_stats, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  arch.validate();
  require_dim(train_d.feature_dim(), arch.input_dim(), "train data");
  if (val_d.size() > 0) require_dim(val_d.feature_dim(), arch.input_dim(), "validation data");
  if (train_d.size() == 0) throw ValueError("train: empty training set");
  if (cfg.adv) cfg.adv->validate(arch.input_dim());

  Ensemble e;
  e.arch = arch;
  e.norm_stats = norm_stats;
  e.gamma = cfg.gamma;
  e.particles = init_particles(arch, cfg);
  e.meta = TrainMeta{cfg.seed, cfg.epochs, cfg.learning_rate, cfg.optimizer, cfg.batch_size, cfg.weight_decay, cfg.adv, {}};

  AttackConfig adv_cfg;
  if (cfg.adv) {
    adv_cfg = *cfg.adv;
    adv_cfg.target_malware_only = false;
  }
  const std::size_t n = cfg.n_particles;
  std::vector<detail::AdamState> adam(n);
  for (auto& s : adam) {
    s.m = Vector::Zero(static_cast<Eigen::Index>(e.particles[0].num_params()));
    s.v = s.m;
  }

  std::vector<Vector> theta(n), grads(n);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = epoch_order(train_d.size(), cfg.seed, epoch);
    CompensatedSum epoch_loss;
    std::size_t n_batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t len = std::min(cfg.batch_size, order.size() - start);
      const Dataset batch = gather_rows(train_d, std::span<const std::size_t>(order).subspan(start, len));
      try {
        Matrix x = batch.features;
        if (cfg.adv && cfg.adv->family != AttackFamily::none) x = perturb(e, batch.features, batch.labels, adv_cfg);
        const Vector y = batch.labels_as_vector();
        double batch_loss = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          auto bw = backward(arch, e.particles[i], x, y);
          theta[i] = e.particles[i].flatten();
          grads[i] = bw.grad.flatten();
          if (cfg.weight_decay > 0.0) grads[i] += cfg.weight_decay * theta[i];
          batch_loss += bw.mean_loss;
        }
        epoch_loss.add(batch_loss / static_cast<double>(n));
        ++n_batches;
        const auto phi = svgd_direction(std::span<const Vector>(theta), std::span<const Vector>(grads), cfg.gamma);
        for (std::size_t i = 0; i < n; ++i) {
          if (cfg.optimizer == Optimizer::sgd) {
            theta[i] -= cfg.learning_rate * phi[i];
          } else {
            auto& s = adam[i];
            ++s.t;
            s.m = detail::kAdamBeta1 * s.m + (1.0 - detail::kAdamBeta1) * phi[i];
            s.v = detail::kAdamBeta2 * s.v + (1.0 - detail::kAdamBeta2) * phi[i].cwiseAbs2();
            const double c1 = 1.0 - std::pow(detail::kAdamBeta1, static_cast<double>(s.t));
            const double c2 = 1.0 - std::pow(detail::kAdamBeta2, static_cast<double>(s.t));
            theta[i].array() -= cfg.learning_rate * (s.m.array() / c1) / ((s.v.array() / c2).sqrt() + detail::kAdamEps);
          }
          if (!theta[i].allFinite()) throw NumericError("non-finite parameters after update");
          e.particles[i].assign_flat(theta[i]);
        }
      } catch (const NumericError& err) {
        throw NumericError(std::string(err.what()) + " (epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(start / cfg.batch_size) + ")");
      }
    }
    const double mean_loss = epoch_loss.value() / static_cast<double>(n_batches);
    e.meta.epoch_losses.push_back(mean_loss);
    if (on_epoch) on_epoch(epoch, mean_loss);
  }
  return e;
}

inline Ensemble train(const Dataset& train_d, const Dataset& val_d, const TrainConfig& cfg) {
  return train(train_d, val_d, cfg, Architecture::default_for(train_d.feature_dim()),
               NormStats::identity(train_d.feature_dim()));
}

/// Mean BCE of each particle on a dataset.
inline std::vector<double> particle_losses(const Ensemble& e, const Dataset& d) {
  std::vector<double> out;
  for (const auto& p : e.particles) {
    const Vector logits = forward_batch(e.arch, p, d.features);
    CompensatedSum s;
    for (Eigen::Index i = 0; i < logits.size(); ++i) s.add(bce_loss(logits[i], d.labels[static_cast<std::size_t>(i)]));
    out.push_back(s.value() / static_cast<double>(std::max<std::size_t>(1, d.size())));
  }
  return out;
}

/// Mean pairwise Euclidean distance between particles.
inline double mean_pairwise_distance(const Ensemble& e) {
  std::vector<Vector> flat;
  for (const auto& p : e.particles) flat.push_back(p.flatten());
  const Matrix sq = pairwise_sq_dist(flat);
  double s = 0.0;
  std::size_t c = 0;
  for (Eigen::Index i = 0; i < sq.rows(); ++i) {
    for (Eigen::Index j = i + 1; j < sq.cols(); ++j, ++c) s += std::sqrt(sq(i, j));
  }
  return c == 0 ? 0.0 : s / static_cast<double>(c);
}

// ---------------------------------------------------------------------------
// Checkpoints: one JSON document.
// ---------------------------------------------------------------------------
inline constexpr const char* kCheckpointMagic = "ADVMB";
inline constexpr int kCheckpointVersion = 1;

inline json checkpoint_to_json(const Ensemble& e) {
  json particles = json::array();
  for (const auto& p : e.particles) {
    json layers = json::array();
    for (const auto& l : p.layers) layers.push_back({{"w", to_json(l.w)}, {"b", to_json(l.b)}});
    particles.push_back({{"id", p.id}, {"layers", std::move(layers)}});
  }
  return {{"magic", kCheckpointMagic},
          {"version", kCheckpointVersion},
          {"architecture", to_json(e.arch)},
          {"gamma", e.gamma},
          {"norm_stats", {{"min", to_json(e.norm_stats.min)}, {"max", to_json(e.norm_stats.max)}}},
          {"train_meta", to_json(e.meta)},
          {"particles", std::move(particles)}};
}

inline Ensemble checkpoint_from_json(const json& j) {
  try {
    if (!j.is_object() || j.value("magic", std::string{}) != kCheckpointMagic) throw FormatError("checkpoint: bad magic");
    if (!j.contains("version") || !j.at("version").is_number_integer() || j.at("version").get<int>() != kCheckpointVersion) {
      throw FormatError("checkpoint: unsupported version");
    }
    Ensemble e;
    e.arch = architecture_from_json(j.at("architecture"));
    e.gamma = j.at("gamma").get<double>();
    e.norm_stats = {vector_from_json(j.at("norm_stats").at("min")), vector_from_json(j.at("norm_stats").at("max"))};
    e.meta = train_meta_from_json(j.at("train_meta"));
    for (const auto& pj : j.at("particles")) {
      ParamParticle p;
      p.id = pj.at("id").get<int>();
      const auto& layers = pj.at("layers");
      if (layers.size() != e.arch.num_layers()) throw FormatError("checkpoint: layer count mismatch");
      for (std::size_t l = 0; l < layers.size(); ++l) {
        const auto in = static_cast<Eigen::Index>(e.arch.widths[l]);
        const auto out = static_cast<Eigen::Index>(e.arch.widths[l + 1]);
        Layer layer{matrix_from_json(layers[l].at("w"), out, in), vector_from_json(layers[l].at("b"))};
        if (layer.b.size() != out) throw FormatError("checkpoint: bias length mismatch");
        p.layers.push_back(std::move(layer));
      }
      e.particles.push_back(std::move(p));
    }
    e.validate();
    return e;
  } catch (const json::exception& err) {
    throw FormatError(std::string("checkpoint: ") + err.what());
  }
}

inline void save_checkpoint(const Ensemble& e, const std::string& path) {
  detail::write_file(path, checkpoint_to_json(e).dump());
}

inline Ensemble load_checkpoint(const std::string& path) {
  const auto text = detail::read_file(path);
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& err) {
    throw FormatError(std::string("checkpoint: ") + err.what());
  }
  return checkpoint_from_json(j);
}

}  // namespace advmb
