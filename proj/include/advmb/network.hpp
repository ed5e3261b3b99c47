#pragma once

// Fully connected binary classifier with hand-written forward and backward
// passes. Hidden layers: affine -> optional layer norm (no affine params) ->
// activation. The output layer is affine and produces a single logit.

#include "advmb/core.hpp"

#include <random>
#include <string>
#include <vector>

namespace advmb {

enum class Activation { elu, relu };

inline std::string to_string(Activation a) { return a == Activation::elu ? "elu" : "relu"; }

inline Activation activation_from_string(const std::string& s) {
  if (s == "elu") return Activation::elu;
  if (s == "relu") return Activation::relu;
  throw ConfigError("unknown activation '" + s + "'");
}

inline constexpr double kLayerNormEps = 1e-5;

struct Architecture {
  std::vector<std::size_t> widths;  // input first, last == 1
  Activation activation = Activation::elu;
  std::vector<bool> layer_norm;     // one flag per hidden layer

  static Architecture mlp(std::vector<std::size_t> widths, Activation act = Activation::elu, bool ln = true) {
    Architecture a;
    const std::size_t hidden = widths.size() >= 2 ? widths.size() - 2 : 0;
    a.widths = std::move(widths);
    a.activation = act;
    a.layer_norm.assign(hidden, ln);
    a.validate();
    return a;
  }

  /// [input, 512, 512, 128, 1], ELU, layer norm on every hidden layer.
  static Architecture default_for(std::size_t input_dim) { return mlp({input_dim, 512, 512, 128, 1}); }

  std::size_t input_dim() const { return widths.front(); }
  std::size_t num_layers() const { return widths.size() - 1; }

  void validate() const {
    if (widths.size() < 2) throw ConfigError("architecture needs at least input and output widths");
    if (widths.back() != 1) throw ConfigError("architecture output width must be 1");
    for (auto w : widths) {
      if (w == 0) throw ConfigError("architecture widths must be positive");
    }
    if (layer_norm.size() != widths.size() - 2) throw ConfigError("architecture needs one layer_norm flag per hidden layer");
  }

  bool operator==(const Architecture&) const = default;
};

struct Layer {
  Matrix w;  // out x in
  Vector b;  // out

  bool operator==(const Layer& o) const { return w == o.w && b == o.b; }
};

/// One full set of network parameters. Also used as the shape of a parameter gradient.
struct ParamParticle {
  std::vector<Layer> layers;
  int id = 0;

  std::size_t num_params() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += static_cast<std::size_t>(l.w.size() + l.b.size());
    return n;
  }

  Vector flatten() const {
    Vector v(static_cast<Eigen::Index>(num_params()));
    Eigen::Index k = 0;
    for (const auto& l : layers) {
      v.segment(k, l.w.size()) = Eigen::Map<const Vector>(l.w.data(), l.w.size());
      k += l.w.size();
      v.segment(k, l.b.size()) = l.b;
      k += l.b.size();
    }
    return v;
  }

  void assign_flat(const Vector& v) {
    require_dim(static_cast<std::size_t>(v.size()), num_params(), "assign_flat");
    Eigen::Index k = 0;
    for (auto& l : layers) {
      Eigen::Map<Vector>(l.w.data(), l.w.size()) = v.segment(k, l.w.size());
      k += l.w.size();
      l.b = v.segment(k, l.b.size());
      k += l.b.size();
    }
  }

  bool all_finite() const {
    for (const auto& l : layers) {
      if (!l.w.allFinite() || !l.b.allFinite()) return false;
    }
    return true;
  }

  bool same_shape(const ParamParticle& o) const {
    if (layers.size() != o.layers.size()) return false;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (layers[i].w.rows() != o.layers[i].w.rows() || layers[i].w.cols() != o.layers[i].w.cols()) return false;
    }
    return true;
  }

  bool operator==(const ParamParticle& o) const { return layers == o.layers; }
};

using Gradients = ParamParticle;

inline ParamParticle zeros_like(const Architecture& arch) {
  ParamParticle p;
  for (std::size_t l = 0; l < arch.num_layers(); ++l) {
    const auto in = static_cast<Eigen::Index>(arch.widths[l]);
    const auto out = static_cast<Eigen::Index>(arch.widths[l + 1]);
    p.layers.push_back({Matrix::Zero(out, in), Vector::Zero(out)});
  }
  return p;
}

/// Weights ~ N(0, 1/fan_in), biases zero.
inline ParamParticle init_params(const Architecture& arch, std::uint64_t seed) {
  arch.validate();
  ParamParticle p = zeros_like(arch);
  std::mt19937_64 rng(seed);
  for (auto& l : p.layers) {
    std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(l.w.cols())));
    for (Eigen::Index i = 0; i < l.w.size(); ++i) l.w.data()[i] = dist(rng);
  }
  return p;
}

namespace detail {

inline double act(Activation a, double z) {
  if (a == Activation::relu) return z > 0.0 ? z : 0.0;
  return z > 0.0 ? z : std::expm1(z);
}

inline double act_grad(Activation a, double z) {
  if (a == Activation::relu) return z > 0.0 ? 1.0 : 0.0;
  return z > 0.0 ? 1.0 : std::exp(z);
}

/// Per-layer intermediates kept for the backward pass.
struct LayerCache {
  Matrix input;    // activations entering the layer
  Matrix pre;      // activation inputs (after layer norm when enabled)
  Vector inv_std;  // per row, only when layer norm is on
};

struct ForwardCache {
  std::vector<LayerCache> layers;
  Vector logits;
};

inline void check_input(const Architecture& arch, const ParamParticle& p, Eigen::Index cols) {
  require_dim(static_cast<std::size_t>(cols), arch.input_dim(), "network input");
  if (p.layers.size() != arch.num_layers()) throw DimensionError("particle does not match architecture");
}

inline ForwardCache forward_cached(const Architecture& arch, const ParamParticle& p, const Matrix& x) {
  check_input(arch, p, x.cols());
  ForwardCache cache;
  cache.layers.resize(p.layers.size());
  Matrix a = x;
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const auto& layer = p.layers[l];
    auto& lc = cache.layers[l];
    Matrix z = a * layer.w.transpose();
    z.rowwise() += layer.b.transpose();
    lc.input = std::move(a);
    if (l + 1 == p.layers.size()) {
      cache.logits = z.col(0);
      break;
    }
    if (arch.layer_norm[l]) {
      const auto width = static_cast<double>(z.cols());
      lc.inv_std.resize(z.rows());
      for (Eigen::Index r = 0; r < z.rows(); ++r) {
        const double mean = z.row(r).sum() / width;
        z.row(r).array() -= mean;
        const double var = z.row(r).squaredNorm() / width;
        lc.inv_std[r] = 1.0 / std::sqrt(var + kLayerNormEps);
        z.row(r) *= lc.inv_std[r];
      }
    }
    a = z.unaryExpr([&](double v) { return act(arch.activation, v); });
    lc.pre = std::move(z);
  }
  return cache;
}

/// Back-propagates dloss/dlogit through the cached pass. Fills `grads` when
/// non-null and returns dloss/dinput (one row per sample).
inline Matrix backward_cached(const Architecture& arch, const ParamParticle& p, const ForwardCache& cache,
                              const Vector& dlogit, ParamParticle* grads) {
  Matrix dz = dlogit;  // B x 1
  Matrix da;
  for (std::size_t l = p.layers.size(); l-- > 0;) {
    const auto& lc = cache.layers[l];
    if (grads != nullptr) {
      grads->layers[l].w.noalias() = dz.transpose() * lc.input;
      grads->layers[l].b = dz.colwise().sum().transpose();
    }
    da.noalias() = dz * p.layers[l].w;
    if (l == 0) break;
    const auto& prev = cache.layers[l - 1];
    Matrix du = da.array() * prev.pre.unaryExpr([&](double v) { return act_grad(arch.activation, v); }).array();
    if (arch.layer_norm[l - 1]) {
      const auto width = static_cast<double>(du.cols());
      for (Eigen::Index r = 0; r < du.rows(); ++r) {
        const double mean_du = du.row(r).sum() / width;
        const double mean_duu = du.row(r).dot(prev.pre.row(r)) / width;
        du.row(r) = prev.inv_std[r] * (du.row(r).array() - mean_du - prev.pre.row(r).array() * mean_duu).matrix();
      }
    }
    dz = std::move(du);
  }
  return da;
}

}  // namespace detail

/// Logits for every row of `x`.
inline Vector forward_batch(const Architecture& arch, const ParamParticle& p, const Matrix& x) {
  return detail::forward_cached(arch, p, x).logits;
}

/// f(x; theta) for a single feature vector.
inline double forward(const Architecture& arch, const ParamParticle& p, const Vector& x) {
  return forward_batch(arch, p, Matrix(x.transpose()))[0];
}

inline double predict_prob(const Architecture& arch, const ParamParticle& p, const Vector& x) {
  return clamp_prob(sigmoid(forward(arch, p, x)));
}

/// Binary cross-entropy on the clamped probability.
inline double bce_loss(double logit, double y) {
  const double p = clamp_prob(sigmoid(logit));
  return -(y * std::log(p) + (1.0 - y) * std::log(1.0 - p));
}

struct BackwardResult {
  Gradients grad;
  double mean_loss = 0.0;
};

/// Gradient of the mean BCE over the batch with respect to every parameter.
inline BackwardResult backward(const Architecture& arch, const ParamParticle& p, const Matrix& x, const Vector& y) {
  require_dim(static_cast<std::size_t>(y.size()), static_cast<std::size_t>(x.rows()), "backward labels");
  if (x.rows() == 0) throw DimensionError("backward: empty batch");
  const auto cache = detail::forward_cached(arch, p, x);
  const auto n = static_cast<double>(x.rows());
  Vector dlogit(x.rows());
  CompensatedSum loss;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    dlogit[i] = (sigmoid(cache.logits[i]) - y[i]) / n;
    loss.add(bce_loss(cache.logits[i], y[i]));
  }
  BackwardResult out{zeros_like(arch), loss.value() / n};
  detail::backward_cached(arch, p, cache, dlogit, &out.grad);
  if (!std::isfinite(out.mean_loss) || !out.grad.all_finite()) {
    throw NumericError("backward: non-finite loss or gradient");
  }
  return out;
}

/// Per-row input gradients of the per-row loss: row i holds d loss(x_i, y_i) / d x_i.
inline Matrix grad_input_batch(const Architecture& arch, const ParamParticle& p, const Matrix& x, const Vector& y) {
  require_dim(static_cast<std::size_t>(y.size()), static_cast<std::size_t>(x.rows()), "grad_input labels");
  const auto cache = detail::forward_cached(arch, p, x);
  Vector dlogit(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) dlogit[i] = sigmoid(cache.logits[i]) - y[i];
  Matrix g = detail::backward_cached(arch, p, cache, dlogit, nullptr);
  if (!g.allFinite()) throw NumericError("grad_input: non-finite gradient");
  return g;
}

inline Vector grad_input(const Architecture& arch, const ParamParticle& p, const Vector& x, double y) {
  Vector yy(1);
  yy[0] = y;
  return grad_input_batch(arch, p, Matrix(x.transpose()), yy).row(0).transpose();
}

}  // namespace advmb
