#include "test_util.hpp"

#include <gtest/gtest.h>

#include <fstream>

using namespace advmb;

namespace {

Vector vec(std::initializer_list<double> xs) {
  Vector v(static_cast<Eigen::Index>(xs.size()));
  Eigen::Index i = 0;
  for (double x : xs) v[i++] = x;
  return v;
}

TrainConfig small_cfg(std::size_t particles, std::uint64_t seed) {
  TrainConfig tc;
  tc.n_particles = particles;
  tc.epochs = 3;
  tc.batch_size = 64;
  tc.seed = seed;
  return tc;
}

}  // namespace

TEST(Kernel, RbfExamples) {
  EXPECT_EQ(rbf_kernel(vec({1, 2}), vec({1, 2}), 0.7), 1.0);
  // ||a-b||^2 = 2h^2 gives exp(-1).
  EXPECT_DOUBLE_EQ(rbf_kernel(vec({0, 0}), vec({1, 1}), 1.0), std::exp(-1.0));
  EXPECT_DOUBLE_EQ(rbf_kernel(vec({0.3}), vec({-1.2}), 0.9), rbf_kernel(vec({-1.2}), vec({0.3}), 0.9));
  EXPECT_THROW(rbf_kernel(vec({0}), vec({1}), 0.0), ValueError);
  EXPECT_THROW(rbf_kernel(vec({0}), vec({1}), -1.0), ValueError);
}

TEST(Kernel, MedianBandwidth) {
  const std::vector<Vector> three{vec({0}), vec({1}), vec({3})};
  EXPECT_DOUBLE_EQ(median_bandwidth(std::span<const Vector>(three)), 2.0);
  const std::vector<Vector> same{vec({4, 4}), vec({4, 4}), vec({4, 4})};
  EXPECT_EQ(median_bandwidth(std::span<const Vector>(same)), 1.0);
  const std::vector<Vector> one{vec({5})};
  EXPECT_EQ(median_bandwidth(std::span<const Vector>(one)), 1.0);
}

TEST(Kernel, MedianBandwidthMatchesBruteForce) {
  std::mt19937_64 rng(3);
  for (std::size_t n = 2; n < 9; ++n) {
    std::vector<Vector> theta;
    for (std::size_t i = 0; i < n; ++i) theta.push_back(advmb::testing::random_matrix(5, 1, rng, -2, 2));
    std::vector<double> d;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) d.push_back((theta[i] - theta[j]).norm());
    std::sort(d.begin(), d.end());
    const double med = d.size() % 2 ? d[d.size() / 2] : 0.5 * (d[d.size() / 2 - 1] + d[d.size() / 2]);
    EXPECT_NEAR(median_bandwidth(std::span<const Vector>(theta)), med, 1e-12);
  }
}

TEST(Direction, SingleParticleIsPlainGradient) {
  const std::vector<Vector> theta{vec({0.3, -1.0, 2.0})};
  const std::vector<Vector> g{vec({0.1, 0.25, -7.5})};
  for (double gamma : {0.0, 1.0, 10.0}) {
    const auto phi = svgd_direction(std::span<const Vector>(theta), std::span<const Vector>(g), gamma);
    EXPECT_EQ(phi[0], g[0]);
  }
}

// The median bandwidth always puts the median pair at distance h, so
// vanishing cross-kernels need a fixed bandwidth.
TEST(Direction, DistantParticlesDecouple) {
  std::vector<Vector> theta, g;
  std::mt19937_64 rng(2);
  for (int c = 0; c < 5; ++c) {
    theta.push_back(vec({10.0 * c, -3.0 * c}));
    g.push_back(advmb::testing::random_matrix(2, 1, rng, -1, 1));
  }
  const double h = 1.0;
  for (std::size_t i = 0; i < theta.size(); ++i)
    for (std::size_t j = 0; j < theta.size(); ++j) {
      if (i != j) {
        ASSERT_LT(rbf_kernel(theta[i], theta[j], h), 1e-9);
      }
    }
  const auto phi = svgd_direction(std::span<const Vector>(theta), std::span<const Vector>(g), 0.0, h);
  for (std::size_t i = 0; i < theta.size(); ++i) EXPECT_LT((phi[i] - g[i]).norm(), 1e-6);
  EXPECT_THROW(svgd_direction(std::span<const Vector>(theta), std::span<const Vector>(g), 0.0, 0.0), ValueError);
}

TEST(Direction, IdenticalParticlesGetZeroRepulsion) {
  const std::vector<Vector> theta(4, vec({1, 2, 3}));
  const std::vector<Vector> g(4, Vector::Zero(3));
  const auto phi = svgd_direction(std::span<const Vector>(theta), std::span<const Vector>(g), 1.0);
  for (const auto& p : phi) EXPECT_EQ(p.norm(), 0.0);
}

TEST(Direction, RepulsionSeparatesParticles) {
  const Vector c = vec({0.5, -0.5});
  const Vector eta = vec({0.01, 0.02});
  const std::vector<Vector> theta{c + eta, c - eta};
  const std::vector<Vector> g(2, Vector::Zero(2));
  const auto phi = svgd_direction(std::span<const Vector>(theta), std::span<const Vector>(g), 1.0);
  // Update is theta - lr*phi; the particles must move apart.
  const double before = (theta[0] - theta[1]).norm();
  const double after = ((theta[0] - 0.1 * phi[0]) - (theta[1] - 0.1 * phi[1])).norm();
  EXPECT_GT(after, before);
}

TEST(Direction, MatchesNaiveFormula) {
  std::mt19937_64 rng(8);
  const std::size_t n = 6;
  std::vector<Vector> theta, g;
  for (std::size_t i = 0; i < n; ++i) {
    theta.push_back(advmb::testing::random_matrix(4, 1, rng, -1, 1));
    g.push_back(advmb::testing::random_matrix(4, 1, rng, -1, 1));
  }
  const double gamma = 0.7;
  const double h = median_bandwidth(std::span<const Vector>(theta));
  const auto phi = svgd_direction(std::span<const Vector>(theta), std::span<const Vector>(g), gamma);
  for (std::size_t i = 0; i < n; ++i) {
    Vector ref = Vector::Zero(4);
    for (std::size_t j = 0; j < n; ++j) {
      const double k = std::exp(-(theta[j] - theta[i]).squaredNorm() / (2 * h * h));
      ref += k * g[j] - (gamma / n) * k * (theta[i] - theta[j]) / (h * h);
    }
    EXPECT_LT((phi[i] - ref).norm(), 1e-12);
  }
}

TEST(Train, SingleParticleSgdIsPlainSgd) {
  const auto s = advmb::testing::synth_split(600, 8, 1);
  const auto arch = Architecture::mlp({8, 6, 1});
  TrainConfig tc = small_cfg(1, 5);
  tc.gamma = 0.0;
  tc.optimizer = Optimizer::sgd;
  tc.learning_rate = 0.05;
  const auto e = train(s.train, s.val, tc, arch, s.stats);

  auto p = init_params(arch, particle_seed(tc.seed, 0));
  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    const auto order = epoch_order(s.train.size(), tc.seed, epoch);
    for (std::size_t start = 0; start < order.size(); start += tc.batch_size) {
      const std::size_t len = std::min(tc.batch_size, order.size() - start);
      const auto batch = gather_rows(s.train, std::span<const std::size_t>(order).subspan(start, len));
      const auto bw = backward(arch, p, batch.features, batch.labels_as_vector());
      p.assign_flat(p.flatten() - tc.learning_rate * bw.grad.flatten());
    }
  }
  EXPECT_EQ(e.particles[0].flatten(), p.flatten());
}

TEST(Train, LossDecreases) {
  const auto s = advmb::testing::synth_split(2000, 16, 2);
  TrainConfig tc = small_cfg(3, 2);
  tc.epochs = 6;
  const auto e = train(s.train, s.val, tc, Architecture::mlp({16, 16, 1}), s.stats);
  ASSERT_EQ(e.meta.epoch_losses.size(), 6u);
  EXPECT_LT(e.meta.epoch_losses.back(), e.meta.epoch_losses.front());
}

TEST(Train, ZeroBudgetAdversarialEqualsClean) {
  const auto s = advmb::testing::synth_split(800, 8, 3);
  const auto arch = Architecture::mlp({8, 8, 1});
  TrainConfig tc = small_cfg(2, 3);
  const auto clean = train(s.train, s.val, tc, arch, s.stats);
  AttackConfig adv;
  adv.epsilon_max = 0.0;
  tc.adv = adv;
  const auto robust = train(s.train, s.val, tc, arch, s.stats);
  for (std::size_t i = 0; i < 2; ++i) EXPECT_EQ(clean.particles[i].flatten(), robust.particles[i].flatten());
}

TEST(Train, Deterministic) {
  const auto s = advmb::testing::synth_split(800, 8, 4);
  const auto arch = Architecture::mlp({8, 8, 1});
  TrainConfig tc = small_cfg(3, 11);
  AttackConfig adv;
  adv.epsilon_max = 0.05;
  adv.steps = 3;
  tc.adv = adv;
  const auto a = train(s.train, s.val, tc, arch, s.stats);
  const auto b = train(s.train, s.val, tc, arch, s.stats);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(a.particles[i].flatten(), b.particles[i].flatten());
  tc.seed = 12;
  const auto c = train(s.train, s.val, tc, arch, s.stats);
  EXPECT_NE(a.particles[0].flatten(), c.particles[0].flatten());
}

TEST(Train, InvalidConfig) {
  const auto s = advmb::testing::synth_split(200, 4, 1);
  const auto arch = Architecture::mlp({4, 1});
  TrainConfig tc = small_cfg(0, 1);
  EXPECT_THROW(train(s.train, s.val, tc, arch, s.stats), ConfigError);
  tc = small_cfg(1, 1);
  tc.learning_rate = -1;
  EXPECT_THROW(train(s.train, s.val, tc, arch, s.stats), ConfigError);
  tc = small_cfg(1, 1);
  EXPECT_THROW(train(s.train, s.val, tc, Architecture::mlp({5, 1}), s.stats), DimensionError);
}

TEST(Train, DivergenceReportsNumericError) {
  const auto s = advmb::testing::synth_split(400, 8, 1);
  TrainConfig tc = small_cfg(2, 1);
  tc.optimizer = Optimizer::sgd;
  tc.learning_rate = 1e300;
  EXPECT_THROW(train(s.train, s.val, tc, Architecture::mlp({8, 8, 1}), s.stats), NumericError);
}

TEST(Train, RepulsionIncreasesDiversity) {
  const auto s = advmb::testing::synth_split(1500, 8, 6);
  const auto arch = Architecture::mlp({8, 8, 1});
  TrainConfig tc = small_cfg(4, 6);
  tc.epochs = 5;
  tc.init_jitter = 0.01;
  tc.gamma = 0.0;
  const auto plain = train(s.train, s.val, tc, arch, s.stats);
  tc.gamma = 5.0;
  const auto repelled = train(s.train, s.val, tc, arch, s.stats);
  EXPECT_GT(mean_pairwise_distance(repelled), mean_pairwise_distance(plain));
}

TEST(Posterior, AveragesParticles) {
  auto e = advmb::testing::linear_ensemble(vec({0.0}), std::log(0.2 / 0.8));
  auto second = e.particles[0];
  second.layers[0].b[0] = std::log(0.8 / 0.2);
  e.particles.push_back(second);
  const Vector x = vec({0.5});
  EXPECT_NEAR(posterior_predict(e, x), 0.5, 1e-15);
}

TEST(Posterior, PermutationInvariant) {
  auto e = advmb::testing::random_ensemble(Architecture::mlp({5, 7, 1}), 5, 4);
  std::mt19937_64 rng(1);
  const Matrix x = advmb::testing::random_matrix(50, 5, rng);
  const Vector before = posterior_predict_batch(e, x);
  std::reverse(e.particles.begin(), e.particles.end());
  std::swap(e.particles[1], e.particles[3]);
  EXPECT_EQ(posterior_predict_batch(e, x), before);
}

TEST(Checkpoint, RoundTripIsExact) {
  const auto s = advmb::testing::synth_split(500, 8, 9);
  TrainConfig tc = small_cfg(3, 9);
  AttackConfig adv;
  adv.epsilon_max = 0.1;
  tc.adv = adv;
  const auto e = train(s.train, s.val, tc, Architecture::mlp({8, 6, 1}), s.stats);
  const auto path = advmb::testing::temp_path("ckpt.json");
  save_checkpoint(e, path);
  const auto back = load_checkpoint(path);
  ASSERT_EQ(back.particles.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(back.particles[i].flatten(), e.particles[i].flatten());
    EXPECT_EQ(back.particles[i].id, e.particles[i].id);
  }
  EXPECT_EQ(back.norm_stats.min, e.norm_stats.min);
  EXPECT_EQ(back.norm_stats.max, e.norm_stats.max);
  EXPECT_EQ(back.meta.epoch_losses, e.meta.epoch_losses);
  ASSERT_TRUE(back.meta.adv.has_value());
  EXPECT_EQ(back.meta.adv->epsilon_max, 0.1);
  EXPECT_EQ(back.gamma, e.gamma);
  EXPECT_EQ(checkpoint_to_json(e)["particles"].size(), 3u);
  const Matrix x = s.test.features;
  EXPECT_EQ(posterior_predict_batch(back, x), posterior_predict_batch(e, x));
}

TEST(Checkpoint, RejectsBadInput) {
  const auto e = advmb::testing::random_ensemble(Architecture::mlp({3, 2, 1}), 2, 1);
  auto j = checkpoint_to_json(e);
  j["version"] = 99;
  EXPECT_THROW(checkpoint_from_json(j), FormatError);
  j = checkpoint_to_json(e);
  j["magic"] = "NOPE";
  EXPECT_THROW(checkpoint_from_json(j), FormatError);
  const auto path = advmb::testing::temp_path("broken.json");
  std::ofstream(path) << "{ not json";
  EXPECT_THROW(load_checkpoint(path), FormatError);
  EXPECT_THROW(load_checkpoint(advmb::testing::temp_path("missing.json")), IoError);
}
