#include "test_util.hpp"

#include <gtest/gtest.h>

#include <sys/wait.h>

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace advmb;
namespace fs = std::filesystem;

namespace {

int run(const std::string& args) {
  const std::string cmd = std::string(ADVMB_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json read_json(const std::string& path) { return json::parse(slurp(path)); }

class CliTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = advmb::testing::temp_path("cli");
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    ASSERT_EQ(run("gen-synth --samples 2000 --features 12 --seed 3 --out " + p("train.bin")), 0);
    ASSERT_EQ(run("gen-synth --samples 600 --features 12 --seed 4 --out " + p("test.bin")), 0);
    ASSERT_EQ(run("train --train " + p("train.bin") + " --out " + p("model.json") +
                  " --arch 12 --particles 3 --epochs 4 --batch-size 128 --seed 2 --adv --steps 5"),
              0);
  }
  static std::string p(const std::string& name) { return (fs::path(dir_) / name).string(); }
  static std::string dir_;
};
std::string CliTest::dir_;

}  // namespace

TEST_F(CliTest, GenSynthIsDeterministic) {
  ASSERT_EQ(run("gen-synth --samples 500 --features 8 --seed 7 --out " + p("a.bin")), 0);
  ASSERT_EQ(run("gen-synth --samples 500 --features 8 --seed 7 --out " + p("b.bin")), 0);
  EXPECT_EQ(slurp(p("a.bin")), slurp(p("b.bin")));
  const auto d = load_dataset(p("a.bin"));
  EXPECT_EQ(d.size(), 500u);
  EXPECT_EQ(d.feature_dim(), 8u);
}

TEST_F(CliTest, BadArgumentsExitNonZero) {
  EXPECT_EQ(run("gen-synth --samples -5 --out " + p("x.bin")), 2);
  EXPECT_EQ(run("train --no-such-flag"), 2);
  EXPECT_EQ(run(""), 2);
  EXPECT_EQ(run("lemma1 --model " + p("model.json") + " --programs " + dir_ + " --byte 300"), 2);
  std::ofstream(p("junk.bin")) << "not a dataset";
  EXPECT_EQ(run("eval --model " + p("model.json") + " --data " + p("junk.bin")), 3);
  EXPECT_EQ(run("train --train " + p("train.bin") + " --out " + p("bad.json") + " --arch 0"), 2);
}

TEST_F(CliTest, TrainWritesResolvedConfig) {
  const auto cfg = read_json(p("model.json.config.json"));
  EXPECT_EQ(cfg["particles"], 3);
  EXPECT_EQ(cfg["epochs"], 4);
  EXPECT_EQ(cfg["adv"]["steps"], 5);
  EXPECT_EQ(cfg["architecture"]["widths"], json({12, 12, 1}));
  const auto metrics = read_json(p("model.json.metrics.json"));
  EXPECT_EQ(metrics["epoch_losses"].size(), 4u);
  EXPECT_EQ(load_checkpoint(p("model.json")).particles.size(), 3u);
}

TEST_F(CliTest, SingleParticleTrainingMatchesSgdReference) {
  ASSERT_EQ(run("train --train " + p("train.bin") + " --out " + p("sgd.json") +
                " --arch 6 --particles 1 --gamma 0 --optimizer sgd --lr 0.05 --epochs 2 --batch-size 100 --seed 9"),
            0);
  const auto e = load_checkpoint(p("sgd.json"));
  const auto [d, stats] = fit_normalize(load_dataset(p("train.bin")));
  const auto arch = Architecture::mlp({12, 6, 1});
  auto ref = init_params(arch, particle_seed(9, 0));
  for (int epoch = 0; epoch < 2; ++epoch) {
    const auto order = epoch_order(d.size(), 9, epoch);
    for (std::size_t start = 0; start < order.size(); start += 100) {
      const auto batch = gather_rows(d, std::span<const std::size_t>(order).subspan(start, std::min<std::size_t>(100, order.size() - start)));
      const auto bw = backward(arch, ref, batch.features, batch.labels_as_vector());
      ref.assign_flat(ref.flatten() - 0.05 * bw.grad.flatten());
    }
  }
  EXPECT_EQ(e.particles[0].flatten(), ref.flatten());
}

TEST_F(CliTest, ZeroBudgetAdversarialTrainingEqualsClean) {
  const std::string common = " --arch 6 --particles 2 --epochs 2 --batch-size 100 --seed 5 --train " + p("train.bin");
  ASSERT_EQ(run("train" + common + " --out " + p("clean.json")), 0);
  ASSERT_EQ(run("train" + common + " --adv --epsilon 0 --out " + p("adv0.json")), 0);
  const auto a = load_checkpoint(p("clean.json"));
  const auto b = load_checkpoint(p("adv0.json"));
  for (std::size_t i = 0; i < 2; ++i) EXPECT_EQ(a.particles[i].flatten(), b.particles[i].flatten());
}

TEST_F(CliTest, EvalRocIsMonotoneWithEndpoints) {
  ASSERT_EQ(run("eval --model " + p("model.json") + " --data " + p("test.bin") + " --roc " + p("roc.csv") + " --out " +
                p("eval.json") + " --transfer --steps 5"),
            0);
  std::istringstream in(slurp(p("roc.csv")));
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "fpr,tpr,threshold");
  std::vector<std::pair<double, double>> pts;
  while (std::getline(in, line)) {
    const auto c1 = line.find(','), c2 = line.find(',', c1 + 1);
    pts.emplace_back(std::stod(line.substr(0, c1)), std::stod(line.substr(c1 + 1, c2 - c1 - 1)));
  }
  ASSERT_GE(pts.size(), 2u);
  EXPECT_EQ(pts.front(), std::make_pair(0.0, 0.0));
  EXPECT_EQ(pts.back(), std::make_pair(1.0, 1.0));
  for (std::size_t k = 1; k < pts.size(); ++k) {
    EXPECT_GE(pts[k].first, pts[k - 1].first);
    EXPECT_GE(pts[k].second, pts[k - 1].second);
  }
  const auto report = read_json(p("eval.json"));
  ASSERT_EQ(report["tables"].size(), 2u);
  EXPECT_EQ(report["tables"][0]["rates"][0], report["tables"][1]["rates"][0]);
}

TEST_F(CliTest, AttackOutputRespectsBudget) {
  ASSERT_EQ(run("attack --model " + p("model.json") + " --data " + p("test.bin") + " --out " + p("adv.bin") +
                " --epsilon 0.05 --malware-only"),
            0);
  const auto e = load_checkpoint(p("model.json"));
  const auto clean = apply_normalize(load_dataset(p("test.bin")), e.norm_stats);
  const auto adv = load_dataset(p("adv.bin"));
  ASSERT_EQ(adv.size(), clean.size());
  // The file stores float32, so allow for its rounding.
  EXPECT_LE((adv.features - clean.features).cwiseAbs().maxCoeff(), 0.05 + 1e-6);
  for (std::size_t i = 0; i < clean.size(); ++i) {
    if (clean.labels[i] == 0) {
      EXPECT_LE((adv.features.row(static_cast<Eigen::Index>(i)) - clean.features.row(static_cast<Eigen::Index>(i))).cwiseAbs().maxCoeff(), 1e-6);
    }
  }
}

TEST_F(CliTest, RiskGapHolds) {
  ASSERT_EQ(run("riskgap --model " + p("model.json") + " --data " + p("test.bin") + " --out " + p("risk.json") +
                " --epsilon 0.1 --batch-size 128"),
            0);
  const auto r = read_json(p("risk.json"));
  EXPECT_TRUE(r["holds"].get<bool>());
  EXPECT_EQ(r["batches"].size(), 5u);
  for (const auto& b : r["batches"]) EXPECT_TRUE(b["holds"].get<bool>());
}

TEST_F(CliTest, Lemma1ReportsNoViolations) {
  const std::string toy = p("toy");
  ASSERT_EQ(run("gen-toy --programs 200 --seed 2 --out-dir " + toy), 0);
  EXPECT_TRUE(fs::exists(fs::path(toy) / "prog_00199.tprg"));
  ASSERT_EQ(run("train --train " + toy + "/features.bin --no-normalize --arch 16 --particles 2 --epochs 5 --batch-size 32 --out " +
                p("toy_model.json")),
            0);
  ASSERT_EQ(run("lemma1 --model " + p("toy_model.json") + " --programs " + toy + " --pad-bytes 1000 --byte 0xA9 --out " +
                p("lemma1.json")),
            0);
  const auto r = read_json(p("lemma1.json"));
  EXPECT_EQ(r["violations"], 0);
  EXPECT_EQ(r["programs"], 100);
  EXPECT_LE(r["max_linf"].get<double>(), r["upsilon_eps"].get<double>());
  // A zero radius turns every evasion into a violation, which the command reports as failure.
  const int code = run("lemma1 --model " + p("toy_model.json") + " --programs " + toy + " --upsilon 0 --out " + p("l0.json"));
  const auto r0 = read_json(p("l0.json"));
  EXPECT_EQ(r0["violations"], r0["evasions"]);
  EXPECT_EQ(code, r0["evasions"].get<int>() > 0 ? 3 : 0);
}
