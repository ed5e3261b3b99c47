#include "advmb/advmb.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

using namespace advmb;
namespace fs = std::filesystem;

namespace {

void write_json(const std::string& path, const json& j) { detail::write_file(path, j.dump(2) + "\n"); }

std::vector<std::size_t> parse_widths(const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    std::size_t v = 0;
    const auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (ec != std::errc{} || ptr != tok.data() + tok.size() || v == 0) throw ConfigError("--arch: bad width '" + tok + "'");
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError("--arch: expected comma-separated hidden widths");
  return out;
}

std::uint8_t parse_byte(const std::string& text) {
  std::size_t used = 0;
  unsigned long v = 0;
  try {
    v = std::stoul(text, &used, 0);
  } catch (const std::exception&) {
    throw ConfigError("--byte: not a number: " + text);
  }
  if (used != text.size() || v > 255) throw ConfigError("--byte: expected a value in 0..255, got " + text);
  return static_cast<std::uint8_t>(v);
}

std::vector<double> parse_budgets(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      std::size_t used = 0;
      const double v = std::stod(tok, &used);
      if (used != tok.size() || !(v >= 0.0)) throw ConfigError("");
      out.push_back(v);
    } catch (const std::exception&) {
      throw ConfigError("--budgets: bad value '" + tok + "'");
    }
  }
  return out;
}

/// Loads raw data and maps it into the model's input space.
Dataset model_space(const Ensemble& e, const std::string& path) {
  const Dataset raw = load_dataset(path);
  require_dim(raw.feature_dim(), e.arch.input_dim(), "data vs model");
  return apply_normalize(raw, e.norm_stats);
}

struct AttackFlags {
  std::string family = "eot_pgd";
  double epsilon = 0.1;
  double alpha = 0.0;
  int steps = 10;

  void add_to(CLI::App* cmd) {
    cmd->add_option("--attack", family, "Attack family: fgsm, pgd, eot_pgd")->check(CLI::IsMember({"fgsm", "pgd", "eot_pgd", "none"}));
    cmd->add_option("--epsilon", epsilon, "L-inf budget")->check(CLI::NonNegativeNumber);
    cmd->add_option("--alpha", alpha, "Step size (0 = 2.5*epsilon/steps)")->check(CLI::NonNegativeNumber);
    cmd->add_option("--steps", steps, "Attack iterations")->check(CLI::PositiveNumber);
  }

  AttackConfig config() const {
    AttackConfig c;
    c.family = attack_family_from_string(family);
    c.epsilon_max = epsilon;
    c.alpha = alpha;
    c.steps = steps;
    return c;
  }
};

// ---------------------------------------------------------------------------

struct GenSynthArgs {
  SynthConfig cfg;
  std::string out;
};

int run_gen_synth(const GenSynthArgs& a) {
  const Dataset d = synth_gen(a.cfg);
  save_dataset(d, a.out);
  write_json(a.out + ".config.json", {{"command", "gen-synth"},
                                      {"samples", a.cfg.n_samples},
                                      {"features", a.cfg.n_features},
                                      {"separation", a.cfg.class_separation},
                                      {"sparsity", a.cfg.sparsity},
                                      {"seed", a.cfg.seed},
                                      {"out", a.out}});
  std::cout << "wrote " << d.size() << " x " << d.feature_dim() << " to " << a.out << "\n";
  return 0;
}

struct GenToyArgs {
  toy::ToyCorpusConfig cfg;
  std::string out_dir;
};

int run_gen_toy(const GenToyArgs& a) {
  const auto corpus = toy::make_toy_corpus(a.cfg);
  fs::create_directories(a.out_dir);
  std::ostringstream labels;
  labels << "file,label\n";
  for (std::size_t i = 0; i < corpus.programs.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "prog_%05zu.tprg", i);
    toy::save_program(corpus.programs[i], (fs::path(a.out_dir) / name).string());
    labels << name << "," << int(corpus.labels[i]) << "\n";
  }
  detail::write_file((fs::path(a.out_dir) / "labels.csv").string(), labels.str());
  save_dataset(toy::phi_dataset(corpus.programs, corpus.labels), (fs::path(a.out_dir) / "features.bin").string());
  write_json((fs::path(a.out_dir) / "config.json").string(), {{"command", "gen-toy"},
                                                             {"programs", a.cfg.n_programs},
                                                             {"min_size", a.cfg.min_size},
                                                             {"max_size", a.cfg.max_size},
                                                             {"malware_fraction", a.cfg.malware_fraction},
                                                             {"seed", a.cfg.seed}});
  std::cout << "wrote " << corpus.programs.size() << " programs to " << a.out_dir << "\n";
  return 0;
}

struct TrainArgs {
  std::string train_path, val_path, out;
  TrainConfig cfg;
  std::string optimizer = "adam";
  std::string arch = "512,512,128";
  std::string activation = "elu";
  bool no_layer_norm = false;
  bool no_normalize = false;
  bool adv = false;
  AttackFlags attack;
};

int run_train(TrainArgs a) {
  const Dataset raw = load_dataset(a.train_path);
  auto widths = parse_widths(a.arch);
  widths.insert(widths.begin(), raw.feature_dim());
  widths.push_back(1);
  const auto arch = Architecture::mlp(widths, activation_from_string(a.activation), !a.no_layer_norm);

  NormStats stats = NormStats::identity(raw.feature_dim());
  Dataset train_d = raw;
  if (!a.no_normalize) std::tie(train_d, stats) = fit_normalize(raw);
  Dataset val_d;
  if (!a.val_path.empty()) val_d = apply_normalize(load_dataset(a.val_path), stats);

  a.cfg.optimizer = a.optimizer == "sgd" ? Optimizer::sgd : Optimizer::adam;
  if (a.adv) a.cfg.adv = a.attack.config();

  const json resolved = {{"command", "train"},
                         {"train", a.train_path},
                         {"val", a.val_path},
                         {"out", a.out},
                         {"architecture", to_json(arch)},
                         {"normalize", !a.no_normalize},
                         {"particles", a.cfg.n_particles},
                         {"gamma", a.cfg.gamma},
                         {"lr", a.cfg.learning_rate},
                         {"epochs", a.cfg.epochs},
                         {"batch_size", a.cfg.batch_size},
                         {"seed", a.cfg.seed},
                         {"optimizer", a.optimizer},
                         {"weight_decay", a.cfg.weight_decay},
                         {"adv", a.cfg.adv ? to_json(*a.cfg.adv) : json(nullptr)}};
  write_json(a.out + ".config.json", resolved);

  const auto t0 = std::chrono::steady_clock::now();
  const Ensemble e = train(train_d, val_d, a.cfg, arch, stats, [](int epoch, double loss) {
    std::cerr << "epoch " << epoch << " loss " << loss << "\n";
  });
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  save_checkpoint(e, a.out);

  json metrics = {{"epoch_losses", e.meta.epoch_losses}, {"train_seconds", seconds}};
  if (val_d.size() > 0 && val_d.count_malware() > 0 && val_d.count_malware() < val_d.size()) {
    const auto aucs = ensemble_vs_particles(e, val_d);
    metrics["val_auc"] = aucs.ensemble;
    metrics["val_particle_auc"] = aucs.particles;
  }
  write_json(a.out + ".metrics.json", metrics);
  std::cout << "wrote " << a.out << "\n";
  return 0;
}

struct EvalArgs {
  std::string model, data, out, roc_path;
  std::string budgets = "0,0.03,0.05,0.1,0.2,0.3";
  bool transfer = false;
  AttackFlags attack;
};

int run_eval(const EvalArgs& a) {
  const Ensemble e = load_checkpoint(a.model);
  const Dataset d = model_space(e, a.data);
  const Vector p = posterior_predict_batch(e, d.features);
  const auto curve = roc(std::span<const double>(p.data(), static_cast<std::size_t>(p.size())), d.labels);
  if (!a.roc_path.empty()) detail::write_file(a.roc_path, roc_to_csv(curve));

  const auto budgets = parse_budgets(a.budgets);
  AttackConfig base = a.attack.config();
  json report = {{"model", a.model},
                 {"data", a.data},
                 {"auc", curve.auc},
                 {"tpr_at_fpr_0.001", tpr_at_fpr(curve, 1e-3)},
                 {"tpr_at_fpr_0.01", tpr_at_fpr(curve, 1e-2)},
                 {"attack", to_json(base)}};
  const auto aucs = ensemble_vs_particles(e, d);
  report["particle_auc"] = aucs.particles;
  if (a.transfer) {
    const auto t = transferability(e, d, budgets, base, a.model);
    report["tables"] = {to_json(t.pgd), to_json(t.fgsm)};
  } else {
    report["tables"] = {to_json(robustness_sweep(e, d, budgets, base.family, base, a.model))};
  }
  if (a.out.empty()) {
    std::cout << report.dump(2) << "\n";
  } else {
    write_json(a.out, report);
    write_json(a.out + ".config.json", {{"command", "eval"},
                                        {"model", a.model},
                                        {"data", a.data},
                                        {"budgets", budgets},
                                        {"transfer", a.transfer},
                                        {"roc", a.roc_path},
                                        {"attack", to_json(base)}});
    std::cout << "auc " << curve.auc << ", wrote " << a.out << "\n";
  }
  return 0;
}

struct AttackArgs {
  std::string model, data, out;
  bool malware_only = false;
  AttackFlags attack;
};

int run_attack(const AttackArgs& a) {
  const Ensemble e = load_checkpoint(a.model);
  const Dataset d = model_space(e, a.data);
  AttackConfig cfg = a.attack.config();
  cfg.target_malware_only = a.malware_only;
  const auto [adv, result] = attack_dataset(e, d, cfg);
  const std::size_t violations = count_violations(d.features, adv.features, cfg);
  if (violations > 0) throw ConstraintError("attack produced " + std::to_string(violations) + " infeasible rows");
  // Output stays in model input space.
  save_dataset(adv, a.out);
  const auto successes = std::count(result.success_mask.begin(), result.success_mask.end(), true);
  write_json(a.out + ".config.json", {{"command", "attack"},
                                      {"model", a.model},
                                      {"data", a.data},
                                      {"malware_only", a.malware_only},
                                      {"attack", to_json(cfg)},
                                      {"misclassified", successes},
                                      {"rows", d.size()},
                                      {"max_linf", result.linf_used.size() ? result.linf_used.maxCoeff() : 0.0}});
  std::cout << "misclassified " << successes << " / " << d.size() << ", wrote " << a.out << "\n";
  return 0;
}

struct RiskArgs {
  std::string model, data, out;
  std::size_t batch = 0;
  AttackFlags attack;
};

int run_riskgap(const RiskArgs& a) {
  const Ensemble e = load_checkpoint(a.model);
  const Dataset d = model_space(e, a.data);
  const AttackConfig cfg = a.attack.config();
  const std::size_t batch = a.batch == 0 ? d.size() : a.batch;
  json batches = json::array();
  bool all_hold = true;
  Dataset d_adv_all = d;
  for (std::size_t start = 0; start < d.size(); start += batch) {
    std::vector<std::size_t> rows(std::min(batch, d.size() - start));
    std::iota(rows.begin(), rows.end(), start);
    const Dataset part = gather_rows(d, rows);
    const auto [r_adv, adv] = adversarial_risk(e, part, cfg);
    d_adv_all.features.middleRows(static_cast<Eigen::Index>(start), adv.features.rows()) = adv.features;
    const auto rep = risk_bound(e, part, adv);
    all_hold = all_hold && rep.holds;
    batches.push_back(to_json(rep));
  }
  json report = to_json(risk_bound(e, d, d_adv_all));
  report["holds"] = report["holds"].get<bool>() && all_hold;
  report["batches"] = std::move(batches);
  report["attack"] = to_json(cfg);
  const std::string text = report.dump(2) + "\n";
  if (a.out.empty()) {
    std::cout << text;
  } else {
    detail::write_file(a.out, text);
    write_json(a.out + ".config.json",
               {{"command", "riskgap"}, {"model", a.model}, {"data", a.data}, {"batch", batch}, {"attack", to_json(cfg)}});
    std::cout << "holds " << (report["holds"].get<bool>() ? "true" : "false") << ", wrote " << a.out << "\n";
  }
  if (!report["holds"].get<bool>()) throw NumericError("risk bound violated");
  return 0;
}

struct Lemma1Args {
  std::string model, programs, out;
  std::string kind = "pad";
  std::string byte = "0xA9";
  std::size_t pad_bytes = 1000;
  std::size_t budget = 1000;
  std::size_t step = 250;
  double upsilon = -1.0;
};

int run_lemma1(const Lemma1Args& a) {
  toy::Lemma1Config cfg;
  cfg.kind = a.kind == "greedy" ? toy::TransformKind::greedy : toy::TransformKind::pad;
  cfg.pad_bytes = a.pad_bytes;
  cfg.byte_val = parse_byte(a.byte);
  cfg.greedy_budget = a.budget;
  cfg.greedy_step = a.step;
  const Ensemble e = load_checkpoint(a.model);
  require_dim(e.arch.input_dim(), toy::kFeatureDim, "model vs toy features");

  std::vector<toy::ToyProgram> malware;
  {
    std::istringstream in(detail::read_file((fs::path(a.programs) / "labels.csv").string()));
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto comma = line.rfind(',');
      if (comma == std::string::npos) throw FormatError("labels.csv: bad line '" + line + "'");
      if (line.substr(comma + 1) == "1") malware.push_back(toy::load_program((fs::path(a.programs) / line.substr(0, comma)).string()));
    }
  }
  if (malware.empty()) throw ValueError("lemma1: no malware programs in " + a.programs);

  cfg.upsilon_eps = a.upsilon >= 0.0 ? a.upsilon : toy::analytic_bound(malware, cfg);
  const auto rep = toy::lemma1_check(e, malware, cfg);
  const json report = {{"programs", rep.programs},
                       {"kind", a.kind},
                       {"pad_bytes", cfg.pad_bytes},
                       {"byte", int(cfg.byte_val)},
                       {"upsilon_eps", rep.upsilon_eps},
                       {"max_linf", rep.max_linf},
                       {"omega_invalid", rep.omega_invalid},
                       {"detected_clean", rep.detected_clean},
                       {"detected_after", rep.detected_after},
                       {"detection_rate_after", rep.detection_rate_after()},
                       {"evasions", rep.evasions},
                       {"violations", rep.violations}};
  if (a.out.empty()) {
    std::cout << report.dump(2) << "\n";
  } else {
    write_json(a.out, report);
    std::cout << "violations " << rep.violations << ", wrote " << a.out << "\n";
  }
  if (rep.violations > 0) throw ConstraintError("lemma1: " + std::to_string(rep.violations) + " subset violations");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adversarially trained Bayesian malware detector toolkit"};
  app.require_subcommand(1);

  GenSynthArgs gs;
  auto* gen_synth = app.add_subcommand("gen-synth", "Generate a synthetic feature dataset");
  gen_synth->add_option("--samples", gs.cfg.n_samples)->check(CLI::PositiveNumber);
  gen_synth->add_option("--features", gs.cfg.n_features)->check(CLI::PositiveNumber);
  gen_synth->add_option("--separation", gs.cfg.class_separation)->check(CLI::NonNegativeNumber);
  gen_synth->add_option("--sparsity", gs.cfg.sparsity)->check(CLI::Range(0.0, 1.0));
  gen_synth->add_option("--seed", gs.cfg.seed);
  gen_synth->add_option("--out", gs.out, "Output .bin or .csv")->required();

  GenToyArgs gt;
  auto* gen_toy = app.add_subcommand("gen-toy", "Generate a toy program corpus");
  gen_toy->add_option("--programs", gt.cfg.n_programs)->check(CLI::PositiveNumber);
  gen_toy->add_option("--min-size", gt.cfg.min_size)->check(CLI::PositiveNumber);
  gen_toy->add_option("--max-size", gt.cfg.max_size)->check(CLI::PositiveNumber);
  gen_toy->add_option("--malware-fraction", gt.cfg.malware_fraction)->check(CLI::Range(0.0, 1.0));
  gen_toy->add_option("--seed", gt.cfg.seed);
  gen_toy->add_option("--out-dir", gt.out_dir)->required();

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train an SVGD particle ensemble");
  train_cmd->add_option("--train", tr.train_path, "Training data")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--val", tr.val_path, "Validation data")->check(CLI::ExistingFile);
  train_cmd->add_option("--out", tr.out, "Checkpoint path")->required();
  train_cmd->add_flag("--adv", tr.adv, "Train on adversarial examples");
  train_cmd->add_option("--particles", tr.cfg.n_particles)->check(CLI::PositiveNumber);
  train_cmd->add_option("--gamma", tr.cfg.gamma)->check(CLI::NonNegativeNumber);
  train_cmd->add_option("--lr", tr.cfg.learning_rate)->check(CLI::PositiveNumber);
  train_cmd->add_option("--epochs", tr.cfg.epochs)->check(CLI::NonNegativeNumber);
  train_cmd->add_option("--batch-size", tr.cfg.batch_size)->check(CLI::PositiveNumber);
  train_cmd->add_option("--seed", tr.cfg.seed);
  train_cmd->add_option("--weight-decay", tr.cfg.weight_decay)->check(CLI::NonNegativeNumber);
  train_cmd->add_option("--optimizer", tr.optimizer)->check(CLI::IsMember({"sgd", "adam"}));
  train_cmd->add_option("--arch", tr.arch, "Hidden widths, e.g. 512,512,128");
  train_cmd->add_option("--activation", tr.activation)->check(CLI::IsMember({"elu", "relu"}));
  train_cmd->add_flag("--no-layer-norm", tr.no_layer_norm);
  train_cmd->add_flag("--no-normalize", tr.no_normalize, "Use features as given (already in [0,1])");
  tr.attack.add_to(train_cmd);

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "ROC, AUC and robustness sweeps");
  eval_cmd->add_option("--model", ev.model)->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--data", ev.data)->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--out", ev.out, "Report JSON (stdout if omitted)");
  eval_cmd->add_option("--roc", ev.roc_path, "Write ROC curve CSV");
  eval_cmd->add_option("--budgets", ev.budgets, "Comma-separated epsilons");
  eval_cmd->add_flag("--transfer", ev.transfer, "Sweep both eot_pgd and fgsm");
  ev.attack.add_to(eval_cmd);

  AttackArgs at;
  auto* attack_cmd = app.add_subcommand("attack", "Write an attacked copy of a dataset");
  attack_cmd->add_option("--model", at.model)->required()->check(CLI::ExistingFile);
  attack_cmd->add_option("--data", at.data)->required()->check(CLI::ExistingFile);
  attack_cmd->add_option("--out", at.out)->required();
  attack_cmd->add_flag("--malware-only", at.malware_only);
  at.attack.add_to(attack_cmd);

  RiskArgs rk;
  auto* risk_cmd = app.add_subcommand("riskgap", "Check the adversarial risk-gap bound");
  risk_cmd->add_option("--model", rk.model)->required()->check(CLI::ExistingFile);
  risk_cmd->add_option("--data", rk.data)->required()->check(CLI::ExistingFile);
  risk_cmd->add_option("--out", rk.out, "Report JSON (stdout if omitted)");
  risk_cmd->add_option("--batch-size", rk.batch, "Check the bound per batch (0 = whole set)");
  rk.attack.add_to(risk_cmd);

  Lemma1Args lm;
  auto* lemma_cmd = app.add_subcommand("lemma1", "Problem-space to feature-space subset check on toy programs");
  lemma_cmd->add_option("--model", lm.model)->required()->check(CLI::ExistingFile);
  lemma_cmd->add_option("--programs", lm.programs, "Directory from gen-toy")->required()->check(CLI::ExistingDirectory);
  lemma_cmd->add_option("--out", lm.out, "Report JSON (stdout if omitted)");
  lemma_cmd->add_option("--kind", lm.kind)->check(CLI::IsMember({"pad", "greedy"}));
  lemma_cmd->add_option("--pad-bytes", lm.pad_bytes);
  lemma_cmd->add_option("--byte", lm.byte, "Padding byte, decimal or 0x..");
  lemma_cmd->add_option("--budget", lm.budget, "Greedy byte budget");
  lemma_cmd->add_option("--step", lm.step, "Greedy bytes per move")->check(CLI::PositiveNumber);
  lemma_cmd->add_option("--upsilon", lm.upsilon, "Feature-space radius (default: analytic bound)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    if (*gen_synth) return run_gen_synth(gs);
    if (*gen_toy) return run_gen_toy(gt);
    if (*train_cmd) return run_train(tr);
    if (*eval_cmd) return run_eval(ev);
    if (*attack_cmd) return run_attack(at);
    if (*risk_cmd) return run_riskgap(rk);
    if (*lemma_cmd) return run_lemma1(lm);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e);
  } catch (const json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
