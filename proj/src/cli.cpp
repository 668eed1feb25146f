#include "advdiff/cli.hpp"

#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "advdiff/denoiser.hpp"
#include "advdiff/experiment.hpp"
#include "advdiff/image_io.hpp"

namespace advdiff {

namespace fs = std::filesystem;

namespace {

// Flags shared by every subcommand that reads an experiment config.
struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<std::size_t> parallelism;
  std::optional<std::string> sampler;
  std::optional<double> s, delta, t_star, tau;
  std::optional<std::size_t> k;
  std::optional<int> n_outer, t_steps;

  void add_to(CLI::App* cmd, bool with_attack_flags) {
    cmd->add_option("--config", config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
    cmd->add_option("--seed", seed, "Master seed (overrides the config)");
    cmd->add_option("--out", out, "Output directory");
    cmd->add_option("--parallelism", parallelism, "Images processed concurrently")->check(CLI::PositiveNumber);
    if (!with_attack_flags) return;
    cmd->add_option("--sampler", sampler, "ddpm-mean or ddim");
    cmd->add_option("--s", s, "Guidance scale");
    cmd->add_option("--delta", delta, "Gradient clip threshold");
    cmd->add_option("--t-star", t_star, "Re-noising depth as a fraction of T");
    cmd->add_option("--k", k, "Mask patch size");
    cmd->add_option("--tau", tau, "Ensemble weight temperature");
    cmd->add_option("--N", n_outer, "Outer iterations");
    cmd->add_option("--T", t_steps, "Diffusion steps");
  }

  ExperimentConfig resolve() const {
    ExperimentConfig cfg = ExperimentConfig::load(config);
    if (seed) cfg.seed = *seed;
    if (!out.empty()) cfg.output_dir = out;
    if (parallelism) cfg.parallelism = *parallelism;
    if (sampler) cfg.attack.sampler = parse_sampler(*sampler);
    if (s) cfg.attack.s = *s;
    if (delta) cfg.attack.delta = *delta;
    if (t_star) cfg.attack.t_star_frac = *t_star;
    if (k) cfg.attack.k = *k;
    if (tau) cfg.attack.tau = *tau;
    if (n_outer) cfg.attack.N = *n_outer;
    if (t_steps) cfg.attack.T = *t_steps;
    cfg.validate();
    return cfg;
  }
};

ToyDataset dataset_for(const ExperimentConfig& cfg) {
  return cfg.dataset_dir ? load_dataset(*cfg.dataset_dir) : gen_toy_dataset(cfg.dataset, cfg.dataset_seed);
}

void write_json(const nlohmann::json& j, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

// Single-pair attack or baseline: x_adv.png, x_adv.atns, report.json (+ trace.csv).
void run_pair(const ExperimentConfig& cfg, AttackMethod method, const std::string& image, const std::string& target,
              std::ostream& out) {
  const ToyDataset data = dataset_for(cfg);
  const ExperimentModels models = prepare_models(cfg, data);
  const std::pair<std::size_t, std::size_t> size{cfg.dataset.size, cfg.dataset.size};
  const Tensor<Real> x = load_image(image, size);
  const Tensor<Real> x_tar = load_image(target, size);
  const fs::path dir = cfg.output_dir;
  fs::create_directories(dir);

  Tensor<Real> x_adv;
  double elapsed = 0.0;
  if (method == AttackMethod::kAdvDiffVlm) {
    AttackConfig acfg = cfg.attack;
    acfg.seed = *cfg.seed;
    Rng rng(derive_seed(*cfg.seed, 0));
    const AttackResult res =
        advdiffvlm_attack(x, x_tar, models.ensemble, *models.classifier, *models.eps_source, models.sched, acfg, rng);
    x_adv = res.x_adv;
    elapsed = res.wall_time_s;
    std::ofstream trace(dir / "trace.csv", std::ios::binary);
    write_trace_csv(trace, res.trace);
  } else {
    const auto started = std::chrono::steady_clock::now();
    x_adv = mifgsm_ens_attack(x, x_tar, models.ensemble, cfg.baseline);
    elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  }
  save_image(x_adv, dir / "x_adv.png");
  save_image(x_adv, dir / "x_adv.atns");

  EvalReport report;
  EvalRecord r = evaluate_image(models, x, x_adv, x_tar, nearest_prototype(models.ensemble.victim, x, models.prototypes),
                                nearest_prototype(models.ensemble.victim, x_tar, models.prototypes));
  r.method = method_name(method);
  r.defense = "none";
  r.wall_time = elapsed;
  report.records.push_back(r);
  report.config = cfg.to_json();
  report.config["image"] = image;
  report.config["target"] = target;
  report.aggregate();
  write_json(report.to_json(), dir / "report.json");
  out << std::setprecision(6) << r.method << ": transfer_sim " << r.transfer_sim << " (floor " << r.transfer_floor
      << "), ensemble objective " << r.ensemble_objective << ", ssim " << r.ssim << ", linf " << r.linf << "\n"
      << "wrote " << (dir / "x_adv.png").string() << "\n";
}

void print_summary(const nlohmann::json& report, std::ostream& out) {
  std::size_t errors = 0;
  for (const auto& r : report.at("records"))
    if (r.contains("error")) ++errors;
  out << "records: " << report.at("records").size() << " (" << errors << " failed)\n";
  out << std::left << std::setw(44) << "aggregate" << std::right << std::setw(8) << "count" << std::setw(14) << "mean"
      << std::setw(14) << "std" << "\n";
  out << std::setprecision(6);
  for (const auto& [key, a] : report.at("aggregates").items())
    out << std::left << std::setw(44) << key << std::right << std::setw(8) << a.at("count").get<std::size_t>()
        << std::setw(14) << a.at("mean").get<double>() << std::setw(14) << a.at("std").get<double>() << "\n";
}

}  // namespace

int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Adversarial diffusion attacks on toy image encoders", "advdiff"};
  app.require_subcommand(1);

  Overrides attack_flags, baseline_flags, defend_flags, evaluate_flags;
  std::string image, target, defense_kind;

  auto* attack = app.add_subcommand("attack", "Run the guided diffusion attack on one image pair");
  attack_flags.add_to(attack, true);
  attack->add_option("--image", image, "Source image (PNG or ATNS)")->required();
  attack->add_option("--target", target, "Target image (PNG or ATNS)")->required();

  auto* baseline = app.add_subcommand("baseline", "Run the MI-FGSM ensemble baseline on one image pair");
  baseline_flags.add_to(baseline, false);
  baseline->add_option("--image", image, "Source image")->required();
  baseline->add_option("--target", target, "Target image")->required();

  auto* defend = app.add_subcommand("defend", "Apply purification defenses to an image");
  defend_flags.add_to(defend, false);
  defend->add_option("--image", image, "Image to purify")->required();
  defend->add_option("--defense", defense_kind, "bit_reduction, jpeg or diffpure (default: every configured defense)");

  auto* evaluate = app.add_subcommand("evaluate", "Run the batch experiment described by the config");
  evaluate_flags.add_to(evaluate, true);

  std::string report_dir;
  auto* report = app.add_subcommand("report", "Summarize an experiment report");
  report->add_option("--out", report_dir, "Directory containing report.json")->required();

  std::uint64_t seed = 0;
  std::size_t count = 64, size = kToySize;
  std::string out_dir, data_dir;
  auto* gen = app.add_subcommand("gen-data", "Generate the procedural toy dataset");
  gen->add_option("--seed", seed, "Seed")->required();
  gen->add_option("--count", count, "Number of images")->check(CLI::PositiveNumber);
  gen->add_option("--size", size, "Image side length")->check(CLI::Range(8, 256));
  gen->add_option("--out", out_dir, "Output directory")->required();

  int steps = 200, T = 50, epochs = 5;
  double lr = 0.0;
  std::optional<double> beta_start, beta_end;
  auto* train_den = app.add_subcommand("train-denoiser", "Train the convolutional noise predictor");
  train_den->add_option("--seed", seed, "Seed")->required();
  train_den->add_option("--data", data_dir, "Dataset directory (generated from --seed when omitted)");
  train_den->add_option("--count", count, "Images to generate when --data is omitted")->check(CLI::PositiveNumber);
  train_den->add_option("--steps", steps, "Optimizer steps")->check(CLI::NonNegativeNumber);
  train_den->add_option("--T", T, "Diffusion steps")->check(CLI::PositiveNumber);
  train_den->add_option("--beta-start", beta_start, "First beta (default 0.1 / T)");
  train_den->add_option("--beta-end", beta_end, "Last beta (default min(20 / T, 0.5))");
  train_den->add_option("--lr", lr, "Learning rate");
  train_den->add_option("--out", out_dir, "Model directory")->required();

  auto* train_cls = app.add_subcommand("train-classifier", "Train the GradCAM classifier");
  train_cls->add_option("--seed", seed, "Seed")->required();
  train_cls->add_option("--data", data_dir, "Dataset directory (generated from --seed when omitted)");
  train_cls->add_option("--count", count, "Images to generate when --data is omitted")->check(CLI::PositiveNumber);
  train_cls->add_option("--epochs", epochs, "Epochs")->check(CLI::NonNegativeNumber);
  train_cls->add_option("--lr", lr, "Learning rate");
  train_cls->add_option("--out", out_dir, "Model directory")->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    const CLI::App* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    err << sub->help();
    return kExitUsage;
  }

  auto load_data = [&]() {
    return data_dir.empty() ? gen_toy_dataset(DatasetSpec{count, kToySize, 0.25}, seed) : load_dataset(data_dir);
  };

  try {
    if (attack->parsed()) {
      run_pair(attack_flags.resolve(), AttackMethod::kAdvDiffVlm, image, target, out);
    } else if (baseline->parsed()) {
      run_pair(baseline_flags.resolve(), AttackMethod::kMifgsm, image, target, out);
    } else if (defend->parsed()) {
      ExperimentConfig cfg = defend_flags.resolve();
      std::vector<DefenseConfig> defenses = cfg.defenses;
      if (!defense_kind.empty()) {
        DefenseConfig d;
        d.kind = parse_defense(defense_kind);
        for (const auto& c : cfg.defenses)
          if (c.kind == d.kind) d = c;
        defenses = {d};
      }
      if (defenses.empty()) throw ConfigError("no defense configured; pass --defense or list defenses in the config");
      const Tensor<Real> x = load_image(image, std::pair{cfg.dataset.size, cfg.dataset.size});
      const ToyDataset data = dataset_for(cfg);
      const ExperimentModels models = prepare_models(cfg, data);
      for (std::size_t i = 0; i < defenses.size(); ++i) {
        Rng rng(derive_seed(*cfg.seed, 100 + i));
        const Tensor<Real> y = apply_defense(x, defenses[i], *models.eps_source, models.sched, rng);
        const fs::path path = cfg.output_dir / (defense_name(defenses[i].kind) + ".png");
        save_image(y, path);
        out << "wrote " << path.string() << "\n";
      }
    } else if (evaluate->parsed()) {
      const EvalReport rep = run_experiment(evaluate_flags.resolve());
      print_summary(rep.to_json(), out);
    } else if (report->parsed()) {
      std::ifstream in(fs::path(report_dir) / "report.json");
      if (!in) throw ConfigError("no report.json in " + report_dir);
      nlohmann::json doc;
      try {
        doc = nlohmann::json::parse(in);
      } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(std::string("malformed report.json: ") + e.what());
      }
      print_summary(doc, out);
    } else if (gen->parsed()) {
      save_dataset(gen_toy_dataset(DatasetSpec{count, size, 0.25}, seed), out_dir);
      out << "wrote " << count << " images to " << out_dir << "\n";
    } else if (train_den->parsed()) {
      const ToyDataset data = load_data();
      const NoiseSchedule sched = make_linear_schedule(T, beta_start.value_or(default_beta_start(T)),
                                                       beta_end.value_or(default_beta_end(T)));
      DenoiserTrainOptions opts;
      opts.steps = steps;
      opts.seed = seed;
      if (lr > 0.0) opts.lr = lr;
      const DenoiserTraining trained = train_denoiser(data.images, sched, opts);
      trained.model.save(out_dir, sched);
      out << "loss " << (trained.loss_trace.empty() ? 0.0 : trained.loss_trace.front()) << " -> "
          << (trained.loss_trace.empty() ? 0.0 : trained.loss_trace.back()) << "\n";
    } else if (train_cls->parsed()) {
      const ToyDataset data = load_data();
      ClassifierTrainOptions opts;
      opts.epochs = epochs;
      opts.seed = seed;
      if (lr > 0.0) opts.lr = lr;
      const ClassifierTraining trained = train_classifier(data.images, data.labels, kToyClasses, opts);
      trained.model.save(out_dir);
      std::size_t correct = 0;
      for (std::size_t i = 0; i < data.size(); ++i) correct += trained.model.predict(data.images[i]) == data.labels[i];
      out << "train accuracy " << static_cast<double>(correct) / static_cast<double>(data.size()) << "\n";
    }
  } catch (const ConfigError& e) {
    err << "configuration error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}

int cli_main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return cli_main(args, std::cout, std::cerr);
}

}  // namespace advdiff
