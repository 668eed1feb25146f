#include "advdiff/experiment.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <set>
#include <thread>

#include "advdiff/denoiser.hpp"
#include "advdiff/image_io.hpp"

namespace advdiff {

namespace fs = std::filesystem;
using nlohmann::json;

AttackMethod parse_method(const std::string& name) {
  if (name == "advdiffvlm") return AttackMethod::kAdvDiffVlm;
  if (name == "mifgsm") return AttackMethod::kMifgsm;
  throw ConfigError("unknown method '" + name + "' (expected advdiffvlm or mifgsm)");
}

std::string method_name(AttackMethod method) { return method == AttackMethod::kMifgsm ? "mifgsm" : "advdiffvlm"; }

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// ---------------------------------------------------------------------------
// JSON

namespace {

void reject_unknown(const json& j, std::initializer_list<const char*> keys, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
  const std::set<std::string> known(keys.begin(), keys.end());
  for (const auto& [key, value] : j.items())
    if (!known.count(key)) throw ConfigError(where + ": unknown key '" + key + "'");
}

template <typename V>
void read(const json& j, const char* key, V& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

fs::path resolve(const fs::path& p, const fs::path& base) { return p.is_absolute() || base.empty() ? p : base / p; }

}  // namespace

json attack_config_to_json(const AttackConfig& c) {
  json j = {{"s", c.s},
            {"delta", c.delta},
            {"t_star", c.t_star_frac},
            {"k", c.k},
            {"tau", c.tau},
            {"ratio_clip", c.ratio_clip},
            {"N", c.N},
            {"T", c.T},
            {"sampler", sampler_name(c.sampler)},
            {"patches_per_step", c.patches_per_step},
            {"clip_lo", c.clip_lo},
            {"clip_hi", c.clip_hi},
            {"guidance_sign", c.sign == GuidanceSign::kNegated ? "negated" : "ascend"},
            {"update", c.update == UpdateRule::kProse ? "prose" : "algorithm"},
            {"full_mask", c.full_mask}};
  j["label"] = c.label ? json(*c.label) : json(nullptr);
  return j;
}

void apply_attack_json(AttackConfig& c, const json& j) {
  const std::string where = "attack";
  reject_unknown(j, {"s", "delta", "t_star", "k", "tau", "ratio_clip", "N", "T", "sampler", "patches_per_step", "clip_lo", "clip_hi",
                     "guidance_sign", "update", "full_mask", "label"},
                 where);
  read(j, "s", c.s, where);
  read(j, "delta", c.delta, where);
  read(j, "t_star", c.t_star_frac, where);
  read(j, "k", c.k, where);
  read(j, "tau", c.tau, where);
  read(j, "ratio_clip", c.ratio_clip, where);
  read(j, "N", c.N, where);
  read(j, "T", c.T, where);
  read(j, "patches_per_step", c.patches_per_step, where);
  read(j, "clip_lo", c.clip_lo, where);
  read(j, "clip_hi", c.clip_hi, where);
  read(j, "full_mask", c.full_mask, where);
  std::string text;
  if (j.contains("sampler")) {
    read(j, "sampler", text, where);
    c.sampler = parse_sampler(text);
  }
  if (j.contains("guidance_sign")) {
    read(j, "guidance_sign", text, where);
    if (text != "ascend" && text != "negated") throw ConfigError("attack.guidance_sign must be ascend or negated");
    c.sign = text == "negated" ? GuidanceSign::kNegated : GuidanceSign::kAscend;
  }
  if (j.contains("update")) {
    read(j, "update", text, where);
    if (text != "algorithm" && text != "prose") throw ConfigError("attack.update must be algorithm or prose");
    c.update = text == "prose" ? UpdateRule::kProse : UpdateRule::kAlgorithm;
  }
  if (j.contains("label")) {
    if (j.at("label").is_null()) {
      c.label.reset();
    } else {
      std::size_t label = 0;
      read(j, "label", label, where);
      c.label = label;
    }
  }
}

json defense_config_to_json(const DefenseConfig& c) {
  return {{"kind", defense_name(c.kind)},
          {"bits", c.bits},
          {"jpeg_quality", c.jpeg_quality},
          {"diffpure_t_frac", c.diffpure_t_frac},
          {"diffpure_stochastic", c.diffpure_stochastic}};
}

DefenseConfig defense_config_from_json(const json& j) {
  const std::string where = "defenses[]";
  if (j.is_string()) {
    DefenseConfig c;
    c.kind = parse_defense(j.get<std::string>());
    return c;
  }
  reject_unknown(j, {"kind", "bits", "jpeg_quality", "diffpure_t_frac", "diffpure_stochastic"}, where);
  if (!j.contains("kind")) throw ConfigError("defense entry needs a 'kind'");
  DefenseConfig c;
  std::string kind;
  read(j, "kind", kind, where);
  c.kind = parse_defense(kind);
  read(j, "bits", c.bits, where);
  read(j, "jpeg_quality", c.jpeg_quality, where);
  read(j, "diffpure_t_frac", c.diffpure_t_frac, where);
  read(j, "diffpure_stochastic", c.diffpure_stochastic, where);
  c.validate();
  return c;
}

json ExperimentConfig::to_json() const {
  auto opt_path = [](const std::optional<fs::path>& p) { return p ? json(p->generic_string()) : json(nullptr); };
  json j;
  j["seed"] = seed ? json(*seed) : json(nullptr);
  j["attack"] = attack_config_to_json(attack);
  j["baseline"] = {{"steps", baseline.steps},
                   {"eps", baseline.eps},
                   {"mu", baseline.mu},
                   {"step_size", baseline.step_size ? json(*baseline.step_size) : json(nullptr)}};
  j["methods"] = json::array();
  for (auto m : methods) j["methods"].push_back(method_name(m));
  j["defenses"] = json::array();
  for (const auto& d : defenses) j["defenses"].push_back(defense_config_to_json(d));
  j["dataset"] = {{"count", dataset.count},
                  {"size", dataset.size},
                  {"classes", kToyClasses},
                  {"val_fraction", dataset.val_fraction},
                  {"seed", dataset_seed},
                  {"dir", opt_path(dataset_dir)},
                  {"max_images", max_images ? json(*max_images) : json(nullptr)},
                  {"target_shift", target_shift}};
  const NoiseSchedule sched = schedule();
  j["models"] = {{"beta_start", sched.beta_start()},
                 {"beta_end", sched.beta_end()},
                 {"denoiser_dir", opt_path(denoiser_dir)},
                 {"prior", prior},
                 {"prior_var", prior_var},
                 {"classifier_dir", opt_path(classifier_dir)},
                 {"classifier_epochs", classifier_epochs},
                 {"ensemble_dir", opt_path(ensemble_dir)},
                 {"ensemble_seed", ensemble_seed},
                 {"ensemble_members", ensemble_members}};
  j["output_dir"] = output_dir.generic_string();
  j["parallelism"] = parallelism;
  j["save_images"] = save_images;
  return j;
}

ExperimentConfig ExperimentConfig::from_json(const json& j, const fs::path& base_dir) {
  const std::string where = "config";
  reject_unknown(j, {"seed", "attack", "baseline", "methods", "defenses", "dataset", "models", "output_dir",
                     "parallelism", "save_images"},
                 where);
  ExperimentConfig c;
  if (j.contains("seed") && !j.at("seed").is_null()) {
    std::uint64_t seed = 0;
    read(j, "seed", seed, where);
    c.seed = seed;
  }
  if (j.contains("attack")) apply_attack_json(c.attack, j.at("attack"));
  if (j.contains("baseline")) {
    const json& b = j.at("baseline");
    reject_unknown(b, {"steps", "eps", "mu", "step_size"}, "baseline");
    read(b, "steps", c.baseline.steps, "baseline");
    read(b, "eps", c.baseline.eps, "baseline");
    read(b, "mu", c.baseline.mu, "baseline");
    if (b.contains("step_size") && !b.at("step_size").is_null()) {
      double step = 0.0;
      read(b, "step_size", step, "baseline");
      c.baseline.step_size = step;
    }
  }
  if (j.contains("methods")) {
    if (!j.at("methods").is_array()) throw ConfigError("config.methods must be an array");
    c.methods.clear();
    for (const auto& m : j.at("methods")) {
      if (!m.is_string()) throw ConfigError("config.methods entries must be strings");
      c.methods.push_back(parse_method(m.get<std::string>()));
    }
  }
  if (j.contains("defenses")) {
    if (!j.at("defenses").is_array()) throw ConfigError("config.defenses must be an array");
    for (const auto& d : j.at("defenses")) c.defenses.push_back(defense_config_from_json(d));
  }
  if (j.contains("dataset")) {
    const json& d = j.at("dataset");
    reject_unknown(d, {"count", "size", "classes", "val_fraction", "seed", "dir", "max_images", "target_shift"},
                   "dataset");
    read(d, "count", c.dataset.count, "dataset");
    read(d, "size", c.dataset.size, "dataset");
    read(d, "val_fraction", c.dataset.val_fraction, "dataset");
    read(d, "seed", c.dataset_seed, "dataset");
    read(d, "target_shift", c.target_shift, "dataset");
    if (d.contains("classes") && d.at("classes") != json(kToyClasses))
      throw ConfigError("dataset.classes must be " + std::to_string(kToyClasses));
    if (d.contains("dir") && !d.at("dir").is_null()) {
      std::string dir;
      read(d, "dir", dir, "dataset");
      c.dataset_dir = resolve(dir, base_dir);
    }
    if (d.contains("max_images") && !d.at("max_images").is_null()) {
      std::size_t m = 0;
      read(d, "max_images", m, "dataset");
      c.max_images = m;
    }
  }
  if (j.contains("models")) {
    const json& m = j.at("models");
    reject_unknown(m, {"beta_start", "beta_end", "denoiser_dir", "prior", "prior_var", "classifier_dir", "classifier_epochs", "ensemble_dir",
                       "ensemble_seed", "ensemble_members"},
                   "models");
    for (auto [key, slot] : {std::pair{"beta_start", &c.beta_start}, std::pair{"beta_end", &c.beta_end}}) {
      if (m.contains(key) && !m.at(key).is_null()) {
        double beta = 0.0;
        read(m, key, beta, "models");
        *slot = beta;
      }
    }
    read(m, "classifier_epochs", c.classifier_epochs, "models");
    read(m, "prior", c.prior, "models");
    read(m, "prior_var", c.prior_var, "models");
    read(m, "ensemble_seed", c.ensemble_seed, "models");
    read(m, "ensemble_members", c.ensemble_members, "models");
    for (auto [key, slot] : {std::pair{"denoiser_dir", &c.denoiser_dir}, std::pair{"classifier_dir", &c.classifier_dir},
                             std::pair{"ensemble_dir", &c.ensemble_dir}}) {
      if (m.contains(key) && !m.at(key).is_null()) {
        std::string dir;
        read(m, key, dir, "models");
        *slot = resolve(dir, base_dir);
      }
    }
  }
  if (j.contains("output_dir")) {
    std::string out;
    read(j, "output_dir", out, where);
    c.output_dir = resolve(out, base_dir);
  }
  read(j, "parallelism", c.parallelism, where);
  read(j, "save_images", c.save_images, where);
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("malformed config " + path.string() + ": " + e.what());
  }
  return from_json(j);
}

void ExperimentConfig::validate() const {
  if (!seed) throw ConfigError("experiment seed is mandatory");
  attack.validate();
  for (const auto& d : defenses) d.validate();
  if (parallelism < 1) throw ConfigError("parallelism must be >= 1");
  if (ensemble_members < 1) throw ConfigError("ensemble_members must be >= 1");
  if (baseline.steps < 0 || !(baseline.eps >= 0.0)) throw ConfigError("baseline steps and eps must be non-negative");
  if (dataset.count < 1 && !dataset_dir) throw ConfigError("dataset.count must be >= 1");
  if (prior != "mixture" && prior != "gaussian") throw ConfigError("models.prior must be mixture or gaussian");
  if (!(prior_var > 0.0)) throw ConfigError("models.prior_var must be positive");
  if (target_shift % kToyClasses == 0) throw ConfigError("target_shift must not map a class onto itself");
  for (const auto* p : {&dataset_dir, &denoiser_dir, &classifier_dir, &ensemble_dir})
    if (*p && !fs::exists(**p)) throw ConfigError("path does not exist: " + (*p)->string());
  // Also catches a bad beta range.
  schedule();
}

NoiseSchedule ExperimentConfig::schedule() const {
  return make_linear_schedule(attack.T, beta_start.value_or(default_beta_start(attack.T)),
                              beta_end.value_or(default_beta_end(attack.T)));
}

// ---------------------------------------------------------------------------
// Models and items

GaussianOracle fit_gaussian_oracle(const std::vector<Tensor<Real>>& images, double min_var) {
  if (images.empty()) throw ConfigError("cannot fit a Gaussian to an empty image set");
  const Shape shape = images.front().shape();
  const std::size_t n = images.front().numel();
  std::vector<double> mu(n, 0.0), var(n, 0.0);
  for (const auto& img : images) {
    if (img.shape() != shape) throw ShapeError("fit_gaussian_oracle: images differ in shape");
    auto v = img.data();
    for (std::size_t i = 0; i < n; ++i) mu[i] += static_cast<double>(v[i]);
  }
  for (auto& m : mu) m /= static_cast<double>(images.size());
  for (const auto& img : images) {
    auto v = img.data();
    for (std::size_t i = 0; i < n; ++i) var[i] += (static_cast<double>(v[i]) - mu[i]) * (static_cast<double>(v[i]) - mu[i]);
  }
  for (auto& v : var) v = std::max(v / static_cast<double>(images.size()), min_var);
  return GaussianOracle(shape, std::move(mu), std::move(var));
}

ExperimentModels prepare_models(const ExperimentConfig& cfg, const ToyDataset& data) {
  NoiseSchedule sched = cfg.schedule();
  std::shared_ptr<const EpsPredictor> eps_source;
  if (cfg.denoiser_dir) {
    NoiseSchedule stored{std::vector<double>{0.5}};
    auto model = std::make_shared<DenoiserModel>(DenoiserModel::load(*cfg.denoiser_dir, &stored));
    if (stored.steps() != cfg.attack.T)
      throw ConfigError("denoiser was trained with T = " + std::to_string(stored.steps()) + ", config has T = " +
                        std::to_string(cfg.attack.T));
    sched = stored;
    eps_source = model;
  } else if (cfg.prior == "gaussian") {
    eps_source = std::make_shared<GaussianOracle>(fit_gaussian_oracle(data.images, cfg.prior_var));
  } else {
    eps_source = std::make_shared<GaussianMixtureOracle>(GaussianMixtureOracle::from_images(data.images, cfg.prior_var));
  }

  std::shared_ptr<const ClassifierModel> classifier;
  if (cfg.classifier_dir) {
    classifier = std::make_shared<ClassifierModel>(ClassifierModel::load(*cfg.classifier_dir));
  } else {
    ClassifierTrainOptions opts;
    opts.epochs = cfg.classifier_epochs;
    opts.seed = derive_seed(*cfg.seed, 11);
    classifier =
        std::make_shared<ClassifierModel>(train_classifier(data.images, data.labels, kToyClasses, opts).model);
  }

  EncoderEnsemble<Real> ensemble = cfg.ensemble_dir
                                       ? load_ensemble<Real>(*cfg.ensemble_dir)
                                       : build_default_ensemble<Real>(cfg.ensemble_seed, cfg.ensemble_members);
  check_victim_held_out(ensemble);
  ClassPrototypes prototypes = build_prototypes(ensemble.victim, data.images, data.labels);
  return ExperimentModels{std::move(sched), std::move(eps_source), std::move(classifier), std::move(ensemble),
                          std::move(prototypes)};
}

std::vector<ExperimentItem> make_items(const ExperimentConfig& cfg, const ToyDataset& data) {
  std::vector<ExperimentItem> items;
  const std::size_t count = std::min(data.size(), cfg.max_images.value_or(data.size()));
  for (std::size_t i = 0; i < count; ++i) {
    ExperimentItem item;
    item.index = i;
    item.source_class = data.labels[i];
    item.target_class = (data.labels[i] + cfg.target_shift) % kToyClasses;
    const auto it = std::find(data.labels.begin(), data.labels.end(), item.target_class);
    if (it == data.labels.end())
      throw ConfigError("dataset has no image of target class " + std::to_string(item.target_class));
    item.target = data.images[static_cast<std::size_t>(it - data.labels.begin())];
    item.load_source = [img = data.images[i]] { return img; };
    items.push_back(std::move(item));
  }
  return items;
}

// ---------------------------------------------------------------------------
// Running

namespace {

std::string item_stem(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "img_%04zu", index);
  return buf;
}

std::vector<EvalRecord> run_one(const ExperimentConfig& cfg, const ExperimentModels& models, const ExperimentItem& item) {
  const std::uint64_t seed = *cfg.seed + item.index;
  const Tensor<Real> x = item.load_source();
  const fs::path out = cfg.output_dir;
  std::vector<EvalRecord> records;

  for (std::size_t mi = 0; mi < cfg.methods.size(); ++mi) {
    const AttackMethod method = cfg.methods[mi];
    const std::string name = method_name(method);
    const auto started = std::chrono::steady_clock::now();
    Tensor<Real> x_adv;
    if (method == AttackMethod::kAdvDiffVlm) {
      AttackConfig acfg = cfg.attack;
      acfg.seed = seed;
      if (!acfg.label) acfg.label = item.source_class;
      Rng rng(derive_seed(seed, mi));
      AttackResult res = advdiffvlm_attack(x, item.target, models.ensemble, *models.classifier, *models.eps_source,
                                           models.sched, acfg, rng);
      x_adv = res.x_adv;
      if (cfg.save_images) {
        fs::create_directories(out / "traces");
        std::ofstream trace(out / "traces" / (item_stem(item.index) + "_" + name + ".csv"), std::ios::binary);
        write_trace_csv(trace, res.trace);
      }
    } else {
      x_adv = mifgsm_ens_attack(x, item.target, models.ensemble, cfg.baseline);
    }
    const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    if (cfg.save_images) save_image(x_adv, out / "images" / (item_stem(item.index) + "_" + name + ".png"));

    auto tag = [&](EvalRecord r, const std::string& defense) {
      r.index = item.index;
      r.method = name;
      r.defense = defense;
      return r;
    };
    EvalRecord base = tag(evaluate_image(models, x, x_adv, item.target, item.source_class, item.target_class), "none");
    base.wall_time = elapsed;
    records.push_back(base);
    for (std::size_t di = 0; di < cfg.defenses.size(); ++di) {
      Rng rng(derive_seed(seed, 100 + 16 * mi + di));
      const auto def_started = std::chrono::steady_clock::now();
      const Tensor<Real> purified = apply_defense(x_adv, cfg.defenses[di], *models.eps_source, models.sched, rng);
      EvalRecord r = tag(evaluate_image(models, x, purified, item.target, item.source_class, item.target_class),
                         defense_name(cfg.defenses[di].kind));
      r.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - def_started).count();
      records.push_back(r);
    }
  }
  return records;
}

}  // namespace

EvalRecord evaluate_image(const ExperimentModels& models, const Tensor<Real>& x, const Tensor<Real>& x_eval,
                          const Tensor<Real>& x_tar, std::size_t source_class, std::size_t target_class) {
  EvalRecord r;
  r.source_class = source_class;
  r.target_class = target_class;
  r.transfer_sim = transfer_similarity(models.ensemble.victim, x_eval, x_tar);
  r.transfer_floor = transfer_similarity(models.ensemble.victim, x, x_tar);
  r.ensemble_objective = ensemble_similarity(models.ensemble, x_eval, x_tar);
  r.embed_asr = embed_asr(models.ensemble.victim, x_eval, models.prototypes, target_class);
  r.ssim = ssim(x, x_eval);
  r.psnr = psnr(x, x_eval);
  const LpNorms norms = lp_norms(x_eval, x);
  r.linf = norms.linf;
  r.l2 = norms.l2;
  return r;
}

EvalReport run_items(const ExperimentConfig& cfg, const ExperimentModels& models, const std::vector<ExperimentItem>& items) {
  cfg.validate();
  std::vector<std::vector<EvalRecord>> slots(items.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < items.size(); i = next++) {
      try {
        slots[i] = run_one(cfg, models, items[i]);
      } catch (const std::exception& e) {
        EvalRecord r;
        r.index = items[i].index;
        r.method = "*";
        r.defense = "*";
        r.source_class = items[i].source_class;
        r.target_class = items[i].target_class;
        r.error = e.what();
        slots[i] = {r};
      }
    }
  };
  const std::size_t threads = std::min(cfg.parallelism, std::max<std::size_t>(items.size(), 1));
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
  }

  EvalReport report;
  for (auto& slot : slots)
    for (auto& r : slot) report.records.push_back(std::move(r));
  report.config = cfg.to_json();
  report.aggregate();
  return report;
}

void write_report(const EvalReport& report, const fs::path& dir) {
  fs::create_directories(dir);
  {
    std::ofstream js(dir / "report.json", std::ios::binary);
    if (!js) throw std::runtime_error("cannot write " + (dir / "report.json").string());
    js << report.to_json().dump(2) << '\n';
  }
  std::ofstream csv(dir / "report.csv", std::ios::binary);
  if (!csv) throw std::runtime_error("cannot write " + (dir / "report.csv").string());
  csv << report.to_csv();
}

EvalReport run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  const ToyDataset data = cfg.dataset_dir ? load_dataset(*cfg.dataset_dir) : gen_toy_dataset(cfg.dataset, cfg.dataset_seed);
  const ExperimentModels models = prepare_models(cfg, data);
  EvalReport report = run_items(cfg, models, make_items(cfg, data));
  write_report(report, cfg.output_dir);
  return report;
}

}  // namespace advdiff
