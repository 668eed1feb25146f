#pragma once

// Batch orchestration: configuration, model preparation, per-image attack /
// defense / evaluation pipelines, and report persistence.

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "advdiff/attack.hpp"
#include "advdiff/dataset.hpp"
#include "advdiff/defenses.hpp"
#include "advdiff/metrics.hpp"
#include "json.hpp"

namespace advdiff {

enum class AttackMethod { kAdvDiffVlm, kMifgsm };

AttackMethod parse_method(const std::string& name);
std::string method_name(AttackMethod method);

struct ExperimentConfig {
  std::optional<std::uint64_t> seed;  // mandatory at run time
  AttackConfig attack;
  MifgsmConfig baseline;
  std::vector<AttackMethod> methods{AttackMethod::kAdvDiffVlm, AttackMethod::kMifgsm};
  std::vector<DefenseConfig> defenses;

  DatasetSpec dataset;
  std::uint64_t dataset_seed = 0;
  std::optional<std::filesystem::path> dataset_dir;  // load instead of generating
  std::optional<std::size_t> max_images;
  // Target class for a source of class c is (c + target_shift) mod C.
  std::size_t target_shift = 4;

  // Defaults follow make_default_schedule(attack.T).
  std::optional<double> beta_start;
  std::optional<double> beta_end;
  // Trained denoiser directory. Without one the exact-score prior named by
  // `prior` is used: "mixture" (Gaussians of variance prior_var centred on
  // the dataset images) or "gaussian" (per-pixel moments of the dataset).
  std::optional<std::filesystem::path> denoiser_dir;
  std::string prior = "mixture";
  double prior_var = 0.01;
  // Trained classifier directory; otherwise trained for classifier_epochs
  // (0 keeps the random initialization).
  std::optional<std::filesystem::path> classifier_dir;
  int classifier_epochs = 2;
  std::optional<std::filesystem::path> ensemble_dir;
  std::uint64_t ensemble_seed = 100;
  std::size_t ensemble_members = 4;

  std::filesystem::path output_dir = "runs/experiment";
  std::size_t parallelism = 1;
  bool save_images = true;

  // Throws ConfigError for missing seed, unresolvable paths or bad values.
  void validate() const;
  NoiseSchedule schedule() const;
  nlohmann::json to_json() const;
  // Unknown keys are rejected. Relative paths resolve against `base_dir`.
  static ExperimentConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
  static ExperimentConfig load(const std::filesystem::path& path);
};

nlohmann::json attack_config_to_json(const AttackConfig& cfg);
// Applies the keys present in `j` on top of `cfg`.
void apply_attack_json(AttackConfig& cfg, const nlohmann::json& j);

nlohmann::json defense_config_to_json(const DefenseConfig& cfg);
DefenseConfig defense_config_from_json(const nlohmann::json& j);

// Gaussian with the per-pixel mean and variance of `images` (variance floored
// at `min_var`).
GaussianOracle fit_gaussian_oracle(const std::vector<Tensor<Real>>& images, double min_var = 1e-3);

struct ExperimentModels {
  NoiseSchedule sched;
  std::shared_ptr<const EpsPredictor> eps_source;
  std::shared_ptr<const ClassifierModel> classifier;
  EncoderEnsemble<Real> ensemble;
  ClassPrototypes prototypes;
};

ExperimentModels prepare_models(const ExperimentConfig& cfg, const ToyDataset& data);

struct ExperimentItem {
  std::size_t index = 0;
  std::size_t source_class = 0;
  std::size_t target_class = 0;
  // Deferred so that a load failure is isolated to this item.
  std::function<Tensor<Real>()> load_source;
  Tensor<Real> target;
};

// Metrics of `x_eval` against the clean source `x` and the target `x_tar`.
// index, method and defense are left for the caller.
EvalRecord evaluate_image(const ExperimentModels& models, const Tensor<Real>& x, const Tensor<Real>& x_eval,
                          const Tensor<Real>& x_tar, std::size_t source_class, std::size_t target_class);

// Source i is dataset image i; its target is the first image of the target class.
std::vector<ExperimentItem> make_items(const ExperimentConfig& cfg, const ToyDataset& data);

// Runs every item (parallel up to cfg.parallelism) and aggregates. Images and
// traces are written under cfg.output_dir when cfg.save_images is set.
EvalReport run_items(const ExperimentConfig& cfg, const ExperimentModels& models, const std::vector<ExperimentItem>& items);

// Full pipeline; writes report.json and report.csv to cfg.output_dir.
EvalReport run_experiment(const ExperimentConfig& cfg);

void write_report(const EvalReport& report, const std::filesystem::path& dir);

// SplitMix64 of (seed, stream), for independent per-purpose generators.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace advdiff
