#pragma once

// Score-guided adversarial diffusion sampling with GradCAM masks and adaptive
// ensemble gradients, plus a momentum iterative FGSM ensemble baseline.

#include <optional>
#include <ostream>
#include <vector>

#include "advdiff/aege.hpp"
#include "advdiff/gcmg.hpp"

namespace advdiff {

// How the composed score becomes the next latent.
enum class UpdateRule {
  kAlgorithm,  // (x_hat + (1 - alpha_t) * score) / sqrt(alpha_t)
  kProse,      // -sqrt(1 - alpha_bar_t) * score; experimental
};

struct AttackConfig {
  double s = 35.0;
  double delta = 0.0025;
  double t_star_frac = 0.2;
  std::size_t k = 8;
  double tau = 2.0;
  double ratio_clip = 5.0;  // see AegeParams
  int N = 10;
  int T = 200;
  SamplerKind sampler = SamplerKind::kDdpmMean;
  std::uint64_t seed = 0;
  std::size_t patches_per_step = 1;
  double clip_lo = 0.3;
  double clip_hi = 0.7;
  GuidanceSign sign = GuidanceSign::kAscend;
  UpdateRule update = UpdateRule::kAlgorithm;
  // Use m = 1 everywhere instead of sampled patches.
  bool full_mask = false;
  // Class used for GradCAM; the classifier's top-1 prediction when unset.
  std::optional<std::size_t> label;

  int t_star() const;
  void validate() const;
};

struct TraceRecord {
  int n = 0;
  int t = 0;
  double objective = 0.0;           // weighted ensemble objective at x_hat_t
  std::vector<double> losses;       // per-member cosine at x_tilde_t
  std::vector<double> weights;      // w used for this step
  double linf_g = 0.0;
};

struct AttackResult {
  Tensor<Real> x_adv;
  std::vector<TraceRecord> trace;
  std::size_t label = 0;
  double wall_time_s = 0.0;
};

AttackResult advdiffvlm_attack(const Tensor<Real>& x, const Tensor<Real>& x_tar, const EncoderEnsemble<Real>& ensemble,
                               const ClassifierModel& classifier, const EpsPredictor& eps_source,
                               const NoiseSchedule& sched, const AttackConfig& cfg, Rng& rng);

// Columns: n,t,objective,w_1..w_N,linf_g
void write_trace_csv(std::ostream& os, const std::vector<TraceRecord>& trace);

struct MifgsmConfig {
  int steps = 300;
  double eps = 16.0 / 255.0;
  double mu = 1.0;
  // Defaults to 2 * eps / steps.
  std::optional<double> step_size;
};

Tensor<Real> mifgsm_ens_attack(const Tensor<Real>& x, const Tensor<Real>& x_tar, const EncoderEnsemble<Real>& ensemble,
                               const MifgsmConfig& cfg);

// Equal-weight ensemble objective, untraced.
double ensemble_similarity(const EncoderEnsemble<Real>& ensemble, const Tensor<Real>& x, const Tensor<Real>& x_tar);

}  // namespace advdiff
