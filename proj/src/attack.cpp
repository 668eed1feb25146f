#include "advdiff/attack.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>

namespace advdiff {

int AttackConfig::t_star() const { return static_cast<int>(std::lround(t_star_frac * T)); }

void AttackConfig::validate() const {
  if (!(t_star_frac > 0.0 && t_star_frac <= 1.0)) throw ConfigError("t_star_frac must lie in (0, 1]");
  if (N < 1) throw ConfigError("N must be >= 1");
  if (T < 1) throw ConfigError("T must be >= 1");
  if (t_star() < 1) throw ConfigError("t_star_frac * T rounds to zero reverse steps");
  if (!(delta > 0.0)) throw ConfigError("delta must be positive");
  if (!(s >= 0.0)) throw ConfigError("s must be non-negative");
  if (!std::isfinite(tau)) throw ConfigError("tau must be finite");
  if (!(ratio_clip > 0.0)) throw ConfigError("ratio_clip must be positive");
}

namespace {

void check_image(const Tensor<Real>& x, const char* what) {
  if (x.rank() != 4 || x.dim(0) != 1 || x.dim(1) != 3)
    throw ShapeError(std::string(what) + " must be 1 x 3 x H x W, got " + shape_to_string(x.shape()));
  for (Real v : x.data())
    if (v < Real(0) || v > Real(1)) throw ConfigError(std::string(what) + " values must lie in [0, 1]");
}

Tensor<Real> clamp01(const Tensor<Real>& x) {
  return map_values(x, [](Real v) { return std::clamp(v, Real(0), Real(1)); });
}

}  // namespace

AttackResult advdiffvlm_attack(const Tensor<Real>& x, const Tensor<Real>& x_tar, const EncoderEnsemble<Real>& ensemble,
                               const ClassifierModel& classifier, const EpsPredictor& eps_source,
                               const NoiseSchedule& sched, const AttackConfig& cfg, Rng& rng) {
  const auto started = std::chrono::steady_clock::now();
  cfg.validate();
  check_image(x, "source image");
  check_image(x_tar, "target image");
  if (x.shape() != x_tar.shape()) throw ShapeError("source and target images differ in shape");
  if (sched.steps() != cfg.T) throw ConfigError("schedule length does not match config T");
  const std::size_t h = x.dim(2), w = x.dim(3);
  MaskConfig mask_cfg{cfg.k, cfg.clip_lo, cfg.clip_hi, cfg.patches_per_step};
  mask_cfg.validate(h, w);

  AttackResult result;
  result.label = cfg.label.value_or(classifier.predict(x));
  const SpatialMap prob = cam_to_prob(gradcam(classifier, x, result.label), cfg.clip_lo, cfg.clip_hi);
  const auto targets = target_embeddings(ensemble, x_tar);
  AegeState aege(ensemble.size(), AegeParams{cfg.tau, cfg.s, cfg.delta, cfg.ratio_clip});

  const int t_star = cfg.t_star();
  Tensor<Real> x0 = x;
  for (int n = 1; n <= cfg.N; ++n) {
    Tensor<Real> x_tilde = forward_noise(x0, t_star, Tensor<Real>::randn(x.shape(), rng), sched);
    aege.reset();
    for (int t = t_star; t >= 1; --t) {
      const Mask m = cfg.full_mask ? Mask::filled(h, w, 1)
                                   : sample_mask(prob, cfg.k, rng, cfg.patches_per_step);
      const Tensor<Real> x_t = forward_noise(x0, t, Tensor<Real>::randn(x.shape(), rng), sched);
      const Tensor<Real> x_hat = blend(x_t, x_tilde, m);

      TraceRecord rec;
      rec.n = n;
      rec.t = t;
      rec.losses = member_similarities(ensemble, x_tilde, std::span<const Tensor<Real>>(targets));
      rec.weights = aege.refresh_weights();
      const auto est = estimate_gradient(ensemble, std::span<const double>(rec.weights), x_hat,
                                         std::span<const Tensor<Real>>(targets), cfg.delta);
      rec.objective = est.objective;
      rec.linf_g = est.linf;
      aege.record_losses(rec.losses);

      const Tensor<Real> eps = eps_source.predict_eps(x_hat, t, sched);
      const Tensor<Real> score = compose_score(eps, est.g, t, sched, cfg.s, cfg.sign);
      if (cfg.update == UpdateRule::kProse) {
        x_tilde = scale(score, static_cast<Real>(-std::sqrt(1.0 - sched.alpha_bar(t))));
      } else if (cfg.sampler == SamplerKind::kDdim) {
        const Tensor<Real> eps_mod = scale(score, static_cast<Real>(-std::sqrt(1.0 - sched.alpha_bar(t))));
        x_tilde = ddim_step(x_hat, eps_mod, t, t - 1, sched, 0.0);
      } else {
        x_tilde = ddpm_step(x_hat, score, t, sched);
      }
      result.trace.push_back(std::move(rec));
    }
    x0 = clamp01(x_tilde);
  }
  result.x_adv = x0;
  result.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return result;
}

void write_trace_csv(std::ostream& os, const std::vector<TraceRecord>& trace) {
  const std::size_t members = trace.empty() ? 0 : trace.front().weights.size();
  os << "n,t,objective";
  for (std::size_t i = 1; i <= members; ++i) os << ",w_" << i;
  os << ",linf_g\n";
  os << std::setprecision(9);
  for (const auto& r : trace) {
    os << r.n << ',' << r.t << ',' << r.objective;
    for (double w : r.weights) os << ',' << w;
    os << ',' << r.linf_g << '\n';
  }
}

double ensemble_similarity(const EncoderEnsemble<Real>& ensemble, const Tensor<Real>& x, const Tensor<Real>& x_tar) {
  const std::vector<double> ones(ensemble.size(), 1.0);
  return static_cast<double>(ensemble_objective(ensemble, std::span<const double>(ones), x.detach(), x_tar).item());
}

Tensor<Real> mifgsm_ens_attack(const Tensor<Real>& x, const Tensor<Real>& x_tar, const EncoderEnsemble<Real>& ensemble,
                               const MifgsmConfig& cfg) {
  check_image(x, "source image");
  if (x.shape() != x_tar.shape()) throw ShapeError("source and target images differ in shape");
  if (cfg.steps < 0) throw ConfigError("MI-FGSM steps must be non-negative");
  if (cfg.steps == 0) return x;
  const double step = cfg.step_size.value_or(2.0 * cfg.eps / cfg.steps);
  const auto targets = target_embeddings(ensemble, x_tar);
  const std::vector<double> ones(ensemble.size(), 1.0);
  const Real eps = static_cast<Real>(cfg.eps);
  auto xs = x.data();

  std::vector<double> momentum(x.numel(), 0.0);
  Tensor<Real> adv = x;
  for (int it = 0; it < cfg.steps; ++it) {
    const Tensor<Real> leaf = adv.leaf();
    const Tensor<Real> obj = ensemble_objective(ensemble, std::span<const double>(ones), leaf,
                                                std::span<const Tensor<Real>>(targets));
    const Tensor<Real> grad = backward(obj, {leaf})[0];
    double l1 = 0.0;
    for (Real g : grad.data()) l1 += std::abs(static_cast<double>(g));
    l1 /= static_cast<double>(grad.numel());
    auto gv = grad.data();
    auto av = adv.data();
    std::vector<Real> next(av.begin(), av.end());
    for (std::size_t i = 0; i < next.size(); ++i) {
      momentum[i] = cfg.mu * momentum[i] + (l1 > 0.0 ? static_cast<double>(gv[i]) / l1 : 0.0);
      const double sign = momentum[i] > 0.0 ? 1.0 : (momentum[i] < 0.0 ? -1.0 : 0.0);
      Real v = static_cast<Real>(static_cast<double>(next[i]) + step * sign);
      v = std::clamp(v, xs[i] - eps, xs[i] + eps);
      next[i] = std::clamp(v, Real(0), Real(1));
    }
    adv = Tensor<Real>(x.shape(), std::move(next));
  }
  return adv;
}

}  // namespace advdiff
