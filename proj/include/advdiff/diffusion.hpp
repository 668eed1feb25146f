#pragma once

// Noise schedules, forward noising, reverse samplers, and a closed-form
// Gaussian data model whose noise prediction is exact.
//
// Steps are indexed 1..T. alpha_bar(0) is defined as 1 so that samplers can
// step to t = 0 uniformly.

#include <memory>
#include <optional>
#include <vector>

#include "advdiff/tensor.hpp"

namespace advdiff {

class NoiseSchedule {
 public:
  // Cumulative products are taken from `betas` (beta_1..beta_T).
  explicit NoiseSchedule(std::vector<double> betas);

  int steps() const { return static_cast<int>(betas_.size()); }
  double beta(int t) const { return betas_.at(index(t)); }
  double alpha(int t) const { return alphas_.at(index(t)); }
  double alpha_bar(int t) const;

  double beta_start() const { return betas_.front(); }
  double beta_end() const { return betas_.back(); }

 private:
  std::size_t index(int t) const;

  std::vector<double> betas_;
  std::vector<double> alphas_;
  std::vector<double> alpha_bars_;
};

// beta linearly spaced over [beta_start, beta_end] inclusive.
NoiseSchedule make_linear_schedule(int steps, double beta_start, double beta_end);

// Linear schedule with endpoints 1e-4 and 0.02 at T = 1000, scaled by 1000 / T
// for other step counts so the total noise level stays comparable. The upper
// end is capped at 0.5.
double default_beta_start(int steps);
double default_beta_end(int steps);
NoiseSchedule make_default_schedule(int steps);

// sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps
template <typename T>
Tensor<T> forward_noise(const Tensor<T>& x0, int t, const Tensor<T>& eps, const NoiseSchedule& sched);

// Any model that predicts the noise component of x_t.
class EpsPredictor {
 public:
  virtual ~EpsPredictor() = default;
  virtual Tensor<Real> predict_eps(const Tensor<Real>& x_t, int t, const NoiseSchedule& sched) const = 0;
};

// Data distribution N(mu0, diag(var0)). Marginals stay Gaussian under forward
// noising, so the score of every p_t is available in closed form.
class GaussianOracle final : public EpsPredictor {
 public:
  GaussianOracle(Shape shape, std::vector<double> mu0, std::vector<double> var0);
  static GaussianOracle constant(const Shape& shape, double mu0, double var0);

  const Shape& shape() const { return shape_; }
  const std::vector<double>& mu0() const { return mu0_; }
  const std::vector<double>& var0() const { return var0_; }

  // grad log p_t(x_t)
  template <typename T>
  Tensor<T> score(const Tensor<T>& x_t, int t, const NoiseSchedule& sched) const;

  // Draws x ~ p_0.
  template <typename T>
  Tensor<T> sample(Rng& rng) const;

  Tensor<Real> predict_eps(const Tensor<Real>& x_t, int t, const NoiseSchedule& sched) const override;

 private:
  Shape shape_;
  std::vector<double> mu0_;
  std::vector<double> var0_;
};

// Equal-weight mixture of isotropic Gaussians N(mu_k, var0 I). With the
// dataset images as centres this is an exact-score model of the smoothed
// empirical distribution.
class GaussianMixtureOracle final : public EpsPredictor {
 public:
  GaussianMixtureOracle(Shape shape, std::vector<std::vector<double>> centres, double var0);
  static GaussianMixtureOracle from_images(const std::vector<Tensor<Real>>& images, double var0);

  const Shape& shape() const { return shape_; }
  std::size_t components() const { return centres_.size(); }
  double var0() const { return var0_; }

  template <typename T>
  Tensor<T> score(const Tensor<T>& x_t, int t, const NoiseSchedule& sched) const;

  Tensor<Real> predict_eps(const Tensor<Real>& x_t, int t, const NoiseSchedule& sched) const override;

 private:
  Shape shape_;
  std::vector<std::vector<double>> centres_;
  double var0_;
};

// eps* = -sqrt(1 - alpha_bar_t) * grad log p_t(x_t)
template <typename T>
Tensor<T> analytic_eps(const GaussianOracle& oracle, const NoiseSchedule& sched, const Tensor<T>& x_t, int t);

// score = -eps / sqrt(1 - alpha_bar_t)
template <typename T>
Tensor<T> score_from_eps(const Tensor<T>& eps, int t, const NoiseSchedule& sched);

// (x_t + (1 - alpha_t) * score) / sqrt(alpha_t). Mean-only reverse step.
template <typename T>
Tensor<T> ddpm_step(const Tensor<T>& x_t, const Tensor<T>& score, int t, const NoiseSchedule& sched);

// Deterministic when eta == 0; otherwise draws z from `rng` (required).
template <typename T>
Tensor<T> ddim_step(const Tensor<T>& x_t, const Tensor<T>& eps_hat, int t, int t_prev, const NoiseSchedule& sched,
                    double eta, Rng* rng = nullptr);

// sigma used by ddim_step.
double ddim_sigma(const NoiseSchedule& sched, int t, int t_prev, double eta);

enum class SamplerKind { kDdpmMean, kDdim };

SamplerKind parse_sampler(const std::string& name);
std::string sampler_name(SamplerKind kind);

struct ReverseOptions {
  SamplerKind sampler = SamplerKind::kDdpmMean;
  // DDPM: add sqrt(beta_t) * z after every step with t > 1.
  bool stochastic = false;
  // DDIM only.
  double eta = 0.0;
};

// Runs the unguided reverse chain from step `t_from` down to 0.
Tensor<Real> reverse_sample(const Tensor<Real>& x_t, int t_from, const EpsPredictor& model,
                            const NoiseSchedule& sched, const ReverseOptions& options, Rng& rng);

}  // namespace advdiff
