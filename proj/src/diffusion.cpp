#include "advdiff/diffusion.hpp"

#include <algorithm>
#include <cmath>

namespace advdiff {

NoiseSchedule::NoiseSchedule(std::vector<double> betas) : betas_(std::move(betas)) {
  if (betas_.empty()) throw ConfigError("noise schedule needs at least one step");
  double bar = 1.0;
  for (double b : betas_) {
    if (!(b > 0.0 && b < 1.0)) throw ConfigError("noise schedule betas must lie in (0, 1)");
    alphas_.push_back(1.0 - b);
    bar *= 1.0 - b;
    alpha_bars_.push_back(bar);
  }
}

std::size_t NoiseSchedule::index(int t) const {
  if (t < 1 || t > steps())
    throw ConfigError("timestep " + std::to_string(t) + " outside [1, " + std::to_string(steps()) + "]");
  return static_cast<std::size_t>(t - 1);
}

double NoiseSchedule::alpha_bar(int t) const {
  if (t == 0) return 1.0;
  return alpha_bars_.at(index(t));
}

NoiseSchedule make_linear_schedule(int steps, double beta_start, double beta_end) {
  if (steps < 1) throw ConfigError("schedule step count must be >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
    throw ConfigError("schedule requires 0 < beta_start <= beta_end < 1");
  std::vector<double> betas(static_cast<std::size_t>(steps));
  for (int i = 0; i < steps; ++i) {
    const double f = steps == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(steps - 1);
    betas[static_cast<std::size_t>(i)] = beta_start + f * (beta_end - beta_start);
  }
  return NoiseSchedule(std::move(betas));
}

double default_beta_start(int steps) {
  if (steps < 1) throw ConfigError("schedule step count must be >= 1");
  return std::min(0.1 / steps, 0.5);
}

double default_beta_end(int steps) {
  if (steps < 1) throw ConfigError("schedule step count must be >= 1");
  return std::min(20.0 / steps, 0.5);
}

NoiseSchedule make_default_schedule(int steps) {
  return make_linear_schedule(steps, default_beta_start(steps), default_beta_end(steps));
}

template <typename T>
Tensor<T> forward_noise(const Tensor<T>& x0, int t, const Tensor<T>& eps, const NoiseSchedule& sched) {
  if (x0.shape() != eps.shape())
    throw ShapeError("forward_noise: noise shape " + shape_to_string(eps.shape()) + " does not match " +
                     shape_to_string(x0.shape()));
  const double ab = sched.alpha_bar(t);
  if (t == 0) throw ConfigError("forward_noise: t must be >= 1");
  return add(scale(x0, static_cast<T>(std::sqrt(ab))), scale(eps, static_cast<T>(std::sqrt(1.0 - ab))));
}

// ---------------------------------------------------------------------------
// Gaussian oracle

GaussianOracle::GaussianOracle(Shape shape, std::vector<double> mu0, std::vector<double> var0)
    : shape_(std::move(shape)), mu0_(std::move(mu0)), var0_(std::move(var0)) {
  const std::size_t n = shape_numel(shape_);
  if (mu0_.size() != n || var0_.size() != n) throw ShapeError("GaussianOracle: moments do not match shape");
  for (double v : var0_)
    if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError("GaussianOracle: variances must be positive");
  for (double m : mu0_)
    if (!std::isfinite(m)) throw ConfigError("GaussianOracle: means must be finite");
}

GaussianOracle GaussianOracle::constant(const Shape& shape, double mu0, double var0) {
  const std::size_t n = shape_numel(shape);
  return GaussianOracle(shape, std::vector<double>(n, mu0), std::vector<double>(n, var0));
}

template <typename T>
Tensor<T> GaussianOracle::score(const Tensor<T>& x_t, int t, const NoiseSchedule& sched) const {
  if (x_t.shape() != shape_)
    throw ShapeError("GaussianOracle: input " + shape_to_string(x_t.shape()) + " vs " + shape_to_string(shape_));
  const double ab = sched.alpha_bar(t);
  const double sab = std::sqrt(ab);
  auto xv = x_t.data();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double var_t = ab * var0_[i] + (1.0 - ab);
    out[i] = static_cast<T>(-(static_cast<double>(xv[i]) - sab * mu0_[i]) / var_t);
  }
  return Tensor<T>(shape_, std::move(out));
}

template <typename T>
Tensor<T> GaussianOracle::sample(Rng& rng) const {
  std::vector<T> out(mu0_.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(mu0_[i] + std::sqrt(var0_[i]) * rng.normal());
  return Tensor<T>(shape_, std::move(out));
}

Tensor<Real> GaussianOracle::predict_eps(const Tensor<Real>& x_t, int t, const NoiseSchedule& sched) const {
  return analytic_eps(*this, sched, x_t, t);
}

GaussianMixtureOracle::GaussianMixtureOracle(Shape shape, std::vector<std::vector<double>> centres, double var0)
    : shape_(std::move(shape)), centres_(std::move(centres)), var0_(var0) {
  if (centres_.empty()) throw ConfigError("GaussianMixtureOracle: needs at least one component");
  if (!(var0_ > 0.0) || !std::isfinite(var0_)) throw ConfigError("GaussianMixtureOracle: variance must be positive");
  const std::size_t n = shape_numel(shape_);
  for (const auto& c : centres_)
    if (c.size() != n) throw ShapeError("GaussianMixtureOracle: centre does not match shape");
}

GaussianMixtureOracle GaussianMixtureOracle::from_images(const std::vector<Tensor<Real>>& images, double var0) {
  if (images.empty()) throw ConfigError("GaussianMixtureOracle: empty image set");
  std::vector<std::vector<double>> centres;
  for (const auto& img : images) {
    if (img.shape() != images.front().shape()) throw ShapeError("GaussianMixtureOracle: images differ in shape");
    centres.emplace_back(img.data().begin(), img.data().end());
  }
  return GaussianMixtureOracle(images.front().shape(), std::move(centres), var0);
}

template <typename T>
Tensor<T> GaussianMixtureOracle::score(const Tensor<T>& x_t, int t, const NoiseSchedule& sched) const {
  if (x_t.shape() != shape_)
    throw ShapeError("GaussianMixtureOracle: input " + shape_to_string(x_t.shape()) + " vs " + shape_to_string(shape_));
  const double ab = sched.alpha_bar(t);
  const double sab = std::sqrt(ab);
  const double var_t = ab * var0_ + (1.0 - ab);
  auto xv = x_t.data();
  // Responsibilities via log-sum-exp of -||x - sqrt(ab) mu_k||^2 / (2 var_t).
  std::vector<double> logits(centres_.size());
  for (std::size_t k = 0; k < centres_.size(); ++k) {
    double d2 = 0.0;
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const double d = static_cast<double>(xv[i]) - sab * centres_[k][i];
      d2 += d * d;
    }
    logits[k] = -d2 / (2.0 * var_t);
  }
  const double top = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (auto& l : logits) total += (l = std::exp(l - top));
  std::vector<double> mean(xv.size(), 0.0);
  for (std::size_t k = 0; k < centres_.size(); ++k) {
    const double r = logits[k] / total;
    if (r == 0.0) continue;
    for (std::size_t i = 0; i < xv.size(); ++i) mean[i] += r * centres_[k][i];
  }
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<T>(-(static_cast<double>(xv[i]) - sab * mean[i]) / var_t);
  return Tensor<T>(shape_, std::move(out));
}

Tensor<Real> GaussianMixtureOracle::predict_eps(const Tensor<Real>& x_t, int t, const NoiseSchedule& sched) const {
  return scale(score(x_t, t, sched), static_cast<Real>(-std::sqrt(1.0 - sched.alpha_bar(t))));
}

template <typename T>
Tensor<T> analytic_eps(const GaussianOracle& oracle, const NoiseSchedule& sched, const Tensor<T>& x_t, int t) {
  const Tensor<T> s = oracle.score(x_t, t, sched);
  return scale(s, static_cast<T>(-std::sqrt(1.0 - sched.alpha_bar(t))));
}

template <typename T>
Tensor<T> score_from_eps(const Tensor<T>& eps, int t, const NoiseSchedule& sched) {
  return scale(eps, static_cast<T>(-1.0 / std::sqrt(1.0 - sched.alpha_bar(t))));
}

// ---------------------------------------------------------------------------
// Reverse steps

template <typename T>
Tensor<T> ddpm_step(const Tensor<T>& x_t, const Tensor<T>& score, int t, const NoiseSchedule& sched) {
  if (x_t.shape() != score.shape()) throw ShapeError("ddpm_step: score shape does not match x_t");
  const double beta = sched.beta(t);
  const double inv_sqrt_alpha = 1.0 / std::sqrt(sched.alpha(t));
  auto xv = x_t.data();
  auto sv = score.data();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<T>((static_cast<double>(xv[i]) + beta * static_cast<double>(sv[i])) * inv_sqrt_alpha);
  return Tensor<T>(x_t.shape(), std::move(out));
}

double ddim_sigma(const NoiseSchedule& sched, int t, int t_prev, double eta) {
  const double ab = sched.alpha_bar(t);
  const double ab_prev = sched.alpha_bar(t_prev);
  return eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab)) * std::sqrt(1.0 - ab / ab_prev);
}

template <typename T>
Tensor<T> ddim_step(const Tensor<T>& x_t, const Tensor<T>& eps_hat, int t, int t_prev, const NoiseSchedule& sched,
                    double eta, Rng* rng) {
  if (x_t.shape() != eps_hat.shape()) throw ShapeError("ddim_step: eps shape does not match x_t");
  if (!(t_prev < t) || t_prev < 0) throw ConfigError("ddim_step: requires 0 <= t_prev < t");
  if (!(eta >= 0.0 && eta <= 1.0)) throw ConfigError("ddim_step: eta must lie in [0, 1]");
  const double ab = sched.alpha_bar(t);
  const double ab_prev = sched.alpha_bar(t_prev);
  const double sigma = ddim_sigma(sched, t, t_prev, eta);
  if (sigma > 0.0 && rng == nullptr) throw ConfigError("ddim_step: stochastic step needs a generator");
  const double dir = std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma * sigma));
  const double sab = std::sqrt(ab), s1ab = std::sqrt(1.0 - ab), sab_prev = std::sqrt(ab_prev);
  auto xv = x_t.data();
  auto ev = eps_hat.data();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double e = static_cast<double>(ev[i]);
    const double x0_hat = (static_cast<double>(xv[i]) - s1ab * e) / sab;
    double v = sab_prev * x0_hat + dir * e;
    if (sigma > 0.0) v += sigma * rng->normal();
    out[i] = static_cast<T>(v);
  }
  return Tensor<T>(x_t.shape(), std::move(out));
}

SamplerKind parse_sampler(const std::string& name) {
  if (name == "ddpm-mean" || name == "ddpm") return SamplerKind::kDdpmMean;
  if (name == "ddim") return SamplerKind::kDdim;
  throw ConfigError("unknown sampler '" + name + "' (expected ddpm-mean or ddim)");
}

std::string sampler_name(SamplerKind kind) { return kind == SamplerKind::kDdim ? "ddim" : "ddpm-mean"; }

Tensor<Real> reverse_sample(const Tensor<Real>& x_t, int t_from, const EpsPredictor& model,
                            const NoiseSchedule& sched, const ReverseOptions& options, Rng& rng) {
  if (t_from < 0 || t_from > sched.steps()) throw ConfigError("reverse_sample: start step out of range");
  Tensor<Real> x = x_t;
  for (int t = t_from; t >= 1; --t) {
    const Tensor<Real> eps = model.predict_eps(x, t, sched);
    if (options.sampler == SamplerKind::kDdim) {
      x = ddim_step(x, eps, t, t - 1, sched, options.eta, &rng);
      continue;
    }
    x = ddpm_step(x, score_from_eps(eps, t, sched), t, sched);
    if (options.stochastic && t > 1) {
      const double sigma = std::sqrt(sched.beta(t));
      x = add(x, Tensor<Real>::randn(x.shape(), rng, sigma));
    }
  }
  return x;
}

#define ADVDIFF_INSTANTIATE(T)                                                                                  \
  template Tensor<T> forward_noise(const Tensor<T>&, int, const Tensor<T>&, const NoiseSchedule&);              \
  template Tensor<T> GaussianOracle::score(const Tensor<T>&, int, const NoiseSchedule&) const;                  \
  template Tensor<T> GaussianOracle::sample(Rng&) const;                                                        \
  template Tensor<T> GaussianMixtureOracle::score(const Tensor<T>&, int, const NoiseSchedule&) const;           \
  template Tensor<T> analytic_eps(const GaussianOracle&, const NoiseSchedule&, const Tensor<T>&, int);          \
  template Tensor<T> score_from_eps(const Tensor<T>&, int, const NoiseSchedule&);                               \
  template Tensor<T> ddpm_step(const Tensor<T>&, const Tensor<T>&, int, const NoiseSchedule&);                  \
  template Tensor<T> ddim_step(const Tensor<T>&, const Tensor<T>&, int, int, const NoiseSchedule&, double, Rng*);

ADVDIFF_INSTANTIATE(float)
ADVDIFF_INSTANTIATE(double)

#undef ADVDIFF_INSTANTIATE

}  // namespace advdiff
