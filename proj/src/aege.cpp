#include "advdiff/aege.hpp"

#include <algorithm>
#include <cmath>

namespace advdiff {

std::vector<double> update_weights(std::span<const double> losses_prev1, std::span<const double> losses_prev2,
                                   double tau, double ratio_clip) {
  if (!(ratio_clip > 0.0)) throw ConfigError("update_weights: ratio clip must be positive");
  if (losses_prev1.size() != losses_prev2.size() || losses_prev1.empty())
    throw ShapeError("update_weights: loss histories must be non-empty and equally long");
  const std::size_t n = losses_prev1.size();
  std::vector<double> ratio(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(losses_prev1[i]) || !std::isfinite(losses_prev2[i]))
      throw NonFiniteError("update_weights: non-finite loss");
    if (losses_prev2[i] == 0.0) throw NonFiniteError("update_weights: zero denominator loss");
    ratio[i] = losses_prev1[i] / (std::abs(losses_prev2[i]) + 1e-8);
    if (!std::isfinite(ratio[i])) throw NonFiniteError("update_weights: non-finite loss ratio");
    ratio[i] = std::clamp(ratio[i], -ratio_clip, ratio_clip);
  }
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < n; ++j) acc += std::exp(tau * (ratio[j] - ratio[i]));
    w[i] = acc / static_cast<double>(n);
    if (!std::isfinite(w[i])) throw NonFiniteError("update_weights: weight overflow");
  }
  return w;
}

AegeState::AegeState(std::size_t members, AegeParams params) : params_(params), weights_(members, 1.0) {
  if (members == 0) throw ConfigError("AEGE needs at least one member");
  if (!(params.delta > 0.0)) throw ConfigError("AEGE: clip threshold must be positive");
}

const std::vector<double>& AegeState::refresh_weights() {
  if (recorded_ >= 2) weights_ = update_weights(prev1_, prev2_, params_.tau, params_.ratio_clip);
  return weights_;
}

void AegeState::record_losses(std::vector<double> losses) {
  if (losses.size() != weights_.size()) throw ShapeError("AEGE: one loss per member required");
  for (double l : losses)
    if (!std::isfinite(l)) throw NonFiniteError("AEGE: non-finite loss");
  prev2_ = std::move(prev1_);
  prev1_ = std::move(losses);
  ++recorded_;
}

void AegeState::reset() {
  std::fill(weights_.begin(), weights_.end(), 1.0);
  prev1_.clear();
  prev2_.clear();
  recorded_ = 0;
}

template <typename T>
std::vector<Tensor<T>> target_embeddings(const EncoderEnsemble<T>& ensemble, const Tensor<T>& x_tar) {
  std::vector<Tensor<T>> out;
  const Tensor<T> plain = x_tar.detach();
  for (const auto& m : ensemble.members) out.push_back(m.embed(plain));
  return out;
}

template <typename T>
std::vector<double> member_similarities(const EncoderEnsemble<T>& ensemble, const Tensor<T>& x,
                                        std::span<const Tensor<T>> targets) {
  if (targets.size() != ensemble.size()) throw ShapeError("one target embedding per member required");
  const Tensor<T> plain = x.detach();
  std::vector<double> out;
  for (std::size_t i = 0; i < ensemble.size(); ++i)
    out.push_back(static_cast<double>(cosine(ensemble.members[i].embed(plain), targets[i]).item()));
  return out;
}

template <typename T>
Tensor<T> ensemble_objective(const EncoderEnsemble<T>& ensemble, std::span<const double> w, const Tensor<T>& x,
                             std::span<const Tensor<T>> targets) {
  if (w.size() != ensemble.size()) throw ShapeError("ensemble_objective: one weight per member required");
  if (targets.size() != ensemble.size()) throw ShapeError("ensemble_objective: one target per member required");
  Tensor<T> total;
  for (std::size_t i = 0; i < ensemble.size(); ++i) {
    const Tensor<T> term = scale(cosine(ensemble.members[i].embed(x), targets[i]), static_cast<T>(w[i]));
    total = i == 0 ? term : add(total, term);
  }
  return total;
}

template <typename T>
Tensor<T> ensemble_objective(const EncoderEnsemble<T>& ensemble, std::span<const double> w, const Tensor<T>& x,
                             const Tensor<T>& x_tar) {
  if (x.shape() != x_tar.shape()) throw ShapeError("ensemble_objective: x and x_tar shapes differ");
  const auto targets = target_embeddings(ensemble, x_tar);
  return ensemble_objective(ensemble, w, x, std::span<const Tensor<T>>(targets));
}

template <typename T>
GradientEstimate<T> estimate_gradient(const EncoderEnsemble<T>& ensemble, std::span<const double> w,
                                      const Tensor<T>& x_hat, std::span<const Tensor<T>> targets, double delta) {
  if (!(delta > 0.0)) throw ConfigError("estimate_gradient: delta must be positive");
  const Tensor<T> leaf = x_hat.leaf();
  const Tensor<T> objective = ensemble_objective(ensemble, w, leaf, targets);
  const Tensor<T> grad = backward(objective, {leaf})[0];
  const T d = static_cast<T>(delta);
  GradientEstimate<T> out;
  out.g = map_values(grad, [d](T v) { return std::clamp(v, -d, d); });
  out.objective = static_cast<double>(objective.item());
  out.raw_linf = static_cast<double>(max_abs(grad));
  out.linf = static_cast<double>(max_abs(out.g));
  return out;
}

template <typename T>
Tensor<T> compose_score(const Tensor<T>& eps_hat, const Tensor<T>& g, int t, const NoiseSchedule& sched, double s,
                        GuidanceSign sign) {
  if (eps_hat.shape() != g.shape()) throw ShapeError("compose_score: eps and gradient shapes differ");
  const Tensor<T> unguided = score_from_eps(eps_hat, t, sched);
  if (s == 0.0) return unguided;
  const double k = sign == GuidanceSign::kAscend ? s : -s;
  return add(unguided, scale(g, static_cast<T>(k)));
}

#define ADVDIFF_INSTANTIATE(T)                                                                                     \
  template std::vector<Tensor<T>> target_embeddings(const EncoderEnsemble<T>&, const Tensor<T>&);                  \
  template std::vector<double> member_similarities(const EncoderEnsemble<T>&, const Tensor<T>&,                    \
                                                   std::span<const Tensor<T>>);                                    \
  template Tensor<T> ensemble_objective(const EncoderEnsemble<T>&, std::span<const double>, const Tensor<T>&,      \
                                        std::span<const Tensor<T>>);                                               \
  template Tensor<T> ensemble_objective(const EncoderEnsemble<T>&, std::span<const double>, const Tensor<T>&,      \
                                        const Tensor<T>&);                                                         \
  template GradientEstimate<T> estimate_gradient(const EncoderEnsemble<T>&, std::span<const double>,               \
                                                 const Tensor<T>&, std::span<const Tensor<T>>, double);            \
  template Tensor<T> compose_score(const Tensor<T>&, const Tensor<T>&, int, const NoiseSchedule&, double,          \
                                   GuidanceSign);

ADVDIFF_INSTANTIATE(float)
ADVDIFF_INSTANTIATE(double)

#undef ADVDIFF_INSTANTIATE

}  // namespace advdiff
