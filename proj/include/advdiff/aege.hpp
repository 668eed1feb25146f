#pragma once

// Adaptive ensemble gradient estimation: per-encoder weights from recent loss
// ratios, the weighted ensemble cosine objective, gradient clipping, and
// composition of the guided score.

#include <limits>
#include <span>
#include <vector>

#include "advdiff/diffusion.hpp"
#include "advdiff/encoders.hpp"

namespace advdiff {

struct AegeParams {
  double tau = 2.0;       // temperature
  double s = 35.0;        // guidance scale
  double delta = 0.0025;  // gradient clip threshold
  // Loss ratios are clamped to [-ratio_clip, ratio_clip] before weighting; a
  // loss near zero otherwise sends the ratio, and the weights, to overflow.
  double ratio_clip = 5.0;
};

// w_i = sum_j exp(tau * r_j) / (N * exp(tau * r_i)), r_i = L_i(t+1) / (|L_i(t+2)| + 1e-8).
// Evaluated as mean_j exp(tau * (r_j - r_i)) so equal ratios give exactly 1.
// Ratios beyond +-ratio_clip are clamped (unbounded by default).
std::vector<double> update_weights(std::span<const double> losses_prev1, std::span<const double> losses_prev2,
                                   double tau, double ratio_clip = std::numeric_limits<double>::infinity());

// Loss history and current weights for one attack.
class AegeState {
 public:
  AegeState(std::size_t members, AegeParams params);

  const AegeParams& params() const { return params_; }
  const std::vector<double>& weights() const { return weights_; }
  std::size_t members() const { return weights_.size(); }

  // Recomputes the weights from the two most recent loss vectors. Until two
  // vectors have been recorded the weights stay at 1.
  const std::vector<double>& refresh_weights();
  void record_losses(std::vector<double> losses);
  // Clears history and resets all weights to 1.
  void reset();

 private:
  AegeParams params_;
  std::vector<double> weights_;
  std::vector<double> prev1_;  // L(t+1)
  std::vector<double> prev2_;  // L(t+2)
  std::size_t recorded_ = 0;
};

// Embeddings of the target image under each member, computed untraced.
template <typename T>
std::vector<Tensor<T>> target_embeddings(const EncoderEnsemble<T>& ensemble, const Tensor<T>& x_tar);

// Per-member cosine similarities CS(phi_i(x), phi_i(x_tar)), untraced.
template <typename T>
std::vector<double> member_similarities(const EncoderEnsemble<T>& ensemble, const Tensor<T>& x,
                                        std::span<const Tensor<T>> targets);

// sum_i w_i * CS(phi_i(x), phi_i(x_tar)); traced when x is.
template <typename T>
Tensor<T> ensemble_objective(const EncoderEnsemble<T>& ensemble, std::span<const double> w, const Tensor<T>& x,
                             std::span<const Tensor<T>> targets);

template <typename T>
Tensor<T> ensemble_objective(const EncoderEnsemble<T>& ensemble, std::span<const double> w, const Tensor<T>& x,
                             const Tensor<T>& x_tar);

template <typename T>
struct GradientEstimate {
  Tensor<T> g;           // clipped to [-delta, delta]
  double objective = 0;  // weighted objective at x_hat
  double raw_linf = 0;   // ||grad||_inf before clipping
  double linf = 0;       // ||g||_inf
};

template <typename T>
GradientEstimate<T> estimate_gradient(const EncoderEnsemble<T>& ensemble, std::span<const double> w,
                                      const Tensor<T>& x_hat, std::span<const Tensor<T>> targets, double delta);

// kAscend: score = -eps/sqrt(1 - alpha_bar_t) + s * g, so guidance increases
// the target similarity. kNegated flips the guidance term for ablations.
enum class GuidanceSign { kAscend, kNegated };

template <typename T>
Tensor<T> compose_score(const Tensor<T>& eps_hat, const Tensor<T>& g, int t, const NoiseSchedule& sched, double s,
                        GuidanceSign sign = GuidanceSign::kAscend);

}  // namespace advdiff
