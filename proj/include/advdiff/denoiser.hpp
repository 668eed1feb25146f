#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "advdiff/diffusion.hpp"
#include "advdiff/nn.hpp"

namespace advdiff {

// Convolutional eps-predictor: 3 -> 32 -> 32 -> 32 -> 3 (3x3, same padding),
// ReLU between layers, with a sinusoidal timestep embedding projected to 32
// channels and added after the first convolution.
class DenoiserModel final : public EpsPredictor {
 public:
  static constexpr const char* kArchitecture = "conv4-c32-temb";
  static constexpr std::size_t kWidth = 32;
  static constexpr std::size_t kEmbedDim = 32;

  explicit DenoiserModel(std::uint64_t seed);

  // Differentiable forward pass for a 1 x 3 x H x W input.
  Tensor<Real> forward(const Tensor<Real>& x_t, int t) const;

  Tensor<Real> predict_eps(const Tensor<Real>& x_t, int t, const NoiseSchedule& sched) const override;

  NamedParams<Real> parameters();
  std::uint64_t seed() const { return seed_; }

  void save(const std::filesystem::path& dir, const NoiseSchedule& sched) const;
  // Returns the model; the schedule stored alongside it is written to `sched` when non-null.
  static DenoiserModel load(const std::filesystem::path& dir, NoiseSchedule* sched = nullptr);

 private:
  std::uint64_t seed_;
  ConvLayer<Real> conv1_, conv2_, conv3_, conv4_;
  LinearLayer<Real> time_proj_;
};

// Fixed sinusoidal features of a timestep, shape 1 x dim.
Tensor<Real> timestep_features(int t, std::size_t dim);

struct DenoiserTraining {
  DenoiserModel model;
  std::vector<double> loss_trace;  // mean batch loss per step
};

struct DenoiserTrainOptions {
  int steps = 200;
  double lr = 2e-3;
  std::size_t batch = 4;
  std::uint64_t seed = 0;
};

// Minimizes E ||eps_theta(x_t, t) - eps||^2 with t uniform on 1..T.
DenoiserTraining train_denoiser(std::span<const Tensor<Real>> dataset, const NoiseSchedule& sched,
                                const DenoiserTrainOptions& options);

// Seeded Monte-Carlo estimate of the same objective on `dataset`.
double denoiser_loss(const EpsPredictor& model, std::span<const Tensor<Real>> dataset, const NoiseSchedule& sched,
                     std::size_t samples, std::uint64_t seed);

}  // namespace advdiff
