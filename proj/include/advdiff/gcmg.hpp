#pragma once

// GradCAM-guided mask generation: class activation map of a small classifier,
// clipped probability matrix, patch sampling, and mask-based blending.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "advdiff/nn.hpp"

namespace advdiff {

// conv 3->16 (stride 2) -> ReLU -> conv 16->32 -> ReLU -> GAP -> linear to C.
// The second convolution's activations feed GradCAM.
class ClassifierModel {
 public:
  static constexpr const char* kArchitecture = "conv2-c16-c32-gap";

  ClassifierModel(std::size_t classes, std::uint64_t seed);

  std::size_t classes() const { return classes_; }
  std::uint64_t seed() const { return seed_; }

  // Activations of the CAM layer for a 1 x 3 x H x W image.
  Tensor<Real> features(const Tensor<Real>& x) const;
  // Logits (1 x C) from CAM-layer activations.
  Tensor<Real> head(const Tensor<Real>& features) const;
  Tensor<Real> logits(const Tensor<Real>& x) const { return head(features(x)); }
  std::size_t predict(const Tensor<Real>& x) const;

  NamedParams<Real> parameters();
  void save(const std::filesystem::path& dir) const;
  static ClassifierModel load(const std::filesystem::path& dir);

 private:
  std::size_t classes_;
  std::uint64_t seed_;
  ConvLayer<Real> conv1_, conv2_;
  LinearLayer<Real> fc_;
};

struct ClassifierTrainOptions {
  int epochs = 5;
  double lr = 3e-3;
  std::uint64_t seed = 0;
};

struct ClassifierTraining {
  ClassifierModel model;
  std::vector<double> loss_trace;  // mean loss per epoch
};

ClassifierTraining train_classifier(std::span<const Tensor<Real>> images, std::span<const std::size_t> labels,
                                    std::size_t classes, const ClassifierTrainOptions& options);

// Row-major H x W map of doubles.
struct SpatialMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;

  double at(std::size_t row, std::size_t col) const { return values[row * width + col]; }
};

using Cam = SpatialMap;

struct MaskConfig {
  std::size_t k = 8;
  double clip_lo = 0.3;
  double clip_hi = 0.7;
  std::size_t patches_per_step = 1;

  void validate(std::size_t height, std::size_t width) const;
};

// GradCAM of class y: ReLU(sum_k mean(d logit_y / d A_k) * A_k), upsampled to
// the image size and min-max normalized. A constant map becomes all 0.5.
Cam gradcam(const ClassifierModel& classifier, const Tensor<Real>& x, std::size_t y);

// clamp(cam, lo, hi) / sum(clamp(cam, lo, hi))
SpatialMap cam_to_prob(const Cam& cam, double clip_lo, double clip_hi);

struct Mask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> bits;
  // Sampled patch centers as (row, col).
  std::vector<std::pair<std::size_t, std::size_t>> centers;

  static Mask filled(std::size_t height, std::size_t width, std::uint8_t value);
  std::size_t ones() const;
};

// Index of a cell drawn from P by inverse-CDF sampling.
std::size_t sample_index(const SpatialMap& p, Rng& rng);

// Sets a k x k square (rows c - k/2 .. c - k/2 + k - 1, truncated at borders)
// around each center.
Mask patch_mask(std::size_t height, std::size_t width, std::size_t k,
                std::span<const std::pair<std::size_t, std::size_t>> centers);

Mask sample_mask(const SpatialMap& p, std::size_t k, Rng& rng, std::size_t patches_per_step = 1);

// m * x_t + (1 - m) * x_tilde, with the spatial mask applied to every channel.
Tensor<Real> blend(const Tensor<Real>& x_t, const Tensor<Real>& x_tilde, const Mask& m);

}  // namespace advdiff
