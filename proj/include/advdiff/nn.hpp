#pragma once

// Layers, parameter bookkeeping, and the Adam optimizer shared by the
// denoiser, encoders, and classifier.

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "advdiff/tensor.hpp"
#include "json.hpp"

namespace advdiff {

template <typename T>
struct ConvLayer {
  Tensor<T> weight;  // Cout x Cin x K x K
  Tensor<T> bias;    // Cout
  Conv2dOptions options;

  // He-style normal initialization scaled by `gain`; zero bias.
  static ConvLayer init(std::size_t cin, std::size_t cout, std::size_t kernel, std::size_t stride,
                        std::size_t padding, Rng& rng, double gain = 1.0);

  Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, weight, &bias, options); }
};

template <typename T>
struct LinearLayer {
  Tensor<T> weight;  // in x out
  Tensor<T> bias;    // 1 x out

  static LinearLayer init(std::size_t in, std::size_t out, Rng& rng, double gain = 1.0);

  // x: 1 x in
  Tensor<T> operator()(const Tensor<T>& x) const { return add(matmul(x, weight), bias); }
};

template <typename T>
using NamedParams = std::vector<std::pair<std::string, Tensor<T>*>>;

// Replaces every parameter with a differentiable leaf copy.
template <typename T>
void make_leaves(const NamedParams<T>& params) {
  for (auto& [name, p] : params) *p = p->leaf();
}

template <typename T>
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  // grads[i] is the gradient of params[i]; parameters are replaced in place.
  void step(const NamedParams<T>& params, const std::vector<Tensor<T>>& grads);

 private:
  double lr_, beta1_, beta2_, eps_;
  long step_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// Writes <dir>/<name>.atns for every parameter plus <dir>/manifest.json.
template <typename T>
void save_parameters(const std::filesystem::path& dir, const NamedParams<T>& params, const nlohmann::json& manifest);

// Loads parameters by name, checking shapes against the current values.
template <typename T>
void load_parameters(const std::filesystem::path& dir, const NamedParams<T>& params);

nlohmann::json load_manifest(const std::filesystem::path& dir);

}  // namespace advdiff
