#include "advdiff/denoiser.hpp"

#include <cmath>

namespace advdiff {

DenoiserModel::DenoiserModel(std::uint64_t seed) : seed_(seed) {
  Rng rng(seed);
  conv1_ = ConvLayer<Real>::init(3, kWidth, 3, 1, 1, rng);
  conv2_ = ConvLayer<Real>::init(kWidth, kWidth, 3, 1, 1, rng);
  conv3_ = ConvLayer<Real>::init(kWidth, kWidth, 3, 1, 1, rng);
  // Small output layer so an untrained model predicts near-zero noise.
  conv4_ = ConvLayer<Real>::init(kWidth, 3, 3, 1, 1, rng, 0.1);
  time_proj_ = LinearLayer<Real>::init(kEmbedDim, kWidth, rng);
}

Tensor<Real> timestep_features(int t, std::size_t dim) {
  std::vector<Real> f(dim);
  const std::size_t half = dim / 2;
  for (std::size_t k = 0; k < half; ++k) {
    const double freq = std::pow(1000.0, -static_cast<double>(k) / static_cast<double>(half));
    f[k] = static_cast<Real>(std::sin(t * freq));
    f[half + k] = static_cast<Real>(std::cos(t * freq));
  }
  return Tensor<Real>({1, dim}, std::move(f));
}

Tensor<Real> DenoiserModel::forward(const Tensor<Real>& x_t, int t) const {
  if (x_t.rank() != 4 || x_t.dim(0) != 1 || x_t.dim(1) != 3)
    throw ShapeError("denoiser expects a 1 x 3 x H x W input, got " + shape_to_string(x_t.shape()));
  const Tensor<Real> emb = reshape(time_proj_(timestep_features(t, kEmbedDim)), Shape{kWidth});
  Tensor<Real> h = relu(add_channel_bias(conv1_(x_t), emb));
  h = relu(conv2_(h));
  h = relu(conv3_(h));
  return conv4_(h);
}

Tensor<Real> DenoiserModel::predict_eps(const Tensor<Real>& x_t, int t, const NoiseSchedule& sched) const {
  if (t < 1 || t > sched.steps()) throw ConfigError("denoiser: timestep out of range");
  return forward(x_t, t);
}

NamedParams<Real> DenoiserModel::parameters() {
  return {{"conv1.weight", &conv1_.weight}, {"conv1.bias", &conv1_.bias},   {"conv2.weight", &conv2_.weight},
          {"conv2.bias", &conv2_.bias},     {"conv3.weight", &conv3_.weight}, {"conv3.bias", &conv3_.bias},
          {"conv4.weight", &conv4_.weight}, {"conv4.bias", &conv4_.bias},   {"time.weight", &time_proj_.weight},
          {"time.bias", &time_proj_.bias}};
}

void DenoiserModel::save(const std::filesystem::path& dir, const NoiseSchedule& sched) const {
  nlohmann::json manifest = {{"architecture", kArchitecture},
                             {"seed", seed_},
                             {"schedule", {{"kind", "linear"},
                                           {"T", sched.steps()},
                                           {"beta_start", sched.beta_start()},
                                           {"beta_end", sched.beta_end()}}}};
  auto copy = *this;
  save_parameters(dir, copy.parameters(), manifest);
}

DenoiserModel DenoiserModel::load(const std::filesystem::path& dir, NoiseSchedule* sched) {
  const auto manifest = load_manifest(dir);
  if (manifest.value("architecture", "") != kArchitecture)
    throw FormatError("unsupported denoiser architecture in " + dir.string());
  DenoiserModel model(manifest.at("seed").get<std::uint64_t>());
  load_parameters(dir, model.parameters());
  if (sched) {
    const auto& s = manifest.at("schedule");
    *sched = make_linear_schedule(s.at("T").get<int>(), s.at("beta_start").get<double>(),
                                  s.at("beta_end").get<double>());
  }
  return model;
}

DenoiserTraining train_denoiser(std::span<const Tensor<Real>> dataset, const NoiseSchedule& sched,
                                const DenoiserTrainOptions& options) {
  if (dataset.empty()) throw ConfigError("train_denoiser: empty dataset");
  if (options.batch == 0) throw ConfigError("train_denoiser: batch must be positive");
  DenoiserTraining result{DenoiserModel(options.seed), {}};
  Rng rng(options.seed ^ 0x9E3779B97F4A7C15ULL);
  Adam<Real> adam(options.lr);
  for (int step = 0; step < options.steps; ++step) {
    DenoiserModel traced = result.model;
    auto params = traced.parameters();
    make_leaves(params);
    Tensor<Real> total;
    for (std::size_t b = 0; b < options.batch; ++b) {
      const Tensor<Real>& x0 = dataset[rng.below(dataset.size())];
      const int t = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(sched.steps())));
      const Tensor<Real> eps = Tensor<Real>::randn(x0.shape(), rng);
      const Tensor<Real> diff = sub(traced.forward(forward_noise(x0, t, eps, sched), t), eps);
      const Tensor<Real> loss = mean(mul(diff, diff));
      total = b == 0 ? loss : add(total, loss);
    }
    total = scale(total, static_cast<Real>(1.0 / static_cast<double>(options.batch)));
    result.loss_trace.push_back(static_cast<double>(total.item()));
    std::vector<Tensor<Real>> leaves;
    for (auto& [name, p] : params) leaves.push_back(*p);
    const auto grads = backward(total, std::span<const Tensor<Real>>(leaves));
    adam.step(result.model.parameters(), grads);
  }
  return result;
}

double denoiser_loss(const EpsPredictor& model, std::span<const Tensor<Real>> dataset, const NoiseSchedule& sched,
                     std::size_t samples, std::uint64_t seed) {
  if (dataset.empty() || samples == 0) throw ConfigError("denoiser_loss: empty evaluation set");
  Rng rng(seed);
  double total = 0.0;
  for (std::size_t i = 0; i < samples; ++i) {
    const Tensor<Real>& x0 = dataset[rng.below(dataset.size())];
    const int t = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(sched.steps())));
    const Tensor<Real> eps = Tensor<Real>::randn(x0.shape(), rng);
    const Tensor<Real> pred = model.predict_eps(forward_noise(x0, t, eps, sched), t, sched);
    double sq = 0.0;
    for (std::size_t j = 0; j < eps.numel(); ++j) {
      const double d = static_cast<double>(pred[j]) - static_cast<double>(eps[j]);
      sq += d * d;
    }
    total += sq / static_cast<double>(eps.numel());
  }
  return total / static_cast<double>(samples);
}

}  // namespace advdiff
