#include "advdiff/gcmg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace advdiff {

ClassifierModel::ClassifierModel(std::size_t classes, std::uint64_t seed) : classes_(classes), seed_(seed) {
  if (classes < 2) throw ConfigError("classifier needs at least two classes");
  Rng rng(seed);
  conv1_ = ConvLayer<Real>::init(3, 16, 3, 2, 1, rng);
  conv2_ = ConvLayer<Real>::init(16, 32, 3, 1, 1, rng);
  fc_ = LinearLayer<Real>::init(32, classes, rng);
}

Tensor<Real> ClassifierModel::features(const Tensor<Real>& x) const {
  if (x.rank() != 4 || x.dim(0) != 1 || x.dim(1) != 3)
    throw ShapeError("classifier expects a 1 x 3 x H x W image, got " + shape_to_string(x.shape()));
  return relu(conv2_(relu(conv1_(add_scalar(x, Real(-0.5))))));
}

Tensor<Real> ClassifierModel::head(const Tensor<Real>& features) const { return fc_(global_avg_pool(features)); }

std::size_t ClassifierModel::predict(const Tensor<Real>& x) const {
  const Tensor<Real> z = logits(x);
  auto v = z.data();
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

NamedParams<Real> ClassifierModel::parameters() {
  return {{"conv1.weight", &conv1_.weight}, {"conv1.bias", &conv1_.bias}, {"conv2.weight", &conv2_.weight},
          {"conv2.bias", &conv2_.bias},     {"fc.weight", &fc_.weight},   {"fc.bias", &fc_.bias}};
}

void ClassifierModel::save(const std::filesystem::path& dir) const {
  nlohmann::json manifest = {{"architecture", kArchitecture}, {"seed", seed_}, {"classes", classes_}};
  auto copy = *this;
  save_parameters(dir, copy.parameters(), manifest);
}

ClassifierModel ClassifierModel::load(const std::filesystem::path& dir) {
  const auto manifest = load_manifest(dir);
  if (manifest.value("architecture", "") != kArchitecture)
    throw FormatError("unsupported classifier architecture in " + dir.string());
  ClassifierModel model(manifest.at("classes").get<std::size_t>(), manifest.at("seed").get<std::uint64_t>());
  load_parameters(dir, model.parameters());
  return model;
}

ClassifierTraining train_classifier(std::span<const Tensor<Real>> images, std::span<const std::size_t> labels,
                                    std::size_t classes, const ClassifierTrainOptions& options) {
  if (images.empty() || images.size() != labels.size())
    throw ConfigError("train_classifier: need one label per image and a non-empty set");
  ClassifierTraining result{ClassifierModel(classes, options.seed), {}};
  Adam<Real> adam(options.lr);
  Rng rng(options.seed ^ 0xC1A55ULL);
  std::vector<std::size_t> order(images.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    double epoch_loss = 0.0;
    for (std::size_t idx : order) {
      ClassifierModel traced = result.model;
      auto params = traced.parameters();
      make_leaves(params);
      const Tensor<Real> loss = cross_entropy(traced.logits(images[idx]), labels[idx]);
      epoch_loss += static_cast<double>(loss.item());
      std::vector<Tensor<Real>> leaves;
      for (auto& [name, p] : params) leaves.push_back(*p);
      adam.step(result.model.parameters(), backward(loss, std::span<const Tensor<Real>>(leaves)));
    }
    result.loss_trace.push_back(epoch_loss / static_cast<double>(order.size()));
  }
  return result;
}

// ---------------------------------------------------------------------------

void MaskConfig::validate(std::size_t height, std::size_t width) const {
  if (k < 1 || k > std::min(height, width)) throw ConfigError("mask patch size k must lie in [1, min(H, W)]");
  if (!(clip_lo >= 0.0 && clip_lo < clip_hi && clip_hi <= 1.0))
    throw ConfigError("CAM clip range must satisfy 0 <= lo < hi <= 1");
  if (patches_per_step < 1) throw ConfigError("patches_per_step must be >= 1");
}

Cam gradcam(const ClassifierModel& classifier, const Tensor<Real>& x, std::size_t y) {
  if (y >= classifier.classes()) throw ConfigError("gradcam: class index out of range");
  const Tensor<Real> acts = classifier.features(x.detach()).leaf();
  const Tensor<Real> logits = classifier.head(acts);
  std::vector<Real> onehot(classifier.classes(), Real(0));
  onehot[y] = Real(1);
  const Tensor<Real> selected = sum(mul(logits, Tensor<Real>(logits.shape(), onehot)));
  const Tensor<Real> grad = backward(selected, {acts})[0];

  const std::size_t channels = acts.dim(1), fh = acts.dim(2), fw = acts.dim(3), plane = fh * fw;
  auto av = acts.data();
  auto gv = grad.data();
  std::vector<double> coarse(plane, 0.0);
  for (std::size_t c = 0; c < channels; ++c) {
    double alpha = 0.0;
    for (std::size_t i = 0; i < plane; ++i) alpha += static_cast<double>(gv[c * plane + i]);
    alpha /= static_cast<double>(plane);
    for (std::size_t i = 0; i < plane; ++i) coarse[i] += alpha * static_cast<double>(av[c * plane + i]);
  }
  for (auto& v : coarse) v = std::max(v, 0.0);

  const std::size_t h = x.dim(2), w = x.dim(3);
  if (h % fh != 0 || w % fw != 0 || h / fh != w / fw) throw ShapeError("gradcam: image size must be a multiple of the CAM grid");
  const std::size_t factor = h / fh;
  Cam cam{h, w, std::vector<double>(h * w)};
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) cam.values[r * w + c] = coarse[(r / factor) * fw + c / factor];

  const auto [lo, hi] = std::minmax_element(cam.values.begin(), cam.values.end());
  const double mn = *lo, range = *hi - *lo;
  for (auto& v : cam.values) v = range > 0.0 ? (v - mn) / range : 0.5;
  return cam;
}

SpatialMap cam_to_prob(const Cam& cam, double clip_lo, double clip_hi) {
  if (!(clip_lo >= 0.0 && clip_lo < clip_hi && clip_hi <= 1.0)) throw ConfigError("cam_to_prob: invalid clip range");
  if (clip_hi <= 0.0) throw ConfigError("cam_to_prob: clip range carries no mass");
  SpatialMap p{cam.height, cam.width, std::vector<double>(cam.values.size())};
  double total = 0.0;
  for (std::size_t i = 0; i < p.values.size(); ++i) {
    p.values[i] = std::clamp(cam.values[i], clip_lo, clip_hi);
    total += p.values[i];
  }
  if (!(total > 0.0)) throw ConfigError("cam_to_prob: zero total mass (clip_lo = 0 and an all-zero map)");
  for (auto& v : p.values) v /= total;
  return p;
}

Mask Mask::filled(std::size_t height, std::size_t width, std::uint8_t value) {
  return Mask{height, width, std::vector<std::uint8_t>(height * width, value), {}};
}

std::size_t Mask::ones() const { return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), 1)); }

std::size_t sample_index(const SpatialMap& p, Rng& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  for (std::size_t i = 0; i < p.values.size(); ++i) {
    acc += p.values[i];
    if (u < acc) return i;
  }
  // Rounding left u above the final partial sum; pick the last supported cell.
  for (std::size_t i = p.values.size(); i > 0; --i)
    if (p.values[i - 1] > 0.0) return i - 1;
  return p.values.size() - 1;
}

Mask patch_mask(std::size_t height, std::size_t width, std::size_t k,
                std::span<const std::pair<std::size_t, std::size_t>> centers) {
  Mask m = Mask::filled(height, width, 0);
  const long long half = static_cast<long long>(k / 2);
  for (const auto& [row, col] : centers) {
    const long long r0 = static_cast<long long>(row) - half, c0 = static_cast<long long>(col) - half;
    for (long long r = std::max(0LL, r0); r < std::min<long long>(static_cast<long long>(height), r0 + static_cast<long long>(k)); ++r)
      for (long long c = std::max(0LL, c0); c < std::min<long long>(static_cast<long long>(width), c0 + static_cast<long long>(k)); ++c)
        m.bits[static_cast<std::size_t>(r) * width + static_cast<std::size_t>(c)] = 1;
    m.centers.emplace_back(row, col);
  }
  return m;
}

Mask sample_mask(const SpatialMap& p, std::size_t k, Rng& rng, std::size_t patches_per_step) {
  std::vector<std::pair<std::size_t, std::size_t>> centers;
  for (std::size_t i = 0; i < patches_per_step; ++i) {
    const std::size_t idx = sample_index(p, rng);
    centers.emplace_back(idx / p.width, idx % p.width);
  }
  return patch_mask(p.height, p.width, k, centers);
}

Tensor<Real> blend(const Tensor<Real>& x_t, const Tensor<Real>& x_tilde, const Mask& m) {
  if (x_t.shape() != x_tilde.shape() || x_t.rank() != 4 || x_t.dim(2) != m.height || x_t.dim(3) != m.width)
    throw ShapeError("blend: x_t " + shape_to_string(x_t.shape()) + ", x_tilde " + shape_to_string(x_tilde.shape()) +
                     " and mask " + std::to_string(m.height) + "x" + std::to_string(m.width) + " are incompatible");
  const std::size_t plane = m.height * m.width;
  auto a = x_t.data();
  auto b = x_tilde.data();
  std::vector<Real> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = m.bits[i % plane] ? a[i] : b[i];
  return Tensor<Real>(x_t.shape(), std::move(out));
}

}  // namespace advdiff
