#include "advdiff/dataset.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "advdiff/image_io.hpp"

namespace advdiff {

namespace {

constexpr int kSuper = 4;

bool inside(ToyShape shape, double dx, double dy, double r) {
  switch (shape) {
    case ToyShape::kCircle:
      return dx * dx + dy * dy <= r * r;
    case ToyShape::kSquare:
      return std::abs(dx) <= 0.8 * r && std::abs(dy) <= 0.8 * r;
    case ToyShape::kTriangle: {
      // Apex up, base at dy = +0.8r.
      if (dy < -r || dy > 0.8 * r) return false;
      const double half_width = 0.5 * (dy + r) * 1.15;
      return std::abs(dx) <= half_width;
    }
    case ToyShape::kCross: {
      const double arm = 0.3 * r;
      return (std::abs(dx) <= arm && std::abs(dy) <= r) || (std::abs(dy) <= arm && std::abs(dx) <= r);
    }
  }
  return false;
}

struct Palette {
  std::array<double, 3> background;
  std::array<double, 3> foreground;
};

constexpr std::array<Palette, 2> kPalettes = {{
    {{0.88, 0.82, 0.66}, {0.78, 0.20, 0.16}},  // warm
    {{0.14, 0.20, 0.36}, {0.22, 0.80, 0.62}},  // cool
}};

}  // namespace

std::string toy_class_name(std::size_t label) {
  static const char* shapes[] = {"circle", "square", "triangle", "cross"};
  static const char* palettes[] = {"warm", "cool"};
  if (label >= kToyClasses) throw ConfigError("toy class label out of range");
  return std::string(shapes[label % 4]) + "-" + palettes[label / 4];
}

Tensor<Real> render_toy_image(std::size_t label, std::size_t size, Rng& rng) {
  if (label >= kToyClasses) throw ConfigError("toy class label out of range");
  if (size < 8) throw ConfigError("toy images must be at least 8x8");
  const auto shape = static_cast<ToyShape>(label % 4);
  const Palette& pal = kPalettes[label / 4];
  const double n = static_cast<double>(size);
  const double r = n * rng.uniform(0.32, 0.42);
  const double cx = n / 2 + rng.uniform(-0.06, 0.06) * n;
  const double cy = n / 2 + rng.uniform(-0.06, 0.06) * n;
  std::array<double, 3> bg{}, fg{};
  for (int c = 0; c < 3; ++c) {
    bg[c] = std::clamp(pal.background[c] + rng.uniform(-0.06, 0.06), 0.0, 1.0);
    fg[c] = std::clamp(pal.foreground[c] + rng.uniform(-0.06, 0.06), 0.0, 1.0);
  }
  // Gentle background shading.
  const double gx = rng.uniform(-0.08, 0.08), gy = rng.uniform(-0.08, 0.08);

  std::vector<Real> data(3 * size * size);
  for (std::size_t row = 0; row < size; ++row) {
    for (std::size_t col = 0; col < size; ++col) {
      int hits = 0;
      for (int sy = 0; sy < kSuper; ++sy)
        for (int sx = 0; sx < kSuper; ++sx) {
          const double px = static_cast<double>(col) + (sx + 0.5) / kSuper;
          const double py = static_cast<double>(row) + (sy + 0.5) / kSuper;
          hits += inside(shape, px - cx, py - cy, r) ? 1 : 0;
        }
      const double cover = static_cast<double>(hits) / (kSuper * kSuper);
      const double shade = gx * (static_cast<double>(col) / n - 0.5) + gy * (static_cast<double>(row) / n - 0.5);
      for (std::size_t c = 0; c < 3; ++c) {
        const double b = std::clamp(bg[c] + shade, 0.0, 1.0);
        data[(c * size + row) * size + col] = static_cast<Real>(cover * fg[c] + (1.0 - cover) * b);
      }
    }
  }
  return Tensor<Real>({1, 3, size, size}, std::move(data));
}

ToyDataset gen_toy_dataset(const DatasetSpec& spec, std::uint64_t seed) {
  if (spec.count < 1) throw ConfigError("dataset count must be >= 1");
  if (!(spec.val_fraction >= 0.0 && spec.val_fraction < 1.0)) throw ConfigError("val_fraction must lie in [0, 1)");
  ToyDataset out;
  Rng rng(seed);
  const auto n_train = static_cast<std::size_t>(std::ceil(static_cast<double>(spec.count) * (1.0 - spec.val_fraction)));
  for (std::size_t i = 0; i < spec.count; ++i) {
    const std::size_t label = i % kToyClasses;
    out.images.push_back(render_toy_image(label, spec.size, rng));
    out.labels.push_back(label);
    out.splits.push_back(i < n_train ? "train" : "val");
  }
  return out;
}

void save_dataset(const ToyDataset& data, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream csv(dir / "labels.csv", std::ios::binary);
  if (!csv) throw std::runtime_error("cannot write " + (dir / "labels.csv").string());
  csv << "file,label,split\n";
  for (std::size_t i = 0; i < data.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "img_%04zu.png", i);
    save_image(data.images[i], dir / name);
    csv << name << ',' << data.labels[i] << ',' << data.splits[i] << '\n';
  }
}

ToyDataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream csv(dir / "labels.csv");
  if (!csv) throw FormatError("missing labels.csv in " + dir.string());
  std::string line;
  if (!std::getline(csv, line) || line.rfind("file,label", 0) != 0) throw FormatError("labels.csv: bad header");
  ToyDataset out;
  while (std::getline(csv, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string file, label, split;
    if (!std::getline(ss, file, ',') || !std::getline(ss, label, ','))
      throw FormatError("labels.csv: malformed row '" + line + "'");
    std::getline(ss, split, ',');
    std::size_t value = 0;
    try {
      value = std::stoul(label);
    } catch (const std::exception&) {
      throw FormatError("labels.csv: bad label '" + label + "'");
    }
    if (value >= kToyClasses) throw FormatError("labels.csv: label out of range");
    out.images.push_back(load_image(dir / file));
    out.labels.push_back(value);
    out.splits.push_back(split.empty() ? "train" : split);
  }
  return out;
}

}  // namespace advdiff
