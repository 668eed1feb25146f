#pragma once

// Procedural toy images: four shapes rendered in two palettes, giving eight
// classes. Label = palette * 4 + shape.

#include <filesystem>
#include <string>
#include <vector>

#include "advdiff/tensor.hpp"

namespace advdiff {

inline constexpr std::size_t kToyClasses = 8;
inline constexpr std::size_t kToySize = 32;

enum class ToyShape : int { kCircle = 0, kSquare, kTriangle, kCross };

std::string toy_class_name(std::size_t label);

struct DatasetSpec {
  std::size_t count = 64;
  std::size_t size = kToySize;
  // Fraction of images tagged "val"; the rest are "train".
  double val_fraction = 0.25;
};

struct ToyDataset {
  std::vector<Tensor<Real>> images;  // each 1 x 3 x size x size in [0, 1]
  std::vector<std::size_t> labels;
  std::vector<std::string> splits;

  std::size_t size() const { return images.size(); }
};

// Image i has label i mod 8, so any 8 consecutive images cover every class.
// Position, scale and colours are jittered from `seed`.
ToyDataset gen_toy_dataset(const DatasetSpec& spec, std::uint64_t seed);

// Renders one image of `label` using `rng` for the jitter.
Tensor<Real> render_toy_image(std::size_t label, std::size_t size, Rng& rng);

// Writes img_NNNN.png plus labels.csv (file,label,split).
void save_dataset(const ToyDataset& data, const std::filesystem::path& dir);
ToyDataset load_dataset(const std::filesystem::path& dir);

}  // namespace advdiff
