#pragma once

#include <filesystem>
#include <optional>
#include <utility>

#include "advdiff/tensor.hpp"

namespace advdiff {

// Loads a 1 x 3 x H x W image in [0, 1]. PNG inputs are mapped by v / 255;
// ".atns" files are read as raw tensors. When `expected` is set the spatial
// size (H, W) must match.
Tensor<Real> load_image(const std::filesystem::path& path,
                        std::optional<std::pair<std::size_t, std::size_t>> expected = std::nullopt);

// PNG output quantizes by round(v * 255) after clamping to [0, 1]; ".atns"
// output is bit-exact.
void save_image(const Tensor<Real>& image, const std::filesystem::path& path);

// 8-bit quantization used by PNG output, as a tensor.
Tensor<Real> quantize_8bit(const Tensor<Real>& image);

}  // namespace advdiff
