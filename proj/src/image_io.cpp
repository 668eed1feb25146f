#include "advdiff/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "advdiff/atns.hpp"

namespace advdiff {

namespace {

bool is_atns(const std::filesystem::path& path) { return path.extension() == ".atns"; }

void check_image_shape(const Tensor<Real>& t, const std::filesystem::path& path) {
  if (t.rank() != 4 || t.dim(0) != 1 || t.dim(1) != 3)
    throw ShapeError(path.string() + ": expected a 1 x 3 x H x W image tensor, got " + shape_to_string(t.shape()));
}

}  // namespace

Tensor<Real> load_image(const std::filesystem::path& path, std::optional<std::pair<std::size_t, std::size_t>> expected) {
  Tensor<Real> out;
  if (is_atns(path)) {
    out = load_atns<Real>(path);
    check_image_shape(out, path);
  } else if (path.extension() == ".png") {
    std::ifstream probe(path, std::ios::binary);
    unsigned char sig[8] = {};
    if (!probe.read(reinterpret_cast<char*>(sig), 8) || png_sig_cmp(sig, 0, 8) != 0)
      throw FormatError(path.string() + ": not a PNG file");
    png_image img;
    std::memset(&img, 0, sizeof(img));
    img.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&img, path.c_str()))
      throw FormatError(path.string() + ": " + img.message);
    img.format = PNG_FORMAT_RGB;
    std::vector<png_byte> buffer(PNG_IMAGE_SIZE(img));
    if (!png_image_finish_read(&img, nullptr, buffer.data(), 0, nullptr)) {
      png_image_free(&img);
      throw FormatError(path.string() + ": " + img.message);
    }
    const std::size_t h = img.height, w = img.width;
    std::vector<Real> data(3 * h * w);
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t c = 0; c < w; ++c)
        for (std::size_t ch = 0; ch < 3; ++ch)
          data[(ch * h + r) * w + c] = static_cast<Real>(buffer[(r * w + c) * 3 + ch]) / Real(255);
    out = Tensor<Real>({1, 3, h, w}, std::move(data));
  } else {
    throw FormatError(path.string() + ": unsupported image format (expected .png or .atns)");
  }
  if (expected && (out.dim(2) != expected->first || out.dim(3) != expected->second))
    throw ShapeError(path.string() + ": image is " + std::to_string(out.dim(2)) + "x" + std::to_string(out.dim(3)) +
                     ", expected " + std::to_string(expected->first) + "x" + std::to_string(expected->second));
  return out;
}

Tensor<Real> quantize_8bit(const Tensor<Real>& image) {
  return map_values(image, [](Real v) {
    return static_cast<Real>(std::lround(std::clamp(static_cast<double>(v), 0.0, 1.0) * 255.0)) / Real(255);
  });
}

void save_image(const Tensor<Real>& image, const std::filesystem::path& path) {
  check_image_shape(image, path);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (is_atns(path)) {
    save_atns(image, path);
    return;
  }
  if (path.extension() != ".png") throw FormatError(path.string() + ": unsupported image format");
  const std::size_t h = image.dim(2), w = image.dim(3);
  std::vector<png_byte> buffer(3 * h * w);
  auto v = image.data();
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c)
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const double x = std::clamp(static_cast<double>(v[(ch * h + r) * w + c]), 0.0, 1.0);
        buffer[(r * w + c) * 3 + ch] = static_cast<png_byte>(std::lround(x * 255.0));
      }
  png_image img;
  std::memset(&img, 0, sizeof(img));
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(w);
  img.height = static_cast<png_uint_32>(h);
  img.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.c_str(), 0, buffer.data(), 0, nullptr))
    throw FormatError(path.string() + ": " + img.message);
}

}  // namespace advdiff
