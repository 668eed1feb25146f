#pragma once

// "ATNS" raw tensor files:
//   magic 'A' 'T' 'N' 'S' | version 0x01 | dtype (0x01 binary32, 0x02 binary64)
//   | rank u16 LE | rank x extent u32 LE | payload LE row-major

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "advdiff/tensor.hpp"

namespace advdiff {

enum class AtnsDtype : std::uint8_t { kFloat32 = 0x01, kFloat64 = 0x02 };

std::vector<std::uint8_t> encode_atns(const Tensor<float>& t);
std::vector<std::uint8_t> encode_atns(const Tensor<double>& t);

// Decodes either dtype, converting to T. Throws FormatError on malformed input.
template <typename T>
Tensor<T> decode_atns(std::span<const std::uint8_t> bytes);

template <typename T>
void save_atns(const Tensor<T>& t, const std::filesystem::path& path);

template <typename T>
Tensor<T> load_atns(const std::filesystem::path& path);

}  // namespace advdiff
