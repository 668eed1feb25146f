#pragma once

// Input purification: bit-depth reduction, blockwise DCT quantization, and a
// diffusion round trip.

#include <array>
#include <string>

#include "advdiff/diffusion.hpp"

namespace advdiff {

enum class DefenseKind { kBitReduction, kJpeg, kDiffPure };

DefenseKind parse_defense(const std::string& name);
std::string defense_name(DefenseKind kind);

struct DefenseConfig {
  DefenseKind kind = DefenseKind::kBitReduction;
  int bits = 4;
  int jpeg_quality = 50;
  double diffpure_t_frac = 0.15;
  // Reverse chain noise injection for DiffPure.
  bool diffpure_stochastic = true;

  void validate() const;
};

// round(x * (2^bits - 1)) / (2^bits - 1)
Tensor<Real> bit_reduction(const Tensor<Real>& x, int bits);

// Standard luminance table scaled for `quality` (IJG convention), row-major 8x8.
std::array<int, 64> jpeg_quant_table(int quality);

// Orthonormal 8x8 DCT-II and its inverse, row-major.
std::array<double, 64> dct8x8(const std::array<double, 64>& block);
std::array<double, 64> idct8x8(const std::array<double, 64>& coeffs);

// Per channel and 8x8 block: DCT, quantize, dequantize, inverse DCT, clamp.
// Sides that are not multiples of 8 are reflect-padded and cropped afterwards.
Tensor<Real> jpeg_compress(const Tensor<Real>& x, int quality);

// Forward-noise to round(t_frac * T), then run the unguided reverse chain.
Tensor<Real> diffpure(const Tensor<Real>& x, double t_frac, const EpsPredictor& eps_source, const NoiseSchedule& sched,
                      Rng& rng, bool stochastic = true);

Tensor<Real> apply_defense(const Tensor<Real>& x, const DefenseConfig& cfg, const EpsPredictor& eps_source,
                           const NoiseSchedule& sched, Rng& rng);

}  // namespace advdiff
