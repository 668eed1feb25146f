#include "advdiff/defenses.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace advdiff {

namespace {

constexpr std::array<int, 64> kLuminance = {
    16, 11, 10, 16, 24,  40,  51,  61,  12, 12, 14, 19, 26,  58,  60,  55,  14, 13, 16, 24, 40,  57,
    69, 56, 14, 17, 22,  29,  51,  87,  80, 62, 18, 22, 37,  56,  68,  109, 103, 77, 24, 35, 55, 64,
    81, 104, 113, 92, 49, 64, 78,  87,  103, 121, 120, 101, 72, 92, 95, 98,  112, 100, 103, 99};

const std::array<double, 64>& dct_basis() {
  static const std::array<double, 64> basis = [] {
    std::array<double, 64> b{};
    for (int u = 0; u < 8; ++u) {
      const double cu = u == 0 ? std::sqrt(1.0 / 8.0) : std::sqrt(2.0 / 8.0);
      for (int x = 0; x < 8; ++x) b[u * 8 + x] = cu * std::cos((2 * x + 1) * u * std::numbers::pi / 16.0);
    }
    return b;
  }();
  return basis;
}

std::size_t reflect(long long i, std::size_t n) {
  const long long m = static_cast<long long>(n);
  if (m == 1) return 0;
  const long long period = 2 * (m - 1);
  i %= period;
  if (i < 0) i += period;
  return static_cast<std::size_t>(i < m ? i : period - i);
}

}  // namespace

DefenseKind parse_defense(const std::string& name) {
  if (name == "bit_reduction" || name == "bit-reduction") return DefenseKind::kBitReduction;
  if (name == "jpeg") return DefenseKind::kJpeg;
  if (name == "diffpure") return DefenseKind::kDiffPure;
  throw ConfigError("unknown defense '" + name + "'");
}

std::string defense_name(DefenseKind kind) {
  switch (kind) {
    case DefenseKind::kBitReduction: return "bit_reduction";
    case DefenseKind::kJpeg: return "jpeg";
    case DefenseKind::kDiffPure: return "diffpure";
  }
  return "unknown";
}

void DefenseConfig::validate() const {
  if (bits < 1 || bits > 8) throw ConfigError("bits must lie in [1, 8]");
  if (jpeg_quality < 1 || jpeg_quality > 100) throw ConfigError("jpeg quality must lie in [1, 100]");
  if (!(diffpure_t_frac > 0.0 && diffpure_t_frac <= 1.0)) throw ConfigError("diffpure t_frac must lie in (0, 1]");
}

Tensor<Real> bit_reduction(const Tensor<Real>& x, int bits) {
  if (bits < 1 || bits > 8) throw ConfigError("bit_reduction: bits must lie in [1, 8]");
  const double levels = std::ldexp(1.0, bits) - 1.0;
  return map_values(x, [levels](Real v) {
    const double c = std::clamp(static_cast<double>(v), 0.0, 1.0);
    return static_cast<Real>(std::round(c * levels) / levels);
  });
}

std::array<int, 64> jpeg_quant_table(int quality) {
  if (quality < 1 || quality > 100) throw ConfigError("jpeg quality must lie in [1, 100]");
  const int scale = quality < 50 ? 5000 / quality : 200 - 2 * quality;
  std::array<int, 64> q{};
  for (int i = 0; i < 64; ++i) q[i] = std::clamp((kLuminance[i] * scale + 50) / 100, 1, 255);
  return q;
}

std::array<double, 64> dct8x8(const std::array<double, 64>& block) {
  const auto& b = dct_basis();
  std::array<double, 64> tmp{}, out{};
  for (int u = 0; u < 8; ++u)
    for (int x = 0; x < 8; ++x) {
      double s = 0.0;
      for (int y = 0; y < 8; ++y) s += b[u * 8 + y] * block[y * 8 + x];
      tmp[u * 8 + x] = s;
    }
  for (int u = 0; u < 8; ++u)
    for (int v = 0; v < 8; ++v) {
      double s = 0.0;
      for (int x = 0; x < 8; ++x) s += tmp[u * 8 + x] * b[v * 8 + x];
      out[u * 8 + v] = s;
    }
  return out;
}

std::array<double, 64> idct8x8(const std::array<double, 64>& coeffs) {
  const auto& b = dct_basis();
  std::array<double, 64> tmp{}, out{};
  for (int y = 0; y < 8; ++y)
    for (int v = 0; v < 8; ++v) {
      double s = 0.0;
      for (int u = 0; u < 8; ++u) s += b[u * 8 + y] * coeffs[u * 8 + v];
      tmp[y * 8 + v] = s;
    }
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) {
      double s = 0.0;
      for (int v = 0; v < 8; ++v) s += tmp[y * 8 + v] * b[v * 8 + x];
      out[y * 8 + x] = s;
    }
  return out;
}

Tensor<Real> jpeg_compress(const Tensor<Real>& x, int quality) {
  if (x.rank() != 4) throw ShapeError("jpeg_compress expects N x C x H x W, got " + shape_to_string(x.shape()));
  const auto q = jpeg_quant_table(quality);
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t ph = (h + 7) / 8 * 8, pw = (w + 7) / 8 * 8;
  auto xv = x.data();
  std::vector<Real> out(x.numel());
  std::vector<double> padded(ph * pw);
  for (std::size_t p = 0; p < planes; ++p) {
    const Real* src = xv.data() + p * h * w;
    for (std::size_t r = 0; r < ph; ++r)
      for (std::size_t c = 0; c < pw; ++c)
        padded[r * pw + c] = 255.0 * static_cast<double>(src[reflect(static_cast<long long>(r), h) * w +
                                                             reflect(static_cast<long long>(c), w)]) - 128.0;
    for (std::size_t br = 0; br < ph; br += 8)
      for (std::size_t bc = 0; bc < pw; bc += 8) {
        std::array<double, 64> block{};
        for (int i = 0; i < 8; ++i)
          for (int j = 0; j < 8; ++j) block[i * 8 + j] = padded[(br + i) * pw + bc + j];
        auto coeffs = dct8x8(block);
        for (int i = 0; i < 64; ++i) coeffs[i] = std::round(coeffs[i] / q[i]) * q[i];
        const auto rec = idct8x8(coeffs);
        for (int i = 0; i < 8; ++i)
          for (int j = 0; j < 8; ++j) {
            const std::size_t r = br + i, c = bc + j;
            if (r < h && c < w)
              out[p * h * w + r * w + c] = static_cast<Real>(std::clamp((rec[i * 8 + j] + 128.0) / 255.0, 0.0, 1.0));
          }
      }
  }
  return Tensor<Real>(x.shape(), std::move(out));
}

Tensor<Real> diffpure(const Tensor<Real>& x, double t_frac, const EpsPredictor& eps_source, const NoiseSchedule& sched,
                      Rng& rng, bool stochastic) {
  if (!(t_frac > 0.0 && t_frac <= 1.0)) throw ConfigError("diffpure: t_frac must lie in (0, 1]");
  const int t = static_cast<int>(std::lround(t_frac * sched.steps()));
  if (t == 0) return x;
  const Tensor<Real> x_t = forward_noise(x, t, Tensor<Real>::randn(x.shape(), rng), sched);
  ReverseOptions opts;
  opts.stochastic = stochastic;
  const Tensor<Real> x0 = reverse_sample(x_t, t, eps_source, sched, opts, rng);
  return map_values(x0, [](Real v) { return std::clamp(v, Real(0), Real(1)); });
}

Tensor<Real> apply_defense(const Tensor<Real>& x, const DefenseConfig& cfg, const EpsPredictor& eps_source,
                           const NoiseSchedule& sched, Rng& rng) {
  cfg.validate();
  switch (cfg.kind) {
    case DefenseKind::kBitReduction: return bit_reduction(x, cfg.bits);
    case DefenseKind::kJpeg: return jpeg_compress(x, cfg.jpeg_quality);
    case DefenseKind::kDiffPure: return diffpure(x, cfg.diffpure_t_frac, eps_source, sched, rng, cfg.diffpure_stochastic);
  }
  throw ConfigError("unknown defense");
}

}  // namespace advdiff
