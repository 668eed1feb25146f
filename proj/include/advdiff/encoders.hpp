#pragma once

// Fixed random-feature image encoders standing in for pretrained visual
// encoders. Five layouts exist; the ensemble cycles through the first four and
// the held-out victim uses the fifth.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "advdiff/nn.hpp"

namespace advdiff {

enum class EncoderArch : int {
  kShallow = 0,   // two 3x3 stride-2 convs
  kWideKernel,    // 5x5 stem, three convs
  kDeep,          // four 3x3 convs
  kStrided,       // 7x7 stride-4 stem
  kSkipFusion,    // two-scale features fused by upsample + concat
};

inline constexpr int kEncoderArchCount = 5;
inline constexpr std::size_t kDefaultEmbedDim = 64;
// Final feature maps are averaged over a 4 x 4 grid, keeping coarse layout.
inline constexpr std::size_t kEncoderPoolGrid = 4;

std::string encoder_arch_name(EncoderArch arch);
EncoderArch parse_encoder_arch(const std::string& name);

template <typename T>
class Encoder {
 public:
  Encoder(EncoderArch arch, std::uint64_t seed, std::size_t embed_dim = kDefaultEmbedDim);

  // Unit-norm embedding of a 1 x 3 x H x W image (H, W >= 8), shape 1 x d.
  // Traced whenever `image` is.
  Tensor<T> embed(const Tensor<T>& image) const;

  EncoderArch arch() const { return arch_; }
  std::uint64_t seed() const { return seed_; }
  std::size_t embed_dim() const { return embed_dim_; }

  NamedParams<T> parameters();

  void save(const std::filesystem::path& dir) const;
  static Encoder load(const std::filesystem::path& dir);

  template <typename U>
  Encoder<U> cast() const;

 private:
  template <typename U>
  friend class Encoder;

  EncoderArch arch_;
  std::uint64_t seed_;
  std::size_t embed_dim_;
  std::vector<ConvLayer<T>> convs_;
  LinearLayer<T> head_;
};

template <typename T>
struct EncoderEnsemble {
  std::vector<Encoder<T>> members;
  Encoder<T> victim;

  std::size_t size() const { return members.size(); }

  template <typename U>
  EncoderEnsemble<U> cast() const;
};

struct EnsembleConfig {
  std::size_t members = 4;
  std::size_t embed_dim = kDefaultEmbedDim;
};

// Member i uses architecture i mod 4 and member_seeds[i]; the victim uses the
// skip-fusion layout. All seeds must be distinct.
template <typename T>
EncoderEnsemble<T> build_ensemble(const EnsembleConfig& config, const std::vector<std::uint64_t>& member_seeds,
                                  std::uint64_t victim_seed);

// Seeds base, base+1, ... for members and base+1000 for the victim.
template <typename T>
EncoderEnsemble<T> build_default_ensemble(std::uint64_t base_seed, std::size_t members = 4);

template <typename T>
void save_ensemble(const EncoderEnsemble<T>& ensemble, const std::filesystem::path& dir);
template <typename T>
EncoderEnsemble<T> load_ensemble(const std::filesystem::path& dir);

}  // namespace advdiff
