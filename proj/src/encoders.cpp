#include "advdiff/encoders.hpp"

#include <algorithm>
#include <set>

namespace advdiff {

namespace {

struct ConvSpec {
  std::size_t cout, kernel, stride, padding;
};

std::vector<ConvSpec> layout(EncoderArch arch) {
  switch (arch) {
    case EncoderArch::kShallow:
      return {{16, 3, 2, 1}, {32, 3, 2, 1}};
    case EncoderArch::kWideKernel:
      return {{12, 5, 2, 2}, {24, 3, 2, 1}, {48, 3, 1, 1}};
    case EncoderArch::kDeep:
      return {{24, 3, 1, 1}, {24, 3, 2, 1}, {32, 3, 2, 1}, {32, 3, 1, 1}};
    case EncoderArch::kStrided:
      return {{16, 7, 4, 3}, {32, 3, 1, 1}};
    case EncoderArch::kSkipFusion:
      // Third conv consumes concat(first, upsample(second)): 16 + 32 channels.
      return {{16, 3, 2, 1}, {32, 3, 2, 1}, {48, 3, 2, 1}};
  }
  throw ConfigError("unknown encoder architecture");
}

}  // namespace

std::string encoder_arch_name(EncoderArch arch) {
  static const char* names[] = {"shallow", "wide-kernel", "deep", "strided", "skip-fusion"};
  return names[static_cast<int>(arch)];
}

EncoderArch parse_encoder_arch(const std::string& name) {
  for (int i = 0; i < kEncoderArchCount; ++i)
    if (encoder_arch_name(static_cast<EncoderArch>(i)) == name) return static_cast<EncoderArch>(i);
  throw ConfigError("unknown encoder architecture '" + name + "'");
}

template <typename T>
Encoder<T>::Encoder(EncoderArch arch, std::uint64_t seed, std::size_t embed_dim)
    : arch_(arch), seed_(seed), embed_dim_(embed_dim) {
  if (embed_dim == 0) throw ConfigError("encoder embedding dimension must be positive");
  Rng rng(seed);
  std::size_t cin = 3;
  const auto specs = layout(arch);
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const auto& s = specs[i];
    if (arch == EncoderArch::kSkipFusion && i == 2) cin = specs[0].cout + specs[1].cout;
    convs_.push_back(ConvLayer<T>::init(cin, s.cout, s.kernel, s.stride, s.padding, rng));
    cin = s.cout;
  }
  head_ = LinearLayer<T>::init(cin * kEncoderPoolGrid * kEncoderPoolGrid, embed_dim, rng);
}

template <typename T>
Tensor<T> Encoder<T>::embed(const Tensor<T>& image) const {
  if (image.rank() != 4 || image.dim(0) != 1 || image.dim(1) != 3 || image.dim(2) < 8 || image.dim(3) < 8)
    throw ShapeError("encoder expects a 1 x 3 x H x W image with H, W >= 8, got " + shape_to_string(image.shape()));
  Tensor<T> h = add_scalar(image, T(-0.5));
  if (arch_ == EncoderArch::kSkipFusion) {
    const Tensor<T> fine = gelu(convs_[0](h));
    const Tensor<T> coarse = gelu(convs_[1](fine));
    const Tensor<T> up = upsample_nearest(coarse, 2);
    if (up.shape() != Shape{1, coarse.dim(1), fine.dim(2), fine.dim(3)})
      throw ShapeError("skip-fusion encoder needs H and W divisible by 4");
    h = gelu(convs_[2](concat_channels(fine, up)));
  } else {
    for (const auto& conv : convs_) h = gelu(conv(h));
  }
  Tensor<T> pooled = adaptive_avg_pool(h, kEncoderPoolGrid);
  pooled = sub(pooled, mean(pooled));  // center features across channels
  return l2_normalize(head_(pooled));
}

template <typename T>
NamedParams<T> Encoder<T>::parameters() {
  NamedParams<T> out;
  for (std::size_t i = 0; i < convs_.size(); ++i) {
    out.emplace_back("conv" + std::to_string(i) + ".weight", &convs_[i].weight);
    out.emplace_back("conv" + std::to_string(i) + ".bias", &convs_[i].bias);
  }
  out.emplace_back("head.weight", &head_.weight);
  out.emplace_back("head.bias", &head_.bias);
  return out;
}

template <typename T>
void Encoder<T>::save(const std::filesystem::path& dir) const {
  nlohmann::json manifest = {{"architecture", encoder_arch_name(arch_)}, {"seed", seed_}, {"embed_dim", embed_dim_}};
  auto copy = *this;
  save_parameters(dir, copy.parameters(), manifest);
}

template <typename T>
Encoder<T> Encoder<T>::load(const std::filesystem::path& dir) {
  const auto manifest = load_manifest(dir);
  Encoder enc(parse_encoder_arch(manifest.at("architecture").get<std::string>()),
              manifest.at("seed").get<std::uint64_t>(), manifest.at("embed_dim").get<std::size_t>());
  load_parameters(dir, enc.parameters());
  return enc;
}

template <typename T>
template <typename U>
Encoder<U> Encoder<T>::cast() const {
  Encoder<U> out(arch_, seed_, embed_dim_);
  for (std::size_t i = 0; i < convs_.size(); ++i) {
    out.convs_[i].weight = convs_[i].weight.template cast<U>();
    out.convs_[i].bias = convs_[i].bias.template cast<U>();
  }
  out.head_.weight = head_.weight.template cast<U>();
  out.head_.bias = head_.bias.template cast<U>();
  return out;
}

template <typename T>
template <typename U>
EncoderEnsemble<U> EncoderEnsemble<T>::cast() const {
  std::vector<Encoder<U>> out;
  for (const auto& m : members) out.push_back(m.template cast<U>());
  return EncoderEnsemble<U>{std::move(out), victim.template cast<U>()};
}

template <typename T>
EncoderEnsemble<T> build_ensemble(const EnsembleConfig& config, const std::vector<std::uint64_t>& member_seeds,
                                  std::uint64_t victim_seed) {
  if (config.members == 0) throw ConfigError("ensemble needs at least one member");
  if (member_seeds.size() != config.members) throw ConfigError("ensemble: one seed per member required");
  std::set<std::uint64_t> unique(member_seeds.begin(), member_seeds.end());
  unique.insert(victim_seed);
  if (unique.size() != member_seeds.size() + 1) throw ConfigError("ensemble: duplicate encoder seeds");
  std::vector<Encoder<T>> members;
  for (std::size_t i = 0; i < config.members; ++i)
    members.emplace_back(static_cast<EncoderArch>(i % 4), member_seeds[i], config.embed_dim);
  return EncoderEnsemble<T>{std::move(members), Encoder<T>(EncoderArch::kSkipFusion, victim_seed, config.embed_dim)};
}

template <typename T>
EncoderEnsemble<T> build_default_ensemble(std::uint64_t base_seed, std::size_t members) {
  std::vector<std::uint64_t> seeds;
  for (std::size_t i = 0; i < members; ++i) seeds.push_back(base_seed + i);
  return build_ensemble<T>(EnsembleConfig{members, kDefaultEmbedDim}, seeds, base_seed + 1000);
}

template <typename T>
void save_ensemble(const EncoderEnsemble<T>& ensemble, const std::filesystem::path& dir) {
  for (std::size_t i = 0; i < ensemble.members.size(); ++i)
    ensemble.members[i].save(dir / ("member_" + std::to_string(i)));
  ensemble.victim.save(dir / "victim");
}

template <typename T>
EncoderEnsemble<T> load_ensemble(const std::filesystem::path& dir) {
  std::vector<Encoder<T>> members;
  for (std::size_t i = 0; std::filesystem::exists(dir / ("member_" + std::to_string(i))); ++i)
    members.push_back(Encoder<T>::load(dir / ("member_" + std::to_string(i))));
  if (members.empty()) throw FormatError("no ensemble members found in " + dir.string());
  EncoderEnsemble<T> ens{std::move(members), Encoder<T>::load(dir / "victim")};
  for (const auto& m : ens.members)
    if (m.seed() == ens.victim.seed() && m.arch() == ens.victim.arch())
      throw ConfigError("victim encoder duplicates an ensemble member");
  return ens;
}

template class Encoder<float>;
template class Encoder<double>;
template Encoder<double> Encoder<float>::cast<double>() const;
template Encoder<float> Encoder<double>::cast<float>() const;
template EncoderEnsemble<double> EncoderEnsemble<float>::cast<double>() const;
template EncoderEnsemble<float> EncoderEnsemble<double>::cast<float>() const;
template EncoderEnsemble<float> build_ensemble(const EnsembleConfig&, const std::vector<std::uint64_t>&, std::uint64_t);
template EncoderEnsemble<double> build_ensemble(const EnsembleConfig&, const std::vector<std::uint64_t>&, std::uint64_t);
template EncoderEnsemble<float> build_default_ensemble(std::uint64_t, std::size_t);
template EncoderEnsemble<double> build_default_ensemble(std::uint64_t, std::size_t);
template void save_ensemble(const EncoderEnsemble<float>&, const std::filesystem::path&);
template void save_ensemble(const EncoderEnsemble<double>&, const std::filesystem::path&);
template EncoderEnsemble<float> load_ensemble(const std::filesystem::path&);
template EncoderEnsemble<double> load_ensemble(const std::filesystem::path&);

}  // namespace advdiff
