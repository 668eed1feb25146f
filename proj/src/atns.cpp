#include "advdiff/atns.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace advdiff {

namespace {

constexpr std::uint8_t kMagic[4] = {0x41, 0x54, 0x4E, 0x53};
constexpr std::uint8_t kVersion = 0x01;

static_assert(std::endian::native == std::endian::little, "ATNS IO assumes a little-endian host");

template <typename T>
std::vector<std::uint8_t> encode(const Tensor<T>& t, AtnsDtype dtype) {
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  out.push_back(kVersion);
  out.push_back(static_cast<std::uint8_t>(dtype));
  const auto rank = static_cast<std::uint16_t>(t.rank());
  out.push_back(static_cast<std::uint8_t>(rank & 0xFF));
  out.push_back(static_cast<std::uint8_t>(rank >> 8));
  for (auto e : t.shape()) {
    const auto v = static_cast<std::uint32_t>(e);
    for (int b = 0; b < 4; ++b) out.push_back(static_cast<std::uint8_t>(v >> (8 * b)));
  }
  const auto* raw = reinterpret_cast<const std::uint8_t*>(t.data().data());
  out.insert(out.end(), raw, raw + t.numel() * sizeof(T));
  return out;
}

template <typename Src, typename T>
std::vector<T> read_payload(std::span<const std::uint8_t> bytes, std::size_t n) {
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    Src v;
    std::memcpy(&v, bytes.data() + i * sizeof(Src), sizeof(Src));
    out[i] = static_cast<T>(v);
  }
  return out;
}

}  // namespace

std::vector<std::uint8_t> encode_atns(const Tensor<float>& t) { return encode(t, AtnsDtype::kFloat32); }
std::vector<std::uint8_t> encode_atns(const Tensor<double>& t) { return encode(t, AtnsDtype::kFloat64); }

template <typename T>
Tensor<T> decode_atns(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("ATNS: bad magic bytes");
  if (bytes[4] != kVersion) throw FormatError("ATNS: unsupported version " + std::to_string(bytes[4]));
  const std::uint8_t dtype = bytes[5];
  std::size_t elem = 0;
  if (dtype == static_cast<std::uint8_t>(AtnsDtype::kFloat32)) elem = 4;
  else if (dtype == static_cast<std::uint8_t>(AtnsDtype::kFloat64)) elem = 8;
  else throw FormatError("ATNS: unsupported dtype " + std::to_string(dtype));
  const std::size_t rank = bytes[6] | (static_cast<std::size_t>(bytes[7]) << 8);
  std::size_t pos = 8;
  if (bytes.size() < pos + 4 * rank) throw FormatError("ATNS: truncated header");
  Shape shape(rank);
  for (std::size_t i = 0; i < rank; ++i, pos += 4) {
    std::uint32_t v = 0;
    for (int b = 0; b < 4; ++b) v |= static_cast<std::uint32_t>(bytes[pos + b]) << (8 * b);
    if (v == 0) throw FormatError("ATNS: zero extent");
    shape[i] = v;
  }
  const std::size_t n = shape_numel(shape);
  if (bytes.size() != pos + n * elem) throw FormatError("ATNS: payload size does not match header");
  auto payload = bytes.subspan(pos);
  std::vector<T> data = elem == 4 ? read_payload<float, T>(payload, n) : read_payload<double, T>(payload, n);
  return Tensor<T>(std::move(shape), std::move(data));
}

template <typename T>
void save_atns(const Tensor<T>& t, const std::filesystem::path& path) {
  const auto bytes = encode_atns(t);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("ATNS: cannot open " + path.string() + " for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

template <typename T>
Tensor<T> load_atns(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("ATNS: cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return decode_atns<T>(bytes);
}

template Tensor<float> decode_atns(std::span<const std::uint8_t>);
template Tensor<double> decode_atns(std::span<const std::uint8_t>);
template void save_atns(const Tensor<float>&, const std::filesystem::path&);
template void save_atns(const Tensor<double>&, const std::filesystem::path&);
template Tensor<float> load_atns(const std::filesystem::path&);
template Tensor<double> load_atns(const std::filesystem::path&);

}  // namespace advdiff
