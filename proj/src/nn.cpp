#include "advdiff/nn.hpp"

#include <cmath>
#include <fstream>

#include "advdiff/atns.hpp"

namespace advdiff {

template <typename T>
ConvLayer<T> ConvLayer<T>::init(std::size_t cin, std::size_t cout, std::size_t kernel, std::size_t stride,
                                std::size_t padding, Rng& rng, double gain) {
  const double std = gain * std::sqrt(2.0 / static_cast<double>(cin * kernel * kernel));
  return ConvLayer{Tensor<T>::randn({cout, cin, kernel, kernel}, rng, std), Tensor<T>::zeros({cout}),
                   Conv2dOptions{stride, padding}};
}

template <typename T>
LinearLayer<T> LinearLayer<T>::init(std::size_t in, std::size_t out, Rng& rng, double gain) {
  const double std = gain / std::sqrt(static_cast<double>(in));
  return LinearLayer{Tensor<T>::randn({in, out}, rng, std), Tensor<T>::zeros({1, out})};
}

template <typename T>
void Adam<T>::step(const NamedParams<T>& params, const std::vector<Tensor<T>>& grads) {
  if (grads.size() != params.size()) throw ShapeError("Adam: gradient count does not match parameter count");
  if (m_.empty()) {
    for (const auto& [name, p] : params) {
      m_.emplace_back(p->numel(), 0.0);
      v_.emplace_back(p->numel(), 0.0);
    }
  }
  ++step_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T>& p = *params[i].second;
    auto g = grads[i].data();
    auto pv = p.data();
    std::vector<T> next(pv.begin(), pv.end());
    for (std::size_t j = 0; j < next.size(); ++j) {
      m_[i][j] = beta1_ * m_[i][j] + (1.0 - beta1_) * g[j];
      v_[i][j] = beta2_ * v_[i][j] + (1.0 - beta2_) * g[j] * g[j];
      next[j] = static_cast<T>(next[j] - lr_ * (m_[i][j] / c1) / (std::sqrt(v_[i][j] / c2) + eps_));
    }
    p = Tensor<T>(p.shape(), std::move(next));
  }
}

template <typename T>
void save_parameters(const std::filesystem::path& dir, const NamedParams<T>& params, const nlohmann::json& manifest) {
  std::filesystem::create_directories(dir);
  nlohmann::json doc = manifest;
  doc["parameters"] = nlohmann::json::array();
  for (const auto& [name, p] : params) {
    save_atns(*p, dir / (name + ".atns"));
    doc["parameters"].push_back(name);
  }
  std::ofstream os(dir / "manifest.json");
  if (!os) throw FormatError("cannot write manifest in " + dir.string());
  os << doc.dump(2) << '\n';
}

template <typename T>
void load_parameters(const std::filesystem::path& dir, const NamedParams<T>& params) {
  for (const auto& [name, p] : params) {
    Tensor<T> loaded = load_atns<T>(dir / (name + ".atns"));
    if (loaded.shape() != p->shape())
      throw FormatError("parameter " + name + " has shape " + shape_to_string(loaded.shape()) + ", expected " +
                        shape_to_string(p->shape()));
    *p = std::move(loaded);
  }
}

nlohmann::json load_manifest(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw FormatError("missing manifest.json in " + dir.string());
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed manifest in " + dir.string() + ": " + e.what());
  }
}

template struct ConvLayer<float>;
template struct ConvLayer<double>;
template struct LinearLayer<float>;
template struct LinearLayer<double>;
template class Adam<float>;
template class Adam<double>;
template void save_parameters(const std::filesystem::path&, const NamedParams<float>&, const nlohmann::json&);
template void save_parameters(const std::filesystem::path&, const NamedParams<double>&, const nlohmann::json&);
template void load_parameters(const std::filesystem::path&, const NamedParams<float>&);
template void load_parameters(const std::filesystem::path&, const NamedParams<double>&);

}  // namespace advdiff
