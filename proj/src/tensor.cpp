#include "advdiff/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace advdiff {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace {

template <typename T>
using Node = detail::Node<T>;

template <typename T>
void check_finite(std::span<const T> values, const char* op) {
  for (T v : values) {
    if (!std::isfinite(v)) throw NonFiniteError(std::string("non-finite value produced by ") + op);
  }
}

template <typename T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> value,
                      std::initializer_list<const Tensor<T>*> inputs, detail::BackwardFn<T> fn) {
  check_finite<T>(value, op);
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  bool traced = false;
  for (auto* in : inputs) traced = traced || in->requires_grad();
  if (traced) {
    node->requires_grad = true;
    for (auto* in : inputs) node->inputs.push_back(in->node());
    node->backward = std::move(fn);
  }
  return Tensor<T>::from_node(std::move(node));
}

void require(bool cond, const std::string& what) {
  if (!cond) throw ShapeError(what);
}

template <typename T>
void accumulate(std::vector<T>* dst, std::size_t i, T v) {
  if (dst) (*dst)[i] += v;
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

template <typename T>
Tensor<T>::Tensor() : Tensor(Shape{}, std::vector<T>{T(0)}) {}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) {
  for (auto e : shape) require(e > 0, "tensor extents must be positive: " + shape_to_string(shape));
  require(shape_numel(shape) == data.size(),
          "data length " + std::to_string(data.size()) + " does not match shape " + shape_to_string(shape));
  check_finite<T>(data, "tensor construction");
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(data);
  node_ = std::move(node);
}

template <typename T>
Tensor<T> Tensor<T>::full(const Shape& shape, T value) {
  return Tensor(shape, std::vector<T>(shape_numel(shape), value));
}

template <typename T>
Tensor<T> Tensor<T>::randn(const Shape& shape, Rng& rng, double stddev) {
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.normal() * stddev);
  return Tensor(shape, std::move(v));
}

template <typename T>
Tensor<T> Tensor<T>::uniform(const Shape& shape, Rng& rng, double lo, double hi) {
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
  return Tensor(shape, std::move(v));
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_to_string(shape()));
  return node_->value[0];
}

template <typename T>
Tensor<T> Tensor<T>::leaf() const {
  auto node = std::make_shared<Node<T>>();
  node->shape = node_->shape;
  node->value = node_->value;
  node->requires_grad = true;
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  if (!requires_grad()) return *this;
  return Tensor(shape(), node_->value);
}

template <typename T>
T max_abs(const Tensor<T>& x) {
  T m = 0;
  for (T v : x.data()) m = std::max(m, std::abs(v));
  return m;
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic

namespace {

enum class Broadcast { kNone, kLeftScalar, kRightScalar };

template <typename T>
Broadcast broadcast_kind(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() == b.shape()) return Broadcast::kNone;
  if (a.rank() == 0) return Broadcast::kLeftScalar;
  if (b.rank() == 0) return Broadcast::kRightScalar;
  throw ShapeError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) + " vs " +
                   shape_to_string(b.shape()));
}

template <typename T, typename Fwd, typename DA, typename DB>
Tensor<T> binary_op(const char* op, const Tensor<T>& a, const Tensor<T>& b, Fwd fwd, DA da, DB db) {
  const Broadcast kind = broadcast_kind(a, b, op);
  const Shape shape = kind == Broadcast::kLeftScalar ? b.shape() : a.shape();
  const std::size_t n = shape_numel(shape);
  const std::size_t sa = kind == Broadcast::kLeftScalar ? 0 : 1;
  const std::size_t sb = kind == Broadcast::kRightScalar ? 0 : 1;
  std::vector<T> out(n);
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[i * sa], bv[i * sb]);
  return make_result<T>(op, shape, std::move(out), {&a, &b},
                        [a, b, sa, sb, da, db](std::span<const T>, std::span<const T> g,
                                               std::span<std::vector<T>* const> gin) {
                          auto av = a.data();
                          auto bv = b.data();
                          for (std::size_t i = 0; i < g.size(); ++i) {
                            const T x = av[i * sa];
                            const T y = bv[i * sb];
                            accumulate(gin[0], i * sa, g[i] * da(x, y));
                            accumulate(gin[1], i * sb, g[i] * db(x, y));
                          }
                        });
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      "add", a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      "sub", a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); }, [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; }, [](T x, T) { return x; });
}

namespace {

template <typename T, typename Fwd, typename Deriv>
Tensor<T> unary_op(const char* op, const Tensor<T>& x, Fwd fwd, Deriv deriv) {
  auto xv = x.data();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xv[i]);
  return make_result<T>(op, x.shape(), std::move(out), {&x},
                        [x, deriv](std::span<const T> out, std::span<const T> g,
                                   std::span<std::vector<T>* const> gin) {
                          auto xv = x.data();
                          auto& dst = *gin[0];
                          for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * deriv(xv[i], out[i]);
                        });
}

}  // namespace

template <typename T>
Tensor<T> neg(const Tensor<T>& x) {
  return unary_op<T>("neg", x, [](T v) { return -v; }, [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  return unary_op<T>("scale", x, [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T offset) {
  return unary_op<T>("add_scalar", x, [offset](T v) { return v + offset; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return unary_op<T>(
      "relu", x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T k = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T c = T(0.044715);
  return unary_op<T>(
      "gelu", x,
      [](T v) { return T(0.5) * v * (T(1) + std::tanh(k * (v + c * v * v * v))); },
      [](T v, T) {
        const T th = std::tanh(k * (v + c * v * v * v));
        const T dinner = k * (T(1) + T(3) * c * v * v);
        return T(0.5) * (T(1) + th) + T(0.5) * v * (T(1) - th * th) * dinner;
      });
}

template <typename T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi) {
  if (!(lo <= hi)) throw ConfigError("clamp: lo must not exceed hi");
  return unary_op<T>(
      "clamp", x, [lo, hi](T v) { return std::clamp(v, lo, hi); },
      [lo, hi](T v, T) { return (v > lo && v < hi) ? T(1) : T(0); });
}

// ---------------------------------------------------------------------------
// Reductions and shape ops

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = 0;
  for (T v : x.data()) s += v;
  return make_result<T>("sum", Shape{}, {s}, {&x},
                        [](std::span<const T>, std::span<const T> g, std::span<std::vector<T>* const> gin) {
                          for (auto& v : *gin[0]) v += g[0];
                        });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  T s = 0;
  for (T v : x.data()) s += v;
  const T inv = T(1) / static_cast<T>(x.numel());
  return make_result<T>("mean", Shape{}, {s * inv}, {&x},
                        [inv](std::span<const T>, std::span<const T> g, std::span<std::vector<T>* const> gin) {
                          for (auto& v : *gin[0]) v += g[0] * inv;
                        });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  require(shape_numel(shape) == x.numel(),
          "reshape: cannot view " + shape_to_string(x.shape()) + " as " + shape_to_string(shape));
  std::vector<T> out(x.data().begin(), x.data().end());
  return make_result<T>("reshape", std::move(shape), std::move(out), {&x},
                        [](std::span<const T>, std::span<const T> g, std::span<std::vector<T>* const> gin) {
                          auto& dst = *gin[0];
                          for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
                        });
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
          "matmul: incompatible shapes " + shape_to_string(a.shape()) + " and " + shape_to_string(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n, T(0));
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = av[i * k + p];
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += aip * bv[p * n + j];
    }
  return make_result<T>("matmul", Shape{m, n}, std::move(out), {&a, &b},
                        [a, b, m, k, n](std::span<const T>, std::span<const T> g,
                                        std::span<std::vector<T>* const> gin) {
                          auto av = a.data();
                          auto bv = b.data();
                          if (auto* ga = gin[0]) {
                            for (std::size_t i = 0; i < m; ++i)
                              for (std::size_t p = 0; p < k; ++p) {
                                T s = 0;
                                for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * bv[p * n + j];
                                (*ga)[i * k + p] += s;
                              }
                          }
                          if (auto* gb = gin[1]) {
                            for (std::size_t i = 0; i < m; ++i)
                              for (std::size_t p = 0; p < k; ++p) {
                                const T aip = av[i * k + p];
                                for (std::size_t j = 0; j < n; ++j) (*gb)[p * n + j] += aip * g[i * n + j];
                              }
                          }
                        });
}

namespace {

struct ConvGeometry {
  std::size_t n, cin, h, w, cout, k, stride, pad, oh, ow;

  // Output columns ox whose input column ox*stride + kx - pad lies in [0, w).
  std::pair<std::size_t, std::size_t> valid_range(std::size_t kx, std::size_t extent, std::size_t out) const {
    const long long off = static_cast<long long>(kx) - static_cast<long long>(pad);
    long long lo = 0;
    if (off < 0) lo = (-off + static_cast<long long>(stride) - 1) / static_cast<long long>(stride);
    const long long hi_num = static_cast<long long>(extent) - 1 - off;
    long long hi = hi_num < 0 ? -1 : hi_num / static_cast<long long>(stride);
    hi = std::min<long long>(hi, static_cast<long long>(out) - 1);
    if (hi < lo) return {0, 0};
    return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi + 1)};
  }
};

// Visits every (output, input, weight) index triple of the convolution.
template <typename Fn>
void for_each_tap(const ConvGeometry& g, Fn fn) {
  for (std::size_t b = 0; b < g.n; ++b)
    for (std::size_t oc = 0; oc < g.cout; ++oc)
      for (std::size_t ic = 0; ic < g.cin; ++ic)
        for (std::size_t ky = 0; ky < g.k; ++ky) {
          const auto [oy_lo, oy_hi] = g.valid_range(ky, g.h, g.oh);
          for (std::size_t kx = 0; kx < g.k; ++kx) {
            const auto [ox_lo, ox_hi] = g.valid_range(kx, g.w, g.ow);
            const std::size_t widx = ((oc * g.cin + ic) * g.k + ky) * g.k + kx;
            for (std::size_t oy = oy_lo; oy < oy_hi; ++oy) {
              const std::size_t iy = oy * g.stride + ky - g.pad;
              const std::size_t obase = ((b * g.cout + oc) * g.oh + oy) * g.ow;
              const std::size_t ibase = ((b * g.cin + ic) * g.h + iy) * g.w + kx - g.pad;
              fn(widx, obase, ibase, ox_lo, ox_hi);
            }
          }
        }
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>* bias, Conv2dOptions options) {
  require(input.rank() == 4, "conv2d: input must be N x C x H x W, got " + shape_to_string(input.shape()));
  require(weight.rank() == 4 && weight.dim(2) == weight.dim(3),
          "conv2d: weight must be Cout x Cin x K x K, got " + shape_to_string(weight.shape()));
  require(weight.dim(1) == input.dim(1), "conv2d: channel mismatch between input " +
                                             shape_to_string(input.shape()) + " and weight " +
                                             shape_to_string(weight.shape()));
  require(options.stride >= 1, "conv2d: stride must be positive");
  ConvGeometry g{input.dim(0), input.dim(1), input.dim(2), input.dim(3), weight.dim(0), weight.dim(2),
                 options.stride, options.padding, 0, 0};
  require(g.h + 2 * g.pad >= g.k && g.w + 2 * g.pad >= g.k, "conv2d: kernel larger than padded input");
  g.oh = (g.h + 2 * g.pad - g.k) / g.stride + 1;
  g.ow = (g.w + 2 * g.pad - g.k) / g.stride + 1;
  if (bias) require(bias->rank() == 1 && bias->dim(0) == g.cout, "conv2d: bias must have Cout entries");

  std::vector<T> out(g.n * g.cout * g.oh * g.ow, T(0));
  if (bias) {
    auto bv = bias->data();
    for (std::size_t b = 0; b < g.n; ++b)
      for (std::size_t oc = 0; oc < g.cout; ++oc)
        std::fill_n(out.begin() + static_cast<std::ptrdiff_t>((b * g.cout + oc) * g.oh * g.ow), g.oh * g.ow,
                    bv[oc]);
  }
  {
    auto iv = input.data();
    auto wv = weight.data();
    const std::size_t s = g.stride;
    for_each_tap(g, [&](std::size_t widx, std::size_t obase, std::size_t ibase, std::size_t lo, std::size_t hi) {
      const T wt = wv[widx];
      for (std::size_t ox = lo; ox < hi; ++ox) out[obase + ox] += wt * iv[ibase + ox * s];
    });
  }

  const Tensor<T> no_bias;
  const Tensor<T>& bias_ref = bias ? *bias : no_bias;
  const bool has_bias = bias != nullptr;
  auto fn = [input, weight, g, has_bias](std::span<const T>, std::span<const T> go,
                                         std::span<std::vector<T>* const> gin) {
    auto iv = input.data();
    auto wv = weight.data();
    const std::size_t s = g.stride;
    std::vector<T>* gi = gin[0];
    std::vector<T>* gw = gin[1];
    if (gi || gw) {
      for_each_tap(g, [&](std::size_t widx, std::size_t obase, std::size_t ibase, std::size_t lo, std::size_t hi) {
        if (gi) {
          const T wt = wv[widx];
          for (std::size_t ox = lo; ox < hi; ++ox) (*gi)[ibase + ox * s] += wt * go[obase + ox];
        }
        if (gw) {
          T acc = 0;
          for (std::size_t ox = lo; ox < hi; ++ox) acc += go[obase + ox] * iv[ibase + ox * s];
          (*gw)[widx] += acc;
        }
      });
    }
    if (has_bias && gin.size() > 2 && gin[2]) {
      auto& gb = *gin[2];
      const std::size_t plane = g.oh * g.ow;
      for (std::size_t b = 0; b < g.n; ++b)
        for (std::size_t oc = 0; oc < g.cout; ++oc) {
          T acc = 0;
          const std::size_t base = (b * g.cout + oc) * plane;
          for (std::size_t i = 0; i < plane; ++i) acc += go[base + i];
          gb[oc] += acc;
        }
    }
  };
  Shape shape{g.n, g.cout, g.oh, g.ow};
  if (has_bias) return make_result<T>("conv2d", shape, std::move(out), {&input, &weight, &bias_ref}, fn);
  return make_result<T>("conv2d", shape, std::move(out), {&input, &weight}, fn);
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  require(x.rank() == 4, "global_avg_pool: expected N x C x H x W, got " + shape_to_string(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  const T inv = T(1) / static_cast<T>(plane);
  std::vector<T> out(n * c);
  auto xv = x.data();
  for (std::size_t i = 0; i < n * c; ++i) {
    T s = 0;
    for (std::size_t j = 0; j < plane; ++j) s += xv[i * plane + j];
    out[i] = s * inv;
  }
  return make_result<T>("global_avg_pool", Shape{n, c}, std::move(out), {&x},
                        [plane, inv](std::span<const T>, std::span<const T> g, std::span<std::vector<T>* const> gin) {
                          auto& dst = *gin[0];
                          for (std::size_t i = 0; i < g.size(); ++i)
                            for (std::size_t j = 0; j < plane; ++j) dst[i * plane + j] += g[i] * inv;
                        });
}

template <typename T>
Tensor<T> adaptive_avg_pool(const Tensor<T>& x, std::size_t grid) {
  require(x.rank() == 4, "adaptive_avg_pool: expected N x C x H x W, got " + shape_to_string(x.shape()));
  require(grid >= 1, "adaptive_avg_pool: grid must be >= 1");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3), cells = grid * grid;
  // Cell i spans [floor(i * L / g), ceil((i + 1) * L / g)).
  auto span_of = [grid](std::size_t i, std::size_t len) {
    return std::pair<std::size_t, std::size_t>{i * len / grid, ((i + 1) * len + grid - 1) / grid};
  };
  std::vector<T> out(n * c * cells, T(0));
  auto xv = x.data();
  for (std::size_t p = 0; p < n * c; ++p)
    for (std::size_t gy = 0; gy < grid; ++gy)
      for (std::size_t gx = 0; gx < grid; ++gx) {
        const auto [r0, r1] = span_of(gy, h);
        const auto [c0, c1] = span_of(gx, w);
        T acc = 0;
        for (std::size_t r = r0; r < r1; ++r)
          for (std::size_t q = c0; q < c1; ++q) acc += xv[(p * h + r) * w + q];
        out[p * cells + gy * grid + gx] = acc / static_cast<T>((r1 - r0) * (c1 - c0));
      }
  return make_result<T>("adaptive_avg_pool", Shape{n, c * cells}, std::move(out), {&x},
                        [=](std::span<const T>, std::span<const T> g, std::span<std::vector<T>* const> gin) {
                          auto& dst = *gin[0];
                          for (std::size_t p = 0; p < n * c; ++p)
                            for (std::size_t gy = 0; gy < grid; ++gy)
                              for (std::size_t gx = 0; gx < grid; ++gx) {
                                const auto [r0, r1] = span_of(gy, h);
                                const auto [c0, c1] = span_of(gx, w);
                                const T share = g[p * cells + gy * grid + gx] / static_cast<T>((r1 - r0) * (c1 - c0));
                                for (std::size_t r = r0; r < r1; ++r)
                                  for (std::size_t q = c0; q < c1; ++q) dst[(p * h + r) * w + q] += share;
                              }
                        });
}

template <typename T>
Tensor<T> l2_normalize(const Tensor<T>& x) {
  require(x.rank() >= 1, "l2_normalize: expected rank >= 1");
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.numel() / d;
  auto xv = x.data();
  std::vector<T> out(x.numel());
  std::vector<T> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T ss = 0;
    for (std::size_t j = 0; j < d; ++j) ss += xv[r * d + j] * xv[r * d + j];
    const T nrm = std::sqrt(ss);
    if (!(nrm > T(0))) throw NonFiniteError("l2_normalize: zero-norm input");
    norms[r] = nrm;
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = xv[r * d + j] / nrm;
  }
  return make_result<T>("l2_normalize", x.shape(), std::move(out), {&x},
                        [norms, d](std::span<const T> y, std::span<const T> g, std::span<std::vector<T>* const> gin) {
                          auto& dst = *gin[0];
                          for (std::size_t r = 0; r < norms.size(); ++r) {
                            T dot = 0;
                            for (std::size_t j = 0; j < d; ++j) dot += y[r * d + j] * g[r * d + j];
                            for (std::size_t j = 0; j < d; ++j)
                              dst[r * d + j] += (g[r * d + j] - y[r * d + j] * dot) / norms[r];
                          }
                        });
}

template <typename T>
Tensor<T> cosine(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.numel() == b.numel(),
          "cosine: size mismatch " + shape_to_string(a.shape()) + " vs " + shape_to_string(b.shape()));
  auto av = a.data();
  auto bv = b.data();
  T ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    ab += av[i] * bv[i];
    aa += av[i] * av[i];
    bb += bv[i] * bv[i];
  }
  if (!(aa > T(0)) || !(bb > T(0))) throw NonFiniteError("cosine: zero-norm input");
  const T na = std::sqrt(aa), nb = std::sqrt(bb);
  const T c = ab / (na * nb);
  return make_result<T>("cosine", Shape{}, {std::clamp(c, T(-1), T(1))}, {&a, &b},
                        [a, b, na, nb, c](std::span<const T>, std::span<const T> g,
                                          std::span<std::vector<T>* const> gin) {
                          auto av = a.data();
                          auto bv = b.data();
                          const T inv = T(1) / (na * nb);
                          if (auto* ga = gin[0])
                            for (std::size_t i = 0; i < av.size(); ++i)
                              (*ga)[i] += g[0] * (bv[i] * inv - c * av[i] / (na * na));
                          if (auto* gb = gin[1])
                            for (std::size_t i = 0; i < bv.size(); ++i)
                              (*gb)[i] += g[0] * (av[i] * inv - c * bv[i] / (nb * nb));
                        });
}

template <typename T>
Tensor<T> upsample_nearest(const Tensor<T>& x, std::size_t factor) {
  require(x.rank() == 4, "upsample_nearest: expected N x C x H x W, got " + shape_to_string(x.shape()));
  require(factor >= 1, "upsample_nearest: factor must be positive");
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = h * factor, ow = w * factor;
  auto xv = x.data();
  std::vector<T> out(planes * oh * ow);
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xx = 0; xx < ow; ++xx) out[(p * oh + y) * ow + xx] = xv[(p * h + y / factor) * w + xx / factor];
  return make_result<T>("upsample_nearest", Shape{x.dim(0), x.dim(1), oh, ow}, std::move(out), {&x},
                        [planes, h, w, oh, ow, factor](std::span<const T>, std::span<const T> g,
                                                       std::span<std::vector<T>* const> gin) {
                          auto& dst = *gin[0];
                          for (std::size_t p = 0; p < planes; ++p)
                            for (std::size_t y = 0; y < oh; ++y)
                              for (std::size_t xx = 0; xx < ow; ++xx)
                                dst[(p * h + y / factor) * w + xx / factor] += g[(p * oh + y) * ow + xx];
                        });
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.rank() == 4 && b.rank() == 4 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3),
          "concat_channels: incompatible shapes " + shape_to_string(a.shape()) + " and " +
              shape_to_string(b.shape()));
  const std::size_t n = a.dim(0), plane = a.dim(2) * a.dim(3);
  const std::size_t ca = a.dim(1) * plane, cb = b.dim(1) * plane;
  std::vector<T> out;
  out.reserve(a.numel() + b.numel());
  for (std::size_t i = 0; i < n; ++i) {
    out.insert(out.end(), a.data().begin() + static_cast<std::ptrdiff_t>(i * ca),
               a.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * ca));
    out.insert(out.end(), b.data().begin() + static_cast<std::ptrdiff_t>(i * cb),
               b.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * cb));
  }
  return make_result<T>("concat_channels", Shape{n, a.dim(1) + b.dim(1), a.dim(2), a.dim(3)}, std::move(out),
                        {&a, &b},
                        [n, ca, cb](std::span<const T>, std::span<const T> g, std::span<std::vector<T>* const> gin) {
                          for (std::size_t i = 0; i < n; ++i) {
                            const std::size_t base = i * (ca + cb);
                            if (auto* ga = gin[0])
                              for (std::size_t j = 0; j < ca; ++j) (*ga)[i * ca + j] += g[base + j];
                            if (auto* gb = gin[1])
                              for (std::size_t j = 0; j < cb; ++j) (*gb)[i * cb + j] += g[base + ca + j];
                          }
                        });
}

template <typename T>
Tensor<T> add_channel_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  require(x.rank() == 4 && bias.rank() == 1 && bias.dim(0) == x.dim(1),
          "add_channel_bias: expected N x C x H x W and C, got " + shape_to_string(x.shape()) + " and " +
              shape_to_string(bias.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  auto xv = x.data();
  auto bv = bias.data();
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (i * c + ch) * plane;
      for (std::size_t j = 0; j < plane; ++j) out[base + j] = xv[base + j] + bv[ch];
    }
  return make_result<T>("add_channel_bias", x.shape(), std::move(out), {&x, &bias},
                        [n, c, plane](std::span<const T>, std::span<const T> g, std::span<std::vector<T>* const> gin) {
                          if (auto* gx = gin[0])
                            for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
                          if (auto* gb = gin[1])
                            for (std::size_t i = 0; i < n; ++i)
                              for (std::size_t ch = 0; ch < c; ++ch) {
                                T acc = 0;
                                const std::size_t base = (i * c + ch) * plane;
                                for (std::size_t j = 0; j < plane; ++j) acc += g[base + j];
                                (*gb)[ch] += acc;
                              }
                        });
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::size_t label) {
  const bool ok = logits.rank() == 1 || (logits.rank() == 2 && logits.dim(0) == 1);
  require(ok, "cross_entropy: expected {C} or {1, C} logits, got " + shape_to_string(logits.shape()));
  const std::size_t c = logits.numel();
  if (label >= c) throw ConfigError("cross_entropy: label out of range");
  auto lv = logits.data();
  const T mx = *std::max_element(lv.begin(), lv.end());
  T z = 0;
  for (T v : lv) z += std::exp(v - mx);
  const T lse = mx + std::log(z);
  std::vector<T> probs(c);
  for (std::size_t i = 0; i < c; ++i) probs[i] = std::exp(lv[i] - lse);
  return make_result<T>("cross_entropy", Shape{}, {lse - lv[label]}, {&logits},
                        [probs, label](std::span<const T>, std::span<const T> g, std::span<std::vector<T>* const> gin) {
                          auto& dst = *gin[0];
                          for (std::size_t i = 0; i < probs.size(); ++i)
                            dst[i] += g[0] * (probs[i] - (i == label ? T(1) : T(0)));
                        });
}

// ---------------------------------------------------------------------------
// Reverse pass

template <typename T>
std::vector<Tensor<T>> backward(const Tensor<T>& root, std::span<const Tensor<T>> wrt) {
  if (root.numel() != 1) throw GraphError("backward: root must be a scalar, got " + shape_to_string(root.shape()));
  if (!root.requires_grad()) throw GraphError("backward: root was not traced");

  // Iterative post-order DFS gives a topological order (inputs before users).
  std::vector<const Node<T>*> order;
  std::unordered_set<const Node<T>*> seen;
  std::vector<std::pair<const Node<T>*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      const Node<T>* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  std::unordered_map<const Node<T>*, std::vector<T>> grads;
  grads[root.node().get()] = std::vector<T>{T(1)};
  std::unordered_set<const Node<T>*> keep;
  for (const auto& t : wrt) keep.insert(t.node().get());

  std::vector<std::vector<T>*> input_grads;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const Node<T>* node = *it;
    auto found = grads.find(node);
    if (found == grads.end() || !node->backward) continue;
    input_grads.clear();
    for (const auto& in : node->inputs) {
      if (!in->requires_grad) {
        input_grads.push_back(nullptr);
        continue;
      }
      auto& slot = grads[in.get()];
      if (slot.empty()) slot.assign(in->value.size(), T(0));
      input_grads.push_back(&slot);
    }
    // Re-lookup: inserting parents may have rehashed the map.
    const std::vector<T> upstream = std::move(grads[node]);
    node->backward(node->value, upstream, input_grads);
    if (!keep.count(node)) grads.erase(node);
    else grads[node] = upstream;
  }

  std::vector<Tensor<T>> result;
  result.reserve(wrt.size());
  for (const auto& t : wrt) {
    auto found = grads.find(t.node().get());
    if (found == grads.end() || found->second.empty()) {
      result.push_back(Tensor<T>::zeros(t.shape()));
    } else {
      check_finite<T>(found->second, "backward");
      result.emplace_back(t.shape(), found->second);
    }
  }
  return result;
}

template <typename T>
double finite_diff_check(const ScalarFunction<T>& f, const Tensor<T>& x, double h) {
  const Tensor<T> leaf = x.leaf();
  const Tensor<T> analytic = backward(f(leaf), {leaf})[0];
  std::vector<T> probe(x.data().begin(), x.data().end());
  double worst = 0.0;
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const T orig = probe[i];
    probe[i] = static_cast<T>(orig + h);
    const double fp = static_cast<double>(f(Tensor<T>(x.shape(), probe)).item());
    probe[i] = static_cast<T>(orig - h);
    const double fm = static_cast<double>(f(Tensor<T>(x.shape(), probe)).item());
    probe[i] = orig;
    const double numeric = (fp - fm) / (2.0 * h);
    const double err = std::abs(static_cast<double>(analytic[i]) - numeric) / (std::abs(numeric) + 1e-8);
    worst = std::max(worst, err);
  }
  return worst;
}

#define ADVDIFF_INSTANTIATE(T)                                                                             \
  template class Tensor<T>;                                                                                \
  template T max_abs(const Tensor<T>&);                                                                    \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                              \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                              \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                              \
  template Tensor<T> neg(const Tensor<T>&);                                                                \
  template Tensor<T> scale(const Tensor<T>&, T);                                                           \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                                      \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                           \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*, Conv2dOptions);          \
  template Tensor<T> relu(const Tensor<T>&);                                                               \
  template Tensor<T> gelu(const Tensor<T>&);                                                               \
  template Tensor<T> clamp(const Tensor<T>&, T, T);                                                        \
  template Tensor<T> global_avg_pool(const Tensor<T>&);                                                    \
  template Tensor<T> adaptive_avg_pool(const Tensor<T>&, std::size_t);                                     \
  template Tensor<T> sum(const Tensor<T>&);                                                                \
  template Tensor<T> mean(const Tensor<T>&);                                                               \
  template Tensor<T> l2_normalize(const Tensor<T>&);                                                       \
  template Tensor<T> cosine(const Tensor<T>&, const Tensor<T>&);                                           \
  template Tensor<T> upsample_nearest(const Tensor<T>&, std::size_t);                                      \
  template Tensor<T> concat_channels(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> add_channel_bias(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                                     \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::size_t);                                         \
  template std::vector<Tensor<T>> backward(const Tensor<T>&, std::span<const Tensor<T>>);                  \
  template double finite_diff_check(const ScalarFunction<T>&, const Tensor<T>&, double);

ADVDIFF_INSTANTIATE(float)
ADVDIFF_INSTANTIATE(double)

#undef ADVDIFF_INSTANTIATE

}  // namespace advdiff
