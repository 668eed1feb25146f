#pragma once

// Dense row-major tensors with tape-free reverse-mode differentiation.
//
// A Tensor is an immutable value holding a shared node. Operations on
// tensors that require gradients record their inputs and a backward rule in
// the result node; the resulting DAG of nodes is the autodiff graph.
// `backward` walks it once in reverse topological order.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "advdiff/errors.hpp"
#include "advdiff/random.hpp"

namespace advdiff {

#if defined(ADVDIFF_BINARY64)
using Real = double;
#else
using Real = float;
#endif

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

namespace detail {

template <typename T>
struct Node;

// Accumulates d(root)/d(input_i) into input_grads[i]; entries are null for
// inputs that are not traced.
template <typename T>
using BackwardFn = std::function<void(std::span<const T> out, std::span<const T> grad_out,
                                      std::span<std::vector<T>* const> input_grads)>;

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<const Node>> inputs;
  BackwardFn<T> backward;
};

}  // namespace detail

template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<const detail::Node<T>>;

  // Rank-0 zero.
  Tensor();
  Tensor(Shape shape, std::vector<T> data);

  static Tensor zeros(const Shape& shape) { return full(shape, T(0)); }
  static Tensor ones(const Shape& shape) { return full(shape, T(1)); }
  static Tensor full(const Shape& shape, T value);
  static Tensor scalar(T value) { return Tensor(Shape{}, {value}); }
  static Tensor randn(const Shape& shape, Rng& rng, double stddev = 1.0);
  static Tensor uniform(const Shape& shape, Rng& rng, double lo, double hi);

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->value.size(); }
  std::span<const T> data() const { return node_->value; }
  T operator[](std::size_t i) const { return node_->value[i]; }
  // Value of a single-element tensor.
  T item() const;

  bool requires_grad() const { return node_->requires_grad; }
  // Copy of the values as a differentiable leaf.
  Tensor leaf() const;
  // Copy of the values without graph history.
  Tensor detach() const;

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<U>(node_->value[i]);
    return Tensor<U>(shape(), std::move(out));
  }

  const NodePtr& node() const { return node_; }
  static Tensor from_node(NodePtr node) { return Tensor(std::move(node)); }

 private:
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}
  NodePtr node_;
};

// Applies `fn` elementwise without tracing.
template <typename T, typename Fn>
Tensor<T> map_values(const Tensor<T>& x, Fn fn) {
  std::vector<T> out(x.numel());
  auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fn(in[i]);
  return Tensor<T>(x.shape(), std::move(out));
}

// Largest absolute entry.
template <typename T>
T max_abs(const Tensor<T>& x);

// ---------------------------------------------------------------------------
// Differentiable operations. Every op validates shapes and throws
// NonFiniteError if the result contains NaN or Inf. The only broadcasting
// supported is between a rank-0 tensor and an arbitrary tensor.

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> neg(const Tensor<T>& x);
template <typename T> Tensor<T> scale(const Tensor<T>& x, T factor);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& x, T offset);
// (M x K) . (K x N)
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

// input N x Cin x H x W, weight Cout x Cin x K x K, bias Cout (optional).
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>* bias,
                 Conv2dOptions options);

template <typename T> Tensor<T> relu(const Tensor<T>& x);
// tanh approximation of GELU
template <typename T> Tensor<T> gelu(const Tensor<T>& x);
// Zeroes the gradient outside (lo, hi).
template <typename T> Tensor<T> clamp(const Tensor<T>& x, T lo, T hi);
// N x C x H x W -> N x C
template <typename T> Tensor<T> global_avg_pool(const Tensor<T>& x);
// N x C x H x W -> N x (C * grid * grid), channel-major. Cell i along an axis
// of length L averages [floor(i L / grid), ceil((i + 1) L / grid)), so cells
// may overlap when L is not a multiple of grid.
template <typename T> Tensor<T> adaptive_avg_pool(const Tensor<T>& x, std::size_t grid);
template <typename T> Tensor<T> sum(const Tensor<T>& x);
template <typename T> Tensor<T> mean(const Tensor<T>& x);
// Normalizes each contiguous run of shape.back() elements to unit L2 norm.
template <typename T> Tensor<T> l2_normalize(const Tensor<T>& x);
// Cosine similarity over all elements, clamped to [-1, 1].
template <typename T> Tensor<T> cosine(const Tensor<T>& a, const Tensor<T>& b);
// Nearest-neighbour upsampling of N x C x H x W by an integer factor.
template <typename T> Tensor<T> upsample_nearest(const Tensor<T>& x, std::size_t factor);
// Concatenation along axis 1 of two N x C x H x W tensors.
template <typename T> Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);
// Adds bias[c] to every element of channel c of an N x C x H x W tensor.
template <typename T> Tensor<T> add_channel_bias(const Tensor<T>& x, const Tensor<T>& bias);
template <typename T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);
// Softmax cross-entropy of a length-C logit vector (shape {C} or {1, C}).
template <typename T> Tensor<T> cross_entropy(const Tensor<T>& logits, std::size_t label);

// Gradients of a traced scalar `root` with respect to each tensor in `wrt`.
// Tensors that did not participate yield zero gradients.
template <typename T>
std::vector<Tensor<T>> backward(const Tensor<T>& root, std::span<const Tensor<T>> wrt);

template <typename T>
std::vector<Tensor<T>> backward(const Tensor<T>& root, std::initializer_list<Tensor<T>> wrt) {
  std::vector<Tensor<T>> list(wrt);
  return backward(root, std::span<const Tensor<T>>(list));
}

template <typename T>
using ScalarFunction = std::function<Tensor<T>(const Tensor<T>&)>;

// max_i |analytic_i - numeric_i| / (|numeric_i| + 1e-8), where numeric is the
// central difference with step h and analytic comes from `backward`.
template <typename T>
double finite_diff_check(const ScalarFunction<T>& f, const Tensor<T>& x, double h);

}  // namespace advdiff
