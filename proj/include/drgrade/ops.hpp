#pragma once

// Differentiable layer primitives. Every forward function is pure; backward
// functions take whatever the forward pass cached (input tensor, argmax
// indices, dropout mask) explicitly.

#include <cstddef>
#include <vector>

#include "drgrade/random.hpp"
#include "drgrade/tensor.hpp"

namespace drgrade {

enum class Mode { train, infer };

// floor((in + 2*padding - window) / stride) + 1. Throws ConfigError when the
// window does not fit the padded extent.
std::size_t window_out_extent(std::size_t in, std::size_t window, std::size_t stride, std::size_t padding);

// -- convolution ------------------------------------------------------------
// input (N, C, H, W); weight (F, C, k, k); bias (F). One bias per feature map.

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                         std::size_t stride, std::size_t padding);

template <typename T>
struct ConvGrads {
  Tensor<T> input;
  Tensor<T> weight;
  Tensor<T> bias;
};

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& grad_out, const Tensor<T>& cached_input, const Tensor<T>& weight,
                             std::size_t stride, std::size_t padding);

// -- max pooling ------------------------------------------------------------
// Padded cells never win the max.

template <typename T>
struct PoolResult {
  Tensor<T> output;
  std::vector<std::size_t> argmax;  // flat input index per output element
};

template <typename T>
PoolResult<T> maxpool_forward(const Tensor<T>& input, std::size_t window, std::size_t stride,
                              std::size_t padding = 0);

template <typename T>
Tensor<T> maxpool_backward(const Tensor<T>& grad_out, const std::vector<std::size_t>& argmax,
                           const Shape& input_shape);

// -- activations ------------------------------------------------------------

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& input, T slope);

template <typename T>
Tensor<T> leaky_relu_backward(const Tensor<T>& grad_out, const Tensor<T>& cached_input, T slope);

// -- fully connected --------------------------------------------------------
// input (N, D); weight (U, D); bias (U). out = input * weight^T + bias.

template <typename T>
Tensor<T> dense_forward(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias);

template <typename T>
struct DenseGrads {
  Tensor<T> input;
  Tensor<T> weight;
  Tensor<T> bias;
};

template <typename T>
DenseGrads<T> dense_backward(const Tensor<T>& grad_out, const Tensor<T>& cached_input, const Tensor<T>& weight);

// -- dropout ----------------------------------------------------------------
// Inverted dropout: survivors are scaled by 1/(1-p) in train mode, inference
// is the identity. `mask` holds the per-element multiplier (empty in infer).

template <typename T>
struct DropoutResult {
  Tensor<T> output;
  Tensor<T> mask;
};

template <typename T>
DropoutResult<T> dropout(const Tensor<T>& input, double p, Mode mode, Rng& rng);

template <typename T>
Tensor<T> dropout_backward(const Tensor<T>& grad_out, const Tensor<T>& mask);

// -- maxout -----------------------------------------------------------------
// (N, U) -> (N, U / group), max over consecutive groups.

template <typename T>
struct MaxoutResult {
  Tensor<T> output;
  std::vector<std::size_t> argmax;
};

template <typename T>
MaxoutResult<T> maxout(const Tensor<T>& input, std::size_t group);

template <typename T>
Tensor<T> maxout_backward(const Tensor<T>& grad_out, const std::vector<std::size_t>& argmax,
                          const Shape& input_shape);

// -- loss -------------------------------------------------------------------

template <typename T>
struct LossResult {
  T loss;
  Tensor<T> grad;
};

// mean((pred - target)^2); grad = 2 (pred - target) / N.
template <typename T>
LossResult<T> mse_loss(const Tensor<T>& pred, const Tensor<T>& target);

// -- initialization ---------------------------------------------------------

// Random matrix with orthonormal rows (fan_out <= fan_in) or columns
// otherwise, after flattening `shape` to (shape[0], product(rest)).
template <typename T>
Tensor<T> orthogonal_init(const Shape& shape, Rng& rng);

}  // namespace drgrade
