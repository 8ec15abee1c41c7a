#pragma once

// The fixed op set. Every op is differentiable in every Tensor argument.

#include <cstdint>
#include <optional>
#include <vector>

#include "cscunet/tensor.hpp"

namespace cscunet {

enum class Mode { train, eval };

/// Convolution weights (out_channels, in_channels, kH, kW) and an optional
/// per-out-channel bias stored as (1, out_channels, 1, 1).
template <typename T>
struct ConvKernel {
  Tensor<T> weight;
  Tensor<T> bias;  // may be undefined
};

/// Per-channel statistics tracked by batchnorm2d in train mode.
template <typename T>
struct BatchNormStats {
  std::vector<T> mean;
  std::vector<T> var;
  T momentum = T(0.1);

  static BatchNormStats fresh(int channels) {
    return {std::vector<T>(channels, T(0)), std::vector<T>(channels, T(1)), T(0.1)};
  }
};

/// Class indices for a batch, laid out (n, h, w).
struct LabelMap {
  int n = 1;
  int h = 0;
  int w = 0;
  std::vector<std::int32_t> labels;
};

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 int stride, int padding);

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const ConvKernel<T>& k, int stride, int padding) {
  return conv2d(x, k.weight, k.bias, stride, padding);
}

/// Adjoint of conv2d with the same weight: x has weight.out_channels
/// channels and the result has weight.in_channels. The optional bias has
/// weight.in_channels entries.
template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                           int stride, int padding, int output_padding);

/// 2x2 window, stride 2. Ties go to the first element in row-major order.
template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& x);

/// Train mode normalizes with batch statistics (biased variance) and
/// updates `stats` with the unbiased variance; eval mode reads `stats`.
template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                      BatchNormStats<T>& stats, Mode mode, T eps = T(1e-5));

/// max(0, x); the gradient at exactly 0 is 0.
template <typename T>
Tensor<T> relu(const Tensor<T>& x);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);

/// x times a single-element tensor.
template <typename T>
Tensor<T> scale(const Tensor<T>& x, const Tensor<T>& factor);

/// x plus a (1, C, 1, 1) bias broadcast over n, h, w.
template <typename T>
Tensor<T> add_channel_bias(const Tensor<T>& x, const Tensor<T>& bias);

/// Channel-wise concatenation [a, b].
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);

/// log softmax over the channel axis.
template <typename T>
Tensor<T> log_softmax(const Tensor<T>& logits);

/// Mean over non-ignored pixels of -log softmax(logits)[target]. Returns 0
/// when every pixel is ignored.
template <typename T>
Tensor<T> log_softmax_nll(const Tensor<T>& logits, const LabelMap& target,
                          std::optional<int> ignore_index = std::nullopt);

template <typename T>
Tensor<T> sum(const Tensor<T>& x);

/// <a, b> as a single-element tensor.
template <typename T>
Tensor<T> dot(const Tensor<T>& a, const Tensor<T>& b);

/// Output spatial size of conv2d along one axis.
int conv_out_size(int in, int kernel, int stride, int padding);
/// Output spatial size of conv_transpose2d along one axis.
int conv_transpose_out_size(int in, int kernel, int stride, int padding, int output_padding);

}  // namespace cscunet
