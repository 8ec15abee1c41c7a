#pragma once

// Multi-layer convolutional sparse coding block.
//
// Layer i owns a 3x3 kernel W_i (c_{i-1} -> c_i), a scalar step mu_i, a
// per-channel threshold theta_i and, optionally, batch-norm parameters. The
// dictionary D_i is the adjoint of W_i, applied with conv_transpose2d.
//
// Thresholding pass:   G_i = relu(bn_i(mu_i * W_i G_{i-1} + theta_i)),  G_0 = y
// Each unfolding:      G_i = relu(bn_i(P_i - mu_i * W_i(D_i P_i - G_{i-1}) + theta_i))
// where P_i is layer i's code from the previous pass and G_{i-1} is the code
// already updated in the current pass. The same parameters are used on every
// pass.

#include <cstdint>
#include <random>
#include <vector>

#include "cscunet/ops.hpp"
#include "cscunet/tensor.hpp"

namespace cscunet {

struct BlockConfig {
  int layers = 2;
  int unfoldings = 0;
  /// c_in, c_1, ..., c_L
  std::vector<int> channels;
  bool batchnorm = true;

  /// Throws ConfigError when the invariants do not hold.
  void validate() const;

  /// The double-conv plan c_in -> c_out -> ... -> c_out.
  static BlockConfig uniform(int in_channels, int out_channels, int layers, int unfoldings,
                             bool batchnorm);
};

template <typename T>
struct LayerParams {
  Tensor<T> weight;     // (c_i, c_{i-1}, 3, 3)
  Tensor<T> step;       // mu_i, single element
  Tensor<T> threshold;  // theta_i, (1, c_i, 1, 1)
  Tensor<T> bn_gamma;   // undefined when batchnorm is off
  Tensor<T> bn_beta;
  BatchNormStats<T> bn_stats;                     // thresholding pass
  std::vector<BatchNormStats<T>> unfold_bn_stats; // unfolding t at index t - 1
};

template <typename T>
struct BlockParams {
  std::vector<LayerParams<T>> layers;

  /// He-normal kernels, mu = 1, theta = 0, gamma = 1, beta = 0.
  static BlockParams init(const BlockConfig& cfg, std::mt19937_64& rng);

  /// Trainable arrays in a fixed order: per layer W, mu, theta[, gamma, beta].
  [[nodiscard]] std::vector<Tensor<T>> trainable() const;
  [[nodiscard]] std::size_t parameter_count() const;
};

template <typename T>
struct BlockState {
  std::vector<Tensor<T>> codes;  // G_1 .. G_L
  int pass = 0;                  // 0 after thresholding, t after unfolding t
};

/// Single thresholding pass.
template <typename T>
BlockState<T> layered_threshold_forward(const Tensor<T>& y, const BlockConfig& cfg,
                                        BlockParams<T>& params, Mode mode = Mode::train);

/// One unfolding applied to `state` in place.
template <typename T>
void ml_ista_unfold(const Tensor<T>& y, const BlockConfig& cfg, BlockParams<T>& params,
                    BlockState<T>& state, Mode mode = Mode::train);

/// Thresholding followed by cfg.unfoldings unfoldings; returns G_L.
template <typename T>
Tensor<T> ml_ista_forward(const Tensor<T>& y, const BlockConfig& cfg, BlockParams<T>& params,
                          Mode mode = Mode::train);

template <typename T>
Tensor<T> csc_block_forward(const Tensor<T>& x, const BlockConfig& cfg, BlockParams<T>& params,
                            Mode mode = Mode::train);

/// A block bundling its configuration and parameters.
template <typename T>
class CscBlock {
 public:
  CscBlock() = default;
  CscBlock(BlockConfig cfg, std::mt19937_64& rng);

  Tensor<T> operator()(const Tensor<T>& x, Mode mode) {
    return csc_block_forward(x, config_, params_, mode);
  }

  [[nodiscard]] const BlockConfig& config() const { return config_; }
  [[nodiscard]] BlockParams<T>& params() { return params_; }
  [[nodiscard]] const BlockParams<T>& params() const { return params_; }

 private:
  BlockConfig config_;
  BlockParams<T> params_;
};

// --- single-layer nonnegative basis pursuit --------------------------------

/// min_G 0.5 |y - D G|^2 + lambda |G|_1 with D the adjoint of conv2d(., W).
/// `dictionary` is a conv kernel (code_channels, signal_channels, k, k).
struct PursuitProblem {
  Tensor<double> signal;
  Tensor<double> dictionary;
  double lambda = 0.0;
  double step = 1.0;

  [[nodiscard]] Shape code_shape() const;
};

struct PursuitResult {
  Tensor<double> code;
  /// Objective before the first iteration, then after each iteration.
  std::vector<double> objective;
  /// False if some iteration increased the objective by more than
  /// 1e-9 * max(1, |previous|).
  bool monotone = true;
};

/// D G, the synthesis operator.
Tensor<double> synthesize(const PursuitProblem& prob, const Tensor<double>& code);

double bp_objective(const PursuitProblem& prob, const Tensor<double>& code);

/// Nonnegative ISTA: G <- relu(G - step * D^T(D G - y) - lambda * step), from G = 0.
PursuitResult ista_pursuit(const PursuitProblem& prob, int iterations);

/// Largest singular value of D via power iteration on D^T D.
double dictionary_spectral_norm(const Tensor<double>& dictionary, Shape code_shape,
                                int iterations = 200, std::uint64_t seed = 1);

}  // namespace cscunet
