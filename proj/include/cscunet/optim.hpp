#pragma once

#include <cstdint>
#include <vector>

#include "cscunet/tensor.hpp"

namespace cscunet {

/// Moment estimates for Adam, one entry per parameter in registry order.
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

/// One bias-corrected Adam update. Parameters without an accumulated
/// gradient are treated as having a zero gradient. Throws ShapeError when
/// the parameter list does not match the state it was first used with.
template <typename T>
void adam_step(std::vector<Tensor<T>>& params, AdamState& state, double lr);

/// lr0 * 2^-floor(epoch / halving_period).
double step_decay_lr(double lr0, int epoch, int halving_period);

}  // namespace cscunet
