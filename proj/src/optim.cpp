#include "cscunet/optim.hpp"

#include <cmath>

#include "cscunet/errors.hpp"

namespace cscunet {

template <typename T>
void adam_step(std::vector<Tensor<T>>& params, AdamState& state, double lr) {
  if (state.m.empty() && state.step == 0) {
    for (const auto& p : params) {
      state.m.emplace_back(p.numel(), 0.0);
      state.v.emplace_back(p.numel(), 0.0);
    }
  }
  if (state.m.size() != params.size()) {
    throw ShapeError("adam_step: optimizer state tracks " + std::to_string(state.m.size()) +
                     " parameters, got " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.m[i].size() != params[i].numel() || state.v[i].size() != params[i].numel()) {
      throw ShapeError("adam_step: moment shape mismatch for parameter " + std::to_string(i));
    }
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto data = params[i].data();
    auto grad = params[i].grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t k = 0; k < data.size(); ++k) {
      const double g = grad.empty() ? 0.0 : static_cast<double>(grad[k]);
      m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * g;
      v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * g * g;
      const double m_hat = m[k] / c1;
      const double v_hat = v[k] / c2;
      data[k] = static_cast<T>(data[k] - lr * m_hat / (std::sqrt(v_hat) + state.eps));
    }
  }
}

double step_decay_lr(double lr0, int epoch, int halving_period) {
  if (halving_period <= 0) return lr0;
  return std::ldexp(lr0, -(epoch / halving_period));
}

template void adam_step<float>(std::vector<Tensor<float>>&, AdamState&, double);
template void adam_step<double>(std::vector<Tensor<double>>&, AdamState&, double);

}  // namespace cscunet
