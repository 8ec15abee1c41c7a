#include <cmath>
#include <random>
#include <string>

#include "cscunet/errors.hpp"
#include "cscunet/mlcsc.hpp"

namespace cscunet {

namespace {

int same_padding(const Tensor<double>& dictionary) {
  const Shape ks = dictionary.shape();
  if (ks.h != ks.w || ks.h % 2 == 0) {
    throw ShapeError("pursuit: dictionary kernels must be square with odd size");
  }
  return ks.h / 2;
}

double squared_norm(std::span<const double> v) {
  double acc = 0.0;
  for (double x : v) acc += x * x;
  return acc;
}

}  // namespace

Shape PursuitProblem::code_shape() const {
  const Shape s = signal.shape();
  return {s.n, dictionary.shape().n, s.h, s.w};
}

Tensor<double> synthesize(const PursuitProblem& prob, const Tensor<double>& code) {
  NoGradGuard guard;
  if (code.shape() != prob.code_shape()) {
    throw ShapeError("pursuit: code shape " + to_string(code.shape()) + " expected " +
                     to_string(prob.code_shape()));
  }
  const int pad = same_padding(prob.dictionary);
  return conv_transpose2d(code, prob.dictionary, Tensor<double>{}, 1, pad, 0);
}

double bp_objective(const PursuitProblem& prob, const Tensor<double>& code) {
  const Tensor<double> recon = synthesize(prob, code);
  if (recon.shape() != prob.signal.shape()) {
    throw ShapeError("pursuit: dictionary maps codes to " + to_string(recon.shape()) +
                     ", signal is " + to_string(prob.signal.shape()));
  }
  double fit = 0.0;
  for (std::size_t i = 0; i < recon.numel(); ++i) {
    const double r = prob.signal.data()[i] - recon.data()[i];
    fit += r * r;
  }
  double l1 = 0.0;
  for (double v : code.data()) l1 += std::abs(v);
  return 0.5 * fit + prob.lambda * l1;
}

PursuitResult ista_pursuit(const PursuitProblem& prob, int iterations) {
  NoGradGuard guard;
  if (prob.step <= 0.0) throw ConfigError("pursuit: step size must be positive");
  if (prob.lambda < 0.0) throw ConfigError("pursuit: lambda must be nonnegative");
  const int pad = same_padding(prob.dictionary);
  PursuitResult result;
  result.code = Tensor<double>::zeros(prob.code_shape());
  result.objective.push_back(bp_objective(prob, result.code));
  const double shrink = prob.lambda * prob.step;
  for (int it = 0; it < iterations; ++it) {
    const Tensor<double> residual = sub(synthesize(prob, result.code), prob.signal);
    const Tensor<double> grad = conv2d(residual, prob.dictionary, Tensor<double>{}, 1, pad);
    std::vector<double> next(result.code.numel());
    for (std::size_t i = 0; i < next.size(); ++i) {
      next[i] = std::max(0.0, result.code.data()[i] - prob.step * grad.data()[i] - shrink);
    }
    result.code = Tensor<double>(prob.code_shape(), std::move(next));
    const double f = bp_objective(prob, result.code);
    const double prev = result.objective.back();
    if (f > prev + 1e-9 * std::max(1.0, std::abs(prev))) result.monotone = false;
    result.objective.push_back(f);
  }
  return result;
}

double dictionary_spectral_norm(const Tensor<double>& dictionary, Shape code_shape,
                                int iterations, std::uint64_t seed) {
  NoGradGuard guard;
  const int pad = same_padding(dictionary);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> v(code_shape.numel());
  for (auto& x : v) x = normal(rng);
  Tensor<double> code(code_shape, std::move(v));
  double sigma_sq = 0.0;
  for (int it = 0; it < iterations; ++it) {
    const double norm = std::sqrt(squared_norm(code.data()));
    for (auto& x : code.data()) x /= norm;
    const Tensor<double> image = conv_transpose2d(code, dictionary, Tensor<double>{}, 1, pad, 0);
    sigma_sq = squared_norm(image.data());
    code = conv2d(image, dictionary, Tensor<double>{}, 1, pad);
  }
  return std::sqrt(sigma_sq);
}

}  // namespace cscunet
