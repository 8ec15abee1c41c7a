#include "cscunet/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "cscunet/ops.hpp"

namespace cscunet {

double GradCheckReport::worst() const {
  return max_rel_error.empty() ? 0.0
                               : *std::max_element(max_rel_error.begin(), max_rel_error.end());
}

Tensor<double> random_input(const InputSpec& spec, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<double> values(spec.shape.numel());
  switch (spec.kind) {
    case InputKind::uniform: {
      std::uniform_real_distribution<double> u(-1.0, 1.0);
      for (auto& v : values) v = u(rng);
      break;
    }
    case InputKind::away_from_zero: {
      std::uniform_real_distribution<double> u(-1.0, 1.0);
      for (auto& v : values) {
        do {
          v = u(rng);
        } while (std::abs(v) <= 1e-3);
      }
      break;
    }
    case InputKind::distinct: {
      // Gaps of 0.01 dwarf the finite-difference step.
      std::vector<std::size_t> order(values.size());
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::shuffle(order.begin(), order.end(), rng);
      const double n = static_cast<double>(values.size());
      for (std::size_t i = 0; i < values.size(); ++i) {
        values[i] = (static_cast<double>(order[i]) - n / 2.0) * 0.01;
      }
      break;
    }
    case InputKind::positive: {
      std::uniform_real_distribution<double> u(0.5, 1.5);
      for (auto& v : values) v = u(rng);
      break;
    }
  }
  return Tensor<double>(spec.shape, std::move(values), spec.differentiable);
}

namespace {

double projected(const GradFn& f, std::span<const Tensor<double>> inputs,
                 const std::vector<double>& weights) {
  NoGradGuard guard;
  const Tensor<double> out = f(inputs);
  double acc = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) acc += weights[i] * out.data()[i];
  return acc;
}

}  // namespace

GradCheckReport grad_check(const std::string& name, const GradFn& f,
                           std::vector<Tensor<double>> inputs, std::uint64_t seed,
                           const GradCheckOptions& options) {
  GradCheckReport report;
  report.name = name;
  report.tolerance = options.tolerance;

  std::vector<double> weights;
  {
    NoGradGuard guard;
    const Tensor<double> probe = f(inputs);
    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    weights.resize(probe.numel());
    for (auto& w : weights) w = u(rng);
  }

  for (auto& in : inputs) {
    if (in.requires_grad()) in.zero_grad();
  }
  const Tensor<double> out = f(inputs);
  const Tensor<double> projection =
      dot(out, Tensor<double>(out.shape(), std::vector<double>(weights)));
  projection.backward();

  for (auto& in : inputs) {
    if (!in.requires_grad()) {
      report.max_rel_error.push_back(0.0);
      continue;
    }
    std::vector<double> analytic(in.numel(), 0.0);
    if (in.has_grad()) std::copy(in.grad().begin(), in.grad().end(), analytic.begin());
    std::vector<double> numeric(in.numel());
    auto data = in.data();
    for (std::size_t k = 0; k < data.size(); ++k) {
      const double saved = data[k];
      data[k] = saved + options.step;
      const double plus = projected(f, inputs, weights);
      data[k] = saved - options.step;
      const double minus = projected(f, inputs, weights);
      data[k] = saved;
      numeric[k] = (plus - minus) / (2.0 * options.step);
    }
    double max_diff = 0.0;
    double scale = 0.0;
    for (std::size_t k = 0; k < analytic.size(); ++k) {
      max_diff = std::max(max_diff, std::abs(analytic[k] - numeric[k]));
      scale = std::max({scale, std::abs(analytic[k]), std::abs(numeric[k])});
    }
    report.max_rel_error.push_back(scale > 0.0 ? max_diff / scale : max_diff);
  }
  report.passed = report.worst() < options.tolerance;
  return report;
}

GradCheckReport grad_check(const std::string& name, const GradFn& f,
                           std::span<const InputSpec> specs, std::uint64_t seed,
                           const GradCheckOptions& options) {
  std::vector<Tensor<double>> inputs;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    inputs.push_back(random_input(specs[i], seed * 1000003ULL + i));
  }
  return grad_check(name, f, std::move(inputs), seed, options);
}

std::vector<RegisteredOp> registered_ops() {
  using In = std::span<const Tensor<double>>;
  const Shape x{2, 3, 6, 6};
  const Shape vec{1, 3, 1, 1};
  std::vector<RegisteredOp> ops;

  ops.push_back({"conv2d",
                 {{x}, {{4, 3, 3, 3}}, {{1, 4, 1, 1}}},
                 [](In in) { return conv2d(in[0], in[1], in[2], 1, 1); }});
  ops.push_back({"conv2d_stride2",
                 {{x}, {{4, 3, 3, 3}}, {{1, 4, 1, 1}}},
                 [](In in) { return conv2d(in[0], in[1], in[2], 2, 1); }});
  ops.push_back({"conv_transpose2d",
                 {{x}, {{3, 4, 3, 3}}, {{1, 4, 1, 1}}},
                 [](In in) { return conv_transpose2d(in[0], in[1], in[2], 1, 1, 0); }});
  ops.push_back({"conv_transpose2d_upsample",
                 {{x}, {{3, 2, 3, 3}}, {{1, 2, 1, 1}}},
                 [](In in) { return conv_transpose2d(in[0], in[1], in[2], 2, 1, 1); }});
  ops.push_back({"maxpool2d", {{x, InputKind::distinct}}, [](In in) { return maxpool2d(in[0]); }});
  ops.push_back({"batchnorm2d_train",
                 {{x}, {vec, InputKind::positive}, {vec}},
                 [](In in) {
                   auto stats = BatchNormStats<double>::fresh(3);
                   return batchnorm2d(in[0], in[1], in[2], stats, Mode::train);
                 }});
  ops.push_back({"batchnorm2d_eval",
                 {{x}, {vec, InputKind::positive}, {vec}},
                 [](In in) {
                   BatchNormStats<double> stats{{0.1, -0.2, 0.3}, {0.5, 1.5, 2.0}, 0.1};
                   return batchnorm2d(in[0], in[1], in[2], stats, Mode::eval);
                 }});
  ops.push_back({"relu", {{x, InputKind::away_from_zero}}, [](In in) { return relu(in[0]); }});
  ops.push_back({"add", {{x}, {x}}, [](In in) { return add(in[0], in[1]); }});
  ops.push_back({"sub", {{x}, {x}}, [](In in) { return sub(in[0], in[1]); }});
  ops.push_back({"scale", {{x}, {Shape{}}}, [](In in) { return scale(in[0], in[1]); }});
  ops.push_back({"add_channel_bias", {{x}, {vec}},
                 [](In in) { return add_channel_bias(in[0], in[1]); }});
  ops.push_back({"concat_channels", {{x}, {{2, 2, 6, 6}}},
                 [](In in) { return concat_channels(in[0], in[1]); }});
  ops.push_back({"log_softmax", {{x}}, [](In in) { return log_softmax(in[0]); }});
  ops.push_back({"log_softmax_nll", {{x}}, [](In in) {
                   LabelMap target{2, 6, 6, {}};
                   for (int i = 0; i < 2 * 36; ++i) target.labels.push_back((i * 7 + 1) % 3);
                   return log_softmax_nll(in[0], target);
                 }});
  ops.push_back({"sum", {{x}}, [](In in) { return sum(in[0]); }});
  ops.push_back({"dot", {{x}, {x}}, [](In in) { return dot(in[0], in[1]); }});
  return ops;
}

}  // namespace cscunet
