#pragma once

// Central finite differences against reverse-mode adjoints, in 64-bit.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "cscunet/tensor.hpp"

namespace cscunet {

using GradFn = std::function<Tensor<double>(std::span<const Tensor<double>>)>;

/// How random inputs are drawn for one argument.
enum class InputKind {
  uniform,         // U(-1, 1)
  away_from_zero,  // U(-1, 1) with |x| > 1e-3 (ReLU kink exclusion)
  distinct,        // shuffled, well-separated values (no max-pool ties)
  positive,        // U(0.5, 1.5)
};

struct InputSpec {
  Shape shape;
  InputKind kind = InputKind::uniform;
  bool differentiable = true;
};

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
};

struct GradCheckReport {
  std::string name;
  /// Per input: max |analytic - numeric| / max(|analytic|_inf, |numeric|_inf).
  /// Non-differentiable inputs report 0.
  std::vector<double> max_rel_error;
  double tolerance = 0.0;
  bool passed = false;

  [[nodiscard]] double worst() const;
};

/// Checks f at the given inputs. The output of f is reduced to a scalar by
/// a seeded random projection so every output element contributes.
GradCheckReport grad_check(const std::string& name, const GradFn& f,
                           std::vector<Tensor<double>> inputs, std::uint64_t seed,
                           const GradCheckOptions& options = {});

/// Draws inputs per spec, then runs grad_check.
GradCheckReport grad_check(const std::string& name, const GradFn& f,
                           std::span<const InputSpec> specs, std::uint64_t seed,
                           const GradCheckOptions& options = {});

Tensor<double> random_input(const InputSpec& spec, std::uint64_t seed);

struct RegisteredOp {
  std::string name;
  std::vector<InputSpec> inputs;
  GradFn fn;
};

/// Every differentiable op in the fixed op set, wired with small inputs
/// (batch 2, 3 channels, 6x6) and the sampling each op needs.
std::vector<RegisteredOp> registered_ops();

}  // namespace cscunet
