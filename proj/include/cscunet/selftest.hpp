#pragma once

#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "cscunet/gradcheck.hpp"
#include "cscunet/mlcsc.hpp"

namespace cscunet {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

struct SelfTestOptions {
  /// Replaces the conv2d op under the conv2d gradient check with a copy
  /// whose weight gradient is scaled by 1.01.
  bool corrupt_conv_grad = false;
};

struct SelfTestReport {
  std::vector<CheckResult> checks;
  [[nodiscard]] bool all_passed() const;
  [[nodiscard]] std::vector<std::string> failures() const;
};

/// Gradient checks on every registered op and on CSC blocks with 1-3
/// unfoldings, the thresholding-only equivalence, ISTA descent,
/// conv/transposed-conv adjointness, parameter parity across variants,
/// metric and learning-rate identities. `on_check` sees each result as it
/// completes.
SelfTestReport run_selftest(const SelfTestOptions& options = {},
                            const std::function<void(const CheckResult&)>& on_check = {});

void print_check(std::ostream& os, const CheckResult& check);

/// A CSC block as a function of [x, then per layer W, mu, theta(, gamma,
/// beta)], evaluated in train mode with fresh batch-norm statistics.
GradFn block_grad_fn(const BlockConfig& cfg);
/// Matching input specs; theta is held fixed when batch norm is on, since
/// a per-channel shift ahead of train-mode batch norm has zero gradient.
std::vector<InputSpec> block_input_specs(const BlockConfig& cfg, int batch, int size);

}  // namespace cscunet
