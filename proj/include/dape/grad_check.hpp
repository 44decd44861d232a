#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "dape/autodiff.hpp"

namespace dape {

/// Builds a scalar (1×1) on `tape` from leaves bound to the parameter values.
using ScalarFn = std::function<Var(Tape& tape, const std::vector<Var>& params)>;

struct GradCheckOptions {
  double epsilon = 1e-5;
  /// Coordinates sampled per parameter tensor; 0 checks every coordinate.
  std::size_t samples_per_param = 0;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
};

/// Central finite differences against tape gradients. Relative error per
/// coordinate is |g_fd - g_tape| / max(1, |g_fd|, |g_tape|).
/// Throws NumericError if any tape gradient is non-finite.
GradCheckResult grad_check(const ScalarFn& f, const std::vector<Tensor>& params, const GradCheckOptions& opts = {});

/// Tape gradients of f at `params`, in parameter order.
std::vector<Tensor> tape_gradients(const ScalarFn& f, const std::vector<Tensor>& params, double* value = nullptr);

}  // namespace dape
