#pragma once

#include <functional>
#include <span>

#include "xattn/tape.hpp"

namespace xattn {

// Builds a scalar loss from parameter vars on the given tape. Must be a
// deterministic function of the parameter values.
using LossBuilder = std::function<Var(Tape&, std::span<const Var>)>;

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

// Compares reverse-mode gradients against central differences. The error of
// one coordinate is |analytic - numeric| / max(1e-8, |numeric|); the result
// holds the maximum over every coordinate of every parameter. Throws
// NumericError when the loss is non-finite.
GradCheckResult finite_diff_check(const LossBuilder& f, std::span<const Tensor> params,
                                  double h = 1e-5);

}  // namespace xattn
