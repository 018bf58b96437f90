#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "xattn/tensor.hpp"

namespace xattn {

struct AdamState {
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;
  std::int64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Bias-corrected Adam update, in place. Moments are allocated on the first
// call. Throws ParameterError when lr <= 0 and DimensionError when params,
// grads, and moments disagree in shape.
void adam_step(std::span<Tensor> params, std::span<const Tensor> grads, AdamState& state,
               double lr);

}  // namespace xattn
