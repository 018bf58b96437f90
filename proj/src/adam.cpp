#include "xattn/adam.hpp"

#include <cmath>

#include "xattn/errors.hpp"

namespace xattn {

void adam_step(std::span<Tensor> params, std::span<const Tensor> grads, AdamState& state,
               double lr) {
  if (!(lr > 0)) throw ParameterError("adam_step: learning rate must be > 0");
  if (params.size() != grads.size()) {
    throw DimensionError("adam_step: " + std::to_string(params.size()) + " params but " +
                         std::to_string(grads.size()) + " grads");
  }
  if (state.first_moment.empty()) {
    for (const Tensor& p : params) {
      state.first_moment.emplace_back(p.rows(), p.cols());
      state.second_moment.emplace_back(p.rows(), p.cols());
    }
  }
  if (state.first_moment.size() != params.size()) {
    throw DimensionError("adam_step: optimizer state tracks a different parameter set");
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (!params[k].same_shape(grads[k]) || !params[k].same_shape(state.first_moment[k])) {
      throw DimensionError("adam_step: shape mismatch for parameter " + std::to_string(k) + ": " +
                           params[k].shape_string() + " vs grad " + grads[k].shape_string());
    }
  }

  ++state.step;
  const double b1 = state.beta1, b2 = state.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = params[k];
    Tensor& m = state.first_moment[k];
    Tensor& v = state.second_moment[k];
    const Tensor& g = grads[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * g[i];
      v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      p[i] -= lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

}  // namespace xattn
