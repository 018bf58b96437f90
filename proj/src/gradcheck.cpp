#include "xattn/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "xattn/errors.hpp"

namespace xattn {
namespace {

double evaluate(const LossBuilder& f, std::span<const Tensor> params) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (const Tensor& p : params) vars.push_back(tape.constant(p));
  const double v = f(tape, vars).scalar();
  if (!std::isfinite(v)) throw NumericError("finite_diff_check: loss is not finite");
  return v;
}

}  // namespace

GradCheckResult finite_diff_check(const LossBuilder& f, std::span<const Tensor> params, double h) {
  if (!(h > 0)) throw ParameterError("finite_diff_check: step must be > 0");
  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> vars;
    vars.reserve(params.size());
    for (const Tensor& p : params) vars.push_back(tape.parameter(p));
    const Var loss = f(tape, vars);
    if (!std::isfinite(loss.scalar())) throw NumericError("finite_diff_check: loss is not finite");
    const Gradients grads = tape.backward(loss);
    for (const Var& v : vars) analytic.push_back(grads[v]);
  }

  GradCheckResult result;
  std::vector<Tensor> work(params.begin(), params.end());
  for (std::size_t k = 0; k < work.size(); ++k) {
    for (std::size_t i = 0; i < work[k].size(); ++i) {
      const double orig = work[k][i];
      work[k][i] = orig + h;
      const double up = evaluate(f, work);
      work[k][i] = orig - h;
      const double down = evaluate(f, work);
      work[k][i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double err =
          std::abs(analytic[k][i] - numeric) / std::max(1e-8, std::abs(numeric));
      if (err > result.max_relative_error || (k == 0 && i == 0)) {
        result = {err, k, i, analytic[k][i], numeric};
      }
    }
  }
  return result;
}

}  // namespace xattn
