#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "xattn/tape.hpp"

// Differentiable primitives over 2-D tensors. Every op records on the tape of
// its first operand and throws DimensionError on non-conforming shapes.
namespace xattn::ops {

enum class BinaryKind { matmul, add, hadamard };

// Dispatches on kind; scale is the separate scale() below.
Var tensor_op(const Var& a, const Var& b, BinaryKind kind);

Var matmul(const Var& a, const Var& b);
// a * b^T
Var matmul_nt(const Var& a, const Var& b);
Var transpose(const Var& a);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
// a + row broadcast over rows; row is 1 x a.cols().
Var add_row(const Var& a, const Var& row);
Var hadamard(const Var& a, const Var& b);
Var scale(const Var& a, double c);
Var add_scalar(const Var& a, double c);
// 1 - a
Var one_minus(const Var& a);
// out(i, j) = a(i, j) * factors(0, j)
Var scale_columns(const Var& a, const Var& factors);

// Row-wise softmax with max subtraction. Throws NumericError on non-finite input.
Var softmax_rows(const Var& x);
// Row i of an r x c input attends to columns j <= i + (c - r).
Var causal_softmax_rows(const Var& x);

Var layer_norm_rows(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5);
Var gelu(const Var& x);
// PReLU with one slope per column; slope is 1 x x.cols().
Var prelu(const Var& x, const Var& slope);
Var sigmoid(const Var& x);
Var abs(const Var& x);
Var square(const Var& x);

// y = sigmoid((logit(clamp(p)) + noise) / tau), noise = g1 - g0 per element
// (zero tensor for the deterministic relaxation). Clamp bounds are
// [1e-6, 1 - 1e-6]; the gradient is zero where the clamp is active.
Var gumbel_sigmoid(const Var& p, double tau, const Tensor& noise);

Var sum(const Var& x);
Var mean(const Var& x);

Var slice_cols(const Var& x, std::size_t begin, std::size_t count);
Var slice_rows(const Var& x, std::size_t begin, std::size_t count);
Var concat_cols(std::span<const Var> parts);
Var reshape(const Var& x, std::size_t rows, std::size_t cols);

// Rows of table selected by ids (embedding lookup).
Var gather_rows(const Var& table, std::span<const int> ids);

// Cosine similarity of two same-size vectors, returned as a 1x1 var.
// Throws NumericError if either norm is below 1e-12.
Var cosine_similarity(const Var& a, const Var& b);

// Mean over rows of -log softmax(logits)[row, targets[row]].
Var cross_entropy_rows(const Var& logits, std::span<const int> targets);

}  // namespace xattn::ops

namespace xattn {

// Scalar helpers shared by the ops and by test oracles.
double sigmoid(double x);
double gumbel_sigmoid(double p, double tau, double noise);
double cosine_similarity(std::span<const double> a, std::span<const double> b);

constexpr double kProbClampLo = 1e-6;
constexpr double kProbClampHi = 1.0 - 1e-6;

}  // namespace xattn
