#include "xattn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "xattn/errors.hpp"

namespace xattn {

double sigmoid(double x) {
  if (x >= 0) {
    const double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double gumbel_sigmoid(double p, double tau, double noise) {
  if (!(tau > 0)) throw ParameterError("gumbel_sigmoid: tau must be > 0");
  const double q = std::clamp(p, kProbClampLo, kProbClampHi);
  return sigmoid((std::log(q) - std::log1p(-q) + noise) / tau);
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("cosine_similarity: length mismatch");
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  na = std::sqrt(na);
  nb = std::sqrt(nb);
  if (na < 1e-12 || nb < 1e-12) throw NumericError("cosine_similarity: degenerate vector");
  return dot / (na * nb);
}

}  // namespace xattn

namespace xattn::ops {
namespace {

Tape& tape_of(const Var& v) {
  if (!v.valid()) throw ContractError("operation on an unbound Var");
  return *v.tape();
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (!a.value().same_shape(b.value())) {
    throw DimensionError(std::string(op) + ": shape mismatch " + a.value().shape_string() +
                         " vs " + b.value().shape_string());
  }
}

Tensor matmul_raw(const Tensor& a, const Tensor& b) {
  Tensor out(a.rows(), b.cols());
  const std::size_t n = a.cols(), m = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double* orow = &out(i, 0);
    for (std::size_t k = 0; k < n; ++k) {
      const double aik = a(i, k);
      const double* brow = b.row(k).data();
      for (std::size_t j = 0; j < m; ++j) orow[j] += aik * brow[j];
    }
  }
  return out;
}

// a^T * b
Tensor matmul_tn_raw(const Tensor& a, const Tensor& b) {
  Tensor out(a.cols(), b.cols());
  const std::size_t m = b.cols();
  for (std::size_t k = 0; k < a.rows(); ++k) {
    const double* brow = b.row(k).data();
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double aki = a(k, i);
      double* orow = &out(i, 0);
      for (std::size_t j = 0; j < m; ++j) orow[j] += aki * brow[j];
    }
  }
  return out;
}

// a * b^T
Tensor matmul_nt_raw(const Tensor& a, const Tensor& b) {
  Tensor out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.rows(); ++j) {
      double s = 0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(j, k);
      out(i, j) = s;
    }
  }
  return out;
}

template <typename F>
Tensor map(const Tensor& x, F f) {
  Tensor out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  return out;
}

// Shared softmax backward: dx = y * (g - sum(g * y)) per row.
Tensor softmax_backward(const Tensor& y, const Tensor& g) {
  Tensor dx(y.rows(), y.cols());
  for (std::size_t i = 0; i < y.rows(); ++i) {
    double dot = 0;
    for (std::size_t j = 0; j < y.cols(); ++j) dot += g(i, j) * y(i, j);
    for (std::size_t j = 0; j < y.cols(); ++j) dx(i, j) = y(i, j) * (g(i, j) - dot);
  }
  return dx;
}

Tensor softmax_forward(const Tensor& x, std::size_t causal_offset, bool causal) {
  if (!x.all_finite()) throw NumericError("softmax_rows: non-finite input");
  Tensor y(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const std::size_t limit = causal ? std::min(x.cols(), i + causal_offset + 1) : x.cols();
    double mx = x(i, 0);
    for (std::size_t j = 1; j < limit; ++j) mx = std::max(mx, x(i, j));
    double s = 0;
    for (std::size_t j = 0; j < limit; ++j) {
      y(i, j) = std::exp(x(i, j) - mx);
      s += y(i, j);
    }
    for (std::size_t j = 0; j < limit; ++j) y(i, j) /= s;
  }
  return y;
}

}  // namespace

Var tensor_op(const Var& a, const Var& b, BinaryKind kind) {
  switch (kind) {
    case BinaryKind::matmul:
      return matmul(a, b);
    case BinaryKind::add:
      return add(a, b);
    case BinaryKind::hadamard:
      return hadamard(a, b);
  }
  throw ContractError("unknown tensor op kind");
}

Var matmul(const Var& a, const Var& b) {
  Tape& t = tape_of(a);
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: shape mismatch " + a.value().shape_string() + " vs " +
                         b.value().shape_string());
  }
  const std::size_t ia = a.id(), ib = b.id();
  const bool ga = a.requires_grad(), gb = b.requires_grad();
  return t.record(matmul_raw(a.value(), b.value()), {a, b},
                  [&t, ia, ib, ga, gb](const Tensor& g, std::vector<Tensor>& grads) {
                    if (ga) accumulate_grad(grads, ia, matmul_nt_raw(g, t.value_of(ib)));
                    if (gb) accumulate_grad(grads, ib, matmul_tn_raw(t.value_of(ia), g));
                  });
}

Var matmul_nt(const Var& a, const Var& b) {
  Tape& t = tape_of(a);
  if (a.cols() != b.cols()) {
    throw DimensionError("matmul_nt: shape mismatch " + a.value().shape_string() + " vs " +
                         b.value().shape_string());
  }
  const std::size_t ia = a.id(), ib = b.id();
  const bool ga = a.requires_grad(), gb = b.requires_grad();
  return t.record(matmul_nt_raw(a.value(), b.value()), {a, b},
                  [&t, ia, ib, ga, gb](const Tensor& g, std::vector<Tensor>& grads) {
                    if (ga) accumulate_grad(grads, ia, matmul_raw(g, t.value_of(ib)));
                    if (gb) accumulate_grad(grads, ib, matmul_tn_raw(g, t.value_of(ia)));
                  });
}

Var transpose(const Var& a) {
  Tape& t = tape_of(a);
  const Tensor& x = a.value();
  Tensor out(x.cols(), x.rows());
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) out(j, i) = x(i, j);
  const std::size_t ia = a.id();
  return t.record(std::move(out), {a}, [ia](const Tensor& g, std::vector<Tensor>& grads) {
    Tensor d(g.cols(), g.rows());
    for (std::size_t i = 0; i < g.rows(); ++i)
      for (std::size_t j = 0; j < g.cols(); ++j) d(j, i) = g(i, j);
    accumulate_grad(grads, ia, d);
  });
}

Var add(const Var& a, const Var& b) {
  Tape& t = tape_of(a);
  require_same_shape(a, b, "add");
  Tensor out = a.value();
  out += b.value();
  const std::size_t ia = a.id(), ib = b.id();
  const bool ga = a.requires_grad(), gb = b.requires_grad();
  return t.record(std::move(out), {a, b},
                  [ia, ib, ga, gb](const Tensor& g, std::vector<Tensor>& grads) {
                    if (ga) accumulate_grad(grads, ia, g);
                    if (gb) accumulate_grad(grads, ib, g);
                  });
}

Var sub(const Var& a, const Var& b) {
  Tape& t = tape_of(a);
  require_same_shape(a, b, "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  const std::size_t ia = a.id(), ib = b.id();
  const bool ga = a.requires_grad(), gb = b.requires_grad();
  return t.record(std::move(out), {a, b},
                  [ia, ib, ga, gb](const Tensor& g, std::vector<Tensor>& grads) {
                    if (ga) accumulate_grad(grads, ia, g);
                    if (gb) accumulate_grad(grads, ib, map(g, [](double v) { return -v; }));
                  });
}

Var add_row(const Var& a, const Var& row) {
  Tape& t = tape_of(a);
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw DimensionError("add_row: shape mismatch " + a.value().shape_string() + " vs " +
                         row.value().shape_string());
  }
  Tensor out = a.value();
  const Tensor& r = row.value();
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += r(0, j);
  const std::size_t ia = a.id(), ir = row.id();
  const bool ga = a.requires_grad(), gr = row.requires_grad();
  return t.record(std::move(out), {a, row},
                  [ia, ir, ga, gr](const Tensor& g, std::vector<Tensor>& grads) {
                    if (ga) accumulate_grad(grads, ia, g);
                    if (gr) {
                      Tensor d(1, g.cols());
                      for (std::size_t i = 0; i < g.rows(); ++i)
                        for (std::size_t j = 0; j < g.cols(); ++j) d(0, j) += g(i, j);
                      accumulate_grad(grads, ir, d);
                    }
                  });
}

Var hadamard(const Var& a, const Var& b) {
  Tape& t = tape_of(a);
  require_same_shape(a, b, "hadamard");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  const std::size_t ia = a.id(), ib = b.id();
  const bool ga = a.requires_grad(), gb = b.requires_grad();
  return t.record(std::move(out), {a, b},
                  [&t, ia, ib, ga, gb](const Tensor& g, std::vector<Tensor>& grads) {
                    const Tensor& av = t.value_of(ia);
                    const Tensor& bv = t.value_of(ib);
                    if (ga) {
                      Tensor d = g;
                      for (std::size_t i = 0; i < d.size(); ++i) d[i] *= bv[i];
                      accumulate_grad(grads, ia, d);
                    }
                    if (gb) {
                      Tensor d = g;
                      for (std::size_t i = 0; i < d.size(); ++i) d[i] *= av[i];
                      accumulate_grad(grads, ib, d);
                    }
                  });
}

Var scale(const Var& a, double c) {
  Tape& t = tape_of(a);
  const std::size_t ia = a.id();
  return t.record(map(a.value(), [c](double v) { return v * c; }), {a},
                  [ia, c](const Tensor& g, std::vector<Tensor>& grads) {
                    accumulate_grad(grads, ia, map(g, [c](double v) { return v * c; }));
                  });
}

Var add_scalar(const Var& a, double c) {
  Tape& t = tape_of(a);
  const std::size_t ia = a.id();
  return t.record(map(a.value(), [c](double v) { return v + c; }), {a},
                  [ia](const Tensor& g, std::vector<Tensor>& grads) {
                    accumulate_grad(grads, ia, g);
                  });
}

Var one_minus(const Var& a) {
  Tape& t = tape_of(a);
  const std::size_t ia = a.id();
  return t.record(map(a.value(), [](double v) { return 1.0 - v; }), {a},
                  [ia](const Tensor& g, std::vector<Tensor>& grads) {
                    accumulate_grad(grads, ia, map(g, [](double v) { return -v; }));
                  });
}

Var scale_columns(const Var& a, const Var& factors) {
  Tape& t = tape_of(a);
  if (factors.rows() != 1 || factors.cols() != a.cols()) {
    throw DimensionError("scale_columns: shape mismatch " + a.value().shape_string() + " vs " +
                         factors.value().shape_string());
  }
  Tensor out = a.value();
  const Tensor& f = factors.value();
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) *= f(0, j);
  const std::size_t ia = a.id(), iff = factors.id();
  const bool ga = a.requires_grad(), gf = factors.requires_grad();
  return t.record(std::move(out), {a, factors},
                  [&t, ia, iff, ga, gf](const Tensor& g, std::vector<Tensor>& grads) {
                    const Tensor& av = t.value_of(ia);
                    const Tensor& fv = t.value_of(iff);
                    if (ga) {
                      Tensor d = g;
                      for (std::size_t i = 0; i < d.rows(); ++i)
                        for (std::size_t j = 0; j < d.cols(); ++j) d(i, j) *= fv(0, j);
                      accumulate_grad(grads, ia, d);
                    }
                    if (gf) {
                      Tensor d(1, g.cols());
                      for (std::size_t i = 0; i < g.rows(); ++i)
                        for (std::size_t j = 0; j < g.cols(); ++j) d(0, j) += g(i, j) * av(i, j);
                      accumulate_grad(grads, iff, d);
                    }
                  });
}

Var softmax_rows(const Var& x) {
  Tape& t = tape_of(x);
  const std::size_t ix = x.id();
  Tensor y = softmax_forward(x.value(), 0, false);
  const std::size_t self = t.size();
  return t.record(std::move(y), {x}, [&t, ix, self](const Tensor& g, std::vector<Tensor>& grads) {
    accumulate_grad(grads, ix, softmax_backward(t.value_of(self), g));
  });
}

Var causal_softmax_rows(const Var& x) {
  Tape& t = tape_of(x);
  const std::size_t ix = x.id();
  const std::size_t offset = x.cols() >= x.rows() ? x.cols() - x.rows() : 0;
  Tensor y = softmax_forward(x.value(), offset, true);
  const std::size_t self = t.size();
  return t.record(std::move(y), {x}, [&t, ix, self](const Tensor& g, std::vector<Tensor>& grads) {
    accumulate_grad(grads, ix, softmax_backward(t.value_of(self), g));
  });
}

Var layer_norm_rows(const Var& x, const Var& gain, const Var& bias, double eps) {
  Tape& t = tape_of(x);
  const Tensor& xv = x.value();
  const std::size_t n = xv.cols();
  if (gain.rows() != 1 || gain.cols() != n || bias.rows() != 1 || bias.cols() != n) {
    throw DimensionError("layer_norm_rows: gain/bias must be 1x" + std::to_string(n));
  }
  Tensor xhat(xv.rows(), n);
  std::vector<double> inv_std(xv.rows());
  for (std::size_t i = 0; i < xv.rows(); ++i) {
    double mu = 0;
    for (std::size_t j = 0; j < n; ++j) mu += xv(i, j);
    mu /= static_cast<double>(n);
    double var = 0;
    for (std::size_t j = 0; j < n; ++j) var += (xv(i, j) - mu) * (xv(i, j) - mu);
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) xhat(i, j) = (xv(i, j) - mu) * inv_std[i];
  }
  Tensor out(xv.rows(), n);
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();
  for (std::size_t i = 0; i < xv.rows(); ++i)
    for (std::size_t j = 0; j < n; ++j) out(i, j) = xhat(i, j) * gv(0, j) + bv(0, j);

  const std::size_t ix = x.id(), ig = gain.id(), ib = bias.id();
  const bool gx = x.requires_grad(), gg = gain.requires_grad(), gb = bias.requires_grad();
  return t.record(
      std::move(out), {x, gain, bias},
      [&t, ix, ig, ib, gx, gg, gb, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          const Tensor& g, std::vector<Tensor>& grads) {
        const std::size_t rows = g.rows(), cols = g.cols();
        const Tensor& gv = t.value_of(ig);
        if (gg || gb) {
          Tensor dg(1, cols), db(1, cols);
          for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < cols; ++j) {
              dg(0, j) += g(i, j) * xhat(i, j);
              db(0, j) += g(i, j);
            }
          if (gg) accumulate_grad(grads, ig, dg);
          if (gb) accumulate_grad(grads, ib, db);
        }
        if (gx) {
          Tensor dx(rows, cols);
          const double inv_n = 1.0 / static_cast<double>(cols);
          for (std::size_t i = 0; i < rows; ++i) {
            double s1 = 0, s2 = 0;
            for (std::size_t j = 0; j < cols; ++j) {
              const double dxh = g(i, j) * gv(0, j);
              s1 += dxh;
              s2 += dxh * xhat(i, j);
            }
            for (std::size_t j = 0; j < cols; ++j) {
              const double dxh = g(i, j) * gv(0, j);
              dx(i, j) = inv_std[i] * (dxh - inv_n * s1 - xhat(i, j) * inv_n * s2);
            }
          }
          accumulate_grad(grads, ix, dx);
        }
      });
}

Var gelu(const Var& x) {
  // tanh approximation
  constexpr double k = 0.7978845608028654;  // sqrt(2 / pi)
  constexpr double c = 0.044715;
  Tape& t = tape_of(x);
  const std::size_t ix = x.id();
  Tensor y = map(x.value(), [](double v) {
    return 0.5 * v * (1.0 + std::tanh(k * (v + c * v * v * v)));
  });
  return t.record(std::move(y), {x}, [&t, ix](const Tensor& g, std::vector<Tensor>& grads) {
    const Tensor& xv = t.value_of(ix);
    Tensor d(g.rows(), g.cols());
    for (std::size_t i = 0; i < d.size(); ++i) {
      const double v = xv[i];
      const double u = k * (v + c * v * v * v);
      const double th = std::tanh(u);
      const double du = k * (1.0 + 3.0 * c * v * v);
      d[i] = g[i] * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du);
    }
    accumulate_grad(grads, ix, d);
  });
}

Var prelu(const Var& x, const Var& slope) {
  Tape& t = tape_of(x);
  if (slope.rows() != 1 || slope.cols() != x.cols()) {
    throw DimensionError("prelu: slope must be 1x" + std::to_string(x.cols()) + ", got " +
                         slope.value().shape_string());
  }
  Tensor y = x.value();
  const Tensor& a = slope.value();
  for (std::size_t i = 0; i < y.rows(); ++i)
    for (std::size_t j = 0; j < y.cols(); ++j)
      if (y(i, j) < 0) y(i, j) *= a(0, j);
  const std::size_t ix = x.id(), ia = slope.id();
  const bool gx = x.requires_grad(), ga = slope.requires_grad();
  return t.record(std::move(y), {x, slope},
                  [&t, ix, ia, gx, ga](const Tensor& g, std::vector<Tensor>& grads) {
                    const Tensor& xv = t.value_of(ix);
                    const Tensor& av = t.value_of(ia);
                    Tensor dx(g.rows(), g.cols());
                    Tensor da(1, g.cols());
                    for (std::size_t i = 0; i < g.rows(); ++i)
                      for (std::size_t j = 0; j < g.cols(); ++j) {
                        if (xv(i, j) < 0) {
                          dx(i, j) = g(i, j) * av(0, j);
                          da(0, j) += g(i, j) * xv(i, j);
                        } else {
                          dx(i, j) = g(i, j);
                        }
                      }
                    if (gx) accumulate_grad(grads, ix, dx);
                    if (ga) accumulate_grad(grads, ia, da);
                  });
}

Var sigmoid(const Var& x) {
  Tape& t = tape_of(x);
  const std::size_t ix = x.id();
  Tensor y = map(x.value(), [](double v) { return xattn::sigmoid(v); });
  const std::size_t self = t.size();
  return t.record(std::move(y), {x}, [&t, ix, self](const Tensor& g, std::vector<Tensor>& grads) {
    const Tensor& yv = t.value_of(self);
    Tensor d(g.rows(), g.cols());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = g[i] * yv[i] * (1.0 - yv[i]);
    accumulate_grad(grads, ix, d);
  });
}

Var abs(const Var& x) {
  Tape& t = tape_of(x);
  const std::size_t ix = x.id();
  return t.record(map(x.value(), [](double v) { return std::abs(v); }), {x},
                  [&t, ix](const Tensor& g, std::vector<Tensor>& grads) {
                    const Tensor& xv = t.value_of(ix);
                    Tensor d(g.rows(), g.cols());
                    for (std::size_t i = 0; i < d.size(); ++i)
                      d[i] = xv[i] > 0 ? g[i] : (xv[i] < 0 ? -g[i] : 0.0);
                    accumulate_grad(grads, ix, d);
                  });
}

Var square(const Var& x) {
  Tape& t = tape_of(x);
  const std::size_t ix = x.id();
  return t.record(map(x.value(), [](double v) { return v * v; }), {x},
                  [&t, ix](const Tensor& g, std::vector<Tensor>& grads) {
                    const Tensor& xv = t.value_of(ix);
                    Tensor d(g.rows(), g.cols());
                    for (std::size_t i = 0; i < d.size(); ++i) d[i] = 2.0 * xv[i] * g[i];
                    accumulate_grad(grads, ix, d);
                  });
}

Var gumbel_sigmoid(const Var& p, double tau, const Tensor& noise) {
  if (!(tau > 0)) throw ParameterError("gumbel_sigmoid: tau must be > 0");
  Tape& t = tape_of(p);
  const Tensor& pv = p.value();
  if (!noise.same_shape(pv)) {
    throw DimensionError("gumbel_sigmoid: noise shape " + noise.shape_string() +
                         " does not match " + pv.shape_string());
  }
  Tensor y(pv.rows(), pv.cols());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xattn::gumbel_sigmoid(pv[i], tau, noise[i]);
  const std::size_t ip = p.id();
  const std::size_t self = t.size();
  return t.record(std::move(y), {p},
                  [&t, ip, self, tau](const Tensor& g, std::vector<Tensor>& grads) {
                    const Tensor& pv = t.value_of(ip);
                    const Tensor& yv = t.value_of(self);
                    Tensor d(g.rows(), g.cols());
                    for (std::size_t i = 0; i < d.size(); ++i) {
                      const double q = pv[i];
                      if (q < kProbClampLo || q > kProbClampHi) continue;
                      d[i] = g[i] * yv[i] * (1.0 - yv[i]) / (tau * q * (1.0 - q));
                    }
                    accumulate_grad(grads, ip, d);
                  });
}

Var sum(const Var& x) {
  Tape& t = tape_of(x);
  double s = 0;
  for (double v : x.value().data()) s += v;
  const std::size_t ix = x.id();
  const std::size_t r = x.rows(), c = x.cols();
  return t.record(Tensor(1, 1, s), {x}, [ix, r, c](const Tensor& g, std::vector<Tensor>& grads) {
    accumulate_grad(grads, ix, Tensor(r, c, g[0]));
  });
}

Var mean(const Var& x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

Var slice_cols(const Var& x, std::size_t begin, std::size_t count) {
  Tape& t = tape_of(x);
  const Tensor& xv = x.value();
  if (count == 0 || begin + count > xv.cols()) {
    throw DimensionError("slice_cols: range out of bounds for " + xv.shape_string());
  }
  Tensor out(xv.rows(), count);
  for (std::size_t i = 0; i < xv.rows(); ++i)
    for (std::size_t j = 0; j < count; ++j) out(i, j) = xv(i, begin + j);
  const std::size_t ix = x.id(), r = xv.rows(), c = xv.cols();
  return t.record(std::move(out), {x},
                  [ix, r, c, begin, count](const Tensor& g, std::vector<Tensor>& grads) {
                    Tensor d(r, c);
                    for (std::size_t i = 0; i < r; ++i)
                      for (std::size_t j = 0; j < count; ++j) d(i, begin + j) = g(i, j);
                    accumulate_grad(grads, ix, d);
                  });
}

Var slice_rows(const Var& x, std::size_t begin, std::size_t count) {
  Tape& t = tape_of(x);
  const Tensor& xv = x.value();
  if (count == 0 || begin + count > xv.rows()) {
    throw DimensionError("slice_rows: range out of bounds for " + xv.shape_string());
  }
  Tensor out(count, xv.cols());
  for (std::size_t i = 0; i < count; ++i)
    for (std::size_t j = 0; j < xv.cols(); ++j) out(i, j) = xv(begin + i, j);
  const std::size_t ix = x.id(), r = xv.rows(), c = xv.cols();
  return t.record(std::move(out), {x},
                  [ix, r, c, begin, count](const Tensor& g, std::vector<Tensor>& grads) {
                    Tensor d(r, c);
                    for (std::size_t i = 0; i < count; ++i)
                      for (std::size_t j = 0; j < c; ++j) d(begin + i, j) = g(i, j);
                    accumulate_grad(grads, ix, d);
                  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no parts");
  if (parts.size() == 1) return parts[0];
  Tape& t = tape_of(parts[0]);
  const std::size_t rows = parts[0].rows();
  std::size_t cols = 0;
  for (const Var& p : parts) {
    if (p.rows() != rows) throw DimensionError("concat_cols: row count mismatch");
    cols += p.cols();
  }
  Tensor out(rows, cols);
  std::vector<std::pair<std::size_t, std::size_t>> layout;  // (id, width)
  std::vector<bool> needs;
  std::size_t off = 0;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < v.cols(); ++j) out(i, off + j) = v(i, j);
    layout.emplace_back(p.id(), v.cols());
    needs.push_back(p.requires_grad());
    off += v.cols();
  }
  return t.record(std::move(out), parts,
                  [layout, needs, rows](const Tensor& g, std::vector<Tensor>& grads) {
                    std::size_t off = 0;
                    for (std::size_t k = 0; k < layout.size(); ++k) {
                      const auto [id, width] = layout[k];
                      if (needs[k]) {
                        Tensor d(rows, width);
                        for (std::size_t i = 0; i < rows; ++i)
                          for (std::size_t j = 0; j < width; ++j) d(i, j) = g(i, off + j);
                        accumulate_grad(grads, id, d);
                      }
                      off += width;
                    }
                  });
}

Var reshape(const Var& x, std::size_t rows, std::size_t cols) {
  Tape& t = tape_of(x);
  const Tensor& xv = x.value();
  if (rows * cols != xv.size()) {
    throw DimensionError("reshape: cannot view " + xv.shape_string() + " as " +
                         std::to_string(rows) + "x" + std::to_string(cols));
  }
  std::vector<double> data(xv.data().begin(), xv.data().end());
  const std::size_t ix = x.id(), r = xv.rows(), c = xv.cols();
  return t.record(Tensor(rows, cols, std::move(data)), {x},
                  [ix, r, c](const Tensor& g, std::vector<Tensor>& grads) {
                    accumulate_grad(grads, ix,
                                    Tensor(r, c, std::vector<double>(g.data().begin(),
                                                                     g.data().end())));
                  });
}

Var gather_rows(const Var& table, std::span<const int> ids) {
  Tape& t = tape_of(table);
  const Tensor& tv = table.value();
  if (ids.empty()) throw DimensionError("gather_rows: empty id list");
  Tensor out(ids.size(), tv.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= tv.rows()) {
      throw DimensionError("gather_rows: id " + std::to_string(ids[i]) + " outside table " +
                           tv.shape_string());
    }
    for (std::size_t j = 0; j < tv.cols(); ++j) out(i, j) = tv(ids[i], j);
  }
  std::vector<int> idv(ids.begin(), ids.end());
  const std::size_t it = table.id(), r = tv.rows(), c = tv.cols();
  return t.record(std::move(out), {table},
                  [it, r, c, idv = std::move(idv)](const Tensor& g, std::vector<Tensor>& grads) {
                    Tensor d(r, c);
                    for (std::size_t i = 0; i < idv.size(); ++i)
                      for (std::size_t j = 0; j < c; ++j) d(idv[i], j) += g(i, j);
                    accumulate_grad(grads, it, d);
                  });
}

Var cosine_similarity(const Var& a, const Var& b) {
  Tape& t = tape_of(a);
  if (a.value().size() != b.value().size()) {
    throw DimensionError("cosine_similarity: shape mismatch " + a.value().shape_string() +
                         " vs " + b.value().shape_string());
  }
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    dot += av[i] * bv[i];
    na += av[i] * av[i];
    nb += bv[i] * bv[i];
  }
  na = std::sqrt(na);
  nb = std::sqrt(nb);
  if (na < 1e-12 || nb < 1e-12) throw NumericError("cosine_similarity: degenerate vector");
  const double c = dot / (na * nb);
  const std::size_t ia = a.id(), ib = b.id();
  const bool ga = a.requires_grad(), gb = b.requires_grad();
  return t.record(Tensor(1, 1, c), {a, b},
                  [&t, ia, ib, ga, gb, na, nb, c](const Tensor& g, std::vector<Tensor>& grads) {
                    const Tensor& av = t.value_of(ia);
                    const Tensor& bv = t.value_of(ib);
                    // d cos / d a = b / (|a||b|) - cos * a / |a|^2
                    if (ga) {
                      Tensor d(av.rows(), av.cols());
                      for (std::size_t i = 0; i < d.size(); ++i)
                        d[i] = g[0] * (bv[i] / (na * nb) - c * av[i] / (na * na));
                      accumulate_grad(grads, ia, d);
                    }
                    if (gb) {
                      Tensor d(bv.rows(), bv.cols());
                      for (std::size_t i = 0; i < d.size(); ++i)
                        d[i] = g[0] * (av[i] / (na * nb) - c * bv[i] / (nb * nb));
                      accumulate_grad(grads, ib, d);
                    }
                  });
}

Var cross_entropy_rows(const Var& logits, std::span<const int> targets) {
  Tape& t = tape_of(logits);
  const Tensor& x = logits.value();
  if (targets.size() != x.rows()) {
    throw DimensionError("cross_entropy_rows: " + std::to_string(targets.size()) +
                         " targets for logits " + x.shape_string());
  }
  Tensor probs = softmax_forward(x, 0, false);
  double loss = 0;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const int y = targets[i];
    if (y < 0 || static_cast<std::size_t>(y) >= x.cols()) {
      throw DimensionError("cross_entropy_rows: target " + std::to_string(y) + " out of range");
    }
    double mx = x(i, 0);
    for (std::size_t j = 1; j < x.cols(); ++j) mx = std::max(mx, x(i, j));
    double s = 0;
    for (std::size_t j = 0; j < x.cols(); ++j) s += std::exp(x(i, j) - mx);
    loss += -(x(i, y) - mx - std::log(s));
  }
  const double inv_rows = 1.0 / static_cast<double>(x.rows());
  std::vector<int> tv(targets.begin(), targets.end());
  const std::size_t il = logits.id();
  return t.record(Tensor(1, 1, loss * inv_rows), {logits},
                  [il, probs = std::move(probs), tv = std::move(tv), inv_rows](
                      const Tensor& g, std::vector<Tensor>& grads) {
                    Tensor d = probs;
                    for (std::size_t i = 0; i < d.rows(); ++i) d(i, tv[i]) -= 1.0;
                    for (std::size_t i = 0; i < d.size(); ++i) d[i] *= g[0] * inv_rows;
                    accumulate_grad(grads, il, d);
                  });
}

}  // namespace xattn::ops
