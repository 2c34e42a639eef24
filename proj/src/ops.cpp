#include "conslide/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

#include "conslide/errors.hpp"
#include "conslide/kernels.hpp"
#include "conslide/logging.hpp"

namespace conslide::ops {
namespace {

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw DimensionError(std::string(op) + ": incompatible shapes " + shape_string(a) + " and " +
                       shape_string(b));
}

void require_same_tape(Var a, Var b, const char* op) {
  if (&a.tape() != &b.tape()) throw StateError(std::string(op) + ": operands on different tapes");
}

void add_into(std::vector<double>& dst, std::span<const double> src, double s = 1.0) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += s * src[i];
}

struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_axis(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

Var elementwise(const char* op, Var a, Var b, int kind) {
  require_same_tape(a, b, op);
  if (a.shape() != b.shape()) shape_error(op, a.shape(), b.shape());
  const auto& av = a.value();
  const auto& bv = b.value();
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) {
    switch (kind) {
      case 0: out[i] = av[i] + bv[i]; break;
      case 1: out[i] = av[i] - bv[i]; break;
      default: out[i] = av[i] * bv[i]; break;
    }
  }
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(op, std::move(out), {ia, ib}, [ia, ib, kind](Tape& t, std::size_t self) {
    const auto& g = t.node(self).grad;
    if (t.needs_grad(ia)) {
      auto& ga = t.grad_buffer(ia);
      if (kind == 2) {
        const auto& bv = t.value_of(ib).data;
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
      } else {
        add_into(ga, g);
      }
    }
    if (t.needs_grad(ib)) {
      auto& gb = t.grad_buffer(ib);
      if (kind == 2) {
        const auto& av = t.value_of(ia).data;
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
      } else {
        add_into(gb, g, kind == 1 ? -1.0 : 1.0);
      }
    }
  });
}

}  // namespace

Var matmul(Var a, Var b) {
  require_same_tape(a, b, "matmul");
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() < 2 || sa.size() != sb.size()) shape_error("matmul", sa, sb);
  const std::size_t rank = sa.size();
  for (std::size_t i = 0; i + 2 < rank; ++i)
    if (sa[i] != sb[i]) shape_error("matmul", sa, sb);
  const std::size_t p = sa[rank - 2], q = sa[rank - 1], r = sb[rank - 1];
  if (sb[rank - 2] != q) shape_error("matmul", sa, sb);
  std::size_t batch = 1;
  for (std::size_t i = 0; i + 2 < rank; ++i) batch *= sa[i];

  Shape so = sa;
  so[rank - 1] = r;
  Tensor out(so);
  const auto av = a.value();
  const auto bv = b.value();
  for (std::size_t k = 0; k < batch; ++k) {
    kernels::omp::gemm_nn(p, q, r, av.subspan(k * p * q, p * q), bv.subspan(k * q * r, q * r),
                          std::span<double>(out.data).subspan(k * p * r, p * r));
  }
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(
      "matmul", std::move(out), {ia, ib}, [ia, ib, batch, p, q, r](Tape& t, std::size_t self) {
        const std::span<const double> g = t.node(self).grad;
        std::vector<double> tmp;
        if (t.needs_grad(ia)) {
          const std::span<const double> bv = t.value_of(ib).data;
          auto& ga = t.grad_buffer(ia);
          tmp.assign(p * q, 0.0);
          for (std::size_t k = 0; k < batch; ++k) {
            kernels::omp::gemm_nt(p, r, q, g.subspan(k * p * r, p * r),
                                  bv.subspan(k * q * r, q * r), tmp);
            for (std::size_t i = 0; i < p * q; ++i) ga[k * p * q + i] += tmp[i];
          }
        }
        if (t.needs_grad(ib)) {
          const std::span<const double> av = t.value_of(ia).data;
          auto& gb = t.grad_buffer(ib);
          tmp.assign(q * r, 0.0);
          for (std::size_t k = 0; k < batch; ++k) {
            kernels::omp::gemm_tn(p, q, r, av.subspan(k * p * q, p * q),
                                  g.subspan(k * p * r, p * r), tmp);
            for (std::size_t i = 0; i < q * r; ++i) gb[k * q * r + i] += tmp[i];
          }
        }
      });
}

Var add(Var a, Var b) { return elementwise("add", a, b, 0); }
Var sub(Var a, Var b) { return elementwise("sub", a, b, 1); }
Var mul(Var a, Var b) { return elementwise("mul", a, b, 2); }

Var scale(Var a, double factor) {
  Tensor out = a.tensor();
  for (auto& v : out.data) v *= factor;
  const std::size_t ia = a.id();
  return a.tape().record("scale", std::move(out), {ia}, [ia, factor](Tape& t, std::size_t self) {
    add_into(t.grad_buffer(ia), t.node(self).grad, factor);
  });
}

Var add_bias(Var x, Var bias) {
  require_same_tape(x, bias, "add_bias");
  const Shape& sx = x.shape();
  if (sx.empty() || bias.shape().size() != 1 || bias.dim(0) != sx.back())
    shape_error("add_bias", sx, bias.shape());
  const std::size_t c = sx.back();
  Tensor out = x.tensor();
  const auto bv = bias.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += bv[i % c];
  const std::size_t ix = x.id(), ib = bias.id();
  return x.tape().record("add_bias", std::move(out), {ix, ib}, [ix, ib, c](Tape& t, std::size_t self) {
    const auto& g = t.node(self).grad;
    if (t.needs_grad(ix)) add_into(t.grad_buffer(ix), g);
    if (t.needs_grad(ib)) {
      auto& gb = t.grad_buffer(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % c] += g[i];
    }
  });
}

Var expand_rows(Var r, std::size_t n) {
  const Shape& sr = r.shape();
  if (sr.size() != 2 || n == 0) shape_error("expand_rows", sr, Shape{n});
  const std::size_t m = sr[0], c = sr[1];
  Tensor out({m, n, c});
  const auto rv = r.value();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      std::copy_n(rv.begin() + i * c, c, out.data.begin() + (i * n + j) * c);
  const std::size_t ir = r.id();
  return r.tape().record("expand_rows", std::move(out), {ir}, [ir, m, n, c](Tape& t, std::size_t self) {
    const auto& g = t.node(self).grad;
    auto& gr = t.grad_buffer(ir);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t k = 0; k < c; ++k) gr[i * c + k] += g[(i * n + j) * c + k];
  });
}

Var relu(Var x) {
  Tensor out = x.tensor();
  std::vector<std::uint32_t> active(out.numel());
  for (std::size_t i = 0; i < out.numel(); ++i) {
    active[i] = out.data[i] > 0.0;
    if (!active[i]) out.data[i] = 0.0;
  }
  const std::size_t ix = x.id();
  Var y = x.tape().record("relu", std::move(out), {ix}, [ix](Tape& t, std::size_t self) {
    const auto& g = t.node(self).grad;
    const auto& xv = t.value_of(ix).data;
    auto& gx = t.grad_buffer(ix);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xv[i] > 0.0) gx[i] += g[i];
  });
  x.tape().set_branch(y.id(), std::move(active));
  return y;
}

Var softmax_rows(Var x) {
  const Shape& s = x.shape();
  if (s.empty() || s.back() == 0) throw DimensionError("softmax_rows: empty last axis");
  const std::size_t cols = s.back();
  const std::size_t rows = x.numel() / cols;
  Tensor out(s);
  kernels::omp::softmax_rows(rows, cols, x.value(), out.data);
  const std::size_t ix = x.id();
  return x.tape().record("softmax_rows", std::move(out), {ix}, [ix, rows, cols](Tape& t, std::size_t self) {
    const auto& g = t.node(self).grad;
    const auto& yv = t.value_of(self).data;
    auto& gx = t.grad_buffer(ix);
    for (std::size_t i = 0; i < rows; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < cols; ++j) dot += g[i * cols + j] * yv[i * cols + j];
      for (std::size_t j = 0; j < cols; ++j) gx[i * cols + j] += yv[i * cols + j] * (g[i * cols + j] - dot);
    }
  });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  require_same_tape(x, gamma, "layer_norm");
  require_same_tape(x, beta, "layer_norm");
  if (!(eps > 0.0)) throw ConfigError("layer_norm: eps must be positive");
  const Shape& s = x.shape();
  if (s.empty()) throw DimensionError("layer_norm: scalar input");
  const std::size_t c = s.back();
  if (gamma.shape() != Shape{c}) shape_error("layer_norm", s, gamma.shape());
  if (beta.shape() != Shape{c}) shape_error("layer_norm", s, beta.shape());
  const std::size_t rows = x.numel() / c;
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  kernels::omp::layer_norm_rows(rows, c, eps, x.value(), *xhat, *inv_std);
  Tensor out(s);
  const auto gv = gamma.value();
  const auto bv = beta.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = (*xhat)[i] * gv[i % c] + bv[i % c];
  const std::size_t ix = x.id(), ig = gamma.id(), ib = beta.id();
  return x.tape().record(
      "layer_norm", std::move(out), {ix, ig, ib},
      [ix, ig, ib, rows, c, xhat, inv_std](Tape& t, std::size_t self) {
        const auto& g = t.node(self).grad;
        const auto& gv = t.value_of(ig).data;
        if (t.needs_grad(ig)) {
          auto& gg = t.grad_buffer(ig);
          for (std::size_t i = 0; i < g.size(); ++i) gg[i % c] += g[i] * (*xhat)[i];
        }
        if (t.needs_grad(ib)) {
          auto& gb = t.grad_buffer(ib);
          for (std::size_t i = 0; i < g.size(); ++i) gb[i % c] += g[i];
        }
        if (t.needs_grad(ix)) {
          auto& gx = t.grad_buffer(ix);
          const double inv_c = 1.0 / static_cast<double>(c);
          for (std::size_t r = 0; r < rows; ++r) {
            double mean_d = 0.0, mean_dx = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
              const double d = g[r * c + j] * gv[j];
              mean_d += d;
              mean_dx += d * (*xhat)[r * c + j];
            }
            mean_d *= inv_c;
            mean_dx *= inv_c;
            for (std::size_t j = 0; j < c; ++j) {
              const double d = g[r * c + j] * gv[j];
              gx[r * c + j] += (*inv_std)[r] * (d - mean_d - (*xhat)[r * c + j] * mean_dx);
            }
          }
        }
      });
}

Var transpose(Var x) {
  const Shape& s = x.shape();
  if (s.size() < 2) throw DimensionError("transpose: rank < 2, shape " + shape_string(s));
  const std::size_t rank = s.size();
  const std::size_t p = s[rank - 2], q = s[rank - 1];
  const std::size_t batch = x.numel() / (p * q);
  Shape so = s;
  std::swap(so[rank - 2], so[rank - 1]);
  Tensor out(so);
  const auto xv = x.value();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < p; ++i)
      for (std::size_t j = 0; j < q; ++j) out[b * p * q + j * p + i] = xv[b * p * q + i * q + j];
  const std::size_t ix = x.id();
  return x.tape().record("transpose", std::move(out), {ix}, [ix, batch, p, q](Tape& t, std::size_t self) {
    const auto& g = t.node(self).grad;
    auto& gx = t.grad_buffer(ix);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < p; ++i)
        for (std::size_t j = 0; j < q; ++j) gx[b * p * q + i * q + j] += g[b * p * q + j * p + i];
  });
}

Var reshape(Var x, Shape shape) {
  if (numel(shape) != x.numel()) shape_error("reshape", x.shape(), shape);
  Tensor out(std::move(shape), std::vector<double>(x.value().begin(), x.value().end()));
  const std::size_t ix = x.id();
  return x.tape().record("reshape", std::move(out), {ix}, [ix](Tape& t, std::size_t self) {
    add_into(t.grad_buffer(ix), t.node(self).grad);
  });
}

Var split_heads(Var x, std::size_t heads) {
  const Shape& s = x.shape();
  if (s.size() != 3 || heads == 0 || s[2] % heads != 0) shape_error("split_heads", s, Shape{heads});
  const std::size_t b = s[0], seq = s[1], c = s[2], d = c / heads;
  Tensor out({b * heads, seq, d});
  const auto xv = x.value();
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t si = 0; si < seq; ++si)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < d; ++i)
          out[((bi * heads + h) * seq + si) * d + i] = xv[(bi * seq + si) * c + h * d + i];
  const std::size_t ix = x.id();
  return x.tape().record("split_heads", std::move(out), {ix},
                         [ix, b, seq, c, d, heads](Tape& t, std::size_t self) {
                           const auto& g = t.node(self).grad;
                           auto& gx = t.grad_buffer(ix);
                           for (std::size_t bi = 0; bi < b; ++bi)
                             for (std::size_t si = 0; si < seq; ++si)
                               for (std::size_t h = 0; h < heads; ++h)
                                 for (std::size_t i = 0; i < d; ++i)
                                   gx[(bi * seq + si) * c + h * d + i] +=
                                       g[((bi * heads + h) * seq + si) * d + i];
                         });
}

Var merge_heads(Var x, std::size_t heads) {
  const Shape& s = x.shape();
  if (s.size() != 3 || heads == 0 || s[0] % heads != 0) shape_error("merge_heads", s, Shape{heads});
  const std::size_t b = s[0] / heads, seq = s[1], d = s[2], c = d * heads;
  Tensor out({b, seq, c});
  const auto xv = x.value();
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t si = 0; si < seq; ++si)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < d; ++i)
          out[(bi * seq + si) * c + h * d + i] = xv[((bi * heads + h) * seq + si) * d + i];
  const std::size_t ix = x.id();
  return x.tape().record("merge_heads", std::move(out), {ix},
                         [ix, b, seq, c, d, heads](Tape& t, std::size_t self) {
                           const auto& g = t.node(self).grad;
                           auto& gx = t.grad_buffer(ix);
                           for (std::size_t bi = 0; bi < b; ++bi)
                             for (std::size_t si = 0; si < seq; ++si)
                               for (std::size_t h = 0; h < heads; ++h)
                                 for (std::size_t i = 0; i < d; ++i)
                                   gx[((bi * heads + h) * seq + si) * d + i] +=
                                       g[(bi * seq + si) * c + h * d + i];
                         });
}

Var concat_rows(Var a, Var b) {
  require_same_tape(a, b, "concat_rows");
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.empty() || sa.size() != sb.size() || !std::equal(sa.begin() + 1, sa.end(), sb.begin() + 1))
    shape_error("concat_rows", sa, sb);
  Shape so = sa;
  so[0] += sb[0];
  std::vector<double> data(a.value().begin(), a.value().end());
  data.insert(data.end(), b.value().begin(), b.value().end());
  const std::size_t na = a.numel();
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record("concat_rows", Tensor(std::move(so), std::move(data)), {ia, ib},
                         [ia, ib, na](Tape& t, std::size_t self) {
                           const std::span<const double> g = t.node(self).grad;
                           if (t.needs_grad(ia)) add_into(t.grad_buffer(ia), g.first(na));
                           if (t.needs_grad(ib)) add_into(t.grad_buffer(ib), g.subspan(na));
                         });
}

Var slice_rows(Var x, std::size_t begin, std::size_t end) {
  const Shape& s = x.shape();
  if (s.empty() || begin >= end || end > s[0])
    throw DimensionError("slice_rows: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") out of shape " + shape_string(s));
  const std::size_t row = x.numel() / s[0];
  Shape so = s;
  so[0] = end - begin;
  const auto xv = x.value();
  std::vector<double> data(xv.begin() + begin * row, xv.begin() + end * row);
  const std::size_t ix = x.id();
  const std::size_t offset = begin * row;
  return x.tape().record("slice_rows", Tensor(std::move(so), std::move(data)), {ix},
                         [ix, offset](Tape& t, std::size_t self) {
                           const auto& g = t.node(self).grad;
                           auto& gx = t.grad_buffer(ix);
                           for (std::size_t i = 0; i < g.size(); ++i) gx[offset + i] += g[i];
                         });
}

Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value()) s += v;
  const std::size_t ix = x.id();
  return x.tape().record("sum", Tensor::scalar(s), {ix}, [ix](Tape& t, std::size_t self) {
    const double g = t.node(self).grad[0];
    for (auto& v : t.grad_buffer(ix)) v += g;
  });
}

Var mean_axis(Var x, std::size_t axis) {
  const Shape& s = x.shape();
  if (axis >= s.size() || s[axis] == 0)
    throw DimensionError("mean_axis: axis " + std::to_string(axis) + " invalid for " + shape_string(s));
  const AxisSplit sp = split_axis(s, axis);
  Shape so = s;
  so.erase(so.begin() + static_cast<std::ptrdiff_t>(axis));
  if (so.empty()) so = {1};
  Tensor out(so);
  const auto xv = x.value();
  const double inv = 1.0 / static_cast<double>(sp.len);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      double acc = 0.0;
      for (std::size_t k = 0; k < sp.len; ++k) acc += xv[(o * sp.len + k) * sp.inner + i];
      out[o * sp.inner + i] = acc * inv;
    }
  const std::size_t ix = x.id();
  return x.tape().record("mean_axis", std::move(out), {ix}, [ix, sp, inv](Tape& t, std::size_t self) {
    const auto& g = t.node(self).grad;
    auto& gx = t.grad_buffer(ix);
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t k = 0; k < sp.len; ++k)
        for (std::size_t i = 0; i < sp.inner; ++i)
          gx[(o * sp.len + k) * sp.inner + i] += g[o * sp.inner + i] * inv;
  });
}

Var max_axis(Var x, std::size_t axis) {
  const Shape& s = x.shape();
  if (axis >= s.size() || s[axis] == 0)
    throw DimensionError("max_axis: axis " + std::to_string(axis) + " invalid for " + shape_string(s));
  const AxisSplit sp = split_axis(s, axis);
  Shape so = s;
  so.erase(so.begin() + static_cast<std::ptrdiff_t>(axis));
  if (so.empty()) so = {1};
  Tensor out(so);
  auto argmax = std::make_shared<std::vector<std::size_t>>(sp.outer * sp.inner);
  const auto xv = x.value();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      std::size_t best = 0;
      double bv = xv[o * sp.len * sp.inner + i];
      for (std::size_t k = 1; k < sp.len; ++k) {
        const double v = xv[(o * sp.len + k) * sp.inner + i];
        if (v > bv) {
          bv = v;
          best = k;
        }
      }
      out[o * sp.inner + i] = bv;
      (*argmax)[o * sp.inner + i] = best;
    }
  const std::size_t ix = x.id();
  std::vector<std::uint32_t> chosen(argmax->begin(), argmax->end());
  Var y = x.tape().record("max_axis", std::move(out), {ix}, [ix, sp, argmax](Tape& t, std::size_t self) {
    const auto& g = t.node(self).grad;
    auto& gx = t.grad_buffer(ix);
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t k = (*argmax)[o * sp.inner + i];
        gx[(o * sp.len + k) * sp.inner + i] += g[o * sp.inner + i];
      }
  });
  x.tape().set_branch(y.id(), std::move(chosen));
  return y;
}

Var shift_axis1(Var x, std::ptrdiff_t offset) {
  const Shape& s = x.shape();
  if (s.size() != 3) throw DimensionError("shift_axis1: expected rank 3, got " + shape_string(s));
  const std::size_t m = s[0], n = s[1], c = s[2];
  Tensor out(s);
  const auto xv = x.value();
  const auto sn = static_cast<std::ptrdiff_t>(n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::ptrdiff_t j = 0; j < sn; ++j) {
      const std::ptrdiff_t src = j + offset;
      if (src < 0 || src >= sn) continue;
      std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>((i * n + static_cast<std::size_t>(src)) * c), c,
                  out.data.begin() + static_cast<std::ptrdiff_t>((i * n + static_cast<std::size_t>(j)) * c));
    }
  const std::size_t ix = x.id();
  return x.tape().record("shift_axis1", std::move(out), {ix}, [ix, m, n, c, offset](Tape& t, std::size_t self) {
    const auto& g = t.node(self).grad;
    auto& gx = t.grad_buffer(ix);
    const auto sn = static_cast<std::ptrdiff_t>(n);
    for (std::size_t i = 0; i < m; ++i)
      for (std::ptrdiff_t j = 0; j < sn; ++j) {
        const std::ptrdiff_t src = j + offset;
        if (src < 0 || src >= sn) continue;
        for (std::size_t k = 0; k < c; ++k)
          gx[(i * n + static_cast<std::size_t>(src)) * c + k] += g[(i * n + static_cast<std::size_t>(j)) * c + k];
      }
  });
}

Var normalize_rows(Var x, double eps) {
  const Shape& s = x.shape();
  if (s.empty() || s.back() == 0) throw DimensionError("normalize_rows: empty last axis");
  const std::size_t c = s.back();
  const std::size_t rows = x.numel() / c;
  auto norms = std::make_shared<std::vector<double>>(rows);
  Tensor out(s);
  const auto xv = x.value();
  std::size_t degenerate = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    double sq = 0.0;
    for (std::size_t j = 0; j < c; ++j) sq += xv[r * c + j] * xv[r * c + j];
    const double n = std::sqrt(sq);
    if (n <= eps) ++degenerate;
    (*norms)[r] = n;
    const double inv = 1.0 / (n + eps);
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] = xv[r * c + j] * inv;
  }
  if (degenerate) logging::warn("normalize_rows: %zu row(s) with norm <= %g", degenerate, eps);
  const std::size_t ix = x.id();
  return x.tape().record("normalize_rows", std::move(out), {ix},
                         [ix, rows, c, eps, norms](Tape& t, std::size_t self) {
                           const auto& g = t.node(self).grad;
                           const auto& xv = t.value_of(ix).data;
                           auto& gx = t.grad_buffer(ix);
                           for (std::size_t r = 0; r < rows; ++r) {
                             const double n = (*norms)[r];
                             const double d = n + eps;
                             double dot = 0.0;
                             for (std::size_t j = 0; j < c; ++j) dot += g[r * c + j] * xv[r * c + j];
                             const double k = n > 0.0 ? dot / (d * d * n) : 0.0;
                             for (std::size_t j = 0; j < c; ++j)
                               gx[r * c + j] += g[r * c + j] / d - xv[r * c + j] * k;
                           }
                         });
}

Var cross_entropy(Var logits, std::size_t target, const std::vector<std::size_t>& allowed) {
  const std::size_t k = logits.numel();
  if (logits.shape().size() != 1) throw DimensionError("cross_entropy: logits must be rank 1, got " + shape_string(logits.shape()));
  if (std::find(allowed.begin(), allowed.end(), target) == allowed.end())
    throw ConfigError("cross_entropy: target class " + std::to_string(target) + " not in allowed set");
  for (auto a : allowed)
    if (a >= k) throw DimensionError("cross_entropy: class " + std::to_string(a) + " out of " + std::to_string(k));
  const auto z = logits.value();
  double mx = z[allowed[0]];
  for (auto a : allowed) mx = std::max(mx, z[a]);
  double se = 0.0;
  for (auto a : allowed) se += std::exp(z[a] - mx);
  const double lse = mx + std::log(se);
  auto probs = std::make_shared<std::vector<std::pair<std::size_t, double>>>();
  for (auto a : allowed) probs->emplace_back(a, std::exp(z[a] - lse));
  const std::size_t il = logits.id();
  return logits.tape().record("cross_entropy", Tensor::scalar(lse - z[target]), {il},
                              [il, target, probs](Tape& t, std::size_t self) {
                                const double g = t.node(self).grad[0];
                                auto& gl = t.grad_buffer(il);
                                for (const auto& [c, p] : *probs) gl[c] += g * p;
                                gl[target] -= g;
                              });
}

AttentionResult msa(Var x, const AttentionWeights& w, std::size_t heads) {
  const Shape in_shape = x.shape();
  if (in_shape.size() == 2) x = reshape(x, {1, in_shape[0], in_shape[1]});
  const Shape& s = x.shape();
  if (s.size() != 3) throw DimensionError("msa: expected [B,S,C] or [S,C], got " + shape_string(s));
  const std::size_t b = s[0], seq = s[1], c = s[2];
  if (seq == 0) throw DimensionError("msa: empty sequence");
  if (heads == 0 || c % heads != 0)
    throw ConfigError("msa: channels " + std::to_string(c) + " not divisible by heads " + std::to_string(heads));
  const std::size_t d = c / heads;

  Var flat = reshape(x, {b * seq, c});
  auto project = [&](Var wm, Var bias) {
    return split_heads(reshape(add_bias(matmul(flat, wm), bias), {b, seq, c}), heads);
  };
  Var q = project(w.wq, w.bq);
  Var k = project(w.wk, w.bk);
  Var v = project(w.wv, w.bv);
  Var scores = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(d)));
  Var attn = softmax_rows(scores);
  Var ctx = merge_heads(matmul(attn, v), heads);
  Var out = add_bias(matmul(reshape(ctx, {b * seq, c}), w.wo), w.bo);
  out = reshape(out, in_shape.size() == 2 ? in_shape : Shape{b, seq, c});
  return {out, attn};
}

}  // namespace conslide::ops
