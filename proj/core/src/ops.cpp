#include "docparser/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>
#include <string>

#include "gemm.hpp"
#include "op_common.hpp"

namespace docparser {

namespace detail {

namespace {
void check_finite(const char* op, const std::vector<double>& v) {
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw std::runtime_error(std::string("non-finite value produced by op '") +
                               op + "'");
    }
  }
}
}  // namespace

void op_check(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

Tensor make_op(const char* name, Shape shape, std::vector<double> value,
               const std::vector<Tensor>& inputs,
               std::function<void(Node&)> backward_fn) {
  if (finite_checks_enabled()) check_finite(name, value);
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool rg = false;
  if (grad_enabled()) {
    for (const auto& t : inputs) rg = rg || t.requires_grad();
  }
  node->requires_grad = rg;
  if (rg) {
    node->parents.reserve(inputs.size());
    for (const auto& t : inputs) node->parents.push_back(t.impl());
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor::wrap(node);
}

}  // namespace detail

namespace {

using detail::Node;
using detail::make_op;
using NodePtr = std::shared_ptr<Node>;

void check(bool cond, const std::string& msg) { detail::op_check(cond, msg); }

std::vector<std::int64_t> strides_of(const Shape& shape) {
  std::vector<std::int64_t> s(shape.size());
  std::int64_t acc = 1;
  for (std::int64_t i = static_cast<std::int64_t>(shape.size()) - 1; i >= 0; --i) {
    s[static_cast<size_t>(i)] = acc;
    acc *= shape[static_cast<size_t>(i)];
  }
  return s;
}

void require_defined(const Tensor& t, const char* op) {
  check(t.defined(), std::string(op) + ": undefined tensor argument");
}

// erf(t) for |t| <= 1.8 via its (rapidly converging) odd Taylor series,
// accurate to ~1e-11 here; libm handles the rare tail.
double erf_small(double t) {
  // 2/sqrt(pi) * (-1)^n / (n! (2n+1)), n = 0..21
  static constexpr double kCoeff[22] = {
      1.1283791670955126,     -0.37612638903183752,   0.11283791670955126,
      -0.026866170645131251,  0.0052239776254421878,  -0.00085483270234508528,
      0.00012055332981789664, -1.4925650358406251e-05, 1.6462114365889247e-06,
      -1.6365844691234924e-07, 1.4807192815879218e-08, -1.2290555301717927e-09,
      9.4227590646504109e-11, -6.7113668551641104e-12, 4.4632242055169063e-13,
      -2.7835162072109215e-14, 1.6342614095367152e-15, -9.0645566787735091e-17,
      4.7634145743906084e-18, -2.3783144586319488e-19, 1.1311593413036659e-20,
      -5.1356912463929436e-22};
  const double t2 = t * t;
  double acc = kCoeff[21];
  for (int i = 20; i >= 0; --i) acc = acc * t2 + kCoeff[i];
  return t * acc;
}

double gelu_fwd(double x) {
  const double t = x * 0.7071067811865476;
  const double e = (t > 1.8 || t < -1.8) ? std::erf(t) : erf_small(t);
  return 0.5 * x * (1.0 + e);
}

double gelu_bwd(double x) {
  constexpr double inv_sqrt_2pi = 0.3989422804014327;
  return 0.5 * (1.0 + std::erf(x * 0.7071067811865476)) +
         x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_defined(a, "add");
  require_defined(b, "add");
  check(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
  std::vector<double> out(a.numel());
  const double* av = a.data();
  const double* bv = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  auto an = a.impl(), bn = b.impl();
  return make_op("add", a.shape(), std::move(out), {a, b}, [an, bn](Node& self) {
    if (an->requires_grad) {
      auto& g = an->ensure_grad();
      for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (bn->requires_grad) {
      auto& g = bn->ensure_grad();
      for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_defined(a, "sub");
  require_defined(b, "sub");
  check(a.shape() == b.shape(), "sub: shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
  std::vector<double> out(a.numel());
  const double* av = a.data();
  const double* bv = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  auto an = a.impl(), bn = b.impl();
  return make_op("sub", a.shape(), std::move(out), {a, b}, [an, bn](Node& self) {
    if (an->requires_grad) {
      auto& g = an->ensure_grad();
      for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (bn->requires_grad) {
      auto& g = bn->ensure_grad();
      for (size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_defined(a, "mul");
  require_defined(b, "mul");
  check(a.shape() == b.shape(), "mul: shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
  std::vector<double> out(a.numel());
  const double* av = a.data();
  const double* bv = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  auto an = a.impl(), bn = b.impl();
  return make_op("mul", a.shape(), std::move(out), {a, b}, [an, bn](Node& self) {
    if (an->requires_grad) {
      auto& g = an->ensure_grad();
      for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bn->value[i];
    }
    if (bn->requires_grad) {
      auto& g = bn->ensure_grad();
      for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * an->value[i];
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  require_defined(a, "scale");
  std::vector<double> out(a.numel());
  const double* av = a.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * factor;
  auto an = a.impl();
  return make_op("scale", a.shape(), std::move(out), {a}, [an, factor](Node& self) {
    if (!an->requires_grad) return;
    auto& g = an->ensure_grad();
    for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
  });
}

Tensor add_scalar(const Tensor& a, double value) {
  require_defined(a, "add_scalar");
  std::vector<double> out(a.numel());
  const double* av = a.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] + value;
  auto an = a.impl();
  return make_op("add_scalar", a.shape(), std::move(out), {a}, [an](Node& self) {
    if (!an->requires_grad) return;
    auto& g = an->ensure_grad();
    for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor gelu(const Tensor& x) {
  require_defined(x, "gelu");
  std::vector<double> out(x.numel());
  const double* xv = x.data();
  const auto n = static_cast<std::int64_t>(out.size());
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i)] = gelu_fwd(xv[i]);
  auto xn = x.impl();
  return make_op("gelu", x.shape(), std::move(out), {x}, [xn, n](Node& self) {
    if (!xn->requires_grad) return;
    auto& g = xn->ensure_grad();
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) {
      g[static_cast<size_t>(i)] +=
          self.grad[static_cast<size_t>(i)] * gelu_bwd(xn->value[static_cast<size_t>(i)]);
    }
  });
}

Tensor add_bias_nd(const Tensor& a, const Tensor& b) {
  require_defined(a, "add_bias_nd");
  require_defined(b, "add_bias_nd");
  check(a.ndim() >= 2, "add_bias_nd: lhs must have at least 2 dims, got " +
                           shape_str(a.shape()));
  Shape tail(a.shape().begin() + 1, a.shape().end());
  check(tail == b.shape(), "add_bias_nd: bias shape " + shape_str(b.shape()) +
                               " must equal trailing dims of " + shape_str(a.shape()));
  const std::int64_t n0 = a.dim(0);
  const std::int64_t inner = b.numel();
  std::vector<double> out(a.numel());
  const double* av = a.data();
  const double* bv = b.data();
  for (std::int64_t i = 0; i < n0; ++i) {
    const double* ai = av + i * inner;
    double* oi = out.data() + i * inner;
    for (std::int64_t j = 0; j < inner; ++j) oi[j] = ai[j] + bv[j];
  }
  auto an = a.impl(), bn = b.impl();
  return make_op("add_bias_nd", a.shape(), std::move(out), {a, b},
                 [an, bn, n0, inner](Node& self) {
                   if (an->requires_grad) {
                     auto& g = an->ensure_grad();
                     for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                   }
                   if (bn->requires_grad) {
                     auto& g = bn->ensure_grad();
                     for (std::int64_t i = 0; i < n0; ++i) {
                       const double* gi = self.grad.data() + i * inner;
                       for (std::int64_t j = 0; j < inner; ++j) g[j] += gi[j];
                     }
                   }
                 });
}

// ---------------------------------------------------------------------------
// Shape
// ---------------------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape) {
  require_defined(x, "reshape");
  check(shape_numel(shape) == x.numel(),
        "reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  std::vector<double> out = x.to_vector();
  auto xn = x.impl();
  return make_op("reshape", std::move(shape), std::move(out), {x}, [xn](Node& self) {
    if (!xn->requires_grad) return;
    auto& g = xn->ensure_grad();
    for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

namespace {

// Walks the output of a permutation in linear order, invoking fn with the
// matching source index.
template <typename Fn>
void permute_walk(const Shape& out_shape, const std::vector<std::int64_t>& src_stride,
                  Fn&& fn) {
  const auto nd = static_cast<std::int64_t>(out_shape.size());
  const std::int64_t n = shape_numel(out_shape);
  std::vector<std::int64_t> counter(out_shape.size(), 0);
  std::int64_t src = 0;
  for (std::int64_t lo = 0; lo < n; ++lo) {
    fn(lo, src);
    for (std::int64_t d = nd - 1; d >= 0; --d) {
      src += src_stride[static_cast<size_t>(d)];
      if (++counter[static_cast<size_t>(d)] < out_shape[static_cast<size_t>(d)]) break;
      src -= out_shape[static_cast<size_t>(d)] * src_stride[static_cast<size_t>(d)];
      counter[static_cast<size_t>(d)] = 0;
    }
  }
}

}  // namespace

Tensor permute(const Tensor& x, const std::vector<std::int64_t>& dims) {
  require_defined(x, "permute");
  const auto nd = x.ndim();
  check(static_cast<std::int64_t>(dims.size()) == nd,
        "permute: dims size must match tensor rank " + std::to_string(nd));
  std::vector<bool> seen(dims.size(), false);
  for (auto d : dims) {
    check(d >= 0 && d < nd && !seen[static_cast<size_t>(d)],
          "permute: invalid dims permutation");
    seen[static_cast<size_t>(d)] = true;
  }
  Shape out_shape(dims.size());
  auto xs = strides_of(x.shape());
  std::vector<std::int64_t> src_stride(dims.size());
  for (size_t i = 0; i < dims.size(); ++i) {
    out_shape[i] = x.shape()[static_cast<size_t>(dims[i])];
    src_stride[i] = xs[static_cast<size_t>(dims[i])];
  }
  std::vector<double> out(x.numel());
  const double* xv = x.data();
  permute_walk(out_shape, src_stride, [&](std::int64_t lo, std::int64_t src) {
    out[static_cast<size_t>(lo)] = xv[src];
  });
  auto xn = x.impl();
  return make_op("permute", out_shape, std::move(out), {x},
                 [xn, out_shape, src_stride](Node& self) {
                   if (!xn->requires_grad) return;
                   auto& g = xn->ensure_grad();
                   permute_walk(out_shape, src_stride,
                                [&](std::int64_t lo, std::int64_t src) {
                                  g[static_cast<size_t>(src)] +=
                                      self.grad[static_cast<size_t>(lo)];
                                });
                 });
}

Tensor narrow(const Tensor& x, std::int64_t axis, std::int64_t start,
              std::int64_t length) {
  require_defined(x, "narrow");
  const auto nd = x.ndim();
  if (axis < 0) axis += nd;
  check(axis >= 0 && axis < nd, "narrow: axis out of range");
  const std::int64_t dim = x.shape()[static_cast<size_t>(axis)];
  check(start >= 0 && length > 0 && start + length <= dim,
        "narrow: slice [" + std::to_string(start) + "," +
            std::to_string(start + length) + ") out of range for dim " +
            std::to_string(dim));
  std::int64_t outer = 1, inner = 1;
  for (std::int64_t i = 0; i < axis; ++i) outer *= x.shape()[static_cast<size_t>(i)];
  for (std::int64_t i = axis + 1; i < nd; ++i) inner *= x.shape()[static_cast<size_t>(i)];
  Shape out_shape = x.shape();
  out_shape[static_cast<size_t>(axis)] = length;
  std::vector<double> out(outer * length * inner);
  const double* xv = x.data();
  for (std::int64_t o = 0; o < outer; ++o) {
    const double* src = xv + (o * dim + start) * inner;
    double* dst = out.data() + o * length * inner;
    std::memcpy(dst, src, static_cast<size_t>(length * inner) * sizeof(double));
  }
  auto xn = x.impl();
  return make_op("narrow", std::move(out_shape), std::move(out), {x},
                 [xn, outer, inner, dim, start, length](Node& self) {
                   if (!xn->requires_grad) return;
                   auto& g = xn->ensure_grad();
                   for (std::int64_t o = 0; o < outer; ++o) {
                     double* dst = g.data() + (o * dim + start) * inner;
                     const double* src = self.grad.data() + o * length * inner;
                     for (std::int64_t i = 0; i < length * inner; ++i) dst[i] += src[i];
                   }
                 });
}

Tensor concat(const std::vector<Tensor>& parts, std::int64_t axis) {
  check(!parts.empty(), "concat: needs at least one tensor");
  const auto nd = parts[0].ndim();
  if (axis < 0) axis += nd;
  check(axis >= 0 && axis < nd, "concat: axis out of range");
  std::int64_t axis_total = 0;
  for (const auto& p : parts) {
    require_defined(p, "concat");
    check(p.ndim() == nd, "concat: rank mismatch");
    for (std::int64_t d = 0; d < nd; ++d) {
      if (d == axis) continue;
      check(p.shape()[static_cast<size_t>(d)] == parts[0].shape()[static_cast<size_t>(d)],
            "concat: shape mismatch " + shape_str(p.shape()) + " vs " +
                shape_str(parts[0].shape()));
    }
    axis_total += p.shape()[static_cast<size_t>(axis)];
  }
  Shape out_shape = parts[0].shape();
  out_shape[static_cast<size_t>(axis)] = axis_total;
  std::int64_t outer = 1, inner = 1;
  for (std::int64_t i = 0; i < axis; ++i) outer *= out_shape[static_cast<size_t>(i)];
  for (std::int64_t i = axis + 1; i < nd; ++i) inner *= out_shape[static_cast<size_t>(i)];

  std::vector<double> out(shape_numel(out_shape));
  std::int64_t offset = 0;
  for (const auto& p : parts) {
    const std::int64_t len = p.shape()[static_cast<size_t>(axis)];
    const double* src = p.data();
    for (std::int64_t o = 0; o < outer; ++o) {
      std::memcpy(out.data() + (o * axis_total + offset) * inner,
                  src + o * len * inner,
                  static_cast<size_t>(len * inner) * sizeof(double));
    }
    offset += len;
  }
  std::vector<NodePtr> nodes;
  nodes.reserve(parts.size());
  for (const auto& p : parts) nodes.push_back(p.impl());
  std::vector<std::int64_t> lens;
  for (const auto& p : parts) lens.push_back(p.shape()[static_cast<size_t>(axis)]);
  return make_op("concat", std::move(out_shape), std::move(out), parts,
                 [nodes, lens, outer, inner, axis_total](Node& self) {
                   std::int64_t offset = 0;
                   for (size_t pi = 0; pi < nodes.size(); ++pi) {
                     const std::int64_t len = lens[pi];
                     if (nodes[pi]->requires_grad) {
                       auto& g = nodes[pi]->ensure_grad();
                       for (std::int64_t o = 0; o < outer; ++o) {
                         const double* src =
                             self.grad.data() + (o * axis_total + offset) * inner;
                         double* dst = g.data() + o * len * inner;
                         for (std::int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
                       }
                     }
                     offset += len;
                   }
                 });
}

Tensor roll2d(const Tensor& x, std::int64_t shift_h, std::int64_t shift_w) {
  require_defined(x, "roll2d");
  check(x.ndim() == 4, "roll2d: expected NCHW tensor, got " + shape_str(x.shape()));
  const std::int64_t nc = x.dim(0) * x.dim(1);
  const std::int64_t h = x.dim(2), w = x.dim(3);
  auto mod = [](std::int64_t a, std::int64_t m) { return ((a % m) + m) % m; };
  const std::int64_t sh = mod(shift_h, h), sw = mod(shift_w, w);
  std::vector<double> out(x.numel());
  const double* xv = x.data();
  for (std::int64_t p = 0; p < nc; ++p) {
    const double* src = xv + p * h * w;
    double* dst = out.data() + p * h * w;
    for (std::int64_t y = 0; y < h; ++y) {
      const std::int64_t sy = mod(y - sh, h);
      for (std::int64_t xx = 0; xx < w; ++xx) {
        dst[y * w + xx] = src[sy * w + mod(xx - sw, w)];
      }
    }
  }
  auto xn = x.impl();
  return make_op("roll2d", x.shape(), std::move(out), {x},
                 [xn, nc, h, w, sh, sw, mod](Node& self) {
                   if (!xn->requires_grad) return;
                   auto& g = xn->ensure_grad();
                   for (std::int64_t p = 0; p < nc; ++p) {
                     const double* src = self.grad.data() + p * h * w;
                     double* dst = g.data() + p * h * w;
                     for (std::int64_t y = 0; y < h; ++y) {
                       const std::int64_t sy = mod(y - sh, h);
                       for (std::int64_t xx = 0; xx < w; ++xx) {
                         dst[sy * w + mod(xx - sw, w)] += src[y * w + xx];
                       }
                     }
                   }
                 });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

Tensor sum_all(const Tensor& x) {
  require_defined(x, "sum_all");
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  auto xn = x.impl();
  return make_op("sum_all", {1}, {acc}, {x}, [xn](Node& self) {
    if (!xn->requires_grad) return;
    auto& g = xn->ensure_grad();
    const double gy = self.grad[0];
    for (auto& v : g) v += gy;
  });
}

Tensor mean_all(const Tensor& x) {
  require_defined(x, "mean_all");
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  const double inv_n = 1.0 / static_cast<double>(x.numel());
  auto xn = x.impl();
  return make_op("mean_all", {1}, {acc * inv_n}, {x}, [xn, inv_n](Node& self) {
    if (!xn->requires_grad) return;
    auto& g = xn->ensure_grad();
    const double gy = self.grad[0] * inv_n;
    for (auto& v : g) v += gy;
  });
}

// ---------------------------------------------------------------------------
// Layer norm
// ---------------------------------------------------------------------------

namespace {

// Shared layer-norm math over `rows` vectors of length `len`, elements of a
// vector separated by `stride`, consecutive rows starting at row_starts.
struct LnSaved {
  std::vector<double> xhat;
  std::vector<double> inv_std;
};

}  // namespace

static Tensor layer_norm_impl(const char* name, const Tensor& x, const Tensor& gamma,
                              const Tensor& beta, double eps, std::int64_t rows,
                              std::int64_t len, std::int64_t stride,
                              std::function<std::int64_t(std::int64_t)> row_start) {
  check(gamma.numel() == len && beta.numel() == len,
        std::string(name) + ": gamma/beta must have " + std::to_string(len) +
            " elements, got " + shape_str(gamma.shape()) + " and " +
            shape_str(beta.shape()));
  check(len >= 1, std::string(name) + ": normalised dimension must be >= 1");

  auto saved = std::make_shared<LnSaved>();
  saved->xhat.resize(static_cast<size_t>(rows * len));
  saved->inv_std.resize(static_cast<size_t>(rows));
  std::vector<double> out(x.numel());
  const double* xv = x.data();
  const double* gv = gamma.data();
  const double* bv = beta.data();
  const double inv_len = 1.0 / static_cast<double>(len);

#pragma omp parallel for schedule(static)
  for (std::int64_t r = 0; r < rows; ++r) {
    const std::int64_t base = row_start(r);
    double mean = 0.0;
    for (std::int64_t i = 0; i < len; ++i) mean += xv[base + i * stride];
    mean *= inv_len;
    double var = 0.0;
    for (std::int64_t i = 0; i < len; ++i) {
      const double d = xv[base + i * stride] - mean;
      var += d * d;
    }
    var *= inv_len;
    const double inv_std = 1.0 / std::sqrt(var + eps);
    saved->inv_std[static_cast<size_t>(r)] = inv_std;
    double* xh = saved->xhat.data() + r * len;
    for (std::int64_t i = 0; i < len; ++i) {
      const double h = (xv[base + i * stride] - mean) * inv_std;
      xh[i] = h;
      out[static_cast<size_t>(base + i * stride)] = gv[i] * h + bv[i];
    }
  }

  auto xn = x.impl(), gn = gamma.impl(), bn = beta.impl();
  return make_op(name, x.shape(), std::move(out), {x, gamma, beta},
                 [xn, gn, bn, saved, rows, len, stride, row_start,
                  inv_len](Node& self) {
                   const double* gv = gn->value.data();
                   if (gn->requires_grad || bn->requires_grad) {
                     // Serial: gamma/beta grads are shared across rows.
                     std::vector<double> dg(static_cast<size_t>(len), 0.0);
                     std::vector<double> db(static_cast<size_t>(len), 0.0);
                     for (std::int64_t r = 0; r < rows; ++r) {
                       const std::int64_t base = row_start(r);
                       const double* xh = saved->xhat.data() + r * len;
                       for (std::int64_t i = 0; i < len; ++i) {
                         const double gy = self.grad[static_cast<size_t>(base + i * stride)];
                         dg[static_cast<size_t>(i)] += gy * xh[i];
                         db[static_cast<size_t>(i)] += gy;
                       }
                     }
                     if (gn->requires_grad) {
                       auto& g = gn->ensure_grad();
                       for (std::int64_t i = 0; i < len; ++i) g[static_cast<size_t>(i)] += dg[static_cast<size_t>(i)];
                     }
                     if (bn->requires_grad) {
                       auto& g = bn->ensure_grad();
                       for (std::int64_t i = 0; i < len; ++i) g[static_cast<size_t>(i)] += db[static_cast<size_t>(i)];
                     }
                   }
                   if (xn->requires_grad) {
                     auto& g = xn->ensure_grad();
#pragma omp parallel for schedule(static)
                     for (std::int64_t r = 0; r < rows; ++r) {
                       const std::int64_t base = row_start(r);
                       const double* xh = saved->xhat.data() + r * len;
                       const double inv_std = saved->inv_std[static_cast<size_t>(r)];
                       double sum_dy = 0.0, sum_dy_xh = 0.0;
                       for (std::int64_t i = 0; i < len; ++i) {
                         const double dy =
                             self.grad[static_cast<size_t>(base + i * stride)] * gv[i];
                         sum_dy += dy;
                         sum_dy_xh += dy * xh[i];
                       }
                       sum_dy *= inv_len;
                       sum_dy_xh *= inv_len;
                       for (std::int64_t i = 0; i < len; ++i) {
                         const double dy =
                             self.grad[static_cast<size_t>(base + i * stride)] * gv[i];
                         g[static_cast<size_t>(base + i * stride)] +=
                             (dy - sum_dy - xh[i] * sum_dy_xh) * inv_std;
                       }
                     }
                   }
                 });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps) {
  require_defined(x, "layer_norm");
  require_defined(gamma, "layer_norm");
  require_defined(beta, "layer_norm");
  const std::int64_t len = x.shape().back();
  const std::int64_t rows = x.numel() / len;
  return layer_norm_impl("layer_norm", x, gamma, beta, eps, rows, len, 1,
                         [len](std::int64_t r) { return r * len; });
}

// Channel layer norm over NCHW, tiled over pixel ranges so every pass is
// contiguous in memory (a per-pixel channel walk strides h*w doubles and
// thrashes the cache at full resolution).
Tensor layer_norm_chw(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                      double eps) {
  require_defined(x, "layer_norm_chw");
  require_defined(gamma, "layer_norm_chw");
  require_defined(beta, "layer_norm_chw");
  check(x.ndim() == 4, "layer_norm_chw: expected NCHW tensor, got " +
                           shape_str(x.shape()));
  const std::int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  check(gamma.numel() == c && beta.numel() == c,
        "layer_norm_chw: gamma/beta must have " + std::to_string(c) +
            " elements, got " + shape_str(gamma.shape()) + " and " +
            shape_str(beta.shape()));
  const std::int64_t tile = 512;
  const double inv_c = 1.0 / static_cast<double>(c);

  auto saved = std::make_shared<LnSaved>();
  saved->xhat.resize(static_cast<size_t>(x.numel()));  // same layout as x
  saved->inv_std.resize(static_cast<size_t>(n * hw));
  std::vector<double> out(x.numel());
  const double* xv = x.data();
  const double* gv = gamma.data();
  const double* bv = beta.data();

#pragma omp parallel for schedule(static) collapse(2)
  for (std::int64_t img = 0; img < n; ++img) {
    for (std::int64_t p0 = 0; p0 < hw; p0 += tile) {
      const std::int64_t count = std::min(tile, hw - p0);
      std::vector<double> mean(static_cast<size_t>(count), 0.0);
      std::vector<double> var(static_cast<size_t>(count), 0.0);
      const double* base = xv + img * c * hw + p0;
      for (std::int64_t ci = 0; ci < c; ++ci) {
        const double* row = base + ci * hw;
        for (std::int64_t t = 0; t < count; ++t) mean[static_cast<size_t>(t)] += row[t];
      }
      for (std::int64_t t = 0; t < count; ++t) mean[static_cast<size_t>(t)] *= inv_c;
      for (std::int64_t ci = 0; ci < c; ++ci) {
        const double* row = base + ci * hw;
        for (std::int64_t t = 0; t < count; ++t) {
          const double d = row[t] - mean[static_cast<size_t>(t)];
          var[static_cast<size_t>(t)] += d * d;
        }
      }
      double* istd = saved->inv_std.data() + img * hw + p0;
      for (std::int64_t t = 0; t < count; ++t) {
        istd[t] = 1.0 / std::sqrt(var[static_cast<size_t>(t)] * inv_c + eps);
      }
      for (std::int64_t ci = 0; ci < c; ++ci) {
        const double* row = base + ci * hw;
        double* xh = saved->xhat.data() + (img * c + ci) * hw + p0;
        double* orow = out.data() + (img * c + ci) * hw + p0;
        const double g = gv[ci], b = bv[ci];
        for (std::int64_t t = 0; t < count; ++t) {
          const double h = (row[t] - mean[static_cast<size_t>(t)]) * istd[t];
          xh[t] = h;
          orow[t] = g * h + b;
        }
      }
    }
  }

  auto xn = x.impl(), gn = gamma.impl(), bn = beta.impl();
  return make_op(
      "layer_norm_chw", x.shape(), std::move(out), {x, gamma, beta},
      [xn, gn, bn, saved, n, c, hw, tile, inv_c](Node& self) {
        const double* gv = gn->value.data();
        if (gn->requires_grad || bn->requires_grad) {
          std::vector<double> dg(static_cast<size_t>(c), 0.0);
          std::vector<double> db(static_cast<size_t>(c), 0.0);
          for (std::int64_t img = 0; img < n; ++img) {
            for (std::int64_t ci = 0; ci < c; ++ci) {
              const double* gy = self.grad.data() + (img * c + ci) * hw;
              const double* xh = saved->xhat.data() + (img * c + ci) * hw;
              double acc_g = 0.0, acc_b = 0.0;
              for (std::int64_t t = 0; t < hw; ++t) {
                acc_g += gy[t] * xh[t];
                acc_b += gy[t];
              }
              dg[static_cast<size_t>(ci)] += acc_g;
              db[static_cast<size_t>(ci)] += acc_b;
            }
          }
          if (gn->requires_grad) {
            auto& g = gn->ensure_grad();
            for (std::int64_t ci = 0; ci < c; ++ci)
              g[static_cast<size_t>(ci)] += dg[static_cast<size_t>(ci)];
          }
          if (bn->requires_grad) {
            auto& g = bn->ensure_grad();
            for (std::int64_t ci = 0; ci < c; ++ci)
              g[static_cast<size_t>(ci)] += db[static_cast<size_t>(ci)];
          }
        }
        if (!xn->requires_grad) return;
        auto& gx = xn->ensure_grad();
#pragma omp parallel for schedule(static) collapse(2)
        for (std::int64_t img = 0; img < n; ++img) {
          for (std::int64_t p0 = 0; p0 < hw; p0 += tile) {
            const std::int64_t count = std::min(tile, hw - p0);
            std::vector<double> sum_dy(static_cast<size_t>(count), 0.0);
            std::vector<double> sum_dy_xh(static_cast<size_t>(count), 0.0);
            for (std::int64_t ci = 0; ci < c; ++ci) {
              const double* gy = self.grad.data() + (img * c + ci) * hw + p0;
              const double* xh = saved->xhat.data() + (img * c + ci) * hw + p0;
              const double g = gv[ci];
              for (std::int64_t t = 0; t < count; ++t) {
                const double dy = gy[t] * g;
                sum_dy[static_cast<size_t>(t)] += dy;
                sum_dy_xh[static_cast<size_t>(t)] += dy * xh[t];
              }
            }
            const double* istd = saved->inv_std.data() + img * hw + p0;
            for (std::int64_t t = 0; t < count; ++t) {
              sum_dy[static_cast<size_t>(t)] *= inv_c;
              sum_dy_xh[static_cast<size_t>(t)] *= inv_c;
            }
            for (std::int64_t ci = 0; ci < c; ++ci) {
              const double* gy = self.grad.data() + (img * c + ci) * hw + p0;
              const double* xh = saved->xhat.data() + (img * c + ci) * hw + p0;
              double* dst = gx.data() + (img * c + ci) * hw + p0;
              const double g = gv[ci];
              for (std::int64_t t = 0; t < count; ++t) {
                const double dy = gy[t] * g;
                dst[t] += (dy - sum_dy[static_cast<size_t>(t)] -
                           xh[t] * sum_dy_xh[static_cast<size_t>(t)]) *
                          istd[t];
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Softmax family
// ---------------------------------------------------------------------------

Tensor softmax(const Tensor& x, std::int64_t axis) {
  require_defined(x, "softmax");
  const auto nd = x.ndim();
  if (axis < 0) axis += nd;
  check(axis >= 0 && axis < nd, "softmax: axis out of range");
  const std::int64_t len = x.shape()[static_cast<size_t>(axis)];
  std::int64_t outer = 1, inner = 1;
  for (std::int64_t i = 0; i < axis; ++i) outer *= x.shape()[static_cast<size_t>(i)];
  for (std::int64_t i = axis + 1; i < nd; ++i) inner *= x.shape()[static_cast<size_t>(i)];

  std::vector<double> out(x.numel());
  const double* xv = x.data();
#pragma omp parallel for schedule(static) collapse(2)
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t in = 0; in < inner; ++in) {
      const std::int64_t base = o * len * inner + in;
      double mx = -1e300;
      for (std::int64_t i = 0; i < len; ++i)
        mx = std::max(mx, xv[base + i * inner]);
      double z = 0.0;
      for (std::int64_t i = 0; i < len; ++i) {
        const double e = std::exp(xv[base + i * inner] - mx);
        out[static_cast<size_t>(base + i * inner)] = e;
        z += e;
      }
      const double inv_z = 1.0 / z;
      for (std::int64_t i = 0; i < len; ++i)
        out[static_cast<size_t>(base + i * inner)] *= inv_z;
    }
  }
  auto xn = x.impl();
  auto yv = std::make_shared<std::vector<double>>(out);
  return make_op("softmax", x.shape(), std::move(out), {x},
                 [xn, yv, outer, inner, len](Node& self) {
                   if (!xn->requires_grad) return;
                   auto& g = xn->ensure_grad();
#pragma omp parallel for schedule(static) collapse(2)
                   for (std::int64_t o = 0; o < outer; ++o) {
                     for (std::int64_t in = 0; in < inner; ++in) {
                       const std::int64_t base = o * len * inner + in;
                       double dot = 0.0;
                       for (std::int64_t i = 0; i < len; ++i) {
                         const auto idx = static_cast<size_t>(base + i * inner);
                         dot += self.grad[idx] * (*yv)[idx];
                       }
                       for (std::int64_t i = 0; i < len; ++i) {
                         const auto idx = static_cast<size_t>(base + i * inner);
                         g[idx] += (*yv)[idx] * (self.grad[idx] - dot);
                       }
                     }
                   }
                 });
}

Tensor masked_softmax_lastdim(const Tensor& scores, const Tensor& mask,
                              std::int64_t heads) {
  require_defined(scores, "masked_softmax_lastdim");
  check(scores.ndim() == 3, "masked_softmax_lastdim: scores must be (B, S, T), got " +
                                shape_str(scores.shape()));
  if (!mask.defined()) return softmax(scores, 2);
  check(mask.ndim() == 3 && mask.dim(1) == scores.dim(1) && mask.dim(2) == scores.dim(2),
        "masked_softmax_lastdim: mask shape " + shape_str(mask.shape()) +
            " incompatible with scores " + shape_str(scores.shape()));
  check(heads >= 1 && scores.dim(0) % heads == 0,
        "masked_softmax_lastdim: batch not divisible by heads");
  const std::int64_t b = scores.dim(0), s = scores.dim(1), t = scores.dim(2);
  const std::int64_t m = mask.dim(0);
  std::vector<double> out(scores.numel());
  const double* xv = scores.data();
  const double* mv = mask.data();
#pragma omp parallel for schedule(static)
  for (std::int64_t bi = 0; bi < b; ++bi) {
    const std::int64_t mi = (bi / heads) % m;
    for (std::int64_t si = 0; si < s; ++si) {
      const double* row = xv + (bi * s + si) * t;
      const double* mrow = mv + (mi * s + si) * t;
      double* orow = out.data() + (bi * s + si) * t;
      double mx = -1e300;
      for (std::int64_t i = 0; i < t; ++i) mx = std::max(mx, row[i] + mrow[i]);
      double z = 0.0;
      for (std::int64_t i = 0; i < t; ++i) {
        const double e = std::exp(row[i] + mrow[i] - mx);
        orow[i] = e;
        z += e;
      }
      const double inv_z = 1.0 / z;
      for (std::int64_t i = 0; i < t; ++i) orow[i] *= inv_z;
    }
  }
  auto xn = scores.impl();
  auto yv = std::make_shared<std::vector<double>>(out);
  return make_op("masked_softmax_lastdim", scores.shape(), std::move(out),
                 {scores, mask}, [xn, yv, b, s, t](Node& self) {
                   if (!xn->requires_grad) return;
                   auto& g = xn->ensure_grad();
#pragma omp parallel for schedule(static)
                   for (std::int64_t r = 0; r < b * s; ++r) {
                     const double* y = yv->data() + r * t;
                     const double* dy = self.grad.data() + r * t;
                     double* gx = g.data() + r * t;
                     double dot = 0.0;
                     for (std::int64_t i = 0; i < t; ++i) dot += dy[i] * y[i];
                     for (std::int64_t i = 0; i < t; ++i) gx[i] += y[i] * (dy[i] - dot);
                   }
                 });
}

Tensor softmax_cross_entropy(const Tensor& logits,
                             const std::vector<std::int64_t>& targets,
                             std::int64_t ignore_index) {
  require_defined(logits, "softmax_cross_entropy");
  check(logits.ndim() == 2, "softmax_cross_entropy: logits must be (N, V), got " +
                                shape_str(logits.shape()));
  const std::int64_t n = logits.dim(0), v = logits.dim(1);
  check(static_cast<std::int64_t>(targets.size()) == n,
        "softmax_cross_entropy: expected " + std::to_string(n) + " targets, got " +
            std::to_string(targets.size()));
  std::int64_t active = 0;
  for (auto t : targets) {
    if (t == ignore_index) continue;
    check(t >= 0 && t < v, "softmax_cross_entropy: target " + std::to_string(t) +
                               " out of range [0," + std::to_string(v) + ")");
    ++active;
  }
  if (active == 0) {
    throw std::invalid_argument("softmax_cross_entropy: every position is ignored");
  }
  const double* xv = logits.data();
  double loss = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    if (targets[static_cast<size_t>(i)] == ignore_index) continue;
    const double* row = xv + i * v;
    double mx = -1e300;
    for (std::int64_t j = 0; j < v; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (std::int64_t j = 0; j < v; ++j) z += std::exp(row[j] - mx);
    loss += mx + std::log(z) - row[targets[static_cast<size_t>(i)]];
  }
  loss /= static_cast<double>(active);

  auto xn = logits.impl();
  auto tgt = std::make_shared<std::vector<std::int64_t>>(targets);
  return make_op("softmax_cross_entropy", {1}, {loss}, {logits},
                 [xn, tgt, n, v, ignore_index, active](Node& self) {
                   if (!xn->requires_grad) return;
                   auto& g = xn->ensure_grad();
                   const double gy = self.grad[0] / static_cast<double>(active);
                   const double* xv = xn->value.data();
#pragma omp parallel for schedule(static)
                   for (std::int64_t i = 0; i < n; ++i) {
                     const std::int64_t t = (*tgt)[static_cast<size_t>(i)];
                     if (t == ignore_index) continue;
                     const double* row = xv + i * v;
                     double* grow = g.data() + i * v;
                     double mx = -1e300;
                     for (std::int64_t j = 0; j < v; ++j) mx = std::max(mx, row[j]);
                     double z = 0.0;
                     for (std::int64_t j = 0; j < v; ++j) z += std::exp(row[j] - mx);
                     const double inv_z = 1.0 / z;
                     for (std::int64_t j = 0; j < v; ++j) {
                       double p = std::exp(row[j] - mx) * inv_z;
                       if (j == t) p -= 1.0;
                       grow[j] += gy * p;
                     }
                   }
                 });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_defined(x, "linear");
  require_defined(weight, "linear");
  check(weight.ndim() == 2, "linear: weight must be (D_out, D_in), got " +
                                shape_str(weight.shape()));
  const std::int64_t d_in = weight.dim(1), d_out = weight.dim(0);
  check(x.shape().back() == d_in,
        "linear: input " + shape_str(x.shape()) + " incompatible with weight " +
            shape_str(weight.shape()));
  if (bias.defined()) {
    check(bias.numel() == d_out, "linear: bias " + shape_str(bias.shape()) +
                                     " must have " + std::to_string(d_out) +
                                     " elements");
  }
  const std::int64_t m = x.numel() / d_in;
  std::vector<double> out(m * d_out);
  detail::gemm(false, true, m, d_out, d_in, 1.0, x.data(), d_in, weight.data(), d_in,
               0.0, out.data(), d_out);
  if (bias.defined()) {
    const double* bv = bias.data();
    for (std::int64_t i = 0; i < m; ++i) {
      double* row = out.data() + i * d_out;
      for (std::int64_t j = 0; j < d_out; ++j) row[j] += bv[j];
    }
  }
  Shape out_shape = x.shape();
  out_shape.back() = d_out;
  auto xn = x.impl(), wn = weight.impl();
  NodePtr bn = bias.defined() ? bias.impl() : nullptr;
  std::vector<Tensor> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_op("linear", std::move(out_shape), std::move(out), std::move(inputs),
                 [xn, wn, bn, m, d_in, d_out](Node& self) {
                   const double* dy = self.grad.data();
                   if (xn->requires_grad) {
                     auto& g = xn->ensure_grad();
                     detail::gemm(false, false, m, d_in, d_out, 1.0, dy, d_out,
                                  wn->value.data(), d_in, 1.0, g.data(), d_in);
                   }
                   if (wn->requires_grad) {
                     auto& g = wn->ensure_grad();
                     detail::gemm(true, false, d_out, d_in, m, 1.0, dy, d_out,
                                  xn->value.data(), d_in, 1.0, g.data(), d_in);
                   }
                   if (bn && bn->requires_grad) {
                     auto& g = bn->ensure_grad();
                     for (std::int64_t i = 0; i < m; ++i) {
                       const double* row = dy + i * d_out;
                       for (std::int64_t j = 0; j < d_out; ++j)
                         g[static_cast<size_t>(j)] += row[j];
                     }
                   }
                 });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  check(a.ndim() == 2 && b.ndim() == 2, "matmul: expects 2-D tensors, got " +
                                            shape_str(a.shape()) + " and " +
                                            shape_str(b.shape()));
  check(a.dim(1) == b.dim(0), "matmul: inner dims differ, " + shape_str(a.shape()) +
                                  " x " + shape_str(b.shape()));
  const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n);
  detail::gemm(false, false, m, n, k, 1.0, a.data(), k, b.data(), n, 0.0, out.data(), n);
  auto an = a.impl(), bn = b.impl();
  return make_op("matmul", {m, n}, std::move(out), {a, b},
                 [an, bn, m, k, n](Node& self) {
                   const double* dy = self.grad.data();
                   if (an->requires_grad) {
                     auto& g = an->ensure_grad();
                     detail::gemm(false, true, m, k, n, 1.0, dy, n, bn->value.data(), n,
                                  1.0, g.data(), k);
                   }
                   if (bn->requires_grad) {
                     auto& g = bn->ensure_grad();
                     detail::gemm(true, false, k, n, m, 1.0, an->value.data(), k, dy, n,
                                  1.0, g.data(), n);
                   }
                 });
}

Tensor bmm(const Tensor& a, const Tensor& b, bool trans_b) {
  require_defined(a, "bmm");
  require_defined(b, "bmm");
  check(a.ndim() == 3 && b.ndim() == 3, "bmm: expects 3-D tensors, got " +
                                            shape_str(a.shape()) + " and " +
                                            shape_str(b.shape()));
  check(a.dim(0) == b.dim(0), "bmm: batch dims differ, " + shape_str(a.shape()) +
                                  " vs " + shape_str(b.shape()));
  const std::int64_t batch = a.dim(0), m = a.dim(1), k = a.dim(2);
  const std::int64_t n = trans_b ? b.dim(1) : b.dim(2);
  const std::int64_t bk = trans_b ? b.dim(2) : b.dim(1);
  check(bk == k, "bmm: inner dims differ, " + shape_str(a.shape()) +
                     (trans_b ? " x T(" : " x ") + shape_str(b.shape()) +
                     (trans_b ? ")" : ""));
  std::vector<double> out(batch * m * n);
  const double* av = a.data();
  const double* bv = b.data();
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < batch; ++i) {
    detail::gemm(false, trans_b, m, n, k, 1.0, av + i * m * k, k,
                 bv + i * (trans_b ? n * k : k * n), trans_b ? k : n, 0.0,
                 out.data() + i * m * n, n);
  }
  auto an = a.impl(), bn = b.impl();
  return make_op("bmm", {batch, m, n}, std::move(out), {a, b},
                 [an, bn, batch, m, k, n, trans_b](Node& self) {
                   const double* dy = self.grad.data();
                   if (an->requires_grad) {
                     auto& g = an->ensure_grad();
#pragma omp parallel for schedule(static)
                     for (std::int64_t i = 0; i < batch; ++i) {
                       // dA = dY * B (trans_b) or dY * B^T
                       detail::gemm(false, !trans_b, m, k, n, 1.0, dy + i * m * n, n,
                                    bn->value.data() + i * (trans_b ? n * k : k * n),
                                    trans_b ? k : n, 1.0, g.data() + i * m * k, k);
                     }
                   }
                   if (bn->requires_grad) {
                     auto& g = bn->ensure_grad();
#pragma omp parallel for schedule(static)
                     for (std::int64_t i = 0; i < batch; ++i) {
                       if (trans_b) {
                         // dB = dY^T * A  -> (n, k)
                         detail::gemm(true, false, n, k, m, 1.0, dy + i * m * n, n,
                                      an->value.data() + i * m * k, k, 1.0,
                                      g.data() + i * n * k, k);
                       } else {
                         // dB = A^T * dY -> (k, n)
                         detail::gemm(true, false, k, n, m, 1.0,
                                      an->value.data() + i * m * k, k, dy + i * m * n,
                                      n, 1.0, g.data() + i * k * n, n);
                       }
                     }
                   }
                 });
}

Tensor embedding(const Tensor& table, const std::vector<std::int64_t>& ids,
                 Shape ids_shape) {
  require_defined(table, "embedding");
  check(table.ndim() == 2, "embedding: table must be (V, D), got " +
                               shape_str(table.shape()));
  check(shape_numel(ids_shape) == static_cast<std::int64_t>(ids.size()),
        "embedding: ids_shape " + shape_str(ids_shape) + " does not match " +
            std::to_string(ids.size()) + " ids");
  const std::int64_t v = table.dim(0), d = table.dim(1);
  for (auto id : ids) {
    check(id >= 0 && id < v, "embedding: id " + std::to_string(id) +
                                 " out of vocabulary range [0," + std::to_string(v) +
                                 ")");
  }
  std::vector<double> out(ids.size() * static_cast<size_t>(d));
  const double* tv = table.data();
  for (size_t i = 0; i < ids.size(); ++i) {
    std::memcpy(out.data() + i * static_cast<size_t>(d),
                tv + ids[i] * d, static_cast<size_t>(d) * sizeof(double));
  }
  Shape out_shape = std::move(ids_shape);
  out_shape.push_back(d);
  auto tn = table.impl();
  auto ids_copy = std::make_shared<std::vector<std::int64_t>>(ids);
  return make_op("embedding", std::move(out_shape), std::move(out), {table},
                 [tn, ids_copy, d](Node& self) {
                   if (!tn->requires_grad) return;
                   auto& g = tn->ensure_grad();
                   for (size_t i = 0; i < ids_copy->size(); ++i) {
                     const double* src = self.grad.data() + i * static_cast<size_t>(d);
                     double* dst = g.data() + (*ids_copy)[i] * d;
                     for (std::int64_t j = 0; j < d; ++j) dst[j] += src[j];
                   }
                 });
}

// ---------------------------------------------------------------------------
// Spatial
// ---------------------------------------------------------------------------

Tensor avg_pool2d(const Tensor& x, std::int64_t kernel_h, std::int64_t kernel_w) {
  require_defined(x, "avg_pool2d");
  check(x.ndim() == 4, "avg_pool2d: expected NCHW tensor, got " + shape_str(x.shape()));
  const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  check(kernel_h > 0 && kernel_w > 0 && h % kernel_h == 0 && w % kernel_w == 0,
        "avg_pool2d: spatial dims " + std::to_string(h) + "x" + std::to_string(w) +
            " not divisible by kernel " + std::to_string(kernel_h) + "x" +
            std::to_string(kernel_w));
  const std::int64_t oh = h / kernel_h, ow = w / kernel_w;
  const double inv_k = 1.0 / static_cast<double>(kernel_h * kernel_w);
  std::vector<double> out(n * c * oh * ow);
  const double* xv = x.data();
  for (std::int64_t p = 0; p < n * c; ++p) {
    const double* src = xv + p * h * w;
    double* dst = out.data() + p * oh * ow;
    for (std::int64_t oy = 0; oy < oh; ++oy) {
      for (std::int64_t ox = 0; ox < ow; ++ox) {
        double acc = 0.0;
        for (std::int64_t ky = 0; ky < kernel_h; ++ky) {
          const double* row = src + (oy * kernel_h + ky) * w + ox * kernel_w;
          for (std::int64_t kx = 0; kx < kernel_w; ++kx) acc += row[kx];
        }
        dst[oy * ow + ox] = acc * inv_k;
      }
    }
  }
  auto xn = x.impl();
  return make_op("avg_pool2d", {n, c, oh, ow}, std::move(out), {x},
                 [xn, n, c, h, w, oh, ow, kernel_h, kernel_w, inv_k](Node& self) {
                   if (!xn->requires_grad) return;
                   auto& g = xn->ensure_grad();
                   for (std::int64_t p = 0; p < n * c; ++p) {
                     const double* dy = self.grad.data() + p * oh * ow;
                     double* dst = g.data() + p * h * w;
                     for (std::int64_t oy = 0; oy < oh; ++oy) {
                       for (std::int64_t ox = 0; ox < ow; ++ox) {
                         const double v = dy[oy * ow + ox] * inv_k;
                         for (std::int64_t ky = 0; ky < kernel_h; ++ky) {
                           double* row = dst + (oy * kernel_h + ky) * w + ox * kernel_w;
                           for (std::int64_t kx = 0; kx < kernel_w; ++kx) row[kx] += v;
                         }
                       }
                     }
                   }
                 });
}

namespace {

struct BilinearTap {
  std::int64_t lo;
  std::int64_t hi;
  double w_hi;  // weight of hi; lo gets (1 - w_hi)
};

std::vector<BilinearTap> bilinear_taps(std::int64_t in, std::int64_t out) {
  std::vector<BilinearTap> taps(static_cast<size_t>(out));
  for (std::int64_t i = 0; i < out; ++i) {
    double src = (out == 1) ? 0.0
                            : static_cast<double>(i) * static_cast<double>(in - 1) /
                                  static_cast<double>(out - 1);
    auto lo = static_cast<std::int64_t>(std::floor(src));
    lo = std::clamp<std::int64_t>(lo, 0, in - 1);
    const std::int64_t hi = std::min<std::int64_t>(lo + 1, in - 1);
    taps[static_cast<size_t>(i)] = {lo, hi, src - static_cast<double>(lo)};
  }
  return taps;
}

}  // namespace

Tensor bilinear_resize(const Tensor& x, std::int64_t out_h, std::int64_t out_w) {
  require_defined(x, "bilinear_resize");
  check(x.ndim() == 4, "bilinear_resize: expected NCHW tensor, got " +
                           shape_str(x.shape()));
  check(out_h > 0 && out_w > 0, "bilinear_resize: output dims must be positive");
  const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const auto ty = bilinear_taps(h, out_h);
  const auto tx = bilinear_taps(w, out_w);
  std::vector<double> out(n * c * out_h * out_w);
  const double* xv = x.data();
  for (std::int64_t p = 0; p < n * c; ++p) {
    const double* src = xv + p * h * w;
    double* dst = out.data() + p * out_h * out_w;
    for (std::int64_t oy = 0; oy < out_h; ++oy) {
      const auto& yT = ty[static_cast<size_t>(oy)];
      for (std::int64_t ox = 0; ox < out_w; ++ox) {
        const auto& xT = tx[static_cast<size_t>(ox)];
        const double v00 = src[yT.lo * w + xT.lo];
        const double v01 = src[yT.lo * w + xT.hi];
        const double v10 = src[yT.hi * w + xT.lo];
        const double v11 = src[yT.hi * w + xT.hi];
        const double top = v00 * (1.0 - xT.w_hi) + v01 * xT.w_hi;
        const double bot = v10 * (1.0 - xT.w_hi) + v11 * xT.w_hi;
        dst[oy * out_w + ox] = top * (1.0 - yT.w_hi) + bot * yT.w_hi;
      }
    }
  }
  auto xn = x.impl();
  return make_op("bilinear_resize", {n, c, out_h, out_w}, std::move(out), {x},
                 [xn, n, c, h, w, out_h, out_w, ty, tx](Node& self) {
                   if (!xn->requires_grad) return;
                   auto& g = xn->ensure_grad();
                   for (std::int64_t p = 0; p < n * c; ++p) {
                     const double* dy = self.grad.data() + p * out_h * out_w;
                     double* dst = g.data() + p * h * w;
                     for (std::int64_t oy = 0; oy < out_h; ++oy) {
                       const auto& yT = ty[static_cast<size_t>(oy)];
                       for (std::int64_t ox = 0; ox < out_w; ++ox) {
                         const auto& xT = tx[static_cast<size_t>(ox)];
                         const double v = dy[oy * out_w + ox];
                         dst[yT.lo * w + xT.lo] += v * (1.0 - yT.w_hi) * (1.0 - xT.w_hi);
                         dst[yT.lo * w + xT.hi] += v * (1.0 - yT.w_hi) * xT.w_hi;
                         dst[yT.hi * w + xT.lo] += v * yT.w_hi * (1.0 - xT.w_hi);
                         dst[yT.hi * w + xT.hi] += v * yT.w_hi * xT.w_hi;
                       }
                     }
                   }
                 });
}

// ---------------------------------------------------------------------------
// Windowing
// ---------------------------------------------------------------------------

namespace {

void window_copy(const double* src, double* dst, std::int64_t n, std::int64_t c,
                 std::int64_t h, std::int64_t w, std::int64_t win_h,
                 std::int64_t win_w, bool to_windows, bool accumulate) {
  const std::int64_t nh = h / win_h, nw = w / win_w;
  const std::int64_t tokens = win_h * win_w;
#pragma omp parallel for schedule(static) collapse(2)
  for (std::int64_t ni = 0; ni < n; ++ni) {
    for (std::int64_t wy = 0; wy < nh; ++wy) {
      for (std::int64_t wx = 0; wx < nw; ++wx) {
        const std::int64_t b = (ni * nh + wy) * nw + wx;
        for (std::int64_t iy = 0; iy < win_h; ++iy) {
          for (std::int64_t ix = 0; ix < win_w; ++ix) {
            const std::int64_t tok = iy * win_w + ix;
            const std::int64_t y = wy * win_h + iy, x = wx * win_w + ix;
            for (std::int64_t ci = 0; ci < c; ++ci) {
              const std::int64_t map_idx = ((ni * c + ci) * h + y) * w + x;
              const std::int64_t win_idx = (b * tokens + tok) * c + ci;
              if (to_windows) {
                if (accumulate)
                  dst[map_idx] += src[win_idx];
                else
                  dst[win_idx] = src[map_idx];
              } else {
                if (accumulate)
                  dst[win_idx] += src[map_idx];
                else
                  dst[map_idx] = src[win_idx];
              }
            }
          }
        }
      }
    }
  }
}

}  // namespace

Tensor window_partition(const Tensor& fm, std::int64_t win_h, std::int64_t win_w) {
  require_defined(fm, "window_partition");
  check(fm.ndim() == 4, "window_partition: expected NCHW tensor, got " +
                            shape_str(fm.shape()));
  const std::int64_t n = fm.dim(0), c = fm.dim(1), h = fm.dim(2), w = fm.dim(3);
  check(win_h > 0 && win_w > 0 && h % win_h == 0 && w % win_w == 0,
        "window_partition: map " + std::to_string(h) + "x" + std::to_string(w) +
            " not divisible by window " + std::to_string(win_h) + "x" +
            std::to_string(win_w));
  const std::int64_t windows = n * (h / win_h) * (w / win_w);
  const std::int64_t tokens = win_h * win_w;
  std::vector<double> out(windows * tokens * c);
  window_copy(fm.data(), out.data(), n, c, h, w, win_h, win_w, true, false);
  auto xn = fm.impl();
  return make_op("window_partition", {windows, tokens, c}, std::move(out), {fm},
                 [xn, n, c, h, w, win_h, win_w](Node& self) {
                   if (!xn->requires_grad) return;
                   auto& g = xn->ensure_grad();
                   window_copy(self.grad.data(), g.data(), n, c, h, w, win_h, win_w,
                               true, true);
                 });
}

Tensor window_reverse(const Tensor& windows, std::int64_t batch, std::int64_t height,
                      std::int64_t width, std::int64_t win_h, std::int64_t win_w) {
  require_defined(windows, "window_reverse");
  check(windows.ndim() == 3, "window_reverse: expected (windows, tokens, C), got " +
                                 shape_str(windows.shape()));
  check(win_h > 0 && win_w > 0 && height % win_h == 0 && width % win_w == 0,
        "window_reverse: map not divisible by window");
  const std::int64_t c = windows.dim(2);
  const std::int64_t expect = batch * (height / win_h) * (width / win_w);
  check(windows.dim(0) == expect && windows.dim(1) == win_h * win_w,
        "window_reverse: window tensor " + shape_str(windows.shape()) +
            " inconsistent with map " + std::to_string(height) + "x" +
            std::to_string(width) + " and window " + std::to_string(win_h) + "x" +
            std::to_string(win_w));
  std::vector<double> out(batch * c * height * width);
  window_copy(windows.data(), out.data(), batch, c, height, width, win_h, win_w,
              false, false);
  auto xn = windows.impl();
  return make_op("window_reverse", {batch, c, height, width}, std::move(out),
                 {windows}, [xn, batch, c, height, width, win_h, win_w](Node& self) {
                   if (!xn->requires_grad) return;
                   auto& g = xn->ensure_grad();
                   window_copy(self.grad.data(), g.data(), batch, c, height, width,
                               win_h, win_w, false, true);
                 });
}

// ---------------------------------------------------------------------------
// Stochastic depth
// ---------------------------------------------------------------------------

Tensor stochastic_depth(const Tensor& x, double p, bool training, Rng* rng) {
  require_defined(x, "stochastic_depth");
  check(p >= 0.0 && p < 1.0, "stochastic_depth: p must be in [0,1)");
  if (!training || p == 0.0) return x;
  check(rng != nullptr, "stochastic_depth: rng required in training mode");
  const std::int64_t n0 = x.dim(0);
  const std::int64_t inner = x.numel() / n0;
  auto factors = std::make_shared<std::vector<double>>(static_cast<size_t>(n0));
  const double keep_scale = 1.0 / (1.0 - p);
  for (auto& f : *factors) f = rng->bernoulli(p) ? 0.0 : keep_scale;
  std::vector<double> out(x.numel());
  const double* xv = x.data();
  for (std::int64_t i = 0; i < n0; ++i) {
    const double f = (*factors)[static_cast<size_t>(i)];
    const double* src = xv + i * inner;
    double* dst = out.data() + i * inner;
    for (std::int64_t j = 0; j < inner; ++j) dst[j] = src[j] * f;
  }
  auto xn = x.impl();
  return make_op("stochastic_depth", x.shape(), std::move(out), {x},
                 [xn, factors, n0, inner](Node& self) {
                   if (!xn->requires_grad) return;
                   auto& g = xn->ensure_grad();
                   for (std::int64_t i = 0; i < n0; ++i) {
                     const double f = (*factors)[static_cast<size_t>(i)];
                     const double* src = self.grad.data() + i * inner;
                     double* dst = g.data() + i * inner;
                     for (std::int64_t j = 0; j < inner; ++j) dst[j] += src[j] * f;
                   }
                 });
}

}  // namespace docparser
