#include <algorithm>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

#include "docparser/ops.hpp"
#include "gemm.hpp"
#include "op_common.hpp"

namespace docparser {

namespace {

using detail::Node;
using detail::op_check;

struct ConvDims {
  std::int64_t n, c_in, h, w;
  std::int64_t c_out, kh, kw;
  std::int64_t sh, sw, ph, pw, groups;
  std::int64_t oh, ow;
  std::int64_t cg_in, cg_out;  // channels per group
};

enum class ConvPath { Depthwise, Pointwise, Im2col };

// im2col for one (sample, group) over a contiguous range of output columns.
// col is (cg_in * kh * kw) x count, row-major.
void im2col_tile(const double* x, const ConvDims& d, std::int64_t g,
                 std::int64_t col_start, std::int64_t count, double* col) {
  const std::int64_t k_rows = d.cg_in * d.kh * d.kw;
#pragma omp parallel for schedule(static)
  for (std::int64_t r = 0; r < k_rows; ++r) {
    const std::int64_t ci = r / (d.kh * d.kw);
    const std::int64_t ky = (r / d.kw) % d.kh;
    const std::int64_t kx = r % d.kw;
    const double* src = x + (g * d.cg_in + ci) * d.h * d.w;
    double* dst = col + r * count;
    for (std::int64_t t = 0; t < count; ++t) {
      const std::int64_t pos = col_start + t;
      const std::int64_t oy = pos / d.ow, ox = pos % d.ow;
      const std::int64_t y = oy * d.sh - d.ph + ky;
      const std::int64_t xx = ox * d.sw - d.pw + kx;
      dst[t] = (y >= 0 && y < d.h && xx >= 0 && xx < d.w) ? src[y * d.w + xx] : 0.0;
    }
  }
}

// Transpose of im2col: scatter-adds col back into the image gradient.
void col2im_tile(const double* col, const ConvDims& d, std::int64_t g,
                 std::int64_t col_start, std::int64_t count, double* gx) {
  const std::int64_t k_rows = d.cg_in * d.kh * d.kw;
  // Parallel over input channels: each channel's rows scatter disjointly.
#pragma omp parallel for schedule(static)
  for (std::int64_t ci = 0; ci < d.cg_in; ++ci) {
    double* dst = gx + (g * d.cg_in + ci) * d.h * d.w;
    for (std::int64_t rk = 0; rk < d.kh * d.kw; ++rk) {
      const std::int64_t r = ci * d.kh * d.kw + rk;
      const std::int64_t ky = rk / d.kw, kx = rk % d.kw;
      const double* src = col + r * count;
      for (std::int64_t t = 0; t < count; ++t) {
        const std::int64_t pos = col_start + t;
        const std::int64_t oy = pos / d.ow, ox = pos % d.ow;
        const std::int64_t y = oy * d.sh - d.ph + ky;
        const std::int64_t xx = ox * d.sw - d.pw + kx;
        if (y >= 0 && y < d.h && xx >= 0 && xx < d.w) dst[y * d.w + xx] += src[t];
      }
    }
  }
  (void)k_rows;
}

constexpr std::int64_t kColTile = 8192;

void conv_forward_im2col(const double* x, const double* w, std::vector<double>& out,
                         const ConvDims& d) {
  const std::int64_t k_rows = d.cg_in * d.kh * d.kw;
  const std::int64_t spatial = d.oh * d.ow;
  std::vector<double> col(static_cast<size_t>(k_rows * std::min(kColTile, spatial)));
  for (std::int64_t n = 0; n < d.n; ++n) {
    const double* xn = x + n * d.c_in * d.h * d.w;
    for (std::int64_t g = 0; g < d.groups; ++g) {
      const double* wg = w + g * d.cg_out * k_rows;
      for (std::int64_t start = 0; start < spatial; start += kColTile) {
        const std::int64_t count = std::min(kColTile, spatial - start);
        im2col_tile(xn, d, g, start, count, col.data());
        double* dst = out.data() + (n * d.c_out + g * d.cg_out) * spatial + start;
        detail::gemm(false, false, d.cg_out, count, k_rows, 1.0, wg, k_rows,
                     col.data(), count, 0.0, dst, spatial);
      }
    }
  }
}

void conv_backward_im2col(const double* x, const double* w, const double* dy,
                          double* gx, double* gw, const ConvDims& d) {
  const std::int64_t k_rows = d.cg_in * d.kh * d.kw;
  const std::int64_t spatial = d.oh * d.ow;
  const std::int64_t tile = std::min(kColTile, spatial);
  std::vector<double> col(static_cast<size_t>(k_rows * tile));
  std::vector<double> col_grad(gx ? static_cast<size_t>(k_rows * tile) : 0);
  for (std::int64_t n = 0; n < d.n; ++n) {
    const double* xn = x + n * d.c_in * d.h * d.w;
    double* gxn = gx ? gx + n * d.c_in * d.h * d.w : nullptr;
    for (std::int64_t g = 0; g < d.groups; ++g) {
      const double* wg = w + g * d.cg_out * k_rows;
      for (std::int64_t start = 0; start < spatial; start += kColTile) {
        const std::int64_t count = std::min(kColTile, spatial - start);
        const double* dy_blk = dy + (n * d.c_out + g * d.cg_out) * spatial + start;
        if (gw || gxn) im2col_tile(xn, d, g, start, count, col.data());
        if (gw) {
          detail::gemm(false, true, d.cg_out, k_rows, count, 1.0, dy_blk, spatial,
                       col.data(), count, 1.0, gw + g * d.cg_out * k_rows, k_rows);
        }
        if (gxn) {
          detail::gemm(true, false, k_rows, count, d.cg_out, 1.0, wg, k_rows, dy_blk,
                       spatial, 0.0, col_grad.data(), count);
          col2im_tile(col_grad.data(), d, g, start, count, gxn);
        }
      }
    }
  }
}

void conv_forward_depthwise(const double* x, const double* w, std::vector<double>& out,
                            const ConvDims& d) {
  const std::int64_t spatial = d.oh * d.ow;
#pragma omp parallel for schedule(static) collapse(2)
  for (std::int64_t n = 0; n < d.n; ++n) {
    for (std::int64_t c = 0; c < d.c_in; ++c) {
      const double* src = x + (n * d.c_in + c) * d.h * d.w;
      const double* wk = w + c * d.kh * d.kw;
      double* dst = out.data() + (n * d.c_in + c) * spatial;
      std::fill(dst, dst + spatial, 0.0);
      for (std::int64_t oy = 0; oy < d.oh; ++oy) {
        const std::int64_t y0 = oy * d.sh - d.ph;
        double* orow = dst + oy * d.ow;
        for (std::int64_t ky = 0; ky < d.kh; ++ky) {
          const std::int64_t y = y0 + ky;
          if (y < 0 || y >= d.h) continue;
          const double* srow = src + y * d.w;
          const double* wrow = wk + ky * d.kw;
          for (std::int64_t kx = 0; kx < d.kw; ++kx) {
            const double wv = wrow[kx];
            if (wv == 0.0) continue;
            // valid ox range for this tap: 0 <= ox*sw - pw + kx < w
            const std::int64_t shift = kx - d.pw;
            std::int64_t ox_lo = 0, ox_hi = d.ow;
            if (d.sw == 1) {
              ox_lo = std::max<std::int64_t>(0, -shift);
              ox_hi = std::min<std::int64_t>(d.ow, d.w - shift);
              const double* in = srow + shift;
              for (std::int64_t ox = ox_lo; ox < ox_hi; ++ox) {
                orow[ox] += in[ox] * wv;
              }
            } else {
              for (std::int64_t ox = ox_lo; ox < ox_hi; ++ox) {
                const std::int64_t xx = ox * d.sw + shift;
                if (xx >= 0 && xx < d.w) orow[ox] += srow[xx] * wv;
              }
            }
          }
        }
      }
    }
  }
}

void conv_backward_depthwise(const double* x, const double* w, const double* dy,
                             double* gx, double* gw, const ConvDims& d) {
  const std::int64_t spatial = d.oh * d.ow;
#pragma omp parallel for schedule(static)
  for (std::int64_t c = 0; c < d.c_in; ++c) {
    const double* wk = w + c * d.kh * d.kw;
    double* gwk = gw ? gw + c * d.kh * d.kw : nullptr;
    for (std::int64_t n = 0; n < d.n; ++n) {
      const double* src = x + (n * d.c_in + c) * d.h * d.w;
      const double* dyc = dy + (n * d.c_in + c) * spatial;
      double* gxc = gx ? gx + (n * d.c_in + c) * d.h * d.w : nullptr;
      for (std::int64_t oy = 0; oy < d.oh; ++oy) {
        const std::int64_t y0 = oy * d.sh - d.ph;
        for (std::int64_t ox = 0; ox < d.ow; ++ox) {
          const std::int64_t x0 = ox * d.sw - d.pw;
          const double gy = dyc[oy * d.ow + ox];
          for (std::int64_t ky = 0; ky < d.kh; ++ky) {
            const std::int64_t y = y0 + ky;
            if (y < 0 || y >= d.h) continue;
            for (std::int64_t kx = 0; kx < d.kw; ++kx) {
              const std::int64_t xx = x0 + kx;
              if (xx < 0 || xx >= d.w) continue;
              if (gxc) gxc[y * d.w + xx] += wk[ky * d.kw + kx] * gy;
              if (gwk) gwk[ky * d.kw + kx] += src[y * d.w + xx] * gy;
            }
          }
        }
      }
    }
  }
}

void conv_forward_pointwise(const double* x, const double* w, std::vector<double>& out,
                            const ConvDims& d) {
  const std::int64_t spatial = d.h * d.w;
  for (std::int64_t n = 0; n < d.n; ++n) {
    detail::gemm(false, false, d.c_out, spatial, d.c_in, 1.0, w, d.c_in,
                 x + n * d.c_in * spatial, spatial, 0.0,
                 out.data() + n * d.c_out * spatial, spatial);
  }
}

void conv_backward_pointwise(const double* x, const double* w, const double* dy,
                             double* gx, double* gw, const ConvDims& d) {
  const std::int64_t spatial = d.h * d.w;
  for (std::int64_t n = 0; n < d.n; ++n) {
    const double* dyn = dy + n * d.c_out * spatial;
    if (gx) {
      detail::gemm(true, false, d.c_in, spatial, d.c_out, 1.0, w, d.c_in, dyn, spatial,
                   1.0, gx + n * d.c_in * spatial, spatial);
    }
    if (gw) {
      detail::gemm(false, true, d.c_out, d.c_in, spatial, 1.0, dyn, spatial,
                   x + n * d.c_in * spatial, spatial, 1.0, gw, d.c_in);
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              const Conv2dOpts& opts) {
  op_check(input.defined() && weight.defined(), "conv2d: undefined tensor argument");
  op_check(input.ndim() == 4,
           "conv2d: input must be NCHW, got " + shape_str(input.shape()));
  op_check(weight.ndim() == 4,
           "conv2d: weight must be (O, I, kH, kW), got " + shape_str(weight.shape()));
  ConvDims d;
  d.n = input.dim(0);
  d.c_in = input.dim(1);
  d.h = input.dim(2);
  d.w = input.dim(3);
  d.c_out = weight.dim(0);
  d.kh = weight.dim(2);
  d.kw = weight.dim(3);
  d.sh = opts.stride_h;
  d.sw = opts.stride_w;
  d.ph = opts.pad_h;
  d.pw = opts.pad_w;
  d.groups = opts.groups;
  op_check(d.sh > 0 && d.sw > 0 && d.ph >= 0 && d.pw >= 0 && d.groups > 0,
           "conv2d: invalid stride/pad/groups");
  op_check(d.c_in % d.groups == 0,
           "conv2d: in-channels " + std::to_string(d.c_in) +
               " not divisible by groups " + std::to_string(d.groups));
  d.cg_in = d.c_in / d.groups;
  op_check(weight.dim(1) == d.cg_in,
           "conv2d: weight " + shape_str(weight.shape()) + " incompatible with input " +
               shape_str(input.shape()) + " under groups=" + std::to_string(d.groups));
  op_check(d.c_out % d.groups == 0,
           "conv2d: out-channels " + std::to_string(d.c_out) +
               " not divisible by groups " + std::to_string(d.groups));
  d.cg_out = d.c_out / d.groups;
  op_check(d.h + 2 * d.ph >= d.kh && d.w + 2 * d.pw >= d.kw,
           "conv2d: kernel " + std::to_string(d.kh) + "x" + std::to_string(d.kw) +
               " larger than padded input " + shape_str(input.shape()));
  d.oh = (d.h + 2 * d.ph - d.kh) / d.sh + 1;
  d.ow = (d.w + 2 * d.pw - d.kw) / d.sw + 1;
  if (bias.defined()) {
    op_check(bias.numel() == d.c_out, "conv2d: bias " + shape_str(bias.shape()) +
                                          " must have " + std::to_string(d.c_out) +
                                          " elements");
  }

  ConvPath path;
  if (d.groups == d.c_in && d.cg_in == 1 && d.cg_out == 1) {
    path = ConvPath::Depthwise;
  } else if (d.kh == 1 && d.kw == 1 && d.sh == 1 && d.sw == 1 && d.ph == 0 &&
             d.pw == 0 && d.groups == 1) {
    path = ConvPath::Pointwise;
  } else {
    path = ConvPath::Im2col;
  }

  std::vector<double> out(d.n * d.c_out * d.oh * d.ow);
  switch (path) {
    case ConvPath::Depthwise:
      conv_forward_depthwise(input.data(), weight.data(), out, d);
      break;
    case ConvPath::Pointwise:
      conv_forward_pointwise(input.data(), weight.data(), out, d);
      break;
    case ConvPath::Im2col:
      conv_forward_im2col(input.data(), weight.data(), out, d);
      break;
  }
  if (bias.defined()) {
    const double* bv = bias.data();
    const std::int64_t spatial = d.oh * d.ow;
    for (std::int64_t n = 0; n < d.n; ++n) {
      for (std::int64_t c = 0; c < d.c_out; ++c) {
        double* dst = out.data() + (n * d.c_out + c) * spatial;
        const double b = bv[c];
        for (std::int64_t i = 0; i < spatial; ++i) dst[i] += b;
      }
    }
  }

  auto xn = input.impl();
  auto wn = weight.impl();
  auto bn = bias.defined() ? bias.impl() : nullptr;
  std::vector<Tensor> inputs{input, weight};
  if (bias.defined()) inputs.push_back(bias);

  return detail::make_op(
      "conv2d", {d.n, d.c_out, d.oh, d.ow}, std::move(out), inputs,
      [xn, wn, bn, d, path](Node& self) {
        const double* dy = self.grad.data();
        double* gx = xn->requires_grad ? xn->ensure_grad().data() : nullptr;
        double* gw = wn->requires_grad ? wn->ensure_grad().data() : nullptr;
        if (gx || gw) {
          switch (path) {
            case ConvPath::Depthwise:
              conv_backward_depthwise(xn->value.data(), wn->value.data(), dy, gx, gw, d);
              break;
            case ConvPath::Pointwise:
              conv_backward_pointwise(xn->value.data(), wn->value.data(), dy, gx, gw, d);
              break;
            case ConvPath::Im2col:
              conv_backward_im2col(xn->value.data(), wn->value.data(), dy, gx, gw, d);
              break;
          }
        }
        if (bn && bn->requires_grad) {
          auto& gb = bn->ensure_grad();
          const std::int64_t spatial = d.oh * d.ow;
          for (std::int64_t n = 0; n < d.n; ++n) {
            for (std::int64_t c = 0; c < d.c_out; ++c) {
              const double* row = dy + (n * d.c_out + c) * spatial;
              double acc = 0.0;
              for (std::int64_t i = 0; i < spatial; ++i) acc += row[i];
              gb[static_cast<size_t>(c)] += acc;
            }
          }
        }
      });
}

}  // namespace docparser
