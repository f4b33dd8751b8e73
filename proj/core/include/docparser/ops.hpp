#pragma once

#include <cstdint>
#include <vector>

#include "docparser/tensor.hpp"

namespace docparser {

// Elementwise ----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
Tensor gelu(const Tensor& x);

/// a + b with b broadcast over the leading dimension of a
/// (b.shape must equal a.shape[1:]).
Tensor add_bias_nd(const Tensor& a, const Tensor& b);

// Shape ----------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::int64_t>& dims);
Tensor narrow(const Tensor& x, std::int64_t axis, std::int64_t start,
              std::int64_t length);
Tensor concat(const std::vector<Tensor>& parts, std::int64_t axis);
/// Cyclic shift of a NCHW map along H and W. Positive shifts move content
/// toward higher indices.
Tensor roll2d(const Tensor& x, std::int64_t shift_h, std::int64_t shift_w);

// Reductions -----------------------------------------------------------

Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);

// Normalisation / activation over structured axes -----------------------

/// Layer normalisation over the last dimension.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-6);
/// Layer normalisation over the channel axis of an NCHW tensor.
Tensor layer_norm_chw(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                      double eps = 1e-6);

Tensor softmax(const Tensor& x, std::int64_t axis);

/// Softmax over the last dim of scores (B, S, T) with an optional additive
/// mask (M, S, T); row b of the batch uses mask slice (b / heads) % M.
/// Pass an undefined mask for plain softmax.
Tensor masked_softmax_lastdim(const Tensor& scores, const Tensor& mask,
                              std::int64_t heads);

/// Mean negative log-likelihood of targets under logits (N, V). Positions
/// whose target equals ignore_index do not contribute. Throws if every
/// position is ignored.
Tensor softmax_cross_entropy(const Tensor& logits,
                             const std::vector<std::int64_t>& targets,
                             std::int64_t ignore_index = -1);

// Linear algebra --------------------------------------------------------

/// x (..., D_in) -> (..., D_out) with weight (D_out, D_in), optional bias.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);
Tensor matmul(const Tensor& a, const Tensor& b);
/// Batched matmul: a (B, M, K) x b (B, K, N) -> (B, M, N); trans_b treats
/// b as (B, N, K).
Tensor bmm(const Tensor& a, const Tensor& b, bool trans_b = false);

/// Lookup rows of table (V, D) at ids; output shape ids_shape + [D].
/// Gradient scatters into the table.
Tensor embedding(const Tensor& table, const std::vector<std::int64_t>& ids,
                 Shape ids_shape);

// Convolution / spatial --------------------------------------------------

struct Conv2dOpts {
  std::int64_t stride_h = 1;
  std::int64_t stride_w = 1;
  std::int64_t pad_h = 0;
  std::int64_t pad_w = 0;
  std::int64_t groups = 1;
};

/// input (N, C_in, H, W), weight (C_out, C_in/groups, kH, kW),
/// optional bias (C_out).
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              const Conv2dOpts& opts);

/// Non-overlapping average pooling; H, W must divide exactly.
Tensor avg_pool2d(const Tensor& x, std::int64_t kernel_h, std::int64_t kernel_w);

/// Bilinear resample of an NCHW (or CHW) tensor to (out_h, out_w),
/// align-corners convention.
Tensor bilinear_resize(const Tensor& x, std::int64_t out_h, std::int64_t out_w);

// Windowed attention support ---------------------------------------------

/// (N, C, h, w) -> (N * h/win_h * w/win_w, win_h*win_w, C), windows in
/// row-major order, tokens row-major within the window. Exact inverse of
/// window_reverse.
Tensor window_partition(const Tensor& fm, std::int64_t win_h, std::int64_t win_w);
Tensor window_reverse(const Tensor& windows, std::int64_t batch, std::int64_t height,
                      std::int64_t width, std::int64_t win_h, std::int64_t win_w);

// Regularisation ----------------------------------------------------------

/// Residual-branch gate: during training each sample along dim 0 is dropped
/// with probability p and survivors are rescaled by 1/(1-p); identity at
/// eval time.
Tensor stochastic_depth(const Tensor& x, double p, bool training, Rng* rng);

}  // namespace docparser
