#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "docparser/attention.hpp"
#include "docparser/ops.hpp"
#include "docparser/tensor.hpp"

namespace docparser {

struct EncoderConfig {
  // C0..C5 channel widths.
  std::vector<std::int64_t> channels{64, 128, 256, 512, 768, 1024};
  std::vector<std::int64_t> blocks_per_stage{3, 6, 6, 2, 2, 2};
  std::int64_t conv_kernel = 7;
  // (win_h, win_w) for the three windowed-attention stages.
  std::vector<std::pair<std::int64_t, std::int64_t>> window_sizes{
      {5, 40}, {5, 20}, {10, 10}};
  std::vector<std::int64_t> num_heads{8, 12, 16};
  double stochastic_depth_p = 0.1;
  bool use_shifted_windows = true;
  // Grid of the learned positional embedding: stage-3 output at the
  // configured training resolution, i.e. (H/32, W/8). Resized bilinearly
  // when the runtime grid differs.
  std::int64_t pos_rows = 50;
  std::int64_t pos_cols = 120;

  void validate() const;
  /// All resolution constraints violated by an HxW input; empty when valid.
  std::vector<std::string> resolution_errors(std::int64_t h, std::int64_t w) const;
};

struct FeatureMap {
  Tensor tensor;   // (N, C, h, w)
  int stage = 0;   // 0 after patch embedding, i after stage i
};

/// Six-stage image encoder: patch embedding, three convolutional stages
/// that shrink height (and finally width), a learned positional embedding,
/// then three windowed-attention stages that shrink width. Output grid is
/// (H/32, W/32) at C5 channels.
class VisionEncoder {
 public:
  VisionEncoder() = default;
  VisionEncoder(EncoderConfig cfg, Rng& rng);

  FeatureMap patch_embed(const Tensor& image) const;
  FeatureMap convnext_stage(const FeatureMap& fm, int stage_idx,
                            bool training = false, Rng* rng = nullptr) const;
  FeatureMap swin_stage(const FeatureMap& fm, int stage_idx, bool training = false,
                        Rng* rng = nullptr) const;
  /// Adds the positional embedding to a stage-3 output map.
  Tensor add_positional(const Tensor& x) const;

  FeatureMap encode(const Tensor& image, bool training = false,
                    Rng* rng = nullptr) const;

  const EncoderConfig& config() const { return cfg_; }
  void collect_params(const std::string& prefix, std::vector<Parameter>& out);

 private:
  struct Norm {
    Tensor gamma, beta;
  };
  struct ConvNextBlock {
    Tensor dw_w, dw_b;
    Norm norm;
    Tensor pw1_w, pw1_b, pw2_w, pw2_b;
    double drop_p = 0.0;
  };
  struct Downsample {
    Norm norm;
    Tensor w, b;
    std::int64_t stride_h = 1, stride_w = 1;
  };
  struct SwinBlock {
    Norm norm1;
    MultiHeadAttention attn;
    Norm norm2;
    Tensor mlp1_w, mlp1_b, mlp2_w, mlp2_b;
    double drop_p = 0.0;
    bool shifted = false;
  };
  struct ConvStage {
    std::vector<ConvNextBlock> blocks;
    Downsample down;
  };
  struct SwinStage {
    std::vector<SwinBlock> blocks;
    std::optional<Downsample> down;
    std::int64_t win_h = 0, win_w = 0, heads = 1;
  };

  Tensor apply_downsample(const Tensor& x, const Downsample& d) const;
  Tensor swin_block_forward(const Tensor& x, const SwinBlock& blk,
                            const SwinStage& stage, bool training, Rng* rng) const;

  Tensor patch_conv1_w_, patch_conv1_b_;
  Norm patch_norm_;
  Tensor patch_conv2_w_, patch_conv2_b_;
  std::array<ConvStage, 3> conv_stages_;
  Tensor pos_embed_;  // (C3, pos_rows, pos_cols)
  std::array<SwinStage, 3> swin_stages_;
  Norm final_norm_;  // channel norm on the stage-6 output, Swin-style
  EncoderConfig cfg_;
};

/// Additive attention mask for a cyclically shifted window grid: windows
/// that mix wrapped and non-wrapped content get -1e30 on cross-region
/// pairs. Shape (num_windows, win_h*win_w, win_h*win_w).
Tensor shifted_window_mask(std::int64_t h, std::int64_t w, std::int64_t win_h,
                           std::int64_t win_w, std::int64_t shift_h,
                           std::int64_t shift_w);

}  // namespace docparser
