#include "docparser/encoder.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace docparser {

namespace {

void cfg_check(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument("encoder config: " + msg);
}

std::int64_t ceil_half(std::int64_t v) { return (v + 1) / 2; }

}  // namespace

void EncoderConfig::validate() const {
  cfg_check(channels.size() == 6, "expected 6 channel widths C0..C5");
  cfg_check(blocks_per_stage.size() == 6, "expected 6 per-stage block counts");
  cfg_check(window_sizes.size() == 3, "expected 3 window sizes");
  cfg_check(num_heads.size() == 3, "expected 3 head counts");
  for (auto c : channels) cfg_check(c > 0, "channel widths must be positive");
  cfg_check(channels[0] % 2 == 0, "C0 must be even (patch embedding uses C0/2)");
  for (auto b : blocks_per_stage) cfg_check(b > 0, "block counts must be positive");
  for (auto [wh, ww] : window_sizes)
    cfg_check(wh > 0 && ww > 0, "window dims must be positive");
  for (size_t i = 0; i < 3; ++i) {
    cfg_check(channels[i + 3] % num_heads[i] == 0,
              "stage " + std::to_string(i + 4) + " channels not divisible by heads");
  }
  cfg_check(conv_kernel > 0 && conv_kernel % 2 == 1, "conv kernel must be odd");
  cfg_check(stochastic_depth_p >= 0.0 && stochastic_depth_p < 1.0,
            "stochastic depth probability must be in [0,1)");
  cfg_check(pos_rows > 0 && pos_cols > 0, "positional grid must be positive");
}

std::vector<std::string> EncoderConfig::resolution_errors(std::int64_t h,
                                                          std::int64_t w) const {
  std::vector<std::string> errs;
  auto req = [&](bool ok, const std::string& what) {
    if (!ok) errs.push_back(what);
  };
  req(h > 0 && w > 0, "H and W must be positive");
  if (h <= 0 || w <= 0) return errs;
  req(h % 32 == 0, "H=" + std::to_string(h) + " must be divisible by 32");
  req(w % 32 == 0, "W=" + std::to_string(w) + " must be divisible by 32");
  if (h % 32 || w % 32) return errs;
  const std::int64_t gh = h / 32;
  // Attention-stage grids: heights all H/32; widths W/8, W/16, W/32.
  const std::int64_t gw[3] = {w / 8, w / 16, w / 32};
  for (int i = 0; i < 3; ++i) {
    const auto [wh, ww] = window_sizes[static_cast<size_t>(i)];
    req(gh % wh == 0, "H/32=" + std::to_string(gh) + " must be divisible by win_h=" +
                          std::to_string(wh) + " (stage " + std::to_string(i + 4) + ")");
    req(gw[i] % ww == 0, "W/" + std::to_string(8 << i) + "=" + std::to_string(gw[i]) +
                             " must be divisible by win_w=" + std::to_string(ww) +
                             " (stage " + std::to_string(i + 4) + ")");
  }
  return errs;
}

Tensor shifted_window_mask(std::int64_t h, std::int64_t w, std::int64_t win_h,
                           std::int64_t win_w, std::int64_t shift_h,
                           std::int64_t shift_w) {
  // Region labels in shifted coordinates; slices follow the window grid so
  // that every label spans one contiguous pre-shift segment.
  auto region = [](std::int64_t pos, std::int64_t size, std::int64_t win,
                   std::int64_t shift) -> std::int64_t {
    if (shift == 0) return 0;
    if (pos < size - win) return 0;
    if (pos < size - shift) return 1;
    return 2;
  };
  const std::int64_t nh = h / win_h, nw = w / win_w;
  const std::int64_t tokens = win_h * win_w;
  std::vector<double> mask(static_cast<size_t>(nh * nw * tokens * tokens), 0.0);
  std::vector<std::int64_t> labels(static_cast<size_t>(tokens));
  for (std::int64_t wy = 0; wy < nh; ++wy) {
    for (std::int64_t wx = 0; wx < nw; ++wx) {
      for (std::int64_t iy = 0; iy < win_h; ++iy) {
        for (std::int64_t ix = 0; ix < win_w; ++ix) {
          const std::int64_t y = wy * win_h + iy, x = wx * win_w + ix;
          labels[static_cast<size_t>(iy * win_w + ix)] =
              region(y, h, win_h, shift_h) * 3 + region(x, w, win_w, shift_w);
        }
      }
      double* mw = mask.data() + (wy * nw + wx) * tokens * tokens;
      for (std::int64_t i = 0; i < tokens; ++i) {
        for (std::int64_t j = 0; j < tokens; ++j) {
          if (labels[static_cast<size_t>(i)] != labels[static_cast<size_t>(j)]) {
            mw[i * tokens + j] = -1e30;
          }
        }
      }
    }
  }
  return Tensor::from_data({nh * nw, tokens, tokens}, std::move(mask));
}

VisionEncoder::VisionEncoder(EncoderConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
  cfg_.validate();
  const auto& ch = cfg_.channels;
  const std::int64_t k = cfg_.conv_kernel;

  patch_conv1_w_ = Tensor::he_normal({ch[0] / 2, 3, 3, 3}, rng, 3 * 9);
  patch_conv1_b_ = Tensor::zeros({ch[0] / 2}, true);
  patch_norm_ = {Tensor::ones({ch[0] / 2}, true), Tensor::zeros({ch[0] / 2}, true)};
  patch_conv2_w_ = Tensor::he_normal({ch[0], ch[0] / 2, 3, 3}, rng, ch[0] / 2 * 9);
  patch_conv2_b_ = Tensor::zeros({ch[0]}, true);

  std::int64_t total_blocks = 0;
  for (auto b : cfg_.blocks_per_stage) total_blocks += b;
  std::int64_t block_idx = 0;
  auto drop_for = [&](std::int64_t idx) {
    return total_blocks > 1 ? cfg_.stochastic_depth_p * double(idx) /
                                  double(total_blocks - 1)
                            : 0.0;
  };

  // Stages 1-3: residual blocks of depthwise conv + pointwise MLP, then a
  // strided downsampling conv. Stages 1-2 halve height only; stage 3 halves
  // both height and width.
  for (int s = 0; s < 3; ++s) {
    const std::int64_t c = ch[static_cast<size_t>(s)];
    const std::int64_t c_next = ch[static_cast<size_t>(s) + 1];
    ConvStage stage;
    for (std::int64_t b = 0; b < cfg_.blocks_per_stage[static_cast<size_t>(s)]; ++b) {
      ConvNextBlock blk;
      blk.dw_w = Tensor::he_normal({c, 1, k, k}, rng, k * k);
      blk.dw_b = Tensor::zeros({c}, true);
      blk.norm = {Tensor::ones({c}, true), Tensor::zeros({c}, true)};
      blk.pw1_w = Tensor::he_normal({4 * c, c, 1, 1}, rng, c);
      blk.pw1_b = Tensor::zeros({4 * c}, true);
      blk.pw2_w = Tensor::he_normal({c, 4 * c, 1, 1}, rng, 4 * c);
      blk.pw2_b = Tensor::zeros({c}, true);
      blk.drop_p = drop_for(block_idx++);
      stage.blocks.push_back(std::move(blk));
    }
    stage.down.norm = {Tensor::ones({c}, true), Tensor::zeros({c}, true)};
    stage.down.stride_h = 2;
    stage.down.stride_w = (s == 2) ? 2 : 1;
    stage.down.w =
        Tensor::he_normal({c_next, c, stage.down.stride_h, stage.down.stride_w}, rng,
                          c * stage.down.stride_h * stage.down.stride_w);
    stage.down.b = Tensor::zeros({c_next}, true);
    conv_stages_[static_cast<size_t>(s)] = std::move(stage);
  }

  pos_embed_ = Tensor::randn({ch[3], cfg_.pos_rows, cfg_.pos_cols}, rng, 0.02, true);

  // Stages 4-6: windowed attention blocks; stages 4-5 halve width afterwards.
  for (int s = 0; s < 3; ++s) {
    const std::int64_t c = ch[static_cast<size_t>(s) + 3];
    SwinStage stage;
    stage.win_h = cfg_.window_sizes[static_cast<size_t>(s)].first;
    stage.win_w = cfg_.window_sizes[static_cast<size_t>(s)].second;
    stage.heads = cfg_.num_heads[static_cast<size_t>(s)];
    for (std::int64_t b = 0; b < cfg_.blocks_per_stage[static_cast<size_t>(s) + 3];
         ++b) {
      SwinBlock blk;
      blk.norm1 = {Tensor::ones({c}, true), Tensor::zeros({c}, true)};
      blk.attn = MultiHeadAttention(c, stage.heads, rng);
      blk.norm2 = {Tensor::ones({c}, true), Tensor::zeros({c}, true)};
      blk.mlp1_w = Tensor::xavier_normal({4 * c, c}, rng, c, 4 * c);
      blk.mlp1_b = Tensor::zeros({4 * c}, true);
      blk.mlp2_w = Tensor::xavier_normal({c, 4 * c}, rng, 4 * c, c);
      blk.mlp2_b = Tensor::zeros({c}, true);
      blk.drop_p = drop_for(block_idx++);
      blk.shifted = cfg_.use_shifted_windows && (b % 2 == 1);
      stage.blocks.push_back(std::move(blk));
    }
    if (s < 2) {
      const std::int64_t c_next = ch[static_cast<size_t>(s) + 4];
      Downsample down;
      down.norm = {Tensor::ones({c}, true), Tensor::zeros({c}, true)};
      down.stride_h = 1;
      down.stride_w = 2;
      down.w = Tensor::he_normal({c_next, c, 1, 2}, rng, c * 2);
      down.b = Tensor::zeros({c_next}, true);
      stage.down = std::move(down);
    }
    swin_stages_[static_cast<size_t>(s)] = std::move(stage);
  }
  final_norm_ = {Tensor::ones({ch[5]}, true), Tensor::zeros({ch[5]}, true)};
}

FeatureMap VisionEncoder::patch_embed(const Tensor& image) const {
  if (image.ndim() != 4 || image.dim(1) != 3) {
    throw std::invalid_argument("patch_embed: expected (N,3,H,W) image, got " +
                                shape_str(image.shape()));
  }
  const std::int64_t h = image.dim(2), w = image.dim(3);
  if (h % 4 != 0 || w % 4 != 0) {
    throw std::invalid_argument("patch_embed: H and W must be divisible by 4, got " +
                                std::to_string(h) + "x" + std::to_string(w));
  }
  Tensor x = conv2d(image, patch_conv1_w_, patch_conv1_b_,
                    {.stride_h = 2, .stride_w = 2, .pad_h = 1, .pad_w = 1});
  x = layer_norm_chw(x, patch_norm_.gamma, patch_norm_.beta);
  x = conv2d(x, patch_conv2_w_, patch_conv2_b_,
             {.stride_h = 2, .stride_w = 2, .pad_h = 1, .pad_w = 1});
  return {x, 0};
}

Tensor VisionEncoder::apply_downsample(const Tensor& x, const Downsample& d) const {
  Tensor t = layer_norm_chw(x, d.norm.gamma, d.norm.beta);
  return conv2d(t, d.w, d.b, {.stride_h = d.stride_h, .stride_w = d.stride_w});
}

FeatureMap VisionEncoder::convnext_stage(const FeatureMap& fm, int stage_idx,
                                         bool training, Rng* rng) const {
  if (stage_idx < 1 || stage_idx > 3) {
    throw std::invalid_argument("convnext_stage: stage_idx must be 1..3");
  }
  if (fm.stage != stage_idx - 1) {
    throw std::invalid_argument("convnext_stage: stage " + std::to_string(stage_idx) +
                                " expects a stage-" + std::to_string(stage_idx - 1) +
                                " map, got stage " + std::to_string(fm.stage));
  }
  const auto& stage = conv_stages_[static_cast<size_t>(stage_idx - 1)];
  const std::int64_t c = cfg_.channels[static_cast<size_t>(stage_idx - 1)];
  if (fm.tensor.dim(1) != c) {
    throw std::invalid_argument("convnext_stage: expected " + std::to_string(c) +
                                " channels, got " + shape_str(fm.tensor.shape()));
  }
  const std::int64_t pad = (cfg_.conv_kernel - 1) / 2;
  Tensor x = fm.tensor;
  for (const auto& blk : stage.blocks) {
    Tensor t = conv2d(x, blk.dw_w, blk.dw_b,
                      {.pad_h = pad, .pad_w = pad, .groups = c});
    t = layer_norm_chw(t, blk.norm.gamma, blk.norm.beta);
    t = conv2d(t, blk.pw1_w, blk.pw1_b, {});
    t = gelu(t);
    t = conv2d(t, blk.pw2_w, blk.pw2_b, {});
    x = add(x, stochastic_depth(t, blk.drop_p, training, rng));
  }
  return {apply_downsample(x, stage.down), stage_idx};
}

Tensor VisionEncoder::add_positional(const Tensor& x) const {
  const std::int64_t h = x.dim(2), w = x.dim(3);
  Tensor pos = pos_embed_;
  if (h != cfg_.pos_rows || w != cfg_.pos_cols) {
    pos = reshape(pos, {1, cfg_.channels[3], cfg_.pos_rows, cfg_.pos_cols});
    pos = bilinear_resize(pos, h, w);
    pos = reshape(pos, {cfg_.channels[3], h, w});
  }
  return add_bias_nd(x, pos);
}

Tensor VisionEncoder::swin_block_forward(const Tensor& x, const SwinBlock& blk,
                                         const SwinStage& stage, bool training,
                                         Rng* rng) const {
  const std::int64_t n = x.dim(0), h = x.dim(2), w = x.dim(3);
  const std::int64_t sh = blk.shifted && stage.win_h > 1 ? ceil_half(stage.win_h) : 0;
  const std::int64_t sw = blk.shifted && stage.win_w > 1 ? ceil_half(stage.win_w) : 0;
  const bool do_shift = sh > 0 || sw > 0;

  Tensor shortcut = x;
  Tensor t = do_shift ? roll2d(x, -sh, -sw) : x;
  Tensor wnd = window_partition(t, stage.win_h, stage.win_w);
  Tensor normed = layer_norm(wnd, blk.norm1.gamma, blk.norm1.beta);
  Tensor mask;
  if (do_shift) mask = shifted_window_mask(h, w, stage.win_h, stage.win_w, sh, sw);
  Tensor attn = blk.attn.forward(normed, normed, mask);
  Tensor y = window_reverse(attn, n, h, w, stage.win_h, stage.win_w);
  if (do_shift) y = roll2d(y, sh, sw);
  Tensor out = add(shortcut, stochastic_depth(y, blk.drop_p, training, rng));

  Tensor wnd2 = window_partition(out, stage.win_h, stage.win_w);
  Tensor normed2 = layer_norm(wnd2, blk.norm2.gamma, blk.norm2.beta);
  Tensor m = linear(gelu(linear(normed2, blk.mlp1_w, blk.mlp1_b)), blk.mlp2_w,
                    blk.mlp2_b);
  Tensor y2 = window_reverse(m, n, h, w, stage.win_h, stage.win_w);
  return add(out, stochastic_depth(y2, blk.drop_p, training, rng));
}

FeatureMap VisionEncoder::swin_stage(const FeatureMap& fm, int stage_idx,
                                     bool training, Rng* rng) const {
  if (stage_idx < 4 || stage_idx > 6) {
    throw std::invalid_argument("swin_stage: stage_idx must be 4..6");
  }
  if (fm.stage != stage_idx - 1) {
    throw std::invalid_argument("swin_stage: stage " + std::to_string(stage_idx) +
                                " expects a stage-" + std::to_string(stage_idx - 1) +
                                " map, got stage " + std::to_string(fm.stage));
  }
  const auto& stage = swin_stages_[static_cast<size_t>(stage_idx - 4)];
  const std::int64_t c = cfg_.channels[static_cast<size_t>(stage_idx - 1)];
  if (fm.tensor.dim(1) != c) {
    throw std::invalid_argument("swin_stage: expected " + std::to_string(c) +
                                " channels, got " + shape_str(fm.tensor.shape()));
  }
  const std::int64_t h = fm.tensor.dim(2), w = fm.tensor.dim(3);
  if (h % stage.win_h != 0 || w % stage.win_w != 0) {
    throw std::invalid_argument(
        "swin_stage: map " + std::to_string(h) + "x" + std::to_string(w) +
        " not divisible by window " + std::to_string(stage.win_h) + "x" +
        std::to_string(stage.win_w) + " (stage " + std::to_string(stage_idx) + ")");
  }
  Tensor x = fm.tensor;
  for (const auto& blk : stage.blocks) {
    x = swin_block_forward(x, blk, stage, training, rng);
  }
  if (stage.down) x = apply_downsample(x, *stage.down);
  return {x, stage_idx};
}

FeatureMap VisionEncoder::encode(const Tensor& image, bool training, Rng* rng) const {
  if (image.ndim() != 4 || image.dim(1) != 3) {
    throw std::invalid_argument("encode: expected (N,3,H,W) image, got " +
                                shape_str(image.shape()));
  }
  auto errs = cfg_.resolution_errors(image.dim(2), image.dim(3));
  if (!errs.empty()) {
    std::ostringstream os;
    os << "encode: invalid input resolution " << image.dim(2) << "x" << image.dim(3)
       << ":";
    for (const auto& e : errs) os << "\n  - " << e;
    throw std::invalid_argument(os.str());
  }
  FeatureMap fm = patch_embed(image);
  fm = convnext_stage(fm, 1, training, rng);
  fm = convnext_stage(fm, 2, training, rng);
  fm = convnext_stage(fm, 3, training, rng);
  fm.tensor = add_positional(fm.tensor);
  fm = swin_stage(fm, 4, training, rng);
  fm = swin_stage(fm, 5, training, rng);
  fm = swin_stage(fm, 6, training, rng);
  fm.tensor = layer_norm_chw(fm.tensor, final_norm_.gamma, final_norm_.beta);
  return fm;
}

void VisionEncoder::collect_params(const std::string& prefix,
                                   std::vector<Parameter>& out) {
  out.push_back({prefix + ".patch.conv1.weight", patch_conv1_w_});
  out.push_back({prefix + ".patch.conv1.bias", patch_conv1_b_});
  out.push_back({prefix + ".patch.norm.gamma", patch_norm_.gamma});
  out.push_back({prefix + ".patch.norm.beta", patch_norm_.beta});
  out.push_back({prefix + ".patch.conv2.weight", patch_conv2_w_});
  out.push_back({prefix + ".patch.conv2.bias", patch_conv2_b_});
  for (int s = 0; s < 3; ++s) {
    auto& stage = conv_stages_[static_cast<size_t>(s)];
    const std::string sp = prefix + ".stage" + std::to_string(s + 1);
    for (size_t b = 0; b < stage.blocks.size(); ++b) {
      auto& blk = stage.blocks[b];
      const std::string bp = sp + ".block" + std::to_string(b);
      out.push_back({bp + ".dwconv.weight", blk.dw_w});
      out.push_back({bp + ".dwconv.bias", blk.dw_b});
      out.push_back({bp + ".norm.gamma", blk.norm.gamma});
      out.push_back({bp + ".norm.beta", blk.norm.beta});
      out.push_back({bp + ".pw1.weight", blk.pw1_w});
      out.push_back({bp + ".pw1.bias", blk.pw1_b});
      out.push_back({bp + ".pw2.weight", blk.pw2_w});
      out.push_back({bp + ".pw2.bias", blk.pw2_b});
    }
    out.push_back({sp + ".down.norm.gamma", stage.down.norm.gamma});
    out.push_back({sp + ".down.norm.beta", stage.down.norm.beta});
    out.push_back({sp + ".down.conv.weight", stage.down.w});
    out.push_back({sp + ".down.conv.bias", stage.down.b});
  }
  out.push_back({prefix + ".pos_embed", pos_embed_});
  for (int s = 0; s < 3; ++s) {
    auto& stage = swin_stages_[static_cast<size_t>(s)];
    const std::string sp = prefix + ".stage" + std::to_string(s + 4);
    for (size_t b = 0; b < stage.blocks.size(); ++b) {
      auto& blk = stage.blocks[b];
      const std::string bp = sp + ".block" + std::to_string(b);
      out.push_back({bp + ".norm1.gamma", blk.norm1.gamma});
      out.push_back({bp + ".norm1.beta", blk.norm1.beta});
      blk.attn.collect_params(bp + ".attn", out);
      out.push_back({bp + ".norm2.gamma", blk.norm2.gamma});
      out.push_back({bp + ".norm2.beta", blk.norm2.beta});
      out.push_back({bp + ".mlp1.weight", blk.mlp1_w});
      out.push_back({bp + ".mlp1.bias", blk.mlp1_b});
      out.push_back({bp + ".mlp2.weight", blk.mlp2_w});
      out.push_back({bp + ".mlp2.bias", blk.mlp2_b});
    }
    if (stage.down) {
      out.push_back({sp + ".down.norm.gamma", stage.down->norm.gamma});
      out.push_back({sp + ".down.norm.beta", stage.down->norm.beta});
      out.push_back({sp + ".down.conv.weight", stage.down->w});
      out.push_back({sp + ".down.conv.bias", stage.down->b});
    }
  }
  out.push_back({prefix + ".final_norm.gamma", final_norm_.gamma});
  out.push_back({prefix + ".final_norm.beta", final_norm_.beta});
}

}  // namespace docparser
