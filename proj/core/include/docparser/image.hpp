#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "docparser/tensor.hpp"

namespace docparser {

/// Planar RGB image, channel-major (3 x h x w), values in [0, 1].
struct Image {
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::vector<double> data;  // 3 * height * width

  static Image filled(std::int64_t h, std::int64_t w, double value);
  double& at(std::int64_t c, std::int64_t y, std::int64_t x) {
    return data[static_cast<size_t>((c * height + y) * width + x)];
  }
  double at(std::int64_t c, std::int64_t y, std::int64_t x) const {
    return data[static_cast<size_t>((c * height + y) * width + x)];
  }
};

/// Binary 8-bit PPM (P6). Lossless for the 256-level quantisation used on
/// disk; values round-trip exactly after one write+read cycle.
void write_ppm(const std::string& path, const Image& img);
Image read_ppm(const std::string& path);

Image resize_bilinear(const Image& img, std::int64_t out_h, std::int64_t out_w);
/// Rotation about the image centre; areas from outside are filled.
Image rotate(const Image& img, double degrees, double fill);
/// Scales to fit (out_h, out_w) preserving aspect ratio, pads with fill.
Image fit_pad(const Image& img, std::int64_t out_h, std::int64_t out_w, double fill);

Image adjust_brightness(const Image& img, double factor);
Image adjust_saturation(const Image& img, double factor);
Image adjust_contrast(const Image& img, double factor);
void clamp01(Image& img);

/// (1, 3, H, W) tensor for model input.
Tensor image_to_tensor(const Image& img);
Tensor images_to_tensor(const std::vector<Image>& imgs);
Image tensor_to_image(const Tensor& t);  // (3,H,W) or (1,3,H,W)

}  // namespace docparser
