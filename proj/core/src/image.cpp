#include "docparser/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace docparser {

Image Image::filled(std::int64_t h, std::int64_t w, double value) {
  Image img;
  img.height = h;
  img.width = w;
  img.data.assign(static_cast<size_t>(3 * h * w), value);
  return img;
}

void write_ppm(const std::string& path, const Image& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write image file '" + path + "'");
  out << "P6\n" << img.width << " " << img.height << "\n255\n";
  std::vector<unsigned char> row(static_cast<size_t>(img.width) * 3);
  for (std::int64_t y = 0; y < img.height; ++y) {
    for (std::int64_t x = 0; x < img.width; ++x) {
      for (int c = 0; c < 3; ++c) {
        double v = std::clamp(img.at(c, y, x), 0.0, 1.0);
        row[static_cast<size_t>(x * 3 + c)] =
            static_cast<unsigned char>(std::lround(v * 255.0));
      }
    }
    out.write(reinterpret_cast<const char*>(row.data()),
              static_cast<std::streamsize>(row.size()));
  }
  if (!out) throw std::runtime_error("failed writing image '" + path + "'");
}

namespace {

int read_ppm_int(std::istream& in) {
  // Skips whitespace and '#' comments per the PPM grammar.
  int c = in.get();
  while (c == '#' || std::isspace(c)) {
    if (c == '#') {
      while (c != '\n' && c != EOF) c = in.get();
    }
    c = in.get();
  }
  int value = 0;
  bool any = false;
  while (std::isdigit(c)) {
    value = value * 10 + (c - '0');
    any = true;
    c = in.get();
  }
  if (!any) throw std::runtime_error("malformed PPM header");
  return value;
}

}  // namespace

Image read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open image file '" + path + "'");
  char m0 = 0, m1 = 0;
  in.get(m0);
  in.get(m1);
  if (m0 != 'P' || m1 != '6') {
    throw std::runtime_error("'" + path + "' is not a binary PPM (P6) file");
  }
  const int w = read_ppm_int(in);
  const int h = read_ppm_int(in);
  const int maxv = read_ppm_int(in);
  if (maxv != 255) throw std::runtime_error("expected 8-bit PPM in '" + path + "'");
  Image img = Image::filled(h, w, 0.0);
  std::vector<unsigned char> row(static_cast<size_t>(w) * 3);
  for (std::int64_t y = 0; y < h; ++y) {
    in.read(reinterpret_cast<char*>(row.data()),
            static_cast<std::streamsize>(row.size()));
    if (!in) throw std::runtime_error("truncated PPM payload in '" + path + "'");
    for (std::int64_t x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) {
        img.at(c, y, x) = row[static_cast<size_t>(x * 3 + c)] / 255.0;
      }
    }
  }
  return img;
}

Image resize_bilinear(const Image& img, std::int64_t out_h, std::int64_t out_w) {
  Image out = Image::filled(out_h, out_w, 0.0);
  const double sy = out_h > 1 ? double(img.height - 1) / double(out_h - 1) : 0.0;
  const double sx = out_w > 1 ? double(img.width - 1) / double(out_w - 1) : 0.0;
  for (std::int64_t y = 0; y < out_h; ++y) {
    const double fy = y * sy;
    const auto y0 = static_cast<std::int64_t>(std::floor(fy));
    const std::int64_t y1 = std::min(y0 + 1, img.height - 1);
    const double wy = fy - y0;
    for (std::int64_t x = 0; x < out_w; ++x) {
      const double fx = x * sx;
      const auto x0 = static_cast<std::int64_t>(std::floor(fx));
      const std::int64_t x1 = std::min(x0 + 1, img.width - 1);
      const double wx = fx - x0;
      for (int c = 0; c < 3; ++c) {
        const double top = img.at(c, y0, x0) * (1 - wx) + img.at(c, y0, x1) * wx;
        const double bot = img.at(c, y1, x0) * (1 - wx) + img.at(c, y1, x1) * wx;
        out.at(c, y, x) = top * (1 - wy) + bot * wy;
      }
    }
  }
  return out;
}

Image rotate(const Image& img, double degrees, double fill) {
  const double rad = degrees * 3.141592653589793 / 180.0;
  const double cos_r = std::cos(rad), sin_r = std::sin(rad);
  const double cy = (img.height - 1) / 2.0, cx = (img.width - 1) / 2.0;
  Image out = Image::filled(img.height, img.width, fill);
  for (std::int64_t y = 0; y < img.height; ++y) {
    for (std::int64_t x = 0; x < img.width; ++x) {
      // Inverse mapping with bilinear sampling.
      const double dy = y - cy, dx = x - cx;
      const double sy = cos_r * dy + sin_r * dx + cy;
      const double sx = -sin_r * dy + cos_r * dx + cx;
      if (sy < 0 || sy > img.height - 1 || sx < 0 || sx > img.width - 1) continue;
      const auto y0 = static_cast<std::int64_t>(std::floor(sy));
      const auto x0 = static_cast<std::int64_t>(std::floor(sx));
      const std::int64_t y1 = std::min(y0 + 1, img.height - 1);
      const std::int64_t x1 = std::min(x0 + 1, img.width - 1);
      const double wy = sy - y0, wx = sx - x0;
      for (int c = 0; c < 3; ++c) {
        const double top = img.at(c, y0, x0) * (1 - wx) + img.at(c, y0, x1) * wx;
        const double bot = img.at(c, y1, x0) * (1 - wx) + img.at(c, y1, x1) * wx;
        out.at(c, y, x) = top * (1 - wy) + bot * wy;
      }
    }
  }
  return out;
}

Image fit_pad(const Image& img, std::int64_t out_h, std::int64_t out_w, double fill) {
  const double scale =
      std::min(double(out_h) / double(img.height), double(out_w) / double(img.width));
  const auto new_h =
      std::max<std::int64_t>(1, static_cast<std::int64_t>(std::lround(img.height * scale)));
  const auto new_w =
      std::max<std::int64_t>(1, static_cast<std::int64_t>(std::lround(img.width * scale)));
  Image scaled = (new_h == img.height && new_w == img.width)
                     ? img
                     : resize_bilinear(img, new_h, new_w);
  Image out = Image::filled(out_h, out_w, fill);
  const std::int64_t oy = (out_h - new_h) / 2, ox = (out_w - new_w) / 2;
  for (int c = 0; c < 3; ++c) {
    for (std::int64_t y = 0; y < new_h; ++y) {
      for (std::int64_t x = 0; x < new_w; ++x) {
        out.at(c, y + oy, x + ox) = scaled.at(c, y, x);
      }
    }
  }
  return out;
}

Image adjust_brightness(const Image& img, double factor) {
  Image out = img;
  for (auto& v : out.data) v *= factor;
  clamp01(out);
  return out;
}

Image adjust_saturation(const Image& img, double factor) {
  Image out = img;
  const std::int64_t hw = img.height * img.width;
  for (std::int64_t i = 0; i < hw; ++i) {
    const double r = img.data[static_cast<size_t>(i)];
    const double g = img.data[static_cast<size_t>(hw + i)];
    const double b = img.data[static_cast<size_t>(2 * hw + i)];
    const double gray = 0.299 * r + 0.587 * g + 0.114 * b;
    out.data[static_cast<size_t>(i)] = gray + (r - gray) * factor;
    out.data[static_cast<size_t>(hw + i)] = gray + (g - gray) * factor;
    out.data[static_cast<size_t>(2 * hw + i)] = gray + (b - gray) * factor;
  }
  clamp01(out);
  return out;
}

Image adjust_contrast(const Image& img, double factor) {
  double mean = 0.0;
  for (double v : img.data) mean += v;
  mean /= static_cast<double>(img.data.size());
  Image out = img;
  for (auto& v : out.data) v = mean + (v - mean) * factor;
  clamp01(out);
  return out;
}

void clamp01(Image& img) {
  for (auto& v : img.data) v = std::clamp(v, 0.0, 1.0);
}

Tensor image_to_tensor(const Image& img) {
  return Tensor::from_data({1, 3, img.height, img.width}, img.data);
}

Tensor images_to_tensor(const std::vector<Image>& imgs) {
  if (imgs.empty()) throw std::invalid_argument("images_to_tensor: empty batch");
  const std::int64_t h = imgs[0].height, w = imgs[0].width;
  std::vector<double> data;
  data.reserve(imgs.size() * static_cast<size_t>(3 * h * w));
  for (const auto& img : imgs) {
    if (img.height != h || img.width != w) {
      throw std::invalid_argument("images_to_tensor: mixed resolutions in batch");
    }
    data.insert(data.end(), img.data.begin(), img.data.end());
  }
  return Tensor::from_data({static_cast<std::int64_t>(imgs.size()), 3, h, w},
                           std::move(data));
}

Image tensor_to_image(const Tensor& t) {
  Shape s = t.shape();
  if (s.size() == 4 && s[0] == 1) s.erase(s.begin());
  if (s.size() != 3 || s[0] != 3) {
    throw std::invalid_argument("tensor_to_image: expected (3,H,W), got " +
                                shape_str(t.shape()));
  }
  Image img;
  img.height = s[1];
  img.width = s[2];
  img.data.assign(t.values().begin(), t.values().end());
  return img;
}

}  // namespace docparser
