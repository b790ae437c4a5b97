#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace artsurf {

// Planar-interleaved image, row-major, `channels` doubles per pixel in [0,1].
struct Image {
  int width = 0, height = 0, channels = 0;
  std::vector<double> data;

  Image() = default;
  Image(int w, int h, int c, double fill = 0.0)
      : width(w), height(h), channels(c), data(static_cast<size_t>(w) * h * c, fill) {}

  double& at(int x, int y, int c) {
    return data[(static_cast<size_t>(y) * width + x) * channels + c];
  }
  double at(int x, int y, int c) const {
    return data[(static_cast<size_t>(y) * width + x) * channels + c];
  }
  size_t pixel_count() const { return static_cast<size_t>(width) * height; }
  bool same_shape(const Image& o) const {
    return width == o.width && height == o.height && channels == o.channels;
  }
};

// 8-bit PNG. Values are clamped to [0,1] and quantized with round(v*255).
void save_png(const std::string& path, const Image& img);
Image load_png(const std::string& path);  // returns 3-channel RGB in [0,1]

// Raw float32 depth map: magic "RADP", u32 width, u32 height, row-major float32 LE.
void save_depth(const std::string& path, const Image& depth);  // 1-channel
Image load_depth(const std::string& path);

double mse(const Image& a, const Image& b);
double psnr(const Image& a, const Image& b);  // peak 1.0

}  // namespace artsurf
