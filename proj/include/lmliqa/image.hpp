#pragma once

#include <cstddef>
#include <vector>

namespace lmliqa {

// Interleaved HWC image with values nominally in [0,1].
struct Image {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<double> pixels;

  Image() = default;
  Image(int w, int h, int c, double fill = 0.0)
      : width(w), height(h), channels(c),
        pixels(static_cast<std::size_t>(w) * h * c, fill) {}

  double& at(int y, int x, int c) {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  double at(int y, int x, int c) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  bool empty() const { return pixels.empty(); }

  bool operator==(const Image&) const = default;
};

struct PixelRect {
  int x = 0;
  int y = 0;
  int width = 0;
  int height = 0;

  bool operator==(const PixelRect&) const = default;
};

Image crop(const Image& image, const PixelRect& rect);

// Bilinear resampling with half-pixel centers; an exact 2x downscale is a
// 2x2 box average.
Image resize_bilinear(const Image& image, int width, int height);

}  // namespace lmliqa
