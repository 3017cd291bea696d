#include "lmliqa/image.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "lmliqa/errors.hpp"

namespace lmliqa {

Image crop(const Image& image, const PixelRect& rect) {
  if (rect.x < 0 || rect.y < 0 || rect.width <= 0 || rect.height <= 0 ||
      rect.x + rect.width > image.width || rect.y + rect.height > image.height) {
    throw ShapeError("crop rect (" + std::to_string(rect.x) + "," + std::to_string(rect.y) +
                     "," + std::to_string(rect.width) + "," + std::to_string(rect.height) +
                     ") outside image " + std::to_string(image.width) + "x" +
                     std::to_string(image.height));
  }
  Image out(rect.width, rect.height, image.channels);
  const auto row = static_cast<std::size_t>(rect.width) * image.channels;
  for (int y = 0; y < rect.height; ++y) {
    auto src = image.pixels.begin() +
               (static_cast<std::ptrdiff_t>(rect.y + y) * image.width + rect.x) * image.channels;
    std::copy(src, src + static_cast<std::ptrdiff_t>(row),
              out.pixels.begin() + static_cast<std::ptrdiff_t>(y * row));
  }
  return out;
}

Image resize_bilinear(const Image& image, int width, int height) {
  if (width <= 0 || height <= 0) throw ValidationError("resize target must be positive");
  if (width == image.width && height == image.height) return image;
  Image out(width, height, image.channels);
  const double sx = static_cast<double>(image.width) / width;
  const double sy = static_cast<double>(image.height) / height;
  for (int y = 0; y < height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, image.height - 1.0);
    const int y0 = static_cast<int>(std::floor(fy));
    const int y1 = std::min(y0 + 1, image.height - 1);
    const double wy = fy - y0;
    for (int x = 0; x < width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, image.width - 1.0);
      const int x0 = static_cast<int>(std::floor(fx));
      const int x1 = std::min(x0 + 1, image.width - 1);
      const double wx = fx - x0;
      for (int c = 0; c < image.channels; ++c) {
        const double top = image.at(y0, x0, c) * (1 - wx) + image.at(y0, x1, c) * wx;
        const double bottom = image.at(y1, x0, c) * (1 - wx) + image.at(y1, x1, c) * wx;
        out.at(y, x, c) = top * (1 - wy) + bottom * wy;
      }
    }
  }
  return out;
}

}  // namespace lmliqa
