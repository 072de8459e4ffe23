#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

namespace maskforge {

/// Interleaved 8-bit raster. Pixel (x, y) covers the unit square
/// [x, x+1) x [y, y+1), so its center sits at (x + 0.5, y + 0.5).
template <int Channels>
struct Image {
  static constexpr int channels = Channels;

  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> data;

  Image() = default;
  Image(int w, int h, std::uint8_t fill = 0)
      : width(w), height(h), data(static_cast<std::size_t>(w) * h * Channels, fill) {}

  bool empty() const { return width <= 0 || height <= 0; }
  std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }

  std::span<std::uint8_t, Channels> at(int x, int y) {
    assert(x >= 0 && y >= 0 && x < width && y < height);
    return std::span<std::uint8_t, Channels>(
        data.data() + (static_cast<std::size_t>(y) * width + x) * Channels, Channels);
  }
  std::span<const std::uint8_t, Channels> at(int x, int y) const {
    assert(x >= 0 && y >= 0 && x < width && y < height);
    return std::span<const std::uint8_t, Channels>(
        data.data() + (static_cast<std::size_t>(y) * width + x) * Channels, Channels);
  }

  bool same_size(int w, int h) const { return width == w && height == h; }

  friend bool operator==(const Image&, const Image&) = default;
};

using GrayImage = Image<1>;
using RgbImage = Image<3>;
using RgbaImage = Image<4>;

/// Clamp to [0, 255] and round half away from zero.
inline std::uint8_t to_u8(double v) {
  return static_cast<std::uint8_t>(std::round(std::clamp(v, 0.0, 255.0)));
}

inline GrayImage alpha_plane(const RgbaImage& img) {
  GrayImage out(img.width, img.height);
  for (std::size_t i = 0; i < img.pixel_count(); ++i) out.data[i] = img.data[i * 4 + 3];
  return out;
}

/// Pixel-aligned bounding box, half-open: [x0, x1) x [y0, y1).
struct PixelBox {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  bool empty() const { return x1 <= x0 || y1 <= y0; }
};

}  // namespace maskforge
