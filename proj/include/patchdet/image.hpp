#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "patchdet/errors.hpp"

namespace patchdet {

// 8-bit raster, row-major, interleaved channels (1 = grayscale, 3 = RGB).
struct Image {
  int width = 0;
  int height = 0;
  int channels = 1;
  std::vector<std::uint8_t> data;

  Image() = default;
  Image(int w, int h, int c = 1, std::uint8_t fill = 0)
      : width(w), height(h), channels(c),
        data(static_cast<std::size_t>(w) * h * c, fill) {}

  std::size_t pixel_count() const {
    return static_cast<std::size_t>(width) * height;
  }
  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }

  std::uint8_t& at(int x, int y, int c = 0) {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  std::uint8_t at(int x, int y, int c = 0) const {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }

  bool same_shape(const Image& o) const {
    return width == o.width && height == o.height && channels == o.channels;
  }
  bool operator==(const Image& o) const {
    return same_shape(o) && data == o.data;
  }

  // Rec.601 luma for RGB; identity for grayscale.
  std::uint8_t luminance(int x, int y) const {
    if (channels == 1) return at(x, y);
    const int r = at(x, y, 0), g = at(x, y, 1), b = at(x, y, 2);
    return static_cast<std::uint8_t>((299 * r + 587 * g + 114 * b + 500) / 1000);
  }
};

inline std::uint8_t clamp_u8(double v) {
  return static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0) + 0.5);
}

// Exact non-overlapping tiling of an image into square patches.
struct PatchGrid {
  int patch_size = 64;
  int rows = 0;
  int cols = 0;

  int count() const { return rows * cols; }  // m
  int row_of(int t) const { return t / cols; }
  int col_of(int t) const { return t % cols; }
  bool operator==(const PatchGrid&) const = default;
};

inline PatchGrid make_grid(int width, int height, int patch_size) {
  if (patch_size <= 0)
    throw GeometryError("patch size must be positive, got " + std::to_string(patch_size));
  if (width % patch_size != 0 || height % patch_size != 0)
    throw GeometryError("image " + std::to_string(width) + "x" + std::to_string(height) +
                        " does not tile exactly with patch size " + std::to_string(patch_size));
  return PatchGrid{patch_size, height / patch_size, width / patch_size};
}

inline PatchGrid make_grid(const Image& img, int patch_size) {
  return make_grid(img.width, img.height, patch_size);
}

}  // namespace patchdet
