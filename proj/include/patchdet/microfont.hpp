#pragma once

#include <cstdint>
#include <string>

#include "patchdet/image.hpp"

namespace patchdet {

// 3x5 bitmap digits for stamping numeric annotations into rasters.
namespace detail {

inline const std::uint16_t* glyph_rows(char c) {
  // each glyph: 5 rows, 3 bits per row (MSB = left column)
  static const std::uint16_t digits[10][5] = {
      {0b111, 0b101, 0b101, 0b101, 0b111},  // 0
      {0b010, 0b110, 0b010, 0b010, 0b111},  // 1
      {0b111, 0b001, 0b111, 0b100, 0b111},  // 2
      {0b111, 0b001, 0b111, 0b001, 0b111},  // 3
      {0b101, 0b101, 0b111, 0b001, 0b001},  // 4
      {0b111, 0b100, 0b111, 0b001, 0b111},  // 5
      {0b111, 0b100, 0b111, 0b101, 0b111},  // 6
      {0b111, 0b001, 0b010, 0b010, 0b010},  // 7
      {0b111, 0b101, 0b111, 0b101, 0b111},  // 8
      {0b111, 0b101, 0b111, 0b001, 0b111},  // 9
  };
  static const std::uint16_t dot[5] = {0, 0, 0, 0, 0b010};
  static const std::uint16_t dash[5] = {0, 0, 0b111, 0, 0};
  if (c >= '0' && c <= '9') return digits[c - '0'];
  if (c == '.') return dot;
  if (c == '-') return dash;
  return nullptr;
}

}  // namespace detail

// Stamps digits / '.' / '-' at (x, y); unknown characters advance the cursor.
inline void stamp_text(Image& img, int x, int y, const std::string& text, int scale,
                       std::uint8_t r, std::uint8_t g, std::uint8_t b) {
  int cx = x;
  for (const char ch : text) {
    if (const std::uint16_t* rows = detail::glyph_rows(ch)) {
      for (int gy = 0; gy < 5; ++gy)
        for (int gx = 0; gx < 3; ++gx)
          if (rows[gy] & (0b100 >> gx))
            for (int sy = 0; sy < scale; ++sy)
              for (int sx = 0; sx < scale; ++sx) {
                const int px = cx + gx * scale + sx, py = y + gy * scale + sy;
                if (px < 0 || py < 0 || px >= img.width || py >= img.height) continue;
                if (img.channels == 1) {
                  img.at(px, py) = r;
                } else {
                  img.at(px, py, 0) = r;
                  img.at(px, py, 1) = g;
                  img.at(px, py, 2) = b;
                }
              }
    }
    cx += 4 * scale;
  }
}

}  // namespace patchdet
