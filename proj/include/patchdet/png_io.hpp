#pragma once

#include <png.h>

#include <cstring>
#include <string>

#include "patchdet/errors.hpp"
#include "patchdet/image.hpp"

namespace patchdet {

// PNG read/write through libpng's simplified API. Only 8-bit grayscale and
// RGB are produced or accepted; other source formats are converted on read.
inline void write_png(const std::string& path, const Image& img) {
  if (img.empty()) throw DataError("write_png: empty image for " + path);
  if (img.channels != 1 && img.channels != 3)
    throw DataError("write_png: unsupported channel count " + std::to_string(img.channels));
  png_image out;
  std::memset(&out, 0, sizeof(out));
  out.version = PNG_IMAGE_VERSION;
  out.width = static_cast<png_uint_32>(img.width);
  out.height = static_cast<png_uint_32>(img.height);
  out.format = img.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&out, path.c_str(), 0, img.data.data(), 0, nullptr)) {
    const std::string msg = out.message;
    png_image_free(&out);
    throw DataError("write_png: " + path + ": " + msg);
  }
}

inline Image read_png(const std::string& path) {
  png_image in;
  std::memset(&in, 0, sizeof(in));
  in.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&in, path.c_str())) {
    const std::string msg = in.message;
    png_image_free(&in);
    throw DataError("read_png: " + path + ": " + msg);
  }
  const bool color = (in.format & PNG_FORMAT_FLAG_COLOR) != 0;
  in.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  Image img(static_cast<int>(in.width), static_cast<int>(in.height), color ? 3 : 1);
  if (!png_image_finish_read(&in, nullptr, img.data.data(), 0, nullptr)) {
    const std::string msg = in.message;
    png_image_free(&in);
    throw DataError("read_png: " + path + ": " + msg);
  }
  return img;
}

}  // namespace patchdet
