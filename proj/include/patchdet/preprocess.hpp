#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "patchdet/errors.hpp"
#include "patchdet/image.hpp"
#include "patchdet/png_io.hpp"

namespace patchdet {

enum class EqualizeMode { none, regular_he, clahe };

inline std::string to_string(EqualizeMode m) {
  switch (m) {
    case EqualizeMode::none: return "none";
    case EqualizeMode::regular_he: return "regular_he";
    case EqualizeMode::clahe: return "clahe";
  }
  return "?";
}

inline EqualizeMode equalize_mode_from_string(const std::string& s) {
  if (s == "none") return EqualizeMode::none;
  if (s == "regular_he") return EqualizeMode::regular_he;
  if (s == "clahe") return EqualizeMode::clahe;
  throw ConfigError("unknown equalize mode '" + s + "' (none|regular_he|clahe)");
}

struct PreprocessConfig {
  EqualizeMode mode = EqualizeMode::clahe;
  double clahe_clip_limit = 2.0;
  int clahe_tiles_x = 8;
  int clahe_tiles_y = 8;
  int thumbnail_size = 64;  // equals backbone input size

  void validate() const {
    if (clahe_clip_limit <= 0) throw ConfigError("clahe_clip_limit must be > 0");
    if (clahe_tiles_x < 1 || clahe_tiles_y < 1) throw ConfigError("clahe tile grid must be >= 1x1");
    if (thumbnail_size <= 0) throw ConfigError("thumbnail_size must be > 0");
  }
};

namespace detail {

inline std::array<std::uint32_t, 256> luminance_histogram(const Image& img, int x0, int y0,
                                                          int x1, int y1) {
  std::array<std::uint32_t, 256> hist{};
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) ++hist[img.luminance(x, y)];
  return hist;
}

// Classic global HE mapping: lut[v] = round((cdf(v) - cdf_min) * 255 / (N - cdf_min)).
// A single-level histogram maps to the identity.
inline std::array<std::uint8_t, 256> he_lut(const std::array<std::uint32_t, 256>& hist,
                                            std::uint64_t total) {
  std::array<std::uint8_t, 256> lut{};
  for (int v = 0; v < 256; ++v) lut[v] = static_cast<std::uint8_t>(v);
  int first = 0;
  while (first < 256 && hist[first] == 0) ++first;
  if (first >= 256 || hist[first] == total) return lut;  // empty or constant
  const double scale = 255.0 / static_cast<double>(total - hist[first]);
  std::uint64_t cum = 0;
  for (int v = 0; v < 256; ++v) {
    cum += hist[v];
    lut[v] = v < first ? 0 : clamp_u8(static_cast<double>(cum - hist[first]) * scale);
  }
  return lut;
}

// Clipped-histogram tile mapping: lut[v] = round(cdf(v) * 255 / tile_area),
// with excess mass redistributed evenly across all bins.
inline std::array<std::uint8_t, 256> clahe_tile_lut(std::array<std::uint32_t, 256> hist,
                                                    std::uint64_t area, double clip_limit) {
  std::uint64_t climit =
      static_cast<std::uint64_t>(clip_limit * static_cast<double>(area) / 256.0);
  if (climit < 1) climit = 1;
  std::uint64_t excess = 0;
  for (auto& h : hist)
    if (h > climit) {
      excess += h - climit;
      h = static_cast<std::uint32_t>(climit);
    }
  const std::uint32_t add = static_cast<std::uint32_t>(excess / 256);
  std::uint32_t rem = static_cast<std::uint32_t>(excess % 256);
  for (int v = 0; v < 256; ++v) {
    hist[v] += add;
    if (rem > 0 && static_cast<std::uint32_t>(v) < rem) ++hist[v];
  }
  std::array<std::uint8_t, 256> lut{};
  const double scale = 255.0 / static_cast<double>(area);
  std::uint64_t cum = 0;
  for (int v = 0; v < 256; ++v) {
    cum += hist[v];
    lut[v] = clamp_u8(static_cast<double>(cum) * scale);
  }
  return lut;
}

}  // namespace detail

inline Image equalize_regular(const Image& img) {
  const auto hist = detail::luminance_histogram(img, 0, 0, img.width, img.height);
  const auto lut = detail::he_lut(hist, img.pixel_count());
  Image out = img;
  for (auto& v : out.data) v = lut[v];
  return out;
}

// Tile-wise clip-limited equalization with bilinear blending between the
// mappings of neighbouring tiles. Mappings are derived from luminance and
// applied to every channel.
inline Image equalize_clahe(const Image& img, double clip_limit, int tiles_x, int tiles_y) {
  tiles_x = std::min(tiles_x, img.width);
  tiles_y = std::min(tiles_y, img.height);
  const int tx = std::max(1, tiles_x), ty = std::max(1, tiles_y);

  std::vector<int> bx(tx + 1), by(ty + 1);
  for (int i = 0; i <= tx; ++i) bx[i] = static_cast<int>(static_cast<std::int64_t>(i) * img.width / tx);
  for (int i = 0; i <= ty; ++i) by[i] = static_cast<int>(static_cast<std::int64_t>(i) * img.height / ty);

  std::vector<std::array<std::uint8_t, 256>> luts(static_cast<std::size_t>(tx) * ty);
  std::vector<double> cx(tx), cy(ty);
  for (int j = 0; j < ty; ++j) {
    for (int i = 0; i < tx; ++i) {
      const auto hist = detail::luminance_histogram(img, bx[i], by[j], bx[i + 1], by[j + 1]);
      const std::uint64_t area =
          static_cast<std::uint64_t>(bx[i + 1] - bx[i]) * (by[j + 1] - by[j]);
      luts[static_cast<std::size_t>(j) * tx + i] = detail::clahe_tile_lut(hist, area, clip_limit);
    }
  }
  for (int i = 0; i < tx; ++i) cx[i] = 0.5 * (bx[i] + bx[i + 1]) - 0.5;
  for (int j = 0; j < ty; ++j) cy[j] = 0.5 * (by[j] + by[j + 1]) - 0.5;

  Image out(img.width, img.height, img.channels);
  for (int y = 0; y < img.height; ++y) {
    int j0 = 0;
    while (j0 + 1 < ty && cy[j0 + 1] < y) ++j0;
    int j1 = (j0 + 1 < ty && y > cy[j0]) ? j0 + 1 : j0;
    const double wy = (j1 == j0) ? 0.0
                                 : std::clamp((y - cy[j0]) / (cy[j1] - cy[j0]), 0.0, 1.0);
    for (int x = 0; x < img.width; ++x) {
      int i0 = 0;
      while (i0 + 1 < tx && cx[i0 + 1] < x) ++i0;
      int i1 = (i0 + 1 < tx && x > cx[i0]) ? i0 + 1 : i0;
      const double wx = (i1 == i0) ? 0.0
                                   : std::clamp((x - cx[i0]) / (cx[i1] - cx[i0]), 0.0, 1.0);
      const auto& l00 = luts[static_cast<std::size_t>(j0) * tx + i0];
      const auto& l01 = luts[static_cast<std::size_t>(j0) * tx + i1];
      const auto& l10 = luts[static_cast<std::size_t>(j1) * tx + i0];
      const auto& l11 = luts[static_cast<std::size_t>(j1) * tx + i1];
      for (int c = 0; c < img.channels; ++c) {
        const std::uint8_t v = img.at(x, y, c);
        const double top = (1.0 - wx) * l00[v] + wx * l01[v];
        const double bot = (1.0 - wx) * l10[v] + wx * l11[v];
        out.at(x, y, c) = clamp_u8((1.0 - wy) * top + wy * bot);
      }
    }
  }
  return out;
}

inline Image equalize(const Image& img, const PreprocessConfig& cfg) {
  cfg.validate();
  switch (cfg.mode) {
    case EqualizeMode::none: return img;
    case EqualizeMode::regular_he: return equalize_regular(img);
    case EqualizeMode::clahe:
      return equalize_clahe(img, cfg.clahe_clip_limit, cfg.clahe_tiles_x, cfg.clahe_tiles_y);
  }
  return img;
}

// The ordered patches of one image plus per-patch working labels and scores.
// Scores are unset until a model has seen the patches; labels of a normal
// image (y = 0) are all zero at every point in training.
struct PatchSet {
  std::string image_id;
  PatchGrid grid;
  std::vector<Image> patches;
  std::vector<std::uint8_t> working_labels;
  std::vector<float> scores;  // empty = unset; otherwise strictly inside (0,1)
  std::uint8_t image_label = 0;

  int m() const { return grid.count(); }
};

// Row-major list of non-overlapping patches; exact tiling is required.
inline std::vector<Image> partition(const Image& img, const PatchGrid& grid) {
  if (grid.rows * grid.patch_size != img.height || grid.cols * grid.patch_size != img.width)
    throw GeometryError("partition: grid does not cover image " + std::to_string(img.width) +
                        "x" + std::to_string(img.height));
  const int s = grid.patch_size;
  std::vector<Image> patches;
  patches.reserve(static_cast<std::size_t>(grid.count()));
  for (int r = 0; r < grid.rows; ++r) {
    for (int c = 0; c < grid.cols; ++c) {
      Image p(s, s, img.channels);
      for (int y = 0; y < s; ++y) {
        const std::uint8_t* src =
            &img.data[((static_cast<std::size_t>(r) * s + y) * img.width + static_cast<std::size_t>(c) * s) * img.channels];
        std::memcpy(&p.data[static_cast<std::size_t>(y) * s * img.channels], src,
                    static_cast<std::size_t>(s) * img.channels);
      }
      patches.push_back(std::move(p));
    }
  }
  return patches;
}

// Inverse of partition for an exactly-tiling patch list.
inline Image assemble(const std::vector<Image>& patches, const PatchGrid& grid) {
  if (static_cast<int>(patches.size()) != grid.count())
    throw GeometryError("assemble: patch count does not match grid");
  const int s = grid.patch_size;
  const int channels = patches.empty() ? 1 : patches[0].channels;
  Image img(grid.cols * s, grid.rows * s, channels);
  for (int t = 0; t < grid.count(); ++t) {
    const int r = grid.row_of(t), c = grid.col_of(t);
    for (int y = 0; y < s; ++y) {
      std::uint8_t* dst =
          &img.data[((static_cast<std::size_t>(r) * s + y) * img.width + static_cast<std::size_t>(c) * s) * channels];
      std::memcpy(dst, &patches[t].data[static_cast<std::size_t>(y) * s * channels],
                  static_cast<std::size_t>(s) * channels);
    }
  }
  return img;
}

inline PatchSet partition_to_set(const Image& img, const PatchGrid& grid, std::string image_id,
                                 std::uint8_t image_label) {
  PatchSet set;
  set.image_id = std::move(image_id);
  set.grid = grid;
  set.patches = partition(img, grid);
  set.working_labels.assign(set.patches.size(), 0);
  set.image_label = image_label;
  return set;
}

// Bilinear resample onto a size x size square; aspect ratio is not preserved.
inline Image make_thumbnail(const Image& img, int size) {
  if (size <= 0) throw ConfigError("thumbnail size must be > 0");
  Image out(size, size, img.channels);
  const double sx = static_cast<double>(img.width) / size;
  const double sy = static_cast<double>(img.height) / size;
  for (int y = 0; y < size; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, img.height - 1.0);
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, img.height - 1);
    const double wy = fy - y0;
    for (int x = 0; x < size; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, img.width - 1.0);
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, img.width - 1);
      const double wx = fx - x0;
      for (int c = 0; c < img.channels; ++c) {
        const double top = (1.0 - wx) * img.at(x0, y0, c) + wx * img.at(x1, y0, c);
        const double bot = (1.0 - wx) * img.at(x0, y1, c) + wx * img.at(x1, y1, c);
        out.at(x, y, c) = clamp_u8((1.0 - wy) * top + wy * bot);
      }
    }
  }
  return out;
}

// Center-crop to the largest region that tiles exactly (opt-in alternative to
// rejecting non-divisible inputs).
inline Image crop_to_tiling(const Image& img, int patch_size) {
  const int w = (img.width / patch_size) * patch_size;
  const int h = (img.height / patch_size) * patch_size;
  if (w <= 0 || h <= 0)
    throw GeometryError("crop_to_tiling: image smaller than one patch");
  if (w == img.width && h == img.height) return img;
  const int x0 = (img.width - w) / 2, y0 = (img.height - h) / 2;
  Image out(w, h, img.channels);
  for (int y = 0; y < h; ++y)
    std::memcpy(&out.data[static_cast<std::size_t>(y) * w * img.channels],
                &img.data[((static_cast<std::size_t>(y0) + y) * img.width + x0) * img.channels],
                static_cast<std::size_t>(w) * img.channels);
  return out;
}

inline std::uint64_t preprocess_config_hash(const PreprocessConfig& cfg) {
  const std::string key = to_string(cfg.mode) + "|" + std::to_string(cfg.clahe_clip_limit) +
                          "|" + std::to_string(cfg.clahe_tiles_x) + "x" +
                          std::to_string(cfg.clahe_tiles_y);
  std::uint64_t h = 1469598103934665603ULL;
  for (const char ch : key) {
    h ^= static_cast<std::uint8_t>(ch);
    h *= 1099511628211ULL;
  }
  return h;
}

// Cached equalization: `<stem>.clahe.png` beside the original, keyed by a
// per-directory hash of the preprocess config. A config change invalidates
// the whole directory's cache.
inline Image equalize_cached(const std::string& image_path, const Image& img,
                             const PreprocessConfig& cfg) {
  namespace fs = std::filesystem;
  const fs::path src(image_path);
  const fs::path cache = fs::path(src).replace_extension(".clahe.png");
  const fs::path keyfile = src.parent_path() / ".clahe.key";
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(preprocess_config_hash(cfg)));
  const std::string key(buf);

  std::string stored;
  if (std::ifstream in(keyfile); in) std::getline(in, stored);
  if (stored == key && fs::exists(cache)) return read_png(cache.string());

  Image out = equalize(img, cfg);
  write_png(cache.string(), out);
  if (stored != key) {
    std::ofstream kf(keyfile, std::ios::trunc);
    kf << key << "\n";
  }
  return out;
}

}  // namespace patchdet
