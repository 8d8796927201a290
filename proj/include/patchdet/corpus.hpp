#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "patchdet/errors.hpp"
#include "patchdet/image.hpp"
#include "patchdet/parallel.hpp"
#include "patchdet/png_io.hpp"
#include "patchdet/rng.hpp"

#include <nlohmann/json.hpp>

namespace patchdet {

enum class Split { train, test };
enum class Source { synthetic, external };

inline std::string to_string(Split s) { return s == Split::train ? "train" : "test"; }

inline Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "test") return Split::test;
  throw DataError("bad split value '" + s + "'");
}

struct ImageRecord {
  std::string id;
  std::string path;  // relative to the manifest directory
  std::uint8_t label = 0;
  Split split = Split::train;
  Source source = Source::synthetic;
};

struct CorpusManifest {
  std::vector<ImageRecord> records;
  std::uint64_t seed = 0;
  std::map<std::string, std::string> gen_params;
  std::string root_dir;  // directory containing the manifest file

  std::string resolve(const ImageRecord& rec) const {
    return (std::filesystem::path(root_dir) / rec.path).string();
  }
  std::vector<const ImageRecord*> split_records(Split s) const {
    std::vector<const ImageRecord*> out;
    for (const auto& r : records)
      if (r.split == s) out.push_back(&r);
    return out;
  }
};

struct GenerationSpec {
  int n_train_pos = 100;
  int n_train_neg = 100;
  int n_test_pos = 100;
  int n_test_neg = 100;
  int width = 256;
  int height = 192;
  int patch_size = 64;        // geometry contract; defects always cover >= one patch
  int min_defect_pixels = 25; // patch-level oracle rule
  std::uint64_t seed = 0;
  bool rgb = false;
  double crack_weight = 0.5;
  double pothole_weight = 0.25;
  double repair_weight = 0.25;
  double lane_marking_prob = 0.35;

  void validate() const {
    if (n_train_pos < 0 || n_train_neg < 0 || n_test_pos < 0 || n_test_neg < 0)
      throw ConfigError("generation counts must be >= 0");
    if (width <= 0 || height <= 0) throw ConfigError("image dimensions must be positive");
    if (patch_size <= 0 || width % patch_size != 0 || height % patch_size != 0)
      throw ConfigError("image " + std::to_string(width) + "x" + std::to_string(height) +
                        " not divisible by patch size " + std::to_string(patch_size));
    if (min_defect_pixels < 1) throw ConfigError("min_defect_pixels must be >= 1");
  }
};

// ---------------------------------------------------------------------------
// Patch-level oracle: patch is diseased iff it contains >= min_defect_pixels
// nonzero mask pixels.
inline std::vector<std::uint8_t> oracle_patch_labels(const Image& mask, const PatchGrid& grid,
                                                     int min_defect_pixels) {
  if (grid.rows * grid.patch_size != mask.height || grid.cols * grid.patch_size != mask.width)
    throw GeometryError("oracle_patch_labels: mask does not match grid coverage");
  std::vector<std::uint8_t> labels(static_cast<std::size_t>(grid.count()), 0);
  const int s = grid.patch_size;
  for (int t = 0; t < grid.count(); ++t) {
    const int r = grid.row_of(t), c = grid.col_of(t);
    int count = 0;
    for (int y = r * s; y < (r + 1) * s; ++y)
      for (int x = c * s; x < (c + 1) * s; ++x)
        if (mask.luminance(x, y) != 0) ++count;
    labels[static_cast<std::size_t>(t)] = count >= min_defect_pixels ? 1 : 0;
  }
  return labels;
}

// ---------------------------------------------------------------------------
// Synthetic pavement rendering
namespace gen {

struct Canvas {
  int w, h;
  std::vector<float> value;        // luminance plane
  std::vector<std::uint8_t> mask;  // 1 = defect pixel

  Canvas(int width, int height) : w(width), h(height),
      value(static_cast<std::size_t>(width) * height, 0.f),
      mask(static_cast<std::size_t>(width) * height, 0) {}
  float& at(int x, int y) { return value[static_cast<std::size_t>(y) * w + x]; }
  void mark(int x, int y) { mask[static_cast<std::size_t>(y) * w + x] = 1; }
};

inline void paint_background(Canvas& cv, Rng& rng) {
  const double base = rng.uniform(120.0, 170.0);
  const double gx = rng.uniform(-55.0, 55.0);
  const double gy = rng.uniform(-55.0, 55.0);
  // two low-frequency blobs for uneven lighting
  struct Blob { double cx, cy, amp, s2; };
  Blob blobs[2];
  for (auto& b : blobs)
    b = {rng.uniform(0, cv.w), rng.uniform(0, cv.h), rng.uniform(-28.0, 28.0),
         2.0 * std::pow(rng.uniform(30.0, 90.0), 2)};
  const double noise_sigma = rng.uniform(6.0, 12.0);
  for (int y = 0; y < cv.h; ++y) {
    for (int x = 0; x < cv.w; ++x) {
      double v = base + gx * (static_cast<double>(x) / cv.w - 0.5) +
                 gy * (static_cast<double>(y) / cv.h - 0.5);
      for (const auto& b : blobs) {
        const double dx = x - b.cx, dy = y - b.cy;
        v += b.amp * std::exp(-(dx * dx + dy * dy) / b.s2);
      }
      cv.at(x, y) = static_cast<float>(v + rng.gaussian() * noise_sigma);
    }
  }
}

inline void paint_lane_marking(Canvas& cv, Rng& rng) {
  const bool vertical = rng.bernoulli(0.5);
  const int extent = vertical ? cv.w : cv.h;
  const double center = rng.uniform(0.15, 0.85) * extent;
  const double halfw = rng.uniform(4.0, 10.0);
  const double amp = rng.uniform(50.0, 90.0);
  for (int y = 0; y < cv.h; ++y)
    for (int x = 0; x < cv.w; ++x) {
      const double d = std::abs((vertical ? x : y) - center);
      if (d < halfw)
        cv.at(x, y) += static_cast<float>(amp * 0.5 * (1.0 + std::cos(3.14159265358979 * d / halfw)));
    }
}

inline void stamp_disk(Canvas& cv, double cx, double cy, double radius, double depth) {
  const int x0 = std::max(0, static_cast<int>(cx - radius - 1));
  const int x1 = std::min(cv.w - 1, static_cast<int>(cx + radius + 1));
  const int y0 = std::max(0, static_cast<int>(cy - radius - 1));
  const int y1 = std::min(cv.h - 1, static_cast<int>(cy + radius + 1));
  const double r2 = radius * radius;
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      const double dx = x - cx, dy = y - cy;
      if (dx * dx + dy * dy <= r2) {
        cv.at(x, y) -= static_cast<float>(depth);
        cv.mark(x, y);
      }
    }
}

// Random-walk polyline crack, optionally branching (alligator-style).
inline void draw_crack(Canvas& cv, Rng& rng, double cx, double cy, double heading, int length,
                       double width, double depth, int branch_budget) {
  for (int i = 0; i < length; ++i) {
    if (cx < 1 || cy < 1 || cx > cv.w - 2 || cy > cv.h - 2) break;
    stamp_disk(cv, cx, cy, width, depth + rng.gaussian() * 4.0);
    heading += rng.gaussian() * 0.16;
    cx += std::cos(heading);
    cy += std::sin(heading);
    if (branch_budget > 0 && rng.bernoulli(0.012)) {
      --branch_budget;
      draw_crack(cv, rng, cx, cy, heading + rng.uniform(0.6, 1.4) * (rng.bernoulli(0.5) ? 1 : -1),
                 length / 2, width, depth, 0);
    }
  }
}

inline void draw_crack_defect(Canvas& cv, Rng& rng) {
  const double cx = rng.uniform(0.1, 0.9) * cv.w;
  const double cy = rng.uniform(0.1, 0.9) * cv.h;
  const double heading = rng.uniform(0.0, 6.283185307179586);
  const int length = rng.uniform_int(cv.w / 2, cv.w + cv.w / 4);
  const double width = rng.uniform(0.9, 1.9);
  const double depth = rng.uniform(35.0, 75.0);
  const int branches = rng.bernoulli(0.35) ? rng.uniform_int(1, 3) : 0;
  draw_crack(cv, rng, cx, cy, heading, length, width, depth, branches);
}

inline void draw_pothole(Canvas& cv, Rng& rng) {
  const double rx = rng.uniform(7.0, 16.0);
  const double ry = rng.uniform(7.0, 16.0);
  const double cx = rng.uniform(std::min(rx + 2, cv.w / 2.0), std::max(cv.w - rx - 2, cv.w / 2.0));
  const double cy = rng.uniform(std::min(ry + 2, cv.h / 2.0), std::max(cv.h - ry - 2, cv.h / 2.0));
  const double depth = rng.uniform(45.0, 85.0);
  const double wobble = rng.uniform(0.05, 0.22);
  const double phase = rng.uniform(0.0, 6.28);
  const int lobes = rng.uniform_int(3, 6);
  const int x0 = std::max(0, static_cast<int>(cx - rx - 4));
  const int x1 = std::min(cv.w - 1, static_cast<int>(cx + rx + 4));
  const int y0 = std::max(0, static_cast<int>(cy - ry - 4));
  const int y1 = std::min(cv.h - 1, static_cast<int>(cy + ry + 4));
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      const double nx = (x - cx) / rx, ny = (y - cy) / ry;
      const double d = std::sqrt(nx * nx + ny * ny);
      const double edge = 1.0 + wobble * std::sin(lobes * std::atan2(ny, nx) + phase);
      if (d <= edge) {
        const double bowl = 1.0 - std::pow(d / edge, 2.0);
        cv.at(x, y) -= static_cast<float>(depth * (0.35 + 0.65 * bowl));
        cv.mark(x, y);
      }
    }
}

inline void draw_repair(Canvas& cv, Rng& rng) {
  const int max_w = std::max(12, std::min(120, cv.w - 8));
  const int max_h = std::max(12, std::min(120, cv.h - 8));
  const int rw = rng.uniform_int(std::min(40, max_w), max_w);
  const int rh = rng.uniform_int(std::min(40, max_h), max_h);
  const int x0 = rng.uniform_int(2, std::max(2, cv.w - rw - 2));
  const int y0 = rng.uniform_int(2, std::max(2, cv.h - rh - 2));
  const double shift = rng.uniform(26.0, 46.0) * (rng.bernoulli(0.5) ? 1.0 : -1.0);
  const double seam = rng.uniform(22.0, 40.0);
  for (int y = y0; y < y0 + rh; ++y)
    for (int x = x0; x < x0 + rw; ++x) {
      const int border = std::min(std::min(x - x0, x0 + rw - 1 - x), std::min(y - y0, y0 + rh - 1 - y));
      cv.at(x, y) += static_cast<float>(shift);
      if (border < 2) cv.at(x, y) -= static_cast<float>(seam);
      cv.mark(x, y);
    }
}

inline int max_patch_mask_count(const Canvas& cv, int patch_size) {
  const int rows = cv.h / patch_size, cols = cv.w / patch_size;
  int best = 0;
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      int count = 0;
      for (int y = r * patch_size; y < (r + 1) * patch_size; ++y)
        for (int x = c * patch_size; x < (c + 1) * patch_size; ++x)
          count += cv.mask[static_cast<std::size_t>(y) * cv.w + x];
      best = std::max(best, count);
    }
  return best;
}

inline void draw_defects(Canvas& cv, Rng& rng, const GenerationSpec& spec) {
  double wc = spec.crack_weight, wp = spec.pothole_weight, wr = spec.repair_weight;
  const double wsum = wc + wp + wr;
  if (wsum <= 0) { wc = 1; wp = wr = 0; } else { wc /= wsum; wp /= wsum; wr /= wsum; }
  const int n_defects = rng.bernoulli(0.35) ? 2 : 1;
  for (int i = 0; i < n_defects; ++i) {
    const double u = rng.uniform();
    if (u < wc) draw_crack_defect(cv, rng);
    else if (u < wc + wp) draw_pothole(cv, rng);
    else draw_repair(cv, rng);
  }
  // keep the oracle rule satisfiable: some patch must hold enough defect pixels
  int tries = 0;
  while (max_patch_mask_count(cv, spec.patch_size) < spec.min_defect_pixels && tries < 6) {
    draw_pothole(cv, rng);
    ++tries;
  }
}

inline Image canvas_to_image(const Canvas& cv, bool rgb, Rng& rng) {
  if (!rgb) {
    Image img(cv.w, cv.h, 1);
    for (std::size_t i = 0; i < cv.value.size(); ++i) img.data[i] = clamp_u8(cv.value[i]);
    return img;
  }
  // asphalt is near-gray; apply a mild fixed per-image channel tint
  const double tint[3] = {rng.uniform(0.96, 1.04), rng.uniform(0.96, 1.04), rng.uniform(0.96, 1.04)};
  Image img(cv.w, cv.h, 3);
  for (std::size_t i = 0; i < cv.value.size(); ++i)
    for (int c = 0; c < 3; ++c)
      img.data[i * 3 + c] = clamp_u8(cv.value[i] * tint[c]);
  return img;
}

inline Image mask_to_image(const Canvas& cv) {
  Image m(cv.w, cv.h, 1);
  for (std::size_t i = 0; i < cv.mask.size(); ++i) m.data[i] = cv.mask[i] ? 255 : 0;
  return m;
}

}  // namespace gen

// Renders one synthetic pavement image; the rng must be derived only from
// (corpus seed, image index) so generation is order-independent.
inline std::pair<Image, Image> render_synthetic(const GenerationSpec& spec, bool diseased,
                                                Rng rng) {
  gen::Canvas cv(spec.width, spec.height);
  gen::paint_background(cv, rng);
  if (rng.bernoulli(spec.lane_marking_prob)) gen::paint_lane_marking(cv, rng);
  if (diseased) gen::draw_defects(cv, rng, spec);
  Image img = gen::canvas_to_image(cv, spec.rgb, rng);
  Image mask = gen::mask_to_image(cv);
  return {std::move(img), std::move(mask)};
}

// ---------------------------------------------------------------------------
// Manifest I/O: UTF-8 TSV `id path label split` with a header line.
inline void save_manifest(const CorpusManifest& manifest, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("save_manifest: cannot open " + path);
  out << "id\tpath\tlabel\tsplit\n";
  for (const auto& r : manifest.records)
    out << r.id << '\t' << r.path << '\t' << int(r.label) << '\t' << to_string(r.split) << '\n';
}

inline CorpusManifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("load_manifest: cannot open " + path);
  CorpusManifest manifest;
  manifest.root_dir = std::filesystem::path(path).parent_path().string();
  std::string line;
  if (!std::getline(in, line)) throw DataError("load_manifest: empty file " + path);
  std::set<std::string> seen;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ss(line);
    ImageRecord rec;
    std::string label_str, split_str;
    if (!std::getline(ss, rec.id, '\t') || !std::getline(ss, rec.path, '\t') ||
        !std::getline(ss, label_str, '\t') || !std::getline(ss, split_str))
      throw DataError("load_manifest: malformed line " + std::to_string(lineno));
    if (label_str != "0" && label_str != "1")
      throw DataError("load_manifest: bad label '" + label_str + "' for id " + rec.id);
    rec.label = label_str == "1" ? 1 : 0;
    rec.split = split_from_string(split_str);
    rec.source = Source::external;
    if (!seen.insert(rec.id).second)
      throw DataError("load_manifest: duplicate id " + rec.id);
    if (!std::filesystem::exists(manifest.resolve(rec)))
      throw DataError("load_manifest: missing file for id " + rec.id + ": " + rec.path);
    manifest.records.push_back(std::move(rec));
  }
  const auto genfile = std::filesystem::path(manifest.root_dir) / "generation.json";
  if (std::filesystem::exists(genfile)) {
    std::ifstream gf(genfile);
    nlohmann::json j;
    gf >> j;
    manifest.seed = j.value("seed", std::uint64_t{0});
    if (j.contains("params"))
      for (auto& [k, v] : j["params"].items()) manifest.gen_params[k] = v.get<std::string>();
    for (auto& r : manifest.records) r.source = Source::synthetic;
  }
  return manifest;
}

inline std::uint64_t corpus_hash(const CorpusManifest& manifest) {
  std::uint64_t h = 1469598103934665603ULL;
  auto feed = [&h](const std::string& s) {
    for (const char c : s) {
      h ^= static_cast<std::uint8_t>(c);
      h *= 1099511628211ULL;
    }
  };
  feed(std::to_string(manifest.seed));
  for (const auto& r : manifest.records) {
    feed(r.id);
    feed(r.path);
    feed(std::to_string(r.label));
    feed(to_string(r.split));
  }
  return h;
}

inline std::string mask_path_for(const CorpusManifest& manifest, const std::string& id) {
  return (std::filesystem::path(manifest.root_dir) / "masks" / (id + ".mask.png")).string();
}

// ---------------------------------------------------------------------------
// Corpus generation: images under images/, masks under masks/, manifest.tsv
// and generation.json at the root. Deterministic per (spec, seed).
inline CorpusManifest generate_corpus(const GenerationSpec& spec, const std::string& out_dir) {
  spec.validate();
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(out_dir) / "images");
  fs::create_directories(fs::path(out_dir) / "masks");

  struct Plan { std::string id; std::uint8_t label; Split split; };
  std::vector<Plan> plans;
  auto add = [&plans](const std::string& prefix, int n, std::uint8_t label, Split split) {
    for (int i = 0; i < n; ++i) {
      char buf[16];
      std::snprintf(buf, sizeof(buf), "%04d", i);
      plans.push_back({prefix + buf, label, split});
    }
  };
  add("tr_p_", spec.n_train_pos, 1, Split::train);
  add("tr_n_", spec.n_train_neg, 0, Split::train);
  add("te_p_", spec.n_test_pos, 1, Split::test);
  add("te_n_", spec.n_test_neg, 0, Split::test);

  CorpusManifest manifest;
  manifest.root_dir = out_dir;
  manifest.seed = spec.seed;
  manifest.gen_params = {
      {"width", std::to_string(spec.width)},
      {"height", std::to_string(spec.height)},
      {"patch_size", std::to_string(spec.patch_size)},
      {"min_defect_pixels", std::to_string(spec.min_defect_pixels)},
      {"rgb", spec.rgb ? "1" : "0"},
      {"n_train_pos", std::to_string(spec.n_train_pos)},
      {"n_train_neg", std::to_string(spec.n_train_neg)},
      {"n_test_pos", std::to_string(spec.n_test_pos)},
      {"n_test_neg", std::to_string(spec.n_test_neg)},
  };
  manifest.records.resize(plans.size());

  parallel_for(plans.size(), [&](std::size_t i) {
    const auto& plan = plans[i];
    Rng rng(Rng::mix(spec.seed, 0x1000 + i));
    auto [img, mask] = render_synthetic(spec, plan.label == 1, std::move(rng));
    const std::string rel = "images/" + plan.id + ".png";
    write_png((fs::path(out_dir) / rel).string(), img);
    if (plan.label == 1)
      write_png((fs::path(out_dir) / "masks" / (plan.id + ".mask.png")).string(), mask);
    manifest.records[i] = {plan.id, rel, plan.label, plan.split, Source::synthetic};
  });

  save_manifest(manifest, (fs::path(out_dir) / "manifest.tsv").string());
  nlohmann::json j;
  j["seed"] = spec.seed;
  j["params"] = manifest.gen_params;
  std::ofstream gf(fs::path(out_dir) / "generation.json", std::ios::trunc);
  gf << j.dump(2) << "\n";
  return manifest;
}

// ---------------------------------------------------------------------------
// Robustness-protocol corruption: exactly round(rho * H * W) distinct pixel
// positions get additive zero-mean Gaussian noise with std sigma * 255.
inline std::vector<std::uint32_t> select_noise_positions(std::size_t n_pixels, double rho,
                                                         Rng& rng) {
  const auto k = static_cast<std::size_t>(std::llround(rho * static_cast<double>(n_pixels)));
  std::vector<std::uint32_t> idx(n_pixels);
  std::iota(idx.begin(), idx.end(), 0u);
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(n_pixels - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(k);
  return idx;
}

inline Image corrupt_with_noise(const Image& img, double rho, double sigma, std::uint64_t seed) {
  if (rho < 0.0 || rho > 1.0)
    throw ConfigError("noise ratio must lie in [0,1], got " + std::to_string(rho));
  if (sigma <= 0.0) throw ConfigError("noise sigma must be > 0");
  Image out = img;
  Rng rng(Rng::mix(seed, 0xC0FFEE));
  const auto positions = select_noise_positions(img.pixel_count(), rho, rng);
  const double scale = sigma * 255.0;
  for (const auto pos : positions) {
    for (int c = 0; c < img.channels; ++c) {
      const std::size_t off = static_cast<std::size_t>(pos) * img.channels + c;
      out.data[off] = clamp_u8(out.data[off] + rng.gaussian() * scale);
    }
  }
  return out;
}

}  // namespace patchdet
