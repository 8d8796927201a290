#include <catch2/catch_amalgamated.hpp>

#include <array>
#include <filesystem>
#include <numeric>

#include "patchdet/preprocess.hpp"
#include "patchdet/rng.hpp"

using namespace patchdet;

namespace {

Image random_image(int w, int h, int channels, std::uint64_t seed) {
  Image img(w, h, channels);
  Rng rng(seed);
  for (auto& v : img.data) v = static_cast<std::uint8_t>(rng.below(256));
  return img;
}

}  // namespace

TEST_CASE("partition yields m=12 for both reference geometries") {
  const auto paper_grid = make_grid(1200, 900, 300);
  CHECK(paper_grid.rows == 3);
  CHECK(paper_grid.cols == 4);
  CHECK(paper_grid.count() == 12);

  const auto desk_grid = make_grid(256, 192, 64);
  CHECK(desk_grid.rows == 3);
  CHECK(desk_grid.cols == 4);
  CHECK(desk_grid.count() == 12);
}

TEST_CASE("partition degenerates to a single whole-image patch") {
  const Image img = random_image(64, 64, 1, 1);
  const auto grid = make_grid(img, 64);
  CHECK(grid.count() == 1);
  const auto patches = partition(img, grid);
  REQUIRE(patches.size() == 1);
  CHECK(patches[0] == img);
}

TEST_CASE("partition rejects non-divisible geometry") {
  CHECK_THROWS_AS(make_grid(250, 192, 64), GeometryError);
  CHECK_THROWS_AS(make_grid(256, 200, 64), GeometryError);
  const Image img = random_image(256, 192, 1, 2);
  PatchGrid wrong{64, 2, 4};
  CHECK_THROWS_AS(partition(img, wrong), GeometryError);
}

TEST_CASE("partition/assemble round-trip is the identity") {
  struct Case { int w, h, c, patch; };
  for (const Case tc : {Case{256, 192, 1, 64}, Case{128, 128, 3, 32}, Case{96, 48, 1, 16}}) {
    const Image img = random_image(tc.w, tc.h, tc.c, 100 + tc.w);
    const auto grid = make_grid(img, tc.patch);
    const auto patches = partition(img, grid);
    REQUIRE(static_cast<int>(patches.size()) == grid.count());
    CHECK(assemble(patches, grid) == img);
  }
}

TEST_CASE("row-major patch order is stable") {
  // paint each tile with its row-major index so the order is observable
  const auto grid = make_grid(256, 192, 64);
  Image img(256, 192, 1);
  for (int t = 0; t < grid.count(); ++t)
    for (int y = 0; y < 64; ++y)
      for (int x = 0; x < 64; ++x)
        img.at(grid.col_of(t) * 64 + x, grid.row_of(t) * 64 + y) =
            static_cast<std::uint8_t>(t);
  const auto patches = partition(img, grid);
  for (int t = 0; t < grid.count(); ++t) CHECK(patches[t].at(0, 0) == t);
}

TEST_CASE("equalize mode none is the identity") {
  const Image img = random_image(128, 64, 1, 3);
  PreprocessConfig cfg;
  cfg.mode = EqualizeMode::none;
  CHECK(equalize(img, cfg) == img);
}

TEST_CASE("regular HE maps a constant image to itself") {
  Image img(64, 64, 1, 137);
  PreprocessConfig cfg;
  cfg.mode = EqualizeMode::regular_he;
  CHECK(equalize(img, cfg) == img);
}

TEST_CASE("regular HE matches the analytic CDF mapping on a two-level image") {
  // equal-frequency levels {50, 200}: cdf(50)=N/2=cdf_min so 50 -> 0 and
  // 200 -> round((N - N/2) * 255 / (N - N/2)) = 255
  Image img(64, 64, 1);
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x) img.at(x, y) = (x + y) % 2 ? 200 : 50;
  PreprocessConfig cfg;
  cfg.mode = EqualizeMode::regular_he;
  const Image out = equalize(img, cfg);
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x)
      CHECK(out.at(x, y) == ((x + y) % 2 ? 255 : 0));
}

TEST_CASE("regular HE agrees with a direct histogram oracle") {
  const Image img = random_image(96, 96, 1, 17);
  PreprocessConfig cfg;
  cfg.mode = EqualizeMode::regular_he;
  const Image out = equalize(img, cfg);

  // independent oracle: textbook mapping round((cdf - cdf_min)/(N - cdf_min) * 255)
  std::array<std::uint64_t, 256> hist{};
  for (const auto v : img.data) ++hist[v];
  std::array<std::uint64_t, 256> cdf{};
  std::partial_sum(hist.begin(), hist.end(), cdf.begin());
  std::uint64_t cdf_min = 0;
  for (int v = 0; v < 256; ++v)
    if (hist[v] > 0) { cdf_min = cdf[v]; break; }
  const double denom = static_cast<double>(img.pixel_count() - cdf_min);
  for (std::size_t i = 0; i < img.data.size(); ++i) {
    const double expect =
        std::floor(static_cast<double>(cdf[img.data[i]] - cdf_min) / denom * 255.0 + 0.5);
    CHECK(static_cast<double>(out.data[i]) == expect);
  }
}

TEST_CASE("equalize preserves dimensions and 8-bit range in every mode") {
  for (const auto mode : {EqualizeMode::none, EqualizeMode::regular_he, EqualizeMode::clahe}) {
    for (const int channels : {1, 3}) {
      const Image img = random_image(160, 96, channels, 31 + channels);
      PreprocessConfig cfg;
      cfg.mode = mode;
      const Image out = equalize(img, cfg);
      CHECK(out.width == img.width);
      CHECK(out.height == img.height);
      CHECK(out.channels == img.channels);
      // determinism
      CHECK(equalize(img, cfg) == out);
    }
  }
}

TEST_CASE("CLAHE flattens a strong illumination gradient") {
  // left/right halves with very different brightness: after tile-wise
  // equalization the half-mean gap should shrink
  Image img(128, 64, 1);
  Rng rng(5);
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 128; ++x)
      img.at(x, y) = clamp_u8((x < 64 ? 40.0 : 180.0) + rng.gaussian() * 10.0);
  auto half_mean = [](const Image& im, int x0, int x1) {
    double acc = 0;
    for (int y = 0; y < im.height; ++y)
      for (int x = x0; x < x1; ++x) acc += im.at(x, y);
    return acc / (im.height * (x1 - x0));
  };
  auto gap = [&](const Image& im) { return half_mean(im, 64, 128) - half_mean(im, 0, 64); };
  PreprocessConfig cfg;
  const double mild = gap(equalize(img, cfg));
  cfg.clahe_clip_limit = 8.0;
  const double strong = gap(equalize(img, cfg));
  CHECK(mild < 0.8 * gap(img));
  CHECK(strong < 0.15 * gap(img));
  CHECK(strong < mild);  // higher clip limit equalizes harder
}

TEST_CASE("thumbnail of an already-square image at native size is identity") {
  const Image img = random_image(64, 64, 1, 9);
  CHECK(make_thumbnail(img, 64) == img);
}

TEST_CASE("thumbnail of a constant image is constant") {
  const Image img(200, 150, 1, 77);
  const Image out = make_thumbnail(img, 64);
  for (const auto v : out.data) CHECK(v == 77);
}

TEST_CASE("2x2 checkerboard downsampled to 1x1 is the bilinear average") {
  Image img(2, 2, 1);
  img.at(0, 0) = 0;
  img.at(1, 0) = 255;
  img.at(0, 1) = 255;
  img.at(1, 1) = 0;
  const Image out = make_thumbnail(img, 1);
  REQUIRE(out.size() == 1);
  CHECK(std::abs(int(out.data[0]) - 127) <= 1);
}

TEST_CASE("crop_to_tiling center-crops to the largest tiling region") {
  const Image img = random_image(300, 200, 1, 12);
  const Image out = crop_to_tiling(img, 64);
  CHECK(out.width == 256);
  CHECK(out.height == 192);
  // content matches the centered window
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x)
      REQUIRE(out.at(x, y) == img.at(x + 22, y + 4));
  CHECK_THROWS_AS(crop_to_tiling(random_image(30, 30, 1, 1), 64), GeometryError);
}

TEST_CASE("preprocess config validation") {
  PreprocessConfig cfg;
  cfg.clahe_clip_limit = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = PreprocessConfig{};
  cfg.clahe_tiles_x = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("equalized cache hits and invalidates on config change") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::path("preproc_cache_scratch");
  fs::remove_all(dir);
  fs::create_directories(dir);
  const Image img = random_image(128, 64, 1, 21);
  const std::string path = (dir / "img.png").string();
  write_png(path, img);

  PreprocessConfig cfg;
  const Image first = equalize_cached(path, img, cfg);
  CHECK(first == equalize(img, cfg));
  CHECK(fs::exists(dir / "img.clahe.png"));

  // prove the second call reads the cache: overwrite the cache file and
  // expect the poisoned content back
  const Image poison = random_image(128, 64, 1, 22);
  write_png((dir / "img.clahe.png").string(), poison);
  CHECK(equalize_cached(path, img, cfg) == poison);

  // a config change must invalidate and recompute
  cfg.clahe_clip_limit = 3.5;
  const Image recomputed = equalize_cached(path, img, cfg);
  CHECK(recomputed == equalize(img, cfg));
  fs::remove_all(dir);
}
