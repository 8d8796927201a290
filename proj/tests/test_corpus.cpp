#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <set>

#include "patchdet/corpus.hpp"

using namespace patchdet;
namespace fs = std::filesystem;

namespace {

std::vector<std::uint8_t> file_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

GenerationSpec small_spec(std::uint64_t seed) {
  GenerationSpec spec;
  spec.n_train_pos = 4;
  spec.n_train_neg = 4;
  spec.n_test_pos = 2;
  spec.n_test_neg = 2;
  spec.width = 128;
  spec.height = 128;
  spec.patch_size = 64;
  spec.seed = seed;
  return spec;
}

}  // namespace

TEST_CASE("generation is byte-deterministic for a fixed seed") {
  const fs::path dir_a = "corpus_det_a", dir_b = "corpus_det_b";
  fs::remove_all(dir_a);
  fs::remove_all(dir_b);
  const auto spec = small_spec(7);
  const auto ma = generate_corpus(spec, dir_a.string());
  const auto mb = generate_corpus(spec, dir_b.string());
  REQUIRE(ma.records.size() == mb.records.size());
  for (std::size_t i = 0; i < ma.records.size(); ++i) {
    CHECK(ma.records[i].id == mb.records[i].id);
    CHECK(ma.records[i].path == mb.records[i].path);
    CHECK(ma.records[i].label == mb.records[i].label);
    CHECK(file_bytes(dir_a / ma.records[i].path) == file_bytes(dir_b / mb.records[i].path));
  }
  CHECK(file_bytes(dir_a / "manifest.tsv") == file_bytes(dir_b / "manifest.tsv"));
  fs::remove_all(dir_a);
  fs::remove_all(dir_b);
}

TEST_CASE("all-negative spec produces only normal images and no masks") {
  const fs::path dir = "corpus_allneg";
  fs::remove_all(dir);
  auto spec = small_spec(3);
  spec.n_train_pos = 0;
  spec.n_test_pos = 0;
  const auto manifest = generate_corpus(spec, dir.string());
  REQUIRE(manifest.records.size() == 6);
  for (const auto& rec : manifest.records) {
    CHECK(rec.label == 0);
    CHECK_FALSE(fs::exists(mask_path_for(manifest, rec.id)));
  }
  fs::remove_all(dir);
}

TEST_CASE("invalid generation geometry is rejected") {
  auto spec = small_spec(1);
  spec.width = 130;  // not divisible by 64
  CHECK_THROWS_AS(generate_corpus(spec, "corpus_invalid"), ConfigError);
  spec = small_spec(1);
  spec.n_train_pos = -1;
  CHECK_THROWS_AS(generate_corpus(spec, "corpus_invalid"), ConfigError);
}

TEST_CASE("every diseased image covers at least one oracle patch") {
  const fs::path dir = "corpus_coverage";
  fs::remove_all(dir);
  GenerationSpec spec;
  spec.n_train_pos = 50;
  spec.n_train_neg = 50;
  spec.n_test_pos = 50;
  spec.n_test_neg = 50;
  spec.width = 256;
  spec.height = 192;
  spec.patch_size = 64;
  spec.seed = 1;
  const auto manifest = generate_corpus(spec, dir.string());
  const PatchGrid grid = make_grid(spec.width, spec.height, spec.patch_size);
  for (const auto& rec : manifest.records) {
    if (rec.label == 0) continue;
    const Image mask = read_png(mask_path_for(manifest, rec.id));
    const auto labels = oracle_patch_labels(mask, grid, spec.min_defect_pixels);
    CHECK(std::count(labels.begin(), labels.end(), 1) >= 1);
  }
  // normal images have no mask at all, which the oracle treats as all-zero
  fs::remove_all(dir);
}

TEST_CASE("oracle patch labels") {
  const PatchGrid grid = make_grid(256, 192, 64);

  SECTION("all-zero mask gives all zeros") {
    const Image mask(256, 192, 1, 0);
    const auto labels = oracle_patch_labels(mask, grid, 1);
    CHECK(std::count(labels.begin(), labels.end(), 0) == grid.count());
  }
  SECTION("full mask with min 1 gives all ones") {
    const Image mask(256, 192, 1, 255);
    const auto labels = oracle_patch_labels(mask, grid, 1);
    CHECK(std::count(labels.begin(), labels.end(), 1) == grid.count());
  }
  SECTION("a 10-pixel crack confined to patch (0,2) flags only that patch") {
    Image mask(256, 192, 1, 0);
    for (int i = 0; i < 10; ++i) mask.at(140 + i, 20) = 255;  // inside row 0, col 2
    const auto labels = oracle_patch_labels(mask, grid, 5);
    for (int t = 0; t < grid.count(); ++t)
      CHECK(int(labels[t]) == (grid.row_of(t) == 0 && grid.col_of(t) == 2 ? 1 : 0));
  }
  SECTION("threshold is respected exactly") {
    Image mask(256, 192, 1, 0);
    for (int i = 0; i < 10; ++i) mask.at(140 + i, 20) = 255;
    auto labels = oracle_patch_labels(mask, grid, 10);
    CHECK(labels[2] == 1);
    labels = oracle_patch_labels(mask, grid, 11);
    CHECK(labels[2] == 0);
  }
  SECTION("dimension mismatch is rejected") {
    const Image mask(128, 128, 1, 0);
    CHECK_THROWS_AS(oracle_patch_labels(mask, grid, 1), GeometryError);
  }
}

TEST_CASE("noise corruption") {
  Image img(100, 100, 1);
  Rng rng(11);
  for (auto& v : img.data) v = static_cast<std::uint8_t>(rng.below(256));

  SECTION("rho = 0 returns a byte-identical image") {
    CHECK(corrupt_with_noise(img, 0.0, 0.2, 5) == img);
  }
  SECTION("rho = 1 selects every pixel position") {
    Rng sel(Rng::mix(5, 0xC0FFEE));
    const auto positions = select_noise_positions(img.pixel_count(), 1.0, sel);
    CHECK(positions.size() == img.pixel_count());
    CHECK(std::set<std::uint32_t>(positions.begin(), positions.end()).size() ==
          img.pixel_count());
  }
  SECTION("rho = 0.1 on 100x100 corrupts exactly 1000 distinct positions") {
    Rng sel(Rng::mix(5, 0xC0FFEE));
    const auto positions = select_noise_positions(img.pixel_count(), 0.1, sel);
    CHECK(positions.size() == 1000);
    CHECK(std::set<std::uint32_t>(positions.begin(), positions.end()).size() == 1000);
    // changed-pixel fraction cannot exceed the selection fraction
    const Image out = corrupt_with_noise(img, 0.1, 0.2, 5);
    std::size_t changed = 0;
    for (std::size_t i = 0; i < img.data.size(); ++i) changed += img.data[i] != out.data[i];
    CHECK(changed <= 1000);
    CHECK(changed > 0);
  }
  SECTION("corruption is deterministic in the seed") {
    CHECK(corrupt_with_noise(img, 0.3, 0.2, 42) == corrupt_with_noise(img, 0.3, 0.2, 42));
    CHECK_FALSE(corrupt_with_noise(img, 0.3, 0.2, 42) == corrupt_with_noise(img, 0.3, 0.2, 43));
  }
  SECTION("bad arguments are rejected") {
    CHECK_THROWS_AS(corrupt_with_noise(img, -0.1, 0.2, 1), ConfigError);
    CHECK_THROWS_AS(corrupt_with_noise(img, 1.1, 0.2, 1), ConfigError);
    CHECK_THROWS_AS(corrupt_with_noise(img, 0.5, 0.0, 1), ConfigError);
  }
}

TEST_CASE("manifest round-trips through generate and load") {
  const fs::path dir = "corpus_roundtrip";
  fs::remove_all(dir);
  const auto spec = small_spec(13);
  const auto generated = generate_corpus(spec, dir.string());
  const auto loaded = load_manifest((dir / "manifest.tsv").string());
  REQUIRE(loaded.records.size() == generated.records.size());
  for (std::size_t i = 0; i < loaded.records.size(); ++i) {
    CHECK(loaded.records[i].id == generated.records[i].id);
    CHECK(loaded.records[i].path == generated.records[i].path);
    CHECK(loaded.records[i].label == generated.records[i].label);
    CHECK(loaded.records[i].split == generated.records[i].split);
    CHECK(loaded.records[i].source == Source::synthetic);
  }
  CHECK(loaded.seed == spec.seed);
  CHECK(corpus_hash(loaded) == corpus_hash(generated));
  std::set<std::string> ids;
  for (const auto& rec : loaded.records) CHECK(ids.insert(rec.id).second);
  fs::remove_all(dir);
}

TEST_CASE("manifest loader error paths") {
  const fs::path dir = "corpus_badmanifest";
  fs::remove_all(dir);
  fs::create_directories(dir);

  SECTION("empty record list is a valid empty corpus") {
    std::ofstream(dir / "manifest.tsv") << "id\tpath\tlabel\tsplit\n";
    const auto manifest = load_manifest((dir / "manifest.tsv").string());
    CHECK(manifest.records.empty());
  }
  SECTION("missing file names the offending id") {
    std::ofstream(dir / "manifest.tsv")
        << "id\tpath\tlabel\tsplit\nimg_x\timages/img_x.png\t1\ttrain\n";
    try {
      load_manifest((dir / "manifest.tsv").string());
      FAIL("expected DataError");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find("img_x") != std::string::npos);
    }
  }
  SECTION("bad label value is rejected") {
    std::ofstream(dir / "manifest.tsv") << "id\tpath\tlabel\tsplit\nimg_x\tp.png\t2\ttrain\n";
    CHECK_THROWS_AS(load_manifest((dir / "manifest.tsv").string()), DataError);
  }
  SECTION("duplicate ids are rejected") {
    std::ofstream(dir / "img.png") << "";
    std::ofstream(dir / "manifest.tsv") << "id\tpath\tlabel\tsplit\n"
                                        << "img_a\timg.png\t0\ttrain\n"
                                        << "img_a\timg.png\t0\ttest\n";
    CHECK_THROWS_AS(load_manifest((dir / "manifest.tsv").string()), DataError);
  }
  fs::remove_all(dir);
}
