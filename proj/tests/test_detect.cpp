#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "patchdet/detect.hpp"
#include "patchdet/rng.hpp"

using namespace patchdet;
namespace fs = std::filesystem;

namespace {

Image random_image(int w, int h, std::uint64_t seed) {
  Image img(w, h, 1);
  Rng rng(seed);
  for (auto& v : img.data) v = clamp_u8(128.0 + rng.gaussian() * 30.0);
  return img;
}

std::unique_ptr<Backbone> small_model(std::uint64_t seed = 3) {
  BackboneSpec spec;
  spec.input_size = 32;
  auto model = make_backbone(spec);
  model->init(seed);
  return model;
}

// reconstructs the flagged patch set from the tint in the overlay raster
std::set<int> flagged_from_overlay(const Image& overlay, const PatchGrid& grid) {
  std::set<int> flagged;
  for (int t = 0; t < grid.count(); ++t) {
    const int cx = grid.col_of(t) * grid.patch_size + grid.patch_size / 2;
    const int cy = grid.row_of(t) * grid.patch_size + grid.patch_size / 2;
    if (int(overlay.at(cx, cy, 0)) - int(overlay.at(cx, cy, 1)) > 50) flagged.insert(t);
  }
  return flagged;
}

}  // namespace

TEST_CASE("detection pools the maximum patch score") {
  auto model = small_model();
  const Image img = random_image(128, 96, 10);  // 32px patches -> 3x4 grid
  PreprocessConfig pp;
  pp.thumbnail_size = 32;
  const Detection det = detect_image(*model, img, pp, 32, 0.5, "probe");

  REQUIRE(det.grid.count() == 12);
  REQUIRE(det.patch_scores.size() == 12);

  // per-patch re-scoring oracle: score each tile independently
  const Image eq = equalize(img, pp);
  const auto patches = partition(eq, det.grid);
  double best = 0.0;
  for (int t = 0; t < 12; ++t) {
    const auto alone = score_patches(*model, {patches[t]});
    CHECK(std::abs(alone[0] - det.patch_scores[t]) <= 1e-6f);
    best = std::max(best, static_cast<double>(alone[0]));
  }
  CHECK(det.image_score == Catch::Approx(best).epsilon(1e-9));
  CHECK(det.decision == (det.image_score > 0.5 ? 1 : 0));
  for (int t = 0; t < 12; ++t)
    CHECK(int(det.patch_labels[t]) == (det.patch_scores[t] > 0.5 ? 1 : 0));
}

TEST_CASE("decision thresholds behave at the boundaries") {
  auto model = small_model();
  const Image img = random_image(64, 64, 4);
  PreprocessConfig pp;
  pp.thumbnail_size = 32;
  const Detection low = detect_image(*model, img, pp, 32, 0.999, "x");
  CHECK(low.decision == 0);
  CHECK(std::count(low.patch_labels.begin(), low.patch_labels.end(), 1) == 0);
  const Detection high = detect_image(*model, img, pp, 32, 0.001, "x");
  CHECK(high.decision == 1);
  CHECK(std::count(high.patch_labels.begin(), high.patch_labels.end(), 1) ==
        static_cast<long>(high.patch_labels.size()));
}

TEST_CASE("single-patch images degenerate to whole-image classification") {
  auto model = small_model();
  const Image img = random_image(32, 32, 6);
  PreprocessConfig pp;
  pp.thumbnail_size = 32;
  const Detection det = detect_image(*model, img, pp, 32, 0.5);
  CHECK(det.grid.count() == 1);
  CHECK(det.image_score == Catch::Approx(det.patch_scores[0]).epsilon(1e-12));
}

TEST_CASE("screening partitions the batch and is monotone in the threshold") {
  auto model = small_model();
  std::vector<Image> images;
  std::vector<std::string> ids;
  for (int i = 0; i < 10; ++i) {
    images.push_back(random_image(64, 64, 40 + i));
    ids.push_back("img_" + std::to_string(i));
  }
  PreprocessConfig pp;
  pp.thumbnail_size = 32;
  const auto lo = screen_batch(*model, images, ids, {}, pp, 32, 0.4);
  const auto hi = screen_batch(*model, images, ids, {}, pp, 32, 0.6);
  CHECK(lo.kept() + lo.filtered() == images.size());

  std::set<std::string> kept_hi;
  for (const auto& row : hi.rows)
    if (row.decision) kept_hi.insert(row.id);
  for (const auto& row : lo.rows)
    if (!row.decision) CHECK(kept_hi.count(row.id) == 0);  // kept(hi) subset of kept(lo)

  // theta just below the minimum score keeps everything
  double min_score = 1.0;
  for (const auto& row : lo.rows) min_score = std::min(min_score, row.score);
  const auto all = screen_batch(*model, images, ids, {}, pp, 32, min_score * 0.99);
  CHECK(all.kept() == images.size());

  CHECK_THROWS_AS(screen_batch(*model, images, ids, {}, pp, 32, 0.0), ConfigError);
}

TEST_CASE("screening report file carries optional true labels") {
  auto model = small_model();
  std::vector<Image> images{random_image(64, 64, 1), random_image(64, 64, 2)};
  std::vector<std::string> ids{"a", "b"};
  PreprocessConfig pp;
  pp.thumbnail_size = 32;
  const auto report = screen_batch(*model, images, ids, {1, 0}, pp, 32, 0.5);
  fs::create_directories("detect_scratch");
  write_screening_report(report, "detect_scratch/screening.tsv");
  std::ifstream in("detect_scratch/screening.tsv");
  std::string header, row_a;
  std::getline(in, header);
  CHECK(header == "image_id\tscore\tdecision\ttrue_label");
  std::getline(in, row_a);
  CHECK(row_a.rfind("a\t", 0) == 0);
  CHECK(row_a.back() == '1');
  fs::remove_all("detect_scratch");
}

TEST_CASE("localization overlay flags exactly the patches above threshold") {
  auto model = small_model();
  const Image img = random_image(128, 96, 77);
  PreprocessConfig pp;
  pp.thumbnail_size = 32;
  Detection det = detect_image(*model, img, pp, 32, 0.5, "overlay_probe");

  // force a deterministic mixed flag pattern
  det.patch_scores = {0.9f, 0.1f, 0.7f, 0.2f, 0.3f, 0.8f, 0.2f, 0.2f, 0.95f, 0.4f, 0.5f, 0.6f};
  for (int t = 0; t < 12; ++t) det.patch_labels[t] = det.patch_scores[t] > det.theta ? 1 : 0;

  const Image overlay = render_localization(det, img);
  CHECK(overlay.width == img.width);
  CHECK(overlay.height > img.height);  // legend band
  std::set<int> expected;
  for (int t = 0; t < 12; ++t)
    if (det.patch_scores[t] > det.theta) expected.insert(t);
  CHECK(flagged_from_overlay(overlay, det.grid) == expected);
}

TEST_CASE("overlay with no flags keeps the pavement untinted") {
  auto model = small_model();
  const Image img = random_image(64, 64, 13);
  PreprocessConfig pp;
  pp.thumbnail_size = 32;
  Detection det = detect_image(*model, img, pp, 32, 0.5);
  det.patch_scores.assign(det.patch_scores.size(), 0.1f);
  det.patch_labels.assign(det.patch_labels.size(), 0);
  const Image overlay = render_localization(det, img);
  CHECK(flagged_from_overlay(overlay, det.grid).empty());

  det.patch_labels.assign(det.patch_labels.size(), 1);
  const Image tinted = render_localization(det, img);
  CHECK(flagged_from_overlay(tinted, det.grid).size() == det.patch_labels.size());
}

TEST_CASE("export writes the overlay and a parsable score map") {
  auto model = small_model();
  const Image img = random_image(128, 96, 21);
  PreprocessConfig pp;
  pp.thumbnail_size = 32;
  const Detection det = detect_image(*model, img, pp, 32, 0.5, "map_probe");
  fs::create_directories("detect_scratch");
  export_localization(det, img, "detect_scratch/overlay.png", "detect_scratch/map.tsv");
  CHECK(read_png("detect_scratch/overlay.png").width == img.width);

  std::ifstream in("detect_scratch/map.tsv");
  std::string header;
  std::getline(in, header);
  CHECK(header == "t\trow\tcol\tscore\tlabel");
  int rows = 0;
  for (std::string line; std::getline(in, line);) {
    std::istringstream ss(line);
    int t, row, col, label;
    double score;
    ss >> t >> row >> col >> score >> label;
    CHECK(t == rows);
    CHECK(row == det.grid.row_of(t));
    CHECK(col == det.grid.col_of(t));
    CHECK(score == Catch::Approx(det.patch_scores[t]).margin(1e-5));
    CHECK(label == int(det.patch_labels[t]));
    ++rows;
  }
  CHECK(rows == det.grid.count());

  // geometry mismatch is rejected
  const Image other = random_image(64, 64, 5);
  CHECK_THROWS_AS(
      export_localization(det, other, "detect_scratch/x.png", "detect_scratch/x.tsv"),
      GeometryError);
  fs::remove_all("detect_scratch");
}
