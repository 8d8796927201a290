#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "patchdet/errors.hpp"
#include "patchdet/image.hpp"
#include "patchdet/microfont.hpp"
#include "patchdet/parallel.hpp"
#include "patchdet/plin.hpp"
#include "patchdet/png_io.hpp"
#include "patchdet/preprocess.hpp"

namespace patchdet {

// Image-level result of max-pooling the patch confidences.
struct Detection {
  std::string image_id;
  double image_score = 0.0;              // max over patch scores
  int decision = 0;                      // 1 iff image_score > theta
  double theta = 0.5;
  std::vector<float> patch_scores;
  std::vector<std::uint8_t> patch_labels;  // score > theta, same theta as the image decision
  PatchGrid grid;
};

inline Detection detect_image(const Backbone& model, const Image& raw,
                              const PreprocessConfig& preprocess, int patch_size, double theta,
                              std::string image_id = "") {
  Detection det;
  det.image_id = std::move(image_id);
  det.theta = theta;
  const Image eq = equalize(raw, preprocess);
  det.grid = make_grid(eq, patch_size);
  const auto patches = partition(eq, det.grid);
  det.patch_scores = score_patches(model, patches);
  det.patch_labels.resize(det.patch_scores.size());
  det.image_score = 0.0;
  for (std::size_t t = 0; t < det.patch_scores.size(); ++t) {
    det.patch_labels[t] = det.patch_scores[t] > theta ? 1 : 0;
    det.image_score = std::max(det.image_score, static_cast<double>(det.patch_scores[t]));
  }
  det.decision = det.image_score > theta ? 1 : 0;
  return det;
}

// ---------------------------------------------------------------------------
// Screening: partition a batch into kept (score > theta) and filtered.
struct ScreeningRow {
  std::string id;
  double score = 0.0;
  int decision = 0;
  int true_label = -1;  // -1 = unknown
};

struct ScreeningReport {
  double theta = 0.5;
  std::vector<ScreeningRow> rows;  // input order

  std::size_t kept() const {
    return static_cast<std::size_t>(
        std::count_if(rows.begin(), rows.end(), [](const auto& r) { return r.decision == 1; }));
  }
  std::size_t filtered() const { return rows.size() - kept(); }
};

inline ScreeningReport screen_batch(const Backbone& model, const std::vector<Image>& images,
                                    const std::vector<std::string>& ids,
                                    const std::vector<int>& true_labels,  // empty if unknown
                                    const PreprocessConfig& preprocess, int patch_size,
                                    double theta) {
  if (!(theta > 0.0 && theta < 1.0)) throw ConfigError("screening threshold must lie in (0,1)");
  if (images.size() != ids.size()) throw DataError("screen_batch: images/ids size mismatch");
  if (!true_labels.empty() && true_labels.size() != images.size())
    throw DataError("screen_batch: labels size mismatch");
  ScreeningReport report;
  report.theta = theta;
  report.rows.resize(images.size());
  parallel_for(images.size(), [&](std::size_t i) {
    const Detection det = detect_image(model, images[i], preprocess, patch_size, theta, ids[i]);
    report.rows[i] = {ids[i], det.image_score, det.decision,
                      true_labels.empty() ? -1 : true_labels[i]};
  });
  return report;
}

inline void write_screening_report(const ScreeningReport& report, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("write_screening_report: cannot open " + path);
  out << "image_id\tscore\tdecision\ttrue_label\n";
  for (const auto& row : report.rows) {
    out << row.id << '\t' << row.score << '\t' << row.decision << '\t';
    if (row.true_label >= 0) out << row.true_label;
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// Localization overlay: flagged patches tinted red, per-patch scores stamped,
// and a legend band appended below the image. Unflagged pixels keep their
// gray levels so the flagged set can be recovered from the raster.
inline Image render_localization(const Detection& det, const Image& source) {
  const int band = 14;
  Image out(source.width, source.height + band, 3);
  for (int y = 0; y < source.height; ++y)
    for (int x = 0; x < source.width; ++x)
      for (int c = 0; c < 3; ++c)
        out.at(x, y, c) = source.channels == 3 ? source.at(x, y, c) : source.at(x, y);

  const int s = det.grid.patch_size;
  for (int t = 0; t < det.grid.count(); ++t) {
    const int px = det.grid.col_of(t) * s, py = det.grid.row_of(t) * s;
    if (det.patch_labels[static_cast<std::size_t>(t)]) {
      for (int y = py; y < py + s; ++y)
        for (int x = px; x < px + s; ++x) {
          out.at(x, y, 0) = clamp_u8(out.at(x, y, 0) * 0.55 + 255 * 0.45);
          out.at(x, y, 1) = clamp_u8(out.at(x, y, 1) * 0.55);
          out.at(x, y, 2) = clamp_u8(out.at(x, y, 2) * 0.55);
        }
    }
    char score_text[8];
    std::snprintf(score_text, sizeof(score_text), "%.2f",
                  det.patch_scores[static_cast<std::size_t>(t)]);
    for (int y = py + 2; y < std::min(py + 10, source.height); ++y)  // text backing
      for (int x = px + 2; x < std::min(px + 20, source.width); ++x)
        out.at(x, y, 0) = out.at(x, y, 1) = out.at(x, y, 2) = 235;
    stamp_text(out, px + 3, py + 3, score_text, 1, 20, 20, 20);
  }
  for (int y = source.height; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x)
      out.at(x, y, 0) = out.at(x, y, 1) = out.at(x, y, 2) = 220;
  char legend[48];
  std::snprintf(legend, sizeof(legend), "%.2f  %.3f", det.theta, det.image_score);
  stamp_text(out, 4, source.height + 4, legend, 1, 20, 20, 20);
  return out;
}

// Writes the overlay PNG and a sidecar score map `t row col score label`.
inline void export_localization(const Detection& det, const Image& source,
                                const std::string& overlay_path, const std::string& map_path) {
  if (det.grid.rows * det.grid.patch_size != source.height ||
      det.grid.cols * det.grid.patch_size != source.width)
    throw GeometryError("export_localization: detection grid does not match image");
  write_png(overlay_path, render_localization(det, source));
  std::ofstream out(map_path, std::ios::trunc);
  if (!out) throw DataError("export_localization: cannot open " + map_path);
  out << "t\trow\tcol\tscore\tlabel\n";
  for (int t = 0; t < det.grid.count(); ++t)
    out << t << '\t' << det.grid.row_of(t) << '\t' << det.grid.col_of(t) << '\t'
        << det.patch_scores[static_cast<std::size_t>(t)] << '\t'
        << int(det.patch_labels[static_cast<std::size_t>(t)]) << '\n';
}

}  // namespace patchdet
