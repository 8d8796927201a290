#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "patchdet/corpus.hpp"
#include "patchdet/errors.hpp"
#include "patchdet/image.hpp"
#include "patchdet/microfont.hpp"

namespace patchdet {

// Decision rule everywhere: positive iff score > theta.

struct PrCounts {
  long long tp = 0, fp = 0, fn = 0, tn = 0;
};

struct PrResult {
  double precision = 1.0;
  double recall = 0.0;
  bool precision_defined = true;  // false when TP+FP = 0 (precision reported as 1.0)
  PrCounts counts;
};

inline PrResult precision_recall(std::span<const double> scores,
                                 std::span<const std::uint8_t> labels, double theta) {
  if (scores.empty() || scores.size() != labels.size())
    throw DataError("precision_recall: empty or mismatched inputs");
  PrResult res;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool pred = scores[i] > theta;
    if (labels[i]) {
      (pred ? res.counts.tp : res.counts.fn)++;
    } else {
      (pred ? res.counts.fp : res.counts.tn)++;
    }
  }
  const long long denom_p = res.counts.tp + res.counts.fp;
  const long long denom_r = res.counts.tp + res.counts.fn;
  res.precision_defined = denom_p > 0;
  res.precision = denom_p > 0 ? static_cast<double>(res.counts.tp) / denom_p : 1.0;
  res.recall = denom_r > 0 ? static_cast<double>(res.counts.tp) / denom_r : 0.0;
  return res;
}

// Rank-statistic AUC: ranks ascending by score with midranks for ties,
//   AUC = (S_p - N_p (N_p + 1) / 2) / (N_p N_n)
// where S_p is the rank sum over positives. Equals the probability that a
// random positive outranks a random negative, ties counted one half.
inline double auc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  if (scores.empty() || scores.size() != labels.size())
    throw DataError("auc: empty or mismatched inputs");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::size_t n_pos = 0, n_neg = 0;
  double rank_sum_pos = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + 1 + j);  // ranks are 1-based
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]]) {
        rank_sum_pos += midrank;
        ++n_pos;
      } else {
        ++n_neg;
      }
    }
    i = j;
  }
  if (n_pos == 0 || n_neg == 0)
    throw DataError("auc: requires at least one positive and one negative sample");
  const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
  return (rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn);
}

struct PAtR {
  double precision = 0.0;
  double threshold = 0.0;       // largest theta achieving the target recall
  double achieved_recall = 0.0;
  long long predicted_positive = 0;
};

// Operating point: the largest threshold whose recall >= target (no
// interpolation). Decisions use score > theta, so the returned theta sits
// just below the k-th largest positive score.
inline PAtR precision_at_recall(std::span<const double> scores,
                                std::span<const std::uint8_t> labels, double target) {
  if (target <= 0.0 || target > 1.0)
    throw ConfigError("precision_at_recall: target must lie in (0,1]");
  std::vector<double> pos;
  for (std::size_t i = 0; i < scores.size(); ++i)
    if (labels[i]) pos.push_back(scores[i]);
  if (pos.empty()) throw DataError("precision_at_recall: no positive samples");
  std::sort(pos.begin(), pos.end(), std::greater<>());
  const auto k = static_cast<std::size_t>(
      std::ceil(target * static_cast<double>(pos.size()) - 1e-12));
  const double cut = pos[std::max<std::size_t>(k, 1) - 1];  // k-th largest positive score
  PAtR res;
  long long tp = 0, fp = 0;
  double below = -1.0;  // largest score strictly below the cut
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (scores[i] >= cut) {
      (labels[i] ? tp : fp)++;
    } else {
      below = std::max(below, scores[i]);
    }
  }
  res.predicted_positive = tp + fp;
  res.precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
  res.achieved_recall = static_cast<double>(tp) / static_cast<double>(pos.size());
  res.threshold = below >= 0.0 ? 0.5 * (below + cut) : 0.5 * cut;
  return res;
}

struct PrCurvePoint {
  double recall = 0.0;
  double precision = 0.0;
  double threshold = 0.0;  // operating point: score >= threshold
};

inline std::vector<PrCurvePoint> pr_curve(std::span<const double> scores,
                                          std::span<const std::uint8_t> labels) {
  if (scores.empty() || scores.size() != labels.size())
    throw DataError("pr_curve: empty or mismatched inputs");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  const auto n_pos = static_cast<double>(std::count(labels.begin(), labels.end(), 1));
  std::vector<PrCurvePoint> curve;
  long long tp = 0, fp = 0;
  std::size_t i = 0;
  while (i < order.size()) {
    const double cut = scores[order[i]];
    while (i < order.size() && scores[order[i]] == cut) {
      (labels[order[i]] ? tp : fp)++;
      ++i;
    }
    if (n_pos > 0)
      curve.push_back({static_cast<double>(tp) / n_pos,
                       static_cast<double>(tp) / static_cast<double>(tp + fp), cut});
  }
  return curve;
}

struct EvalReport {
  double theta = 0.5;
  PrResult at_theta;
  double auc_value = 0.0;
  std::vector<PrCurvePoint> curve;
  std::map<double, PAtR> p_at_r;        // target recall -> operating point
  std::map<double, double> robustness;  // noise ratio -> auc
};

inline EvalReport evaluate_scores(std::span<const double> scores,
                                  std::span<const std::uint8_t> labels, double theta,
                                  const std::vector<double>& recall_targets) {
  EvalReport report;
  report.theta = theta;
  report.at_theta = precision_recall(scores, labels, theta);
  report.auc_value = auc(scores, labels);
  report.curve = pr_curve(scores, labels);
  for (const double t : recall_targets) report.p_at_r[t] = precision_at_recall(scores, labels, t);
  return report;
}

// Robustness protocol: corrupt every test image at each noise ratio and
// recompute the image-level AUC. rho = 0 reuses the exact clean pipeline.
inline std::map<double, double> robustness_sweep(
    const std::vector<Image>& test_images, const std::vector<std::uint8_t>& labels,
    const std::vector<double>& rhos, double sigma, std::uint64_t seed,
    const std::function<double(const Image&)>& score_image) {
  if (test_images.size() != labels.size())
    throw DataError("robustness_sweep: image/label size mismatch");
  std::map<double, double> out;
  for (const double rho : rhos) {
    std::vector<double> scores(test_images.size());
    parallel_for(test_images.size(), [&](std::size_t i) {
      const Image corrupted =
          corrupt_with_noise(test_images[i], rho, sigma, Rng::mix(seed, i));
      scores[i] = score_image(corrupted);
    });
    out[rho] = auc(scores, labels);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Report files
inline void write_report_text(const EvalReport& r, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("write_report_text: cannot open " + path);
  char buf[160];
  std::snprintf(buf, sizeof(buf), "AUC        %.4f\n", r.auc_value);
  out << buf;
  std::snprintf(buf, sizeof(buf), "theta      %.3f\n", r.theta);
  out << buf;
  std::snprintf(buf, sizeof(buf),
                "P          %.4f%s\nR          %.4f\nTP/FP/FN/TN  %lld/%lld/%lld/%lld\n",
                r.at_theta.precision, r.at_theta.precision_defined ? "" : " (undefined: TP+FP=0)",
                r.at_theta.recall, r.at_theta.counts.tp, r.at_theta.counts.fp, r.at_theta.counts.fn,
                r.at_theta.counts.tn);
  out << buf;
  for (const auto& [target, p] : r.p_at_r) {
    std::snprintf(buf, sizeof(buf), "P@R=%.0f%%    %.4f  (theta*=%.4f, achieved R=%.4f)\n",
                  target * 100.0, p.precision, p.threshold, p.achieved_recall);
    out << buf;
  }
  for (const auto& [rho, a] : r.robustness) {
    std::snprintf(buf, sizeof(buf), "AUC@rho=%.2f  %.4f\n", rho, a);
    out << buf;
  }
}

inline void write_report_records(const EvalReport& r, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("write_report_records: cannot open " + path);
  out << "metric\tvalue\tparams\n";
  out << "auc\t" << r.auc_value << "\t\n";
  out << "precision\t" << r.at_theta.precision << "\ttheta=" << r.theta
      << (r.at_theta.precision_defined ? "" : ",undefined") << "\n";
  out << "recall\t" << r.at_theta.recall << "\ttheta=" << r.theta << "\n";
  for (const auto& [target, p] : r.p_at_r)
    out << "p_at_r\t" << p.precision << "\ttarget=" << target << ",theta=" << p.threshold << "\n";
  for (const auto& [rho, a] : r.robustness) out << "auc\t" << a << "\trho=" << rho << "\n";
}

inline void write_pr_table(const std::vector<PrCurvePoint>& curve, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("write_pr_table: cannot open " + path);
  out << "recall\tprecision\tthreshold\n";
  for (const auto& p : curve) out << p.recall << '\t' << p.precision << '\t' << p.threshold << "\n";
}

// Minimal PR-curve chart; enough to eyeball an operating range.
inline Image render_pr_plot(const std::vector<PrCurvePoint>& curve, int size = 480) {
  const int margin = 32;
  Image img(size, size, 3);
  std::fill(img.data.begin(), img.data.end(), std::uint8_t{255});
  const int lo = margin, hi = size - margin;
  auto px = [&](double recall) { return lo + static_cast<int>(recall * (hi - lo)); };
  auto py = [&](double precision) { return hi - static_cast<int>(precision * (hi - lo)); };
  for (int g = 0; g <= 5; ++g) {
    const double v = g / 5.0;
    for (int x = lo; x <= hi; ++x) {
      img.at(x, py(v), 0) = img.at(x, py(v), 1) = img.at(x, py(v), 2) = 225;
      img.at(px(v), x, 0) = img.at(px(v), x, 1) = img.at(px(v), x, 2) = 225;
    }
    char label[8];
    std::snprintf(label, sizeof(label), "%.1f", v);
    stamp_text(img, px(v) - 6, hi + 6, label, 1, 60, 60, 60);
    stamp_text(img, lo - 16, py(v) - 2, label, 1, 60, 60, 60);
  }
  for (int x = lo; x <= hi; ++x) {
    img.at(x, hi, 0) = img.at(x, hi, 1) = img.at(x, hi, 2) = 0;
    img.at(lo, x, 0) = img.at(lo, x, 1) = img.at(lo, x, 2) = 0;
  }
  auto plot = [&](int x, int y) {
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        const int xx = std::clamp(x + dx, 0, size - 1), yy = std::clamp(y + dy, 0, size - 1);
        img.at(xx, yy, 0) = 200;
        img.at(xx, yy, 1) = 30;
        img.at(xx, yy, 2) = 30;
      }
  };
  for (std::size_t i = 0; i < curve.size(); ++i) {
    const int x = px(curve[i].recall), y = py(curve[i].precision);
    if (i > 0) {
      const int x0 = px(curve[i - 1].recall), y0 = py(curve[i - 1].precision);
      const int steps = std::max(std::abs(x - x0), std::abs(y - y0)) + 1;
      for (int s = 0; s <= steps; ++s)
        plot(x0 + (x - x0) * s / steps, y0 + (y - y0) * s / steps);
    } else {
      plot(x, y);
    }
  }
  return img;
}

}  // namespace patchdet
