#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "patchdet/metrics.hpp"
#include "patchdet/rng.hpp"

using namespace patchdet;

namespace {

// O(N_p * N_n) pairwise-comparison oracle, ties counted one half.
double auc_pairwise_oracle(const std::vector<double>& scores,
                           const std::vector<std::uint8_t>& labels) {
  double wins = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!labels[i]) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j]) continue;
      ++pairs;
      if (scores[i] > scores[j]) wins += 1.0;
      else if (scores[i] == scores[j]) wins += 0.5;
    }
  }
  return wins / static_cast<double>(pairs);
}

std::pair<std::vector<double>, std::vector<std::uint8_t>> random_set(Rng& rng, std::size_t n,
                                                                     bool heavy_ties) {
  std::vector<double> scores(n);
  std::vector<std::uint8_t> labels(n);
  bool has_pos = false, has_neg = false;
  for (std::size_t i = 0; i < n; ++i) {
    scores[i] = heavy_ties ? std::floor(rng.uniform() * 5.0) / 5.0 + 0.1 : rng.uniform();
    labels[i] = rng.bernoulli(0.5) ? 1 : 0;
    (labels[i] ? has_pos : has_neg) = true;
  }
  if (!has_pos) labels[0] = 1;
  if (!has_neg) labels[n - 1] = 0;
  return {scores, labels};
}

}  // namespace

TEST_CASE("precision/recall by hand count") {
  const std::vector<double> scores{0.9, 0.6, 0.4, 0.2};
  const std::vector<std::uint8_t> labels{1, 0, 1, 0};
  const auto res = precision_recall(scores, labels, 0.5);
  CHECK(res.counts.tp == 1);
  CHECK(res.counts.fp == 1);
  CHECK(res.counts.fn == 1);
  CHECK(res.counts.tn == 1);
  CHECK(res.precision == 0.5);
  CHECK(res.recall == 0.5);
  CHECK(res.precision_defined);
}

TEST_CASE("perfectly separated scores give P=1 R=1") {
  const std::vector<double> scores{0.9, 0.8, 0.2, 0.1};
  const std::vector<std::uint8_t> labels{1, 1, 0, 0};
  const auto res = precision_recall(scores, labels, 0.5);
  CHECK(res.precision == 1.0);
  CHECK(res.recall == 1.0);
}

TEST_CASE("threshold above all scores leaves precision undefined") {
  const std::vector<double> scores{0.3, 0.2};
  const std::vector<std::uint8_t> labels{1, 0};
  const auto res = precision_recall(scores, labels, 0.9);
  CHECK(res.recall == 0.0);
  CHECK_FALSE(res.precision_defined);
  CHECK(res.precision == 1.0);  // flagged value
}

TEST_CASE("precision_recall rejects empty input") {
  CHECK_THROWS_AS(precision_recall({}, {}, 0.5), DataError);
}

TEST_CASE("AUC trivial cases") {
  CHECK(auc(std::vector<double>{0.9, 0.8, 0.2, 0.1}, std::vector<std::uint8_t>{1, 1, 0, 0}) ==
        1.0);
  CHECK(auc(std::vector<double>{0.5, 0.5, 0.5, 0.5}, std::vector<std::uint8_t>{1, 0, 1, 0}) ==
        0.5);
  CHECK_THROWS_AS(auc(std::vector<double>{0.5, 0.6}, std::vector<std::uint8_t>{1, 1}), DataError);
}

TEST_CASE("rank-formula AUC equals the pairwise oracle") {
  Rng rng(404);
  for (int trial = 0; trial < 120; ++trial) {
    const std::size_t n = 2 + rng.below(199);
    const auto [scores, labels] = random_set(rng, n, trial % 3 == 0);
    CHECK(std::abs(auc(scores, labels) - auc_pairwise_oracle(scores, labels)) <= 1e-9);
  }
}

TEST_CASE("AUC is invariant under strictly increasing transforms") {
  Rng rng(7);
  const auto [scores, labels] = random_set(rng, 64, false);
  std::vector<double> transformed(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i)
    transformed[i] = 0.1 + 0.8 * scores[i] * scores[i];  // monotone on (0,1)
  CHECK(auc(scores, labels) == auc(transformed, labels));
}

TEST_CASE("precision at recall: hand sweep from the contract") {
  const std::vector<double> scores{0.9, 0.8, 0.7, 0.6};
  const std::vector<std::uint8_t> labels{1, 1, 0, 1};
  const auto res = precision_at_recall(scores, labels, 0.9);
  CHECK(res.precision == 0.75);  // all 3 positives kept, 1 negative above the cut
  CHECK(res.threshold < 0.6);
  CHECK(res.achieved_recall == 1.0);
  // the returned threshold really achieves the target under the > rule
  const auto at = precision_recall(scores, labels, res.threshold);
  CHECK(at.recall >= 0.9);
  CHECK(at.precision == res.precision);
}

TEST_CASE("precision at recall: perfect separation and target 1.0") {
  const std::vector<double> scores{0.9, 0.8, 0.3, 0.2};
  const std::vector<std::uint8_t> labels{1, 1, 0, 0};
  CHECK(precision_at_recall(scores, labels, 0.5).precision == 1.0);
  CHECK(precision_at_recall(scores, labels, 1.0).precision == 1.0);

  const std::vector<double> mixed{0.9, 0.5, 0.4, 0.3};
  const std::vector<std::uint8_t> mixed_labels{1, 0, 1, 0};
  const auto res = precision_at_recall(mixed, mixed_labels, 1.0);
  // cut sits at the lowest positive (0.4): tp=2, negatives >= cut: one (0.5)
  CHECK(res.precision == 2.0 / 3.0);
  CHECK(res.threshold < 0.4);
  CHECK(res.threshold > 0.3);
}

TEST_CASE("precision at recall matches a direct sweep oracle") {
  Rng rng(31);
  for (int trial = 0; trial < 60; ++trial) {
    const std::size_t n = 4 + rng.below(60);
    const auto [scores, labels] = random_set(rng, n, trial % 2 == 0);
    const double target = 0.5 + 0.5 * rng.uniform();

    // oracle: walk candidate cuts (distinct scores, descending); the first
    // cut whose >=-rule recall reaches the target is the operating point
    std::vector<double> cuts(scores.begin(), scores.end());
    std::sort(cuts.begin(), cuts.end(), std::greater<>());
    cuts.erase(std::unique(cuts.begin(), cuts.end()), cuts.end());
    const double n_pos = static_cast<double>(std::count(labels.begin(), labels.end(), 1));
    double want_precision = -1.0;
    for (const double cut : cuts) {
      long long tp = 0, fp = 0;
      for (std::size_t i = 0; i < scores.size(); ++i)
        if (scores[i] >= cut) (labels[i] ? tp : fp)++;
      if (static_cast<double>(tp) / n_pos >= target) {
        want_precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
        break;
      }
    }
    REQUIRE(want_precision >= 0.0);
    const auto res = precision_at_recall(scores, labels, target);
    CHECK(res.precision == want_precision);
    CHECK(res.achieved_recall >= target);
  }
}

TEST_CASE("precision_at_recall input validation") {
  CHECK_THROWS_AS(
      precision_at_recall(std::vector<double>{0.5}, std::vector<std::uint8_t>{0}, 0.9),
      DataError);
  CHECK_THROWS_AS(
      precision_at_recall(std::vector<double>{0.5}, std::vector<std::uint8_t>{1}, 0.0),
      ConfigError);
  CHECK_THROWS_AS(
      precision_at_recall(std::vector<double>{0.5}, std::vector<std::uint8_t>{1}, 1.5),
      ConfigError);
}

TEST_CASE("PR curve recalls are monotone in the threshold") {
  Rng rng(77);
  const auto [scores, labels] = random_set(rng, 120, true);
  const auto curve = pr_curve(scores, labels);
  REQUIRE_FALSE(curve.empty());
  for (std::size_t i = 1; i < curve.size(); ++i) {
    CHECK(curve[i].threshold < curve[i - 1].threshold);
    CHECK(curve[i].recall >= curve[i - 1].recall);
  }
  CHECK(curve.back().recall == 1.0);
}

TEST_CASE("robustness sweep: rho=0 reproduces the clean AUC exactly") {
  Rng rng(5);
  std::vector<Image> images;
  std::vector<std::uint8_t> labels;
  for (int i = 0; i < 24; ++i) {
    Image img(20, 20, 1);
    const bool diseased = i % 2 == 0;
    for (auto& v : img.data)
      v = clamp_u8((diseased ? 90.0 : 150.0) + rng.gaussian() * 25.0);
    images.push_back(std::move(img));
    labels.push_back(diseased ? 1 : 0);
  }
  // toy scorer: darker images look diseased
  auto scorer = [](const Image& img) {
    double mean = 0.0;
    for (const auto v : img.data) mean += v;
    mean /= static_cast<double>(img.size());
    return 1.0 - mean / 255.0;
  };
  std::vector<double> clean(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) clean[i] = scorer(images[i]);
  const auto sweep = robustness_sweep(images, labels, {0.0, 0.3}, 0.2, 99, scorer);
  REQUIRE(sweep.size() == 2);
  CHECK(sweep.at(0.0) == auc(clean, labels));
  CHECK(sweep.count(0.3) == 1);

  // rerun equality for a fixed seed
  CHECK(robustness_sweep(images, labels, {0.1, 0.2, 0.3}, 0.2, 99, scorer) ==
        robustness_sweep(images, labels, {0.1, 0.2, 0.3}, 0.2, 99, scorer));
}

TEST_CASE("report writers produce parsable files") {
  namespace fs = std::filesystem;
  const std::vector<double> scores{0.9, 0.8, 0.7, 0.3, 0.2, 0.1};
  const std::vector<std::uint8_t> labels{1, 1, 0, 1, 0, 0};
  auto report = evaluate_scores(scores, labels, 0.5, {0.9});
  report.robustness[0.1] = 0.83;
  fs::create_directories("metrics_scratch");
  write_report_text(report, "metrics_scratch/report.txt");
  write_report_records(report, "metrics_scratch/report.tsv");
  write_pr_table(report.curve, "metrics_scratch/pr.tsv");
  const Image plot = render_pr_plot(report.curve);
  CHECK(plot.width > 0);
  write_png("metrics_scratch/pr.png", plot);
  CHECK(read_png("metrics_scratch/pr.png") == plot);

  std::ifstream records("metrics_scratch/report.tsv");
  std::string header;
  std::getline(records, header);
  CHECK(header == "metric\tvalue\tparams");
  int lines = 0;
  for (std::string line; std::getline(records, line);) ++lines;
  CHECK(lines >= 4);
  fs::remove_all("metrics_scratch");
}
