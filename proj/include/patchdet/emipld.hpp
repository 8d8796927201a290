#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "patchdet/corpus.hpp"
#include "patchdet/errors.hpp"
#include "patchdet/metrics.hpp"
#include "patchdet/plin.hpp"
#include "patchdet/preprocess.hpp"
#include "patchdet/rng.hpp"

#include <nlohmann/json.hpp>

namespace patchdet {

struct OptimizerConfig {
  float learning_rate = 1e-3f;
  float momentum = 0.9f;
  int batch_size = 32;
  int epochs_per_mstep = 2;
  bool cosine_decay = true;      // per M-step: base -> base * lr_floor_frac
  float lr_floor_frac = 0.05f;

  void validate() const {
    if (learning_rate < 0) throw ConfigError("learning_rate must be >= 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (epochs_per_mstep < 1) throw ConfigError("epochs_per_mstep must be >= 1");
  }
};

enum class LossMode { pkbce, plain_bce };

inline std::string to_string(LossMode m) { return m == LossMode::pkbce ? "pkbce" : "plain_bce"; }

inline LossMode loss_mode_from_string(const std::string& s) {
  if (s == "pkbce") return LossMode::pkbce;
  if (s == "plain_bce") return LossMode::plain_bce;
  throw ConfigError("unknown loss mode '" + s + "' (pkbce|plain_bce)");
}

struct EmipldConfig {
  double r = 0.45;             // top-percentage for the rank-aware threshold
  double s0 = 0.5;             // initial diseased-patch ratio
  int max_iterations = 10;
  bool warm_start = true;      // thumbnail fine-tuning before the loop
  int warm_start_epochs = 4;
  LossMode loss_mode = LossMode::pkbce;
  bool irat_enabled = true;    // when off, labels stay frozen at initialization
  double min_change_fraction = 0.0;  // stop when changes <= frac * total patches (0 = exact zero)
  double val_fraction = 0.1;   // held-out slice of the train split, history logging only
  OptimizerConfig optim;

  void validate() const {
    if (!(r > 0.0 && r <= 1.0)) throw ConfigError("r must lie in (0,1]");
    if (!(s0 > 0.0 && s0 <= 1.0)) throw ConfigError("s0 must lie in (0,1]");
    if (max_iterations < 1) throw ConfigError("max_iterations must be >= 1");
    if (warm_start_epochs < 1) throw ConfigError("warm_start_epochs must be >= 1");
    if (min_change_fraction < 0.0 || min_change_fraction >= 1.0)
      throw ConfigError("min_change_fraction must lie in [0,1)");
    if (val_fraction < 0.0 || val_fraction > 0.5)
      throw ConfigError("val_fraction must lie in [0,0.5]");
    optim.validate();
  }
};

// ---------------------------------------------------------------------------
// Prior-knowledge biased cross-entropy (pure form, used for oracles and by
// the trainer through per-sample weights):
//   L = -(1/N) sum_i (g_prev_i / s_prev) * [l_i log g_i + (1-l_i) log(1-g_i)]
inline double pkbce_loss(std::span<const double> g_now, std::span<const std::uint8_t> labels,
                         std::span<const double> g_prev, double s_prev) {
  if (s_prev <= 0.0) throw ConfigError("pkbce_loss: s_prev must be > 0");
  if (g_now.size() != labels.size() || g_now.size() != g_prev.size())
    throw DataError("pkbce_loss: mismatched input lengths");
  double acc = 0.0;
  for (std::size_t i = 0; i < g_now.size(); ++i) {
    const double w = g_prev[i] / s_prev;
    const double term = labels[i] ? std::log(g_now[i]) : std::log(1.0 - g_now[i]);
    acc += w * term;
  }
  return g_now.empty() ? 0.0 : -acc / static_cast<double>(g_now.size());
}

// Analytic dL/dg_now for the loss above.
inline std::vector<double> pkbce_grad(std::span<const double> g_now,
                                      std::span<const std::uint8_t> labels,
                                      std::span<const double> g_prev, double s_prev) {
  if (s_prev <= 0.0) throw ConfigError("pkbce_grad: s_prev must be > 0");
  std::vector<double> grad(g_now.size());
  const double inv_n = g_now.empty() ? 0.0 : 1.0 / static_cast<double>(g_now.size());
  for (std::size_t i = 0; i < g_now.size(); ++i) {
    const double w = g_prev[i] / s_prev;
    grad[i] = -inv_n * w *
              (labels[i] ? 1.0 / g_now[i] : -1.0 / (1.0 - g_now[i]));
  }
  return grad;
}

// ---------------------------------------------------------------------------
// Rank-aware relabeling for one diseased image: patch t becomes 1 iff its
// score exceeds the global ratio s_prev OR it sits among the k highest scores
// of its image, k = max(1, floor(r * m)), ties broken by lower patch index.
inline std::vector<std::uint8_t> irat_relabel(std::span<const float> scores, double s_prev,
                                              double r) {
  const std::size_t m = scores.size();
  if (m == 0) throw DataError("irat_relabel: empty score vector");
  if (!(r > 0.0 && r <= 1.0)) throw ConfigError("irat_relabel: r must lie in (0,1]");
  const std::size_t k =
      std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(r * static_cast<double>(m))));
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  });
  std::vector<std::uint8_t> labels(m, 0);
  for (std::size_t i = 0; i < std::min(k, m); ++i) labels[order[i]] = 1;
  for (std::size_t t = 0; t < m; ++t)
    if (static_cast<double>(scores[t]) > s_prev) labels[t] = 1;
  return labels;
}

inline void irat_update(PatchSet& set, double s_prev, double r) {
  if (set.image_label != 1)
    throw ContractError("irat_update: normal images are never relabeled");
  if (set.scores.size() != set.patches.size())
    throw DataError("irat_update: scores unset or mismatched");
  set.working_labels = irat_relabel(set.scores, s_prev, r);
}

// ---------------------------------------------------------------------------
// In-memory training split: per image the patches (image-major, row-major
// within the image), thumbnail and image label.
struct TrainingSet {
  PatchGrid grid;
  std::vector<std::string> ids;
  std::vector<std::uint8_t> labels;
  std::vector<Image> thumbnails;
  std::vector<Image> patches;  // n * m

  std::size_t n() const { return ids.size(); }
  int m() const { return grid.count(); }
  std::span<const Image> patches_of(std::size_t i) const {
    return {patches.data() + i * static_cast<std::size_t>(grid.count()),
            static_cast<std::size_t>(grid.count())};
  }
};

inline TrainingSet build_training_set(const CorpusManifest& manifest, Split split,
                                      const PreprocessConfig& preprocess, int patch_size,
                                      bool use_cache = false, bool resize_to_tile = false) {
  const auto records = manifest.split_records(split);
  TrainingSet ts;
  if (records.empty()) return ts;
  ts.ids.resize(records.size());
  ts.labels.resize(records.size());
  ts.thumbnails.resize(records.size());

  Image first = read_png(manifest.resolve(*records[0]));
  if (resize_to_tile) first = crop_to_tiling(first, patch_size);
  ts.grid = make_grid(first, patch_size);
  ts.patches.resize(records.size() * static_cast<std::size_t>(ts.grid.count()));

  parallel_for(records.size(), [&](std::size_t i) {
    const auto& rec = *records[i];
    const std::string path = manifest.resolve(rec);
    Image raw = read_png(path);
    if (resize_to_tile) raw = crop_to_tiling(raw, patch_size);
    Image eq = use_cache ? equalize_cached(path, raw, preprocess) : equalize(raw, preprocess);
    const PatchGrid grid = make_grid(eq, patch_size);
    if (!(grid == ts.grid))
      throw GeometryError("build_training_set: image " + rec.id + " has a different geometry");
    auto patches = partition(eq, grid);
    std::move(patches.begin(), patches.end(),
              ts.patches.begin() + i * static_cast<std::size_t>(grid.count()));
    ts.thumbnails[i] = make_thumbnail(eq, preprocess.thumbnail_size);
    ts.ids[i] = rec.id;
    ts.labels[i] = rec.label;
  });
  return ts;
}

// Deterministic split of a training set into (train, val) slices.
inline std::pair<TrainingSet, TrainingSet> split_validation(const TrainingSet& full,
                                                            double val_fraction,
                                                            std::uint64_t seed) {
  const std::size_t n_val =
      static_cast<std::size_t>(std::floor(val_fraction * static_cast<double>(full.n())));
  std::vector<std::size_t> order(full.n());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(Rng::mix(seed, 0x7A11D));
  for (std::size_t i = order.size(); i > 1; --i)
    std::swap(order[i - 1], order[rng.below(i)]);
  auto take = [&](std::size_t begin, std::size_t end) {
    TrainingSet out;
    out.grid = full.grid;
    std::vector<std::size_t> sel(order.begin() + begin, order.begin() + end);
    std::sort(sel.begin(), sel.end());  // keep manifest order inside each slice
    for (const std::size_t i : sel) {
      out.ids.push_back(full.ids[i]);
      out.labels.push_back(full.labels[i]);
      out.thumbnails.push_back(full.thumbnails[i]);
      const auto span = full.patches_of(i);
      out.patches.insert(out.patches.end(), span.begin(), span.end());
    }
    return out;
  };
  return {take(n_val, full.n()), take(0, n_val)};
}

// ---------------------------------------------------------------------------
// Loop state (iteration j): labels/scores are index-aligned with the
// TrainingSet image order.
struct TrainState {
  int iteration = 0;   // j
  double s_prev = 0.5; // s_{j-1}: feeds both the IRAT threshold and the PKBCE normalizer
  std::vector<std::vector<float>> prev_scores;    // g_{t(j-1)} per image; empty before first E-step
  std::vector<std::vector<std::uint8_t>> labels;  // working labels per image
  long long change_count = 0;
  std::string model_checkpoint;
  bool has_scores = false;

  long long positive_patches() const {
    long long acc = 0;
    for (const auto& l : labels) acc += std::count(l.begin(), l.end(), 1);
    return acc;
  }
  long long total_patches() const {
    long long acc = 0;
    for (const auto& l : labels) acc += static_cast<long long>(l.size());
    return acc;
  }
};

// Broadcast initialization: every patch inherits its image label.
inline TrainState init_labels(const TrainingSet& ts, const EmipldConfig& cfg) {
  if (ts.n() == 0) throw DataError("init_labels: empty train split");
  TrainState state;
  state.iteration = 0;
  state.s_prev = cfg.s0;
  state.labels.resize(ts.n());
  for (std::size_t i = 0; i < ts.n(); ++i)
    state.labels[i].assign(static_cast<std::size_t>(ts.m()), ts.labels[i]);
  return state;
}

namespace detail {

inline float mstep_lr(const OptimizerConfig& opt, std::size_t step, std::size_t total_steps) {
  if (!opt.cosine_decay || total_steps <= 1) return opt.learning_rate;
  const double t = static_cast<double>(step) / static_cast<double>(total_steps - 1);
  const double floor = opt.learning_rate * opt.lr_floor_frac;
  return static_cast<float>(floor + (opt.learning_rate - floor) * 0.5 * (1.0 + std::cos(3.14159265358979 * t)));
}

// Shared epoch driver for warm start and M-steps.
inline double run_epochs(Backbone& model, const std::vector<const Image*>& items,
                         const std::vector<std::uint8_t>& labels,
                         const std::vector<float>& weights, const OptimizerConfig& opt,
                         int epochs, Rng& rng) {
  const std::size_t n = items.size();
  if (n == 0) throw TrainError("run_epochs: nothing to train on");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  const std::size_t batches_per_epoch = (n + opt.batch_size - 1) / opt.batch_size;
  const std::size_t total_steps = batches_per_epoch * static_cast<std::size_t>(epochs);
  std::size_t step = 0;
  double loss_sum = 0.0;
  std::size_t loss_count = 0;
  std::vector<const Image*> bp;
  std::vector<std::uint8_t> bl;
  std::vector<float> bw;
  for (int e = 0; e < epochs; ++e) {
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    for (std::size_t b = 0; b < n; b += opt.batch_size) {
      const std::size_t hi = std::min(n, b + opt.batch_size);
      bp.clear(); bl.clear(); bw.clear();
      for (std::size_t i = b; i < hi; ++i) {
        bp.push_back(items[order[i]]);
        bl.push_back(labels[order[i]]);
        bw.push_back(weights[order[i]]);
      }
      const float lr = mstep_lr(opt, step++, total_steps);
      loss_sum += model.train_batch(bp.data(), bl.data(), bw.data(), bp.size(), lr, opt.momentum);
      ++loss_count;
    }
  }
  return loss_sum / static_cast<double>(loss_count);
}

}  // namespace detail

// Thumbnail fine-tuning on (thumbnail, image label) pairs with plain
// cross-entropy; this model doubles as the whole-image baseline.
inline void warm_start(Backbone& model, const TrainingSet& ts, const EmipldConfig& cfg,
                       std::uint64_t seed) {
  if (!cfg.warm_start) return;
  if (ts.n() == 0) throw TrainError("warm_start: empty training set");
  std::vector<const Image*> items(ts.n());
  for (std::size_t i = 0; i < ts.n(); ++i) items[i] = &ts.thumbnails[i];
  std::vector<float> weights(ts.n(), 1.f);
  Rng rng(Rng::mix(seed, 0x3A47));
  detail::run_epochs(model, items, ts.labels, weights, cfg.optim, cfg.warm_start_epochs, rng);
}

// E-step: score every training patch with the current model, relabel diseased
// images through the rank-aware threshold, force normal images to zero, then
// refresh the global ratio s and the change count.
inline void e_step(TrainState& state, const Backbone& model, const TrainingSet& ts,
                   const EmipldConfig& cfg) {
  const std::size_t n = ts.n();
  const auto m = static_cast<std::size_t>(ts.m());
  std::vector<const Image*> ptrs(n * m);
  for (std::size_t i = 0; i < n * m; ++i) ptrs[i] = &ts.patches[i];
  std::vector<float> scores(n * m);
  model.score(ptrs.data(), ptrs.size(), scores.data());

  state.prev_scores.assign(n, {});
  long long changes = 0;
  long long positives = 0;
  for (std::size_t i = 0; i < n; ++i) {
    state.prev_scores[i].assign(scores.begin() + i * m, scores.begin() + (i + 1) * m);
    std::vector<std::uint8_t> next;
    if (ts.labels[i] == 1) {
      next = cfg.irat_enabled ? irat_relabel(state.prev_scores[i], state.s_prev, cfg.r)
                              : state.labels[i];
    } else {
      next.assign(m, 0);  // "should always be 0"
    }
    for (std::size_t t = 0; t < m; ++t)
      changes += std::abs(int(next[t]) - int(state.labels[i][t]));
    positives += std::count(next.begin(), next.end(), 1);
    state.labels[i] = std::move(next);
  }
  state.change_count = changes;
  const auto total = static_cast<double>(n * m);
  state.s_prev = std::max(static_cast<double>(positives) / total, 1.0 / total);
  state.has_scores = true;
}

struct IterationRecord {
  int iteration = 0;
  double mean_loss = 0.0;
  double s_after = 0.0;
  long long change_count = 0;
  double val_auc = std::numeric_limits<double>::quiet_NaN();
  std::string checkpoint_path;
};

struct EmipldRunResult {
  std::unique_ptr<Backbone> model;
  std::vector<IterationRecord> history;
  std::string warm_start_checkpoint;
  std::string final_checkpoint;
  TrainState state;
  bool converged = false;
};

namespace detail {

inline void write_label_snapshot(const std::string& path, const TrainingSet& ts,
                                 const TrainState& state) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write label snapshot " + path);
  out << "image_id\tt\tlabel\tscore\n";
  for (std::size_t i = 0; i < ts.n(); ++i) {
    for (std::size_t t = 0; t < state.labels[i].size(); ++t) {
      out << ts.ids[i] << '\t' << t << '\t' << int(state.labels[i][t]) << '\t';
      if (state.has_scores)
        out << state.prev_scores[i][t];
      else
        out << "nan";
      out << '\n';
    }
  }
}

inline double max_pool_val_auc(const Backbone& model, const TrainingSet& val) {
  if (val.n() == 0) return std::numeric_limits<double>::quiet_NaN();
  const bool has_pos = std::count(val.labels.begin(), val.labels.end(), 1) > 0;
  const bool has_neg = std::count(val.labels.begin(), val.labels.end(), 0) > 0;
  if (!has_pos || !has_neg) return std::numeric_limits<double>::quiet_NaN();
  const auto m = static_cast<std::size_t>(val.m());
  std::vector<const Image*> ptrs(val.n() * m);
  for (std::size_t i = 0; i < ptrs.size(); ++i) ptrs[i] = &val.patches[i];
  std::vector<float> scores(ptrs.size());
  model.score(ptrs.data(), ptrs.size(), scores.data());
  std::vector<double> image_scores(val.n());
  for (std::size_t i = 0; i < val.n(); ++i)
    image_scores[i] = *std::max_element(scores.begin() + i * m, scores.begin() + (i + 1) * m);
  return auc(image_scores, val.labels);
}

inline nlohmann::json history_json(const std::vector<IterationRecord>& history) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& rec : history) {
    nlohmann::json j;
    j["iteration"] = rec.iteration;
    j["loss"] = rec.mean_loss;
    j["s"] = rec.s_after;
    j["change_count"] = rec.change_count;
    if (std::isfinite(rec.val_auc)) j["val_auc"] = rec.val_auc;
    j["checkpoint"] = rec.checkpoint_path;
    arr.push_back(std::move(j));
  }
  return arr;
}

inline void write_run_manifest(const std::string& run_dir, const nlohmann::json& meta,
                               const std::vector<IterationRecord>& history,
                               const EmipldRunResult& result, bool failed) {
  nlohmann::json j = meta;
  j["iterations"] = history_json(history);
  j["converged"] = result.converged;
  j["failed"] = failed;
  if (!result.warm_start_checkpoint.empty())
    j["warm_start_checkpoint"] = result.warm_start_checkpoint;
  if (!result.final_checkpoint.empty()) j["final_checkpoint"] = result.final_checkpoint;
  std::ofstream out(std::filesystem::path(run_dir) / "manifest.json", std::ios::trunc);
  out << j.dump(2) << "\n";
}

}  // namespace detail

// The full distillation loop. Outputs under run_dir: labels_<j>.tsv
// snapshots, ckpt_<j>.bin per iteration, ckpt_warmstart.bin when enabled,
// manifest.json with the per-iteration history (also on failure).
inline EmipldRunResult run_emipld(const TrainingSet& train, const TrainingSet& val,
                                  const EmipldConfig& cfg, const BackboneSpec& backbone,
                                  const std::string& run_dir, std::uint64_t seed,
                                  const nlohmann::json& meta = nlohmann::json::object()) {
  cfg.validate();
  namespace fs = std::filesystem;
  fs::create_directories(run_dir);

  EmipldRunResult result;
  result.model = make_backbone(backbone);
  result.model->init(seed);
  result.state = init_labels(train, cfg);
  detail::write_label_snapshot((fs::path(run_dir) / "labels_0.tsv").string(), train, result.state);

  try {
    if (cfg.warm_start) {
      warm_start(*result.model, train, cfg, seed);
      result.warm_start_checkpoint = (fs::path(run_dir) / "ckpt_warmstart.bin").string();
      save_checkpoint(*result.model, result.warm_start_checkpoint);
    }

    const auto m = static_cast<std::size_t>(train.m());
    std::vector<const Image*> items(train.n() * m);
    for (std::size_t i = 0; i < items.size(); ++i) items[i] = &train.patches[i];
    std::vector<std::uint8_t> flat_labels(items.size());
    std::vector<float> flat_weights(items.size());

    Rng loop_rng(Rng::mix(seed, 0xE111));
    const long long total = result.state.total_patches();
    const auto change_threshold = static_cast<long long>(
        std::floor(cfg.min_change_fraction * static_cast<double>(total)));

    for (int j = 1; j <= cfg.max_iterations; ++j) {
      result.state.iteration = j;
      // M-step trains on l̃_{(j-1)}; weights are the previous-iteration
      // scores normalized by s_{j-1}. The first M-step has no previous
      // scores and falls back to uniform weights (plain BCE).
      const bool weighted =
          cfg.loss_mode == LossMode::pkbce && result.state.has_scores;
      for (std::size_t i = 0; i < train.n(); ++i) {
        for (std::size_t t = 0; t < m; ++t) {
          flat_labels[i * m + t] = result.state.labels[i][t];
          flat_weights[i * m + t] =
              weighted ? static_cast<float>(result.state.prev_scores[i][t] / result.state.s_prev)
                       : 1.f;
        }
      }
      Rng epoch_rng = loop_rng.fork(static_cast<std::uint64_t>(j));
      const double mean_loss = detail::run_epochs(*result.model, items, flat_labels, flat_weights,
                                                  cfg.optim, cfg.optim.epochs_per_mstep, epoch_rng);

      e_step(result.state, *result.model, train, cfg);

      IterationRecord rec;
      rec.iteration = j;
      rec.mean_loss = mean_loss;
      rec.s_after = result.state.s_prev;
      rec.change_count = result.state.change_count;
      rec.val_auc = detail::max_pool_val_auc(*result.model, val);
      rec.checkpoint_path = (fs::path(run_dir) / ("ckpt_" + std::to_string(j) + ".bin")).string();
      save_checkpoint(*result.model, rec.checkpoint_path);
      result.state.model_checkpoint = rec.checkpoint_path;
      detail::write_label_snapshot(
          (fs::path(run_dir) / ("labels_" + std::to_string(j) + ".tsv")).string(), train,
          result.state);
      result.history.push_back(rec);

      if (result.state.change_count <= change_threshold) {
        result.converged = true;
        break;
      }
    }
    result.final_checkpoint = result.state.model_checkpoint;
    detail::write_run_manifest(run_dir, meta, result.history, result, false);
  } catch (...) {
    detail::write_run_manifest(run_dir, meta, result.history, result, true);
    throw;
  }
  return result;
}

}  // namespace patchdet
