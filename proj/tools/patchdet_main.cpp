// patchdet: weakly-supervised pavement disease detection from image labels.
//
// Subcommands: generate, train, evaluate, screen, localize, robustness,
// ablate. A JSON config file provides defaults; flags override it.
// Exit codes: 0 success, 2 config error, 3 data error, 4 training failure.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "patchdet/config.hpp"
#include "patchdet/corpus.hpp"
#include "patchdet/detect.hpp"
#include "patchdet/emipld.hpp"
#include "patchdet/metrics.hpp"

namespace fs = std::filesystem;
using namespace patchdet;

namespace {

struct CommonFlags {
  std::string config_path;
  std::string out_dir;
  std::string checkpoint;
  long long seed = -1;
  double theta = -1.0;
  bool resize_to_tile = false;
};

RunConfig resolve_config(const CommonFlags& flags) {
  RunConfig cfg = flags.config_path.empty() ? RunConfig{} : RunConfig::load(flags.config_path);
  if (flags.seed >= 0) cfg.seed = static_cast<std::uint64_t>(flags.seed);
  if (!flags.out_dir.empty()) cfg.out_dir = flags.out_dir;
  if (flags.theta > 0.0) cfg.theta = flags.theta;
  if (flags.resize_to_tile) cfg.resize_to_tile = true;
  cfg.sync_geometry();
  cfg.validate();
  return cfg;
}

CorpusManifest open_corpus(const RunConfig& cfg) {
  return load_manifest((fs::path(cfg.corpus_dir) / "manifest.tsv").string());
}

std::unique_ptr<Backbone> open_checkpoint(const std::string& path) {
  if (path.empty())
    throw ConfigError("this command requires --checkpoint (run `patchdet train` first)");
  return load_checkpoint(path);
}

struct TestSet {
  std::vector<std::string> ids;
  std::vector<Image> images;  // raw, preprocessing happens inside detection
  std::vector<std::uint8_t> labels;
};

TestSet load_test_split(const RunConfig& cfg, const CorpusManifest& manifest) {
  TestSet set;
  const auto records = manifest.split_records(Split::test);
  if (records.empty()) throw DataError("corpus has no test split");
  set.ids.resize(records.size());
  set.images.resize(records.size());
  set.labels.resize(records.size());
  parallel_for(records.size(), [&](std::size_t i) {
    set.ids[i] = records[i]->id;
    Image raw = read_png(manifest.resolve(*records[i]));
    if (cfg.resize_to_tile) raw = crop_to_tiling(raw, cfg.patch_size);
    set.images[i] = std::move(raw);
    set.labels[i] = records[i]->label;
  });
  return set;
}

std::vector<double> detection_scores(const Backbone& model, const RunConfig& cfg,
                                     const TestSet& set) {
  std::vector<double> scores(set.images.size());
  parallel_for(set.images.size(), [&](std::size_t i) {
    scores[i] =
        detect_image(model, set.images[i], cfg.preprocess, cfg.patch_size, cfg.theta, set.ids[i])
            .image_score;
  });
  return scores;
}

nlohmann::json run_meta(const RunConfig& cfg, const CorpusManifest& manifest) {
  nlohmann::json meta;
  meta["run_id"] = cfg.effective_run_id();
  meta["config"] = cfg.to_json();
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(corpus_hash(manifest)));
  meta["corpus_hash"] = buf;
  return meta;
}

int cmd_generate(const CommonFlags& flags) {
  const RunConfig cfg = resolve_config(flags);
  const CorpusManifest manifest = generate_corpus(cfg.generation, cfg.corpus_dir);
  std::size_t pos = 0;
  for (const auto& r : manifest.records) pos += r.label;
  std::printf("generated %zu images (%zu diseased) under %s\n", manifest.records.size(), pos,
              cfg.corpus_dir.c_str());
  return 0;
}

int cmd_train(const CommonFlags& flags) {
  const RunConfig cfg = resolve_config(flags);
  const CorpusManifest manifest = open_corpus(cfg);
  const TrainingSet full =
      build_training_set(manifest, Split::train, cfg.preprocess, cfg.patch_size, cfg.use_cache, cfg.resize_to_tile);
  auto [train_slice, val_slice] = split_validation(full, cfg.emipld.val_fraction, cfg.seed);
  const std::string run_dir = (fs::path(cfg.out_dir) / cfg.effective_run_id()).string();
  std::printf("training run %s (%zu train / %zu val images, m=%d)\n", run_dir.c_str(),
              train_slice.n(), val_slice.n(), full.m());
  const EmipldRunResult result = run_emipld(train_slice, val_slice, cfg.emipld, cfg.backbone,
                                            run_dir, cfg.seed, run_meta(cfg, manifest));
  for (const auto& rec : result.history)
    std::printf("  iter %d  loss %.4f  s %.4f  changes %lld  val_auc %s\n", rec.iteration,
                rec.mean_loss, rec.s_after, rec.change_count,
                std::isfinite(rec.val_auc) ? std::to_string(rec.val_auc).c_str() : "n/a");
  std::printf("%s after %zu iterations; final checkpoint %s\n",
              result.converged ? "converged" : "stopped at cap", result.history.size(),
              result.final_checkpoint.c_str());
  return 0;
}

int cmd_evaluate(const CommonFlags& flags) {
  const RunConfig cfg = resolve_config(flags);
  const auto model = open_checkpoint(flags.checkpoint);
  const CorpusManifest manifest = open_corpus(cfg);
  const TestSet set = load_test_split(cfg, manifest);
  const std::vector<double> scores = detection_scores(*model, cfg, set);
  const EvalReport report =
      evaluate_scores(scores, set.labels, cfg.theta, cfg.eval.recall_targets);

  const fs::path eval_dir = fs::path(cfg.out_dir) / cfg.effective_run_id() / "eval";
  fs::create_directories(eval_dir);
  write_report_text(report, (eval_dir / "report.txt").string());
  write_report_records(report, (eval_dir / "report.tsv").string());
  write_pr_table(report.curve, (eval_dir / "pr_curve.tsv").string());
  write_png((eval_dir / "pr_curve.png").string(), render_pr_plot(report.curve));

  std::printf("AUC %.4f\n", report.auc_value);
  for (const auto& [target, p] : report.p_at_r)
    std::printf("P@R=%.0f%%  %.4f (theta*=%.4f)\n", target * 100.0, p.precision, p.threshold);
  std::printf("reports under %s\n", eval_dir.string().c_str());
  return 0;
}

int cmd_screen(const CommonFlags& flags) {
  const RunConfig cfg = resolve_config(flags);
  const auto model = open_checkpoint(flags.checkpoint);
  const CorpusManifest manifest = open_corpus(cfg);
  const TestSet set = load_test_split(cfg, manifest);
  std::vector<int> labels(set.labels.begin(), set.labels.end());
  const ScreeningReport report = screen_batch(*model, set.images, set.ids, labels,
                                              cfg.preprocess, cfg.patch_size, cfg.theta);
  const fs::path out = fs::path(cfg.out_dir) / cfg.effective_run_id() / "screening.tsv";
  fs::create_directories(out.parent_path());
  write_screening_report(report, out.string());

  std::size_t disease_total = 0, disease_kept = 0;
  for (const auto& row : report.rows)
    if (row.true_label == 1) {
      ++disease_total;
      disease_kept += row.decision;
    }
  std::printf("theta %.2f: kept %zu / %zu images (filtered %.1f%%)\n", cfg.theta, report.kept(),
              report.rows.size(), 100.0 * report.filtered() / report.rows.size());
  if (disease_total > 0)
    std::printf("diseased recall %.1f%% (%zu / %zu)\n",
                100.0 * disease_kept / disease_total, disease_kept, disease_total);
  std::printf("report %s\n", out.string().c_str());
  return 0;
}

int cmd_localize(const CommonFlags& flags, const std::string& ids_csv, int limit) {
  const RunConfig cfg = resolve_config(flags);
  const auto model = open_checkpoint(flags.checkpoint);
  const CorpusManifest manifest = open_corpus(cfg);

  std::vector<const ImageRecord*> chosen;
  if (!ids_csv.empty()) {
    std::set<std::string> wanted;
    std::stringstream ss(ids_csv);
    std::string token;
    while (std::getline(ss, token, ',')) wanted.insert(token);
    for (const auto& rec : manifest.records)
      if (wanted.count(rec.id)) chosen.push_back(&rec);
    if (chosen.size() != wanted.size())
      throw DataError("localize: some requested ids are not in the corpus");
  } else {
    for (const auto* rec : manifest.split_records(Split::test)) {
      chosen.push_back(rec);
      if (static_cast<int>(chosen.size()) >= limit) break;
    }
  }
  const fs::path overlay_dir = fs::path(cfg.out_dir) / cfg.effective_run_id() / "overlays";
  fs::create_directories(overlay_dir);
  for (const auto* rec : chosen) {
    Image raw = read_png(manifest.resolve(*rec));
    if (cfg.resize_to_tile) raw = crop_to_tiling(raw, cfg.patch_size);
    const Detection det =
        detect_image(*model, raw, cfg.preprocess, cfg.patch_size, cfg.theta, rec->id);
    export_localization(det, raw, (overlay_dir / (rec->id + ".png")).string(),
                        (overlay_dir / (rec->id + ".map.tsv")).string());
    std::printf("%s  score %.3f  decision %d\n", rec->id.c_str(), det.image_score, det.decision);
  }
  std::printf("overlays under %s\n", overlay_dir.string().c_str());
  return 0;
}

int cmd_robustness(const CommonFlags& flags) {
  const RunConfig cfg = resolve_config(flags);
  const auto model = open_checkpoint(flags.checkpoint);
  const CorpusManifest manifest = open_corpus(cfg);
  const TestSet set = load_test_split(cfg, manifest);
  const auto sweep = robustness_sweep(
      set.images, set.labels, cfg.eval.noise_ratios, cfg.eval.noise_sigma, cfg.seed,
      [&](const Image& img) {
        return detect_image(*model, img, cfg.preprocess, cfg.patch_size, cfg.theta).image_score;
      });
  const fs::path out = fs::path(cfg.out_dir) / cfg.effective_run_id() / "robustness.tsv";
  fs::create_directories(out.parent_path());
  std::ofstream f(out);
  f << "noise_ratio\tauc\n";
  for (const auto& [rho, a] : sweep) {
    f << rho << '\t' << a << '\n';
    std::printf("rho %.2f  AUC %.4f\n", rho, a);
  }
  std::printf("table %s\n", out.string().c_str());
  return 0;
}

// Cumulative ablation arms mirroring the training-time toggles.
RunConfig apply_preset(RunConfig cfg, const std::string& preset) {
  if (preset == "baseline_thumbnail") {
    cfg.preprocess.mode = EqualizeMode::none;
  } else if (preset == "clahe") {
    cfg.preprocess.mode = EqualizeMode::clahe;
  } else if (preset == "irat") {
    cfg.preprocess.mode = EqualizeMode::clahe;
    cfg.emipld.warm_start = false;
    cfg.emipld.loss_mode = LossMode::plain_bce;
    cfg.emipld.irat_enabled = true;
  } else if (preset == "ft") {
    cfg.preprocess.mode = EqualizeMode::clahe;
    cfg.emipld.warm_start = true;
    cfg.emipld.loss_mode = LossMode::plain_bce;
    cfg.emipld.irat_enabled = true;
  } else if (preset == "pkbce") {
    cfg.preprocess.mode = EqualizeMode::clahe;
    cfg.emipld.warm_start = true;
    cfg.emipld.loss_mode = LossMode::pkbce;
    cfg.emipld.irat_enabled = true;
  } else {
    throw ConfigError("unknown ablation preset '" + preset +
                      "' (baseline_thumbnail|clahe|irat|ft|pkbce)");
  }
  return cfg;
}

int cmd_ablate(const CommonFlags& flags, std::vector<std::string> presets) {
  const RunConfig base = resolve_config(flags);
  if (presets.empty())
    presets = {"baseline_thumbnail", "clahe", "irat", "ft", "pkbce"};
  const CorpusManifest manifest = open_corpus(base);
  const TestSet set = load_test_split(base, manifest);

  struct Row {
    std::string preset;
    double auc = 0.0;
    std::map<double, double> p_at_r;
  };
  std::vector<Row> rows;

  for (const auto& preset : presets) {
    RunConfig cfg = apply_preset(base, preset);
    const bool thumbnail_only = preset == "baseline_thumbnail" || preset == "clahe";
    const TrainingSet full =
        build_training_set(manifest, Split::train, cfg.preprocess, cfg.patch_size, cfg.use_cache, cfg.resize_to_tile);
    auto [train_slice, val_slice] = split_validation(full, cfg.emipld.val_fraction, cfg.seed);

    std::vector<double> scores;
    const std::string run_dir =
        (fs::path(base.out_dir) / base.effective_run_id() / ("ablate_" + preset)).string();
    if (thumbnail_only) {
      auto model = make_backbone(cfg.backbone);
      model->init(cfg.seed);
      EmipldConfig ws_cfg = cfg.emipld;
      ws_cfg.warm_start = true;
      warm_start(*model, train_slice, ws_cfg, cfg.seed);
      fs::create_directories(run_dir);
      save_checkpoint(*model, (fs::path(run_dir) / "ckpt_warmstart.bin").string());
      scores.resize(set.images.size());
      parallel_for(set.images.size(), [&](std::size_t i) {
        const Image eq = equalize(set.images[i], cfg.preprocess);
        const Image thumb = make_thumbnail(eq, cfg.preprocess.thumbnail_size);
        scores[i] = static_cast<double>(score_patches(*model, {thumb})[0]);
      });
    } else {
      const EmipldRunResult result = run_emipld(train_slice, val_slice, cfg.emipld, cfg.backbone,
                                                run_dir, cfg.seed, run_meta(cfg, manifest));
      scores = detection_scores(*result.model, cfg, set);
    }
    Row row;
    row.preset = preset;
    row.auc = auc(scores, set.labels);
    for (const double target : cfg.eval.recall_targets)
      row.p_at_r[target] = precision_at_recall(scores, set.labels, target).precision;
    rows.push_back(std::move(row));
    std::printf("%-20s AUC %.4f", preset.c_str(), rows.back().auc);
    for (const auto& [t, p] : rows.back().p_at_r) std::printf("  P@R=%.0f%% %.4f", t * 100, p);
    std::printf("\n");
  }

  const fs::path out = fs::path(base.out_dir) / base.effective_run_id() / "ablation.tsv";
  fs::create_directories(out.parent_path());
  std::ofstream f(out);
  f << "preset\tauc";
  for (const double t : base.eval.recall_targets) f << "\tp_at_r_" << t;
  f << "\n";
  for (const auto& row : rows) {
    f << row.preset << '\t' << row.auc;
    for (const auto& [t, p] : row.p_at_r) f << '\t' << p;
    f << "\n";
  }
  std::printf("table %s\n", out.string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"patch-level pavement disease detection trained from image labels only"};
  app.require_subcommand(1);

  CommonFlags flags;
  std::string ids_csv;
  std::vector<std::string> presets;
  int localize_limit = 4;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", flags.config_path, "JSON config file");
    cmd->add_option("--seed", flags.seed, "global seed (overrides config)");
    cmd->add_option("--out", flags.out_dir, "output directory (overrides config)");
    cmd->add_option("--checkpoint", flags.checkpoint, "model checkpoint path");
    cmd->add_option("--threshold", flags.theta, "decision threshold in (0,1)");
    cmd->add_flag("--resize-to-tile", flags.resize_to_tile,
                  "center-crop inputs that do not tile exactly by patch_size");
  };

  auto* generate = app.add_subcommand("generate", "generate a synthetic corpus");
  auto* train = app.add_subcommand("train", "run the EM label-distillation training loop");
  auto* evaluate = app.add_subcommand("evaluate", "evaluate a checkpoint on the test split");
  auto* screen = app.add_subcommand("screen", "threshold screening report for the test split");
  auto* localize = app.add_subcommand("localize", "export patch-level localization overlays");
  auto* robustness = app.add_subcommand("robustness", "noise-ratio robustness sweep");
  auto* ablate = app.add_subcommand("ablate", "comparative table over ablation presets");
  for (auto* cmd : {generate, train, evaluate, screen, localize, robustness, ablate})
    add_common(cmd);
  localize->add_option("--ids", ids_csv, "comma-separated image ids (default: first test images)");
  localize->add_option("--limit", localize_limit, "number of test images when --ids is omitted");
  ablate->add_option("--presets", presets,
                     "subset of presets: baseline_thumbnail clahe irat ft pkbce");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (generate->parsed()) return cmd_generate(flags);
    if (train->parsed()) return cmd_train(flags);
    if (evaluate->parsed()) return cmd_evaluate(flags);
    if (screen->parsed()) return cmd_screen(flags);
    if (localize->parsed()) return cmd_localize(flags, ids_csv, localize_limit);
    if (robustness->parsed()) return cmd_robustness(flags);
    if (ablate->parsed()) return cmd_ablate(flags, presets);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const TrainError& e) {
    std::cerr << "training error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
