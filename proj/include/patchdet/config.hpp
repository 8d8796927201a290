#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "patchdet/corpus.hpp"
#include "patchdet/emipld.hpp"
#include "patchdet/plin.hpp"
#include "patchdet/preprocess.hpp"

#include <nlohmann/json.hpp>

namespace patchdet {

struct EvalTargets {
  std::vector<double> recall_targets{0.90, 0.95};
  std::vector<double> noise_ratios{0.0, 0.1, 0.2, 0.3};
  double noise_sigma = 0.2;  // fraction of the 8-bit dynamic range
};

// Everything one command needs; serialized verbatim into the run manifest.
struct RunConfig {
  std::string corpus_dir = "corpus";
  int patch_size = 64;
  GenerationSpec generation;
  PreprocessConfig preprocess;
  BackboneSpec backbone;
  EmipldConfig emipld;
  EvalTargets eval;
  std::string out_dir = "runs";
  std::uint64_t seed = 0;
  double theta = 0.5;
  bool use_cache = false;
  bool resize_to_tile = false;  // center-crop inputs that do not tile exactly
  std::string run_id;           // derived from the config hash when empty

  void sync_geometry() {
    generation.patch_size = patch_size;
    backbone.input_size = patch_size;
    preprocess.thumbnail_size = patch_size;
    generation.seed = seed;
  }

  // Collects every offending field instead of stopping at the first.
  void validate() const {
    std::vector<std::string> problems;
    auto check = [&problems](bool ok, const std::string& what) {
      if (!ok) problems.push_back(what);
    };
    check(patch_size > 0, "patch_size must be > 0");
    check(backbone.input_size == patch_size,
          "backbone.input_size must equal patch_size (patch scoring contract)");
    check(preprocess.thumbnail_size == backbone.input_size,
          "preprocess.thumbnail_size must equal backbone.input_size (warm-start contract)");
    check(theta > 0.0 && theta < 1.0, "theta must lie in (0,1)");
    check(!corpus_dir.empty(), "corpus_dir must not be empty");
    check(!out_dir.empty(), "out_dir must not be empty");
    check(eval.noise_sigma > 0.0, "eval.noise_sigma must be > 0");
    for (const double t : eval.recall_targets)
      check(t > 0.0 && t <= 1.0, "eval.recall_targets entries must lie in (0,1]");
    for (const double rho : eval.noise_ratios)
      check(rho >= 0.0 && rho <= 1.0, "eval.noise_ratios entries must lie in [0,1]");
    try {
      generation.validate();
    } catch (const ConfigError& e) {
      problems.emplace_back(e.what());
    }
    try {
      preprocess.validate();
    } catch (const ConfigError& e) {
      problems.emplace_back(e.what());
    }
    try {
      emipld.validate();
    } catch (const ConfigError& e) {
      problems.emplace_back(e.what());
    }
    if (!problems.empty()) {
      std::string msg = "invalid configuration:";
      for (const auto& p : problems) msg += "\n  - " + p;
      throw ConfigError(msg);
    }
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["corpus_dir"] = corpus_dir;
    j["patch_size"] = patch_size;
    j["out_dir"] = out_dir;
    j["seed"] = seed;
    j["theta"] = theta;
    j["use_cache"] = use_cache;
    j["resize_to_tile"] = resize_to_tile;
    if (!run_id.empty()) j["run_id"] = run_id;
    j["corpus"] = {{"n_train_pos", generation.n_train_pos},
                   {"n_train_neg", generation.n_train_neg},
                   {"n_test_pos", generation.n_test_pos},
                   {"n_test_neg", generation.n_test_neg},
                   {"width", generation.width},
                   {"height", generation.height},
                   {"min_defect_pixels", generation.min_defect_pixels},
                   {"rgb", generation.rgb},
                   {"crack_weight", generation.crack_weight},
                   {"pothole_weight", generation.pothole_weight},
                   {"repair_weight", generation.repair_weight},
                   {"lane_marking_prob", generation.lane_marking_prob}};
    j["preprocess"] = {{"mode", to_string(preprocess.mode)},
                       {"clahe_clip_limit", preprocess.clahe_clip_limit},
                       {"clahe_tiles_x", preprocess.clahe_tiles_x},
                       {"clahe_tiles_y", preprocess.clahe_tiles_y}};
    j["backbone"] = {{"kind", backbone.kind}, {"in_channels", backbone.in_channels},
                     {"pretrained", backbone.pretrained}};
    j["emipld"] = {{"r", emipld.r},
                   {"s0", emipld.s0},
                   {"max_iterations", emipld.max_iterations},
                   {"warm_start", emipld.warm_start},
                   {"warm_start_epochs", emipld.warm_start_epochs},
                   {"loss_mode", to_string(emipld.loss_mode)},
                   {"irat_enabled", emipld.irat_enabled},
                   {"min_change_fraction", emipld.min_change_fraction},
                   {"val_fraction", emipld.val_fraction}};
    j["optimizer"] = {{"learning_rate", emipld.optim.learning_rate},
                      {"momentum", emipld.optim.momentum},
                      {"batch_size", emipld.optim.batch_size},
                      {"epochs_per_mstep", emipld.optim.epochs_per_mstep},
                      {"cosine_decay", emipld.optim.cosine_decay},
                      {"lr_floor_frac", emipld.optim.lr_floor_frac}};
    j["eval"] = {{"recall_targets", eval.recall_targets},
                 {"noise_ratios", eval.noise_ratios},
                 {"noise_sigma", eval.noise_sigma}};
    return j;
  }

  static RunConfig from_json(const nlohmann::json& j) {
    RunConfig cfg;
    cfg.corpus_dir = j.value("corpus_dir", cfg.corpus_dir);
    cfg.patch_size = j.value("patch_size", cfg.patch_size);
    cfg.out_dir = j.value("out_dir", cfg.out_dir);
    cfg.seed = j.value("seed", cfg.seed);
    cfg.theta = j.value("theta", cfg.theta);
    cfg.use_cache = j.value("use_cache", cfg.use_cache);
    cfg.resize_to_tile = j.value("resize_to_tile", cfg.resize_to_tile);
    cfg.run_id = j.value("run_id", cfg.run_id);
    if (j.contains("corpus")) {
      const auto& c = j["corpus"];
      cfg.generation.n_train_pos = c.value("n_train_pos", cfg.generation.n_train_pos);
      cfg.generation.n_train_neg = c.value("n_train_neg", cfg.generation.n_train_neg);
      cfg.generation.n_test_pos = c.value("n_test_pos", cfg.generation.n_test_pos);
      cfg.generation.n_test_neg = c.value("n_test_neg", cfg.generation.n_test_neg);
      cfg.generation.width = c.value("width", cfg.generation.width);
      cfg.generation.height = c.value("height", cfg.generation.height);
      cfg.generation.min_defect_pixels = c.value("min_defect_pixels", cfg.generation.min_defect_pixels);
      cfg.generation.rgb = c.value("rgb", cfg.generation.rgb);
      cfg.generation.crack_weight = c.value("crack_weight", cfg.generation.crack_weight);
      cfg.generation.pothole_weight = c.value("pothole_weight", cfg.generation.pothole_weight);
      cfg.generation.repair_weight = c.value("repair_weight", cfg.generation.repair_weight);
      cfg.generation.lane_marking_prob = c.value("lane_marking_prob", cfg.generation.lane_marking_prob);
    }
    if (j.contains("preprocess")) {
      const auto& p = j["preprocess"];
      cfg.preprocess.mode = equalize_mode_from_string(p.value("mode", to_string(cfg.preprocess.mode)));
      cfg.preprocess.clahe_clip_limit = p.value("clahe_clip_limit", cfg.preprocess.clahe_clip_limit);
      cfg.preprocess.clahe_tiles_x = p.value("clahe_tiles_x", cfg.preprocess.clahe_tiles_x);
      cfg.preprocess.clahe_tiles_y = p.value("clahe_tiles_y", cfg.preprocess.clahe_tiles_y);
    }
    if (j.contains("backbone")) {
      const auto& b = j["backbone"];
      cfg.backbone.kind = b.value("kind", cfg.backbone.kind);
      cfg.backbone.in_channels = b.value("in_channels", cfg.backbone.in_channels);
      cfg.backbone.pretrained = b.value("pretrained", cfg.backbone.pretrained);
    }
    if (j.contains("emipld")) {
      const auto& e = j["emipld"];
      cfg.emipld.r = e.value("r", cfg.emipld.r);
      cfg.emipld.s0 = e.value("s0", cfg.emipld.s0);
      cfg.emipld.max_iterations = e.value("max_iterations", cfg.emipld.max_iterations);
      cfg.emipld.warm_start = e.value("warm_start", cfg.emipld.warm_start);
      cfg.emipld.warm_start_epochs = e.value("warm_start_epochs", cfg.emipld.warm_start_epochs);
      cfg.emipld.loss_mode = loss_mode_from_string(e.value("loss_mode", to_string(cfg.emipld.loss_mode)));
      cfg.emipld.irat_enabled = e.value("irat_enabled", cfg.emipld.irat_enabled);
      cfg.emipld.min_change_fraction = e.value("min_change_fraction", cfg.emipld.min_change_fraction);
      cfg.emipld.val_fraction = e.value("val_fraction", cfg.emipld.val_fraction);
    }
    if (j.contains("optimizer")) {
      const auto& o = j["optimizer"];
      cfg.emipld.optim.learning_rate = o.value("learning_rate", cfg.emipld.optim.learning_rate);
      cfg.emipld.optim.momentum = o.value("momentum", cfg.emipld.optim.momentum);
      cfg.emipld.optim.batch_size = o.value("batch_size", cfg.emipld.optim.batch_size);
      cfg.emipld.optim.epochs_per_mstep = o.value("epochs_per_mstep", cfg.emipld.optim.epochs_per_mstep);
      cfg.emipld.optim.cosine_decay = o.value("cosine_decay", cfg.emipld.optim.cosine_decay);
      cfg.emipld.optim.lr_floor_frac = o.value("lr_floor_frac", cfg.emipld.optim.lr_floor_frac);
    }
    if (j.contains("eval")) {
      const auto& e = j["eval"];
      if (e.contains("recall_targets"))
        cfg.eval.recall_targets = e["recall_targets"].get<std::vector<double>>();
      if (e.contains("noise_ratios"))
        cfg.eval.noise_ratios = e["noise_ratios"].get<std::vector<double>>();
      cfg.eval.noise_sigma = e.value("noise_sigma", cfg.eval.noise_sigma);
    }
    cfg.sync_geometry();
    return cfg;
  }

  static RunConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
    }
    return from_json(j);
  }

  std::uint64_t hash() const {
    const std::string dump = to_json().dump();
    std::uint64_t h = 1469598103934665603ULL;
    for (const char c : dump) {
      h ^= static_cast<std::uint8_t>(c);
      h *= 1099511628211ULL;
    }
    return h;
  }

  // Deterministic run id so reruns with an identical config are idempotent.
  std::string effective_run_id() const {
    if (!run_id.empty()) return run_id;
    char buf[32];
    std::snprintf(buf, sizeof(buf), "run_%016llx", static_cast<unsigned long long>(hash()));
    return buf;
  }
};

}  // namespace patchdet
