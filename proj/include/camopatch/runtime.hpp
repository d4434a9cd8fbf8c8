#pragma once

// Command implementations behind the camopatch binary. Each command reads a
// config plus input files and writes only inside its output directory.
// Primary outputs are pure functions of the inputs; wall times and other
// run metadata go under <out>/metadata/.

#include <filesystem>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "camopatch/ablation.hpp"
#include "camopatch/config.hpp"
#include "camopatch/external_detector.hpp"
#include "camopatch/io.hpp"
#include "camopatch/patch_optimizer.hpp"
#include "camopatch/toy_detector.hpp"

namespace camo::runtime {

namespace fs = std::filesystem;
using nlohmann::json;

/// Detector selection from the command line: "toy" or "external:<command>".
inline void apply_detector_flag(config::RunConfig& c, const std::string& flag) {
  if (flag == "toy") {
    c.detector.kind = "toy";
  } else if (flag.rfind("external:", 0) == 0 && flag.size() > 9) {
    c.detector.kind = "external";
    c.detector.command = flag.substr(9);
  } else {
    throw InvalidArgument("--detector must be 'toy' or 'external:<command>'");
  }
}

/// Re-runs validation after command-line overrides.
inline void revalidate(const config::RunConfig& c, const std::string& where) {
  const auto errors = config::validation_errors(c);
  if (!errors.empty()) throw config::ConfigError(where, errors);
}

// ---------------------------------------------------------------------------
// Inputs.

inline std::vector<ablation::Scene> load_scenes(const config::RunConfig& c) {
  std::vector<ablation::Scene> scenes;
  if (c.data.source == "synthetic") {
    for (auto& s : toy::make_object_images({}, c.data.synthetic_count, std::uint64_t(c.data.synthetic_seed)))
      scenes.push_back({std::move(s.image), std::move(s.truth)});
    return scenes;
  }
  const auto truth = io::truth_from_json(json::parse(io::read_file(c.resolve(c.data.truth))));
  if (truth.size() != c.data.images.size())
    throw InvalidArgument("data.truth lists " + std::to_string(truth.size()) + " images but data.images has " +
                          std::to_string(c.data.images.size()));
  for (std::size_t k = 0; k < truth.size(); ++k) {
    auto img = io::read_png(c.resolve(c.data.images[k]));
    for (const auto& t : truth[k])
      if (!t.box.within(img.height(), img.width()))
        throw InvalidArgument("data.truth: a box of image " + std::to_string(k) + " lies outside the image");
    scenes.push_back({std::move(img), truth[k]});
  }
  return scenes;
}

/// Toy params from a file holding either bare params or a training cache.
inline toy::Params load_toy_params(const fs::path& path) {
  const json j = json::parse(io::read_file(path));
  return (j.contains("params") ? j.at("params") : j).get<toy::Params>();
}

struct DetectorHandle {
  std::unique_ptr<Detector> detector;
  std::string params_path;  ///< toy only: where the params live
  std::string note;         ///< training summary when the toy detector was trained here
};

/// For a toy detector without params the shipped recipe is trained (or
/// reloaded) under <out>/detector/. Missing the validation target is an error.
inline DetectorHandle make_detector(const config::RunConfig& c, const fs::path& out, std::ostream& log) {
  DetectorHandle h;
  if (c.detector.kind == "external") {
    h.detector = std::make_unique<ext::ExternalDetector>(c.detector.command, c.detector.pool_size);
    return h;
  }
  if (!c.detector.params.empty()) {
    h.params_path = fs::absolute(c.resolve(c.detector.params)).string();
    h.detector = std::make_unique<toy::ToyDetector>(load_toy_params(h.params_path));
    return h;
  }
  const fs::path cache = fs::absolute(out / "detector" / ("toy_seed" + std::to_string(c.detector.toy_seed) + ".json"));
  if (!fs::exists(cache)) log << "training the toy detector (seed " << c.detector.toy_seed << ")...\n";
  const auto report = toy::load_or_train(cache, {}, {}, std::uint64_t(c.detector.toy_seed));
  if (!report.reached) throw toy::TrainingError(report.message);
  h.params_path = cache.string();
  h.note = report.message;
  h.detector = std::make_unique<toy::ToyDetector>(report.params);
  return h;
}

/// Hash over everything that determines a run's outputs, not where they go:
/// the output directory is dropped and the toy params path (which may live
/// under it) is replaced by the digest of the file.
inline std::string run_hash(config::RunConfig c) {
  c.output_dir.clear();
  if (c.detector.kind == "toy" && !c.detector.params.empty())
    c.detector.params = "sha256:" + io::sha256_hex(io::read_file(c.resolve(c.detector.params)));
  return config::config_hash(c);
}

inline fs::path image_dir(const fs::path& out, std::size_t k) { return out / ("image_" + std::to_string(k)); }

// ---------------------------------------------------------------------------
// train

struct TrainSummary {
  std::vector<fs::path> sidecars;
  eval::EvalReport clean;
  eval::EvalReport patched;
};

/// Trains one patch per image. Writes per image: step_<s>.{png,json}
/// checkpoints, patch.{png,json} and run_record.csv; for the run: the
/// resolved config.toml and eval_{clean,patched}.{csv,md}.
inline TrainSummary cmd_train(config::RunConfig c, const fs::path& out, std::ostream& log = std::cerr) {
  revalidate(c, "train");
  const auto scenes = load_scenes(c);
  fs::create_directories(out);
  auto det = make_detector(c, out, log);
  if (!det.params_path.empty()) c.detector.params = det.params_path;
  c.output_dir = fs::absolute(out).string();
  for (auto& p : c.data.images) p = fs::absolute(c.resolve(p)).string();
  if (!c.data.truth.empty()) c.data.truth = fs::absolute(c.resolve(c.data.truth)).string();
  io::write_file(out / "config.toml", config::serialize(c));
  const std::string hash = run_hash(c);

  std::vector<patch::AttackImage> attack;
  std::vector<std::string> misses;
  for (std::size_t k = 0; k < scenes.size(); ++k) {
    try {
      attack.push_back(patch::prepare_attack_image(scenes[k].image, *det.detector, c.trainer.patch_ratio,
                                                   c.trainer.target_confidence, scenes[k].truth));
    } catch (const InvalidArgument& e) {
      misses.push_back("image " + std::to_string(k) + ": " + e.what());
    }
  }
  if (!misses.empty()) throw config::ConfigError("train: every image needs an initial detection", misses);

  TrainSummary summary;
  json timing = json::object();
  for (std::size_t k = 0; k < attack.size(); ++k) {
    const fs::path dir = image_dir(out, k);
    fs::create_directories(dir);
    auto tc = c.trainer;
    tc.seed = config::image_seed(*c.seed, k);
    const std::string image_digest = io::raster_digest(attack[k].image);
    auto artifact = [&](const patch::PatchState& s, const std::string& rng) {
      return io::PatchArtifact{s.patch, s.placement, hash, image_digest, s.step, rng};
    };
    auto on_step = [&](const patch::PatchState& s, const patch::RunRow& row, const std::string& rng) {
      io::write_artifact(dir / ("step_" + std::to_string(row.step)), artifact(s, rng));
      log << "image " << k << " step " << row.step + 1 << "/" << tc.steps << ": mAP " << io::fixed(row.map50)
          << " PerC " << io::fixed(row.perc) << "\n";
    };
    try {
      const auto outcome = patch::train_patch(attack[k], *det.detector, tc, on_step);
      summary.sidecars.push_back(io::write_artifact(dir / "patch", artifact(outcome.state, outcome.rng_state)));
      io::write_file(dir / "run_record.csv", io::run_record_csv(outcome.record));
      io::write_file(out / "metadata" / ("timing_image_" + std::to_string(k) + ".csv"), io::timing_csv(outcome.record));
    } catch (const patch::TrainingAborted& e) {
      io::write_file(dir / "run_record.csv", io::run_record_csv(e.record));
      io::write_file(out / "metadata" / ("timing_image_" + std::to_string(k) + ".csv"), io::timing_csv(e.record));
      throw;
    }
  }

  std::vector<RgbImage> clean_images, shown;
  eval::GroundTruth truth;
  double perc = 0.0;
  for (std::size_t k = 0; k < attack.size(); ++k) {
    const auto a = io::read_artifact(summary.sidecars[k]);
    clean_images.push_back(attack[k].image);
    shown.push_back(imaging::apply_patch(attack[k].image, a.patch, a.placement));
    truth.push_back(attack[k].truth);
    perc += color::perc_distance(a.patch, attack[k].segment);
  }
  summary.clean = eval::map50_multi_threshold(*det.detector, clean_images, truth, c.evaluation.thresholds);
  summary.patched = eval::map50_multi_threshold(*det.detector, shown, truth, c.evaluation.thresholds);
  summary.patched.mean_perc_distance = perc / double(attack.size());
  for (const auto& [name, r] : {std::pair{"clean", &summary.clean}, std::pair{"patched", &summary.patched}}) {
    io::write_file(out / ("eval_" + std::string(name) + ".csv"), io::eval_report_csv(*r));
    io::write_file(out / ("eval_" + std::string(name) + ".md"), io::eval_report_markdown(*r));
  }
  io::write_file(out / "metadata" / "run.json",
                 json{{"detector", det.detector->identity()}, {"detector_note", det.note}, {"images", attack.size()}}
                         .dump(1) + "\n");
  return summary;
}

// ---------------------------------------------------------------------------
// eval

/// Patches of a train run, checked against the scenes they were trained on.
inline std::vector<io::PatchArtifact> load_run_patches(const fs::path& run, const std::vector<ablation::Scene>& scenes) {
  std::vector<io::PatchArtifact> out;
  for (std::size_t k = 0; k < scenes.size(); ++k) {
    const fs::path sidecar = image_dir(run, k) / "patch.json";
    if (!fs::exists(sidecar)) throw InvalidArgument(run.string() + ": no patch for image " + std::to_string(k));
    auto a = io::read_artifact(sidecar);
    if (a.image_digest != io::raster_digest(scenes[k].image))
      throw InvalidArgument(sidecar.string() + ": patch was trained on a different image");
    if (!a.placement.within(scenes[k].image.height(), scenes[k].image.width()))
      throw InvalidArgument(sidecar.string() + ": placement does not fit the image");
    out.push_back(std::move(a));
  }
  if (fs::exists(image_dir(run, scenes.size()) / "patch.json"))
    throw InvalidArgument(run.string() + ": run has more patches than the config has images");
  return out;
}

inline eval::EvalReport evaluate_run(const std::vector<ablation::Scene>& scenes,
                                     const std::vector<io::PatchArtifact>* patches, const Detector& detector,
                                     std::span<const double> thresholds) {
  std::vector<RgbImage> shown;
  eval::GroundTruth truth;
  double perc = 0.0;
  for (std::size_t k = 0; k < scenes.size(); ++k) {
    truth.push_back(scenes[k].truth);
    if (!patches) {
      shown.push_back(scenes[k].image);
      continue;
    }
    const auto& a = (*patches)[k];
    shown.push_back(imaging::apply_patch(scenes[k].image, a.patch, a.placement));
    perc += color::perc_distance(a.patch, imaging::extract_segment(scenes[k].image, a.placement));
  }
  auto r = eval::map50_multi_threshold(detector, shown, truth, thresholds);
  r.mean_perc_distance = patches ? perc / double(scenes.size()) : 0.0;
  return r;
}

/// Evaluates a train run's patches (or, with no_patch, the clean images).
/// Writes eval.csv and eval.md.
inline eval::EvalReport cmd_eval(config::RunConfig c, const std::optional<fs::path>& run, bool no_patch,
                                 const fs::path& out, std::ostream& log = std::cerr) {
  revalidate(c, "eval");
  if (!no_patch && !run) throw InvalidArgument("eval needs --run <train output> or --no-patch");
  const auto scenes = load_scenes(c);
  std::vector<io::PatchArtifact> patches;
  if (!no_patch) patches = load_run_patches(*run, scenes);
  fs::create_directories(out);
  auto det = make_detector(c, out, log);
  const auto r = evaluate_run(scenes, no_patch ? nullptr : &patches, *det.detector, c.evaluation.thresholds);
  io::write_file(out / "eval.csv", io::eval_report_csv(r));
  io::write_file(out / "eval.md", io::eval_report_markdown(r));
  return r;
}

// ---------------------------------------------------------------------------
// compare

struct LabelledRun {
  std::string label;
  fs::path run;
};

/// Evaluates several train runs on the same images and scores them. With
/// include_clean a "No Patch" row is added.
inline eval::ScoreTable cmd_compare(config::RunConfig c, const std::vector<LabelledRun>& runs, bool include_clean,
                                    const fs::path& out, std::ostream& log = std::cerr) {
  revalidate(c, "compare");
  if (runs.size() + (include_clean ? 1 : 0) < 2) throw InvalidArgument("compare needs at least two conditions");
  const auto scenes = load_scenes(c);
  std::vector<std::vector<io::PatchArtifact>> loaded;
  for (const auto& r : runs) {
    try {
      loaded.push_back(load_run_patches(r.run, scenes));
    } catch (const InvalidArgument& e) {
      throw InvalidArgument("compare: '" + r.label + "' does not share the configured image set: " + e.what());
    }
  }
  fs::create_directories(out);
  auto det = make_detector(c, out, log);
  std::vector<eval::ScoreInput> inputs;
  if (include_clean) {
    const auto r = evaluate_run(scenes, nullptr, *det.detector, c.evaluation.thresholds);
    inputs.push_back({"No Patch", r.map50_percent, r.mean_perc_distance});
  }
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const auto r = evaluate_run(scenes, &loaded[i], *det.detector, c.evaluation.thresholds);
    inputs.push_back({runs[i].label, r.map50_percent, r.mean_perc_distance});
  }
  const auto table = eval::combined_rank_score(inputs);
  io::write_file(out / "scores.csv", io::score_table_csv(table));
  io::write_file(out / "scores.md", io::score_table_markdown(table));
  return table;
}

/// Offline scoring: numbers in, ranks out.
inline eval::ScoreTable cmd_compare_offline(const fs::path& scores_csv, const fs::path& out) {
  const auto table = eval::combined_rank_score(io::score_inputs_from_csv(io::read_file(scores_csv)));
  io::write_file(out / "scores.csv", io::score_table_csv(table));
  io::write_file(out / "scores.md", io::score_table_markdown(table));
  return table;
}

// ---------------------------------------------------------------------------
// ablate

inline std::vector<ablation::StudyResult> cmd_ablate(config::RunConfig c, const fs::path& out,
                                                     std::ostream& log = std::cerr) {
  revalidate(c, "ablate");
  if (c.ablation.studies.empty()) throw config::ConfigError("ablate", {"the grid defines no [[study]] tables"});
  const auto scenes = load_scenes(c);
  fs::create_directories(out);
  auto det = make_detector(c, out, log);
  ablation::AblationOptions opts{c.ablation.seeds, c.ablation.carry_forward, c.evaluation.thresholds};
  const auto results =
      ablation::run_ablation(c.ablation.studies, c.trainer, *det.detector, scenes, opts,
                             [&](const ablation::StudyResult& s, const ablation::Cell& cell) {
                               log << s.name << ": " << cell.label
                                   << (cell.failed ? " failed: " + cell.error
                                                   : " mAP " + io::fixed(cell.report.map50_percent) + " PerC " +
                                                         io::fixed(cell.report.mean_perc_distance))
                                   << "\n";
                             });
  io::write_file(out / "ablation.md", ablation::ablation_markdown(results));
  io::write_file(out / "ablation.csv", ablation::ablation_csv(results));
  return results;
}

// ---------------------------------------------------------------------------
// export

/// The printable PNG of a sidecar, re-rendered from its floats.
inline void cmd_export_patch(const fs::path& sidecar, const fs::path& png) {
  io::write_png(png, io::read_artifact(sidecar).patch);
}

/// Writes the configured scenes as scene_<k>.png plus truth.json, the layout
/// a files-based [data] section reads.
inline void cmd_export_scenes(const config::RunConfig& c, const fs::path& out) {
  const auto scenes = load_scenes(c);
  eval::GroundTruth truth;
  for (std::size_t k = 0; k < scenes.size(); ++k) {
    io::write_png(out / ("scene_" + std::to_string(k) + ".png"), scenes[k].image);
    truth.push_back(scenes[k].truth);
  }
  io::write_file(out / "truth.json", io::to_json(truth).dump(1) + "\n");
}

}  // namespace camo::runtime
