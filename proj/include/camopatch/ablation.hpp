#pragma once

// Experiment conditions and ablation studies. A condition is one trainer
// config: for each seed, one patch is trained per image, then all patched
// images are evaluated together. Seeds are averaged. A study sweeps one
// field, ranks the variants with the combined score and, on request, hands
// the winner to the next study.

#include <optional>
#include <string>
#include <vector>

#include "camopatch/config.hpp"
#include "camopatch/evaluation.hpp"
#include "camopatch/io.hpp"
#include "camopatch/patch_optimizer.hpp"

namespace camo::ablation {

/// An image with its ground truth, before any patch placement.
struct Scene {
  RgbImage image;
  std::vector<eval::TruthBox> truth;
};

struct ConditionResult {
  eval::EvalReport mean;  ///< map50, PerC and per-threshold APs averaged over seeds
  std::vector<eval::EvalReport> per_seed;
  std::vector<std::vector<RgbRaster>> patches;  ///< [seed][image]
};

inline eval::EvalReport average_reports(const std::vector<eval::EvalReport>& reports) {
  if (reports.empty()) throw InvalidArgument("average_reports: nothing to average");
  eval::EvalReport m;
  m.thresholds = reports.front().thresholds;
  m.per_threshold_ap.assign(m.thresholds.size(), 0.0);
  for (const auto& r : reports) {
    m.map50_percent += r.map50_percent / double(reports.size());
    m.mean_perc_distance += r.mean_perc_distance / double(reports.size());
    for (std::size_t i = 0; i < m.per_threshold_ap.size(); ++i)
      m.per_threshold_ap[i] += r.per_threshold_ap.at(i) / double(reports.size());
    m.diagnostics.insert(m.diagnostics.end(), r.diagnostics.begin(), r.diagnostics.end());
  }
  return m;
}

inline std::vector<patch::AttackImage> prepare(std::span<const Scene> scenes, const Detector& detector,
                                               const patch::TrainerConfig& trainer) {
  std::vector<patch::AttackImage> out;
  for (const auto& s : scenes)
    out.push_back(patch::prepare_attack_image(s.image, detector, trainer.patch_ratio, trainer.target_confidence, s.truth));
  return out;
}

/// The unpatched condition (PerC 0 by definition).
inline eval::EvalReport evaluate_clean(std::span<const Scene> scenes, const Detector& detector,
                                       std::span<const double> thresholds = eval::default_thresholds()) {
  std::vector<RgbImage> images;
  eval::GroundTruth truth;
  for (const auto& s : scenes) {
    images.push_back(s.image);
    truth.push_back(s.truth);
  }
  return eval::map50_multi_threshold(detector, images, truth, thresholds);
}

/// Patched condition for each seed: image k trains with image_seed(seed, k).
/// Images run in parallel; results are reduced in index order.
inline ConditionResult run_condition(std::span<const Scene> scenes, const Detector& detector,
                                     const patch::TrainerConfig& trainer, std::span<const std::int64_t> seeds,
                                     std::span<const double> thresholds = eval::default_thresholds()) {
  if (scenes.empty()) throw InvalidArgument("run_condition: no images");
  if (seeds.empty()) throw InvalidArgument("run_condition: no seeds");
  patch::validate(trainer);
  const auto attack = prepare(scenes, detector, trainer);
  ConditionResult result;
  for (const auto seed : seeds) {
    auto patches = eval::parallel_map(attack.size(), [&](std::size_t k) {
      auto c = trainer;
      c.seed = config::image_seed(seed, k);
      return patch::train_patch(attack[k], detector, c).state.patch;
    });
    std::vector<RgbImage> shown;
    eval::GroundTruth truth;
    double perc = 0.0;
    for (std::size_t k = 0; k < attack.size(); ++k) {
      shown.push_back(imaging::apply_patch(attack[k].image, patches[k], attack[k].placement));
      truth.push_back(attack[k].truth);
      perc += color::perc_distance(patches[k], attack[k].segment);
    }
    auto report = eval::map50_multi_threshold(detector, shown, truth, thresholds);
    report.mean_perc_distance = perc / double(attack.size());
    result.per_seed.push_back(std::move(report));
    result.patches.push_back(std::move(patches));
  }
  result.mean = average_reports(result.per_seed);
  return result;
}

struct Cell {
  std::string label;  ///< "<field> = <value>"
  std::string value;
  patch::TrainerConfig trainer;
  bool failed = false;
  std::string error;
  eval::EvalReport report;  ///< seed mean; meaningless when failed
};

struct StudyResult {
  std::string name;
  std::string field;
  std::vector<Cell> cells;
  eval::ScoreTable scores;  ///< successful cells only
  std::optional<std::size_t> winner;  ///< index into cells
};

struct AblationOptions {
  std::vector<std::int64_t> seeds{0, 1, 2};
  bool carry_forward = false;
  std::vector<double> thresholds = eval::default_thresholds();
};

using CellCallback = std::function<void(const StudyResult&, const Cell&)>;

/// Runs every study in order. A cell that throws is marked failed with its
/// message and left out of the ranking. With carry_forward the winner's
/// config (lowest combined score; earliest listed on a tie) becomes the
/// base for later studies.
inline std::vector<StudyResult> run_ablation(const std::vector<config::Study>& studies,
                                             const patch::TrainerConfig& base, const Detector& detector,
                                             std::span<const Scene> scenes, const AblationOptions& options,
                                             const CellCallback& on_cell = {}) {
  if (studies.empty()) throw InvalidArgument("run_ablation: no studies");
  patch::validate(base);
  patch::TrainerConfig current = base;
  std::vector<StudyResult> results;
  for (const auto& study : studies) {
    StudyResult sr{study.name, study.field, {}, {}, std::nullopt};
    std::vector<eval::ScoreInput> inputs;
    std::vector<std::size_t> ranked;
    for (const auto& value : study.values) {
      Cell cell;
      cell.value = value;
      cell.label = study.field + " = " + value;
      const auto same = std::count_if(sr.cells.begin(), sr.cells.end(), [&](const Cell& c) { return c.value == value; });
      if (same > 0) cell.label += " (#" + std::to_string(same + 1) + ")";
      try {
        cell.trainer = config::with_override(current, study.field, value);
        cell.report = run_condition(scenes, detector, cell.trainer, options.seeds, options.thresholds).mean;
        inputs.push_back({cell.label, cell.report.map50_percent, cell.report.mean_perc_distance});
        ranked.push_back(sr.cells.size());
      } catch (const std::exception& e) {
        cell.failed = true;
        cell.error = e.what();
      }
      sr.cells.push_back(std::move(cell));
      if (on_cell) on_cell(sr, sr.cells.back());
    }
    if (!inputs.empty()) {
      sr.scores = eval::combined_rank_score(inputs);
      std::size_t best = 0;
      for (std::size_t i = 1; i < sr.scores.rows.size(); ++i)
        if (sr.scores.rows[i].combined < sr.scores.rows[best].combined) best = i;
      sr.winner = ranked[best];
      if (options.carry_forward) current = sr.cells[ranked[best]].trainer;
    }
    results.push_back(std::move(sr));
  }
  return results;
}

/// Study tables in the shape of a hyperparameter ablation report: one table
/// per study, best value per column in bold, failed cells listed after.
inline std::string ablation_markdown(const std::vector<StudyResult>& results) {
  std::string s;
  for (std::size_t i = 0; i < results.size(); ++i) {
    const auto& r = results[i];
    s += "## Study " + std::to_string(i + 1) + ": " + r.name + "\n\n";
    if (r.scores.rows.empty()) s += "_No variant completed._\n";
    else s += io::score_table_markdown(r.scores, r.field);
    for (const auto& c : r.cells)
      if (c.failed) s += "\n- **failed** " + c.label + ": " + c.error + "\n";
    if (r.winner) s += "\nSelected: " + r.cells[*r.winner].label + "\n";
    s += "\n";
  }
  return s;
}

inline std::string ablation_csv(const std::vector<StudyResult>& results) {
  std::string s = "study,field,value,status,map50,mean_perc,rank_map,rank_perc,combined\n";
  for (const auto& r : results)
    for (const auto& c : r.cells) {
      s += io::csv_field(r.name) + "," + io::csv_field(r.field) + "," + io::csv_field(c.value) + ",";
      if (c.failed) {
        s += "failed,,,,,\n";
        continue;
      }
      const auto& row = r.scores.row(c.label);
      s += "ok," + io::num(row.map50) + "," + io::num(row.mean_perc) + "," + std::to_string(row.rank_map) + "," +
           std::to_string(row.rank_perc) + "," + std::to_string(row.combined) + "\n";
    }
  return s;
}

}  // namespace camo::ablation
