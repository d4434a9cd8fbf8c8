// Acceptance suite: one PASS/FAIL line per criterion. Exit status is the
// number of failing criteria (0 when everything passes).
//
// Desk-scale setup for the attack criteria: the shipped toy recipe (seed 1),
// five synthetic scenes (seed 777), 10 steps x 200 iterations, patch_ratio
// 0.8, run seeds 0, 1, 2.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>

#include "camopatch/ablation.hpp"
#include "camopatch/runtime.hpp"
#include "test_support.hpp"

using namespace camo;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int failures = 0;

void report(bool pass, const std::string& name, const std::string& detail) {
  std::cout << (pass ? "PASS " : "FAIL ") << name << ": " << detail << std::endl;
  failures += !pass;
}

std::string f2(double v) { return io::fixed(v, 2); }

// ---------------------------------------------------------------------------

void ciede2000_oracle() {
  const auto t0 = Clock::now();
  int ok = 0;
  double worst = 0.0;
  for (const auto& p : test::kCiede2000Pairs) {
    const double err = std::abs(color::ciede2000(p.first, p.second) - p.expected);
    worst = std::max(worst, err);
    ok += err <= 1e-4;
  }
  const double s = seconds_since(t0);
  report(ok == 34 && s < 1.0, "ciede2000_oracle",
         std::to_string(ok) + "/34 pairs within 1e-4 (max error " + io::num(worst) + "), " + io::fixed(s, 3) +
             " s (limit 1 s)");
}

void gradient_checks(const toy::ToyDetector& det) {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(21);

  // PerC: five random 8x8 pairs, 100 coordinates each, h = 1e-3.
  int perc_ok = 0;
  for (int trial = 0; trial < 5; ++trial) {
    const auto patch = test::random_raster(8, 8, 100 + trial);
    const auto segment = test::random_raster(8, 8, 200 + trial);
    const auto grad = color::perc_gradient(patch, segment);
    for (int k = 0; k < 100; ++k) {
      const std::size_t i = rng() % patch.size();
      auto plus = patch, minus = patch;
      plus.values()[i] += 1e-3;
      minus.values()[i] -= 1e-3;
      const double fd = (color::perc_distance(plus, segment) - color::perc_distance(minus, segment)) / 2e-3;
      perc_ok += test::relative_error(grad.values()[i], fd) <= 1e-3;
    }
  }

  // Toy detector: a held-out validation image against its own detections,
  // 500 coordinates, h = 1e-2.
  const toy::CorpusConfig cfg;
  const auto image = toy::make_corpus(cfg, 1, 2 * 1 + 2).front().image;
  const auto targets = det.detect(image, 0.5);
  const auto grad = det.loss_gradient(image, targets).gradient;
  int toy_ok = 0;
  for (int k = 0; k < 500; ++k) {
    const std::size_t i = rng() % image.size();
    auto plus = image, minus = image;
    plus.values()[i] += 1e-2;
    minus.values()[i] -= 1e-2;
    const double fd = (det.loss(plus, targets) - det.loss(minus, targets)) / 2e-2;
    toy_ok += test::relative_error(grad.values()[i], fd) <= 1e-3;
  }
  const double s = seconds_since(t0);
  report(perc_ok >= 475 && toy_ok >= 475 && s < 120.0, "gradient_checks",
         "perc_gradient " + std::to_string(perc_ok) + "/500, toy loss_gradient " + std::to_string(toy_ok) +
             "/500 within rel. err 1e-3 (need 475 each, " + std::to_string(targets.size()) + " targets), " +
             io::fixed(s, 1) + " s (limit 120 s)");
}

void rank_score_exactness() {
  const std::vector<eval::ScoreInput> rows{{"No Patch", 99.99, 0.0},
                                           {"Black Patch", 68.64, 5312.76},
                                           {"White Patch", 69.54, 5872.89},
                                           {"Robust-DPatch", 7.27, 4346.61},
                                           {"Imperceptible Patch", 6.71, 2854.93}};
  const auto t = eval::combined_rank_score(rows);
  std::string got;
  for (const auto& r : t.rows) got += (got.empty() ? "" : ",") + std::to_string(r.combined);
  report(got == "6,7,9,5,3", "rank_score_exactness", "combined scores " + got + " (expected 6,7,9,5,3)");
}

void pr_curve_oracle() {
  const auto t0 = Clock::now();
  int mismatches = 0;
  double worst = 0.0;
  const int visited =
      test::for_each_exhaustive_ap_fixture([&](const eval::DetectionSet& dets, const eval::GroundTruth& truth) {
        const double err = std::abs(eval::average_precision(dets, truth).value - test::brute_force_ap(dets, truth));
        worst = std::max(worst, err);
        mismatches += err > 1e-12;
        return true;
      });
  const double s = seconds_since(t0);
  report(mismatches == 0 && s < 60.0, "pr_curve_oracle",
         std::to_string(visited - mismatches) + "/" + std::to_string(visited) +
             " fixtures match brute force (max |diff| " + io::num(worst) + "), " + io::fixed(s, 2) +
             " s (limit 60 s)");
}

// ---------------------------------------------------------------------------
// Attack criteria.

patch::TrainerConfig base_trainer() {
  patch::TrainerConfig c;
  c.steps = 10;
  c.iterations_per_step = 200;
  c.patch_ratio = 0.8;
  return c;
}

const std::vector<std::int64_t> kSeeds{0, 1, 2};

struct Condition {
  eval::EvalReport mean;
  double seconds = 0.0;
};

Condition run(const std::vector<ablation::Scene>& scenes, const Detector& det, const patch::TrainerConfig& c,
              const std::string& label) {
  const auto t0 = Clock::now();
  Condition out{ablation::run_condition(scenes, det, c, kSeeds).mean, 0.0};
  out.seconds = seconds_since(t0);
  std::cerr << "  " << label << ": mAP " << f2(out.mean.map50_percent) << " PerC " << f2(out.mean.mean_perc_distance)
            << " (" << f2(out.seconds) << " s)\n";
  return out;
}

void determinism(const fs::path& params, const fs::path& work) {
  config::RunConfig c;
  c.seed = 0;
  c.detector.params = params.string();
  c.trainer = base_trainer();
  fs::remove_all(work);
  std::ostringstream quiet;
  const auto a = runtime::cmd_train(c, work / "a", quiet);
  const auto b = runtime::cmd_train(c, work / "b", quiet);
  int compared = 0, differing = 0;
  for (std::size_t k = 0; k < a.sidecars.size(); ++k) {
    const auto da = runtime::image_dir(work / "a", k), db = runtime::image_dir(work / "b", k);
    for (const auto& entry : fs::directory_iterator(da)) {
      const auto name = entry.path().filename();
      if (name.extension() != ".json" && name.extension() != ".png") continue;
      ++compared;
      differing += !fs::exists(db / name) || io::read_file(entry.path()) != io::read_file(db / name);
    }
  }
  report(compared > 0 && differing == 0 && a.sidecars.size() == b.sidecars.size(), "determinism",
         std::to_string(compared - differing) + "/" + std::to_string(compared) +
             " patch files (final and per-step sidecars and PNGs) byte-identical across two runs");
}

}  // namespace

int main() {
  std::cout << std::unitbuf;
  ciede2000_oracle();
  rank_score_exactness();
  pr_curve_oracle();

  const auto t_e2e = Clock::now();
  const fs::path cache = fs::path(CAMOPATCH_TEST_CACHE_DIR) / "toy_seed1.json";
  const bool cached = fs::exists(cache);
  std::cerr << (cached ? "loading" : "training") << " the toy detector...\n";
  const auto& trained = test::trained_toy(1);
  const toy::ToyDetector det(trained.params);
  gradient_checks(det);

  // Scenes the detector finds in the clean state; an image with nothing to
  // hide cannot be attacked.
  std::vector<ablation::Scene> scenes;
  for (auto& s : toy::make_object_images({}, 5, 777))
    if (!det.detect(s.image, 0.5).empty()) scenes.push_back({std::move(s.image), std::move(s.truth)});
  std::cerr << scenes.size() << " of 5 scenes have clean detections\n";

  const auto clean = ablation::evaluate_clean(scenes, det);
  const auto full = run(scenes, det, base_trainer(), "full, n = 1");
  const double e2e_s = seconds_since(t_e2e);
  const double val_map = trained.validation_map50.empty() ? 0.0 : trained.validation_map50.back();
  report(trained.reached && val_map >= 0.90 && full.mean.map50_percent <= 0.5 * clean.map50_percent &&
             e2e_s <= 600.0,
         "end_to_end_attack",
         "detector validation mAP-50 " + f2(val_map) + " (need 0.90); patched mAP-50 " + f2(full.mean.map50_percent) +
             "% vs clean " + f2(clean.map50_percent) + "% (need <= " + f2(0.5 * clean.map50_percent) +
             "%), 3 seeds x " + std::to_string(scenes.size()) + " images, " + f2(e2e_s) + " s" +
             (cached ? " with a cached detector" : " including detector training") + " (limit 600 s)");

  auto dec_cfg = base_trainer();
  dec_cfg.plr_max0 = 0.0;
  const auto dec = run(scenes, det, dec_cfg, "deception only");
  report(full.mean.mean_perc_distance <= 0.85 * dec.mean.mean_perc_distance &&
             full.mean.map50_percent <= dec.mean.map50_percent + 10.0,
         "imperceptibility_ordering",
         "full PerC " + f2(full.mean.mean_perc_distance) + " vs deception-only " + f2(dec.mean.mean_perc_distance) +
             " (need <= " + f2(0.85 * dec.mean.mean_perc_distance) + "); mAP-50 " + f2(full.mean.map50_percent) +
             "% vs " + f2(dec.mean.map50_percent) + "% (need <= " + f2(dec.mean.map50_percent + 10.0) + "%)");

  std::vector<Condition> by_n{full};
  for (int n : {2, 4}) {
    auto c = base_trainer();
    c.n = n;
    by_n.push_back(run(scenes, det, c, "full, n = " + std::to_string(n)));
  }
  bool trend = true;
  for (std::size_t i = 1; i < by_n.size(); ++i)
    trend = trend && by_n[i].mean.mean_perc_distance <= by_n[i - 1].mean.mean_perc_distance &&
            by_n[i].mean.map50_percent >= by_n[i - 1].mean.map50_percent;
  std::string detail;
  for (std::size_t i = 0; i < by_n.size(); ++i)
    detail += std::string(i ? "; " : "") + "n=" + std::to_string(1 << i) + " PerC " +
              f2(by_n[i].mean.mean_perc_distance) + " mAP-50 " + f2(by_n[i].mean.map50_percent) + "%";
  report(trend, "frequency_controller_trend", detail + " (PerC non-increasing, mAP non-decreasing in n)");

  determinism(cache, fs::path(CAMOPATCH_TEST_CACHE_DIR) / "acceptance_determinism");

  std::cout << (failures ? std::to_string(failures) + " criteria failed" : "all criteria passed") << std::endl;
  return failures;
}
