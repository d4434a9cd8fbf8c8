#pragma once

// Patch training loop: sign-gradient deception updates (ascent on the
// detector loss through a random transformation) interleaved with PerC
// descent towards the covered image segment, both with momentum, and one
// clip to [0, 255] at the end of every iteration.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "camopatch/color_metrics.hpp"
#include "camopatch/detector.hpp"
#include "camopatch/evaluation.hpp"
#include "camopatch/imaging.hpp"
#include "camopatch/raster.hpp"

namespace camo::patch {

enum class InitMode { random, black, image_segment, hybrid };

inline std::string to_string(InitMode m) {
  switch (m) {
    case InitMode::random: return "random";
    case InitMode::black: return "black";
    case InitMode::image_segment: return "image_segment";
    case InitMode::hybrid: return "hybrid";
  }
  return "?";
}

inline InitMode parse_init_mode(std::string_view s) {
  if (s == "random") return InitMode::random;
  if (s == "black") return InitMode::black;
  if (s == "image_segment") return InitMode::image_segment;
  if (s == "hybrid") return InitMode::hybrid;
  throw InvalidArgument("unknown init mode '" + std::string(s) + "' (random, black, image_segment, hybrid)");
}

struct TrainerConfig {
  int steps = 50;
  int iterations_per_step = 1000;
  /// Multiply iterations per step by n so a step keeps the same number of
  /// deception updates.
  bool rescale_iterations_with_n = true;
  int n = 1;
  double dlr0 = 0.1;
  double dlr_decay = 0.95;
  int dlr_decay_frequency = 5;
  double deception_momentum = 0.9;
  double plr_max0 = 0.5;  ///< 0 disables perceptibility updates
  double plr_floor_fraction = 0.1;
  double plr_momentum = 0.9;
  bool plr_max_decay_enabled = true;
  double plr_max_decay = 0.95;
  int plr_max_decay_frequency = 5;
  double patch_ratio = 0.4;
  InitMode init_mode = InitMode::hybrid;
  double hybrid_noise = 25.5;
  bool apply_transforms = true;
  imaging::TransformConfig transforms;
  /// Clean detections at or above this confidence become deception targets.
  double target_confidence = 0.5;
  std::uint64_t seed = 0;

  friend bool operator==(const TrainerConfig&, const TrainerConfig&) = default;
};

/// Every violated constraint, one message per field.
inline std::vector<std::string> validation_errors(const TrainerConfig& c) {
  std::vector<std::string> e;
  auto need = [&](bool ok, const char* msg) {
    if (!ok) e.emplace_back(msg);
  };
  need(c.steps >= 0, "steps must be >= 0");
  need(c.iterations_per_step >= 1, "iterations_per_step must be >= 1");
  need(c.n >= 1, "n must be >= 1");
  need(c.dlr0 > 0.0, "dlr0 must be > 0");
  need(c.dlr_decay > 0.0 && c.dlr_decay <= 1.0, "dlr_decay must lie in (0, 1]");
  need(c.dlr_decay_frequency >= 1, "dlr_decay_frequency must be >= 1");
  need(c.deception_momentum >= 0.0 && c.deception_momentum < 1.0, "deception_momentum must lie in [0, 1)");
  need(c.plr_max0 >= 0.0, "plr_max0 must be >= 0 (0 disables perceptibility updates)");
  need(c.plr_floor_fraction > 0.0 && c.plr_floor_fraction <= 1.0, "plr_floor_fraction must lie in (0, 1]");
  need(c.plr_momentum >= 0.0 && c.plr_momentum < 1.0, "plr_momentum must lie in [0, 1)");
  need(c.plr_max_decay > 0.0 && c.plr_max_decay <= 1.0, "plr_max_decay must lie in (0, 1]");
  need(c.plr_max_decay_frequency >= 1, "plr_max_decay_frequency must be >= 1");
  need(c.patch_ratio > 0.0 && c.patch_ratio <= 1.0, "patch_ratio must lie in (0, 1]");
  need(c.hybrid_noise >= 0.0 && c.hybrid_noise <= 255.0, "hybrid_noise must lie in [0, 255]");
  need(c.target_confidence >= 0.0 && c.target_confidence <= 1.0, "target_confidence must lie in [0, 1]");
  try {
    imaging::validate(c.transforms);
  } catch (const InvalidArgument& ex) {
    e.emplace_back(ex.what());
  }
  return e;
}

inline void validate(const TrainerConfig& c) {
  const auto e = validation_errors(c);
  if (e.empty()) return;
  std::string msg = "invalid trainer config:";
  for (const auto& m : e) msg += "\n  - " + m;
  throw InvalidArgument(msg);
}

inline int iterations_in_step(const TrainerConfig& c) {
  return c.iterations_per_step * (c.rescale_iterations_with_n ? c.n : 1);
}

template <typename Rng>
RgbRaster init_patch(InitMode mode, const RgbRaster& segment, Rng& rng, double hybrid_noise = 25.5) {
  RgbRaster out(segment.height(), segment.width());
  switch (mode) {
    case InitMode::black: break;
    case InitMode::image_segment: out = segment; break;
    case InitMode::random: {
      std::uniform_real_distribution<double> u(0.0, 255.0);
      for (double& v : out.values()) v = u(rng);
      break;
    }
    case InitMode::hybrid: {
      std::uniform_real_distribution<double> u(-hybrid_noise, hybrid_noise);
      out = segment;
      for (double& v : out.values()) v = std::clamp(v + u(rng), 0.0, 255.0);
      break;
    }
  }
  return out;
}

inline RgbRaster init_patch(InitMode mode, const RgbRaster& segment, std::uint64_t seed, double hybrid_noise = 25.5) {
  std::mt19937_64 rng(seed);
  return init_patch(mode, segment, rng, hybrid_noise);
}

inline bool should_decept(long iteration, int n) {
  if (n < 1) throw InvalidArgument("should_decept: n must be >= 1");
  return iteration % n == 0;
}

inline double dlr_schedule(int step, const TrainerConfig& c) {
  return c.dlr0 * std::pow(c.dlr_decay, double(step / c.dlr_decay_frequency));
}

inline double plr_max_schedule(int step, const TrainerConfig& c) {
  if (!c.plr_max_decay_enabled) return c.plr_max0;
  return c.plr_max0 * std::pow(c.plr_max_decay, double(step / c.plr_max_decay_frequency));
}

/// Cosine annealing within a step from the step's maximum down to
/// plr_floor_fraction of it on the step's last iteration.
inline double plr_schedule(int iteration_within_step, int step, const TrainerConfig& c) {
  const int iters = iterations_in_step(c);
  if (iteration_within_step < 0 || iteration_within_step >= iters)
    throw InvalidArgument("plr_schedule: iteration outside the step");
  const double max = plr_max_schedule(step, c);
  const double floor = c.plr_floor_fraction * max;
  if (iters == 1) return max;
  const double phase = double(iteration_within_step) / double(iters - 1);
  return floor + (max - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * phase));
}

struct PatchState {
  RgbRaster patch;
  PatchPlacement placement;
  RgbRaster deception_velocity;
  RgbRaster perceptibility_velocity;
  long iteration = 0;
  int step = 0;
};

inline PatchState make_state(RgbRaster patch, const PatchPlacement& placement) {
  if (patch.height() != placement.patch_height || patch.width() != placement.patch_width)
    throw InvalidArgument("make_state: patch does not match its placement");
  PatchState s;
  s.deception_velocity = RgbRaster(patch.height(), patch.width());
  s.perceptibility_velocity = RgbRaster(patch.height(), patch.width());
  s.patch = std::move(patch);
  s.placement = placement;
  return s;
}

/// An image prepared for attack: where the patch goes, what it covers and
/// which clean detections the deception loss targets.
struct AttackImage {
  RgbImage image;
  PatchPlacement placement;
  RgbRaster segment;
  std::vector<Detection> targets;
  std::vector<eval::TruthBox> truth;
};

/// Places the patch on the top-confidence clean detection and takes every
/// clean detection at or above target_confidence as a deception target.
inline AttackImage prepare_attack_image(RgbImage image, const Detector& detector, double patch_ratio,
                                        double target_confidence, std::vector<eval::TruthBox> truth) {
  auto dets = detector.detect(image, target_confidence);
  if (dets.empty())
    throw InvalidArgument("prepare_attack_image: detector finds nothing at confidence " +
                          std::to_string(target_confidence) + "; no box to place the patch on");
  AttackImage a;
  a.placement = imaging::compute_placement(dets.front().box, patch_ratio, image.height(), image.width());
  a.segment = imaging::extract_segment(image, a.placement);
  a.targets = std::move(dets);
  a.truth = std::move(truth);
  a.image = std::move(image);
  return a;
}

inline double sign(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

/// d loss / d patch through apply -> transform -> detector.
inline LossAndGradient deception_gradient(const RgbRaster& patch, const AttackImage& img, const Detector& detector,
                                          const imaging::Transformation& t) {
  const RgbImage composed = imaging::apply_patch(img.image, patch, img.placement);
  const auto fwd = imaging::apply_transformation(composed, t, img.placement);
  std::vector<Detection> targets;
  for (const auto& d : img.targets) {
    const BoundingBox b = imaging::transform_box(d.box, composed.height(), composed.width(), t, fwd.crop);
    if (b.valid()) targets.push_back({b, d.class_id, d.confidence});
  }
  auto lg = detector.loss_gradient(fwd.image, targets);
  lg.gradient = imaging::pullback_gradient(lg.gradient, t, fwd, img.placement, composed);
  return lg;
}

/// v <- m v + sign(g); patch <- patch + dlr v. No clipping.
inline void deception_step(PatchState& s, const RgbRaster& gradient, double dlr, double momentum) {
  require_same_shape(s.patch, gradient, "deception_step");
  auto& v = s.deception_velocity.values();
  auto& p = s.patch.values();
  const auto& g = gradient.values();
  for (std::size_t i = 0; i < p.size(); ++i) {
    v[i] = momentum * v[i] + sign(g[i]);
    p[i] += dlr * v[i];
  }
}

inline void deception_update(PatchState& s, const AttackImage& img, const Detector& detector,
                             const imaging::Transformation& t, double dlr, double momentum) {
  deception_step(s, deception_gradient(s.patch, img, detector, t).gradient, dlr, momentum);
}

/// v <- m v + g; patch <- patch - plr v. No clipping.
inline void perceptibility_step(PatchState& s, const RgbRaster& gradient, double plr, double momentum) {
  require_same_shape(s.patch, gradient, "perceptibility_step");
  auto& v = s.perceptibility_velocity.values();
  auto& p = s.patch.values();
  const auto& g = gradient.values();
  for (std::size_t i = 0; i < p.size(); ++i) {
    v[i] = momentum * v[i] + g[i];
    p[i] -= plr * v[i];
  }
}

inline void perceptibility_update(PatchState& s, const RgbRaster& segment, double plr, double momentum) {
  perceptibility_step(s, color::perc_gradient(s.patch, segment), plr, momentum);
}

struct RunRow {
  int step = 0;
  double map50 = 0.0;  ///< percent, on the patched images
  double perc = 0.0;   ///< mean PerC distance of the patch to the covered segments
  double dlr = 0.0;
  double plr_max = 0.0;
  double seconds = 0.0;  ///< wall time of the step (not part of deterministic outputs)
};

using RunRecord = std::vector<RunRow>;

/// Patched-condition evaluation: the patch applied at each image's
/// placement, no transformation.
inline eval::EvalReport evaluate_patch(std::span<const AttackImage> images, const RgbRaster* patch,
                                       const Detector& detector,
                                       std::span<const double> thresholds = eval::default_thresholds()) {
  std::vector<RgbImage> shown;
  eval::GroundTruth truth;
  double perc = 0.0;
  for (const auto& img : images) {
    shown.push_back(patch ? imaging::apply_patch(img.image, *patch, img.placement) : img.image);
    truth.push_back(img.truth);
    if (patch) perc += color::perc_distance(*patch, img.segment);
  }
  auto report = eval::map50_multi_threshold(detector, shown, truth, thresholds);
  report.mean_perc_distance = images.empty() ? 0.0 : perc / double(images.size());
  return report;
}

struct TrainOutcome {
  PatchState state;
  RunRecord record;
  std::string rng_state;  ///< textual engine state after the last iteration
};

/// Raised when the detector fails mid-run; carries everything completed so far.
struct TrainingAborted : std::runtime_error {
  TrainingAborted(const std::string& what, RunRecord partial_record, PatchState last_state)
      : std::runtime_error(what), record(std::move(partial_record)), state(std::move(last_state)) {}
  RunRecord record;
  PatchState state;
};

using StepCallback = std::function<void(const PatchState&, const RunRow&, const std::string& rng_state)>;

inline std::string engine_state(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

/// Trains one patch shared by `images` (all placements must have the same
/// size; the usual case is a single image). Images are visited round-robin,
/// one per iteration. Deterministic given config.seed.
inline TrainOutcome train_patch(std::span<const AttackImage> images, const Detector& detector,
                                const TrainerConfig& config, const StepCallback& on_step = {}) {
  validate(config);
  if (images.empty()) throw InvalidArgument("train_patch: no images");
  for (const auto& img : images) {
    if (img.placement.patch_height != images[0].placement.patch_height ||
        img.placement.patch_width != images[0].placement.patch_width)
      throw InvalidArgument("train_patch: images sharing a patch need equal patch sizes");
    if (!img.segment.same_shape(RgbRaster(img.placement.patch_height, img.placement.patch_width)))
      throw InvalidArgument("train_patch: segment does not match placement");
  }

  std::mt19937_64 rng(config.seed);
  PatchState state = make_state(init_patch(config.init_mode, images[0].segment, rng, config.hybrid_noise),
                                images[0].placement);
  imaging::clip_rgb_inplace(state.patch);
  RunRecord record;
  const int iters = iterations_in_step(config);

  for (int step = 0; step < config.steps; ++step) {
    const auto start = std::chrono::steady_clock::now();
    const double dlr = dlr_schedule(step, config);
    RunRow row{step, 0.0, 0.0, dlr, plr_max_schedule(step, config), 0.0};
    try {
      for (int j = 0; j < iters; ++j) {
        const AttackImage& img = images[std::size_t(state.iteration % long(images.size()))];
        if (should_decept(state.iteration, config.n)) {
          const auto t = config.apply_transforms ? imaging::sample_transformation(rng, config.transforms)
                                                 : imaging::Transformation::identity();
          deception_update(state, img, detector, t, dlr, config.deception_momentum);
        }
        if (config.plr_max0 > 0.0)
          perceptibility_update(state, img.segment, plr_schedule(j, step, config), config.plr_momentum);
        imaging::clip_rgb_inplace(state.patch);
        ++state.iteration;
      }
      state.step = step + 1;
      const auto report = evaluate_patch(images, &state.patch, detector);
      row.map50 = report.map50_percent;
      row.perc = report.mean_perc_distance;
    } catch (const TransportError& e) {
      throw TrainingAborted(std::string("patch training aborted at step ") + std::to_string(step) + ": " + e.what(),
                            record, state);
    }
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    record.push_back(row);
    if (on_step) on_step(state, row, engine_state(rng));
  }
  return {std::move(state), std::move(record), engine_state(rng)};
}

inline TrainOutcome train_patch(const AttackImage& image, const Detector& detector, const TrainerConfig& config,
                                const StepCallback& on_step = {}) {
  return train_patch(std::span<const AttackImage>(&image, 1), detector, config, on_step);
}

}  // namespace camo::patch
