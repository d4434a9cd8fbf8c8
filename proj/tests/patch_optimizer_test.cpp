#include <gtest/gtest.h>

#include <atomic>

#include "camopatch/patch_optimizer.hpp"
#include "test_support.hpp"

using namespace camo;
using namespace camo::patch;

namespace {

const toy::ToyDetector& trained() {
  static const toy::ToyDetector det(test::trained_toy().params);
  return det;
}

const AttackImage& attack_image() {
  static const AttackImage img = [] {
    const auto s = toy::make_object_images({}, 1, 4242).front();
    return prepare_attack_image(s.image, trained(), 0.8, 0.5, s.truth);
  }();
  return img;
}

// Forwards to another detector, counting gradient calls and optionally
// failing after a number of them.
class Instrumented final : public Detector {
 public:
  explicit Instrumented(const Detector& inner, long fail_after = -1) : inner_(inner), fail_after_(fail_after) {}
  std::vector<Detection> detect(const RgbImage& image, double thr) const override {
    return inner_.detect(image, thr);
  }
  double loss(const RgbImage& image, std::span<const Detection> t) const override { return inner_.loss(image, t); }
  LossAndGradient loss_gradient(const RgbImage& image, std::span<const Detection> t) const override {
    if (fail_after_ >= 0 && calls_ >= fail_after_) throw TransportError("worker went away");
    ++calls_;
    return inner_.loss_gradient(image, t);
  }
  std::string identity() const override { return "instrumented"; }
  long calls() const { return calls_; }

 private:
  const Detector& inner_;
  long fail_after_;
  mutable std::atomic<long> calls_{0};
};

TrainerConfig small_config() {
  TrainerConfig c;
  c.steps = 2;
  c.iterations_per_step = 10;
  c.patch_ratio = 0.8;
  c.seed = 3;
  return c;
}

}  // namespace

TEST(InitPatch, BlackIsZero) {
  const auto seg = test::random_raster(5, 4, 1);
  const auto p = init_patch(InitMode::black, seg, 1);
  for (double v : p.values()) EXPECT_EQ(v, 0.0);
}

TEST(InitPatch, ImageSegmentHasZeroPerc) {
  const auto seg = test::random_raster(5, 4, 2);
  const auto p = init_patch(InitMode::image_segment, seg, 1);
  EXPECT_EQ(p, seg);
  EXPECT_EQ(color::perc_distance(p, seg), 0.0);
}

TEST(InitPatch, RandomIsUniformInRangeAndSeeded) {
  const auto seg = test::random_raster(20, 20, 3);
  const auto a = init_patch(InitMode::random, seg, 7);
  EXPECT_EQ(a, init_patch(InitMode::random, seg, 7));
  EXPECT_NE(a, init_patch(InitMode::random, seg, 8));
  double mean = 0.0;
  for (double v : a.values()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 255.0);
    mean += v;
  }
  EXPECT_NEAR(mean / double(a.size()), 127.5, 10.0);
}

TEST(InitPatch, HybridStaysWithinNoiseBandAndClips) {
  const auto seg = test::random_raster(12, 12, 4);
  const auto p = init_patch(InitMode::hybrid, seg, 5, 25.5);
  for (std::size_t i = 0; i < p.size(); ++i) {
    EXPECT_LE(std::abs(p.values()[i] - seg.values()[i]), 25.5 + 1e-12);
    EXPECT_GE(p.values()[i], 0.0);
    EXPECT_LE(p.values()[i], 255.0);
  }
}

TEST(InitPatch, HybridSitsBetweenSegmentAndRandom) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto seg = test::random_raster(8, 8, 100 + seed);
    const double hybrid = color::perc_distance(init_patch(InitMode::hybrid, seg, seed), seg);
    const double random = color::perc_distance(init_patch(InitMode::random, seg, seed), seg);
    EXPECT_GT(hybrid, 0.0);
    EXPECT_LT(hybrid, random) << "seed " << seed;
  }
}

TEST(InitPatch, ModeNamesRoundTrip) {
  for (auto m : {InitMode::random, InitMode::black, InitMode::image_segment, InitMode::hybrid})
    EXPECT_EQ(parse_init_mode(to_string(m)), m);
  EXPECT_THROW(parse_init_mode("white"), InvalidArgument);
}

TEST(Schedules, ShouldDecept) {
  EXPECT_TRUE(should_decept(0, 4));
  EXPECT_FALSE(should_decept(1, 4));
  EXPECT_TRUE(should_decept(4, 4));
  for (long i = 0; i < 50; ++i) EXPECT_TRUE(should_decept(i, 1));
  for (int n : {1, 2, 3, 4, 7}) {
    int count = 0;
    for (long i = 0; i < 4L * n; ++i) count += should_decept(i, n);
    EXPECT_EQ(count, 4) << "n = " << n;
  }
  EXPECT_THROW(should_decept(0, 0), InvalidArgument);
}

TEST(Schedules, DeceptionLearningRate) {
  const TrainerConfig c;
  EXPECT_DOUBLE_EQ(dlr_schedule(0, c), 0.1);
  EXPECT_DOUBLE_EQ(dlr_schedule(4, c), 0.1);
  EXPECT_DOUBLE_EQ(dlr_schedule(5, c), 0.1 * 0.95);
  EXPECT_DOUBLE_EQ(dlr_schedule(9, c), 0.1 * 0.95);
  EXPECT_DOUBLE_EQ(dlr_schedule(10, c), 0.1 * 0.95 * 0.95);
}

TEST(Schedules, PerceptibilityLearningRateWithinAStep) {
  TrainerConfig c;
  c.plr_max_decay_enabled = false;
  c.iterations_per_step = 1001;
  EXPECT_DOUBLE_EQ(plr_schedule(0, 0, c), 0.5);
  EXPECT_NEAR(plr_schedule(1000, 0, c), 0.05, 1e-15);
  EXPECT_NEAR(plr_schedule(500, 0, c), 0.55 * 0.5, 1e-15);
  EXPECT_DOUBLE_EQ(plr_schedule(0, 7, c), 0.5);  // no max decay
  double prev = plr_schedule(0, 0, c);
  for (int j = 1; j < 1001; ++j) {
    const double v = plr_schedule(j, 0, c);
    EXPECT_LE(v, prev);
    prev = v;
  }
  EXPECT_THROW(plr_schedule(1001, 0, c), InvalidArgument);
}

TEST(Schedules, PerceptibilityMaximumDecaysAcrossSteps) {
  TrainerConfig c;
  EXPECT_DOUBLE_EQ(plr_schedule(0, 5, c), 0.5 * 0.95);
  double prev = plr_max_schedule(0, c);
  for (int s = 1; s < 40; ++s) {
    EXPECT_LE(plr_max_schedule(s, c), prev);
    prev = plr_max_schedule(s, c);
  }
  // The last iteration of a step lands on a tenth of that step's maximum.
  EXPECT_NEAR(plr_schedule(iterations_in_step(c) - 1, 12, c), 0.1 * 0.5 * 0.95 * 0.95, 1e-15);
}

TEST(Schedules, IterationsRescaleWithN) {
  TrainerConfig c;
  c.n = 4;
  EXPECT_EQ(iterations_in_step(c), 4000);
  c.rescale_iterations_with_n = false;
  EXPECT_EQ(iterations_in_step(c), 1000);
}

TEST(TrainerConfigValidation, ListsEveryViolation) {
  TrainerConfig c;
  c.n = 0;
  c.dlr0 = -1.0;
  c.deception_momentum = 1.0;
  c.transforms.brightness_min = 0.0;
  const auto errors = validation_errors(c);
  EXPECT_EQ(errors.size(), 4u);
  EXPECT_THROW(validate(c), InvalidArgument);
  EXPECT_TRUE(validation_errors(TrainerConfig{}).empty());
}

TEST(DeceptionUpdate, ZeroGradientAndVelocityLeavesPatch) {
  auto s = make_state(test::random_raster(4, 4, 1), {0, 0, 4, 4});
  const auto before = s.patch;
  deception_step(s, RgbRaster(4, 4), 0.1, 0.9);
  EXPECT_EQ(s.patch, before);
}

TEST(DeceptionUpdate, SignAscentAddsExactlyTheLearningRate) {
  auto s = make_state(test::random_raster(4, 4, 2, 10, 200), {0, 0, 4, 4});
  const auto before = s.patch;
  const auto g = test::random_raster(4, 4, 3, 0.001, 5.0);
  deception_step(s, g, 0.1, 0.0);
  for (std::size_t i = 0; i < s.patch.size(); ++i) EXPECT_EQ(s.patch.values()[i], before.values()[i] + 0.1);
}

TEST(DeceptionUpdate, MomentumCompoundsTheSecondIncrement) {
  auto s = make_state(RgbRaster(3, 3, 100.0), {0, 0, 3, 3});
  const RgbRaster g(3, 3, 2.0);
  deception_step(s, g, 0.1, 0.9);
  const auto mid = s.patch;
  deception_step(s, g, 0.1, 0.9);
  for (std::size_t i = 0; i < s.patch.size(); ++i) EXPECT_NEAR(s.patch.values()[i] - mid.values()[i], 0.19, 1e-12);
}

TEST(DeceptionUpdate, GradientThroughTransformMatchesFiniteDifferences) {
  const auto& img = attack_image();
  const auto patch = init_patch(InitMode::hybrid, img.segment, 9);
  const imaging::Transformation t{90, 1.3, 0.25, 0.2, 0.3};
  const auto analytic = deception_gradient(patch, img, trained(), t).gradient;
  auto loss_at = [&](const RgbRaster& p) {
    const auto composed = imaging::apply_patch(img.image, p, img.placement);
    const auto fwd = imaging::apply_transformation(composed, t, img.placement);
    std::vector<Detection> targets;
    for (const auto& d : img.targets) {
      const auto b = imaging::transform_box(d.box, composed.height(), composed.width(), t, fwd.crop);
      if (b.valid()) targets.push_back({b, d.class_id, d.confidence});
    }
    return trained().loss(fwd.image, targets);
  };
  std::size_t ok = 0;
  for (std::size_t i = 0; i < patch.size(); ++i) {
    auto up = patch, down = patch;
    up.values()[i] += 1e-3;
    down.values()[i] -= 1e-3;
    const double fd = (loss_at(up) - loss_at(down)) / 2e-3;
    ok += test::relative_error(analytic.values()[i], fd) <= 1e-3;
  }
  EXPECT_GE(ok, patch.size() * 95 / 100);
}

TEST(PerceptibilityUpdate, StationaryAtTheSegment) {
  const auto seg = test::random_raster(5, 5, 6);
  auto s = make_state(seg, {0, 0, 5, 5});
  perceptibility_update(s, seg, 0.5, 0.9);
  EXPECT_EQ(s.patch, seg);
}

TEST(PerceptibilityUpdate, SmallStepDecreasesPerc) {
  const auto seg = test::random_raster(6, 6, 7);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto s = make_state(init_patch(InitMode::hybrid, seg, seed), {0, 0, 6, 6});
    const double before = color::perc_distance(s.patch, seg);
    perceptibility_update(s, seg, 1e-3, 0.0);
    EXPECT_LT(color::perc_distance(s.patch, seg), before);
  }
}

// Twelve 8x8 fixtures: hybrid starts over two colour ranges and six seeds.
// Individual fixtures land either side of one half, so the mean is checked.
TEST(PerceptibilityUpdate, FiftyDefaultUpdatesHalveThePerc) {
  const TrainerConfig defaults;
  double ratio_sum = 0.0;
  int fixtures = 0;
  for (double lo : {0.0, 20.0})
    for (std::uint64_t s = 0; s < 6; ++s) {
      const auto seg = test::random_raster(8, 8, 8 + s, lo, 255 - lo);
      auto st = make_state(init_patch(InitMode::hybrid, seg, 1 + s), {0, 0, 8, 8});
      const double start = color::perc_distance(st.patch, seg);
      for (int i = 0; i < 50; ++i) {
        perceptibility_update(st, seg, defaults.plr_max0, defaults.plr_momentum);
        imaging::clip_rgb_inplace(st.patch);
      }
      ratio_sum += color::perc_distance(st.patch, seg) / start;
      ++fixtures;
    }
  EXPECT_LE(ratio_sum / fixtures, 0.5);
}

TEST(TrainPatch, ZeroStepsReturnsTheInitialPatch) {
  auto c = small_config();
  c.steps = 0;
  const auto out = train_patch(attack_image(), trained(), c);
  std::mt19937_64 rng(c.seed);
  EXPECT_EQ(out.state.patch, init_patch(c.init_mode, attack_image().segment, rng, c.hybrid_noise));
  EXPECT_TRUE(out.record.empty());
}

TEST(TrainPatch, PatchStaysInRangeAfterEveryIteration) {
  auto c = small_config();
  c.steps = 30;
  c.iterations_per_step = 1;  // one iteration per callback
  c.dlr0 = 40.0;              // large steps push against the clip
  int seen = 0;
  train_patch(attack_image(), trained(), c, [&](const PatchState& s, const RunRow&, const std::string&) {
    ++seen;
    for (double v : s.patch.values()) {
      ASSERT_GE(v, 0.0);
      ASSERT_LE(v, 255.0);
    }
  });
  EXPECT_EQ(seen, 30);
}

TEST(TrainPatch, IsDeterministic) {
  const auto c = small_config();
  const auto a = train_patch(attack_image(), trained(), c);
  const auto b = train_patch(attack_image(), trained(), c);
  EXPECT_EQ(a.state.patch, b.state.patch);
  EXPECT_EQ(a.rng_state, b.rng_state);
  ASSERT_EQ(a.record.size(), b.record.size());
  for (std::size_t i = 0; i < a.record.size(); ++i) {
    EXPECT_EQ(a.record[i].map50, b.record[i].map50);
    EXPECT_EQ(a.record[i].perc, b.record[i].perc);
  }
  auto other = c;
  other.seed = 4;
  EXPECT_NE(train_patch(attack_image(), trained(), other).state.patch, a.state.patch);
}

TEST(TrainPatch, RecordsOneRowPerStep) {
  auto c = small_config();
  c.steps = 6;
  c.iterations_per_step = 2;
  const auto out = train_patch(attack_image(), trained(), c);
  ASSERT_EQ(out.record.size(), 6u);
  for (int s = 0; s < 6; ++s) {
    EXPECT_EQ(out.record[s].step, s);
    EXPECT_DOUBLE_EQ(out.record[s].dlr, dlr_schedule(s, c));
    EXPECT_DOUBLE_EQ(out.record[s].plr_max, plr_max_schedule(s, c));
    EXPECT_GE(out.record[s].map50, 0.0);
    EXPECT_LE(out.record[s].map50, 100.0);
  }
  EXPECT_EQ(out.state.step, 6);
  EXPECT_EQ(out.state.iteration, 12);
}

TEST(TrainPatch, StepHoldsIterationsPerStepDeceptionUpdatesForAnyN) {
  for (int n : {1, 2, 4}) {
    auto c = small_config();
    c.n = n;
    c.steps = 1;
    c.iterations_per_step = 5;
    const Instrumented counting(trained());
    const auto out = train_patch(attack_image(), counting, c);
    EXPECT_EQ(counting.calls(), 5) << "n = " << n;
    EXPECT_EQ(out.state.iteration, 5L * n);
  }
}

TEST(TrainPatch, NoMomentumMatchesStraightLineReference) {
  auto c = small_config();
  c.deception_momentum = 0.0;
  c.plr_momentum = 0.0;
  c.n = 1;
  c.apply_transforms = false;
  c.steps = 3;
  c.iterations_per_step = 4;
  const auto& img = attack_image();
  const auto out = train_patch(img, trained(), c);

  std::mt19937_64 rng(c.seed);
  RgbRaster p = init_patch(c.init_mode, img.segment, rng, c.hybrid_noise);
  for (int step = 0; step < c.steps; ++step)
    for (int j = 0; j < c.iterations_per_step; ++j) {
      const auto g = deception_gradient(p, img, trained(), imaging::Transformation::identity()).gradient;
      for (std::size_t i = 0; i < p.size(); ++i)
        p.values()[i] += dlr_schedule(step, c) * (g.values()[i] > 0 ? 1.0 : g.values()[i] < 0 ? -1.0 : 0.0);
      const auto pg = color::perc_gradient(p, img.segment);
      for (std::size_t i = 0; i < p.size(); ++i) p.values()[i] -= plr_schedule(j, step, c) * pg.values()[i];
      for (double& v : p.values()) v = std::clamp(v, 0.0, 255.0);
    }
  EXPECT_EQ(out.state.patch, p);
}

TEST(TrainPatch, DeceptionOnlyLowersPatchedMap) {
  auto c = small_config();
  c.plr_max0 = 0.0;
  c.init_mode = InitMode::random;
  c.steps = 10;
  c.iterations_per_step = 200;
  std::vector<AttackImage> images;
  for (const auto& s : toy::make_object_images({}, 4, 99)) {
    if (trained().detect(s.image, 0.5).empty()) continue;  // nothing to attack
    images.push_back(prepare_attack_image(s.image, trained(), c.patch_ratio, 0.5, s.truth));
  }
  ASSERT_GE(images.size(), 3u);
  double clean = 0.0, patched = 0.0;
  for (const auto& img : images) {
    clean += evaluate_patch(std::span(&img, 1), nullptr, trained()).map50_percent;
    patched += train_patch(img, trained(), c).record.back().map50;
  }
  EXPECT_LT(patched, clean);
}

TEST(TrainPatch, DetectorFailureKeepsCompletedSteps) {
  auto c = small_config();
  c.steps = 4;
  c.iterations_per_step = 3;
  const Instrumented failing(trained(), 7);  // dies during the third step
  try {
    train_patch(attack_image(), failing, c);
    FAIL() << "expected TrainingAborted";
  } catch (const TrainingAborted& e) {
    EXPECT_EQ(e.record.size(), 2u);
    EXPECT_EQ(e.state.iteration, 7);
  }
}

TEST(TrainPatch, RejectsInvalidInputs) {
  auto c = small_config();
  c.n = 0;
  EXPECT_THROW(train_patch(attack_image(), trained(), c), InvalidArgument);
  EXPECT_THROW(train_patch(std::span<const AttackImage>{}, trained(), small_config()), InvalidArgument);
}

TEST(PrepareAttackImage, NeedsAnInitialDetection) {
  const RgbImage blank(64, 64, 128.0);
  EXPECT_THROW(prepare_attack_image(blank, trained(), 0.8, 0.5, {}), InvalidArgument);
}

TEST(PrepareAttackImage, PlacesPatchOnTopDetection) {
  const auto& img = attack_image();
  ASSERT_FALSE(img.targets.empty());
  const auto& box = img.targets.front().box;
  EXPECT_TRUE(img.placement.within(img.image.height(), img.image.width()));
  EXPECT_NEAR(img.placement.top_left_x + 0.5 * img.placement.patch_width, box.center_x(), 1.0);
  EXPECT_NEAR(img.placement.top_left_y + 0.5 * img.placement.patch_height, box.center_y(), 1.0);
  EXPECT_EQ(img.segment, imaging::extract_segment(img.image, img.placement));
}
