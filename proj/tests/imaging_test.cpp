#include "camopatch/imaging.hpp"

#include <gtest/gtest.h>

#include <map>
#include <random>

#include "test_support.hpp"

using namespace camo;
using namespace camo::imaging;

TEST(ComputePlacement, CentredHalfBox) {
  const auto p = compute_placement({0, 0, 100, 100}, 0.5, 200, 200);
  EXPECT_EQ(p, (PatchPlacement{25, 25, 50, 50}));
}

TEST(ComputePlacement, UnitRatioReproducesBox) {
  const auto p = compute_placement({0, 0, 100, 100}, 1.0, 100, 100);
  EXPECT_EQ(p, (PatchPlacement{0, 0, 100, 100}));
}

TEST(ComputePlacement, RectangularBox) {
  const auto p = compute_placement({10, 20, 90, 60}, 0.4, 100, 100);
  EXPECT_EQ(p.patch_width, 32);
  EXPECT_EQ(p.patch_height, 16);
  EXPECT_EQ(p.top_left_x, 34);
  EXPECT_EQ(p.top_left_y, 32);
}

TEST(ComputePlacement, RejectsDegenerateAndInvalid) {
  EXPECT_THROW(compute_placement({0, 0, 3, 3}, 0.4, 10, 10), InvalidArgument);
  EXPECT_THROW(compute_placement({5, 5, 5, 9}, 0.5, 10, 10), InvalidArgument);
  EXPECT_THROW(compute_placement({0, 0, 10, 10}, 0.0, 10, 10), InvalidArgument);
  EXPECT_THROW(compute_placement({0, 0, 10, 10}, 1.5, 10, 10), InvalidArgument);
}

TEST(ComputePlacement, ClampsInsideImage) {
  const auto p = compute_placement({-10, -10, 10, 10}, 0.8, 50, 50);
  EXPECT_TRUE(p.within(50, 50));
  EXPECT_EQ(p.top_left_x, 0);
  EXPECT_EQ(p.top_left_y, 0);
}

TEST(ExtractSegment, WholeImageAndSinglePixel) {
  const auto img = test::random_raster(7, 9, 1);
  EXPECT_EQ(extract_segment(img, {0, 0, 7, 9}), img);
  const auto px = extract_segment(img, {4, 2, 1, 1});
  for (int c = 0; c < 3; ++c) EXPECT_EQ(px.at(0, 0, c), img.at(2, 4, c));
  EXPECT_THROW(extract_segment(img, {5, 0, 2, 5}), InvalidArgument);
}

TEST(ApplyPatch, WriteThenReadIsIdentity) {
  const auto img = test::random_raster(12, 10, 2);
  const auto patch = test::random_raster(4, 3, 3);
  const PatchPlacement where{5, 6, 4, 3};
  const auto out = apply_patch(img, patch, where);
  EXPECT_EQ(extract_segment(out, where), patch);
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x) {
      const bool inside = x >= 5 && x < 8 && y >= 6 && y < 10;
      if (!inside)
        for (int c = 0; c < 3; ++c) EXPECT_EQ(out.at(y, x, c), img.at(y, x, c));
    }
}

TEST(ApplyPatch, SegmentPatchLeavesImageUnchanged) {
  const auto img = test::random_raster(8, 8, 4);
  const PatchPlacement where{2, 3, 4, 5};
  EXPECT_EQ(apply_patch(img, extract_segment(img, where), where), img);
}

TEST(ApplyPatch, SinglePixelChangesOnePixel) {
  const RgbRaster img(5, 5, 10.0);
  RgbRaster patch(1, 1, 99.0);
  const auto out = apply_patch(img, patch, {1, 3, 1, 1});
  int changed = 0;
  for (int y = 0; y < 5; ++y)
    for (int x = 0; x < 5; ++x) changed += out.at(y, x, 0) != img.at(y, x, 0);
  EXPECT_EQ(changed, 1);
  EXPECT_EQ(out.at(3, 1, 2), 99.0);
}

TEST(ApplyPatch, RejectsShapeMismatch) {
  EXPECT_THROW(apply_patch(RgbRaster(5, 5), RgbRaster(2, 2), {0, 0, 2, 3}), InvalidArgument);
  EXPECT_THROW(apply_patch(RgbRaster(5, 5), RgbRaster(2, 2), {4, 4, 2, 2}), InvalidArgument);
}

TEST(ClipRgb, ClampsAndIsIdempotentProjection) {
  RgbRaster r(1, 2);
  r.values() = {300, -4, 17.5, 255, 0, 128};
  const auto c = clip_rgb(r);
  EXPECT_EQ(c.values(), (std::vector<double>{255, 0, 17.5, 255, 0, 128}));
  EXPECT_EQ(clip_rgb(c), c);
  const auto in_range = test::random_raster(3, 3, 5);
  EXPECT_EQ(clip_rgb(in_range), in_range);

  // Projection: never moves further from any in-range raster.
  const auto wild = test::random_raster(4, 4, 6, -300, 600);
  const auto clipped = clip_rgb(wild);
  const auto anchor = test::random_raster(4, 4, 7);
  for (std::size_t i = 0; i < wild.size(); ++i)
    EXPECT_LE(std::abs(clipped.values()[i] - anchor.values()[i]), std::abs(wild.values()[i] - anchor.values()[i]));
}

TEST(EpsilonBall, ClampsAroundReference) {
  RgbRaster orig(1, 1, 100.0), patch(1, 1, 120.0);
  EXPECT_EQ(clamp_to_epsilon_ball(patch, orig, 5.0).values(), (std::vector<double>{105, 105, 105}));
  EXPECT_EQ(clamp_to_epsilon_ball(orig, orig, 3.0), orig);
  const auto p = test::random_raster(3, 3, 8);
  const auto o = test::random_raster(3, 3, 9);
  EXPECT_EQ(clamp_to_epsilon_ball(p, o, 0.0), o);
  EXPECT_THROW(clamp_to_epsilon_ball(p, RgbRaster(2, 3), 1.0), InvalidArgument);
}

TEST(SampleTransformation, DeterministicForSeed) {
  const TransformConfig cfg;
  std::mt19937_64 a(42), b(42);
  for (int i = 0; i < 20; ++i) EXPECT_EQ(sample_transformation(a, cfg), sample_transformation(b, cfg));
}

TEST(SampleTransformation, DistributionMatchesConfig) {
  const TransformConfig cfg;
  std::mt19937_64 rng(7);
  std::map<int, int> counts;
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    const auto t = sample_transformation(rng, cfg);
    ++counts[t.rotation];
    EXPECT_GE(t.brightness, 0.4);
    EXPECT_LE(t.brightness, 1.6);
    EXPECT_GE(t.occupancy, 0.2);
    EXPECT_LE(t.occupancy, 0.3);
  }
  ASSERT_EQ(counts.size(), 3u);
  double chi2 = 0.0;
  for (auto [rotation, count] : counts) {
    EXPECT_NEAR(count / double(n), 1.0 / 3.0, 0.02) << rotation;
    chi2 += (count - n / 3.0) * (count - n / 3.0) / (n / 3.0);
  }
  EXPECT_LT(chi2, 13.82);  // p = 0.001, 2 dof
}

TEST(ApplyTransformation, IdentityLeavesImageUnchanged) {
  const auto img = test::random_raster(20, 16, 10);
  const PatchPlacement where{4, 6, 5, 4};
  const auto out = apply_transformation(img, Transformation::identity(), where);
  EXPECT_EQ(out.image, img);
  EXPECT_EQ(out.placement, where);

  // Occupancy equal to the current one keeps the full frame.
  Transformation t;
  t.occupancy = double(where.area()) / (20.0 * 16.0);
  EXPECT_EQ(apply_transformation(img, t, where).image, img);
}

TEST(ApplyTransformation, RotationsArePermutations) {
  const auto img = test::random_raster(6, 9, 11);
  EXPECT_EQ(rotate(rotate(img, 90), 270), img);
  EXPECT_EQ(rotate(rotate(img, 270), 90), img);
  EXPECT_EQ(rotate(rotate(img, 90), 90), rotate(img, 180));
  auto energy = [](const RgbRaster& r) {
    double e = 0;
    for (double v : r.values()) e += v * v;
    return e;
  };
  EXPECT_DOUBLE_EQ(energy(rotate(img, 90)), energy(img));
  EXPECT_DOUBLE_EQ(energy(rotate(img, 270)), energy(img));
  EXPECT_THROW(rotate(img, 45), InvalidArgument);
}

TEST(ApplyTransformation, BrightnessClips) {
  const RgbRaster img(4, 4, 200.0);
  Transformation t;
  t.brightness = 1.6;
  const auto out = apply_transformation(img, t, {0, 0, 2, 2});
  for (double v : out.image.values()) EXPECT_EQ(v, 255.0);
  t.brightness = 0.5;
  const auto dimmed = apply_transformation(img, t, {0, 0, 2, 2});
  for (double v : dimmed.image.values()) EXPECT_EQ(v, 100.0);
}

TEST(ApplyTransformation, RotatedPatchFollowsPixels) {
  auto img = test::random_raster(10, 14, 12);
  const PatchPlacement where{3, 2, 3, 5};
  for (int rot : {90, 180, 270}) {
    Transformation t;
    t.rotation = rot;
    const auto out = apply_transformation(img, t, where);
    const auto rotated_patch = rotate(extract_segment(img, where), rot);
    EXPECT_EQ(extract_segment(out.image, out.placement), rotated_patch) << rot;
  }
}

TEST(ApplyTransformation, OccupancyInBandOrFlagged) {
  std::mt19937_64 rng(13);
  const TransformConfig cfg;
  std::uniform_int_distribution<int> dim(4, 40);
  int flagged = 0;
  for (int trial = 0; trial < 400; ++trial) {
    const int h = dim(rng) + 8, w = dim(rng) + 8;
    std::uniform_int_distribution<int> ph(2, h / 2), pw(2, w / 2);
    PatchPlacement p{0, 0, ph(rng), pw(rng)};
    p.top_left_x = std::uniform_int_distribution<int>(0, w - p.patch_width)(rng);
    p.top_left_y = std::uniform_int_distribution<int>(0, h - p.patch_height)(rng);
    const auto t = sample_transformation(rng, cfg);
    const auto out = apply_transformation(RgbRaster(h, w, 50.0), t, p);
    // The patch is never truncated.
    EXPECT_TRUE(out.placement.within(out.image.height(), out.image.width()));
    EXPECT_EQ(out.placement.area(), p.area());
    if (!out.occupancy_fallback) {
      EXPECT_GE(out.achieved_occupancy, 0.2);
      EXPECT_LE(out.achieved_occupancy, 0.3);
    } else {
      ++flagged;
    }
  }
  EXPECT_LT(flagged, 400);
}

TEST(ApplyTransformation, UnreachableOccupancyFallsBack) {
  Transformation t;
  t.occupancy = 0.25;
  t.occupancy_min = 0.2;
  t.occupancy_max = 0.3;
  // Patch already covers half the image; cropping can only increase that.
  const auto out = apply_transformation(RgbRaster(10, 10), t, {0, 0, 5, 10});
  EXPECT_TRUE(out.occupancy_fallback);
  EXPECT_EQ(out.image.height(), 10);
  EXPECT_EQ(out.image.width(), 10);
}

TEST(TransformBox, FollowsRotationAndCrop) {
  // A box drawn as pixels must land on the same pixels after the transform.
  RgbRaster img(12, 20, 0.0);
  const BoundingBox box{4, 3, 9, 7};
  for (int y = 3; y < 7; ++y)
    for (int x = 4; x < 9; ++x) img.at(y, x, 0) = 255;
  for (int rot : {0, 90, 180, 270}) {
    Transformation t;
    t.rotation = rot;
    t.occupancy = 0.25;
    const auto out = apply_transformation(img, t, {5, 4, 2, 3});
    const auto b = transform_box(box, 12, 20, t, out.crop);
    for (int y = 0; y < out.image.height(); ++y)
      for (int x = 0; x < out.image.width(); ++x) {
        const bool inside = x >= b.x_min && x < b.x_max && y >= b.y_min && y < b.y_max;
        EXPECT_EQ(out.image.at(y, x, 0) == 255, inside) << rot << " " << y << "," << x;
      }
  }
}

namespace {
// Smooth stand-in loss on the transformed image: sum w_i * v_i^2.
struct QuadraticLoss {
  std::vector<double> weights;
  double value(const RgbRaster& img) const {
    double s = 0;
    for (std::size_t i = 0; i < img.size(); ++i) s += weights[i % weights.size()] * img.values()[i] * img.values()[i];
    return s;
  }
  RgbRaster gradient(const RgbRaster& img) const {
    RgbRaster g(img.height(), img.width());
    for (std::size_t i = 0; i < img.size(); ++i) g.values()[i] = 2 * weights[i % weights.size()] * img.values()[i];
    return g;
  }
};
}  // namespace

TEST(PullbackGradient, IdentityIsPlainExtraction) {
  const auto img = test::random_raster(10, 10, 14);
  const auto grad = test::random_raster(10, 10, 15, -1, 1);
  const PatchPlacement where{2, 3, 4, 5};
  const auto fwd = apply_transformation(img, Transformation::identity(), where);
  EXPECT_EQ(pullback_gradient(grad, Transformation::identity(), fwd, where, img), extract_segment(grad, where));
}

TEST(PullbackGradient, BrightnessScalesUnsaturatedEntries) {
  const auto img = test::random_raster(10, 10, 16);
  const auto grad = test::random_raster(10, 10, 17, -1, 1);
  const PatchPlacement where{2, 3, 4, 5};
  Transformation t;
  t.brightness = 0.5;
  const auto fwd = apply_transformation(img, t, where);
  const auto pulled = pullback_gradient(grad, t, fwd, where, img);
  const auto plain = extract_segment(grad, where);
  for (std::size_t i = 0; i < plain.size(); ++i) EXPECT_DOUBLE_EQ(pulled.values()[i], 0.5 * plain.values()[i]);
}

TEST(PullbackGradient, RejectsInconsistentInputs) {
  const auto img = test::random_raster(10, 10, 18);
  const PatchPlacement where{2, 3, 4, 5};
  const auto fwd = apply_transformation(img, Transformation::identity(), where);
  EXPECT_THROW(pullback_gradient(RgbRaster(9, 10), Transformation::identity(), fwd, where, img), InvalidArgument);
  EXPECT_THROW(pullback_gradient(RgbRaster(10, 10), Transformation::identity(), fwd, {1, 3, 4, 5}, img),
               InvalidArgument);
}

TEST(PullbackGradient, MatchesFiniteDifferencesOfComposedMap) {
  std::mt19937_64 rng(19);
  const TransformConfig cfg;
  const auto image = test::random_raster(24, 30, 20);
  const PatchPlacement where{9, 8, 6, 7};
  QuadraticLoss loss;
  for (int i = 0; i < 97; ++i) loss.weights.push_back(std::uniform_real_distribution<double>(-1, 1)(rng));

  int agree = 0, total = 0;
  for (int trial = 0; trial < 12; ++trial) {
    auto t = sample_transformation(rng, cfg);
    t.rotation = cfg.rotations[trial % 3];
    const auto patch = test::random_raster(6, 7, 300 + trial);
    auto forward = [&](const RgbRaster& p) {
      return loss.value(apply_transformation(apply_patch(image, p, where), t, where).image);
    };
    const auto composed = apply_patch(image, patch, where);
    const auto fwd = apply_transformation(composed, t, where);
    const auto g = pullback_gradient(loss.gradient(fwd.image), t, fwd, where, composed);
    for (std::size_t i = 0; i < patch.size(); ++i) {
      auto plus = patch, minus = patch;
      plus.values()[i] += 1e-3;
      minus.values()[i] -= 1e-3;
      const double fd = (forward(plus) - forward(minus)) / 2e-3;
      agree += test::relative_error(g.values()[i], fd) <= 1e-3;
      ++total;
    }
  }
  EXPECT_GE(agree, total * 95 / 100) << agree << "/" << total;
}
