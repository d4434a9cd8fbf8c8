#pragma once

// Patch application operator: placement from a detection box, segment
// extraction, the random transformation family (rotation, brightness, crop)
// and the pullback of image gradients onto the patch.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "camopatch/raster.hpp"

namespace camo::imaging {

/// Patch rectangle of round(ratio * box dims) centred on the box centre,
/// shifted inward if it would leave the image.
inline PatchPlacement compute_placement(const BoundingBox& box, double ratio, int image_height,
                                        int image_width) {
  if (!box.valid()) throw InvalidArgument("compute_placement: invalid box");
  if (!(ratio > 0.0 && ratio <= 1.0)) throw InvalidArgument("compute_placement: ratio must be in (0, 1]");
  const int w = static_cast<int>(std::lround(ratio * box.width()));
  const int h = static_cast<int>(std::lround(ratio * box.height()));
  if (w <= 1 || h <= 1)
    throw InvalidArgument("compute_placement: degenerate patch (" + std::to_string(h) + "x" +
                          std::to_string(w) + ")");
  if (w > image_width || h > image_height)
    throw InvalidArgument("compute_placement: patch larger than image");
  PatchPlacement p;
  p.patch_width = w;
  p.patch_height = h;
  p.top_left_x = static_cast<int>(std::lround(box.center_x() - 0.5 * w));
  p.top_left_y = static_cast<int>(std::lround(box.center_y() - 0.5 * h));
  p.top_left_x = std::clamp(p.top_left_x, 0, image_width - w);
  p.top_left_y = std::clamp(p.top_left_y, 0, image_height - h);
  return p;
}

inline void require_within(const PatchPlacement& p, const RgbRaster& image, const char* what) {
  if (!p.within(image.height(), image.width()))
    throw InvalidArgument(std::string(what) + ": placement outside image bounds");
}

inline RgbRaster extract_segment(const RgbImage& image, const PatchPlacement& placement) {
  require_within(placement, image, "extract_segment");
  RgbRaster out(placement.patch_height, placement.patch_width);
  for (int y = 0; y < placement.patch_height; ++y) {
    const auto src = image.data().subspan(image.index(placement.top_left_y + y, placement.top_left_x, 0),
                                          static_cast<std::size_t>(placement.patch_width) * 3);
    std::copy(src.begin(), src.end(), out.data().begin() + out.index(y, 0, 0));
  }
  return out;
}

inline RgbImage apply_patch(const RgbImage& image, const RgbRaster& patch, const PatchPlacement& placement) {
  require_within(placement, image, "apply_patch");
  if (patch.height() != placement.patch_height || patch.width() != placement.patch_width)
    throw InvalidArgument("apply_patch: patch shape does not match placement");
  RgbImage out = image;
  for (int y = 0; y < placement.patch_height; ++y) {
    const auto src = patch.data().subspan(patch.index(y, 0, 0), static_cast<std::size_t>(patch.width()) * 3);
    std::copy(src.begin(), src.end(), out.data().begin() + out.index(placement.top_left_y + y, placement.top_left_x, 0));
  }
  return out;
}

inline void clip_rgb_inplace(RgbRaster& r) {
  for (double& v : r.data()) v = std::clamp(v, 0.0, 255.0);
}

inline RgbRaster clip_rgb(RgbRaster r) {
  clip_rgb_inplace(r);
  return r;
}

/// Projects onto the L-infinity ball of radius epsilon around a reference
/// disguise, then onto the RGB cube.
inline RgbRaster clamp_to_epsilon_ball(RgbRaster patch, const RgbRaster& original, double epsilon) {
  require_same_shape(patch, original, "clamp_to_epsilon_ball");
  if (!(epsilon >= 0.0)) throw InvalidArgument("clamp_to_epsilon_ball: epsilon must be non-negative");
  auto p = patch.data();
  const auto o = original.data();
  for (std::size_t i = 0; i < p.size(); ++i)
    p[i] = std::clamp(std::clamp(p[i], o[i] - epsilon, o[i] + epsilon), 0.0, 255.0);
  return patch;
}

// ---------------------------------------------------------------------------
// Rotation by multiples of 90 degrees (counter-clockwise), as exact pixel
// permutations.

inline bool valid_rotation(int degrees) { return degrees == 0 || degrees == 90 || degrees == 180 || degrees == 270; }

/// Maps pixel (y, x) of an H x W raster to its position after rotation.
inline std::array<int, 2> rotate_pixel(int y, int x, int height, int width, int degrees) {
  switch (degrees) {
    case 90: return {width - 1 - x, y};
    case 180: return {height - 1 - y, width - 1 - x};
    case 270: return {x, height - 1 - y};
    default: return {y, x};
  }
}

inline RgbRaster rotate(const RgbRaster& src, int degrees) {
  if (!valid_rotation(degrees)) throw InvalidArgument("rotate: rotation must be a multiple of 90 degrees");
  if (degrees == 0) return src;
  const bool swap = degrees != 180;
  RgbRaster out(swap ? src.width() : src.height(), swap ? src.height() : src.width());
  for (int y = 0; y < src.height(); ++y)
    for (int x = 0; x < src.width(); ++x) {
      const auto [ny, nx] = rotate_pixel(y, x, src.height(), src.width(), degrees);
      for (int c = 0; c < 3; ++c) out.at(ny, nx, c) = src.at(y, x, c);
    }
  return out;
}

inline BoundingBox rotate_box(const BoundingBox& b, int height, int width, int degrees) {
  switch (degrees) {
    case 90: return {b.y_min, width - b.x_max, b.y_max, width - b.x_min};
    case 180: return {width - b.x_max, height - b.y_max, width - b.x_min, height - b.y_min};
    case 270: return {height - b.y_max, b.x_min, height - b.y_min, b.x_max};
    default: return b;
  }
}

inline PatchPlacement rotate_placement(const PatchPlacement& p, int height, int width, int degrees) {
  const BoundingBox b{double(p.top_left_x), double(p.top_left_y), double(p.top_left_x + p.patch_width),
                      double(p.top_left_y + p.patch_height)};
  const BoundingBox r = rotate_box(b, height, width, degrees);
  return {static_cast<int>(r.x_min), static_cast<int>(r.y_min), static_cast<int>(r.height()),
          static_cast<int>(r.width())};
}

// ---------------------------------------------------------------------------
// Transformation distribution.

struct TransformConfig {
  std::vector<int> rotations{0, 90, 270};
  double brightness_min = 0.4;
  double brightness_max = 1.6;
  double occupancy_min = 0.2;
  double occupancy_max = 0.3;

  friend bool operator==(const TransformConfig&, const TransformConfig&) = default;
};

inline void validate(const TransformConfig& c) {
  if (c.rotations.empty()) throw InvalidArgument("transforms: rotations must not be empty");
  for (int r : c.rotations)
    if (!valid_rotation(r)) throw InvalidArgument("transforms: rotation " + std::to_string(r) + " is not a multiple of 90");
  if (!(c.brightness_min > 0.0 && c.brightness_min <= c.brightness_max))
    throw InvalidArgument("transforms: brightness range must satisfy 0 < min <= max");
  if (!(c.occupancy_min > 0.0 && c.occupancy_min <= c.occupancy_max && c.occupancy_max <= 1.0))
    throw InvalidArgument("transforms: occupancy range must satisfy 0 < min <= max <= 1");
}

/// Rectangle of the rotated+brightened image that is kept by the crop.
struct CropWindow {
  int x0 = 0, y0 = 0, height = 0, width = 0;
  friend bool operator==(const CropWindow&, const CropWindow&) = default;
};

/// One draw from the transformation distribution.
struct Transformation {
  int rotation = 0;
  double brightness = 1.0;
  /// Target patch area / transformed image area. Non-positive means no crop.
  double occupancy = 0.0;
  /// Acceptable occupancy band; results outside it are flagged.
  double occupancy_min = 0.0;
  double occupancy_max = 1.0;

  static Transformation identity() { return {}; }
  friend bool operator==(const Transformation&, const Transformation&) = default;
};

template <typename Rng>
Transformation sample_transformation(Rng& rng, const TransformConfig& config) {
  std::uniform_int_distribution<std::size_t> pick(0, config.rotations.size() - 1);
  std::uniform_real_distribution<double> brightness(config.brightness_min, config.brightness_max);
  std::uniform_real_distribution<double> occupancy(config.occupancy_min, config.occupancy_max);
  Transformation t;
  t.rotation = config.rotations[pick(rng)];
  t.brightness = brightness(rng);
  t.occupancy = occupancy(rng);
  t.occupancy_min = config.occupancy_min;
  t.occupancy_max = config.occupancy_max;
  return t;
}

/// Picks integer crop dimensions whose patch occupancy is as close as
/// possible to the target while containing the patch and fitting the image.
/// Crops only ever shrink the image, so a target below the full-image
/// occupancy is unreachable and yields the full image.
inline CropWindow plan_crop(int height, int width, const PatchPlacement& patch, double target) {
  CropWindow full{0, 0, height, width};
  if (target <= 0.0) return full;
  const double area = static_cast<double>(patch.area());
  double best_err = std::abs(area / (double(height) * width) - target);
  int best_h = height, best_w = width;
  for (int w = patch.patch_width; w <= width; ++w) {
    const double ideal_h = area / (target * w);
    for (double cand : {std::floor(ideal_h), std::ceil(ideal_h)}) {
      const int h = std::clamp(static_cast<int>(cand), patch.patch_height, height);
      const double err = std::abs(area / (double(h) * w) - target);
      // Prefer the aspect ratio closest to the source on ties.
      if (err < best_err - 1e-12 ||
          (std::abs(err - best_err) <= 1e-12 &&
           std::abs(double(h) / w - double(height) / width) < std::abs(double(best_h) / best_w - double(height) / width))) {
        best_err = err;
        best_h = h;
        best_w = w;
      }
    }
  }
  // Centre on the patch, trimming both edges equally where the image allows.
  auto start = [](int lo, int len, int crop, int extent) {
    const int s = static_cast<int>(std::floor(lo + 0.5 * len - 0.5 * crop));
    return std::clamp(s, 0, extent - crop);
  };
  return {start(patch.top_left_x, patch.patch_width, best_w, width),
          start(patch.top_left_y, patch.patch_height, best_h, height), best_h, best_w};
}

struct TransformedImage {
  RgbImage image;
  PatchPlacement placement;  ///< patch rectangle in transformed coordinates
  int rotated_height = 0;    ///< dimensions after rotation, before the crop
  int rotated_width = 0;
  CropWindow crop;
  double achieved_occupancy = 0.0;
  /// True when the achieved occupancy falls outside the transformation's
  /// band (patch too large for the image, or too small to crop to it).
  bool occupancy_fallback = false;
};

/// rotate -> brightness (multiply, clip) -> centred crop.
inline TransformedImage apply_transformation(const RgbImage& image, const Transformation& t,
                                             const PatchPlacement& placement) {
  require_within(placement, image, "apply_transformation");
  if (!valid_rotation(t.rotation)) throw InvalidArgument("apply_transformation: invalid rotation");
  if (!(t.brightness > 0.0)) throw InvalidArgument("apply_transformation: brightness must be positive");
  TransformedImage out;
  RgbImage rotated = rotate(image, t.rotation);
  const PatchPlacement rp = rotate_placement(placement, image.height(), image.width(), t.rotation);
  out.rotated_height = rotated.height();
  out.rotated_width = rotated.width();
  if (t.brightness != 1.0)
    for (double& v : rotated.data()) v = std::clamp(v * t.brightness, 0.0, 255.0);
  out.crop = plan_crop(rotated.height(), rotated.width(), rp, t.occupancy);
  out.placement = rp;
  out.placement.top_left_x -= out.crop.x0;
  out.placement.top_left_y -= out.crop.y0;
  if (out.crop.height == rotated.height() && out.crop.width == rotated.width()) {
    out.image = std::move(rotated);
  } else {
    out.image = extract_segment(rotated, {out.crop.x0, out.crop.y0, out.crop.height, out.crop.width});
  }
  out.achieved_occupancy = double(rp.area()) / (double(out.crop.height) * out.crop.width);
  if (t.occupancy > 0.0)
    out.occupancy_fallback = out.achieved_occupancy < t.occupancy_min - 1e-12 ||
                             out.achieved_occupancy > t.occupancy_max + 1e-12;
  return out;
}

/// Maps a box from original coordinates into the transformed frame, clipped
/// to the crop. Returns an invalid box when nothing of it survives.
inline BoundingBox transform_box(const BoundingBox& box, int height, int width, const Transformation& t,
                                 const CropWindow& crop) {
  BoundingBox b = rotate_box(box, height, width, t.rotation);
  b.x_min = std::clamp(b.x_min - crop.x0, 0.0, double(crop.width));
  b.x_max = std::clamp(b.x_max - crop.x0, 0.0, double(crop.width));
  b.y_min = std::clamp(b.y_min - crop.y0, 0.0, double(crop.height));
  b.y_max = std::clamp(b.y_max - crop.y0, 0.0, double(crop.height));
  return b;
}

/// Gradient with respect to the patch pixels given the gradient with respect
/// to the transformed image. `original` is the untransformed image the patch
/// was applied to (already composed with the patch); it identifies pixels the
/// forward brightness clip saturated.
inline RgbRaster pullback_gradient(const RgbRaster& grad_transformed, const Transformation& t,
                                   const TransformedImage& forward, const PatchPlacement& original_placement,
                                   const RgbImage& composed) {
  if (!grad_transformed.same_shape(forward.image))
    throw InvalidArgument("pullback_gradient: gradient does not match transformed image");
  const PatchPlacement expect =
      rotate_placement(original_placement, composed.height(), composed.width(), t.rotation);
  if (expect.patch_height != forward.placement.patch_height || expect.patch_width != forward.placement.patch_width ||
      expect.top_left_x - forward.crop.x0 != forward.placement.top_left_x ||
      expect.top_left_y - forward.crop.y0 != forward.placement.top_left_y)
    throw InvalidArgument("pullback_gradient: inconsistent placements");
  RgbRaster out(original_placement.patch_height, original_placement.patch_width);
  for (int y = 0; y < original_placement.patch_height; ++y)
    for (int x = 0; x < original_placement.patch_width; ++x) {
      const int iy = original_placement.top_left_y + y;
      const int ix = original_placement.top_left_x + x;
      const auto [ry, rx] = rotate_pixel(iy, ix, composed.height(), composed.width(), t.rotation);
      const int ty = ry - forward.crop.y0;
      const int tx = rx - forward.crop.x0;
      for (int c = 0; c < 3; ++c) {
        const double pre = composed.at(iy, ix, c) * t.brightness;
        const bool saturated = t.brightness != 1.0 && (pre > 255.0 || pre < 0.0);
        out.at(y, x, c) = saturated ? 0.0 : t.brightness * grad_transformed.at(ty, tx, c);
      }
    }
  return out;
}

}  // namespace camo::imaging
