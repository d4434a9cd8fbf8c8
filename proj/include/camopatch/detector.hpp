#pragma once

// Detector abstraction attacked by the patch optimiser.

#include <algorithm>
#include <span>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "camopatch/raster.hpp"

namespace camo {

/// Intersection over union of two boxes, in [0, 1].
inline double iou(const BoundingBox& a, const BoundingBox& b) {
  const double ix = std::max(0.0, std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min));
  const double iy = std::max(0.0, std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min));
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

struct Detection {
  BoundingBox box;
  int class_id = 0;
  double confidence = 0.0;

  friend bool operator==(const Detection&, const Detection&) = default;
};

/// Failure to talk to an out-of-process detector; distinct from an empty
/// detection list.
struct TransportError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct LossAndGradient {
  double loss = 0.0;
  RgbRaster gradient;  ///< d loss / d image, 0-255 channel scale
};

/// Detector interface. detect/loss/loss_gradient are const and must be safe
/// to call concurrently. loss_gradient differentiates exactly the value
/// loss() reports.
class Detector {
 public:
  virtual ~Detector() = default;

  virtual std::vector<Detection> detect(const RgbImage& image, double confidence_threshold) const = 0;
  virtual double loss(const RgbImage& image, std::span<const Detection> targets) const = 0;
  virtual LossAndGradient loss_gradient(const RgbImage& image, std::span<const Detection> targets) const = 0;
  /// Human-readable identity recorded in reports and artifacts.
  virtual std::string identity() const = 0;
};

inline void require_threshold(double t) {
  if (!(t >= 0.0 && t <= 1.0)) throw InvalidArgument("confidence threshold must lie in [0, 1]");
}

/// Strict total order used by NMS so that the result does not depend on the
/// order candidates arrive in.
inline bool detection_precedes(const Detection& a, const Detection& b) {
  return std::tie(b.confidence, a.class_id, a.box.y_min, a.box.x_min, a.box.y_max, a.box.x_max) <
         std::tie(a.confidence, b.class_id, b.box.y_min, b.box.x_min, b.box.y_max, b.box.x_max);
}

/// Greedy per-class non-maximum suppression.
inline std::vector<Detection> non_maximum_suppression(std::vector<Detection> candidates, double iou_threshold = 0.5) {
  std::sort(candidates.begin(), candidates.end(), detection_precedes);
  std::vector<Detection> kept;
  for (const auto& c : candidates) {
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const Detection& k) {
      return k.class_id == c.class_id && iou(k.box, c.box) > iou_threshold;
    });
    if (!suppressed) kept.push_back(c);
  }
  return kept;
}

/// Central-difference estimates of d loss / d image at flat raster indices.
inline std::vector<double> finite_difference_gradient(const Detector& detector, const RgbImage& image,
                                                      std::span<const Detection> targets, double h,
                                                      std::span<const std::size_t> coordinates) {
  if (!(h > 0.0)) throw InvalidArgument("finite_difference_gradient: h must be positive");
  std::vector<double> out;
  out.reserve(coordinates.size());
  RgbImage probe = image;
  for (std::size_t i : coordinates) {
    if (i >= image.size()) throw InvalidArgument("finite_difference_gradient: coordinate out of range");
    const double v = image.values()[i];
    probe.values()[i] = v + h;
    const double up = detector.loss(probe, targets);
    probe.values()[i] = v - h;
    const double down = detector.loss(probe, targets);
    probe.values()[i] = v;
    out.push_back((up - down) / (2.0 * h));
  }
  return out;
}

}  // namespace camo
