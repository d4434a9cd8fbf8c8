#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace camo {

/// Raised when an argument violates an operation's precondition.
struct InvalidArgument : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Row-major H x W x 3 raster of continuous channel values. Used for images,
/// patches, segments and gradients alike; values are only guaranteed to lie
/// in [0, 255] after clipping.
class RgbRaster {
 public:
  RgbRaster() = default;
  RgbRaster(int height, int width, double fill = 0.0)
      : height_(height), width_(width) {
    if (height < 0 || width < 0) throw InvalidArgument("RgbRaster: negative dimensions");
    data_.assign(static_cast<std::size_t>(height) * width * 3, fill);
  }
  RgbRaster(int height, int width, std::vector<double> data)
      : height_(height), width_(width), data_(std::move(data)) {
    if (height < 0 || width < 0) throw InvalidArgument("RgbRaster: negative dimensions");
    if (data_.size() != static_cast<std::size_t>(height) * width * 3)
      throw InvalidArgument("RgbRaster: data size does not match H*W*3");
  }

  int height() const noexcept { return height_; }
  int width() const noexcept { return width_; }
  std::size_t pixels() const noexcept { return static_cast<std::size_t>(height_) * width_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& at(int y, int x, int c) { return data_[index(y, x, c)]; }
  double at(int y, int x, int c) const { return data_[index(y, x, c)]; }
  std::size_t index(int y, int x, int c) const noexcept {
    return (static_cast<std::size_t>(y) * width_ + x) * 3 + c;
  }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::vector<double>& values() noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  bool same_shape(const RgbRaster& o) const noexcept {
    return height_ == o.height_ && width_ == o.width_;
  }

  friend bool operator==(const RgbRaster&, const RgbRaster&) = default;

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<double> data_;
};

/// An image is a raster with at least one pixel; the alias marks intent.
using RgbImage = RgbRaster;

inline void require_same_shape(const RgbRaster& a, const RgbRaster& b, const char* what) {
  if (!a.same_shape(b))
    throw InvalidArgument(std::string(what) + ": shape mismatch (" + std::to_string(a.height()) +
                          "x" + std::to_string(a.width()) + " vs " + std::to_string(b.height()) +
                          "x" + std::to_string(b.width()) + ")");
}

/// Axis-aligned box in continuous pixel coordinates; pixel (row y, col x)
/// covers [x, x+1) x [y, y+1).
struct BoundingBox {
  double x_min = 0, y_min = 0, x_max = 0, y_max = 0;

  double width() const noexcept { return x_max - x_min; }
  double height() const noexcept { return y_max - y_min; }
  double area() const noexcept { return std::max(0.0, width()) * std::max(0.0, height()); }
  double center_x() const noexcept { return 0.5 * (x_min + x_max); }
  double center_y() const noexcept { return 0.5 * (y_min + y_max); }
  bool valid() const noexcept {
    return std::isfinite(x_min) && std::isfinite(y_min) && std::isfinite(x_max) &&
           std::isfinite(y_max) && x_min < x_max && y_min < y_max;
  }
  bool within(int image_height, int image_width) const noexcept {
    return x_min >= 0 && y_min >= 0 && x_max <= image_width && y_max <= image_height;
  }

  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

/// Patch rectangle on an image (the location the patch is applied at).
struct PatchPlacement {
  int top_left_x = 0;
  int top_left_y = 0;
  int patch_height = 0;
  int patch_width = 0;

  bool within(int image_height, int image_width) const noexcept {
    return patch_height > 0 && patch_width > 0 && top_left_x >= 0 && top_left_y >= 0 &&
           top_left_x + patch_width <= image_width && top_left_y + patch_height <= image_height;
  }
  long area() const noexcept { return static_cast<long>(patch_height) * patch_width; }

  friend bool operator==(const PatchPlacement&, const PatchPlacement&) = default;
};

}  // namespace camo
