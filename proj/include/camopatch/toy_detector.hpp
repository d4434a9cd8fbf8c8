#pragma once

// Built-in differentiable detector: three stride-2 3x3 convolutions and a
// 3x3 head predicting, per grid cell, an objectness logit and a box
// (centre offset within the cell, log size relative to an anchor). Trained
// on a seeded synthetic corpus of convex shapes over textured backgrounds.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "camopatch/color_metrics.hpp"
#include "camopatch/detector.hpp"
#include "camopatch/evaluation.hpp"
#include "camopatch/imaging.hpp"
#include "camopatch/raster.hpp"

namespace camo::toy {

struct Architecture {
  int channels1 = 8;
  int channels2 = 16;
  int channels3 = 32;
  int cell = 8;          ///< input pixels per grid cell (2^3 strides)
  double anchor = 20.0;  ///< box size at zero log-size output

  friend bool operator==(const Architecture&, const Architecture&) = default;
};

inline constexpr int kHeadChannels = 5;  // objectness, dx, dy, log w, log h
inline constexpr int kTargetClass = 0;

/// Offsets of each layer's weights and biases inside the flat weight vector.
struct Layout {
  struct Layer {
    int in, out, stride;
    std::size_t weights, bias;
  };
  std::array<Layer, 4> layers{};
  std::size_t total = 0;

  explicit Layout(const Architecture& a) {
    const int ins[4] = {3, a.channels1, a.channels2, a.channels3};
    const int outs[4] = {a.channels1, a.channels2, a.channels3, kHeadChannels};
    const int strides[4] = {2, 2, 2, 1};
    for (int l = 0; l < 4; ++l) {
      layers[l] = {ins[l], outs[l], strides[l], total, total + std::size_t(outs[l]) * ins[l] * 9};
      total = layers[l].bias + outs[l];
    }
  }
};

struct Params {
  Architecture architecture;
  std::uint64_t seed = 0;
  std::vector<double> weights;

  friend bool operator==(const Params&, const Params&) = default;
};

/// He-initialised weights, zero biases, objectness bias pulled negative so
/// training starts from "background everywhere".
inline Params random_params(std::uint64_t seed, const Architecture& arch = {}) {
  Params p{arch, seed, {}};
  const Layout layout(arch);
  p.weights.assign(layout.total, 0.0);
  std::mt19937_64 rng(seed);
  for (const auto& l : layout.layers) {
    std::normal_distribution<double> n(0.0, std::sqrt(2.0 / (l.in * 9.0)));
    for (std::size_t i = 0; i < std::size_t(l.out) * l.in * 9; ++i) p.weights[l.weights + i] = n(rng);
  }
  const auto& head = layout.layers[3];
  for (std::size_t i = 0; i < std::size_t(head.out) * head.in * 9; ++i) p.weights[head.weights + i] *= 0.1;
  p.weights[head.bias] = -4.0;
  return p;
}

inline void to_json(nlohmann::json& j, const Params& p) {
  const auto& a = p.architecture;
  j = {{"architecture",
        {{"channels1", a.channels1}, {"channels2", a.channels2}, {"channels3", a.channels3}, {"cell", a.cell},
         {"anchor", a.anchor}}},
       {"seed", p.seed},
       {"weights", p.weights}};
}

inline void from_json(const nlohmann::json& j, Params& p) {
  const auto& a = j.at("architecture");
  p.architecture = {a.at("channels1").get<int>(), a.at("channels2").get<int>(), a.at("channels3").get<int>(),
                    a.at("cell").get<int>(), a.at("anchor").get<double>()};
  p.seed = j.at("seed").get<std::uint64_t>();
  p.weights = j.at("weights").get<std::vector<double>>();
  if (p.weights.size() != Layout(p.architecture).total)
    throw InvalidArgument("toy detector params: weight count does not match architecture");
  for (double w : p.weights)
    if (!std::isfinite(w)) throw InvalidArgument("toy detector params: non-finite weight");
}

namespace detail {

struct Tensor {
  int c = 0, h = 0, w = 0;
  std::vector<double> v;

  Tensor() = default;
  Tensor(int c_, int h_, int w_) : c(c_), h(h_), w(w_), v(std::size_t(c_) * h_ * w_, 0.0) {}
  double* plane(int ch) { return v.data() + std::size_t(ch) * h * w; }
  const double* plane(int ch) const { return v.data() + std::size_t(ch) * h * w; }
};

inline int out_extent(int in, int stride) { return (in - 1) / stride + 1; }

// Output rows/cols o with 0 <= o*stride + k - 1 < in.
inline std::pair<int, int> valid_range(int k, int stride, int in, int out) {
  const int lo = k == 0 ? 1 : 0;
  const int hi = in - k < 0 ? -1 : std::min(out - 1, (in - k) / stride);
  return {lo, hi};
}

inline void conv_forward(const Tensor& in, std::span<const double> w, std::span<const double> b, int c_out,
                         int stride, Tensor& out) {
  out = Tensor(c_out, out_extent(in.h, stride), out_extent(in.w, stride));
  for (int co = 0; co < c_out; ++co) {
    double* o = out.plane(co);
    std::fill(o, o + std::size_t(out.h) * out.w, b[co]);
    for (int ci = 0; ci < in.c; ++ci) {
      const double* src = in.plane(ci);
      for (int ky = 0; ky < 3; ++ky) {
        const auto [y0, y1] = valid_range(ky, stride, in.h, out.h);
        for (int kx = 0; kx < 3; ++kx) {
          const auto [x0, x1] = valid_range(kx, stride, in.w, out.w);
          const double wv = w[((std::size_t(co) * in.c + ci) * 3 + ky) * 3 + kx];
          for (int oy = y0; oy <= y1; ++oy) {
            const double* row = src + std::size_t(oy * stride + ky - 1) * in.w + (kx - 1);
            double* orow = o + std::size_t(oy) * out.w;
            for (int ox = x0; ox <= x1; ++ox) orow[ox] += wv * row[ox * stride];
          }
        }
      }
    }
  }
}

// Accumulates input and/or parameter gradients of a conv layer.
inline void conv_backward(const Tensor& in, std::span<const double> w, int stride, const Tensor& dout, Tensor* din,
                          double* dw, double* db) {
  if (din) *din = Tensor(in.c, in.h, in.w);
  for (int co = 0; co < dout.c; ++co) {
    const double* g = dout.plane(co);
    if (db) {
      double s = 0.0;
      for (std::size_t i = 0; i < std::size_t(dout.h) * dout.w; ++i) s += g[i];
      db[co] += s;
    }
    for (int ci = 0; ci < in.c; ++ci) {
      const double* src = in.plane(ci);
      double* dsrc = din ? din->plane(ci) : nullptr;
      for (int ky = 0; ky < 3; ++ky) {
        const auto [y0, y1] = valid_range(ky, stride, in.h, dout.h);
        for (int kx = 0; kx < 3; ++kx) {
          const auto [x0, x1] = valid_range(kx, stride, in.w, dout.w);
          const std::size_t widx = ((std::size_t(co) * in.c + ci) * 3 + ky) * 3 + kx;
          const double wv = w[widx];
          double acc = 0.0;
          for (int oy = y0; oy <= y1; ++oy) {
            const std::size_t in_off = std::size_t(oy * stride + ky - 1) * in.w + (kx - 1);
            const double* grow = g + std::size_t(oy) * dout.w;
            if (dw) {
              const double* row = src + in_off;
              for (int ox = x0; ox <= x1; ++ox) acc += grow[ox] * row[ox * stride];
            }
            if (dsrc) {
              double* drow = dsrc + in_off;
              for (int ox = x0; ox <= x1; ++ox) drow[ox * stride] += wv * grow[ox];
            }
          }
          if (dw) dw[widx] += acc;
        }
      }
    }
  }
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

struct ForwardCache {
  Tensor input;
  std::array<Tensor, 3> act;  // post-ReLU activations
  Tensor head;
};

}  // namespace detail

/// Per-cell regression target derived from a box.
struct CellTarget {
  int gx = 0, gy = 0;
  std::array<double, 4> offsets{};
};

class Network {
 public:
  explicit Network(Params params) : params_(std::move(params)), layout_(params_.architecture) {
    if (params_.weights.size() != layout_.total) throw InvalidArgument("toy network: weight count mismatch");
  }

  const Params& params() const noexcept { return params_; }
  Params& mutable_params() noexcept { return params_; }
  const Layout& layout() const noexcept { return layout_; }
  const Architecture& arch() const noexcept { return params_.architecture; }

  std::span<const double> weights(int l) const {
    const auto& L = layout_.layers[l];
    return {params_.weights.data() + L.weights, std::size_t(L.out) * L.in * 9};
  }
  std::span<const double> bias(int l) const {
    return {params_.weights.data() + layout_.layers[l].bias, std::size_t(layout_.layers[l].out)};
  }

  detail::ForwardCache forward(const RgbImage& image) const {
    if (image.height() < 1 || image.width() < 1) throw InvalidArgument("toy detector: empty image");
    detail::ForwardCache c;
    c.input = detail::Tensor(3, image.height(), image.width());
    const auto px = image.data();
    for (int y = 0; y < image.height(); ++y)
      for (int x = 0; x < image.width(); ++x)
        for (int ch = 0; ch < 3; ++ch)
          c.input.plane(ch)[std::size_t(y) * image.width() + x] = px[image.index(y, x, ch)] / 255.0 - 0.5;
    const detail::Tensor* prev = &c.input;
    for (int l = 0; l < 3; ++l) {
      detail::conv_forward(*prev, weights(l), bias(l), layout_.layers[l].out, layout_.layers[l].stride, c.act[l]);
      for (double& v : c.act[l].v) v = std::max(v, 0.0);
      prev = &c.act[l];
    }
    detail::conv_forward(c.act[2], weights(3), bias(3), kHeadChannels, 1, c.head);
    return c;
  }

  /// Assigns each target of the detector's class to the grid cell holding
  /// its centre.
  std::vector<CellTarget> assign(std::span<const Detection> targets, int grid_h, int grid_w) const {
    std::vector<CellTarget> cells;
    const double cell = arch().cell;
    for (const auto& t : targets) {
      if (t.class_id != kTargetClass || !t.box.valid()) continue;
      CellTarget ct;
      const double cx = t.box.center_x() / cell, cy = t.box.center_y() / cell;
      ct.gx = std::clamp(int(std::floor(cx)), 0, grid_w - 1);
      ct.gy = std::clamp(int(std::floor(cy)), 0, grid_h - 1);
      ct.offsets = {cx - ct.gx, cy - ct.gy, std::log(t.box.width() / arch().anchor),
                    std::log(t.box.height() / arch().anchor)};
      cells.push_back(ct);
    }
    return cells;
  }

  /// Cells that hold no target centre but whose predicted box overlaps a
  /// target at IoU > 0.5: duplicates NMS would suppress. They carry no
  /// objectness term.
  std::vector<bool> ignored_cells(const detail::Tensor& head, std::span<const Detection> targets, int image_h,
                                  int image_w) const {
    std::vector<bool> ignored(std::size_t(head.h) * head.w, false);
    const auto assigned = assign(targets, head.h, head.w);
    for (int gy = 0; gy < head.h; ++gy)
      for (int gx = 0; gx < head.w; ++gx) {
        const BoundingBox b = cell_box(head, gx, gy, image_h, image_w);
        for (const auto& t : targets)
          if (t.class_id == kTargetClass && t.box.valid() && iou(b, t.box) > 0.5)
            ignored[std::size_t(gy) * head.w + gx] = true;
      }
    for (const auto& a : assigned) ignored[std::size_t(a.gy) * head.w + a.gx] = false;
    return ignored;
  }

  /// Loss on the head output; fills d loss / d head when requested.
  /// objectness: sum over cells not ignored of softplus(o) - y*o, y = number
  /// of targets centred in the cell (binary cross-entropy for y in {0, 1});
  /// boxes: smooth-L1 on the four offsets at each target's cell.
  double head_loss(const detail::Tensor& head, std::span<const Detection> targets, detail::Tensor* dhead,
                   int image_h, int image_w) const {
    const std::size_t cells = std::size_t(head.h) * head.w;
    if (dhead) *dhead = detail::Tensor(head.c, head.h, head.w);
    std::vector<double> y(cells, 0.0);
    const auto assigned = assign(targets, head.h, head.w);
    for (const auto& a : assigned) y[std::size_t(a.gy) * head.w + a.gx] += 1.0;
    const auto ignored = ignored_cells(head, targets, image_h, image_w);
    double loss = 0.0;
    const double* obj = head.plane(0);
    for (std::size_t i = 0; i < cells; ++i) {
      if (ignored[i]) continue;
      loss += detail::softplus(obj[i]) - y[i] * obj[i];
      if (dhead) dhead->plane(0)[i] = detail::sigmoid(obj[i]) - y[i];
    }
    for (const auto& a : assigned) {
      const std::size_t i = std::size_t(a.gy) * head.w + a.gx;
      for (int k = 0; k < 4; ++k) {
        const double raw = head.plane(1 + k)[i];
        // Centre offsets pass through a sigmoid so a cell only predicts
        // centres inside itself.
        const double pred = k < 2 ? detail::sigmoid(raw) : raw;
        const double r = pred - a.offsets[k];
        const double ar = std::abs(r);
        loss += ar < 1.0 ? 0.5 * r * r : ar - 0.5;
        if (dhead) dhead->plane(1 + k)[i] += std::clamp(r, -1.0, 1.0) * (k < 2 ? pred * (1.0 - pred) : 1.0);
      }
    }
    return loss;
  }

  double head_loss(const detail::ForwardCache& c, std::span<const Detection> targets,
                   detail::Tensor* dhead = nullptr) const {
    return head_loss(c.head, targets, dhead, c.input.h, c.input.w);
  }

  /// Backpropagates d loss / d head through the network. Either output may
  /// be null.
  void backward(const detail::ForwardCache& c, const detail::Tensor& dhead, RgbRaster* dimage,
                std::vector<double>* dweights) const {
    auto dw_ptr = [&](int l) { return dweights ? dweights->data() + layout_.layers[l].weights : nullptr; };
    auto db_ptr = [&](int l) { return dweights ? dweights->data() + layout_.layers[l].bias : nullptr; };
    detail::Tensor grad;
    detail::conv_backward(c.act[2], weights(3), 1, dhead, &grad, dw_ptr(3), db_ptr(3));
    for (int l = 2; l >= 0; --l) {
      for (std::size_t i = 0; i < grad.v.size(); ++i)
        if (c.act[l].v[i] <= 0.0) grad.v[i] = 0.0;
      const detail::Tensor& in = l == 0 ? c.input : c.act[l - 1];
      detail::Tensor next;
      const bool need_input = l > 0 || dimage != nullptr;
      detail::conv_backward(in, weights(l), layout_.layers[l].stride, grad, need_input ? &next : nullptr, dw_ptr(l),
                            db_ptr(l));
      grad = std::move(next);
    }
    if (dimage) {
      *dimage = RgbRaster(c.input.h, c.input.w);
      for (int y = 0; y < c.input.h; ++y)
        for (int x = 0; x < c.input.w; ++x)
          for (int ch = 0; ch < 3; ++ch)
            dimage->at(y, x, ch) = grad.plane(ch)[std::size_t(y) * c.input.w + x] / 255.0;
    }
  }

  /// Decoded box of one grid cell, clipped to the image.
  BoundingBox cell_box(const detail::Tensor& head, int gx, int gy, int image_h, int image_w) const {
    const std::size_t i = std::size_t(gy) * head.w + gx;
    const double cell = arch().cell;
    const double cx = (gx + detail::sigmoid(head.plane(1)[i])) * cell;
    const double cy = (gy + detail::sigmoid(head.plane(2)[i])) * cell;
    const double w = arch().anchor * std::exp(std::min(head.plane(3)[i], 6.0));
    const double h = arch().anchor * std::exp(std::min(head.plane(4)[i], 6.0));
    return {std::clamp(cx - 0.5 * w, 0.0, double(image_w)), std::clamp(cy - 0.5 * h, 0.0, double(image_h)),
            std::clamp(cx + 0.5 * w, 0.0, double(image_w)), std::clamp(cy + 0.5 * h, 0.0, double(image_h))};
  }

  /// All grid-cell predictions (before thresholding and NMS).
  std::vector<Detection> decode(const detail::Tensor& head, int image_h, int image_w) const {
    std::vector<Detection> out;
    for (int gy = 0; gy < head.h; ++gy)
      for (int gx = 0; gx < head.w; ++gx) {
        const BoundingBox b = cell_box(head, gx, gy, image_h, image_w);
        if (!b.valid()) continue;
        out.push_back({b, kTargetClass, detail::sigmoid(head.plane(0)[std::size_t(gy) * head.w + gx])});
      }
    return out;
  }

 private:
  Params params_;
  Layout layout_;
};

class ToyDetector final : public Detector {
 public:
  explicit ToyDetector(Params params, double nms_iou = 0.5) : net_(std::move(params)), nms_iou_(nms_iou) {}

  std::vector<Detection> detect(const RgbImage& image, double confidence_threshold) const override {
    require_threshold(confidence_threshold);
    const auto c = net_.forward(image);
    auto all = net_.decode(c.head, image.height(), image.width());
    return non_maximum_suppression(eval::filter_by_confidence(all, confidence_threshold), nms_iou_);
  }

  double loss(const RgbImage& image, std::span<const Detection> targets) const override {
    const auto c = net_.forward(image);
    return net_.head_loss(c, targets);
  }

  LossAndGradient loss_gradient(const RgbImage& image, std::span<const Detection> targets) const override {
    const auto c = net_.forward(image);
    detail::Tensor dhead;
    LossAndGradient out;
    out.loss = net_.head_loss(c, targets, &dhead);
    net_.backward(c, dhead, &out.gradient, nullptr);
    return out;
  }

  std::string identity() const override {
    return "toy-cnn(seed=" + std::to_string(net_.params().seed) + ",c=" + std::to_string(net_.arch().channels1) + "/" +
           std::to_string(net_.arch().channels2) + "/" + std::to_string(net_.arch().channels3) + ")";
  }

  const Network& network() const noexcept { return net_; }
  const Params& params() const noexcept { return net_.params(); }

 private:
  Network net_;
  double nms_iou_;
};

// ---------------------------------------------------------------------------
// Synthetic corpus.

struct CorpusConfig {
  int image_size = 64;
  int min_object = 14;
  int max_object = 30;
  int train_images = 1280;
  int validation_images = 64;
  double empty_fraction = 0.1;  ///< share of images without an object
  int max_objects = 1;          ///< objects in a non-empty image: 1..max_objects
};

struct Sample {
  RgbImage image;
  std::vector<eval::TruthBox> truth;
};

namespace detail {

inline RgbImage textured_background(int size, std::mt19937_64& rng, std::array<double, 3>& base) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (double& b : base) b = 40.0 + 175.0 * u(rng);
  const double gx = 40.0 * (u(rng) - 0.5), gy = 40.0 * (u(rng) - 0.5);
  struct Wave {
    double fx, fy, phase, amp;
  };
  std::vector<Wave> waves;
  for (int k = 0; k < 3; ++k)
    waves.push_back({0.05 + 0.4 * u(rng), 0.05 + 0.4 * u(rng), 6.283 * u(rng), 4.0 + 8.0 * u(rng)});
  std::normal_distribution<double> noise(0.0, 4.0);
  RgbImage img(size, size);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      double tex = 0.0;
      for (const auto& w : waves) tex += w.amp * std::sin(w.fx * x + w.fy * y + w.phase);
      const double shade = gx * (x / double(size) - 0.5) + gy * (y / double(size) - 0.5);
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = std::clamp(base[c] + shade + tex + noise(rng), 0.0, 255.0);
    }
  return img;
}

// Convex shape membership: ellipse, axis-aligned rectangle, or a rotated
// rectangle (diamond-like) inside the given box.
inline bool inside_shape(int kind, double angle, double px, double py, double cx, double cy, double rx, double ry) {
  const double dx = px - cx, dy = py - cy;
  switch (kind) {
    case 0: return (dx * dx) / (rx * rx) + (dy * dy) / (ry * ry) <= 1.0;
    case 1: return std::abs(dx) <= rx && std::abs(dy) <= ry;
    default: {
      const double c = std::cos(angle), s = std::sin(angle);
      const double u = (c * dx + s * dy) / rx, v = (-s * dx + c * dy) / ry;
      return std::abs(u) + std::abs(v) <= 1.0;
    }
  }
}

}  // namespace detail

/// One seeded synthetic image with its planted objects.
inline Sample make_sample(const CorpusConfig& cfg, std::mt19937_64& rng, bool with_object) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::array<double, 3> base{};
  Sample s{detail::textured_background(cfg.image_size, rng, base), {}};
  if (!with_object) return s;
  const int count = 1 + int(u(rng) * cfg.max_objects) % std::max(1, cfg.max_objects);
  const color::LabPixel bg_lab = color::srgb_to_lab({base[0], base[1], base[2]});
  for (int attempt = 0; attempt < 50 && int(s.truth.size()) < count; ++attempt) {
    const double w = cfg.min_object + u(rng) * (cfg.max_object - cfg.min_object);
    const double h = cfg.min_object + u(rng) * (cfg.max_object - cfg.min_object);
    const double cx = 0.5 * w + u(rng) * (cfg.image_size - w);
    const double cy = 0.5 * h + u(rng) * (cfg.image_size - h);
    const int kind = int(u(rng) * 3.0) % 3;
    const double angle = u(rng) * 3.14159;
    // High-contrast object colour.
    std::array<double, 3> rgb{};
    for (int tries = 0; tries < 100; ++tries) {
      for (double& c : rgb) c = 255.0 * u(rng);
      if (color::ciede2000(color::srgb_to_lab({rgb[0], rgb[1], rgb[2]}), bg_lab) >= 30.0) break;
    }
    const double shade = 20.0 * (u(rng) - 0.5);
    int x0 = cfg.image_size, y0 = cfg.image_size, x1 = -1, y1 = -1;
    RgbImage next = s.image;
    for (int y = 0; y < cfg.image_size; ++y)
      for (int x = 0; x < cfg.image_size; ++x) {
        if (!detail::inside_shape(kind, angle, x + 0.5, y + 0.5, cx, cy, 0.5 * w, 0.5 * h)) continue;
        const double t = shade * ((x - cx) / w);
        for (int c = 0; c < 3; ++c) next.at(y, x, c) = std::clamp(rgb[c] + t, 0.0, 255.0);
        x0 = std::min(x0, x), y0 = std::min(y0, y), x1 = std::max(x1, x), y1 = std::max(y1, y);
      }
    if (x1 < 0) continue;
    const BoundingBox box{double(x0), double(y0), double(x1 + 1), double(y1 + 1)};
    const bool overlaps = std::any_of(s.truth.begin(), s.truth.end(),
                                      [&](const eval::TruthBox& t) { return iou(t.box, box) > 0.0; });
    if (overlaps) continue;
    s.image = std::move(next);
    s.truth.push_back({box, kTargetClass});
  }
  return s;
}

inline std::vector<Sample> make_corpus(const CorpusConfig& cfg, int count, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<Sample> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) out.push_back(make_sample(cfg, rng, u(rng) >= cfg.empty_fraction));
  return out;
}

/// Images whose single object is detectable by construction; used to build
/// attack sets.
inline std::vector<Sample> make_object_images(const CorpusConfig& cfg, int count, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Sample> out;
  while (int(out.size()) < count) {
    auto s = make_sample(cfg, rng, true);
    if (!s.truth.empty()) out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training.

struct TrainingRecipe {
  Architecture architecture;
  int max_epochs = 40;
  int min_epochs = 20;
  int batch_size = 8;
  double learning_rate = 5e-3;
  double lr_decay = 0.95;      ///< per epoch
  double crop_probability = 0.0;
  int min_crop = 16;
  double brightness_probability = 0.5;
  double brightness_min = 0.5;
  double brightness_max = 1.5;
  double target_map50 = 0.90;  ///< validation criterion (fraction, multi-threshold mAP-50)
};

struct TrainingReport {
  Params params;
  std::vector<double> epoch_loss;  ///< mean training loss per epoch
  std::vector<double> validation_map50;
  bool reached = false;
  std::string message;
};

struct TrainingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

inline Sample augment(const Sample& s, const TrainingRecipe& r, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Sample out;
  const int rotation = 90 * (int(u(rng) * 4.0) % 4);
  out.image = imaging::rotate(s.image, rotation);
  for (const auto& t : s.truth)
    out.truth.push_back({imaging::rotate_box(t.box, s.image.height(), s.image.width(), rotation), t.class_id});
  if (u(rng) < r.brightness_probability) {
    const double f = r.brightness_min + u(rng) * (r.brightness_max - r.brightness_min);
    for (double& v : out.image.values()) v = std::clamp(v * f, 0.0, 255.0);
  }
  if (u(rng) < r.crop_probability) {
    const int H = out.image.height(), W = out.image.width();
    const int ch = r.min_crop + int(u(rng) * (H - r.min_crop + 1));
    const int cw = r.min_crop + int(u(rng) * (W - r.min_crop + 1));
    int x0 = int(u(rng) * (W - cw + 1)), y0 = int(u(rng) * (H - ch + 1));
    if (!out.truth.empty()) {
      // Keep the first object's centre inside the crop.
      const auto& b = out.truth.front().box;
      const int cx = int(b.center_x()), cy = int(b.center_y());
      x0 = std::clamp(x0, std::max(0, cx - cw + 1), std::min(W - cw, cx));
      y0 = std::clamp(y0, std::max(0, cy - ch + 1), std::min(H - ch, cy));
    }
    out.image = imaging::extract_segment(out.image, {x0, y0, ch, cw});
    std::vector<eval::TruthBox> kept;
    for (auto t : out.truth) {
      const double cx = t.box.center_x() - x0, cy = t.box.center_y() - y0;
      if (cx < 0 || cy < 0 || cx >= cw || cy >= ch) continue;
      t.box = {std::clamp(t.box.x_min - x0, 0.0, double(cw)), std::clamp(t.box.y_min - y0, 0.0, double(ch)),
               std::clamp(t.box.x_max - x0, 0.0, double(cw)), std::clamp(t.box.y_max - y0, 0.0, double(ch))};
      if (t.box.valid()) kept.push_back(t);
    }
    out.truth = std::move(kept);
  }
  return out;
}

inline std::vector<Detection> as_targets(const std::vector<eval::TruthBox>& truth) {
  std::vector<Detection> t;
  for (const auto& b : truth) t.push_back({b.box, b.class_id, 1.0});
  return t;
}

}  // namespace detail

inline double validation_map50(const ToyDetector& det, const std::vector<Sample>& validation) {
  std::vector<RgbImage> images;
  eval::GroundTruth truth;
  for (const auto& s : validation) {
    images.push_back(s.image);
    truth.push_back(s.truth);
  }
  return eval::map50_multi_threshold(det, images, truth, eval::default_thresholds()).map50_percent / 100.0;
}

/// Trains the toy detector with Adam on minibatches of augmented synthetic
/// images. Stops at the first epoch (after min_epochs) whose validation
/// mAP-50 meets the recipe target; fully deterministic given the seed.
inline TrainingReport train_toy_detector(const CorpusConfig& corpus, const TrainingRecipe& recipe,
                                         std::uint64_t seed) {
  const auto train = make_corpus(corpus, corpus.train_images, seed * 2 + 1);
  const auto validation = make_corpus(corpus, corpus.validation_images, seed * 2 + 2);
  const bool any_object =
      std::any_of(train.begin(), train.end(), [](const Sample& s) { return !s.truth.empty(); });
  if (!any_object) throw TrainingError("train_toy_detector: corpus contains no objects; nothing to learn");

  TrainingReport report;
  Network net(random_params(seed, recipe.architecture));
  const std::size_t n_weights = net.params().weights.size();
  std::vector<double> m(n_weights, 0.0), v(n_weights, 0.0), grad(n_weights, 0.0);
  const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  long step = 0;
  double lr = recipe.learning_rate;

  for (int epoch = 0; epoch < recipe.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += recipe.batch_size) {
      std::fill(grad.begin(), grad.end(), 0.0);
      const std::size_t end = std::min(order.size(), start + recipe.batch_size);
      for (std::size_t k = start; k < end; ++k) {
        const auto sample = detail::augment(train[order[k]], recipe, rng);
        const auto targets = detail::as_targets(sample.truth);
        const auto cache = net.forward(sample.image);
        detail::Tensor dhead;
        epoch_loss += net.head_loss(cache, targets, &dhead);
        net.backward(cache, dhead, nullptr, &grad);
      }
      const double scale = 1.0 / double(end - start);
      ++step;
      auto& w = net.mutable_params().weights;
      const double c1 = 1.0 - std::pow(beta1, double(step)), c2 = 1.0 - std::pow(beta2, double(step));
      for (std::size_t i = 0; i < n_weights; ++i) {
        const double g = grad[i] * scale;
        m[i] = beta1 * m[i] + (1 - beta1) * g;
        v[i] = beta2 * v[i] + (1 - beta2) * g * g;
        w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
      }
    }
    lr *= recipe.lr_decay;
    report.epoch_loss.push_back(epoch_loss / double(train.size()));
    if (epoch + 1 >= recipe.min_epochs) {
      const double map = validation_map50(ToyDetector(net.params()), validation);
      report.validation_map50.push_back(map);
      if (map >= recipe.target_map50) {
        report.reached = true;
        break;
      }
    }
  }
  report.params = net.params();
  const double last = report.validation_map50.empty() ? 0.0 : report.validation_map50.back();
  report.message = std::string(report.reached ? "reached" : "did not reach") + " validation mAP-50 " +
                   std::to_string(last) + " (target " + std::to_string(recipe.target_map50) + ") after " +
                   std::to_string(report.epoch_loss.size()) + " epochs";
  return report;
}

/// Trains and insists on the validation criterion.
inline Params train_toy_detector_or_throw(const CorpusConfig& corpus, const TrainingRecipe& recipe,
                                          std::uint64_t seed) {
  auto r = train_toy_detector(corpus, recipe, seed);
  if (!r.reached) throw TrainingError("toy detector training failed: " + r.message);
  return std::move(r.params);
}

inline void to_json(nlohmann::json& j, const CorpusConfig& c) {
  j = {{"image_size", c.image_size},       {"min_object", c.min_object},
       {"max_object", c.max_object},       {"train_images", c.train_images},
       {"validation_images", c.validation_images}, {"empty_fraction", c.empty_fraction},
       {"max_objects", c.max_objects}};
}

inline void to_json(nlohmann::json& j, const TrainingRecipe& r) {
  const auto& a = r.architecture;
  j = {{"architecture", {a.channels1, a.channels2, a.channels3, a.cell, a.anchor}},
       {"max_epochs", r.max_epochs},
       {"min_epochs", r.min_epochs},
       {"batch_size", r.batch_size},
       {"learning_rate", r.learning_rate},
       {"lr_decay", r.lr_decay},
       {"crop_probability", r.crop_probability},
       {"min_crop", r.min_crop},
       {"brightness_probability", r.brightness_probability},
       {"brightness_min", r.brightness_min},
       {"brightness_max", r.brightness_max},
       {"target_map50", r.target_map50}};
}

/// Returns the cached training run at `path` when it was produced by the same
/// corpus, recipe and seed; otherwise trains and writes the cache.
inline TrainingReport load_or_train(const std::filesystem::path& path, const CorpusConfig& corpus,
                                    const TrainingRecipe& recipe, std::uint64_t seed) {
  const nlohmann::json key = {{"corpus", corpus}, {"recipe", recipe}, {"seed", seed}};
  if (std::ifstream in{path}) {
    try {
      const auto j = nlohmann::json::parse(in);
      if (j.at("key") == key) {
        TrainingReport r;
        r.params = j.at("params").get<Params>();
        r.epoch_loss = j.at("epoch_loss").get<std::vector<double>>();
        r.validation_map50 = j.at("validation_map50").get<std::vector<double>>();
        r.reached = j.at("reached").get<bool>();
        r.message = j.at("message").get<std::string>();
        return r;
      }
    } catch (const nlohmann::json::exception&) {
      // stale or corrupt cache: retrain
    }
  }
  auto r = train_toy_detector(corpus, recipe, seed);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp);
    out << nlohmann::json{{"key", key},
                          {"params", r.params},
                          {"epoch_loss", r.epoch_loss},
                          {"validation_map50", r.validation_map50},
                          {"reached", r.reached},
                          {"message", r.message}}
               .dump();
  }
  std::filesystem::rename(tmp, path);
  return r;
}

}  // namespace camo::toy
