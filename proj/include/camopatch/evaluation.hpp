#pragma once

// mAP-50 evaluation averaged over confidence thresholds and rank-based
// combined scoring of experiment rows.

#include <algorithm>
#include <cstddef>
#include <future>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "camopatch/detector.hpp"

namespace camo::eval {

using camo::iou;

struct TruthBox {
  BoundingBox box;
  int class_id = 0;
};

/// Per-image truth boxes.
using GroundTruth = std::vector<std::vector<TruthBox>>;
/// Per-image detections.
using DetectionSet = std::vector<std::vector<Detection>>;

struct ApResult {
  double value = 0.0;
  std::optional<std::string> diagnostic;
};

namespace detail {

struct RankedDetection {
  std::size_t image;
  Detection det;
};

inline std::vector<RankedDetection> rank_detections(const DetectionSet& detections, int class_id) {
  std::vector<RankedDetection> ranked;
  for (std::size_t i = 0; i < detections.size(); ++i)
    for (const auto& d : detections[i])
      if (d.class_id == class_id) ranked.push_back({i, d});
  std::stable_sort(ranked.begin(), ranked.end(), [](const RankedDetection& a, const RankedDetection& b) {
    if (a.det.confidence != b.det.confidence) return a.det.confidence > b.det.confidence;
    return a.image < b.image;
  });
  return ranked;
}

}  // namespace detail

/// Average precision of one class: greedy matching in descending confidence
/// (each detection takes the best-overlapping unmatched truth in its image at
/// IoU >= threshold) and area under the all-point interpolated PR curve.
/// Detections of other classes are ignored.
inline ApResult average_precision(const DetectionSet& detections, const GroundTruth& truth, int class_id = 0,
                                  double iou_threshold = 0.5) {
  if (detections.size() != truth.size())
    throw InvalidArgument("average_precision: detections and truth cover different image counts");
  std::size_t positives = 0;
  for (const auto& img : truth)
    for (const auto& t : img) positives += t.class_id == class_id;
  const auto ranked = detail::rank_detections(detections, class_id);
  if (positives == 0) {
    ApResult r;
    if (!ranked.empty()) r.diagnostic = "no truth boxes of class " + std::to_string(class_id) +
                                        " but " + std::to_string(ranked.size()) + " detections; AP set to 0";
    return r;
  }

  std::vector<std::vector<bool>> matched(truth.size());
  for (std::size_t i = 0; i < truth.size(); ++i) matched[i].assign(truth[i].size(), false);

  std::vector<double> precision, recall;
  std::size_t tp = 0;
  for (std::size_t k = 0; k < ranked.size(); ++k) {
    const auto& [img, det] = ranked[k];
    double best = iou_threshold;
    std::optional<std::size_t> best_idx;
    for (std::size_t j = 0; j < truth[img].size(); ++j) {
      if (matched[img][j] || truth[img][j].class_id != class_id) continue;
      const double o = iou(det.box, truth[img][j].box);
      if (o >= best) {
        best = o;
        best_idx = j;
      }
    }
    if (best_idx) {
      matched[img][*best_idx] = true;
      ++tp;
    }
    precision.push_back(double(tp) / double(k + 1));
    recall.push_back(double(tp) / double(positives));
  }

  // Precision envelope, then integrate over recall steps.
  for (std::size_t k = precision.size(); k-- > 1;) precision[k - 1] = std::max(precision[k - 1], precision[k]);
  double ap = 0.0, prev_recall = 0.0;
  for (std::size_t k = 0; k < precision.size(); ++k) {
    ap += (recall[k] - prev_recall) * precision[k];
    prev_recall = recall[k];
  }
  return {ap, std::nullopt};
}

inline std::vector<Detection> filter_by_confidence(const std::vector<Detection>& dets, double threshold) {
  std::vector<Detection> out;
  std::copy_if(dets.begin(), dets.end(), std::back_inserter(out),
               [&](const Detection& d) { return d.confidence >= threshold; });
  return out;
}

/// Runs fn(i) for i in [0, n), concurrently when more than one hardware
/// thread is available; results keep index order.
template <typename Fn>
auto parallel_map(std::size_t n, Fn&& fn) -> std::vector<decltype(fn(std::size_t{}))> {
  using R = decltype(fn(std::size_t{}));
  std::vector<R> out;
  out.reserve(n);
  if (std::thread::hardware_concurrency() <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) out.push_back(fn(i));
    return out;
  }
  std::vector<std::future<R>> futures;
  futures.reserve(n);
  for (std::size_t i = 0; i < n; ++i) futures.push_back(std::async(std::launch::async, fn, i));
  for (auto& f : futures) out.push_back(f.get());
  return out;
}

struct EvalReport {
  double map50_percent = 0.0;
  double mean_perc_distance = 0.0;
  std::vector<double> thresholds;
  std::vector<double> per_threshold_ap;  ///< in [0, 1], aligned with thresholds
  std::vector<std::string> diagnostics;

  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

inline const std::vector<double>& default_thresholds() {
  static const std::vector<double> t{0.5, 0.1, 0.001};
  return t;
}

/// mAP-50 from precomputed detections: AP at each confidence threshold,
/// averaged, as a percentage.
inline EvalReport map50_from_detections(const DetectionSet& detections, const GroundTruth& truth,
                                        std::span<const double> thresholds, int class_id = 0) {
  if (thresholds.empty()) throw InvalidArgument("map50: at least one confidence threshold is required");
  for (double t : thresholds) require_threshold(t);
  EvalReport r;
  r.thresholds.assign(thresholds.begin(), thresholds.end());
  for (double t : thresholds) {
    DetectionSet filtered;
    for (const auto& d : detections) filtered.push_back(filter_by_confidence(d, t));
    const auto ap = average_precision(filtered, truth, class_id, 0.5);
    r.per_threshold_ap.push_back(ap.value);
    if (ap.diagnostic) r.diagnostics.push_back(*ap.diagnostic);
  }
  r.map50_percent = 100.0 * std::accumulate(r.per_threshold_ap.begin(), r.per_threshold_ap.end(), 0.0) /
                    double(r.per_threshold_ap.size());
  return r;
}

/// Runs the detector once per image at the lowest threshold (NMS commutes
/// with confidence filtering) and evaluates every threshold from that.
/// Detector errors propagate; no partial report is produced.
inline EvalReport map50_multi_threshold(const Detector& detector, std::span<const RgbImage> images,
                                        const GroundTruth& truth, std::span<const double> thresholds,
                                        int class_id = 0) {
  if (thresholds.empty()) throw InvalidArgument("map50: at least one confidence threshold is required");
  if (images.size() != truth.size()) throw InvalidArgument("map50: images and truth differ in count");
  for (double t : thresholds) require_threshold(t);
  const double lowest = *std::min_element(thresholds.begin(), thresholds.end());
  DetectionSet detections =
      parallel_map(images.size(), [&](std::size_t i) { return detector.detect(images[i], lowest); });
  return map50_from_detections(detections, truth, thresholds, class_id);
}

// ---------------------------------------------------------------------------
// Rank-based combined score.

struct ScoreInput {
  std::string label;
  double map50 = 0.0;
  double mean_perc = 0.0;
};

struct ScoreRow {
  std::string label;
  double map50 = 0.0;
  double mean_perc = 0.0;
  int rank_map = 0;
  int rank_perc = 0;
  int combined = 0;
};

struct ScoreTable {
  std::vector<ScoreRow> rows;
  /// Ties on the combined score, with the manual tie-break rule to apply.
  std::vector<std::string> annotations;

  const ScoreRow& row(const std::string& label) const {
    for (const auto& r : rows)
      if (r.label == label) return r;
    throw InvalidArgument("ScoreTable: no row labelled " + label);
  }
};

/// Dense ascending rank (equal values share a rank).
inline std::vector<int> dense_rank(std::span<const double> values) {
  std::vector<double> distinct(values.begin(), values.end());
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  std::vector<int> ranks;
  for (double v : values)
    ranks.push_back(int(std::lower_bound(distinct.begin(), distinct.end(), v) - distinct.begin()) + 1);
  return ranks;
}

/// Lower is better on both columns; combined = rank_map + rank_perc, so the
/// best achievable score is 2. Rows keep their input order.
inline ScoreTable combined_rank_score(std::span<const ScoreInput> inputs) {
  if (inputs.empty()) throw InvalidArgument("combined_rank_score: no rows");
  std::vector<double> maps, percs;
  for (const auto& r : inputs) {
    maps.push_back(r.map50);
    percs.push_back(r.mean_perc);
  }
  const auto rm = dense_rank(maps);
  const auto rp = dense_rank(percs);
  ScoreTable table;
  for (std::size_t i = 0; i < inputs.size(); ++i)
    table.rows.push_back({inputs[i].label, inputs[i].map50, inputs[i].mean_perc, rm[i], rp[i], rm[i] + rp[i]});

  std::map<int, std::vector<std::string>> by_score;
  for (const auto& r : table.rows) by_score[r.combined].push_back(r.label);
  for (const auto& [score, labels] : by_score) {
    if (labels.size() < 2) continue;
    std::string note = "tie at combined score " + std::to_string(score) + ":";
    for (const auto& l : labels) note += " " + l + ";";
    note += " break by shortest execution time, then by best robustness/imperceptibility balance (not applied)";
    table.annotations.push_back(note);
  }
  return table;
}

}  // namespace camo::eval
