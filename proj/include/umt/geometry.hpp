#pragma once

#include <cstddef>
#include <vector>

namespace umt {

/// Axis-aligned box, top-left corner plus extent, in pixel units.
struct Box {
  double x = 0.0;
  double y = 0.0;
  double w = 0.0;
  double h = 0.0;

  double x2() const { return x + w; }
  double y2() const { return y + h; }
  double cx() const { return x + 0.5 * w; }
  double cy() const { return y + 0.5 * h; }
  double area() const { return w * h; }

  /// w > 0, h > 0 and every field finite.
  bool valid() const;

  bool operator==(const Box&) const = default;
};

/// One scored prediction. class_id is in 1..C; 0 is background and never
/// appears here. class_probs spans all C+1 classes.
struct Detection {
  Box box;
  int class_id = 1;
  double score = 0.0;
  std::vector<double> class_probs;
  double confidence = 0.0;
};

struct LabeledBox {
  Box box;
  int class_id = 1;

  bool operator==(const LabeledBox&) const = default;
};

double iou(const Box& a, const Box& b);

/// Score-greedy suppression for detections of a single class. Output is
/// sorted by score, ties resolved by input order.
std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_threshold);

/// Same as nms() but returns indices into the input.
std::vector<std::size_t> nms_indices(const std::vector<Detection>& dets, double iou_threshold);

struct MatchResult {
  std::vector<bool> true_positive;  // aligned with the input detections
  std::vector<bool> gt_matched;     // aligned with the input ground truths
  std::size_t tp_count() const;
};

/// VOC/COCO-style greedy matching. Detections are visited by descending
/// score; each takes the unmatched same-class ground truth with the highest
/// IoU (lowest index on ties) and counts as a true positive when that IoU
/// reaches the threshold.
MatchResult match_greedy(const std::vector<Detection>& dets,
                         const std::vector<LabeledBox>& gts,
                         double iou_threshold);

/// Indices that sort detections by descending score, stable on ties.
std::vector<std::size_t> score_order(const std::vector<Detection>& dets);

}  // namespace umt
