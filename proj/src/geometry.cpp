#include "umt/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace umt {

bool Box::valid() const {
  return std::isfinite(x) && std::isfinite(y) && std::isfinite(w) && std::isfinite(h) &&
         w > 0.0 && h > 0.0;
}

double iou(const Box& a, const Box& b) {
  const double iw = std::min(a.x2(), b.x2()) - std::max(a.x, b.x);
  const double ih = std::min(a.y2(), b.y2()) - std::max(a.y, b.y);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  // Areas from corner differences so that iou(a, a) is exactly 1.
  const double area_a = (a.x2() - a.x) * (a.y2() - a.y);
  const double area_b = (b.x2() - b.x) * (b.y2() - b.y);
  const double uni = area_a + area_b - inter;
  if (uni <= 0.0) return 0.0;
  return std::clamp(inter / uni, 0.0, 1.0);
}

std::vector<std::size_t> score_order(const std::vector<Detection>& dets) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return dets[a].score > dets[b].score;
  });
  return order;
}

std::vector<std::size_t> nms_indices(const std::vector<Detection>& dets, double iou_threshold) {
  std::vector<std::size_t> kept;
  for (std::size_t i : score_order(dets)) {
    bool keep = true;
    for (std::size_t k : kept) {
      if (iou(dets[i].box, dets[k].box) > iou_threshold) {
        keep = false;
        break;
      }
    }
    if (keep) kept.push_back(i);
  }
  return kept;
}

std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_threshold) {
  std::vector<Detection> out;
  for (std::size_t i : nms_indices(dets, iou_threshold)) out.push_back(dets[i]);
  return out;
}

std::size_t MatchResult::tp_count() const {
  return static_cast<std::size_t>(std::count(true_positive.begin(), true_positive.end(), true));
}

MatchResult match_greedy(const std::vector<Detection>& dets,
                         const std::vector<LabeledBox>& gts,
                         double iou_threshold) {
  MatchResult result;
  result.true_positive.assign(dets.size(), false);
  result.gt_matched.assign(gts.size(), false);
  for (std::size_t d : score_order(dets)) {
    double best = -1.0;
    std::size_t best_gt = gts.size();
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (result.gt_matched[g] || gts[g].class_id != dets[d].class_id) continue;
      const double overlap = iou(dets[d].box, gts[g].box);
      if (overlap > best) {
        best = overlap;
        best_gt = g;
      }
    }
    if (best_gt < gts.size() && best >= iou_threshold) {
      result.true_positive[d] = true;
      result.gt_matched[best_gt] = true;
    }
  }
  return result;
}

}  // namespace umt
