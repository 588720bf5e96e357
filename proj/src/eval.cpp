#include "umt/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "umt/common.hpp"

namespace umt {

namespace fs = std::filesystem;
using nlohmann::json;

double average_precision(std::vector<ScoredOutcome> outcomes, std::size_t num_gt) {
  if (num_gt == 0) throw ConfigError("average precision is undefined without ground truth");
  std::stable_sort(outcomes.begin(), outcomes.end(),
                   [](const ScoredOutcome& a, const ScoredOutcome& b) { return a.score > b.score; });
  const std::size_t n = outcomes.size();
  std::vector<double> envelope(n);
  std::size_t tp = 0;
  for (std::size_t r = 0; r < n; ++r) {
    tp += outcomes[r].true_positive;
    envelope[r] = static_cast<double>(tp) / static_cast<double>(r + 1);
  }
  for (std::size_t r = n; r-- > 1;) envelope[r - 1] = std::max(envelope[r - 1], envelope[r]);
  // Recall rises by 1/num_gt at each true positive; the area is the sum of
  // the envelope at those ranks.
  double sum = 0.0;
  for (std::size_t r = 0; r < n; ++r)
    if (outcomes[r].true_positive) sum += envelope[r];
  return sum / static_cast<double>(num_gt);
}

namespace {

std::vector<ScoredOutcome> class_outcomes(const std::vector<std::vector<Detection>>& dets,
                                          const std::vector<std::vector<LabeledBox>>& gts, int class_id,
                                          double iou_threshold, std::size_t* num_gt) {
  if (dets.size() != gts.size()) throw ConfigError("detections and ground truth cover different image counts");
  std::vector<ScoredOutcome> out;
  *num_gt = 0;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    std::vector<Detection> d;
    std::vector<LabeledBox> g;
    for (const auto& x : dets[i])
      if (x.class_id == class_id) d.push_back(x);
    for (const auto& x : gts[i])
      if (x.class_id == class_id) g.push_back(x);
    *num_gt += g.size();
    const MatchResult m = match_greedy(d, g, iou_threshold);
    for (std::size_t k = 0; k < d.size(); ++k) out.push_back({d[k].score, m.true_positive[k]});
  }
  return out;
}

}  // namespace

double average_precision(const std::vector<std::vector<Detection>>& dets,
                         const std::vector<std::vector<LabeledBox>>& gts, int class_id, double iou_threshold) {
  std::size_t num_gt = 0;
  auto outcomes = class_outcomes(dets, gts, class_id, iou_threshold, &num_gt);
  return average_precision(std::move(outcomes), num_gt);
}

std::vector<std::vector<Detection>> predict_dataset(const DetectorParams& params,
                                                    const std::vector<AnnotatedScene>& scenes, double nms_iou) {
  std::vector<std::vector<Detection>> out;
  out.reserve(scenes.size());
  const int C = params.config().num_classes;
  for (const auto& s : scenes) {
    const auto raw = forward(params, s.image).detections;
    std::vector<Detection> kept;
    for (int c = 1; c <= C; ++c) {
      std::vector<Detection> group;
      for (const auto& d : raw)
        if (d.class_id == c) group.push_back(d);
      for (auto& d : nms(group, nms_iou)) kept.push_back(std::move(d));
    }
    out.push_back(std::move(kept));
  }
  return out;
}

std::vector<std::vector<LabeledBox>> ground_truths(const std::vector<AnnotatedScene>& scenes) {
  std::vector<std::vector<LabeledBox>> out;
  for (const auto& s : scenes) out.push_back(s.labeled());
  return out;
}

EvalReport evaluate_detections(const std::vector<std::vector<Detection>>& dets,
                               const std::vector<std::vector<LabeledBox>>& gts, int num_classes,
                               double iou_threshold) {
  if (gts.empty()) throw ConfigError("evaluation dataset is empty");
  if (!(iou_threshold > 0.0 && iou_threshold <= 1.0)) throw ConfigError("eval.iou_threshold: must be in (0, 1]");
  EvalReport r;
  r.iou_threshold = iou_threshold;
  r.num_images = gts.size();
  double sum = 0.0;
  int counted = 0;
  for (int c = 1; c <= num_classes; ++c) {
    ClassAP ca;
    ca.class_id = c;
    auto outcomes = class_outcomes(dets, gts, c, iou_threshold, &ca.num_gt);
    ca.num_det = outcomes.size();
    if (ca.num_gt == 0) {
      r.warnings.push_back("class " + std::to_string(c) + " has no ground truth; excluded from mAP");
    } else {
      ca.ap = average_precision(std::move(outcomes), ca.num_gt);
      sum += *ca.ap;
      ++counted;
    }
    r.per_class.push_back(ca);
  }
  r.map = counted > 0 ? sum / counted : 0.0;
  return r;
}

EvalReport mean_ap(const DetectorParams& params, const std::vector<AnnotatedScene>& scenes, double iou_threshold) {
  if (scenes.empty()) throw ConfigError("evaluation dataset is empty");
  return evaluate_detections(predict_dataset(params, scenes), ground_truths(scenes), params.config().num_classes,
                             iou_threshold);
}

std::vector<std::pair<double, double>> iou_sweep(const std::vector<std::vector<Detection>>& dets,
                                                 const std::vector<std::vector<LabeledBox>>& gts, int num_classes,
                                                 const std::vector<double>& thresholds) {
  if (thresholds.empty()) throw ConfigError("eval.sweep: no thresholds given");
  for (std::size_t i = 0; i < thresholds.size(); ++i) {
    if (!(thresholds[i] > 0.0 && thresholds[i] < 1.0)) throw ConfigError("eval.sweep: thresholds must lie in (0, 1)");
    if (i > 0 && !(thresholds[i] > thresholds[i - 1])) throw ConfigError("eval.sweep: thresholds must ascend");
  }
  std::vector<std::pair<double, double>> curve;
  for (double t : thresholds) curve.emplace_back(t, evaluate_detections(dets, gts, num_classes, t).map);
  return curve;
}

std::vector<std::pair<double, double>> iou_sweep(const DetectorParams& params,
                                                 const std::vector<AnnotatedScene>& scenes,
                                                 const std::vector<double>& thresholds) {
  if (scenes.empty()) throw ConfigError("evaluation dataset is empty");
  return iou_sweep(predict_dataset(params, scenes), ground_truths(scenes), params.config().num_classes, thresholds);
}

LocalizationCategory classify_localization(const Detection& det, const std::vector<LabeledBox>& gts) {
  double same = 0.0, other = 0.0;
  for (const auto& g : gts) {
    const double o = iou(det.box, g.box);
    if (g.class_id == det.class_id)
      same = std::max(same, o);
    else
      other = std::max(other, o);
  }
  if (same >= 0.5) return LocalizationCategory::Correct;
  if (other > same && other > 0.3) return LocalizationCategory::Misclassified;
  if (same > 0.3) return LocalizationCategory::Mislocalized;
  return LocalizationCategory::Background;
}

const char* to_string(ConfidentRule rule) {
  switch (rule) {
    case ConfidentRule::TopKPerClass: return "topk";
    case ConfidentRule::AboveDumpScore: return "score";
    case ConfidentRule::All: return "all";
  }
  return "?";
}

ConfidentRule confident_rule_from_string(const std::string& name) {
  for (auto r : {ConfidentRule::TopKPerClass, ConfidentRule::AboveDumpScore, ConfidentRule::All})
    if (name == to_string(r)) return r;
  throw ConfigError("unknown localization rule '" + name + "'; valid choices: topk, score, all");
}

LocalizationBreakdown localization_error_analysis(const std::vector<std::vector<Detection>>& dets,
                                                  const std::vector<std::vector<LabeledBox>>& gts,
                                                  int num_classes, ConfidentRule rule) {
  if (dets.size() != gts.size()) throw ConfigError("detections and ground truth cover different image counts");
  LocalizationBreakdown b;
  std::size_t counts[4] = {0, 0, 0, 0};
  for (int c = 1; c <= num_classes; ++c) {
    std::size_t k = 0;
    struct Ref {
      double score;
      std::size_t image, index;
    };
    std::vector<Ref> refs;
    for (std::size_t i = 0; i < gts.size(); ++i) {
      for (const auto& g : gts[i]) k += g.class_id == c;
      for (std::size_t j = 0; j < dets[i].size(); ++j)
        if (dets[i][j].class_id == c) refs.push_back({dets[i][j].score, i, j});
    }
    std::stable_sort(refs.begin(), refs.end(), [](const Ref& a, const Ref& b) { return a.score > b.score; });
    if (rule == ConfidentRule::TopKPerClass) refs.resize(std::min(k, refs.size()));
    if (rule == ConfidentRule::AboveDumpScore)
      std::erase_if(refs, [](const Ref& r) { return r.score < kDumpScoreThreshold; });
    for (const auto& r : refs) ++counts[static_cast<int>(classify_localization(dets[r.image][r.index], gts[r.image]))];
  }
  b.total = counts[0] + counts[1] + counts[2] + counts[3];
  if (b.total > 0) {
    const double n = static_cast<double>(b.total);
    b.correct = counts[0] / n;
    b.mislocalized = counts[1] / n;
    b.background = counts[2] / n;
    b.misclassified = counts[3] / n;
  }
  return b;
}

ClassificationBreakdown classification_error_analysis(const std::vector<std::vector<Detection>>& dets,
                                                      const std::vector<std::vector<LabeledBox>>& gts,
                                                      int num_classes, double score_floor) {
  if (dets.size() != gts.size()) throw ConfigError("detections and ground truth cover different image counts");
  ClassificationBreakdown b;
  b.confusion.assign(num_classes + 1, std::vector<std::size_t>(num_classes + 1, 0));
  std::size_t correct = 0, wrong = 0, missed = 0;
  for (std::size_t i = 0; i < gts.size(); ++i) {
    for (const auto& g : gts[i]) {
      double best = 0.0;
      int predicted = 0;
      for (const auto& d : dets[i]) {
        if (d.score < score_floor) continue;
        const double o = iou(d.box, g.box);
        if (o > best) {
          best = o;
          predicted = d.class_id;
        }
      }
      ++b.confusion.at(g.class_id).at(predicted);
      if (predicted == 0)
        ++missed;
      else if (predicted == g.class_id)
        ++correct;
      else
        ++wrong;
    }
  }
  b.num_gt = correct + wrong + missed;
  if (b.num_gt > 0) {
    const double n = static_cast<double>(b.num_gt);
    b.correct = correct / n;
    b.misclassified = wrong / n;
    b.missed = missed / n;
  }
  return b;
}

BiasDiagnostic bias_diagnostic(const DetectorParams& teacher, const std::vector<AnnotatedScene>& target,
                               const std::vector<AnnotatedScene>& source_like, double iou_threshold) {
  if (target.size() != source_like.size())
    throw ConfigError("bias diagnostic: target and source-like sets differ in size");
  for (std::size_t i = 0; i < target.size(); ++i) {
    const auto &t = target[i], &s = source_like[i];
    const bool linked = s.parent.empty() || s.parent == t.id;
    if (!linked || !(t.boxes == s.boxes) || t.classes != s.classes)
      throw ConfigError("bias diagnostic: scene " + std::to_string(i) + " is not a translation pair");
  }
  return {mean_ap(teacher, target, iou_threshold).map, mean_ap(teacher, source_like, iou_threshold).map};
}

json report_json(const EvalReport& r) {
  json j;
  j["iou_threshold"] = r.iou_threshold;
  j["map"] = r.map;
  j["num_images"] = r.num_images;
  j["checkpoint"] = r.checkpoint_id;
  j["dataset"] = r.dataset_id;
  j["per_class"] = json::array();
  for (const auto& c : r.per_class) {
    json e = {{"class_id", c.class_id}, {"num_gt", c.num_gt}, {"num_det", c.num_det}};
    e["ap"] = c.ap ? json(*c.ap) : json(nullptr);
    j["per_class"].push_back(e);
  }
  if (!r.sweep.empty()) {
    j["sweep"] = json::array();
    for (const auto& [t, m] : r.sweep) j["sweep"].push_back({{"iou_threshold", t}, {"map", m}});
  }
  if (r.localization) {
    const auto& l = *r.localization;
    j["localization"] = {{"total", l.total},
                         {"correct", l.correct},
                         {"mislocalized", l.mislocalized},
                         {"background", l.background},
                         {"misclassified", l.misclassified}};
  }
  if (r.classification) {
    const auto& c = *r.classification;
    j["classification"] = {{"num_gt", c.num_gt},
                           {"correct", c.correct},
                           {"misclassified", c.misclassified},
                           {"missed", c.missed},
                           {"confusion", c.confusion}};
  }
  j["warnings"] = r.warnings;
  return j;
}

std::vector<fs::path> write_report(const fs::path& dir, const EvalReport& r) {
  fs::create_directories(dir);
  std::vector<fs::path> written;
  {
    const fs::path p = dir / "report.json";
    std::ofstream(p, std::ios::binary) << report_json(r).dump(2) << '\n';
    written.push_back(p);
  }
  {
    const fs::path p = dir / "per_class.csv";
    std::ofstream out(p, std::ios::binary);
    out << "class_id,ap,num_gt,num_det\n";
    for (const auto& c : r.per_class)
      out << c.class_id << ',' << (c.ap ? shortest(*c.ap) : "") << ',' << c.num_gt << ',' << c.num_det << '\n';
    written.push_back(p);
  }
  if (!r.sweep.empty()) {
    const fs::path p = dir / "sweep.csv";
    std::ofstream out(p, std::ios::binary);
    out << "iou_threshold,map\n";
    for (const auto& [t, m] : r.sweep) out << shortest(t) << ',' << shortest(m) << '\n';
    written.push_back(p);
  }
  return written;
}

namespace {

// 3x5 glyphs for 0-9 and '.', one row per 3-bit mask.
constexpr unsigned char kGlyphs[11][5] = {
    {7, 5, 5, 5, 7}, {2, 6, 2, 2, 7}, {7, 1, 7, 4, 7}, {7, 1, 7, 1, 7}, {5, 5, 7, 1, 1}, {7, 4, 7, 1, 7},
    {7, 4, 7, 5, 7}, {7, 1, 1, 1, 1}, {7, 5, 7, 5, 7}, {7, 5, 7, 1, 7}, {0, 0, 0, 0, 2}};

const std::array<double, 3> kClassColors[] = {{1, 1, 1}, {1, 0.2, 0.2}, {0.2, 1, 0.2}, {0.3, 0.5, 1},
                                              {1, 1, 0.2}, {1, 0.3, 1}};

void put_pixel(Image& img, int y, int x, const std::array<double, 3>& color) {
  if (y < 0 || x < 0 || y >= img.height() || x >= img.width()) return;
  for (int c = 0; c < 3; ++c) img.at(y, x, c) = color[c];
}

void draw_text(Image& img, int y0, int x0, const std::string& text, const std::array<double, 3>& color) {
  int x = x0;
  for (char ch : text) {
    const int g = ch == '.' ? 10 : ch - '0';
    if (g < 0 || g > 10) continue;
    for (int r = 0; r < 5; ++r)
      for (int c = 0; c < 3; ++c)
        if (kGlyphs[g][r] & (4 >> c)) put_pixel(img, y0 + r, x + c, color);
    x += 4;
  }
}

}  // namespace

Image annotate(const Image& image, const std::vector<Detection>& dets, double threshold, int scale) {
  Image out(image.height() * scale, image.width() * scale);
  for (int y = 0; y < out.height(); ++y)
    for (int x = 0; x < out.width(); ++x)
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = image.at(y / scale, x / scale, c);
  for (const auto& d : dets) {
    if (d.score <= threshold) continue;
    const auto& color = kClassColors[std::clamp(d.class_id, 0, 5)];
    const int x0 = static_cast<int>(std::lround(d.box.x * scale)), y0 = static_cast<int>(std::lround(d.box.y * scale));
    const int x1 = static_cast<int>(std::lround(d.box.x2() * scale)) - 1;
    const int y1 = static_cast<int>(std::lround(d.box.y2() * scale)) - 1;
    for (int x = x0; x <= x1; ++x) {
      put_pixel(out, y0, x, color);
      put_pixel(out, y1, x, color);
    }
    for (int y = y0; y <= y1; ++y) {
      put_pixel(out, y, x0, color);
      put_pixel(out, y, x1, color);
    }
    char label[16];
    std::snprintf(label, sizeof(label), "%.2f", d.score);  // class is shown by colour
    draw_text(out, std::max(0, y0 - 6), x0, label, color);
  }
  return out;
}

}  // namespace umt
