#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "umt/detector.hpp"
#include "umt/geometry.hpp"
#include "umt/synth.hpp"

namespace umt {

struct ScoredOutcome {
  double score = 0.0;
  bool true_positive = false;
};

/// All-points interpolated AP. Outcomes are ranked by descending score,
/// stable on ties; recall is relative to num_gt, which must be positive.
double average_precision(std::vector<ScoredOutcome> outcomes, std::size_t num_gt);

/// Per-image detections and ground truths; detections of other classes are ignored.
double average_precision(const std::vector<std::vector<Detection>>& dets,
                         const std::vector<std::vector<LabeledBox>>& gts, int class_id, double iou_threshold);

struct ClassAP {
  int class_id = 0;
  std::optional<double> ap;  // empty when the class has no ground truth
  std::size_t num_gt = 0;
  std::size_t num_det = 0;
};

struct LocalizationBreakdown {
  std::size_t total = 0;
  double correct = 0.0;
  double mislocalized = 0.0;
  double background = 0.0;
  double misclassified = 0.0;
};

enum class LocalizationCategory { Correct, Mislocalized, Background, Misclassified };

struct ClassificationBreakdown {
  std::size_t num_gt = 0;
  double correct = 0.0;
  double misclassified = 0.0;
  double missed = 0.0;
  /// confusion[g][p]: gt class g (1..C) predicted as p (1..C), p = 0 for missed.
  std::vector<std::vector<std::size_t>> confusion;

  double accuracy() const { return correct; }
};

struct EvalReport {
  std::vector<ClassAP> per_class;
  double map = 0.0;
  double iou_threshold = 0.5;
  std::size_t num_images = 0;
  std::vector<std::pair<double, double>> sweep;  // (threshold, mAP)
  std::optional<LocalizationBreakdown> localization;
  std::optional<ClassificationBreakdown> classification;
  std::string checkpoint_id;
  std::string dataset_id;
  std::vector<std::string> warnings;
};

inline constexpr double kEvalNmsIou = 0.3;
inline constexpr double kClassificationScoreFloor = 0.05;
inline constexpr double kDumpScoreThreshold = 0.6;

/// Forward pass plus per-class NMS on every image.
std::vector<std::vector<Detection>> predict_dataset(const DetectorParams& params,
                                                    const std::vector<AnnotatedScene>& scenes,
                                                    double nms_iou = kEvalNmsIou);

std::vector<std::vector<LabeledBox>> ground_truths(const std::vector<AnnotatedScene>& scenes);

/// Per-class AP and their mean over classes that have ground truth.
EvalReport evaluate_detections(const std::vector<std::vector<Detection>>& dets,
                               const std::vector<std::vector<LabeledBox>>& gts, int num_classes,
                               double iou_threshold);

EvalReport mean_ap(const DetectorParams& params, const std::vector<AnnotatedScene>& scenes,
                   double iou_threshold = 0.5);

/// Thresholds must be ascending in (0, 1).
std::vector<std::pair<double, double>> iou_sweep(const std::vector<std::vector<Detection>>& dets,
                                                 const std::vector<std::vector<LabeledBox>>& gts, int num_classes,
                                                 const std::vector<double>& thresholds);
std::vector<std::pair<double, double>> iou_sweep(const DetectorParams& params,
                                                 const std::vector<AnnotatedScene>& scenes,
                                                 const std::vector<double>& thresholds);

/// Category of one detection given the ground truth of its image.
LocalizationCategory classify_localization(const Detection& det, const std::vector<LabeledBox>& gts);

/// Which detections count as the model's confident ones.
enum class ConfidentRule {
  TopKPerClass,  // per class, the K best by score, K = that class's gt count
  AboveDumpScore,  // score >= kDumpScoreThreshold
  All,
};

ConfidentRule confident_rule_from_string(const std::string& name);
const char* to_string(ConfidentRule rule);

/// Each selected detection is placed in exactly one category.
LocalizationBreakdown localization_error_analysis(const std::vector<std::vector<Detection>>& dets,
                                                  const std::vector<std::vector<LabeledBox>>& gts,
                                                  int num_classes,
                                                  ConfidentRule rule = ConfidentRule::TopKPerClass);

/// For every gt, the detection with the largest positive IoU decides
/// correct / mis-classified; none means missed.
ClassificationBreakdown classification_error_analysis(const std::vector<std::vector<Detection>>& dets,
                                                      const std::vector<std::vector<LabeledBox>>& gts,
                                                      int num_classes,
                                                      double score_floor = kClassificationScoreFloor);

struct BiasDiagnostic {
  double map_target = 0.0;
  double map_source_like = 0.0;
  double difference() const { return map_source_like - map_target; }
};

/// The two sets must be translations of each other scene for scene.
BiasDiagnostic bias_diagnostic(const DetectorParams& teacher, const std::vector<AnnotatedScene>& target,
                               const std::vector<AnnotatedScene>& source_like, double iou_threshold = 0.5);

nlohmann::json report_json(const EvalReport& report);
/// report.json, per_class.csv and, when present, sweep.csv.
std::vector<std::filesystem::path> write_report(const std::filesystem::path& dir, const EvalReport& report);

/// Upscaled copy with detections above `threshold` drawn and scored.
Image annotate(const Image& image, const std::vector<Detection>& dets, double threshold = kDumpScoreThreshold,
               int scale = 4);

}  // namespace umt
