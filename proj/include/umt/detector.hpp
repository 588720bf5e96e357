#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "umt/geometry.hpp"
#include "umt/image.hpp"

namespace umt {

/// Architecture of the toy two-stage detector.
///
/// Backbone: conv 5x5/2 -> conv 3x3/2 -> conv 3x3/1, SiLU after each, giving
/// a stride-4 feature map. The RPN is a 1x1 conv over that map with one
/// objectness logit and four box deltas per anchor. Each proposal is pooled
/// by bilinear sampling of a roi_pool x roi_pool grid inside the box, plus four
/// geometry features; a one-hidden-layer MLP then produces C+1 class logits,
/// class-agnostic box deltas, and the confidence logit.
struct ModelConfig {
  int image_height = 48;
  int image_width = 48;
  int num_classes = 3;
  int conv1_channels = 16;
  int conv2_channels = 32;
  int conv3_channels = 32;
  int roi_pool = 3;
  int roi_hidden = 64;
  std::vector<double> anchor_sizes = {14.0};
  std::vector<double> anchor_ratios = {1.0};
  int top_k = 24;
  double rpn_nms_iou = 0.7;
  double rpn_positive_iou = 0.7;
  double rpn_negative_iou = 0.3;
  double roi_foreground_iou = 0.5;

  static constexpr int kStride = 4;

  int feature_height() const { return image_height / kStride; }
  int feature_width() const { return image_width / kStride; }
  int anchors_per_cell() const {
    return static_cast<int>(anchor_sizes.size() * anchor_ratios.size());
  }
  int num_anchors() const { return feature_height() * feature_width() * anchors_per_cell(); }
  int roi_input_size() const { return roi_pool * roi_pool * conv3_channels + 4; }

  /// Throws ConfigError naming the offending field.
  void validate() const;

  /// Canonical text form; two configs with equal text are interchangeable.
  std::string canonical() const;
  std::uint64_t digest() const;
};

enum class ParamBlock { Backbone, RpnHead, RoiHead, ConfHead };

const char* to_string(ParamBlock block);

struct TensorSlot {
  std::size_t offset = 0;
  std::size_t size = 0;
};

/// Offsets of every weight tensor inside the flat parameter vector. Blocks
/// are contiguous and appear in ParamBlock order.
struct ParamLayout {
  explicit ParamLayout(const ModelConfig& config);

  TensorSlot conv1_w, conv1_b, conv2_w, conv2_b, conv3_w, conv3_b;
  TensorSlot rpn_w, rpn_b;
  TensorSlot fc_w, fc_b, cls_w, cls_b, box_w, box_b;
  TensorSlot conf_w, conf_b;
  std::size_t total = 0;

  TensorSlot block(ParamBlock b) const;
};

class DetectorParams {
 public:
  explicit DetectorParams(ModelConfig config);

  /// He-style random init for the backbone, small Gaussian heads, zero biases.
  static DetectorParams initialize(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  const ParamLayout& layout() const { return layout_; }
  std::size_t size() const { return values_.size(); }

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  std::span<double> block(ParamBlock b);
  std::span<const double> block(ParamBlock b) const;

  bool same_architecture(const DetectorParams& other) const;
  bool all_finite() const;

  bool operator==(const DetectorParams& other) const { return values_ == other.values_; }

 private:
  ModelConfig config_;
  ParamLayout layout_;
  std::vector<double> values_;
};

struct Proposal {
  Box box;
  double objectness = 0.0;
  int anchor = 0;
};

struct DetectorOutput {
  std::vector<Proposal> proposals;
  std::vector<Detection> detections;  // detections[i] comes from proposals[i]
};

/// Inference pass. Pure in (params, image).
DetectorOutput forward(const DetectorParams& params, const Image& image);

/// Runs the ROI head on caller-supplied boxes (no RPN, no box refinement).
/// Detection::box is the input box; class_probs and confidence are filled.
std::vector<Detection> predict_rois(const DetectorParams& params, const Image& image,
                                    const std::vector<Box>& boxes);

std::vector<Box> anchor_boxes(const ModelConfig& config);

/// Box regression parameterisation (centre offsets scaled by reference
/// size, log size ratios).
std::array<double, 4> encode_box(const Box& reference, const Box& target);
Box decode_box(const Box& reference, const std::array<double, 4>& deltas);

/// ROI regression targets are divided by these before the loss.
inline constexpr std::array<double, 4> kRoiDeltaStd = {0.1, 0.1, 0.2, 0.2};

/// Anchor and ROI assignments for one image, frozen so that a loss can be
/// re-evaluated at perturbed parameters without resampling.
struct TrainingSample {
  std::vector<std::int8_t> anchor_labels;  // 1 positive, 0 negative, -1 ignored
  std::vector<std::array<double, 4>> anchor_targets;
  std::vector<Box> rois;
  std::vector<int> roi_classes;  // 0 background
  std::vector<std::array<double, 4>> roi_targets;
};

/// Assigns anchors and ROIs given the proposals the detector currently makes.
TrainingSample assign_targets(const ModelConfig& config, const std::vector<Proposal>& proposals,
                              const std::vector<LabeledBox>& gts);

enum class RoiLabels { Hard, Soft };

struct LossOptions {
  RoiLabels labels = RoiLabels::Hard;
  /// Soft mode only: fixed interpolation weights instead of the predicted
  /// confidences (no gradient flows into them). One entry per sampled ROI.
  std::optional<std::vector<double>> tau_override;
  double det_weight = 1.0;
  /// Weight of the confidence log-penalty over the sampled ROIs.
  double confidence_weight = 0.0;
  /// Differentiate the penalty's mean over the ROIs instead of its sum.
  bool confidence_mean = false;
};

struct LossTerms {
  double rpn_cls = 0.0;
  double rpn_reg = 0.0;
  double roi_cls = 0.0;
  double roi_reg = 0.0;
  double confidence = 0.0;
  double tau_mean = 0.0;
  std::size_t num_rois = 0;

  double rpn() const { return rpn_cls + rpn_reg; }
  double roi() const { return roi_cls + roi_reg; }
  double det() const { return rpn() + roi(); }
};

/// Evaluates the detection loss (plus optional confidence penalty) for one
/// image. With `frozen` null the anchor/ROI assignment is taken from this
/// pass's own proposals and written to `sample_out` if given. Proposals are
/// constants for differentiation. If `grad` is non-null,
/// det_weight * d(det) + confidence_weight * d(confidence) is added to it.
LossTerms evaluate_loss(const DetectorParams& params, const Image& image,
                        const std::vector<LabeledBox>& gts, const LossOptions& options,
                        const TrainingSample* frozen, std::vector<double>* grad,
                        TrainingSample* sample_out = nullptr);

/// L_rpn + L_roi with one-hot class targets.
double loss_det(const DetectorParams& params, const Image& image,
                const std::vector<LabeledBox>& gts);

/// L_rpn + L_roi with interpolated class targets p' = tau p + (1 - tau) y.
double loss_det_soft(const DetectorParams& params, const Image& image,
                     const std::vector<LabeledBox>& gts);

/// Sum of -log(tau). Every tau must be positive.
double confidence_loss(std::span<const double> taus);

/// Confidence logits are clamped to this magnitude before the sigmoid.
inline constexpr double kConfidenceLogitClamp = 15.0;

double confidence_from_logit(double z);

/// Soft class target. tau is clipped to [0, 1] first.
std::vector<double> interpolate(std::span<const double> class_probs,
                                std::span<const double> one_hot, double tau);

double smooth_l1(double x);

}  // namespace umt
