#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "umt/common.hpp"
#include "umt/detector.hpp"
#include "umt/synth.hpp"

namespace umt {

enum class Variant { SourceOnly, UMT_S, UMT_SC, UMT_SCA, UMT };

inline constexpr std::array<Variant, 5> kAllVariants = {Variant::SourceOnly, Variant::UMT_S, Variant::UMT_SC,
                                                        Variant::UMT_SCA, Variant::UMT};

const char* to_string(Variant v);
/// Accepts the names printed by to_string; the error lists the valid choices.
Variant variant_from_string(const std::string& name);

struct AugmentConfig {
  double crop_fraction = 0.1;  // max crop per axis, as a fraction of the side
  double pad_fraction = 0.1;   // max pad per axis
  double brightness = 0.1;     // additive, uniform in [-b, b]
  double contrast = 0.1;       // gain 1 + U[-c, c] about the image mean
  double saturation = 0.1;     // gain 1 + U[-s, s] about the pixel's gray value
  double hue = 0.02;           // rotation about the gray axis, in turns

  void validate() const;
};

struct TrainConfig {
  double lambda = 0.01;
  double gamma = 0.1;
  double threshold = 0.8;
  double alpha = 0.99;
  double lr1 = 0.01;
  double lr2 = 0.001;
  int decay_step = 1500;  // lr1 before this step, lr2 from it on
  int total_steps = 2000;
  double momentum = 0.9;
  double grad_clip = 0.0;  // max global gradient norm, 0 disables
  double warmup_fraction = 0.1;  // distillation off for this share of the run
  double nms_iou = 0.3;
  std::uint64_t seed = 0;
  int checkpoint_every = 500;
  Variant variant = Variant::UMT;
  AugmentConfig augment;

  void validate() const;
  double learning_rate(int step) const { return step < decay_step ? lr1 : lr2; }
  int warmup_steps() const;
  std::string canonical() const;
};

void ema_update(DetectorParams& teacher, const DetectorParams& student, double alpha);

/// Integer translation realising a crop on one side and a pad on the other.
/// A point (x, y) in the source image lands at (x + dx, y + dy) in the view.
struct ViewTransform {
  int dx = 0;
  int dy = 0;
  int height = 0;
  int width = 0;

  Box map_box(const Box& b) const { return {b.x + dx, b.y + dy, b.w, b.h}; }
  Box unmap_box(const Box& b) const { return {b.x - dx, b.y - dy, b.w, b.h}; }
  /// Maps and clips annotations to the view; boxes keeping less than half
  /// their area or under two pixels on a side are dropped.
  std::vector<LabeledBox> map_labels(const std::vector<LabeledBox>& labels) const;
};

struct AugmentedView {
  Image image;
  ViewTransform transform;
};

ViewTransform sample_transform(int height, int width, Rng& rng, const AugmentConfig& config);
Image apply_transform(const Image& image, const ViewTransform& t);
/// Brightness, contrast, saturation, hue; zero amplitudes are skipped exactly.
Image jitter(const Image& image, Rng& rng, const AugmentConfig& config);

AugmentedView augment(const Image& image, Rng& rng, const AugmentConfig& config);

/// Both views share one geometric transform; photometric jitter is drawn
/// independently. The teacher and student sources may differ (a target
/// image and its source-like translation) but must have the same size.
std::pair<AugmentedView, AugmentedView> augment_pair(const Image& teacher_image, const Image& student_image,
                                                     Rng& rng, const AugmentConfig& config);
std::pair<AugmentedView, AugmentedView> augment_pair(const Image& image, Rng& rng, const AugmentConfig& config);

struct PseudoLabel {
  Box box;
  int class_id = 0;
  double score = 0.0;
  double confidence = 0.0;
  double gate = 0.0;
};

struct PseudoLabelSet {
  std::vector<PseudoLabel> entries;
  std::size_t candidates = 0;  // detections surviving NMS, before gating

  std::vector<LabeledBox> labels() const;
  bool empty() const { return entries.empty(); }
  bool operator==(const PseudoLabelSet& o) const;
};

/// Per class: score order, NMS at nms_iou, keep p > threshold.
PseudoLabelSet select_pseudo_labels(const std::vector<Detection>& dets, double threshold, double nms_iou);
/// Same pipeline with gate sqrt(tau * p) > threshold.
PseudoLabelSet select_pseudo_labels_conf(const std::vector<Detection>& dets, double threshold,
                                         double nms_iou);

/// Detection loss against pseudo labels, scaled by `weight` in the gradient.
/// An empty set contributes nothing.
LossTerms distill_loss(const DetectorParams& student, const Image& student_view, const PseudoLabelSet& pseudo,
                       const TrainingSample* frozen = nullptr, std::vector<double>* grad = nullptr,
                       double weight = 1.0, TrainingSample* sample_out = nullptr);

double mt_objective(double source_det, double distill, double lambda);
double umt_objective(double source_det_soft, double target_like_det, double distill, double confidence,
                     double lambda, double gamma);

enum class TeacherInput { Target, SourceLike };
enum class Gate { Score, ScoreConfidence };

/// Which terms a variant optimises; the variants are fixed points of this
/// space but tests also build intermediate ones.
struct ObjectiveSpec {
  bool distill = false;
  TeacherInput teacher_input = TeacherInput::Target;
  Gate gate = Gate::Score;
  bool target_like = false;
  bool soft_source = false;
  double lambda = 0.0;
  double gamma = 0.0;
  /// Replaces the predicted confidences in the soft source labels.
  std::optional<double> tau_override;

  static ObjectiveSpec for_variant(Variant v, const TrainConfig& config);
};

struct LabeledImage {
  Image image;
  std::vector<LabeledBox> labels;
};

/// Student-side inputs of one step, already augmented.
struct StudentBatch {
  std::optional<LabeledImage> source;
  std::optional<LabeledImage> target_like;
  std::optional<Image> distill_view;
  PseudoLabelSet pseudo;
};

struct FrozenSamples {
  std::optional<TrainingSample> source, target_like, distill;
};

struct ObjectiveValue {
  LossTerms source, target_like, distill;
  double confidence = 0.0;  // mean of -log tau over the source ROIs, 0 unless used
  double total = 0.0;
};

/// Evaluates the student objective. `distill_scale` multiplies lambda (used
/// for warm-up). Samples missing from `frozen` are computed and stored.
/// Throws ConfigError naming a batch component the spec needs but lacks.
ObjectiveValue evaluate_objective(const DetectorParams& student, const StudentBatch& batch,
                                  const ObjectiveSpec& spec, double distill_scale, FrozenSamples* frozen,
                                  std::vector<double>* grad);

struct TrainingData {
  std::vector<AnnotatedScene> source;
  std::vector<AnnotatedScene> target;       // annotations never read here
  std::vector<AnnotatedScene> source_like;  // source_like[i] translates target[i]
  std::vector<AnnotatedScene> target_like;

  /// Loads the four training splits from a dataset directory.
  static TrainingData load(const std::filesystem::path& root);
};

/// One sample per domain role.
struct StepBatch {
  const AnnotatedScene* source = nullptr;
  const AnnotatedScene* target = nullptr;
  const AnnotatedScene* source_like = nullptr;
  const AnnotatedScene* target_like = nullptr;
};

StepBatch sample_batch(const TrainingData& data, const ObjectiveSpec& spec, std::uint64_t seed, int step);

struct TrainState {
  DetectorParams student;
  DetectorParams teacher;
  std::vector<double> velocity;
  int step = 0;

  static TrainState initialize(const ModelConfig& model, std::uint64_t seed);
};

struct StepMetrics {
  int step = 0;
  double lr = 0.0;
  double distill_weight = 0.0;
  double total = 0.0;
  double source_det = 0.0;
  double source_rpn = 0.0;
  double source_roi = 0.0;
  double target_like_det = 0.0;
  double distill = 0.0;
  double confidence = 0.0;
  double tau_mean = 0.0;
  std::size_t pseudo_candidates = 0;
  std::size_t pseudo_kept = 0;
  double gate_mean = 0.0;
  double grad_norm = 0.0;
};

/// Column order of the metrics CSV.
const std::vector<std::string>& metrics_columns();
std::string metrics_row(const StepMetrics& m);

/// One optimisation step: teacher pseudo labels (no gradient), student SGD
/// with momentum, then EMA. Randomness is derived from (config.seed, step).
StepMetrics train_step(TrainState& state, const StepBatch& batch, const TrainConfig& config,
                       const ObjectiveSpec& spec);

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const TrainState& state, const TrainConfig& config);
/// Verifies the architecture digest against `model`.
TrainState load_checkpoint(const std::filesystem::path& path, const ModelConfig& model,
                           std::uint64_t* train_digest = nullptr);

struct TrainingRun {
  std::filesystem::path checkpoint;
  std::filesystem::path metrics;
  TrainState state;
};

/// Trains into `out_dir` (checkpoint.bin, metrics.csv). With `resume` and an
/// existing checkpoint, continues from it; the metrics log is cut back to the
/// checkpointed step first. `on_step` may throw to simulate an interruption.
TrainingRun run_training(const ModelConfig& model, const TrainConfig& config, const TrainingData& data,
                         const std::filesystem::path& out_dir, bool resume = false,
                         const std::function<void(const StepMetrics&)>& on_step = {});

}  // namespace umt
