#include "umt/engine.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace umt {

namespace fs = std::filesystem;

const char* to_string(Variant v) {
  switch (v) {
    case Variant::SourceOnly: return "SourceOnly";
    case Variant::UMT_S: return "UMT_S";
    case Variant::UMT_SC: return "UMT_SC";
    case Variant::UMT_SCA: return "UMT_SCA";
    case Variant::UMT: return "UMT";
  }
  return "?";
}

Variant variant_from_string(const std::string& name) {
  for (Variant v : kAllVariants)
    if (name == to_string(v)) return v;
  throw ConfigError("unknown variant '" + name + "'; valid choices: SourceOnly, UMT_S, UMT_SC, UMT_SCA, UMT");
}

void AugmentConfig::validate() const {
  auto check = [](double v, double hi, const char* field) {
    if (!(v >= 0.0 && v < hi))
      throw ConfigError(std::string("augment.") + field + ": must be in [0, " + std::to_string(hi) + ")");
  };
  check(crop_fraction, 1.0, "crop_fraction");
  check(pad_fraction, 1.0, "pad_fraction");
  check(brightness, 1.0, "brightness");
  check(contrast, 1.0, "contrast");
  check(saturation, 1.0, "saturation");
  check(hue, 0.5, "hue");
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw ConfigError("train." + field + ": " + why);
  };
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) fail("lambda", "must be >= 0");
  if (!(gamma >= 0.0) || !std::isfinite(gamma)) fail("gamma", "must be >= 0");
  if (!(threshold > 0.0 && threshold < 1.0)) fail("threshold", "must be in (0, 1)");
  if (!(alpha >= 0.0 && alpha < 1.0)) fail("alpha", "must be in [0, 1)");
  if (!(lr1 > 0.0) || !std::isfinite(lr1)) fail("lr1", "must be > 0");
  if (!(lr2 > 0.0) || !std::isfinite(lr2)) fail("lr2", "must be > 0");
  if (decay_step < 0) fail("decay_step", "must be >= 0");
  if (total_steps < 0) fail("total_steps", "must be >= 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) fail("momentum", "must be in [0, 1)");
  if (!(grad_clip >= 0.0) || !std::isfinite(grad_clip)) fail("grad_clip", "must be >= 0");
  if (!(warmup_fraction >= 0.0 && warmup_fraction <= 1.0)) fail("warmup_fraction", "must be in [0, 1]");
  if (!(nms_iou > 0.0 && nms_iou <= 1.0)) fail("nms_iou", "must be in (0, 1]");
  if (checkpoint_every < 1) fail("checkpoint_every", "must be >= 1");
  augment.validate();
}

int TrainConfig::warmup_steps() const {
  return static_cast<int>(std::ceil(warmup_fraction * total_steps));
}

std::string TrainConfig::canonical() const {
  char buf[1024];
  std::snprintf(buf, sizeof(buf),
                "lambda=%.17g;gamma=%.17g;threshold=%.17g;alpha=%.17g;lr1=%.17g;lr2=%.17g;decay_step=%d;"
                "total_steps=%d;momentum=%.17g;grad_clip=%.17g;warmup=%.17g;nms_iou=%.17g;seed=%llu;variant=%s;"
                "crop=%.17g;pad=%.17g;brightness=%.17g;contrast=%.17g;saturation=%.17g;hue=%.17g",
                lambda, gamma, threshold, alpha, lr1, lr2, decay_step, total_steps, momentum, grad_clip, warmup_fraction,
                nms_iou, static_cast<unsigned long long>(seed), to_string(variant), augment.crop_fraction,
                augment.pad_fraction, augment.brightness, augment.contrast, augment.saturation, augment.hue);
  return buf;
}

void ema_update(DetectorParams& teacher, const DetectorParams& student, double alpha) {
  if (!teacher.same_architecture(student))
    throw ConfigError("ema_update: teacher and student architectures differ");
  auto t = teacher.values();
  auto s = student.values();
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = alpha * t[i] + (1.0 - alpha) * s[i];
}

// ---------------------------------------------------------------------------
// Augmentation

std::vector<LabeledBox> ViewTransform::map_labels(const std::vector<LabeledBox>& labels) const {
  std::vector<LabeledBox> out;
  for (const auto& l : labels) {
    const Box m = map_box(l.box);
    const double x1 = std::max(0.0, m.x), y1 = std::max(0.0, m.y);
    const double x2 = std::min<double>(width, m.x2()), y2 = std::min<double>(height, m.y2());
    const Box c{x1, y1, x2 - x1, y2 - y1};
    if (c.w < 2.0 || c.h < 2.0 || c.area() < 0.5 * m.area()) continue;
    out.push_back({c, l.class_id});
  }
  return out;
}

ViewTransform sample_transform(int height, int width, Rng& rng, const AugmentConfig& config) {
  ViewTransform t;
  t.height = height;
  t.width = width;
  auto axis = [&](int side) {
    const int crop = static_cast<int>(std::floor(config.crop_fraction * side));
    const int pad = static_cast<int>(std::floor(config.pad_fraction * side));
    if (crop >= side) throw ConfigError("augment.crop_fraction: crop leaves an empty image");
    // Crop removes content on the leading edge, pad inserts it there.
    return uniform_int(rng, 0, pad) - uniform_int(rng, 0, crop);
  };
  t.dx = axis(width);
  t.dy = axis(height);
  return t;
}

Image apply_transform(const Image& image, const ViewTransform& t) {
  if (t.dx == 0 && t.dy == 0) return image;
  std::array<double, 3> fill{};
  const double n = static_cast<double>(image.height()) * image.width();
  for (int y = 0; y < image.height(); ++y)
    for (int x = 0; x < image.width(); ++x)
      for (int c = 0; c < 3; ++c) fill[c] += image.at(y, x, c) / n;
  Image out(image.height(), image.width());
  for (int y = 0; y < out.height(); ++y)
    for (int x = 0; x < out.width(); ++x) {
      const int sy = y - t.dy, sx = x - t.dx;
      const bool inside = sy >= 0 && sy < image.height() && sx >= 0 && sx < image.width();
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = inside ? image.at(sy, sx, c) : fill[c];
    }
  return out;
}

Image jitter(const Image& image, Rng& rng, const AugmentConfig& config) {
  // Draws happen unconditionally so the stream does not depend on which
  // amplitudes are zero.
  const double brightness = uniform(rng, -1.0, 1.0) * config.brightness;
  const double contrast = 1.0 + uniform(rng, -1.0, 1.0) * config.contrast;
  const double saturation = 1.0 + uniform(rng, -1.0, 1.0) * config.saturation;
  const double hue = uniform(rng, -1.0, 1.0) * config.hue;

  Image out = image;
  auto& d = out.data();
  if (config.brightness > 0.0)
    for (double& v : d) v += brightness;
  if (config.contrast > 0.0) {
    double mean = 0.0;
    for (double v : d) mean += v;
    mean /= static_cast<double>(d.size());
    for (double& v : d) v = mean + contrast * (v - mean);
  }
  if (config.saturation > 0.0) {
    for (std::size_t i = 0; i < d.size(); i += 3) {
      const double g = (d[i] + d[i + 1] + d[i + 2]) / 3.0;
      for (int c = 0; c < 3; ++c) d[i + c] = g + saturation * (d[i + c] - g);
    }
  }
  if (config.hue > 0.0) {
    // Rodrigues rotation about the unit gray axis.
    const double a = 2.0 * M_PI * hue, cs = std::cos(a), sn = std::sin(a);
    const double k = (1.0 - cs) / 3.0, s3 = sn / std::sqrt(3.0);
    const double r[3][3] = {{cs + k, k - s3, k + s3}, {k + s3, cs + k, k - s3}, {k - s3, k + s3, cs + k}};
    for (std::size_t i = 0; i < d.size(); i += 3) {
      const double p[3] = {d[i], d[i + 1], d[i + 2]};
      for (int c = 0; c < 3; ++c) d[i + c] = r[c][0] * p[0] + r[c][1] * p[1] + r[c][2] * p[2];
    }
  }
  out.clip01();
  return out;
}

AugmentedView augment(const Image& image, Rng& rng, const AugmentConfig& config) {
  const ViewTransform t = sample_transform(image.height(), image.width(), rng, config);
  return {jitter(apply_transform(image, t), rng, config), t};
}

std::pair<AugmentedView, AugmentedView> augment_pair(const Image& teacher_image, const Image& student_image,
                                                     Rng& rng, const AugmentConfig& config) {
  if (teacher_image.height() != student_image.height() || teacher_image.width() != student_image.width())
    throw ConfigError("augment_pair: paired images differ in size");
  const ViewTransform t = sample_transform(teacher_image.height(), teacher_image.width(), rng, config);
  AugmentedView teacher{jitter(apply_transform(teacher_image, t), rng, config), t};
  AugmentedView student{jitter(apply_transform(student_image, t), rng, config), t};
  return {std::move(teacher), std::move(student)};
}

std::pair<AugmentedView, AugmentedView> augment_pair(const Image& image, Rng& rng, const AugmentConfig& config) {
  return augment_pair(image, image, rng, config);
}

// ---------------------------------------------------------------------------
// Pseudo labels

std::vector<LabeledBox> PseudoLabelSet::labels() const {
  std::vector<LabeledBox> out;
  for (const auto& e : entries) out.push_back({e.box, e.class_id});
  return out;
}

bool PseudoLabelSet::operator==(const PseudoLabelSet& o) const {
  if (entries.size() != o.entries.size() || candidates != o.candidates) return false;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto &a = entries[i], &b = o.entries[i];
    if (!(a.box == b.box) || a.class_id != b.class_id || a.score != b.score || a.confidence != b.confidence ||
        a.gate != b.gate)
      return false;
  }
  return true;
}

namespace {

template <typename GateFn>
PseudoLabelSet select_with_gate(const std::vector<Detection>& dets, double threshold, double nms_iou,
                                GateFn gate_of) {
  PseudoLabelSet out;
  int max_class = 0;
  for (const auto& d : dets) max_class = std::max(max_class, d.class_id);
  for (int c = 1; c <= max_class; ++c) {
    std::vector<Detection> group;
    for (const auto& d : dets)
      if (d.class_id == c) group.push_back(d);
    if (group.empty()) continue;
    for (const auto& d : nms(group, nms_iou)) {
      ++out.candidates;
      const double g = gate_of(d);
      if (g > threshold) out.entries.push_back({d.box, d.class_id, d.score, d.confidence, g});
    }
  }
  return out;
}

}  // namespace

PseudoLabelSet select_pseudo_labels(const std::vector<Detection>& dets, double threshold, double nms_iou) {
  return select_with_gate(dets, threshold, nms_iou, [](const Detection& d) { return d.score; });
}

PseudoLabelSet select_pseudo_labels_conf(const std::vector<Detection>& dets, double threshold,
                                         double nms_iou) {
  return select_with_gate(dets, threshold, nms_iou,
                          [](const Detection& d) { return std::sqrt(d.confidence * d.score); });
}

// ---------------------------------------------------------------------------
// Objectives

LossTerms distill_loss(const DetectorParams& student, const Image& student_view, const PseudoLabelSet& pseudo,
                       const TrainingSample* frozen, std::vector<double>* grad, double weight,
                       TrainingSample* sample_out) {
  if (pseudo.empty()) return {};
  LossOptions opt;
  opt.det_weight = weight;
  return evaluate_loss(student, student_view, pseudo.labels(), opt, frozen, grad, sample_out);
}

double mt_objective(double source_det, double distill, double lambda) { return source_det + lambda * distill; }

double umt_objective(double source_det_soft, double target_like_det, double distill, double confidence,
                     double lambda, double gamma) {
  return source_det_soft + target_like_det + lambda * distill + gamma * confidence;
}

ObjectiveSpec ObjectiveSpec::for_variant(Variant v, const TrainConfig& config) {
  ObjectiveSpec s;
  s.lambda = config.lambda;
  switch (v) {
    case Variant::SourceOnly:
      s.lambda = 0.0;
      break;
    case Variant::UMT_S:
      s.distill = true;
      break;
    case Variant::UMT_SC:
      s.distill = true;
      s.teacher_input = TeacherInput::SourceLike;
      break;
    case Variant::UMT_SCA:
      s.distill = true;
      s.teacher_input = TeacherInput::SourceLike;
      s.target_like = true;
      break;
    case Variant::UMT:
      s.distill = true;
      s.teacher_input = TeacherInput::SourceLike;
      s.target_like = true;
      s.soft_source = true;
      s.gate = Gate::ScoreConfidence;
      s.gamma = config.gamma;
      break;
  }
  return s;
}

ObjectiveValue evaluate_objective(const DetectorParams& student, const StudentBatch& batch,
                                  const ObjectiveSpec& spec, double distill_scale, FrozenSamples* frozen,
                                  std::vector<double>* grad) {
  if (!batch.source) throw ConfigError("objective: batch is missing its source sample");
  if (spec.target_like && !batch.target_like)
    throw ConfigError("objective: batch is missing its target_like sample");
  if (spec.distill && !batch.distill_view) throw ConfigError("objective: batch is missing its target sample");

  FrozenSamples local;
  if (!frozen) frozen = &local;
  auto run = [&](const Image& img, const std::vector<LabeledBox>& labels, const LossOptions& opt,
                 std::optional<TrainingSample>& slot) {
    TrainingSample fresh;
    const LossTerms t = evaluate_loss(student, img, labels, opt, slot ? &*slot : nullptr, grad,
                                      slot ? nullptr : &fresh);
    if (!slot) slot = std::move(fresh);
    return t;
  };

  ObjectiveValue v;
  LossOptions src;
  if (spec.soft_source) {
    src.labels = RoiLabels::Soft;
    src.confidence_weight = spec.gamma;
    src.confidence_mean = true;
  }
  if (spec.tau_override) {
    // The override needs the sample size, so assign targets first.
    if (!frozen->source) {
      TrainingSample s;
      evaluate_loss(student, batch.source->image, batch.source->labels, {}, nullptr, nullptr, &s);
      frozen->source = std::move(s);
    }
    src.tau_override = std::vector<double>(frozen->source->rois.size(), *spec.tau_override);
  }
  v.source = run(batch.source->image, batch.source->labels, src, frozen->source);
  if (spec.soft_source && v.source.num_rois > 0)
    v.confidence = v.source.confidence / static_cast<double>(v.source.num_rois);

  if (spec.target_like) v.target_like = run(batch.target_like->image, batch.target_like->labels, {}, frozen->target_like);

  const double distill_weight = spec.distill ? spec.lambda * distill_scale : 0.0;
  if (spec.distill && !batch.pseudo.empty()) {
    LossOptions opt;
    opt.det_weight = distill_weight;
    v.distill = run(*batch.distill_view, batch.pseudo.labels(), opt, frozen->distill);
  }

  const double gamma = spec.soft_source ? spec.gamma : 0.0;
  v.total = umt_objective(v.source.det(), v.target_like.det(), v.distill.det(), v.confidence, distill_weight,
                          gamma);
  return v;
}

// ---------------------------------------------------------------------------
// Training

TrainingData TrainingData::load(const fs::path& root) {
  TrainingData d;
  d.source = load_split(root, "source_train").scenes;
  d.target = load_split(root, "target_train").scenes;
  d.source_like = load_split(root, "source_like").scenes;
  d.target_like = load_split(root, "target_like").scenes;
  return d;
}

StepBatch sample_batch(const TrainingData& data, const ObjectiveSpec& spec, std::uint64_t seed, int step) {
  if (data.source.empty()) throw ConfigError("training data: source split is empty");
  Rng rng(derive_seed(seed, 0xba7c4, static_cast<std::uint64_t>(step)));
  // Every index is drawn regardless of the variant so all variants see the
  // same source and target scenes at a given step.
  const auto pick = [&](std::size_t n) { return static_cast<std::size_t>(rng() % std::max<std::size_t>(n, 1)); };
  const std::size_t si = pick(data.source.size());
  const std::size_t ti = pick(data.target.size());
  const std::size_t li = pick(data.target_like.size());

  StepBatch b;
  b.source = &data.source[si];
  if (spec.distill) {
    if (data.target.empty()) throw ConfigError("training data: target split is empty");
    b.target = &data.target[ti];
    if (spec.teacher_input == TeacherInput::SourceLike) {
      if (data.source_like.size() != data.target.size())
        throw ConfigError("training data: source_like split must pair one-to-one with target_train");
      b.source_like = &data.source_like[ti];
    }
  }
  if (spec.target_like) {
    if (data.target_like.empty()) throw ConfigError("training data: target_like split is empty");
    b.target_like = &data.target_like[li];
  }
  return b;
}

TrainState TrainState::initialize(const ModelConfig& model, std::uint64_t seed) {
  model.validate();
  auto student = DetectorParams::initialize(model, derive_seed(seed, 0x1417));
  TrainState s{student, student, std::vector<double>(student.size(), 0.0), 0};
  return s;
}

const std::vector<std::string>& metrics_columns() {
  static const std::vector<std::string> cols = {
      "step",       "lr",       "distill_weight", "total",     "source_det",        "source_rpn",
      "source_roi", "target_like_det", "distill", "confidence", "tau_mean",        "pseudo_candidates",
      "pseudo_kept", "gate_mean", "grad_norm"};
  return cols;
}

std::string metrics_row(const StepMetrics& m) {
  const auto d = [](double v) { return "," + shortest(v); };
  return std::to_string(m.step) + d(m.lr) + d(m.distill_weight) + d(m.total) + d(m.source_det) + d(m.source_rpn) +
         d(m.source_roi) + d(m.target_like_det) + d(m.distill) + d(m.confidence) + d(m.tau_mean) + "," +
         std::to_string(m.pseudo_candidates) + "," + std::to_string(m.pseudo_kept) + d(m.gate_mean) +
         d(m.grad_norm);
}

namespace {

void require_finite(double v, const char* term, int step) {
  if (!std::isfinite(v))
    throw NumericalError(std::string("non-finite ") + term + " at step " + std::to_string(step));
}

}  // namespace

StepMetrics train_step(TrainState& state, const StepBatch& batch, const TrainConfig& config,
                       const ObjectiveSpec& spec) {
  const int step = state.step;
  if (!batch.source) throw ConfigError("train_step: batch is missing its source sample");
  auto role_rng = [&](std::uint64_t role) {
    return Rng(derive_seed(config.seed, 0xa06, static_cast<std::uint64_t>(step), role));
  };

  StudentBatch sb;
  {
    Rng rng = role_rng(1);
    const AugmentedView v = augment(batch.source->image, rng, config.augment);
    sb.source = LabeledImage{v.image, v.transform.map_labels(batch.source->labeled())};
  }
  if (spec.target_like) {
    if (!batch.target_like) throw ConfigError("train_step: batch is missing its target_like sample");
    Rng rng = role_rng(2);
    const AugmentedView v = augment(batch.target_like->image, rng, config.augment);
    sb.target_like = LabeledImage{v.image, v.transform.map_labels(batch.target_like->labeled())};
  }

  StepMetrics m;
  m.step = step;
  m.lr = config.learning_rate(step);
  const bool warm = step >= config.warmup_steps();
  if (spec.distill) {
    if (!batch.target) throw ConfigError("train_step: batch is missing its target sample");
    const AnnotatedScene* teacher_scene = batch.target;
    if (spec.teacher_input == TeacherInput::SourceLike) {
      if (!batch.source_like) throw ConfigError("train_step: batch is missing its source_like sample");
      teacher_scene = batch.source_like;
    }
    Rng rng = role_rng(3);
    auto [teacher_view, student_view] = augment_pair(teacher_scene->image, batch.target->image, rng, config.augment);
    sb.distill_view = std::move(student_view.image);
    if (warm) {
      // Teacher pass: inference only, its parameters get no gradient.
      const auto out = forward(state.teacher, teacher_view.image);
      sb.pseudo = spec.gate == Gate::Score
                      ? select_pseudo_labels(out.detections, config.threshold, config.nms_iou)
                      : select_pseudo_labels_conf(out.detections, config.threshold, config.nms_iou);
    }
  }
  m.distill_weight = spec.distill && warm ? spec.lambda : 0.0;

  std::vector<double> grad(state.student.size(), 0.0);
  const ObjectiveValue v = evaluate_objective(state.student, sb, spec, warm ? 1.0 : 0.0, nullptr, &grad);

  m.source_det = v.source.det();
  m.source_rpn = v.source.rpn();
  m.source_roi = v.source.roi();
  m.target_like_det = v.target_like.det();
  m.distill = v.distill.det();
  m.confidence = v.confidence;
  m.tau_mean = spec.soft_source ? v.source.tau_mean : 0.0;
  m.total = v.total;
  m.pseudo_candidates = sb.pseudo.candidates;
  m.pseudo_kept = sb.pseudo.entries.size();
  for (const auto& e : sb.pseudo.entries) m.gate_mean += e.gate / static_cast<double>(m.pseudo_kept);

  require_finite(m.source_det, "source detection loss", step);
  require_finite(m.target_like_det, "target-like detection loss", step);
  require_finite(m.distill, "distillation loss", step);
  require_finite(m.confidence, "confidence loss", step);
  double sq = 0.0;
  for (double g : grad) sq += g * g;
  m.grad_norm = std::sqrt(sq);
  require_finite(m.grad_norm, "gradient", step);
  const double scale = config.grad_clip > 0.0 && m.grad_norm > config.grad_clip ? config.grad_clip / m.grad_norm : 1.0;

  auto theta = state.student.values();
  for (std::size_t i = 0; i < theta.size(); ++i) {
    state.velocity[i] = config.momentum * state.velocity[i] + scale * grad[i];
    theta[i] -= m.lr * state.velocity[i];
  }
  if (!state.student.all_finite()) throw NumericalError("non-finite student parameters at step " + std::to_string(step));
  ema_update(state.teacher, state.student, config.alpha);
  ++state.step;
  return m;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kCheckpointMagic[8] = {'U', 'M', 'T', 'C', 'K', 'P', 'T', '1'};

template <typename T>
void put(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in, const fs::path& path) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) throw ConfigError("truncated checkpoint " + path.string());
  return v;
}

void put_values(std::ostream& out, std::span<const double> v) {
  out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
}

void get_values(std::istream& in, std::span<double> v, const fs::path& path) {
  if (!in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double))))
    throw ConfigError("truncated checkpoint " + path.string());
}

std::string hex64(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

void save_checkpoint(const fs::path& path, const TrainState& state, const TrainConfig& config) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    put<std::uint32_t>(out, kCheckpointVersion);
    put<std::uint64_t>(out, state.student.config().digest());
    put<std::uint64_t>(out, fnv1a64(config.canonical()));
    put<std::uint64_t>(out, config.seed);  // per-step streams derive from (seed, step)
    put<std::int64_t>(out, state.step);
    put<std::uint64_t>(out, state.student.size());
    put_values(out, state.student.values());
    put_values(out, state.teacher.values());
    put_values(out, state.velocity);
    if (!out) throw std::runtime_error("failed writing " + tmp.string());
  }
  fs::rename(tmp, path);
}

TrainState load_checkpoint(const fs::path& path, const ModelConfig& model, std::uint64_t* train_digest) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError("checkpoint not found: " + path.string());
  char magic[8];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    throw ConfigError("not a checkpoint file: " + path.string());
  const auto version = get<std::uint32_t>(in, path);
  if (version != kCheckpointVersion)
    throw ConfigError("unsupported checkpoint version " + std::to_string(version) + " in " + path.string());
  const auto digest = get<std::uint64_t>(in, path);
  if (digest != model.digest())
    throw ConfigError("architecture digest mismatch: checkpoint " + hex64(digest) + ", config " +
                      hex64(model.digest()));
  const auto tdigest = get<std::uint64_t>(in, path);
  if (train_digest) *train_digest = tdigest;
  get<std::uint64_t>(in, path);
  const auto step = get<std::int64_t>(in, path);
  const auto n = get<std::uint64_t>(in, path);
  TrainState s{DetectorParams(model), DetectorParams(model), {}, static_cast<int>(step)};
  if (n != s.student.size()) throw ConfigError("checkpoint parameter count does not match the model");
  s.velocity.assign(n, 0.0);
  get_values(in, s.student.values(), path);
  get_values(in, s.teacher.values(), path);
  get_values(in, s.velocity, path);
  return s;
}

// ---------------------------------------------------------------------------
// Loop

TrainingRun run_training(const ModelConfig& model, const TrainConfig& config, const TrainingData& data,
                         const fs::path& out_dir, bool resume,
                         const std::function<void(const StepMetrics&)>& on_step) {
  model.validate();
  config.validate();
  const ObjectiveSpec spec = ObjectiveSpec::for_variant(config.variant, config);
  fs::create_directories(out_dir);
  TrainingRun run{out_dir / "checkpoint.bin", out_dir / "metrics.csv", TrainState::initialize(model, config.seed)};

  std::string header;
  for (const auto& c : metrics_columns()) header += (header.empty() ? "" : ",") + c;

  if (resume && fs::exists(run.checkpoint)) {
    std::uint64_t tdigest = 0;
    run.state = load_checkpoint(run.checkpoint, model, &tdigest);
    if (tdigest != fnv1a64(config.canonical()))
      throw ConfigError("cannot resume: checkpoint was written with a different training config");
    // Keep the header plus one row per completed step.
    std::vector<std::string> lines;
    {
      std::ifstream in(run.metrics);
      std::string line;
      while (std::getline(in, line) && static_cast<int>(lines.size()) <= run.state.step) lines.push_back(line);
    }
    if (lines.empty() || lines.front() != header || static_cast<int>(lines.size()) != run.state.step + 1)
      throw ConfigError("cannot resume: metrics log does not cover the checkpointed steps");
    std::ofstream out(run.metrics, std::ios::binary | std::ios::trunc);
    for (const auto& l : lines) out << l << '\n';
  } else {
    std::ofstream(run.metrics, std::ios::binary | std::ios::trunc) << header << '\n';
    save_checkpoint(run.checkpoint, run.state, config);
  }

  std::ofstream log(run.metrics, std::ios::binary | std::ios::app);
  while (run.state.step < config.total_steps) {
    const StepBatch batch = sample_batch(data, spec, config.seed, run.state.step);
    const StepMetrics m = train_step(run.state, batch, config, spec);
    log << metrics_row(m) << '\n';
    if (run.state.step % config.checkpoint_every == 0 || run.state.step == config.total_steps) {
      log.flush();
      save_checkpoint(run.checkpoint, run.state, config);
    }
    if (on_step) on_step(m);
  }
  return run;
}

}  // namespace umt
