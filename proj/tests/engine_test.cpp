#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "oracles.hpp"
#include "test_support.hpp"
#include "umt/engine.hpp"

namespace umt {
namespace {

namespace fs = std::filesystem;

fs::path temp_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("umt_engine_test_" + name);
  fs::remove_all(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const TrainingData& small_data() {
  static const TrainingData data = [] {
    const auto splits = build_datasets(SceneSpec{}, DomainShiftSpec::preset("strong"), {24, 24, 4}, 77);
    return TrainingData{splits[0].scenes, splits[1].scenes, splits[3].scenes, splits[4].scenes};
  }();
  return data;
}

TEST(Variant, NamesRoundTrip) {
  for (Variant v : kAllVariants) EXPECT_EQ(variant_from_string(to_string(v)), v);
  try {
    variant_from_string("UMT_X");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("UMT_SCA"), std::string::npos);
  }
}

TEST(TrainConfig, DefaultsAndValidation) {
  const TrainConfig c;
  EXPECT_EQ(c.lambda, 0.01);
  EXPECT_EQ(c.gamma, 0.1);
  EXPECT_EQ(c.threshold, 0.8);
  EXPECT_EQ(c.alpha, 0.99);
  EXPECT_EQ(c.momentum, 0.9);
  EXPECT_EQ(c.learning_rate(0), c.lr1);
  EXPECT_EQ(c.learning_rate(1499), c.lr1);
  EXPECT_EQ(c.learning_rate(1500), c.lr2);
  EXPECT_EQ(c.warmup_steps(), 200);
  c.validate();

  auto rejects = [](auto mutate, const std::string& field) {
    TrainConfig t;
    mutate(t);
    try {
      t.validate();
      ADD_FAILURE() << field;
    } catch (const ConfigError& e) {
      EXPECT_NE(std::string(e.what()).find(field), std::string::npos) << e.what();
    }
  };
  rejects([](TrainConfig& t) { t.lambda = -1; }, "train.lambda");
  rejects([](TrainConfig& t) { t.gamma = -0.1; }, "train.gamma");
  rejects([](TrainConfig& t) { t.threshold = 1.0; }, "train.threshold");
  rejects([](TrainConfig& t) { t.threshold = 0.0; }, "train.threshold");
  rejects([](TrainConfig& t) { t.alpha = 1.0; }, "train.alpha");
  rejects([](TrainConfig& t) { t.augment.hue = 0.7; }, "augment.hue");
}

TEST(Ema, Examples) {
  ModelConfig cfg;
  DetectorParams teacher(cfg), student(cfg);
  for (double& v : student.values()) v = 1.0;
  ema_update(teacher, student, 0.99);
  for (double v : teacher.values()) EXPECT_NEAR(v, 0.01, 1e-15);

  DetectorParams same = student;
  ema_update(same, student, 0.99);
  EXPECT_EQ(same, student);
}

TEST(Ema, MatchesClosedForm) {
  const ModelConfig cfg;
  const double alpha = 0.99;
  const auto theta0 = DetectorParams::initialize(cfg, 1);
  const auto s = DetectorParams::initialize(cfg, 2);
  DetectorParams teacher = theta0;
  int done = 0;
  for (int n : {1, 10, 100, 1000}) {
    for (; done < n; ++done) ema_update(teacher, s, alpha);
    const double an = std::pow(alpha, n);
    double worst = 0.0;
    for (std::size_t i = 0; i < teacher.size(); ++i)
      worst = std::max(worst, std::abs(teacher.values()[i] - (an * theta0.values()[i] + (1 - an) * s.values()[i])));
    EXPECT_LE(worst, 1e-10) << "n=" << n;
  }
}

TEST(Ema, RejectsArchitectureMismatch) {
  ModelConfig a, b;
  b.roi_hidden = a.roi_hidden + 1;
  DetectorParams ta(a), sb(b);
  EXPECT_THROW(ema_update(ta, sb, 0.5), ConfigError);
}

Image noise_image(int h, int w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Image img(h, w);
  for (double& v : img.data()) v = u(rng);
  return img;
}

TEST(Augment, ZeroAmplitudeIsIdentity) {
  const Image img = noise_image(48, 48, 3);
  const AugmentConfig zero{0, 0, 0, 0, 0, 0};
  Rng rng(5);
  const auto [t, s] = augment_pair(img, rng, zero);
  EXPECT_EQ(t.image.data(), img.data());
  EXPECT_EQ(s.image.data(), img.data());
  EXPECT_EQ(t.transform.dx, 0);
  EXPECT_EQ(t.transform.dy, 0);
}

TEST(Augment, SameSeedSameViews) {
  const Image img = noise_image(48, 48, 4);
  Rng a(9), b(9);
  const auto pa = augment_pair(img, a, AugmentConfig{});
  const auto pb = augment_pair(img, b, AugmentConfig{});
  EXPECT_EQ(pa.first.image.data(), pb.first.image.data());
  EXPECT_EQ(pa.second.image.data(), pb.second.image.data());
}

TEST(Augment, ViewsShareGeometryButNotColour) {
  const Image img = noise_image(48, 48, 6);
  AugmentConfig cfg;
  cfg.crop_fraction = 0.2;
  cfg.pad_fraction = 0.2;
  bool differ = false, moved = false;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const auto [t, s] = augment_pair(img, rng, cfg);
    EXPECT_EQ(t.transform.dx, s.transform.dx);
    EXPECT_EQ(t.transform.dy, s.transform.dy);
    differ |= t.image.data() != s.image.data();
    moved |= t.transform.dx != 0 || t.transform.dy != 0;
  }
  EXPECT_TRUE(differ);
  EXPECT_TRUE(moved);
}

TEST(Augment, BoxRoundTrip) {
  std::mt19937_64 gen(8);
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed);
    const auto [t, s] = augment_pair(noise_image(48, 48, seed), rng, AugmentConfig{});
    const Box b = oracle::random_box(gen);
    const Box back = s.transform.unmap_box(t.transform.map_box(b));
    EXPECT_NEAR(back.x, b.x, 1e-9);
    EXPECT_NEAR(back.y, b.y, 1e-9);
    EXPECT_NEAR(back.w, b.w, 1e-9);
    EXPECT_NEAR(back.h, b.h, 1e-9);
  }
}

TEST(Augment, TransformMovesPixelsWithBoxes) {
  Image img(48, 48);
  img.at(10, 20, 0) = 1.0;
  AugmentConfig geo{0.2, 0.2, 0, 0, 0, 0};
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    const auto v = augment(img, rng, geo);
    const Box b = v.transform.map_box({20, 10, 1, 1});
    if (b.x >= 0 && b.x < 48 && b.y >= 0 && b.y < 48)
      EXPECT_EQ(v.image.at(static_cast<int>(b.y), static_cast<int>(b.x), 0), 1.0);
  }
}

TEST(Augment, MapLabelsClipsAndDrops) {
  ViewTransform t{-10, 0, 48, 48};
  const auto out = t.map_labels({{{12, 5, 10, 10}, 1}, {{3, 5, 10, 10}, 2}, {{30, 5, 10, 10}, 3}});
  ASSERT_EQ(out.size(), 2u);
  EXPECT_EQ(out[0].class_id, 1);
  EXPECT_EQ(out[0].box.x, 2.0);
  EXPECT_EQ(out[1].class_id, 3);
}

TEST(Augment, EmptyCropIsConfigError) {
  AugmentConfig cfg;
  cfg.crop_fraction = 1.0;
  Rng rng(1);
  EXPECT_THROW(augment_pair(noise_image(8, 8, 1), rng, cfg), ConfigError);
}

Detection det(Box b, int cls, double p, double tau) {
  Detection d;
  d.box = b;
  d.class_id = cls;
  d.score = p;
  d.confidence = tau;
  d.class_probs = {1 - p, p};
  return d;
}

TEST(PseudoLabels, ThresholdExamples) {
  const std::vector<Detection> dets = {det({0, 0, 10, 10}, 1, 0.9, 1), det({20, 20, 10, 10}, 1, 0.7, 1)};
  const auto s = select_pseudo_labels(dets, 0.8, 0.3);
  ASSERT_EQ(s.entries.size(), 1u);
  EXPECT_EQ(s.entries[0].score, 0.9);
  EXPECT_EQ(s.candidates, 2u);
  EXPECT_TRUE(select_pseudo_labels(dets, 0.95, 0.3).empty());
}

TEST(PseudoLabels, ConfidenceGateExamples) {
  const auto kept = select_pseudo_labels_conf({det({0, 0, 10, 10}, 1, 0.75, 0.9)}, 0.8, 0.3);
  ASSERT_EQ(kept.entries.size(), 1u);
  EXPECT_NEAR(kept.entries[0].gate, std::sqrt(0.675), 1e-15);
  EXPECT_NEAR(kept.entries[0].gate, 0.8216, 1e-4);
  EXPECT_TRUE(select_pseudo_labels_conf({det({0, 0, 10, 10}, 1, 0.9, 0.5)}, 0.8, 0.3).empty());
}

std::vector<Detection> random_set(std::mt19937_64& rng, int n, int classes) {
  std::vector<Detection> dets;
  for (int i = 0; i < n; ++i) dets.push_back(oracle::random_detection(rng, classes));
  return dets;
}

TEST(PseudoLabels, MatchesReferenceSelection) {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 200; ++trial) {
    const auto dets = random_set(rng, 20, 3);
    const double thr = 0.3 + 0.6 * std::uniform_real_distribution<double>(0, 1)(rng);
    const auto got = select_pseudo_labels(dets, thr, 0.3);
    std::vector<PseudoLabel> expected;
    std::size_t candidates = 0;
    for (int c = 1; c <= 3; ++c) {
      std::vector<Detection> group;
      for (const auto& d : dets)
        if (d.class_id == c) group.push_back(d);
      for (std::size_t i : oracle::reference_nms(group, 0.3)) {
        ++candidates;
        if (group[i].score > thr) expected.push_back({group[i].box, c, group[i].score, group[i].confidence, 0});
      }
    }
    EXPECT_EQ(got.candidates, candidates);
    ASSERT_EQ(got.entries.size(), expected.size());
    for (std::size_t i = 0; i < expected.size(); ++i) {
      EXPECT_EQ(got.entries[i].box, expected[i].box);
      EXPECT_EQ(got.entries[i].class_id, expected[i].class_id);
      EXPECT_EQ(got.entries[i].score, expected[i].score);
    }
  }
}

TEST(PseudoLabels, GateReductions) {
  std::mt19937_64 rng(41);
  std::uniform_real_distribution<double> u(0.05, 0.95);
  for (int trial = 0; trial < 1000; ++trial) {
    auto dets = random_set(rng, 1 + static_cast<int>(rng() % 20), 3);
    const double thr = u(rng);
    for (auto& d : dets) d.confidence = d.score;
    EXPECT_EQ(select_pseudo_labels_conf(dets, thr, 0.3), select_pseudo_labels(dets, thr, 0.3));
    for (auto& d : dets) d.confidence = 1.0;
    const auto a = select_pseudo_labels_conf(dets, thr, 0.3);
    const auto b = select_pseudo_labels(dets, thr * thr, 0.3);
    EXPECT_EQ(a.candidates, b.candidates);
    EXPECT_EQ(a.labels(), b.labels());
  }
}

bool contains(const PseudoLabelSet& set, const Box& b) {
  for (const auto& e : set.entries)
    if (e.box == b) return true;
  return false;
}

TEST(PseudoLabels, ConfidenceGateIsMonotone) {
  std::mt19937_64 rng(51);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 300; ++trial) {
    auto dets = random_set(rng, 15, 2);
    const auto before = select_pseudo_labels_conf(dets, 0.6, 0.3);
    auto raised = dets;
    for (auto& d : raised) d.confidence += (1.0 - d.confidence) * u(rng);
    const auto after = select_pseudo_labels_conf(raised, 0.6, 0.3);
    for (const auto& e : before.entries) EXPECT_TRUE(contains(after, e.box));
  }
  // Raising scores on disjoint boxes leaves NMS untouched.
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<Detection> dets;
    for (int i = 0; i < 12; ++i)
      dets.push_back(det({15.0 * (i % 4), 15.0 * (i / 4), 10, 10}, 1 + i % 2, 0.01 + 0.98 * u(rng), u(rng)));
    const auto before = select_pseudo_labels_conf(dets, 0.6, 0.3);
    for (auto& d : dets) d.score += (0.99 - d.score) * u(rng);
    const auto after = select_pseudo_labels_conf(dets, 0.6, 0.3);
    for (const auto& e : before.entries) EXPECT_TRUE(contains(after, e.box));
  }
}

struct Fixture {
  ModelConfig cfg;
  DetectorParams params;
  LabeledImage source, target_like;
  Image target;
  std::vector<LabeledBox> target_gt;

  explicit Fixture(std::uint64_t seed) : params(testing::test_params(cfg, seed)) {
    std::mt19937_64 rng(seed);
    source.labels = testing::random_gts(cfg, rng, 2);
    source.image = testing::painted_image(cfg, source.labels, seed);
    target_like.labels = testing::random_gts(cfg, rng, 2);
    target_like.image = testing::painted_image(cfg, target_like.labels, seed + 1);
    target_gt = testing::random_gts(cfg, rng, 2);
    target = testing::painted_image(cfg, target_gt, seed + 2);
  }

  PseudoLabelSet pseudo_from_gt() const {
    PseudoLabelSet s;
    for (const auto& g : target_gt) s.entries.push_back({g.box, g.class_id, 0.9, 0.9, 0.9});
    s.candidates = s.entries.size();
    return s;
  }

  StudentBatch batch(bool with_pseudo = true) const {
    StudentBatch b;
    b.source = source;
    b.target_like = target_like;
    b.distill_view = target;
    if (with_pseudo) b.pseudo = pseudo_from_gt();
    return b;
  }
};

TEST(Distill, EmptySetIsZero) {
  const Fixture f(3);
  std::vector<double> grad(f.params.size(), 0.0);
  const auto t = distill_loss(f.params, f.target, {}, nullptr, &grad);
  EXPECT_EQ(t.det(), 0.0);
  for (double g : grad) EXPECT_EQ(g, 0.0);
}

TEST(Distill, EqualsDetectionLossOnSameLabels) {
  const Fixture f(4);
  const auto t = distill_loss(f.params, f.target, f.pseudo_from_gt());
  EXPECT_EQ(t.det(), loss_det(f.params, f.target, f.target_gt));
  EXPECT_TRUE(std::isfinite(t.det()));
  EXPECT_GE(t.det(), 0.0);
}

TEST(Objective, Arithmetic) {
  EXPECT_DOUBLE_EQ(mt_objective(2.0, 3.0, 0.01), 2.03);
  EXPECT_DOUBLE_EQ(mt_objective(2.0, 3.0, 0.0), 2.0);
  EXPECT_DOUBLE_EQ(umt_objective(1.0, 2.0, 3.0, 4.0, 0.01, 0.1), 3.43);
}

TEST(Objective, ReducesToTwoDetectionLosses) {
  const Fixture f(5);
  TrainConfig tc;
  tc.lambda = 0.0;
  tc.gamma = 0.0;
  auto spec = ObjectiveSpec::for_variant(Variant::UMT, tc);
  spec.tau_override = 0.0;
  const auto v = evaluate_objective(f.params, f.batch(), spec, 1.0, nullptr, nullptr);
  EXPECT_DOUBLE_EQ(v.total, loss_det(f.params, f.source.image, f.source.labels) +
                                loss_det(f.params, f.target_like.image, f.target_like.labels));
}

TEST(Objective, EmptyPseudoLabelsLeaveSourceLoss) {
  const Fixture f(6);
  const auto spec = ObjectiveSpec::for_variant(Variant::UMT_S, TrainConfig{});
  const auto v = evaluate_objective(f.params, f.batch(false), spec, 1.0, nullptr, nullptr);
  EXPECT_EQ(v.total, loss_det(f.params, f.source.image, f.source.labels));
}

TEST(Objective, MissingComponentIsNamed) {
  const Fixture f(7);
  const auto spec = ObjectiveSpec::for_variant(Variant::UMT, TrainConfig{});
  auto b = f.batch();
  b.target_like.reset();
  try {
    evaluate_objective(f.params, b, spec, 1.0, nullptr, nullptr);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("target_like"), std::string::npos);
  }
  b = f.batch();
  b.distill_view.reset();
  EXPECT_THROW(evaluate_objective(f.params, b, spec, 1.0, nullptr, nullptr), ConfigError);
}

TEST(Objective, FullGradientMatchesFiniteDifferences) {
  for (std::uint64_t seed : {11u, 12u}) {
    const Fixture f(seed);
    TrainConfig tc;
    tc.lambda = 0.5;  // large enough that distillation shows in every coordinate
    const auto spec = ObjectiveSpec::for_variant(Variant::UMT, tc);
    const auto batch = f.batch();
    FrozenSamples frozen;
    std::vector<double> grad(f.params.size(), 0.0);
    evaluate_objective(f.params, batch, spec, 1.0, &frozen, &grad);
    auto objective = [&](const DetectorParams& p) {
      return evaluate_objective(p, batch, spec, 1.0, &frozen, nullptr).total;
    };
    DetectorParams params = f.params;
    std::mt19937_64 rng(seed);
    for (int i = 0; i < 50; ++i) {
      const std::size_t idx = rng() % params.size();
      const double fd = testing::central_difference(params, idx, 1e-4, objective);
      EXPECT_LE(testing::fd_relative_error(grad[idx], fd), 1e-4) << "coordinate " << idx;
    }
  }
}

TEST(Objective, TeacherParametersGetNoGradient) {
  // The objective depends on the teacher only through discrete pseudo labels.
  const Fixture f(13);
  DetectorParams teacher = testing::test_params(f.cfg, 14);
  const TrainConfig tc;
  const auto spec = ObjectiveSpec::for_variant(Variant::UMT, tc);
  FrozenSamples frozen;
  auto objective = [&](const DetectorParams& t) {
    auto b = f.batch(false);
    b.pseudo = select_pseudo_labels_conf(forward(t, f.target).detections, 0.3, tc.nms_iou);
    return evaluate_objective(f.params, b, spec, 1.0, &frozen, nullptr).total;
  };
  ASSERT_FALSE(select_pseudo_labels_conf(forward(teacher, f.target).detections, 0.3, tc.nms_iou).empty());
  objective(teacher);
  std::mt19937_64 rng(15);
  for (int i = 0; i < 50; ++i) {
    const std::size_t idx = rng() % teacher.size();
    EXPECT_EQ(testing::central_difference(teacher, idx, 1e-6, objective), 0.0);
  }
}

TrainConfig quick_config(Variant v, int steps) {
  TrainConfig c;
  c.variant = v;
  c.total_steps = steps;
  c.decay_step = steps * 3 / 4;
  c.checkpoint_every = 10;
  c.seed = 3;
  c.warmup_fraction = 0.0;
  c.threshold = 0.2;  // the untrained teacher still produces pseudo labels
  return c;
}

TEST(TrainStep, AlphaOneFreezesTeacher) {
  auto c = quick_config(Variant::UMT, 5);
  c.alpha = 1.0;
  const auto spec = ObjectiveSpec::for_variant(c.variant, c);
  TrainState s = TrainState::initialize(ModelConfig{}, 1);
  const DetectorParams teacher0 = s.teacher;
  for (int i = 0; i < 5; ++i) train_step(s, sample_batch(small_data(), spec, c.seed, s.step), c, spec);
  EXPECT_EQ(s.teacher, teacher0);
  EXPECT_FALSE(s.student == teacher0);
}

TEST(TrainStep, DegenerateUmtMatchesUmtS) {
  auto c = quick_config(Variant::UMT_S, 6);
  const auto umt_s = ObjectiveSpec::for_variant(Variant::UMT_S, c);
  auto reduced = ObjectiveSpec::for_variant(Variant::UMT, c);
  reduced.gamma = 0.0;
  reduced.tau_override = 0.0;
  reduced.teacher_input = TeacherInput::Target;
  reduced.gate = Gate::Score;
  reduced.target_like = false;

  TrainState a = TrainState::initialize(ModelConfig{}, 2), b = a;
  std::size_t kept = 0;
  for (int i = 0; i < 6; ++i) {
    const auto ma = train_step(a, sample_batch(small_data(), umt_s, c.seed, a.step), c, umt_s);
    const auto mb = train_step(b, sample_batch(small_data(), reduced, c.seed, b.step), c, reduced);
    EXPECT_EQ(ma.total, mb.total);
    EXPECT_EQ(ma.distill, mb.distill);
    EXPECT_EQ(ma.pseudo_kept, mb.pseudo_kept);
    EXPECT_EQ(ma.grad_norm, mb.grad_norm);
    kept += ma.pseudo_kept;
  }
  EXPECT_GT(kept, 0u);
  EXPECT_EQ(a.student, b.student);
  EXPECT_EQ(a.teacher, b.teacher);
}

TEST(TrainStep, PseudoLabelsAreDrawnInTheSharedFrame) {
  // Teacher boxes are selected on the teacher view; the shared transform
  // maps them to the same student-view coordinates.
  const auto& data = small_data();
  Rng rng(4);
  const auto [tv, sv] = augment_pair(data.source_like[0].image, data.target[0].image, rng, AugmentConfig{});
  for (const auto& b : data.target[0].boxes) {
    const Box via_teacher = tv.transform.map_box(b);
    const Box back = sv.transform.unmap_box(via_teacher);
    EXPECT_NEAR(back.x, b.x, 1e-9);
    EXPECT_NEAR(back.y, b.y, 1e-9);
  }
}

TEST(Training, TenStepTraceIsReproducible) {
  const auto c = quick_config(Variant::UMT, 10);
  const auto a = temp_dir("trace_a"), b = temp_dir("trace_b");
  run_training(ModelConfig{}, c, small_data(), a);
  run_training(ModelConfig{}, c, small_data(), b);
  EXPECT_EQ(slurp(a / "metrics.csv"), slurp(b / "metrics.csv"));
  EXPECT_EQ(slurp(a / "checkpoint.bin"), slurp(b / "checkpoint.bin"));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Training, ZeroStepsCheckpointIsInitialisation) {
  const auto c = quick_config(Variant::SourceOnly, 0);
  const auto dir = temp_dir("zero");
  run_training(ModelConfig{}, c, small_data(), dir);
  const auto s = load_checkpoint(dir / "checkpoint.bin", ModelConfig{});
  const auto init = TrainState::initialize(ModelConfig{}, c.seed);
  EXPECT_EQ(s.step, 0);
  EXPECT_EQ(s.student, init.student);
  EXPECT_EQ(s.teacher, init.student);
  fs::remove_all(dir);
}

TEST(Training, SourceOnlyLeavesAdaptationColumnsZero) {
  const auto c = quick_config(Variant::SourceOnly, 8);
  const auto dir = temp_dir("srconly");
  run_training(ModelConfig{}, c, small_data(), dir, false, [](const StepMetrics& m) {
    EXPECT_EQ(m.target_like_det, 0.0);
    EXPECT_EQ(m.distill, 0.0);
    EXPECT_EQ(m.distill_weight, 0.0);
    EXPECT_EQ(m.confidence, 0.0);
    EXPECT_EQ(m.tau_mean, 0.0);
    EXPECT_EQ(m.pseudo_candidates, 0u);
    EXPECT_EQ(m.pseudo_kept, 0u);
    EXPECT_GT(m.source_det, 0.0);
  });
  fs::remove_all(dir);
}

TEST(Training, ResumeMatchesUninterruptedRun) {
  const auto c = quick_config(Variant::UMT, 30);
  const auto whole = temp_dir("whole"), cut = temp_dir("cut");
  run_training(ModelConfig{}, c, small_data(), whole);
  struct Interrupt {};
  EXPECT_THROW(run_training(ModelConfig{}, c, small_data(), cut, false,
                            [](const StepMetrics& m) {
                              if (m.step == 24) throw Interrupt{};
                            }),
               Interrupt);
  EXPECT_EQ(load_checkpoint(cut / "checkpoint.bin", ModelConfig{}).step, 20);
  run_training(ModelConfig{}, c, small_data(), cut, true);
  EXPECT_EQ(slurp(whole / "metrics.csv"), slurp(cut / "metrics.csv"));
  EXPECT_EQ(slurp(whole / "checkpoint.bin"), slurp(cut / "checkpoint.bin"));

  auto other = c;
  other.lambda = 0.5;
  EXPECT_THROW(run_training(ModelConfig{}, other, small_data(), cut, true), ConfigError);
  fs::remove_all(whole);
  fs::remove_all(cut);
}

TEST(Training, SourceOnlyLossDecreases) {
  auto c = quick_config(Variant::SourceOnly, 500);
  c.checkpoint_every = 500;
  std::vector<double> smooth;
  double ema = 0.0;
  const auto dir = temp_dir("decrease");
  run_training(ModelConfig{}, c, small_data(), dir, false, [&](const StepMetrics& m) {
    ema = smooth.empty() ? m.total : 0.95 * ema + 0.05 * m.total;
    smooth.push_back(ema);
  });
  ASSERT_EQ(smooth.size(), 500u);
  EXPECT_LT(smooth[499], smooth[50]);
  fs::remove_all(dir);
}

TEST(Checkpoint, RoundTripAndErrors) {
  const auto dir = temp_dir("ckpt");
  fs::create_directories(dir);
  TrainState s = TrainState::initialize(ModelConfig{}, 5);
  s.step = 17;
  s.velocity[3] = 0.25;
  save_checkpoint(dir / "c.bin", s, TrainConfig{});
  const auto back = load_checkpoint(dir / "c.bin", ModelConfig{});
  EXPECT_EQ(back.step, 17);
  EXPECT_EQ(back.student, s.student);
  EXPECT_EQ(back.velocity, s.velocity);

  ModelConfig other;
  other.roi_hidden = 7;
  try {
    load_checkpoint(dir / "c.bin", other);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("digest"), std::string::npos);
  }
  EXPECT_THROW(load_checkpoint(dir / "missing.bin", ModelConfig{}), MissingArtifactError);
  fs::remove_all(dir);
}

}  // namespace
}  // namespace umt
