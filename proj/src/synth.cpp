#include "umt/synth.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "json.hpp"
#include "umt/common.hpp"

namespace umt {

namespace fs = std::filesystem;
using nlohmann::json;

const char* to_string(Domain domain) {
  switch (domain) {
    case Domain::Source: return "source";
    case Domain::Target: return "target";
    case Domain::SourceLike: return "source_like";
    case Domain::TargetLike: return "target_like";
  }
  return "?";
}

Domain domain_from_string(const std::string& name) {
  for (Domain d : {Domain::Source, Domain::Target, Domain::SourceLike, Domain::TargetLike})
    if (name == to_string(d)) return d;
  throw ConfigError("unknown domain tag '" + name + "'");
}

void SceneSpec::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw ConfigError("scene." + field + ": " + why);
  };
  if (height < 8) fail("height", "must be >= 8");
  if (width < 8) fail("width", "must be >= 8");
  if (num_classes < 1 || num_classes > kMaxClasses) fail("num_classes", "must be in 1..5");
  if (min_objects < 0) fail("min_objects", "must be >= 0");
  if (max_objects < min_objects) fail("max_objects", "must be >= min_objects");
  if (!(min_size >= 2.0)) fail("min_size", "must be >= 2");
  if (!(max_size >= min_size)) fail("max_size", "must be >= min_size");
  if (max_size > std::min(height, width)) fail("max_size", "objects must fit inside the image");
  if (background != "flat" && background != "gradient")
    fail("background", "must be \"flat\" or \"gradient\"");
  if (!(max_overlap_iou >= 0.0 && max_overlap_iou <= 0.3)) fail("max_overlap_iou", "must be in [0, 0.3]");
}

std::vector<LabeledBox> AnnotatedScene::labeled() const {
  std::vector<LabeledBox> out;
  for (std::size_t i = 0; i < boxes.size(); ++i) out.push_back({boxes[i], classes[i]});
  return out;
}

namespace {

// Point-in-shape test in box-normalised coordinates u, v in [0, 1].
bool inside_shape(int class_id, double u, double v) {
  switch (class_id) {
    case 1: return (u - 0.5) * (u - 0.5) + (v - 0.5) * (v - 0.5) <= 0.25;
    case 2: return true;
    case 3: return std::abs(u - 0.5) <= 0.5 * v;  // apex at top centre
    case 4: return std::abs(u - 0.5) + std::abs(v - 0.5) <= 0.5;
    case 5: return std::abs(u - 0.5) <= 1.0 / 6 || std::abs(v - 0.5) <= 1.0 / 6;
  }
  return false;
}

void paint_shape(Image& img, const Box& box, int class_id, const std::array<double, 3>& color) {
  constexpr int kSub = 4;
  const int x0 = std::max(0, static_cast<int>(std::floor(box.x)));
  const int y0 = std::max(0, static_cast<int>(std::floor(box.y)));
  const int x1 = std::min(img.width(), static_cast<int>(std::ceil(box.x2())));
  const int y1 = std::min(img.height(), static_cast<int>(std::ceil(box.y2())));
  for (int y = y0; y < y1; ++y) {
    for (int x = x0; x < x1; ++x) {
      int hits = 0;
      for (int sy = 0; sy < kSub; ++sy) {
        for (int sx = 0; sx < kSub; ++sx) {
          const double px = x + (sx + 0.5) / kSub, py = y + (sy + 0.5) / kSub;
          const double u = (px - box.x) / box.w, v = (py - box.y) / box.h;
          if (u >= 0 && u <= 1 && v >= 0 && v <= 1 && inside_shape(class_id, u, v)) ++hits;
        }
      }
      if (hits == 0) continue;
      const double a = static_cast<double>(hits) / (kSub * kSub);
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = (1 - a) * img.at(y, x, c) + a * color[c];
    }
  }
}

// Zero-mean (over the random phases) sum of three low-frequency cosines.
std::vector<double> noise_field(int height, int width, double amplitude, std::uint64_t seed) {
  std::vector<double> field(static_cast<std::size_t>(height) * width, 0.0);
  if (amplitude == 0.0) return field;
  Rng rng(derive_seed(seed, 0x401e));
  constexpr int kWaves = 3;
  for (int k = 0; k < kWaves; ++k) {
    const double fx = uniform(rng, -3.0, 3.0), fy = uniform(rng, -3.0, 3.0);
    const double phase = uniform(rng, 0.0, 2.0 * M_PI);
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x)
        field[static_cast<std::size_t>(y) * width + x] +=
            amplitude / kWaves * std::cos(2.0 * M_PI * (fx * x / width + fy * y / height) + phase);
  }
  return field;
}

double texture_value(int id, int y, int x) {
  switch (id) {
    case 1: return std::sin(2.0 * M_PI * (x + y) / 6.0);
    case 2: return ((x / 4 + y / 4) % 2) ? 1.0 : -1.0;
    case 3: return std::cos(2.0 * M_PI * y / 4.0);
  }
  return 0.0;
}

Eigen::Matrix3d as_matrix(const std::array<double, 9>& m) {
  Eigen::Matrix3d out;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) out(r, c) = m[r * 3 + c];
  return out;
}

json spec_json(const SceneSpec& s) {
  return {{"height", s.height},           {"width", s.width},
          {"num_classes", s.num_classes}, {"min_objects", s.min_objects},
          {"max_objects", s.max_objects}, {"min_size", s.min_size},
          {"max_size", s.max_size},       {"background", s.background},
          {"max_overlap_iou", s.max_overlap_iou}};
}

json shift_json(const DomainShiftSpec& s) {
  return {{"color_matrix", s.color_matrix},     {"offset", s.offset},
          {"noise_amplitude", s.noise_amplitude}, {"texture_id", s.texture_id},
          {"texture_strength", s.texture_strength}, {"epsilon", s.epsilon}};
}

std::string scene_id(const char* prefix, int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s_%05d", prefix, index);
  return buf;
}

std::uint64_t split_tag(const std::string& split) { return fnv1a64(split); }

}  // namespace

AnnotatedScene render_scene(const SceneSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(derive_seed(seed, 0x5ce4e));
  AnnotatedScene scene;
  scene.domain = Domain::Source;
  scene.image = Image(spec.height, spec.width);

  std::array<double, 3> base{};
  for (double& b : base) b = uniform(rng, 0.3, 0.8);
  double gx = 0.0, gy = 0.0;
  if (spec.background == "gradient") {
    gx = uniform(rng, -0.15, 0.15);
    gy = uniform(rng, -0.15, 0.15);
  }
  for (int y = 0; y < spec.height; ++y)
    for (int x = 0; x < spec.width; ++x) {
      const double ramp = gx * (x / (spec.width - 1.0) - 0.5) + gy * (y / (spec.height - 1.0) - 0.5);
      for (int c = 0; c < 3; ++c) scene.image.at(y, x, c) = base[c] + ramp;
    }

  constexpr int kPlacementTries = 50;
  int wanted = uniform_int(rng, spec.min_objects, spec.max_objects);
  std::vector<Box> boxes;
  std::vector<int> classes;
  while (true) {
    boxes.clear();
    classes.clear();
    bool placed_all = true;
    for (int i = 0; i < wanted && placed_all; ++i) {
      const int cls = uniform_int(rng, 1, spec.num_classes);
      bool placed = false;
      for (int t = 0; t < kPlacementTries && !placed; ++t) {
        const double size = uniform(rng, spec.min_size, spec.max_size);
        const Box b{uniform(rng, 0.0, spec.width - size), uniform(rng, 0.0, spec.height - size), size, size};
        placed = std::all_of(boxes.begin(), boxes.end(),
                             [&](const Box& o) { return iou(o, b) <= spec.max_overlap_iou; });
        if (placed) {
          boxes.push_back(b);
          classes.push_back(cls);
        }
      }
      placed_all = placed;
    }
    if (placed_all) break;
    --wanted;  // regenerate with one object fewer
  }

  for (std::size_t i = 0; i < boxes.size(); ++i) {
    std::array<double, 3> color{};
    double contrast = 0.0;
    do {
      for (double& c : color) c = uniform01(rng);
      contrast = (std::abs(color[0] - base[0]) + std::abs(color[1] - base[1]) +
                  std::abs(color[2] - base[2])) / 3.0;
    } while (contrast < 0.3);
    paint_shape(scene.image, boxes[i], classes[i], color);
  }
  scene.image.clip01();
  scene.boxes = boxes;
  scene.classes = classes;
  return scene;
}

DomainShiftSpec DomainShiftSpec::preset(const std::string& name) {
  DomainShiftSpec s;
  if (name == "identity") return s;
  if (name == "mild") {
    s.color_matrix = {0.85, 0.10, 0.05, 0.05, 0.85, 0.10, 0.10, 0.05, 0.85};
    s.offset = {0.02, 0.02, 0.02};
    s.noise_amplitude = 0.02;
    s.texture_id = 1;
    s.texture_strength = 0.03;
    s.epsilon = 0.02;
    return s;
  }
  if (name == "strong") {
    // Low-contrast red/blue swap with a warm cast and striped texture.
    s.color_matrix = {0.10, 0.15, 0.40, 0.15, 0.40, 0.10, 0.40, 0.10, 0.15};
    s.offset = {0.30, 0.05, 0.25};
    s.noise_amplitude = 0.05;
    s.texture_id = 1;
    s.texture_strength = 0.10;
    s.epsilon = 0.03;
    return s;
  }
  throw ConfigError("shift.preset: unknown preset '" + name + "' (identity, mild, strong)");
}

double DomainShiftSpec::condition_number() const {
  const Eigen::Matrix3d m = as_matrix(color_matrix);
  const Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(m.transpose() * m, Eigen::EigenvaluesOnly);
  const Eigen::Vector3d ev = eig.eigenvalues();  // ascending squared singular values
  if (!(ev(0) > 0.0)) return INFINITY;
  return std::sqrt(ev(2) / ev(0));
}

std::array<double, 9> DomainShiftSpec::inverse_matrix() const {
  if (!(condition_number() <= kMaxConditionNumber))
    throw ConfigError("shift.color_matrix: condition number exceeds 1e3, cannot invert");
  const Eigen::Matrix3d inv = as_matrix(color_matrix).inverse();
  std::array<double, 9> out{};
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) out[r * 3 + c] = inv(r, c);
  return out;
}

void DomainShiftSpec::validate() const {
  for (double v : color_matrix)
    if (!std::isfinite(v)) throw ConfigError("shift.color_matrix: entries must be finite");
  for (double v : offset)
    if (!std::isfinite(v)) throw ConfigError("shift.offset: entries must be finite");
  if (!(condition_number() <= kMaxConditionNumber))
    throw ConfigError("shift.color_matrix: condition number exceeds 1e3");
  if (!(noise_amplitude >= 0.0)) throw ConfigError("shift.noise_amplitude: must be >= 0");
  if (texture_id < 0 || texture_id > 3) throw ConfigError("shift.texture_id: must be in 0..3");
  if (!(texture_strength >= 0.0)) throw ConfigError("shift.texture_strength: must be >= 0");
  if (!(epsilon >= 0.0)) throw ConfigError("shift.epsilon: must be >= 0");
}

Image apply_shift(const Image& image, const DomainShiftSpec& shift, std::uint64_t seed) {
  const auto& m = shift.color_matrix;
  const auto noise = noise_field(image.height(), image.width(), shift.noise_amplitude, seed);
  Image out(image.height(), image.width());
  for (int y = 0; y < image.height(); ++y) {
    for (int x = 0; x < image.width(); ++x) {
      const double extra = noise[static_cast<std::size_t>(y) * image.width() + x] +
                           shift.texture_strength * texture_value(shift.texture_id, y, x);
      for (int r = 0; r < 3; ++r) {
        double v = shift.offset[r] + extra;
        for (int c = 0; c < 3; ++c) v += m[r * 3 + c] * image.at(y, x, c);
        out.at(y, x, r) = v;
      }
    }
  }
  out.clip01();
  return out;
}

Image invert_shift(const Image& image, const DomainShiftSpec& shift, std::uint64_t seed) {
  const auto inv = shift.inverse_matrix();
  Rng rng(derive_seed(seed, 0x1a7e));
  Image out(image.height(), image.width());
  for (int y = 0; y < image.height(); ++y) {
    for (int x = 0; x < image.width(); ++x) {
      // The structured noise has zero expectation, so only the texture is removed.
      const double known = shift.texture_strength * texture_value(shift.texture_id, y, x);
      std::array<double, 3> centred{};
      for (int c = 0; c < 3; ++c) centred[c] = image.at(y, x, c) - shift.offset[c] - known;
      for (int r = 0; r < 3; ++r) {
        double v = 0.0;
        for (int c = 0; c < 3; ++c) v += inv[r * 3 + c] * centred[c];
        if (shift.epsilon > 0.0) v += uniform(rng, -shift.epsilon, shift.epsilon);
        out.at(y, x, r) = v;
      }
    }
  }
  out.clip01();
  return out;
}

AnnotatedScene translate_scene(const AnnotatedScene& scene, const DomainShiftSpec& shift,
                               bool inverse, std::uint64_t seed) {
  AnnotatedScene out = scene;
  out.image = inverse ? invert_shift(scene.image, shift, seed) : apply_shift(scene.image, shift, seed);
  out.parent = scene.id;
  if (inverse) {
    out.domain = Domain::SourceLike;
    out.id = "sl_" + scene.id;
  } else {
    out.domain = scene.domain == Domain::Source ? Domain::TargetLike : Domain::Target;
    out.id = (out.domain == Domain::TargetLike ? "tl_" : "t_") + scene.id;
  }
  return out;
}

std::uint64_t translation_seed(std::uint64_t base_seed, const std::string& split, int index) {
  return derive_seed(base_seed, split_tag(split), 0x7a, static_cast<std::uint64_t>(index));
}

std::vector<Dataset> build_datasets(const SceneSpec& spec, const DomainShiftSpec& shift,
                                    const DatasetCounts& counts, std::uint64_t seed) {
  spec.validate();
  shift.validate();
  if (counts.n_source < 1 || counts.n_target < 1 || counts.n_eval < 1)
    throw ConfigError("data: n_source, n_target and n_eval must all be >= 1");

  auto render_split = [&](const std::string& split, const char* prefix, int n, bool shifted) {
    Dataset d{split, {}};
    for (int i = 0; i < n; ++i) {
      AnnotatedScene s = render_scene(spec, derive_seed(seed, split_tag(split), 0x5c, i));
      s.id = scene_id(prefix, i);
      if (shifted) {
        s.image = apply_shift(s.image, shift, translation_seed(seed, split, i));
        s.domain = Domain::Target;
      }
      d.scenes.push_back(std::move(s));
    }
    return d;
  };

  std::vector<Dataset> out;
  out.push_back(render_split("source_train", "src", counts.n_source, false));
  out.push_back(render_split("target_train", "tgt", counts.n_target, true));
  out.push_back(render_split("target_test", "test", counts.n_eval, true));

  Dataset source_like{"source_like", {}};
  for (int i = 0; i < counts.n_target; ++i)
    source_like.scenes.push_back(
        translate_scene(out[1].scenes[i], shift, true, translation_seed(seed, "source_like", i)));
  Dataset target_like{"target_like", {}};
  for (int i = 0; i < counts.n_source; ++i)
    target_like.scenes.push_back(
        translate_scene(out[0].scenes[i], shift, false, translation_seed(seed, "target_like", i)));
  out.push_back(std::move(source_like));
  out.push_back(std::move(target_like));
  return out;
}

void write_split(const fs::path& dir, const Dataset& dataset) {
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "raw");
  std::ofstream ann(dir / "annotations.jsonl", std::ios::binary);
  if (!ann) throw std::runtime_error("cannot write " + (dir / "annotations.jsonl").string());
  for (const auto& s : dataset.scenes) {
    write_png(dir / "images" / (s.id + ".png"), s.image);
    write_raw(dir / "raw" / (s.id + ".bin"), s.image);
    json boxes = json::array();
    for (const auto& b : s.boxes) boxes.push_back({b.x, b.y, b.w, b.h});
    json line = {{"id", s.id}, {"domain", to_string(s.domain)}, {"boxes", boxes}, {"classes", s.classes}};
    if (!s.parent.empty()) line["parent"] = s.parent;
    ann << line.dump() << '\n';
  }
}

void generate_datasets(const SceneSpec& spec, const DomainShiftSpec& shift,
                       const DatasetCounts& counts, std::uint64_t seed, const fs::path& root,
                       bool force) {
  if (fs::exists(root)) {
    if (!force)
      throw ConfigError("output directory " + root.string() + " exists; pass --force to replace it");
    fs::remove_all(root);
  }
  const auto splits = build_datasets(spec, shift, counts, seed);
  fs::create_directories(root);
  json split_counts = json::object();
  for (const auto& d : splits) {
    write_split(root / d.split, d);
    split_counts[d.split] = d.scenes.size();
  }
  const json manifest = {{"format_version", kDatasetFormatVersion},
                         {"seed", seed},
                         {"scene", spec_json(spec)},
                         {"shift", shift_json(shift)},
                         {"counts", split_counts}};
  std::ofstream(root / "manifest.json", std::ios::binary) << manifest.dump(2) << '\n';
}

Dataset load_split(const fs::path& root, const std::string& split) {
  const fs::path dir = root / split;
  std::ifstream ann(dir / "annotations.jsonl");
  if (!ann) throw MissingArtifactError("dataset split missing: " + (dir / "annotations.jsonl").string() +
                                       " (run gen-data first)");
  Dataset d{split, {}};
  std::string line;
  while (std::getline(ann, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line);
    AnnotatedScene s;
    s.id = j.at("id").get<std::string>();
    s.domain = domain_from_string(j.at("domain").get<std::string>());
    if (j.contains("parent")) s.parent = j.at("parent").get<std::string>();
    for (const auto& b : j.at("boxes")) s.boxes.push_back({b[0], b[1], b[2], b[3]});
    s.classes = j.at("classes").get<std::vector<int>>();
    s.image = read_raw(dir / "raw" / (s.id + ".bin"));
    d.scenes.push_back(std::move(s));
  }
  return d;
}

}  // namespace umt
