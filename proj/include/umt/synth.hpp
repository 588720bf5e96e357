#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "umt/geometry.hpp"
#include "umt/image.hpp"

namespace umt {

enum class Domain { Source, Target, SourceLike, TargetLike };

const char* to_string(Domain domain);
Domain domain_from_string(const std::string& name);

/// Procedural scene family: filled shapes on a shaded background. Class ids
/// are 1 circle, 2 square, 3 triangle, 4 diamond, 5 cross.
struct SceneSpec {
  int height = 48;
  int width = 48;
  int num_classes = 3;
  int min_objects = 1;
  int max_objects = 3;
  double min_size = 10.0;
  double max_size = 18.0;
  std::string background = "gradient";  // "flat" or "gradient"
  double max_overlap_iou = 0.1;         // pairwise, at most 0.3

  static constexpr int kMaxClasses = 5;

  void validate() const;
};

struct AnnotatedScene {
  std::string id;
  std::string parent;  // id of the untranslated scene, empty if none
  Domain domain = Domain::Source;
  Image image;
  std::vector<Box> boxes;
  std::vector<int> classes;

  std::vector<LabeledBox> labeled() const;
};

/// Deterministic in (spec, seed); domain is Source and id is left empty.
AnnotatedScene render_scene(const SceneSpec& spec, std::uint64_t seed);

/// Parametric stand-in for an image-to-image translator. The forward map is
///   y = clip(M x + offset + n(seed) + t)
/// where M is a 3x3 colour matrix, n a zero-mean low-frequency gray field of
/// the given amplitude, and t a fixed texture. The inverse undoes M, the
/// offset and the texture, cannot remove n, and adds fresh i.i.d. uniform
/// noise in [-epsilon, epsilon] to model an imperfect translator.
struct DomainShiftSpec {
  std::array<double, 9> color_matrix = {1, 0, 0, 0, 1, 0, 0, 0, 1};  // row-major
  std::array<double, 3> offset = {0, 0, 0};
  double noise_amplitude = 0.0;
  int texture_id = 0;  // 0 none, 1 diagonal stripes, 2 checkerboard, 3 horizontal lines
  double texture_strength = 0.0;
  double epsilon = 0.0;

  static constexpr double kMaxConditionNumber = 1e3;

  /// "identity", "mild" or "strong".
  static DomainShiftSpec preset(const std::string& name);

  double condition_number() const;
  std::array<double, 9> inverse_matrix() const;
  void validate() const;
};

Image apply_shift(const Image& image, const DomainShiftSpec& shift, std::uint64_t seed);
Image invert_shift(const Image& image, const DomainShiftSpec& shift, std::uint64_t seed);

/// Translates a whole scene; annotations are carried over unchanged.
AnnotatedScene translate_scene(const AnnotatedScene& scene, const DomainShiftSpec& shift,
                               bool inverse, std::uint64_t seed);

/// Split names in on-disk order.
inline const std::array<const char*, 5> kSplitNames = {"source_train", "target_train", "target_test",
                                                       "source_like", "target_like"};

struct DatasetCounts {
  int n_source = 200;
  int n_target = 200;
  int n_eval = 100;
};

inline constexpr int kDatasetFormatVersion = 1;

struct Dataset {
  std::string split;
  std::vector<AnnotatedScene> scenes;
};

/// Seed used to translate the i-th scene of a split; shared by dataset
/// generation and on-the-fly translation so both agree.
std::uint64_t translation_seed(std::uint64_t base_seed, const std::string& split, int index);

/// Renders and writes all five splits plus manifest.json under `root`.
/// An existing `root` is refused unless `force`, in which case it is replaced.
void generate_datasets(const SceneSpec& spec, const DomainShiftSpec& shift,
                       const DatasetCounts& counts, std::uint64_t seed,
                       const std::filesystem::path& root, bool force);

/// Same content as generate_datasets, in memory.
std::vector<Dataset> build_datasets(const SceneSpec& spec, const DomainShiftSpec& shift,
                                    const DatasetCounts& counts, std::uint64_t seed);

void write_split(const std::filesystem::path& dir, const Dataset& dataset);
Dataset load_split(const std::filesystem::path& root, const std::string& split);

}  // namespace umt
