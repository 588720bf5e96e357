#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "umt/detector.hpp"
#include "umt/engine.hpp"
#include "umt/eval.hpp"
#include "umt/synth.hpp"

namespace umt {

// A TOML subset: [section] headers, key = value, '#' comments. Values are
// booleans, integers, floats, basic strings and flat arrays of those.
struct TomlValue {
  using Array = std::vector<TomlValue>;
  std::variant<bool, std::int64_t, double, std::string, Array> v;
  int line = 0;

  bool is_number() const { return std::holds_alternative<std::int64_t>(v) || std::holds_alternative<double>(v); }
};

using TomlSection = std::map<std::string, TomlValue>;
using TomlDocument = std::map<std::string, TomlSection>;  // "" holds keys before any header

/// Throws ConfigError as "<source>:<line>: <what>".
TomlDocument parse_toml(const std::string& text, const std::string& source);
/// Parses a single value such as `0.5`, `"UMT"` or `[1, 2]`.
TomlValue parse_toml_value(const std::string& text, const std::string& source, int line);

struct EvalConfig {
  double iou_threshold = 0.5;
  std::vector<double> sweep = {0.5, 0.6, 0.7, 0.8, 0.9};
  ConfidentRule localization_rule = ConfidentRule::TopKPerClass;
  int dump_images = 8;
  double bias_epsilon = 0.0;  // noise of the source-like translator in the bias diagnostic

  void validate() const;
};

struct ExperimentConfig {
  SceneSpec scene;
  std::string shift_preset = "strong";  // empty when fully explicit
  DomainShiftSpec shift = DomainShiftSpec::preset("strong");
  DatasetCounts counts;
  std::uint64_t data_seed = 1000;
  ModelConfig model;
  TrainConfig train;
  EvalConfig eval;
  std::filesystem::path out = "runs";
  std::vector<std::uint64_t> seeds = {0, 1, 2};

  /// Throws ConfigError naming the offending field.
  void validate() const;
  std::string canonical() const;
  std::uint64_t digest() const;
};

/// Defaults, then the document, then UMT_<SECTION>_<KEY> variables from
/// `env` (name -> value). Unknown sections and keys are rejected.
ExperimentConfig config_from_document(const TomlDocument& doc, const std::string& source,
                                      const std::map<std::string, std::string>& env = {});
ExperimentConfig load_config(const std::filesystem::path& path, const std::map<std::string, std::string>& env = {});
ExperimentConfig config_from_text(const std::string& text, const std::string& source = "<config>",
                                  const std::map<std::string, std::string>& env = {});

/// All UMT_* variables of the process environment.
std::map<std::string, std::string> umt_environment();

/// The full default configuration as TOML text.
std::string default_config_text();

}  // namespace umt
