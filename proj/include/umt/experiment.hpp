#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "umt/config.hpp"
#include "umt/engine.hpp"
#include "umt/eval.hpp"

namespace umt {

const char* code_version();

/// Index of everything one command wrote. Paths are relative to the
/// experiment root so two runs in different directories compare equal.
struct RunManifest {
  std::string command;
  std::uint64_t config_digest = 0;
  std::vector<std::filesystem::path> artifacts;
  nlohmann::json reports = nlohmann::json::object();
  nlohmann::json timings = nlohmann::json::object();  // wall-clock seconds, not reproducible

  nlohmann::json to_json() const;
  /// Throws MissingArtifactError if a listed artifact does not exist.
  void write(const std::filesystem::path& root, const std::filesystem::path& file) const;
};

std::filesystem::path data_root(const ExperimentConfig& cfg);
std::filesystem::path train_dir(const ExperimentConfig& cfg, Variant v, std::uint64_t seed);

/// Hex digest of a file's bytes.
std::string file_digest(const std::filesystem::path& path);

void cmd_gen_data(const ExperimentConfig& cfg, bool force);

struct TrainResult {
  std::filesystem::path dir;
  TrainingRun run;
  double seconds = 0.0;
};

/// Trains one (variant, seed) cell into train_dir(). An existing run is
/// refused unless `resume` or `force`.
TrainResult cmd_train(const ExperimentConfig& cfg, Variant variant, std::uint64_t seed, bool resume, bool force,
                      const std::function<void(const StepMetrics&)>& on_step = {});

struct EvalOptions {
  std::filesystem::path checkpoint;
  std::filesystem::path out_dir;  // default: <checkpoint dir>/eval/<split>
  std::string split = "target_test";
  bool student = false;  // evaluate the student instead of the teacher
  std::optional<std::vector<double>> sweep;  // thresholds; empty optional disables
  bool error_analysis = false;
  bool bias_diagnostic = false;
  int dump_images = 0;
};

struct EvalResult {
  std::filesystem::path dir;
  EvalReport report;
  std::optional<BiasDiagnostic> bias;
};

EvalResult cmd_eval(const ExperimentConfig& cfg, const EvalOptions& options);

struct LadderCell {
  Variant variant = Variant::SourceOnly;
  std::uint64_t seed = 0;
  std::optional<double> map;
  std::string error;
};

struct LadderTable {
  std::vector<std::uint64_t> seeds;
  std::vector<LadderCell> cells;  // variant-major, in kAllVariants order

  /// Median over the seeds that finished; empty if none did.
  std::optional<double> median(Variant v) const;
  std::string csv() const;
  std::string markdown() const;
};

double median(std::vector<double> values);

/// Trains and evaluates every variant for every seed under <out>/ablation.
/// A failing cell is recorded and the ladder continues.
LadderTable cmd_ablation(const ExperimentConfig& cfg, const std::vector<std::uint64_t>& seeds, bool force,
                         const std::function<void(const std::string&)>& log = {});

/// Applies (forward) or inverts the configured shift on a dataset split
/// and writes the result as a split directory.
void cmd_translate(const ExperimentConfig& cfg, const std::filesystem::path& dataset_root, const std::string& split,
                   const std::filesystem::path& out_dir, bool inverse, bool force);

}  // namespace umt
