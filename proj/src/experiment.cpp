#include "umt/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "umt/common.hpp"
#include "umt/image.hpp"

#ifndef UMT_VERSION
#define UMT_VERSION "dev"
#endif

namespace umt {

namespace fs = std::filesystem;
using nlohmann::json;

const char* code_version() { return UMT_VERSION; }

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string hex64(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw MissingArtifactError("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << text;
}

fs::path relative_to(const fs::path& p, const fs::path& root) {
  return fs::weakly_canonical(p).lexically_relative(fs::weakly_canonical(root));
}

// Every regular file under dir, sorted, relative to root.
std::vector<fs::path> files_under(const fs::path& dir, const fs::path& root) {
  std::vector<fs::path> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out.push_back(relative_to(e.path(), root));
  std::sort(out.begin(), out.end());
  return out;
}

void prepare_dir(const fs::path& dir, bool force) {
  if (fs::exists(dir)) {
    if (!force) throw ConfigError("output directory " + dir.string() + " exists; pass --force to replace it");
    fs::remove_all(dir);
  }
  fs::create_directories(dir);
}

TrainingData load_training_data(const ExperimentConfig& cfg) {
  const fs::path root = data_root(cfg);
  if (!fs::exists(root / "manifest.json"))
    throw MissingArtifactError("no dataset at " + root.string() + "; run `umt gen-data` with the same config first");
  return TrainingData::load(root);
}

std::string dataset_id(const ExperimentConfig& cfg, const std::string& split) {
  return split + "@" + file_digest(data_root(cfg) / "manifest.json");
}

TrainConfig train_config(const ExperimentConfig& cfg, Variant v, std::uint64_t seed) {
  TrainConfig t = cfg.train;
  t.variant = v;
  t.seed = seed;
  return t;
}

}  // namespace

std::string file_digest(const fs::path& path) { return hex64(fnv1a64(read_file(path))); }

json RunManifest::to_json() const {
  json j;
  j["command"] = command;
  j["config_digest"] = hex64(config_digest);
  j["code_version"] = code_version();
  j["artifacts"] = json::array();
  for (const auto& a : artifacts) j["artifacts"].push_back(a.generic_string());
  j["reports"] = reports;
  j["timings"] = timings;
  return j;
}

void RunManifest::write(const fs::path& root, const fs::path& file) const {
  for (const auto& a : artifacts)
    if (!fs::exists(root / a)) throw MissingArtifactError("manifest references a missing artifact: " + a.string());
  write_text(file, to_json().dump(2) + "\n");
}

fs::path data_root(const ExperimentConfig& cfg) { return cfg.out / "data"; }

fs::path train_dir(const ExperimentConfig& cfg, Variant v, std::uint64_t seed) {
  return cfg.out / "train" / to_string(v) / ("seed_" + std::to_string(seed));
}

void cmd_gen_data(const ExperimentConfig& cfg, bool force) {
  const auto t0 = Clock::now();
  const fs::path root = data_root(cfg);
  generate_datasets(cfg.scene, cfg.shift, cfg.counts, cfg.data_seed, root, force);
  write_text(root / "config.toml", cfg.canonical());
  RunManifest m;
  m.command = "gen-data";
  m.config_digest = cfg.digest();
  m.artifacts = files_under(root, cfg.out);
  m.timings["total_seconds"] = seconds_since(t0);
  m.write(cfg.out, root / "run_manifest.json");
}

namespace {

TrainResult train_into(const ExperimentConfig& cfg, const TrainingData& data, Variant variant, std::uint64_t seed,
                       const fs::path& dir, bool resume, const std::function<void(const StepMetrics&)>& on_step) {
  const auto t0 = Clock::now();
  TrainResult r{dir, run_training(cfg.model, train_config(cfg, variant, seed), data, dir, resume, on_step), 0.0};
  r.seconds = seconds_since(t0);
  write_text(dir / "config.toml", cfg.canonical());
  return r;
}

}  // namespace

TrainResult cmd_train(const ExperimentConfig& cfg, Variant variant, std::uint64_t seed, bool resume, bool force,
                      const std::function<void(const StepMetrics&)>& on_step) {
  const fs::path dir = train_dir(cfg, variant, seed);
  if (fs::exists(dir) && !resume) prepare_dir(dir, force);
  const TrainingData data = load_training_data(cfg);
  TrainResult r = train_into(cfg, data, variant, seed, dir, resume, on_step);
  RunManifest m;
  m.command = "train";
  m.config_digest = cfg.digest();
  for (const char* f : {"checkpoint.bin", "config.toml", "metrics.csv"}) m.artifacts.push_back(relative_to(dir / f, cfg.out));
  m.reports = {{"variant", to_string(variant)}, {"seed", seed}, {"steps", r.run.state.step},
               {"checkpoint", file_digest(r.run.checkpoint)}};
  m.timings["train_seconds"] = r.seconds;
  m.write(cfg.out, dir / "run_manifest.json");
  return r;
}

namespace {

// Source-like view of an evaluation split, translated on the fly.
std::vector<AnnotatedScene> source_like_of(const ExperimentConfig& cfg, const std::vector<AnnotatedScene>& scenes,
                                           const std::string& split) {
  DomainShiftSpec shift = cfg.shift;
  shift.epsilon = cfg.eval.bias_epsilon;
  std::vector<AnnotatedScene> out;
  for (std::size_t i = 0; i < scenes.size(); ++i)
    out.push_back(translate_scene(scenes[i], shift, true, translation_seed(cfg.data_seed, split, static_cast<int>(i))));
  return out;
}

struct EvalOutput {
  EvalReport report;
  std::optional<BiasDiagnostic> bias;
  std::vector<fs::path> files;
};

EvalOutput evaluate_into(const ExperimentConfig& cfg, const DetectorParams& params, const std::string& checkpoint_id,
                         const std::vector<AnnotatedScene>& scenes, const std::string& split, const EvalOptions& opt,
                         const fs::path& dir) {
  if (scenes.empty()) throw ConfigError("evaluation split '" + split + "' is empty");
  EvalOutput out;
  const auto dets = predict_dataset(params, scenes);
  const auto gts = ground_truths(scenes);
  const int C = params.config().num_classes;
  out.report = evaluate_detections(dets, gts, C, cfg.eval.iou_threshold);
  out.report.checkpoint_id = checkpoint_id;
  out.report.dataset_id = dataset_id(cfg, split);
  if (opt.sweep) out.report.sweep = iou_sweep(dets, gts, C, opt.sweep->empty() ? cfg.eval.sweep : *opt.sweep);
  if (opt.error_analysis) {
    out.report.localization = localization_error_analysis(dets, gts, C, cfg.eval.localization_rule);
    out.report.classification = classification_error_analysis(dets, gts, C);
  }
  fs::create_directories(dir);
  out.files = write_report(dir, out.report);
  if (opt.bias_diagnostic) {
    out.bias = bias_diagnostic(params, scenes, source_like_of(cfg, scenes, split), cfg.eval.iou_threshold);
    const json b = {{"map_target", out.bias->map_target},
                    {"map_source_like", out.bias->map_source_like},
                    {"difference", out.bias->difference()},
                    {"translator_epsilon", cfg.eval.bias_epsilon}};
    write_text(dir / "bias.json", b.dump(2) + "\n");
    out.files.push_back(dir / "bias.json");
  }
  const int dumps = std::min<int>(opt.dump_images, static_cast<int>(scenes.size()));
  for (int i = 0; i < dumps; ++i) {
    const fs::path p = dir / "images" / (scenes[i].id + ".png");
    fs::create_directories(p.parent_path());
    write_png(p, annotate(scenes[i].image, dets[i]));
    out.files.push_back(p);
  }
  return out;
}

json report_summary(const EvalOutput& o) {
  json j = {{"map", o.report.map}, {"dataset", o.report.dataset_id}, {"checkpoint", o.report.checkpoint_id}};
  if (o.bias) j["bias"] = {{"map_target", o.bias->map_target}, {"map_source_like", o.bias->map_source_like}};
  return j;
}

}  // namespace

EvalResult cmd_eval(const ExperimentConfig& cfg, const EvalOptions& options) {
  const auto t0 = Clock::now();
  if (options.checkpoint.empty()) throw ConfigError("eval: no checkpoint given");
  const TrainState state = load_checkpoint(options.checkpoint, cfg.model);
  const auto scenes = load_split(data_root(cfg), options.split).scenes;
  const fs::path dir =
      options.out_dir.empty() ? options.checkpoint.parent_path() / "eval" / options.split : options.out_dir;
  const auto out = evaluate_into(cfg, options.student ? state.student : state.teacher, file_digest(options.checkpoint),
                                 scenes, options.split, options, dir);
  write_text(dir / "config.toml", cfg.canonical());
  RunManifest m;
  m.command = "eval";
  m.config_digest = cfg.digest();
  for (const auto& f : out.files) m.artifacts.push_back(relative_to(f, cfg.out));
  m.artifacts.push_back(relative_to(dir / "config.toml", cfg.out));
  std::sort(m.artifacts.begin(), m.artifacts.end());
  m.reports = report_summary(out);
  m.reports["model"] = options.student ? "student" : "teacher";
  m.timings["eval_seconds"] = seconds_since(t0);
  m.write(cfg.out, dir / "run_manifest.json");
  return {dir, out.report, out.bias};
}

double median(std::vector<double> v) {
  if (v.empty()) throw ConfigError("median of an empty set");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::optional<double> LadderTable::median(Variant v) const {
  std::vector<double> values;
  for (const auto& c : cells)
    if (c.variant == v && c.map) values.push_back(*c.map);
  if (values.empty()) return std::nullopt;
  return umt::median(values);
}

std::string LadderTable::csv() const {
  std::string s = "variant";
  for (auto seed : seeds) s += ",seed_" + std::to_string(seed);
  s += ",median\n";
  for (Variant v : kAllVariants) {
    s += to_string(v);
    for (auto seed : seeds) {
      s += ",";
      for (const auto& c : cells)
        if (c.variant == v && c.seed == seed && c.map) s += shortest(*c.map);
    }
    s += ",";
    if (const auto m = median(v)) s += shortest(*m);
    s += "\n";
  }
  return s;
}

std::string LadderTable::markdown() const {
  std::string s = "| variant |";
  for (auto seed : seeds) s += " seed " + std::to_string(seed) + " |";
  s += " median |\n|---|";
  for (std::size_t i = 0; i <= seeds.size(); ++i) s += "---:|";
  s += "\n";
  char buf[64];
  for (Variant v : kAllVariants) {
    s += std::string("| ") + to_string(v) + " |";
    for (auto seed : seeds)
      for (const auto& c : cells)
        if (c.variant == v && c.seed == seed) {
          if (c.map) {
            std::snprintf(buf, sizeof(buf), " %.2f |", 100.0 * *c.map);
            s += buf;
          } else {
            s += " failed |";
          }
        }
    if (const auto m = median(v)) {
      std::snprintf(buf, sizeof(buf), " %.2f |", 100.0 * *m);
      s += buf;
    } else {
      s += " - |";
    }
    s += "\n";
  }
  s += "\nmAP in points at IoU 0.5 on target_test, teacher weights.\n";
  return s;
}

LadderTable cmd_ablation(const ExperimentConfig& cfg, const std::vector<std::uint64_t>& seeds, bool force,
                         const std::function<void(const std::string&)>& log) {
  const auto t0 = Clock::now();
  const fs::path root = cfg.out / "ablation";
  prepare_dir(root, force);
  const TrainingData data = load_training_data(cfg);
  const auto test = load_split(data_root(cfg), "target_test").scenes;

  LadderTable table;
  table.seeds = seeds;
  RunManifest m;
  m.command = "ablation";
  m.config_digest = cfg.digest();
  json cells = json::array();
  for (Variant v : kAllVariants) {
    for (auto seed : seeds) {
      LadderCell cell{v, seed, std::nullopt, ""};
      const fs::path dir = root / to_string(v) / ("seed_" + std::to_string(seed));
      const auto c0 = Clock::now();
      try {
        const auto r = train_into(cfg, data, v, seed, dir, false, {});
        EvalOptions opt;
        opt.sweep = std::vector<double>{};
        opt.error_analysis = true;
        const auto out = evaluate_into(cfg, r.run.state.teacher, file_digest(r.run.checkpoint), test, "target_test", opt,
                                       dir / "eval");
        cell.map = out.report.map;
      } catch (const std::exception& e) {
        cell.error = e.what();
      }
      m.timings[std::string(to_string(v)) + "/seed_" + std::to_string(seed)] = seconds_since(c0);
      json j = {{"variant", to_string(v)}, {"seed", seed}};
      if (cell.map) j["map"] = *cell.map;
      else j["error"] = cell.error;
      cells.push_back(j);
      if (log) {
        char buf[160];
        if (cell.map)
          std::snprintf(buf, sizeof(buf), "%-10s seed %llu: mAP %.4f", to_string(v), static_cast<unsigned long long>(seed), *cell.map);
        else
          std::snprintf(buf, sizeof(buf), "%-10s seed %llu: failed", to_string(v), static_cast<unsigned long long>(seed));
        log(std::string(buf) + (cell.error.empty() ? "" : " (" + cell.error + ")"));
      }
      table.cells.push_back(std::move(cell));
    }
  }
  write_text(root / "ladder.csv", table.csv());
  write_text(root / "ladder.md", table.markdown());
  write_text(root / "config.toml", cfg.canonical());
  m.reports["cells"] = cells;
  json medians = json::object();
  for (Variant v : kAllVariants)
    if (const auto md = table.median(v)) medians[to_string(v)] = *md;
  m.reports["medians"] = medians;
  m.timings["total_seconds"] = seconds_since(t0);
  m.artifacts = files_under(root, cfg.out);
  m.write(cfg.out, root / "run_manifest.json");
  return table;
}

void cmd_translate(const ExperimentConfig& cfg, const fs::path& dataset_root, const std::string& split,
                   const fs::path& out_dir, bool inverse, bool force) {
  const auto t0 = Clock::now();
  const Dataset in = load_split(dataset_root, split);
  prepare_dir(out_dir, force);
  Dataset out{split, {}};
  for (std::size_t i = 0; i < in.scenes.size(); ++i)
    out.scenes.push_back(translate_scene(in.scenes[i], cfg.shift, inverse,
                                         translation_seed(cfg.data_seed, split, static_cast<int>(i))));
  write_split(out_dir, out);
  write_text(out_dir / "config.toml", cfg.canonical());
  RunManifest m;
  m.command = inverse ? "translate --inverse" : "translate";
  m.config_digest = cfg.digest();
  m.artifacts = files_under(out_dir, out_dir);
  m.reports = {{"split", split}, {"scenes", out.scenes.size()}, {"inverse", inverse}};
  m.timings["total_seconds"] = seconds_since(t0);
  m.write(out_dir, out_dir / "run_manifest.json");
}

}  // namespace umt
