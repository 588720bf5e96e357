#include <cstdio>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "umt/common.hpp"
#include "umt/experiment.hpp"

namespace fs = std::filesystem;
using namespace umt;

namespace {

enum ExitCode { kOk = 0, kConfig = 2, kMissing = 3, kNumerical = 4 };

struct Globals {
  std::string config;
  std::vector<std::uint64_t> seeds;
  std::string out;
  bool force = false;
};

ExperimentConfig load(const Globals& g) {
  ExperimentConfig cfg = g.config.empty() ? config_from_text("", "<defaults>", umt_environment())
                                          : load_config(g.config, umt_environment());
  if (!g.out.empty()) cfg.out = g.out;
  return cfg;
}

std::vector<std::uint64_t> seeds_of(const Globals& g, const ExperimentConfig& cfg) {
  return g.seeds.empty() ? cfg.seeds : g.seeds;
}

std::vector<double> parse_thresholds(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::logic_error&) {
      throw ConfigError("--sweep: '" + item + "' is not a number");
    }
  }
  return out;
}

void progress(const StepMetrics& m, int total) {
  if ((m.step + 1) % 100 == 0 || m.step + 1 == total)
    std::fprintf(stderr, "step %5d/%d  loss %.4f  distill %.4f  kept %zu\n", m.step + 1, total, m.total, m.distill,
                 m.pseudo_kept);
}

void print_report(const EvalResult& r) {
  std::printf("%s: mAP@%.2f = %.4f over %zu images\n", r.report.dataset_id.c_str(), r.report.iou_threshold,
              r.report.map, r.report.num_images);
  for (const auto& [t, m] : r.report.sweep) std::printf("  sweep IoU %.2f: %.4f\n", t, m);
  if (r.bias)
    std::printf("  bias: target %.4f  source-like %.4f  difference %+.4f\n", r.bias->map_target,
                r.bias->map_source_like, r.bias->difference());
  for (const auto& w : r.report.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
  std::printf("  written to %s\n", r.dir.string().c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Unbiased mean teacher experiments on synthetic scenes"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config, "TOML experiment config (defaults if omitted)");
  app.add_option("--seed", g.seeds, "data seed for gen-data; training seeds for train, eval and ablation")
      ->delimiter(',');
  app.add_option("--out", g.out, "experiment root, overrides experiment.out");
  app.add_flag("--force", g.force, "replace existing outputs");

  auto* gen = app.add_subcommand("gen-data", "render the five dataset splits");

  auto* train = app.add_subcommand("train", "train one variant for each seed");
  std::string variant_name;
  bool resume = false;
  train->add_option("--variant", variant_name, "SourceOnly, UMT_S, UMT_SC, UMT_SCA or UMT (default: train.variant)");
  train->add_flag("--resume", resume, "continue from the last checkpoint");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string eval_variant, checkpoint, split = "target_test", sweep, eval_out;
  bool student = false, error_analysis = false, bias = false;
  int dump = -1;
  eval->add_option("--variant", eval_variant, "pick the checkpoint of this variant and --seed");
  eval->add_option("--checkpoint", checkpoint, "checkpoint file");
  eval->add_option("--split", split, "dataset split to evaluate");
  eval->add_option("--output", eval_out, "report directory (default: next to the checkpoint)");
  eval->add_flag("--student", student, "evaluate the student instead of the teacher");
  auto* sweep_opt = eval->add_option("--sweep", sweep, "comma separated IoU thresholds")->expected(0, 1);
  eval->add_flag("--error-analysis", error_analysis, "localization and classification breakdowns");
  eval->add_flag("--bias-diagnostic", bias, "compare against the source-like translation of the split");
  eval->add_option("--dump", dump, "number of annotated PNGs (default: eval.dump_images)");

  auto* ablation = app.add_subcommand("ablation", "train and evaluate every variant for every seed");

  auto* translate = app.add_subcommand("translate", "apply or invert the configured shift on a split");
  std::string input, output, tsplit;
  bool inverse = false;
  translate->add_option("--input", input, "dataset root")->required();
  translate->add_option("--split", tsplit, "split name under the dataset root")->required();
  translate->add_option("--output", output, "output split directory")->required();
  translate->add_flag("--inverse", inverse, "invert the shift (target to source-like)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfig;
  }

  try {
    ExperimentConfig cfg = load(g);
    if (gen->parsed()) {
      if (g.seeds.size() > 1) throw ConfigError("gen-data takes a single --seed");
      if (!g.seeds.empty()) cfg.data_seed = g.seeds[0];
      cmd_gen_data(cfg, g.force);
      std::printf("dataset written to %s\n", data_root(cfg).string().c_str());
    } else if (train->parsed()) {
      const Variant v = variant_name.empty() ? cfg.train.variant : variant_from_string(variant_name);
      for (auto seed : seeds_of(g, cfg)) {
        std::fprintf(stderr, "training %s seed %llu\n", to_string(v), static_cast<unsigned long long>(seed));
        const int total = cfg.train.total_steps;
        const auto r = cmd_train(cfg, v, seed, resume, g.force, [total](const StepMetrics& m) { progress(m, total); });
        std::printf("%s seed %llu: %d steps in %.1fs, checkpoint %s\n", to_string(v),
                    static_cast<unsigned long long>(seed), r.run.state.step, r.seconds,
                    r.run.checkpoint.string().c_str());
      }
    } else if (eval->parsed()) {
      EvalOptions opt;
      opt.split = split;
      opt.student = student;
      opt.error_analysis = error_analysis;
      opt.bias_diagnostic = bias;
      opt.dump_images = dump < 0 ? cfg.eval.dump_images : dump;
      if (sweep_opt->count() > 0) opt.sweep = sweep.empty() ? cfg.eval.sweep : parse_thresholds(sweep);
      std::vector<fs::path> checkpoints;
      if (!checkpoint.empty()) {
        if (!eval_variant.empty()) throw ConfigError("eval: give either --checkpoint or --variant, not both");
        checkpoints.push_back(checkpoint);
      } else {
        if (eval_variant.empty()) throw ConfigError("eval: --checkpoint or --variant is required");
        const Variant v = variant_from_string(eval_variant);
        for (auto seed : seeds_of(g, cfg)) checkpoints.push_back(train_dir(cfg, v, seed) / "checkpoint.bin");
      }
      if (!eval_out.empty() && checkpoints.size() > 1) throw ConfigError("eval: --output needs a single checkpoint");
      for (const auto& c : checkpoints) {
        if (!fs::exists(c)) throw MissingArtifactError("checkpoint " + c.string() + " not found; run `umt train` first");
        opt.checkpoint = c;
        opt.out_dir = eval_out;
        print_report(cmd_eval(cfg, opt));
      }
    } else if (ablation->parsed()) {
      const auto table = cmd_ablation(cfg, seeds_of(g, cfg), g.force, [](const std::string& line) {
        std::fprintf(stderr, "%s\n", line.c_str());
      });
      std::printf("%s", table.markdown().c_str());
    } else if (translate->parsed()) {
      cmd_translate(cfg, input, tsplit, output, inverse, g.force);
      std::printf("translated split written to %s\n", output.c_str());
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfig;
  } catch (const MissingArtifactError& e) {
    std::fprintf(stderr, "missing artifact: %s\n", e.what());
    return kMissing;
  } catch (const NumericalError& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return kNumerical;
  }
  return kOk;
}
