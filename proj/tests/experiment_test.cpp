#include <gtest/gtest.h>

#include <fstream>
#include <set>
#include <sstream>

#include "umt/common.hpp"
#include "umt/experiment.hpp"

namespace fs = std::filesystem;
using namespace umt;
using nlohmann::json;

namespace {

fs::path temp_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("umt_experiment_test_" + name);
  fs::remove_all(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string config_error(const std::function<void()>& f) {
  try {
    f();
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "<no error>";
}

ExperimentConfig tiny_config(const fs::path& out) {
  ExperimentConfig c = config_from_text(R"(
[data]
n_source = 12
n_target = 12
n_eval = 6
seed = 5

[train]
total_steps = 12
decay_step = 8
checkpoint_every = 5
threshold = 0.2
warmup_fraction = 0.0

[eval]
dump_images = 2
)");
  c.out = out;
  return c;
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(slurp(p));
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    rows.push_back(cells);
  }
  return rows;
}

}  // namespace

TEST(Toml, ParsesValues) {
  const auto doc = parse_toml(R"(
top = 1
[a]
i = -3          # comment
f = 2.5e-1
b = true
s = "x # not a comment \"q\""
arr = [1, 2.0, "z",]
)",
                              "t");
  EXPECT_EQ(std::get<std::int64_t>(doc.at("").at("top").v), 1);
  const auto& a = doc.at("a");
  EXPECT_EQ(std::get<std::int64_t>(a.at("i").v), -3);
  EXPECT_DOUBLE_EQ(std::get<double>(a.at("f").v), 0.25);
  EXPECT_TRUE(std::get<bool>(a.at("b").v));
  EXPECT_EQ(std::get<std::string>(a.at("s").v), "x # not a comment \"q\"");
  EXPECT_EQ(std::get<TomlValue::Array>(a.at("arr").v).size(), 3u);
  EXPECT_EQ(a.at("f").line, 5);
}

TEST(Toml, ErrorsCarryLineNumbers) {
  EXPECT_EQ(config_error([] { parse_toml("[a]\nx = 1\nx = 2\n", "f.toml"); }).rfind("f.toml:3:", 0), 0u);
  EXPECT_EQ(config_error([] { parse_toml("[a]\n\ny = \"open\n", "f.toml"); }).rfind("f.toml:3:", 0), 0u);
  EXPECT_EQ(config_error([] { parse_toml("x = [1, [2]]\n", "f.toml"); }).rfind("f.toml:1:", 0), 0u);
  EXPECT_EQ(config_error([] { parse_toml("[a]\n[a]\n", "f.toml"); }).rfind("f.toml:2:", 0), 0u);
  EXPECT_EQ(config_error([] { parse_toml("z = nope\n", "f.toml"); }).rfind("f.toml:1:", 0), 0u);
}

TEST(Config, DefaultsRoundTrip) {
  const ExperimentConfig d;
  const auto parsed = config_from_text(default_config_text());
  EXPECT_EQ(parsed.canonical(), d.canonical());
  EXPECT_EQ(parsed.digest(), d.digest());
  EXPECT_DOUBLE_EQ(parsed.train.alpha, 0.99);
  EXPECT_DOUBLE_EQ(parsed.train.lambda, 0.01);
  EXPECT_DOUBLE_EQ(parsed.train.threshold, 0.8);
}

TEST(Config, CanonicalRoundTripOfEditedConfig) {
  auto c = config_from_text("[train]\nvariant = \"UMT_SC\"\nlambda = 0.3\n[experiment]\nseeds = [4, 9]\n");
  EXPECT_EQ(c.train.variant, Variant::UMT_SC);
  EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{4, 9}));
  EXPECT_EQ(config_from_text(c.canonical()).canonical(), c.canonical());
  EXPECT_NE(c.digest(), ExperimentConfig{}.digest());
}

TEST(Config, NegativeLambdaNamesField) {
  const auto msg = config_error([] { config_from_text("[train]\n\nlambda = -1\n", "run.toml"); });
  EXPECT_NE(msg.find("lambda"), std::string::npos) << msg;
  EXPECT_NE(msg.find("run.toml:3"), std::string::npos) << msg;
}

TEST(Config, UnknownKeysAndSectionsRejected) {
  auto msg = config_error([] { config_from_text("[train]\nlamda = 1\n", "c"); });
  EXPECT_NE(msg.find("c:2"), std::string::npos) << msg;
  EXPECT_NE(msg.find("lamda"), std::string::npos) << msg;
  msg = config_error([] { config_from_text("[trian]\n", "c"); });
  EXPECT_NE(msg.find("trian"), std::string::npos) << msg;
  msg = config_error([] { config_from_text("lambda = 1\n", "c"); });
  EXPECT_NE(msg.find("c:1"), std::string::npos) << msg;
}

TEST(Config, TypeAndChoiceErrors) {
  auto msg = config_error([] { config_from_text("[train]\ntotal_steps = \"many\"\n", "c"); });
  EXPECT_NE(msg.find("total_steps"), std::string::npos) << msg;
  msg = config_error([] { config_from_text("[train]\nvariant = \"UMT_X\"\n", "c"); });
  EXPECT_NE(msg.find("UMT_SCA"), std::string::npos) << msg;
  msg = config_error([] { config_from_text("[eval]\nlocalization_rule = \"best\"\n", "c"); });
  EXPECT_NE(msg.find("localization_rule"), std::string::npos) << msg;
  msg = config_error([] { config_from_text("[experiment]\nseeds = [1, -2]\n", "c"); });
  EXPECT_NE(msg.find("seeds"), std::string::npos) << msg;
}

TEST(Config, EnvironmentOverrides) {
  const auto c = config_from_text("[train]\nlambda = 0.5\n", "c",
                                  {{"UMT_TRAIN_LAMBDA", "0.25"}, {"UMT_TRAIN_VARIANT", "UMT_S"},
                                   {"UMT_EXPERIMENT_SEEDS", "[7]"}, {"UMT_EXPERIMENT_OUT", "elsewhere"}});
  EXPECT_DOUBLE_EQ(c.train.lambda, 0.25);
  EXPECT_EQ(c.train.variant, Variant::UMT_S);
  EXPECT_EQ(c.seeds, std::vector<std::uint64_t>{7});
  EXPECT_EQ(c.out, fs::path("elsewhere"));

  auto msg = config_error([] { config_from_text("", "c", {{"UMT_TRAIN_LAMDA", "1"}}); });
  EXPECT_NE(msg.find("UMT_TRAIN_LAMDA"), std::string::npos) << msg;
  msg = config_error([] { config_from_text("", "c", {{"UMT_TRAIN_LAMBDA", "-1"}}); });
  EXPECT_NE(msg.find("UMT_TRAIN_LAMBDA"), std::string::npos) << msg;
  EXPECT_NE(msg.find("lambda"), std::string::npos) << msg;
}

TEST(Config, ExplicitShiftOverridesPreset) {
  const auto c = config_from_text("[shift]\npreset = \"mild\"\nnoise_amplitude = 0.0\n");
  EXPECT_TRUE(c.shift_preset.empty());
  EXPECT_DOUBLE_EQ(c.shift.noise_amplitude, 0.0);
  EXPECT_EQ(c.shift.color_matrix, DomainShiftSpec::preset("mild").color_matrix);
  EXPECT_EQ(config_from_text(c.canonical()).canonical(), c.canonical());
  const auto p = config_from_text("[shift]\npreset = \"mild\"\n");
  EXPECT_EQ(p.shift_preset, "mild");
  EXPECT_NE(config_error([] { config_from_text("[shift]\npreset = \"wild\"\n"); }), "<no error>");
}

TEST(Config, ModelFollowsScene) {
  const auto c = config_from_text("[scene]\nnum_classes = 4\nheight = 48\nwidth = 40\n");
  EXPECT_EQ(c.model.num_classes, 4);
  EXPECT_EQ(c.model.image_height, 48);
  EXPECT_EQ(c.model.image_width, 40);
}

TEST(Config, MissingFile) {
  EXPECT_THROW(load_config("/nonexistent/umt.toml"), MissingArtifactError);
}

TEST(Median, Arithmetic) {
  EXPECT_DOUBLE_EQ(median({0.3}), 0.3);
  EXPECT_DOUBLE_EQ(median({0.5, 0.1, 0.3}), 0.3);
  EXPECT_DOUBLE_EQ(median({0.4, 0.1, 0.2, 0.9}), 0.3);
  EXPECT_THROW(median({}), ConfigError);
}

TEST(Ladder, TableWithFailedCell) {
  LadderTable t;
  t.seeds = {0, 1, 2};
  const double maps[5][3] = {{0.2, 0.4, 0.3}, {0.5, 0.1, 0.3}, {0.6, 0.6, 0.1}, {0.7, 0.2, 0.9}, {0.1, 0.0, 0.8}};
  for (std::size_t v = 0; v < kAllVariants.size(); ++v)
    for (std::uint64_t s = 0; s < 3; ++s) t.cells.push_back({kAllVariants[v], s, maps[v][s], ""});
  t.cells[14].map.reset();  // UMT seed 2
  t.cells[14].error = "boom";

  EXPECT_DOUBLE_EQ(*t.median(Variant::SourceOnly), 0.3);
  EXPECT_DOUBLE_EQ(*t.median(Variant::UMT_SC), 0.6);
  EXPECT_DOUBLE_EQ(*t.median(Variant::UMT), 0.05);

  const auto csv = t.csv();
  EXPECT_NE(csv.find("variant,seed_0,seed_1,seed_2,median\n"), std::string::npos);
  EXPECT_NE(csv.find("UMT,0.1,0,,0.05\n"), std::string::npos) << csv;
  const auto md = t.markdown();
  EXPECT_NE(md.find("| UMT | 10.00 | 0.00 | failed | 5.00 |"), std::string::npos) << md;
}

TEST(Manifest, RefusesMissingArtifact) {
  const fs::path root = temp_dir("manifest");
  fs::create_directories(root);
  RunManifest m;
  m.artifacts = {"nope.txt"};
  EXPECT_THROW(m.write(root, root / "run_manifest.json"), MissingArtifactError);
  std::ofstream(root / "nope.txt") << "x";
  m.write(root, root / "run_manifest.json");
  const auto j = json::parse(slurp(root / "run_manifest.json"));
  EXPECT_EQ(j["artifacts"][0], "nope.txt");
  EXPECT_EQ(j["code_version"], code_version());
}

// One small pipeline shared by the tests below.
class Pipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = temp_dir("pipeline");
    cfg_ = tiny_config(root_);
    cmd_gen_data(cfg_, false);
    cmd_train(cfg_, Variant::SourceOnly, 0, false, false);
    cmd_train(cfg_, Variant::UMT, 0, false, false);
  }
  static fs::path root_;
  static ExperimentConfig cfg_;
};
fs::path Pipeline::root_;
ExperimentConfig Pipeline::cfg_;

TEST_F(Pipeline, GenDataLayout) {
  const fs::path d = data_root(cfg_);
  for (const char* s : kSplitNames) EXPECT_TRUE(fs::exists(d / s / "annotations.jsonl")) << s;
  EXPECT_TRUE(fs::exists(d / "manifest.json"));
  EXPECT_TRUE(fs::exists(d / "run_manifest.json"));
  EXPECT_EQ(config_from_text(slurp(d / "config.toml")).canonical(), cfg_.canonical());
}

TEST_F(Pipeline, GenDataRefusesExistingWithoutForce) {
  EXPECT_THROW(cmd_gen_data(cfg_, false), ConfigError);
}

TEST_F(Pipeline, GenDataIsDeterministic) {
  auto other = cfg_;
  other.out = temp_dir("pipeline_again");
  cmd_gen_data(other, false);
  std::size_t compared = 0;
  for (const auto& e : fs::recursive_directory_iterator(data_root(cfg_))) {
    if (!e.is_regular_file() || e.path().filename() == "run_manifest.json" || e.path().filename() == "config.toml")
      continue;
    const auto rel = e.path().lexically_relative(data_root(cfg_));
    ASSERT_EQ(slurp(e.path()), slurp(data_root(other) / rel)) << rel;
    ++compared;
  }
  EXPECT_GT(compared, 100u);
}

TEST_F(Pipeline, SourceOnlyMetricsColumnsAreZero) {
  const auto rows = read_csv(train_dir(cfg_, Variant::SourceOnly, 0) / "metrics.csv");
  ASSERT_EQ(rows.size(), 1u + 12u);
  const auto& header = rows[0];
  for (const char* col : {"target_like_det", "distill", "confidence", "distill_weight", "pseudo_kept"}) {
    const auto it = std::find(header.begin(), header.end(), col);
    ASSERT_NE(it, header.end()) << col;
    const auto k = static_cast<std::size_t>(it - header.begin());
    for (std::size_t r = 1; r < rows.size(); ++r) EXPECT_EQ(std::stod(rows[r][k]), 0.0) << col << " row " << r;
  }
  const auto rows_umt = read_csv(train_dir(cfg_, Variant::UMT, 0) / "metrics.csv");
  const auto k = static_cast<std::size_t>(
      std::find(rows_umt[0].begin(), rows_umt[0].end(), "confidence") - rows_umt[0].begin());
  EXPECT_GT(std::stod(rows_umt[1][k]), 0.0);
}

TEST_F(Pipeline, TrainRefusesExistingRun) {
  EXPECT_THROW(cmd_train(cfg_, Variant::UMT, 0, false, false), ConfigError);
}

TEST_F(Pipeline, TrainWithoutDataIsMissingArtifact) {
  auto other = cfg_;
  other.out = temp_dir("pipeline_nodata");
  try {
    cmd_train(other, Variant::UMT, 0, false, false);
    FAIL();
  } catch (const MissingArtifactError& e) {
    EXPECT_NE(std::string(e.what()).find("gen-data"), std::string::npos);
  }
}

TEST_F(Pipeline, EvalReportShape) {
  EvalOptions opt;
  opt.checkpoint = train_dir(cfg_, Variant::UMT, 0) / "checkpoint.bin";
  opt.out_dir = root_ / "eval_shape";
  opt.sweep = std::vector<double>{0.5, 0.7, 0.9};
  opt.error_analysis = true;
  opt.dump_images = 2;
  const auto r = cmd_eval(cfg_, opt);
  const auto report = json::parse(slurp(r.dir / "report.json"));
  EXPECT_TRUE(report.contains("map"));
  EXPECT_EQ(report["per_class"].size(), static_cast<std::size_t>(cfg_.scene.num_classes));
  const auto sweep = read_csv(r.dir / "sweep.csv");
  ASSERT_EQ(sweep.size(), 4u);
  EXPECT_EQ(sweep[1][0], "0.5");
  EXPECT_EQ(sweep[3][0], "0.9");
  EXPECT_EQ(read_csv(r.dir / "per_class.csv").size(), 1u + cfg_.scene.num_classes);
  EXPECT_TRUE(fs::exists(r.dir / "images"));
  ASSERT_TRUE(r.report.localization);
  const auto& l = *r.report.localization;
  if (l.total > 0) EXPECT_NEAR(l.correct + l.mislocalized + l.background + l.misclassified, 1.0, 1e-9);
  EXPECT_EQ(r.report.dataset_id.rfind("target_test@", 0), 0u);
}

TEST_F(Pipeline, EvalBiasDiagnosticShape) {
  EvalOptions opt;
  opt.checkpoint = train_dir(cfg_, Variant::UMT, 0) / "checkpoint.bin";
  opt.out_dir = root_ / "eval_bias";
  opt.bias_diagnostic = true;
  const auto r = cmd_eval(cfg_, opt);
  ASSERT_TRUE(r.bias);
  const auto b = json::parse(slurp(r.dir / "bias.json"));
  EXPECT_DOUBLE_EQ(b["map_target"].get<double>(), r.bias->map_target);
  EXPECT_DOUBLE_EQ(b["difference"].get<double>(), r.bias->map_source_like - r.bias->map_target);
  EXPECT_DOUBLE_EQ(r.bias->map_target, r.report.map);
}

TEST_F(Pipeline, EvalRefusesArchitectureMismatch) {
  auto other = cfg_;
  other.model.roi_hidden += 8;
  EvalOptions opt;
  opt.checkpoint = train_dir(cfg_, Variant::UMT, 0) / "checkpoint.bin";
  opt.out_dir = root_ / "eval_mismatch";
  const auto msg = config_error([&] { cmd_eval(other, opt); });
  EXPECT_NE(msg.find("digest"), std::string::npos) << msg;
  EXPECT_NE(msg.find("checkpoint "), std::string::npos) << msg;
  EXPECT_NE(msg.find("config "), std::string::npos) << msg;
}

TEST_F(Pipeline, EveryFileInExactlyOneManifest) {
  auto cfg = cfg_;
  cfg.out = temp_dir("pipeline_manifests");
  cmd_gen_data(cfg, false);
  cmd_train(cfg, Variant::UMT_S, 1, false, false);
  EvalOptions opt;
  opt.checkpoint = train_dir(cfg, Variant::UMT_S, 1) / "checkpoint.bin";
  opt.sweep = std::vector<double>{};
  opt.bias_diagnostic = true;
  opt.dump_images = 1;
  cmd_eval(cfg, opt);
  cmd_translate(cfg, data_root(cfg), "target_test", cfg.out / "translated", true, false);

  std::multiset<std::string> referenced;
  std::set<std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(cfg.out)) {
    if (!e.is_regular_file()) continue;
    const auto rel = e.path().lexically_relative(cfg.out).generic_string();
    if (e.path().filename() != "run_manifest.json") {
      files.insert(rel);
      continue;
    }
    const auto j = json::parse(slurp(e.path()));
    // translate writes a standalone split, so its paths are relative to that split
    const fs::path base = j["command"].get<std::string>().rfind("translate", 0) == 0
                              ? e.path().parent_path().lexically_relative(cfg.out)
                              : fs::path();
    for (const auto& a : j["artifacts"]) referenced.insert((base / a.get<std::string>()).generic_string());
  }
  for (const auto& f : files) EXPECT_EQ(referenced.count(f), 1u) << f;
  for (const auto& r : referenced) EXPECT_TRUE(files.count(r)) << r;
}

TEST_F(Pipeline, TranslateRoundTripKeepsAnnotations) {
  const fs::path out = root_ / "translated";
  cmd_translate(cfg_, data_root(cfg_), "target_test", out, true, false);
  EXPECT_THROW(cmd_translate(cfg_, data_root(cfg_), "target_test", out, true, false), ConfigError);
  const auto a = load_split(data_root(cfg_), "target_test");
  const auto b = load_split(out.parent_path(), out.filename().string());
  ASSERT_EQ(a.scenes.size(), b.scenes.size());
  for (std::size_t i = 0; i < a.scenes.size(); ++i) {
    EXPECT_EQ(a.scenes[i].boxes, b.scenes[i].boxes);
    EXPECT_EQ(a.scenes[i].classes, b.scenes[i].classes);
  }
}

TEST_F(Pipeline, AblationOneSeedGivesFiveRows) {
  auto cfg = cfg_;
  cfg.train.total_steps = 4;
  cfg.train.decay_step = 2;
  std::vector<std::string> log;
  const auto t = cmd_ablation(cfg, {3}, true, [&](const std::string& l) { log.push_back(l); });
  ASSERT_EQ(t.cells.size(), 5u);
  EXPECT_EQ(log.size(), 5u);
  for (const auto& c : t.cells) EXPECT_TRUE(c.map) << to_string(c.variant) << ": " << c.error;
  const auto rows = read_csv(cfg.out / "ablation" / "ladder.csv");
  ASSERT_EQ(rows.size(), 6u);
  EXPECT_EQ(rows[5][0], "UMT");
  EXPECT_DOUBLE_EQ(std::stod(rows[5][1]), *t.cells[4].map);
  EXPECT_DOUBLE_EQ(std::stod(rows[5][2]), *t.cells[4].map);
  EXPECT_TRUE(fs::exists(cfg.out / "ablation" / "ladder.md"));
  EXPECT_TRUE(fs::exists(cfg.out / "ablation" / "UMT" / "seed_3" / "eval" / "sweep.csv"));
}
