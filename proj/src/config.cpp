#include "umt/config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>

#include "umt/common.hpp"

extern char** environ;

namespace umt {

namespace {

[[noreturn]] void fail_at(const std::string& source, int line, const std::string& what) {
  throw ConfigError(source + ":" + std::to_string(line) + ": " + what);
}

std::string trim(std::string_view s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return std::string(s.substr(a, b - a));
}

// Cuts a trailing comment, leaving '#' inside strings alone.
std::string strip_comment(const std::string& line) {
  bool in_string = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"' && (i == 0 || line[i - 1] != '\\')) in_string = !in_string;
    if (line[i] == '#' && !in_string) return line.substr(0, i);
  }
  return line;
}

bool bare_key(const std::string& k) {
  if (k.empty()) return false;
  return std::all_of(k.begin(), k.end(), [](char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-'; });
}

class ValueParser {
 public:
  ValueParser(std::string_view text, const std::string& source, int line) : s_(text), source_(source), line_(line) {}

  TomlValue parse_all() {
    TomlValue v = parse();
    skip_ws();
    if (pos_ != s_.size()) fail("unexpected trailing text '" + std::string(s_.substr(pos_)) + "'");
    return v;
  }

 private:
  std::string_view s_;
  const std::string& source_;
  int line_;
  std::size_t pos_ = 0;

  [[noreturn]] void fail(const std::string& what) { fail_at(source_, line_, what); }

  void skip_ws() {
    while (pos_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[pos_]))) ++pos_;
  }

  TomlValue parse() {
    skip_ws();
    if (pos_ >= s_.size()) fail("missing value");
    TomlValue out;
    out.line = line_;
    const char c = s_[pos_];
    if (c == '"') {
      out.v = parse_string();
    } else if (c == '[') {
      ++pos_;
      TomlValue::Array arr;
      skip_ws();
      if (pos_ < s_.size() && s_[pos_] == ']') {
        ++pos_;
      } else {
        for (;;) {
          TomlValue item = parse();
          if (std::holds_alternative<TomlValue::Array>(item.v)) fail("nested arrays are not supported");
          arr.push_back(std::move(item));
          skip_ws();
          if (pos_ >= s_.size()) fail("unterminated array");
          if (s_[pos_] == ',') {
            ++pos_;
            skip_ws();
            if (pos_ < s_.size() && s_[pos_] == ']') {
              ++pos_;
              break;
            }
            continue;
          }
          if (s_[pos_] == ']') {
            ++pos_;
            break;
          }
          fail("expected ',' or ']' in array");
        }
      }
      out.v = std::move(arr);
    } else {
      std::size_t end = pos_;
      while (end < s_.size() && s_[end] != ',' && s_[end] != ']' && !std::isspace(static_cast<unsigned char>(s_[end])))
        ++end;
      std::string tok(s_.substr(pos_, end - pos_));
      pos_ = end;
      out.v = scalar(tok);
    }
    return out;
  }

  std::string parse_string() {
    ++pos_;
    std::string out;
    while (pos_ < s_.size() && s_[pos_] != '"') {
      char c = s_[pos_++];
      if (c == '\\') {
        if (pos_ >= s_.size()) break;
        const char e = s_[pos_++];
        switch (e) {
          case 'n': c = '\n'; break;
          case 't': c = '\t'; break;
          case '"': c = '"'; break;
          case '\\': c = '\\'; break;
          default: fail(std::string("unsupported escape \\") + e);
        }
      }
      out += c;
    }
    if (pos_ >= s_.size()) fail("unterminated string");
    ++pos_;
    return out;
  }

  std::variant<bool, std::int64_t, double, std::string, TomlValue::Array> scalar(const std::string& tok) {
    if (tok == "true") return true;
    if (tok == "false") return false;
    std::string t;
    for (char c : tok)
      if (c != '_') t += c;
    const bool floaty = t.find_first_of(".eE") != std::string::npos || t == "inf" || t == "+inf" || t == "nan";
    if (!floaty) {
      std::int64_t i = 0;
      const char* b = t.data() + (!t.empty() && t[0] == '+' ? 1 : 0);
      auto [p, ec] = std::from_chars(b, t.data() + t.size(), i);
      if (ec == std::errc() && p == t.data() + t.size() && !t.empty()) return i;
    } else {
      char* end = nullptr;
      const double d = std::strtod(t.c_str(), &end);
      if (!t.empty() && end == t.c_str() + t.size()) return d;
    }
    fail("cannot parse value '" + tok + "' (strings need double quotes)");
  }
};

}  // namespace

TomlValue parse_toml_value(const std::string& text, const std::string& source, int line) {
  return ValueParser(text, source, line).parse_all();
}

TomlDocument parse_toml(const std::string& text, const std::string& source) {
  TomlDocument doc;
  std::string section;
  doc[section];
  std::istringstream in(text);
  std::string raw;
  int line = 0;
  while (std::getline(in, raw)) {
    ++line;
    const std::string l = trim(strip_comment(raw));
    if (l.empty()) continue;
    if (l.front() == '[') {
      if (l.back() != ']' || l.size() < 3) fail_at(source, line, "malformed section header");
      section = trim(std::string_view(l).substr(1, l.size() - 2));
      if (!bare_key(section)) fail_at(source, line, "invalid section name '" + section + "'");
      if (doc.count(section) && section != "") fail_at(source, line, "section [" + section + "] appears twice");
      doc[section];
      continue;
    }
    const auto eq = l.find('=');
    if (eq == std::string::npos) fail_at(source, line, "expected 'key = value'");
    const std::string key = trim(std::string_view(l).substr(0, eq));
    if (!bare_key(key)) fail_at(source, line, "invalid key '" + key + "'");
    auto& sec = doc[section];
    if (sec.count(key)) fail_at(source, line, "duplicate key '" + key + "'");
    sec[key] = parse_toml_value(l.substr(eq + 1), source, line);
  }
  return doc;
}

void EvalConfig::validate() const {
  if (!(iou_threshold > 0.0 && iou_threshold < 1.0)) throw ConfigError("eval.iou_threshold: must be in (0, 1)");
  if (sweep.empty()) throw ConfigError("eval.sweep: must not be empty");
  for (std::size_t i = 0; i < sweep.size(); ++i) {
    if (!(sweep[i] > 0.0 && sweep[i] < 1.0)) throw ConfigError("eval.sweep: thresholds must lie in (0, 1)");
    if (i > 0 && !(sweep[i] > sweep[i - 1])) throw ConfigError("eval.sweep: thresholds must ascend");
  }
  if (dump_images < 0) throw ConfigError("eval.dump_images: must be >= 0");
  if (!(bias_epsilon >= 0.0)) throw ConfigError("eval.bias_epsilon: must be >= 0");
}

void ExperimentConfig::validate() const {
  scene.validate();
  shift.validate();
  if (counts.n_source < 1) throw ConfigError("data.n_source: must be >= 1");
  if (counts.n_target < 1) throw ConfigError("data.n_target: must be >= 1");
  if (counts.n_eval < 1) throw ConfigError("data.n_eval: must be >= 1");
  model.validate();
  train.validate();
  eval.validate();
  if (seeds.empty()) throw ConfigError("experiment.seeds: must not be empty");
  if (out.empty()) throw ConfigError("experiment.out: must not be empty");
}

namespace {

std::string fmt(double v) {
  char buf[40];
  const auto r = std::to_chars(buf, buf + sizeof(buf), v);  // shortest round-trip form
  std::string s(buf, r.ptr);
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}

template <typename T>
std::string list(const T& values, std::function<std::string(typename T::value_type)> f) {
  std::string s = "[";
  for (std::size_t i = 0; i < values.size(); ++i) s += (i ? ", " : "") + f(values[i]);
  return s + "]";
}

std::string doubles(const auto& v) {
  std::vector<double> d(v.begin(), v.end());
  return list<std::vector<double>>(d, [](double x) { return fmt(x); });
}

}  // namespace

std::string ExperimentConfig::canonical() const {
  std::ostringstream os;
  const auto& s = scene;
  os << "[scene]\nheight = " << s.height << "\nwidth = " << s.width << "\nnum_classes = " << s.num_classes
     << "\nmin_objects = " << s.min_objects << "\nmax_objects = " << s.max_objects << "\nmin_size = " << fmt(s.min_size)
     << "\nmax_size = " << fmt(s.max_size) << "\nbackground = \"" << s.background
     << "\"\nmax_overlap_iou = " << fmt(s.max_overlap_iou) << "\n\n";
  os << "[shift]\n";
  if (!shift_preset.empty())
    os << "preset = \"" << shift_preset << "\"\n\n";
  else
    os << "color_matrix = " << doubles(shift.color_matrix) << "\noffset = " << doubles(shift.offset)
       << "\nnoise_amplitude = " << fmt(shift.noise_amplitude) << "\ntexture_id = " << shift.texture_id
       << "\ntexture_strength = " << fmt(shift.texture_strength) << "\nepsilon = " << fmt(shift.epsilon) << "\n\n";
  os << "[data]\nn_source = " << counts.n_source << "\nn_target = " << counts.n_target << "\nn_eval = " << counts.n_eval
     << "\nseed = " << data_seed << "\n\n";
  const auto& m = model;
  os << "[model]\nconv1_channels = " << m.conv1_channels << "\nconv2_channels = " << m.conv2_channels
     << "\nconv3_channels = " << m.conv3_channels << "\nroi_pool = " << m.roi_pool << "\nroi_hidden = " << m.roi_hidden
     << "\nanchor_sizes = " << doubles(m.anchor_sizes) << "\nanchor_ratios = " << doubles(m.anchor_ratios)
     << "\ntop_k = " << m.top_k << "\nrpn_nms_iou = " << fmt(m.rpn_nms_iou)
     << "\nrpn_positive_iou = " << fmt(m.rpn_positive_iou) << "\nrpn_negative_iou = " << fmt(m.rpn_negative_iou)
     << "\nroi_foreground_iou = " << fmt(m.roi_foreground_iou) << "\n\n";
  const auto& t = train;
  os << "[train]\nvariant = \"" << to_string(t.variant) << "\"\nlambda = " << fmt(t.lambda) << "\ngamma = " << fmt(t.gamma)
     << "\nthreshold = " << fmt(t.threshold) << "\nalpha = " << fmt(t.alpha) << "\nlr1 = " << fmt(t.lr1)
     << "\nlr2 = " << fmt(t.lr2) << "\ndecay_step = " << t.decay_step << "\ntotal_steps = " << t.total_steps
     << "\nmomentum = " << fmt(t.momentum) << "\ngrad_clip = " << fmt(t.grad_clip)
     << "\nwarmup_fraction = " << fmt(t.warmup_fraction) << "\nnms_iou = " << fmt(t.nms_iou)
     << "\ncheckpoint_every = " << t.checkpoint_every << "\n\n";
  const auto& a = t.augment;
  os << "[augment]\ncrop_fraction = " << fmt(a.crop_fraction) << "\npad_fraction = " << fmt(a.pad_fraction)
     << "\nbrightness = " << fmt(a.brightness) << "\ncontrast = " << fmt(a.contrast) << "\nsaturation = "
     << fmt(a.saturation) << "\nhue = " << fmt(a.hue) << "\n\n";
  os << "[eval]\niou_threshold = " << fmt(eval.iou_threshold) << "\nsweep = " << doubles(eval.sweep)
     << "\nlocalization_rule = \"" << to_string(eval.localization_rule) << "\"\ndump_images = " << eval.dump_images
     << "\nbias_epsilon = " << fmt(eval.bias_epsilon) << "\n\n";
  os << "[experiment]\nout = \"" << out.generic_string() << "\"\nseeds = "
     << list<std::vector<std::uint64_t>>(seeds, [](std::uint64_t x) { return std::to_string(x); }) << "\n";
  return os.str();
}

std::uint64_t ExperimentConfig::digest() const { return fnv1a64(canonical()); }

std::string default_config_text() { return ExperimentConfig{}.canonical(); }

namespace {

struct Entry {
  TomlValue value;
  std::string where;
};

struct Ctx {
  const std::string& field;
  const Entry& e;

  [[noreturn]] void fail(const std::string& what) const {
    throw ConfigError(e.where + ": " + field + ": " + what);
  }
  double number() const {
    if (auto* i = std::get_if<std::int64_t>(&e.value.v)) return static_cast<double>(*i);
    if (auto* d = std::get_if<double>(&e.value.v)) return *d;
    fail("expected a number");
  }
  std::int64_t integer() const {
    if (auto* i = std::get_if<std::int64_t>(&e.value.v)) return *i;
    fail("expected an integer");
  }
  int int32() const {
    const auto i = integer();
    if (i < -2147483647 || i > 2147483647) fail("integer out of range");
    return static_cast<int>(i);
  }
  std::uint64_t uint() const {
    const auto i = integer();
    if (i < 0) fail("must be >= 0");
    return static_cast<std::uint64_t>(i);
  }
  std::string string() const {
    if (auto* s = std::get_if<std::string>(&e.value.v)) return *s;
    fail("expected a string");
  }
  std::vector<double> numbers() const {
    auto* a = std::get_if<TomlValue::Array>(&e.value.v);
    if (!a) fail("expected an array of numbers");
    std::vector<double> out;
    for (const auto& x : *a) {
      if (!x.is_number()) fail("expected an array of numbers");
      out.push_back(std::holds_alternative<double>(x.v) ? std::get<double>(x.v)
                                                        : static_cast<double>(std::get<std::int64_t>(x.v)));
    }
    return out;
  }
  template <std::size_t N>
  std::array<double, N> fixed() const {
    const auto v = numbers();
    if (v.size() != N) fail("expected " + std::to_string(N) + " numbers");
    std::array<double, N> out{};
    std::copy(v.begin(), v.end(), out.begin());
    return out;
  }
};

using Setter = std::function<void(ExperimentConfig&, const Ctx&)>;
using Schema = std::map<std::string, std::map<std::string, Setter>>;

const Schema& schema() {
  static const Schema s = [] {
    Schema m;
    auto& scene = m["scene"];
    scene["height"] = [](ExperimentConfig& c, const Ctx& x) { c.scene.height = x.int32(); };
    scene["width"] = [](ExperimentConfig& c, const Ctx& x) { c.scene.width = x.int32(); };
    scene["num_classes"] = [](ExperimentConfig& c, const Ctx& x) { c.scene.num_classes = x.int32(); };
    scene["min_objects"] = [](ExperimentConfig& c, const Ctx& x) { c.scene.min_objects = x.int32(); };
    scene["max_objects"] = [](ExperimentConfig& c, const Ctx& x) { c.scene.max_objects = x.int32(); };
    scene["min_size"] = [](ExperimentConfig& c, const Ctx& x) { c.scene.min_size = x.number(); };
    scene["max_size"] = [](ExperimentConfig& c, const Ctx& x) { c.scene.max_size = x.number(); };
    scene["background"] = [](ExperimentConfig& c, const Ctx& x) { c.scene.background = x.string(); };
    scene["max_overlap_iou"] = [](ExperimentConfig& c, const Ctx& x) { c.scene.max_overlap_iou = x.number(); };

    auto& shift = m["shift"];
    shift["preset"] = [](ExperimentConfig& c, const Ctx& x) {
      c.shift_preset = x.string();
      c.shift = DomainShiftSpec::preset(c.shift_preset);
    };
    // Explicit fields refine the preset; the config then no longer is one.
    shift["color_matrix"] = [](ExperimentConfig& c, const Ctx& x) { c.shift.color_matrix = x.fixed<9>(); c.shift_preset.clear(); };
    shift["offset"] = [](ExperimentConfig& c, const Ctx& x) { c.shift.offset = x.fixed<3>(); c.shift_preset.clear(); };
    shift["noise_amplitude"] = [](ExperimentConfig& c, const Ctx& x) { c.shift.noise_amplitude = x.number(); c.shift_preset.clear(); };
    shift["texture_id"] = [](ExperimentConfig& c, const Ctx& x) { c.shift.texture_id = x.int32(); c.shift_preset.clear(); };
    shift["texture_strength"] = [](ExperimentConfig& c, const Ctx& x) { c.shift.texture_strength = x.number(); c.shift_preset.clear(); };
    shift["epsilon"] = [](ExperimentConfig& c, const Ctx& x) { c.shift.epsilon = x.number(); c.shift_preset.clear(); };

    auto& data = m["data"];
    data["n_source"] = [](ExperimentConfig& c, const Ctx& x) { c.counts.n_source = x.int32(); };
    data["n_target"] = [](ExperimentConfig& c, const Ctx& x) { c.counts.n_target = x.int32(); };
    data["n_eval"] = [](ExperimentConfig& c, const Ctx& x) { c.counts.n_eval = x.int32(); };
    data["seed"] = [](ExperimentConfig& c, const Ctx& x) { c.data_seed = x.uint(); };

    auto& model = m["model"];
    model["conv1_channels"] = [](ExperimentConfig& c, const Ctx& x) { c.model.conv1_channels = x.int32(); };
    model["conv2_channels"] = [](ExperimentConfig& c, const Ctx& x) { c.model.conv2_channels = x.int32(); };
    model["conv3_channels"] = [](ExperimentConfig& c, const Ctx& x) { c.model.conv3_channels = x.int32(); };
    model["roi_pool"] = [](ExperimentConfig& c, const Ctx& x) { c.model.roi_pool = x.int32(); };
    model["roi_hidden"] = [](ExperimentConfig& c, const Ctx& x) { c.model.roi_hidden = x.int32(); };
    model["anchor_sizes"] = [](ExperimentConfig& c, const Ctx& x) { c.model.anchor_sizes = x.numbers(); };
    model["anchor_ratios"] = [](ExperimentConfig& c, const Ctx& x) { c.model.anchor_ratios = x.numbers(); };
    model["top_k"] = [](ExperimentConfig& c, const Ctx& x) { c.model.top_k = x.int32(); };
    model["rpn_nms_iou"] = [](ExperimentConfig& c, const Ctx& x) { c.model.rpn_nms_iou = x.number(); };
    model["rpn_positive_iou"] = [](ExperimentConfig& c, const Ctx& x) { c.model.rpn_positive_iou = x.number(); };
    model["rpn_negative_iou"] = [](ExperimentConfig& c, const Ctx& x) { c.model.rpn_negative_iou = x.number(); };
    model["roi_foreground_iou"] = [](ExperimentConfig& c, const Ctx& x) { c.model.roi_foreground_iou = x.number(); };

    auto& train = m["train"];
    train["variant"] = [](ExperimentConfig& c, const Ctx& x) {
      try {
        c.train.variant = variant_from_string(x.string());
      } catch (const ConfigError& e) {
        x.fail(e.what());
      }
    };
    train["lambda"] = [](ExperimentConfig& c, const Ctx& x) { c.train.lambda = x.number(); };
    train["gamma"] = [](ExperimentConfig& c, const Ctx& x) { c.train.gamma = x.number(); };
    train["threshold"] = [](ExperimentConfig& c, const Ctx& x) { c.train.threshold = x.number(); };
    train["alpha"] = [](ExperimentConfig& c, const Ctx& x) { c.train.alpha = x.number(); };
    train["lr1"] = [](ExperimentConfig& c, const Ctx& x) { c.train.lr1 = x.number(); };
    train["lr2"] = [](ExperimentConfig& c, const Ctx& x) { c.train.lr2 = x.number(); };
    train["decay_step"] = [](ExperimentConfig& c, const Ctx& x) { c.train.decay_step = x.int32(); };
    train["total_steps"] = [](ExperimentConfig& c, const Ctx& x) { c.train.total_steps = x.int32(); };
    train["momentum"] = [](ExperimentConfig& c, const Ctx& x) { c.train.momentum = x.number(); };
    train["grad_clip"] = [](ExperimentConfig& c, const Ctx& x) { c.train.grad_clip = x.number(); };
    train["warmup_fraction"] = [](ExperimentConfig& c, const Ctx& x) { c.train.warmup_fraction = x.number(); };
    train["nms_iou"] = [](ExperimentConfig& c, const Ctx& x) { c.train.nms_iou = x.number(); };
    train["checkpoint_every"] = [](ExperimentConfig& c, const Ctx& x) { c.train.checkpoint_every = x.int32(); };

    auto& aug = m["augment"];
    aug["crop_fraction"] = [](ExperimentConfig& c, const Ctx& x) { c.train.augment.crop_fraction = x.number(); };
    aug["pad_fraction"] = [](ExperimentConfig& c, const Ctx& x) { c.train.augment.pad_fraction = x.number(); };
    aug["brightness"] = [](ExperimentConfig& c, const Ctx& x) { c.train.augment.brightness = x.number(); };
    aug["contrast"] = [](ExperimentConfig& c, const Ctx& x) { c.train.augment.contrast = x.number(); };
    aug["saturation"] = [](ExperimentConfig& c, const Ctx& x) { c.train.augment.saturation = x.number(); };
    aug["hue"] = [](ExperimentConfig& c, const Ctx& x) { c.train.augment.hue = x.number(); };

    auto& ev = m["eval"];
    ev["iou_threshold"] = [](ExperimentConfig& c, const Ctx& x) { c.eval.iou_threshold = x.number(); };
    ev["sweep"] = [](ExperimentConfig& c, const Ctx& x) { c.eval.sweep = x.numbers(); };
    ev["localization_rule"] = [](ExperimentConfig& c, const Ctx& x) {
      try {
        c.eval.localization_rule = confident_rule_from_string(x.string());
      } catch (const ConfigError& e) {
        x.fail(e.what());
      }
    };
    ev["dump_images"] = [](ExperimentConfig& c, const Ctx& x) { c.eval.dump_images = x.int32(); };
    ev["bias_epsilon"] = [](ExperimentConfig& c, const Ctx& x) { c.eval.bias_epsilon = x.number(); };

    auto& ex = m["experiment"];
    ex["out"] = [](ExperimentConfig& c, const Ctx& x) { c.out = x.string(); };
    ex["seeds"] = [](ExperimentConfig& c, const Ctx& x) {
      c.seeds.clear();
      for (double d : x.numbers()) {
        if (d < 0 || d != std::floor(d)) x.fail("seeds must be non-negative integers");
        c.seeds.push_back(static_cast<std::uint64_t>(d));
      }
    };
    return m;
  }();
  return s;
}

std::string upper(std::string s) {
  for (char& c : s) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return s;
}

}  // namespace

ExperimentConfig config_from_document(const TomlDocument& doc, const std::string& source,
                                      const std::map<std::string, std::string>& env) {
  std::map<std::string, std::map<std::string, Entry>> merged;
  for (const auto& [section, keys] : doc) {
    if (section.empty()) {
      if (!keys.empty())
        fail_at(source, keys.begin()->second.line,
                "key '" + keys.begin()->first + "' must sit inside a section (scene, shift, data, model, train, "
                "augment, eval, experiment)");
      continue;
    }
    const auto sit = schema().find(section);
    if (sit == schema().end()) {
      int line = keys.empty() ? 0 : keys.begin()->second.line;
      fail_at(source, line, "unknown section [" + section + "]");
    }
    for (const auto& [key, value] : keys) {
      if (!sit->second.count(key)) fail_at(source, value.line, "unknown key '" + key + "' in [" + section + "]");
      merged[section][key] = {value, source + ":" + std::to_string(value.line)};
    }
  }

  for (const auto& [name, text] : env) {
    if (name.rfind("UMT_", 0) != 0) continue;
    bool matched = false;
    for (const auto& [section, keys] : schema()) {
      const std::string prefix = "UMT_" + upper(section) + "_";
      if (name.rfind(prefix, 0) != 0) continue;
      for (const auto& [key, setter] : keys) {
        if (name != prefix + upper(key)) continue;
        TomlValue v;
        try {
          v = parse_toml_value(text, name, 0);
        } catch (const ConfigError&) {
          v.v = text;  // bare words are strings
        }
        merged[section][key] = {v, "environment " + name};
        matched = true;
      }
    }
    if (!matched) throw ConfigError("environment " + name + ": no such config key");
  }

  ExperimentConfig cfg;
  std::map<std::string, std::string> where;
  auto apply = [&](const std::string& section, const std::string& key, const Entry& e) {
    const std::string field = section + "." + key;
    schema().at(section).at(key)(cfg, Ctx{field, e});
    where[field] = e.where;
  };
  // A preset must land before the explicit fields that refine it.
  if (merged.count("shift") && merged["shift"].count("preset")) apply("shift", "preset", merged["shift"]["preset"]);
  for (const auto& [section, keys] : merged)
    for (const auto& [key, e] : keys)
      if (!(section == "shift" && key == "preset")) apply(section, key, e);

  cfg.model.image_height = cfg.scene.height;
  cfg.model.image_width = cfg.scene.width;
  cfg.model.num_classes = cfg.scene.num_classes;
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    // Point at the line that set the field when the message names one.
    const std::string msg = e.what();
    const auto colon = msg.find(':');
    const auto it = colon == std::string::npos ? where.end() : where.find(msg.substr(0, colon));
    if (it != where.end()) throw ConfigError(it->second + ": " + msg);
    if (msg.rfind("model.image_", 0) == 0 || msg.rfind("model.num_classes", 0) == 0) {
      const std::string s = msg.find("num_classes") != std::string::npos ? "scene.num_classes" : "scene.height";
      if (where.count(s)) throw ConfigError(where[s] + ": " + msg);
    }
    throw;
  }
  return cfg;
}

ExperimentConfig config_from_text(const std::string& text, const std::string& source,
                                  const std::map<std::string, std::string>& env) {
  return config_from_document(parse_toml(text, source), source, env);
}

ExperimentConfig load_config(const std::filesystem::path& path, const std::map<std::string, std::string>& env) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError("config file not found: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return config_from_text(ss.str(), path.string(), env);
}

std::map<std::string, std::string> umt_environment() {
  std::map<std::string, std::string> out;
  for (char** e = environ; e && *e; ++e) {
    const std::string kv = *e;
    const auto eq = kv.find('=');
    if (eq == std::string::npos) continue;
    const std::string name = kv.substr(0, eq);
    if (name.rfind("UMT_", 0) == 0) out[name] = kv.substr(eq + 1);
  }
  return out;
}

}  // namespace umt
