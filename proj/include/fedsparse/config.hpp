#pragma once

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedsparse/dataset.hpp"
#include "fedsparse/detector.hpp"
#include "fedsparse/evaluation.hpp"
#include "fedsparse/federation.hpp"
#include "fedsparse/sparsifier.hpp"

namespace fedsparse {

/// Invalid configuration. `line()` is the 1-based line in the config file, or 0
/// when the problem comes from a default value or a command-line override.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string where, std::size_t line, const std::string& message)
      : std::runtime_error(format(where, line, message)), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  static std::string format(const std::string& where, std::size_t line, const std::string& message) {
    if (where.empty()) return message;
    return line > 0 ? where + ":" + std::to_string(line) + ": " + message : where + ": " + message;
  }
  std::size_t line_;
};

struct ExperimentConfig {
  Method method = Method::SFedWeg;
  std::size_t rounds = 15;
  std::size_t local_epochs = 5;
  std::size_t batch_size = 16;
  double learning_rate = 0.02;
  double lambda = 1e-4;
  std::vector<double> sparsity{0.2, 0.3, 0.4};
  double sampling_fraction = 1.0;
  std::uint64_t seed = 1;
  bool parallel = true;
  std::string out;  // empty: runs/<method>

  DetectorConfig detector;
  LossConfig loss;
  EvalOptions eval;

  SceneSpec scene;
  std::size_t train_images = 600;
  std::size_t test_images = 150;
  std::string data_dir;  // load gen-data output instead of generating in memory
  std::size_t histogram_bins = 20;

  std::size_t client_count() const { return sparsity.size(); }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <class T>
T parse_integer(const std::string& text, const std::string& key) {
  T v{};
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc{} || ptr != end) throw std::invalid_argument(key + ": expected a non-negative integer, got '" + text + "'");
  return v;
}

inline double parse_double(const std::string& text, const std::string& key) {
  std::size_t pos = 0;
  double v = 0.0;
  try {
    v = std::stod(text, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos == 0 || pos != text.size() || !std::isfinite(v)) {
    throw std::invalid_argument(key + ": expected a number, got '" + text + "'");
  }
  return v;
}

inline bool parse_bool(const std::string& text, const std::string& key) {
  if (text == "true" || text == "1" || text == "yes") return true;
  if (text == "false" || text == "0" || text == "no") return false;
  throw std::invalid_argument(key + ": expected true or false, got '" + text + "'");
}

inline std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> items;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) items.push_back(trim(item));
  return items;
}

template <class T, class F>
std::vector<T> parse_list(const std::string& text, const std::string& key, F parse_one) {
  std::vector<T> out;
  for (const auto& item : split_list(text)) {
    if (item.empty()) throw std::invalid_argument(key + ": empty list element in '" + text + "'");
    out.push_back(parse_one(item, key));
  }
  return out;
}

template <class T>
std::string join(const std::vector<T>& values) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i > 0) out += ",";
    if constexpr (std::is_floating_point_v<T>) {
      out += format_double(values[i]);
    } else {
      out += std::to_string(values[i]);
    }
  }
  return out;
}

}  // namespace detail

/// Every recognised key, in canonical order.
inline const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys{
      "method",        "rounds",          "local_epochs",    "batch_size",      "learning_rate",
      "lambda",        "sparsity",        "clients",         "sampling_fraction", "seed",
      "parallel",      "out",             "grid_size",       "boxes_per_cell",  "channel_widths",
      "image_size",    "lambda_coord",    "lambda_cls",      "lambda_conf",     "lambda_noobj",
      "iou_confidence_target", "conf_threshold", "nms_threshold", "train_images", "test_images",
      "min_objects",   "max_objects",     "min_object_size", "max_object_size", "noise",
      "data_seed",     "data_dir",        "histogram_bins"};
  return keys;
}

/// Sets one field from its textual value. Throws std::invalid_argument on bad input.
inline void set_config_value(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
  using namespace detail;
  auto size = [&](const std::string& v) { return parse_integer<std::size_t>(v, key); };
  auto real = [&](const std::string& v) { return parse_double(v, key); };
  if (key == "method") {
    cfg.method = parse_method(value);
  } else if (key == "rounds") {
    cfg.rounds = size(value);
  } else if (key == "local_epochs") {
    cfg.local_epochs = size(value);
  } else if (key == "batch_size") {
    cfg.batch_size = size(value);
  } else if (key == "learning_rate") {
    cfg.learning_rate = real(value);
  } else if (key == "lambda") {
    cfg.lambda = real(value);
  } else if (key == "sparsity") {
    cfg.sparsity = parse_list<double>(value, key, parse_double);
  } else if (key == "clients") {
    if (size(value) != cfg.sparsity.size()) {
      throw std::invalid_argument("clients = " + value + " but sparsity lists " + std::to_string(cfg.sparsity.size()) +
                                  " rates");
    }
  } else if (key == "sampling_fraction") {
    cfg.sampling_fraction = real(value);
  } else if (key == "seed") {
    cfg.seed = parse_integer<std::uint64_t>(value, key);
  } else if (key == "parallel") {
    cfg.parallel = parse_bool(value, key);
  } else if (key == "out") {
    cfg.out = value;
  } else if (key == "grid_size") {
    cfg.detector.grid_size = size(value);
    cfg.scene.grid_size = cfg.detector.grid_size;
  } else if (key == "boxes_per_cell") {
    cfg.detector.boxes_per_cell = size(value);
  } else if (key == "channel_widths") {
    cfg.detector.channel_widths = parse_list<std::size_t>(value, key, parse_integer<std::size_t>);
  } else if (key == "image_size") {
    const std::size_t px = size(value);
    cfg.detector.input_height = cfg.detector.input_width = px;
    cfg.scene.image_height = cfg.scene.image_width = px;
  } else if (key == "lambda_coord") {
    cfg.loss.lambda_coord = real(value);
  } else if (key == "lambda_cls") {
    cfg.loss.lambda_cls = real(value);
  } else if (key == "lambda_conf") {
    cfg.loss.lambda_conf = real(value);
  } else if (key == "lambda_noobj") {
    cfg.loss.lambda_noobj = real(value);
  } else if (key == "iou_confidence_target") {
    cfg.loss.iou_confidence_target = parse_bool(value, key);
  } else if (key == "conf_threshold") {
    cfg.eval.conf_threshold = real(value);
  } else if (key == "nms_threshold") {
    cfg.eval.nms_threshold = real(value);
  } else if (key == "train_images") {
    cfg.train_images = size(value);
  } else if (key == "test_images") {
    cfg.test_images = size(value);
  } else if (key == "min_objects") {
    cfg.scene.min_objects = size(value);
  } else if (key == "max_objects") {
    cfg.scene.max_objects = size(value);
  } else if (key == "min_object_size") {
    cfg.scene.min_size = real(value);
  } else if (key == "max_object_size") {
    cfg.scene.max_size = real(value);
  } else if (key == "noise") {
    cfg.scene.noise = real(value);
  } else if (key == "data_seed") {
    cfg.scene.seed = parse_integer<std::uint64_t>(value, key);
  } else if (key == "data_dir") {
    cfg.data_dir = value;
  } else if (key == "histogram_bins") {
    cfg.histogram_bins = size(value);
  } else {
    throw std::invalid_argument("unknown key '" + key + "'");
  }
}

/// Canonical textual value of `key`.
inline std::string get_config_value(const ExperimentConfig& cfg, const std::string& key) {
  using detail::format_double;
  if (key == "method") return method_name(cfg.method);
  if (key == "rounds") return std::to_string(cfg.rounds);
  if (key == "local_epochs") return std::to_string(cfg.local_epochs);
  if (key == "batch_size") return std::to_string(cfg.batch_size);
  if (key == "learning_rate") return format_double(cfg.learning_rate);
  if (key == "lambda") return format_double(cfg.lambda);
  if (key == "sparsity") return detail::join(cfg.sparsity);
  if (key == "clients") return std::to_string(cfg.client_count());
  if (key == "sampling_fraction") return format_double(cfg.sampling_fraction);
  if (key == "seed") return std::to_string(cfg.seed);
  if (key == "parallel") return cfg.parallel ? "true" : "false";
  if (key == "out") return cfg.out;
  if (key == "grid_size") return std::to_string(cfg.detector.grid_size);
  if (key == "boxes_per_cell") return std::to_string(cfg.detector.boxes_per_cell);
  if (key == "channel_widths") return detail::join(cfg.detector.channel_widths);
  if (key == "image_size") return std::to_string(cfg.detector.input_height);
  if (key == "lambda_coord") return format_double(cfg.loss.lambda_coord);
  if (key == "lambda_cls") return format_double(cfg.loss.lambda_cls);
  if (key == "lambda_conf") return format_double(cfg.loss.lambda_conf);
  if (key == "lambda_noobj") return format_double(cfg.loss.lambda_noobj);
  if (key == "iou_confidence_target") return cfg.loss.iou_confidence_target ? "true" : "false";
  if (key == "conf_threshold") return format_double(cfg.eval.conf_threshold);
  if (key == "nms_threshold") return format_double(cfg.eval.nms_threshold);
  if (key == "train_images") return std::to_string(cfg.train_images);
  if (key == "test_images") return std::to_string(cfg.test_images);
  if (key == "min_objects") return std::to_string(cfg.scene.min_objects);
  if (key == "max_objects") return std::to_string(cfg.scene.max_objects);
  if (key == "min_object_size") return format_double(cfg.scene.min_size);
  if (key == "max_object_size") return format_double(cfg.scene.max_size);
  if (key == "noise") return format_double(cfg.scene.noise);
  if (key == "data_seed") return std::to_string(cfg.scene.seed);
  if (key == "data_dir") return cfg.data_dir;
  if (key == "histogram_bins") return std::to_string(cfg.histogram_bins);
  throw std::invalid_argument("unknown key '" + key + "'");
}

/// Where each key was last set, for error reporting.
struct ConfigSource {
  std::string name;                          // file path, empty for in-memory text
  std::map<std::string, std::size_t> lines;  // key -> 1-based line
  std::map<std::string, std::string> flags;  // key -> "--key" for command-line overrides

  std::pair<std::string, std::size_t> locate(const std::string& key) const {
    if (auto f = flags.find(key); f != flags.end()) return {f->second, 0};
    if (auto l = lines.find(key); l != lines.end()) return {name.empty() ? "config" : name, l->second};
    return {"config", 0};
  }
};

/// Bounds and cross-field checks. The error names the line that set the offending key.
inline void validate(const ExperimentConfig& cfg, const ConfigSource& src = {}) {
  auto fail = [&](const std::string& key, const std::string& msg) {
    auto [where, line] = src.locate(key);
    throw ConfigError(where, line, key + ": " + msg);
  };
  if (cfg.rounds < 1 || cfg.rounds > 10000) fail("rounds", "must be in [1, 10000]");
  if (cfg.local_epochs < 1 || cfg.local_epochs > 1000) fail("local_epochs", "must be in [1, 1000]");
  if (cfg.batch_size < 2) fail("batch_size", "must be at least 2 (batch statistics need two samples)");
  if (!(cfg.learning_rate > 0.0 && cfg.learning_rate <= 10.0)) fail("learning_rate", "must be in (0, 10]");
  if (!(cfg.lambda >= 0.0 && cfg.lambda <= 1.0)) fail("lambda", "must be in [0, 1]");
  if (cfg.sparsity.empty()) fail("sparsity", "needs one rate per client");
  for (double s : cfg.sparsity) {
    if (!(s >= SparsityRate::kMin && s <= SparsityRate::kMax)) {
      fail("sparsity", "rate " + detail::format_double(s) + " outside [0.01, 0.99]");
    }
  }
  if (!(cfg.sampling_fraction > 0.0 && cfg.sampling_fraction <= 1.0)) fail("sampling_fraction", "must be in (0, 1]");
  if (cfg.histogram_bins < 2) fail("histogram_bins", "must be at least 2");
  if (cfg.detector.num_classes != kShapeClassCount) fail("num_classes", "dataset has exactly 3 classes");
  try {
    cfg.detector.validate();
  } catch (const std::exception& e) {
    fail("channel_widths", e.what());
  }
  try {
    cfg.loss.validate();
  } catch (const std::exception& e) {
    fail("lambda_coord", e.what());
  }
  if (!(cfg.eval.conf_threshold >= 0.0 && cfg.eval.conf_threshold < 1.0)) fail("conf_threshold", "must be in [0, 1)");
  if (!(cfg.eval.nms_threshold >= 0.0 && cfg.eval.nms_threshold <= 1.0)) fail("nms_threshold", "must be in [0, 1]");
  try {
    validate(cfg.scene);
  } catch (const std::exception& e) {
    fail("min_object_size", e.what());
  }
  if (cfg.data_dir.empty()) {
    if (cfg.train_images < cfg.client_count()) fail("train_images", "fewer images than clients");
    if (cfg.test_images < 1) fail("test_images", "must be at least 1");
  }
  const std::size_t prunable = prunable_channels(cfg.detector).size();
  for (double s : cfg.sparsity) {
    if (channels_to_prune(SparsityRate(s), prunable) >= prunable) {
      fail("sparsity", "rate " + detail::format_double(s) + " would prune every one of " + std::to_string(prunable) +
                           " channels");
    }
  }
}

/// Parses `key = value` lines; `#` starts a comment. Unknown or repeated keys are errors.
inline ExperimentConfig parse_config(std::istream& in, const std::string& name, ConfigSource* source = nullptr) {
  ExperimentConfig cfg;
  ConfigSource src;
  src.name = name;
  std::string raw;
  std::size_t line_no = 0;
  const std::string where = name.empty() ? "config" : name;
  while (std::getline(in, raw)) {
    ++line_no;
    const std::string line = detail::trim(raw.substr(0, raw.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where, line_no, "expected 'key = value'");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError(where, line_no, "missing key before '='");
    if (src.lines.count(key) != 0) {
      throw ConfigError(where, line_no, "duplicate key '" + key + "' (first set on line " +
                                            std::to_string(src.lines[key]) + ")");
    }
    try {
      set_config_value(cfg, key, value);
    } catch (const std::exception& e) {
      throw ConfigError(where, line_no, e.what());
    }
    src.lines[key] = line_no;
  }
  if (source != nullptr) *source = src;
  return cfg;
}

inline ExperimentConfig parse_config_text(const std::string& text, ConfigSource* source = nullptr) {
  std::istringstream in(text);
  return parse_config(in, "", source);
}

inline ExperimentConfig load_config(const std::filesystem::path& path, ConfigSource* source = nullptr) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path.string(), 0, "cannot open config file");
  return parse_config(in, path.string(), source);
}

/// Applies a command-line override `--key value`.
inline void apply_override(ExperimentConfig& cfg, ConfigSource& src, const std::string& key, const std::string& value) {
  try {
    set_config_value(cfg, key, value);
  } catch (const std::exception& e) {
    throw ConfigError("--" + key, 0, e.what());
  }
  src.flags[key] = "--" + key;
}

/// Canonical `key = value` text covering every key.
inline std::string serialize_config(const ExperimentConfig& cfg) {
  std::string out;
  for (const auto& key : config_keys()) out += key + " = " + get_config_value(cfg, key) + "\n";
  return out;
}

/// FNV-1a over the canonical form, minus keys that do not change results.
inline std::string config_hash(const ExperimentConfig& cfg) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& key : config_keys()) {
    if (key == "out" || key == "parallel") continue;
    const std::string entry = key + "=" + get_config_value(cfg, key) + "\n";
    for (unsigned char c : entry) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace fedsparse
