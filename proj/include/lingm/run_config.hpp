#pragma once

// Flat key=value run configuration shared by every command-line tool.

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "lingm/encoder.hpp"
#include "lingm/error.hpp"
#include "lingm/evalsuite.hpp"
#include "lingm/lgm.hpp"

namespace lingm {

inline constexpr const char* kEnvPrefix = "LINGM_";
inline constexpr const char* kConfigFileName = "config.txt";

class RunConfig {
 public:
  RunConfig() {
    for (const auto& [k, v] : defaults()) values_[k] = v;
  }

  /// Every recognised key with its default value, in file order.
  static const std::vector<std::pair<std::string, std::string>>& defaults() {
    static const std::vector<std::pair<std::string, std::string>> table = {
        {"seed", "0"},
        {"data", ""},
        {"test_data", ""},
        {"encoder", "identity"},
        {"encoder_dir", ""},
        {"encoder_seed", "0"},
        {"feature_dim", "0"},
        {"hidden", "64"},
        {"conv1", "8"},
        {"conv2", "16"},
        {"activation", "tanh"},
        {"whiten", "false"},
        {"iterations", "5000"},
        {"level_period", "200"},
        {"rounds", "10"},
        {"lr", "0.002"},
        {"head_init", "fanin"},
        {"include_bias", "true"},
        {"pyramid", "true"},
        {"decorrelate", "true"},
        {"resolution", "256"},
        {"sigmoid_gain", "1"},
        {"flip", "true"},
        {"crop", "true"},
        {"noise", "true"},
        {"flip_prob", "0.5"},
        {"crop_area_min", "0.08"},
        {"crop_area_max", "1"},
        {"crop_aspect_min", "0.75"},
        {"crop_aspect_max", "1.3333333333333333"},
        {"noise_std", "0.2"},
        {"checkpoint_every", "0"},
        {"failure_budget", "100"},
        {"vector_init_std", "0.01"},
        {"real_batch", "0"},
        {"probe_epochs", "1000"},
        {"probe_batch_size", "100"},
        {"probe_lr", "3.90625e-06"},
        {"probe_cosine", "true"},
        {"probe_patience", "50"},
        {"probe_early_stop", "validation"},
        {"probe_init", "fanin"},
        {"probe_augment", "true"},
        {"val_fraction", "0.1"},
        {"eval_seeds", "1"},
        {"random_seeds", "10"},
        {"align_k", "10"},
        {"embed_batch", "64"},
    };
    return table;
  }

  static bool known(const std::string& key) {
    const auto& t = defaults();
    return std::any_of(t.begin(), t.end(), [&](const auto& kv) { return kv.first == key; });
  }

  /// Reads `path` on top of the defaults. Blank lines and '#' comments are
  /// ignored; unknown or repeated keys are errors.
  static RunConfig from_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError(path.string() + ": cannot open config");
    RunConfig cfg;
    std::map<std::string, std::size_t> seen;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      const std::string where = path.string() + ":" + std::to_string(lineno);
      if (eq == std::string::npos) throw ConfigError(where + ": expected key=value");
      const std::string key = trim(line.substr(0, eq));
      if (!known(key)) throw ConfigError(where + ": unknown key '" + key + "'");
      if (seen.count(key)) throw ConfigError(where + ": duplicate key '" + key + "'");
      seen[key] = lineno;
      cfg.values_[key] = trim(line.substr(eq + 1));
    }
    return cfg;
  }

  void set(const std::string& key, const std::string& value) {
    if (!known(key)) throw ConfigError("unknown config key '" + key + "'");
    values_[key] = value;
  }

  /// Applies PREFIX<KEY> environment variables (upper-cased key names).
  void apply_env(const std::string& prefix = kEnvPrefix) {
    for (const auto& [key, _] : defaults()) {
      std::string name = prefix;
      for (char ch : key) name += static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
      if (const char* v = std::getenv(name.c_str())) values_[key] = v;
    }
  }

  const std::string& str(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second;
  }

  double real(const std::string& key) const {
    const std::string& s = str(key);
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (s.empty() || end != s.c_str() + s.size() || !std::isfinite(v))
      throw ConfigError("config key '" + key + "': '" + s + "' is not a finite number");
    return v;
  }

  std::uint64_t u64(const std::string& key) const {
    const std::string& s = str(key);
    std::uint64_t v = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || ec != std::errc() || ptr != s.data() + s.size())
      throw ConfigError("config key '" + key + "': '" + s + "' is not a non-negative integer");
    return v;
  }

  std::size_t size(const std::string& key) const { return static_cast<std::size_t>(u64(key)); }

  bool flag(const std::string& key) const {
    const std::string& s = str(key);
    if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
    if (s == "false" || s == "0" || s == "no" || s == "off") return false;
    throw ConfigError("config key '" + key + "': '" + s + "' is not a boolean");
  }

  AugmentConfig augment() const {
    AugmentConfig a;
    a.flip = flag("flip");
    a.crop = flag("crop");
    a.noise = flag("noise");
    a.flip_prob = real("flip_prob");
    a.area_min = real("crop_area_min");
    a.area_max = real("crop_area_max");
    a.aspect_min = real("crop_aspect_min");
    a.aspect_max = real("crop_aspect_max");
    a.noise_std = real("noise_std");
    a.rounds = std::max<std::size_t>(1, size("rounds"));
    try {
      a.validate();
    } catch (const InvalidArgument& e) {
      throw ConfigError(e.what());
    }
    return a;
  }

  DistillConfig distill() const {
    DistillConfig d;
    d.iterations = size("iterations");
    d.level_period = size("level_period");
    d.rounds = size("rounds");
    d.lr = real("lr");
    d.head_init = parse_head_init(str("head_init"));
    d.include_bias = flag("include_bias");
    d.pyramid = flag("pyramid");
    d.decorrelate = flag("decorrelate");
    d.resolution = size("resolution");
    d.sigmoid_gain = real("sigmoid_gain");
    d.augment = augment();
    d.seed = u64("seed");
    d.checkpoint_every = size("checkpoint_every");
    d.failure_budget = size("failure_budget");
    d.vector_init_std = real("vector_init_std");
    d.real_batch = size("real_batch");
    d.validate();
    return d;
  }

  ProbeConfig probe() const {
    ProbeConfig p;
    p.epochs = size("probe_epochs");
    p.batch_size = size("probe_batch_size");
    p.lr = real("probe_lr");
    p.cosine = flag("probe_cosine");
    p.patience = size("probe_patience");
    p.early_stop = parse_early_stop(str("probe_early_stop"));
    p.init = parse_head_init(str("probe_init"));
    p.augment = flag("probe_augment");
    p.augmentation = augment();
    p.validate();
    return p;
  }

  /// Built-in encoder description for inputs of the given shape.
  EncoderSpec encoder(const Dims& input_shape) const {
    EncoderSpec e;
    e.architecture = str("encoder");
    e.input_shape = input_shape;
    e.feature_dim = size("feature_dim");
    e.hidden = size("hidden");
    e.conv1 = size("conv1");
    e.conv2 = size("conv2");
    e.activation = parse_activation(str("activation"));
    e.seed = u64("encoder_seed");
    e.whiten = flag("whiten");
    return e;
  }

  std::string to_string() const {
    std::ostringstream os;
    for (const auto& [key, _] : defaults()) os << key << '=' << values_.at(key) << '\n';
    return os.str();
  }

  /// Writes the resolved configuration as `dir/config.txt`.
  void write(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    const auto path = dir / kConfigFileName;
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError(path.string() + ": cannot write config");
    out << to_string();
  }

  bool operator==(const RunConfig&) const = default;

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  }

  std::map<std::string, std::string> values_;
};

}  // namespace lingm
