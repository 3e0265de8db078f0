#pragma once

// key=value run configuration. '#' starts a comment; blank lines are ignored.

#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "depthart/checkpoint.hpp"
#include "depthart/errors.hpp"

namespace depthart {

class KeyValueConfig {
 public:
  static KeyValueConfig parse(std::string_view text) {
    KeyValueConfig cfg;
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value, got '" + line + "'");
      const std::string key = trim(line.substr(0, eq));
      if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
      if (cfg.values_.count(key)) throw ConfigError("config: key '" + key + "' given twice");
      cfg.values_[key] = trim(line.substr(eq + 1));
    }
    return cfg;
  }

  static KeyValueConfig from_file(const std::filesystem::path& path) {
    try {
      return parse(read_file(path));
    } catch (const DataError& e) {
      throw ConfigError(e.what());
    }
  }

  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  bool contains(const std::string& key) const { return values_.count(key) != 0; }
  const std::map<std::string, std::string>& values() const { return values_; }

  const std::string& require(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("config: missing required key '" + key + "'");
    return it->second;
  }

  double require_double(const std::string& key) const { return to_double(key, require(key)); }
  std::int64_t require_int(const std::string& key) const { return to_int(key, require(key)); }

  double get_double(const std::string& key, double fallback) const {
    return contains(key) ? require_double(key) : fallback;
  }
  std::int64_t get_int(const std::string& key, std::int64_t fallback) const {
    return contains(key) ? require_int(key) : fallback;
  }

  /// Throws for any key outside `known`.
  void check_known(const std::set<std::string>& known) const {
    for (const auto& [k, v] : values_)
      if (!known.count(k)) throw ConfigError("config: unknown key '" + k + "'");
  }

  std::string str() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + "=" + v + "\n";
    return out;
  }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
  }

  static double to_double(const std::string& key, const std::string& v) {
    double out = 0.0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size() || !std::isfinite(out))
      throw ConfigError("config: key '" + key + "' is not a number: '" + v + "'");
    return out;
  }

  static std::int64_t to_int(const std::string& key, const std::string& v) {
    std::int64_t out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size())
      throw ConfigError("config: key '" + key + "' is not an integer: '" + v + "'");
    return out;
  }

  std::map<std::string, std::string> values_;
};

enum class Regime { teacher_forcing, depthart };

inline std::string regime_name(Regime r) { return r == Regime::teacher_forcing ? "teacher_forcing" : "depthart"; }

/// Accepts the two literals and the short CLI spelling "tf".
inline Regime parse_regime(const std::string& s) {
  if (s == "teacher_forcing" || s == "tf") return Regime::teacher_forcing;
  if (s == "depthart") return Regime::depthart;
  throw ConfigError("config: regime must be teacher_forcing or depthart, got '" + s + "'");
}

struct TrainConfig {
  Regime regime = Regime::depthart;
  double lr = 1e-4;
  double weight_decay = 1e-2;
  std::size_t batch = 4;
  std::size_t steps = 10000;
  std::size_t decay_period = 1000;
  double decay_gamma = 0.8;
  std::uint64_t seed = 1;
  std::string data_dir;
  std::string out_dir;
  std::size_t checkpoint_every = 500;
  std::size_t log_every = 10;

  void validate() const {
    if (!(lr > 0) || !(weight_decay >= 0) || batch == 0 || steps == 0 || decay_period == 0 || !(decay_gamma > 0) ||
        checkpoint_every == 0 || log_every == 0)
      throw ConfigError("config: lr, batch, steps, decay_period, decay_gamma must be positive and wd >= 0");
    if (checkpoint_every % log_every != 0) throw ConfigError("config: checkpoint_every must be a multiple of log_every");
  }

  static const std::set<std::string>& known_keys() {
    static const std::set<std::string> k{"regime", "lr",   "wd",      "batch",   "steps",           "decay_period",
                                         "decay_gamma", "seed", "data_dir", "out_dir", "checkpoint_every", "log_every"};
    return k;
  }

  /// All keys are required except the two logging cadences and, when
  /// `need_regime` is false, the regime.
  static TrainConfig from(const KeyValueConfig& kv, bool need_regime = true) {
    kv.check_known(known_keys());
    TrainConfig c;
    if (need_regime || kv.contains("regime")) c.regime = parse_regime(kv.require("regime"));
    c.lr = kv.require_double("lr");
    c.weight_decay = kv.require_double("wd");
    c.batch = positive(kv, "batch");
    c.steps = positive(kv, "steps");
    c.decay_period = positive(kv, "decay_period");
    c.decay_gamma = kv.require_double("decay_gamma");
    const auto seed = kv.require_int("seed");
    if (seed < 0) throw ConfigError("config: seed must be non-negative");
    c.seed = static_cast<std::uint64_t>(seed);
    c.data_dir = kv.require("data_dir");
    c.out_dir = kv.require("out_dir");
    if (kv.contains("checkpoint_every")) c.checkpoint_every = positive(kv, "checkpoint_every");
    if (kv.contains("log_every")) c.log_every = positive(kv, "log_every");
    c.validate();
    return c;
  }

  KeyValueConfig to_kv() const {
    KeyValueConfig kv;
    kv.set("regime", regime_name(regime));
    kv.set("lr", format(lr));
    kv.set("wd", format(weight_decay));
    kv.set("batch", std::to_string(batch));
    kv.set("steps", std::to_string(steps));
    kv.set("decay_period", std::to_string(decay_period));
    kv.set("decay_gamma", format(decay_gamma));
    kv.set("seed", std::to_string(seed));
    kv.set("data_dir", data_dir);
    kv.set("out_dir", out_dir);
    kv.set("checkpoint_every", std::to_string(checkpoint_every));
    kv.set("log_every", std::to_string(log_every));
    return kv;
  }

 private:
  static std::size_t positive(const KeyValueConfig& kv, const std::string& key) {
    const auto v = kv.require_int(key);
    if (v <= 0) throw ConfigError("config: key '" + key + "' must be positive");
    return static_cast<std::size_t>(v);
  }

  static std::string format(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
  }
};

}  // namespace depthart
