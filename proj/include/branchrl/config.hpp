#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "branchrl/ensemble.hpp"
#include "branchrl/mbpo.hpp"
#include "branchrl/probe.hpp"
#include "branchrl/sac.hpp"
#include "branchrl/util.hpp"
#include "branchrl/value_expansion.hpp"

namespace branchrl {

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Flat dotted-key configuration: one `key = value` per line, `#` comments.
/// Every key must be consumed by a reader; leftovers are reported as errors.
class ConfigMap {
 public:
  static ConfigMap parse_text(const std::string& text) {
    ConfigMap cfg;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      const auto trim = [](std::string s) {
        const auto a = s.find_first_not_of(" \t\r");
        if (a == std::string::npos) return std::string();
        const auto b = s.find_last_not_of(" \t\r");
        return s.substr(a, b - a + 1);
      };
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
      const std::string key = trim(line.substr(0, eq));
      const std::string value = trim(line.substr(eq + 1));
      if (key.empty()) throw ConfigError("config line " + std::to_string(line_no) + ": empty key");
      if (cfg.kv_.count(key))
        throw ConfigError("config: duplicate key '" + key + "'");
      cfg.kv_[key] = value;
    }
    return cfg;
  }

  static ConfigMap parse_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open config file: " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_text(ss.str());
  }

  bool has(const std::string& key) const { return kv_.count(key) > 0; }

  std::string get_string(const std::string& key, const std::string& fallback) const {
    consumed_.insert(key);
    auto it = kv_.find(key);
    return it == kv_.end() ? fallback : it->second;
  }

  double get_double(const std::string& key, double fallback) const {
    consumed_.insert(key);
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    try {
      std::size_t pos = 0;
      const double v = std::stod(it->second, &pos);
      if (pos != it->second.size()) throw std::invalid_argument("trailing characters");
      return v;
    } catch (const std::exception&) {
      throw ConfigError("config: key '" + key + "' is not a number: " + it->second);
    }
  }

  long long get_int(const std::string& key, long long fallback) const {
    consumed_.insert(key);
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    try {
      std::size_t pos = 0;
      const long long v = std::stoll(it->second, &pos);
      if (pos != it->second.size()) throw std::invalid_argument("trailing characters");
      return v;
    } catch (const std::exception&) {
      throw ConfigError("config: key '" + key + "' is not an integer: " + it->second);
    }
  }

  bool get_bool(const std::string& key, bool fallback) const {
    consumed_.insert(key);
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    if (it->second == "true" || it->second == "1") return true;
    if (it->second == "false" || it->second == "0") return false;
    throw ConfigError("config: key '" + key + "' is not a boolean: " + it->second);
  }

  std::vector<int> get_int_list(const std::string& key, std::vector<int> fallback) const {
    consumed_.insert(key);
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    std::vector<int> out;
    std::stringstream ss(it->second);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      try {
        out.push_back(std::stoi(cell));
      } catch (const std::exception&) {
        throw ConfigError("config: key '" + key + "' is not an integer list: " + it->second);
      }
    }
    if (out.empty())
      throw ConfigError("config: key '" + key + "' is an empty list");
    return out;
  }

  /// All keys under `prefix` as doubles (e.g. env.params.*).
  std::map<std::string, double> doubles_with_prefix(const std::string& prefix) const {
    std::map<std::string, double> out;
    for (const auto& [key, value] : kv_) {
      if (key.rfind(prefix, 0) != 0) continue;
      out[key.substr(prefix.size())] = get_double(key, 0.0);
    }
    return out;
  }

  void ensure_all_consumed() const {
    std::string unknown;
    for (const auto& [key, value] : kv_)
      if (!consumed_.count(key)) unknown += (unknown.empty() ? "" : ", ") + key;
    if (!unknown.empty()) throw ConfigError("config: unknown keys: " + unknown);
  }

 private:
  std::map<std::string, std::string> kv_;
  mutable std::set<std::string> consumed_;
};

struct ExperimentConfig {
  std::string env_name = "pendulum";
  std::map<std::string, double> env_params;
  LoopConfig loop;
  RolloutSchedule schedule;
  SacConfig sac;
  EnsembleConfig model;
  ProbeConfig probe;
  ExpansionConfig expansion;
  std::uint64_t seed = 0;
  std::string output_dir;
  bool deterministic_timing = true;
};

namespace detail {
inline std::vector<int> parse_hidden(const ConfigMap& cfg, const std::string& key,
                                     std::vector<int> fallback) {
  auto widths = cfg.get_int_list(key, std::move(fallback));
  for (int w : widths)
    if (w < 1) throw ConfigError("config: '" + key + "' widths must be positive");
  return widths;
}
}  // namespace detail

/// Builds the fully defaulted experiment configuration, validating every key.
inline ExperimentConfig load_experiment_config(const ConfigMap& cfg) {
  ExperimentConfig ec;
  ec.env_name = cfg.get_string("env.name", ec.env_name);
  ec.env_params = cfg.doubles_with_prefix("env.params.");

  ec.loop.n_epochs = static_cast<int>(cfg.get_int("loop.n_epochs", ec.loop.n_epochs));
  ec.loop.env_steps_per_epoch =
      static_cast<int>(cfg.get_int("loop.env_steps_per_epoch", ec.loop.env_steps_per_epoch));
  ec.loop.model_rollouts_per_env_step = static_cast<int>(
      cfg.get_int("loop.model_rollouts_per_env_step", ec.loop.model_rollouts_per_env_step));
  ec.loop.gradient_updates_per_env_step = static_cast<int>(
      cfg.get_int("loop.gradient_updates_per_env_step", ec.loop.gradient_updates_per_env_step));
  ec.loop.ensemble_size =
      static_cast<int>(cfg.get_int("loop.ensemble_size", ec.loop.ensemble_size));
  ec.loop.real_data_fraction =
      cfg.get_double("loop.real_data_fraction", ec.loop.real_data_fraction);
  ec.loop.discount = cfg.get_double("loop.discount", ec.loop.discount);
  ec.loop.random_steps = static_cast<int>(cfg.get_int("loop.random_steps", ec.loop.random_steps));
  ec.loop.eval_episodes =
      static_cast<int>(cfg.get_int("loop.eval_episodes", ec.loop.eval_episodes));
  ec.loop.env_buffer_capacity = static_cast<std::size_t>(
      cfg.get_int("loop.env_buffer_capacity", static_cast<long long>(ec.loop.env_buffer_capacity)));
  ec.loop.model_retention_epochs = static_cast<int>(
      cfg.get_int("loop.model_retention_epochs", ec.loop.model_retention_epochs));

  ec.schedule.k_start = static_cast<int>(cfg.get_int("schedule.k_start", ec.schedule.k_start));
  ec.schedule.k_end = static_cast<int>(cfg.get_int("schedule.k_end", ec.schedule.k_end));
  ec.schedule.epoch_start =
      static_cast<int>(cfg.get_int("schedule.epoch_start", ec.schedule.epoch_start));
  ec.schedule.epoch_end =
      static_cast<int>(cfg.get_int("schedule.epoch_end", ec.schedule.epoch_end));

  ec.sac.actor_hidden = detail::parse_hidden(cfg, "sac.actor_hidden", ec.sac.actor_hidden);
  ec.sac.critic_hidden = detail::parse_hidden(cfg, "sac.critic_hidden", ec.sac.critic_hidden);
  ec.sac.learning_rate = cfg.get_double("sac.learning_rate", ec.sac.learning_rate);
  ec.sac.tau = cfg.get_double("sac.tau", ec.sac.tau);
  ec.sac.init_alpha = cfg.get_double("sac.init_alpha", ec.sac.init_alpha);
  ec.sac.auto_alpha = cfg.get_bool("sac.auto_alpha", ec.sac.auto_alpha);
  ec.sac.target_entropy = cfg.get_double("sac.target_entropy", ec.sac.target_entropy);
  ec.sac.batch_size = static_cast<int>(cfg.get_int("sac.batch_size", ec.sac.batch_size));

  ec.model.members = ec.loop.ensemble_size;
  ec.model.hidden = detail::parse_hidden(cfg, "model.hidden", ec.model.hidden);
  ec.model.learning_rate = cfg.get_double("model.learning_rate", ec.model.learning_rate);
  ec.model.batch_size = static_cast<int>(cfg.get_int("model.batch_size", ec.model.batch_size));
  ec.model.max_epochs = static_cast<int>(cfg.get_int("model.max_epochs", ec.model.max_epochs));
  ec.model.patience = static_cast<int>(cfg.get_int("model.patience", ec.model.patience));
  ec.model.holdout_fraction =
      cfg.get_double("model.holdout_fraction", ec.model.holdout_fraction);
  ec.model.min_samples = static_cast<int>(cfg.get_int("model.min_samples", ec.model.min_samples));
  ec.model.log_var_bounds.lo =
      cfg.get_double("model.log_var_lo", ec.model.log_var_bounds.lo);
  ec.model.log_var_bounds.hi =
      cfg.get_double("model.log_var_hi", ec.model.log_var_bounds.hi);

  ec.probe.train_set_sizes = cfg.get_int_list("probe.train_set_sizes", ec.probe.train_set_sizes);
  ec.probe.prep_env_steps =
      static_cast<int>(cfg.get_int("probe.prep_env_steps", ec.probe.prep_env_steps));
  ec.probe.probe_env_steps =
      static_cast<int>(cfg.get_int("probe.probe_env_steps", ec.probe.probe_env_steps));
  ec.probe.interval = static_cast<int>(cfg.get_int("probe.interval", ec.probe.interval));
  ec.probe.eval_transitions =
      static_cast<int>(cfg.get_int("probe.eval_transitions", ec.probe.eval_transitions));
  ec.probe.updates_per_step =
      static_cast<int>(cfg.get_int("probe.updates_per_step", ec.probe.updates_per_step));
  ec.probe.kl_window = cfg.get_double("probe.kl_window", ec.probe.kl_window);
  ec.probe.exploitation_rollouts = static_cast<int>(
      cfg.get_int("probe.exploitation_rollouts", ec.probe.exploitation_rollouts));

  ec.expansion.horizon = static_cast<int>(cfg.get_int("value_expansion.H", 0));
  ec.expansion.enabled = ec.expansion.horizon > 0;

  ec.seed = static_cast<std::uint64_t>(cfg.get_int("seed", 0));
  ec.output_dir = cfg.get_string("output_dir", "");
  ec.deterministic_timing = cfg.get_bool("timing.deterministic", true);

  cfg.ensure_all_consumed();
  ec.loop.validate();
  ec.schedule.validate();
  ec.expansion.validate();
  return ec;
}

inline ExperimentConfig load_experiment_config_file(const std::filesystem::path& path) {
  return load_experiment_config(ConfigMap::parse_file(path));
}

namespace detail {
inline std::string join_ints(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i)
    out += (i ? "," : "") + std::to_string(v[static_cast<std::size_t>(i)]);
  return out;
}
}  // namespace detail

/// Canonical snapshot of the fully resolved configuration (sorted keys);
/// hashed into the run manifest and written next to the metrics.
inline std::string serialize_config(const ExperimentConfig& ec) {
  std::map<std::string, std::string> kv;
  kv["env.name"] = ec.env_name;
  for (const auto& [key, value] : ec.env_params)
    kv["env.params." + key] = format_double(value);
  kv["loop.n_epochs"] = std::to_string(ec.loop.n_epochs);
  kv["loop.env_steps_per_epoch"] = std::to_string(ec.loop.env_steps_per_epoch);
  kv["loop.model_rollouts_per_env_step"] = std::to_string(ec.loop.model_rollouts_per_env_step);
  kv["loop.gradient_updates_per_env_step"] =
      std::to_string(ec.loop.gradient_updates_per_env_step);
  kv["loop.ensemble_size"] = std::to_string(ec.loop.ensemble_size);
  kv["loop.real_data_fraction"] = format_double(ec.loop.real_data_fraction);
  kv["loop.discount"] = format_double(ec.loop.discount);
  kv["loop.random_steps"] = std::to_string(ec.loop.random_steps);
  kv["loop.eval_episodes"] = std::to_string(ec.loop.eval_episodes);
  kv["loop.env_buffer_capacity"] = std::to_string(ec.loop.env_buffer_capacity);
  kv["loop.model_retention_epochs"] = std::to_string(ec.loop.model_retention_epochs);
  kv["schedule.k_start"] = std::to_string(ec.schedule.k_start);
  kv["schedule.k_end"] = std::to_string(ec.schedule.k_end);
  kv["schedule.epoch_start"] = std::to_string(ec.schedule.epoch_start);
  kv["schedule.epoch_end"] = std::to_string(ec.schedule.epoch_end);
  kv["sac.actor_hidden"] = detail::join_ints(ec.sac.actor_hidden);
  kv["sac.critic_hidden"] = detail::join_ints(ec.sac.critic_hidden);
  kv["sac.learning_rate"] = format_double(ec.sac.learning_rate);
  kv["sac.tau"] = format_double(ec.sac.tau);
  kv["sac.init_alpha"] = format_double(ec.sac.init_alpha);
  kv["sac.auto_alpha"] = ec.sac.auto_alpha ? "true" : "false";
  kv["sac.target_entropy"] = format_double(ec.sac.target_entropy);
  kv["sac.batch_size"] = std::to_string(ec.sac.batch_size);
  kv["model.hidden"] = detail::join_ints(ec.model.hidden);
  kv["model.learning_rate"] = format_double(ec.model.learning_rate);
  kv["model.batch_size"] = std::to_string(ec.model.batch_size);
  kv["model.max_epochs"] = std::to_string(ec.model.max_epochs);
  kv["model.patience"] = std::to_string(ec.model.patience);
  kv["model.holdout_fraction"] = format_double(ec.model.holdout_fraction);
  kv["model.min_samples"] = std::to_string(ec.model.min_samples);
  kv["model.log_var_lo"] = format_double(ec.model.log_var_bounds.lo);
  kv["model.log_var_hi"] = format_double(ec.model.log_var_bounds.hi);
  kv["probe.train_set_sizes"] = detail::join_ints(ec.probe.train_set_sizes);
  kv["probe.prep_env_steps"] = std::to_string(ec.probe.prep_env_steps);
  kv["probe.probe_env_steps"] = std::to_string(ec.probe.probe_env_steps);
  kv["probe.interval"] = std::to_string(ec.probe.interval);
  kv["probe.eval_transitions"] = std::to_string(ec.probe.eval_transitions);
  kv["probe.updates_per_step"] = std::to_string(ec.probe.updates_per_step);
  kv["probe.kl_window"] = format_double(ec.probe.kl_window);
  kv["probe.exploitation_rollouts"] = std::to_string(ec.probe.exploitation_rollouts);
  kv["value_expansion.H"] = std::to_string(ec.expansion.horizon);
  kv["seed"] = std::to_string(ec.seed);
  kv["output_dir"] = ec.output_dir;
  kv["timing.deterministic"] = ec.deterministic_timing ? "true" : "false";
  std::string out;
  for (const auto& [key, value] : kv) out += key + " = " + value + "\n";
  return out;
}

}  // namespace branchrl
