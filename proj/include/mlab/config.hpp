#pragma once

// Flat `key = value` run configuration with `#` comments. Unknown keys are
// rejected; the resolved form (defaults included) is written beside outputs.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "mlab/embed_eval.hpp"
#include "mlab/meta.hpp"
#include "mlab/models.hpp"
#include "mlab/tasks.hpp"

namespace mlab {

class ConfigError : public Error {
 public:
  using Error::Error;
};

inline constexpr const char* kVersion = "mlab 1.0.0";

class RunConfig {
 public:
  RunConfig() : values_(defaults()) {}

  static const std::map<std::string, std::string>& defaults() {
    static const std::map<std::string, std::string> d{
        // meta-learning
        {"mode", "maml"},
        {"inner_steps", "5"},
        {"inner_lr", "0.01"},
        {"meta_batch", "3"},
        {"outer_lr", "0.001"},
        {"optimizer", "adam"},
        {"iterations", "2000"},
        {"first_order", "false"},
        {"n_way", "5"},
        {"k_shot", "1"},
        {"q_query", "10"},
        {"seed", "0"},
        {"log_every", "100"},
        {"val_episodes", "20"},
        // model
        {"model", "conv"},
        {"in_channels", "1"},
        {"height", "16"},
        {"width", "16"},
        {"blocks", "4"},
        {"channels", "8"},
        {"mlp_widths", ""},
        {"embed_lift", "0"},
        // tasks
        {"task", "gaussian"},
        {"num_classes", "20"},
        {"noise_scale", "0.5"},
        {"dist_seed", "1234"},
        {"dataset_path", ""},
        // protocol
        {"protocol_iterations", "1000"},
        {"protocol_inner_steps", "5"},
        {"workers", "1"},
    };
    return d;
  }

  static RunConfig parse(std::istream& is, const std::string& origin = "config") {
    RunConfig cfg;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key = value");
      }
      try {
        cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
      } catch (const ConfigError& e) {
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + e.what());
      }
    }
    cfg.validate();
    return cfg;
  }

  static RunConfig load(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config " + path.string());
    return parse(is, path.string());
  }

  void set(const std::string& key, const std::string& value) {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown key '" + key + "'");
    it->second = value;
  }

  const std::string& get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown key '" + key + "'");
    return it->second;
  }

  /// Resolved key = value listing, one per line in key order.
  void write(std::ostream& os) const {
    os << "# resolved configuration (" << kVersion << ")\n";
    for (const auto& [k, v] : values_) os << k << " = " << v << '\n';
  }

  std::string str() const {
    std::ostringstream os;
    write(os);
    return os.str();
  }

  /// Parses every typed value once so bad entries fail early.
  void validate() const {
    try {
      meta_config().validate();
      model_spec().validate();
    } catch (const ConfigError&) {
      throw;
    } catch (const Error& e) {
      throw ConfigError(e.what());
    }
    protocol_config();
    const auto& task = get("task");
    if (task != "gaussian" && task != "dataset") {
      throw ConfigError("task must be gaussian or dataset, got '" + task + "'");
    }
    if (task == "dataset" && get("dataset_path").empty()) {
      throw ConfigError("task = dataset requires dataset_path");
    }
    if (number("noise_scale") < 0.0) throw ConfigError("noise_scale must be >= 0");
    if (model_spec().n_way != meta_config().n_way) {
      throw ConfigError("mlp_widths must end with n_way");
    }
  }

  MetaConfig meta_config() const {
    MetaConfig c;
    try {
      c.mode = parse_mode(get("mode"));
    } catch (const Error& e) {
      throw ConfigError(std::string("mode: ") + e.what());
    }
    c.inner_steps = count("inner_steps");
    c.inner_lr_init = number("inner_lr");
    c.meta_batch = count("meta_batch");
    c.outer_lr = number("outer_lr");
    const auto& opt = get("optimizer");
    if (opt == "adam") {
      c.optimizer = OuterOptimizerKind::Adam;
    } else if (opt == "sgd") {
      c.optimizer = OuterOptimizerKind::Sgd;
    } else {
      throw ConfigError("optimizer must be adam or sgd, got '" + opt + "'");
    }
    c.iterations = count("iterations");
    c.first_order = flag("first_order");
    c.n_way = count("n_way");
    c.k_shot = count("k_shot");
    c.q_query = count("q_query");
    c.seed = count("seed");
    c.log_every = count("log_every");
    c.val_episodes = count("val_episodes");
    return c;
  }

  ModelSpec model_spec() const {
    const auto& kind = get("model");
    ModelSpec s;
    if (kind == "mlp") {
      std::vector<std::size_t> widths;
      std::stringstream ss(get("mlp_widths"));
      for (std::string w; std::getline(ss, w, ',');) widths.push_back(to_count("mlp_widths", trim(w)));
      try {
        s = ModelSpec::mlp(std::move(widths));
      } catch (const Error& e) {
        throw ConfigError(e.what());
      }
    } else if (kind == "conv") {
      s.in_channels = count("in_channels");
      s.height = count("height");
      s.width = count("width");
      s.blocks = count("blocks");
      s.channels = count("channels");
      s.n_way = count("n_way");
    } else {
      throw ConfigError("model must be conv or mlp, got '" + kind + "'");
    }
    s.embed_lift = number("embed_lift");
    return s;
  }

  ProtocolConfig protocol_config() const {
    ProtocolConfig p;
    p.iterations = count("protocol_iterations");
    p.inner_steps = count("protocol_inner_steps");
    p.inner_lr = number("inner_lr");
    p.shape = meta_config().episode_shape();
    p.seed = count("seed");
    p.workers = count("workers");
    return p;
  }

  TaskDistribution task_distribution() const {
    if (get("task") == "dataset") return TaskDistribution(DiskDataset::load(get("dataset_path")));
    return TaskDistribution(gaussian_classes());
  }

  GaussianClasses gaussian_classes() const {
    return GaussianClasses(model_spec().input_shape(), count("num_classes"),
                           number("noise_scale"), count("dist_seed"));
  }

  std::size_t count(const std::string& key) const { return to_count(key, get(key)); }

  double number(const std::string& key) const {
    const auto& v = get(key);
    try {
      std::size_t used = 0;
      const double d = std::stod(v, &used);
      if (used != v.size()) throw std::invalid_argument(v);
      return d;
    } catch (const std::exception&) {
      throw ConfigError(key + ": expected a number, got '" + v + "'");
    }
  }

  bool flag(const std::string& key) const {
    const auto& v = get(key);
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError(key + ": expected true or false, got '" + v + "'");
  }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  }

  static std::size_t to_count(const std::string& key, const std::string& v) {
    if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos) {
      throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
    }
    try {
      return std::stoull(v);
    } catch (const std::exception&) {
      throw ConfigError(key + ": integer out of range '" + v + "'");
    }
  }

  std::map<std::string, std::string> values_;
};

}  // namespace mlab
