#pragma once

#include <algorithm>
#include <cctype>
#include <fstream>
#include <string>
#include <vector>

#include "allspark/model.hpp"
#include "allspark/training.hpp"

namespace allspark {

/// Everything a run needs: model dimensions, training hyperparameters,
/// dataset-generation knobs, and paths. Populated from a plain key=value
/// file ('#' starts a comment) with command-line overrides on top.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  std::string precision = "f32";
  std::string data_dir;
  std::string out_dir;
  std::size_t gen_samples = 512;
  double split_ratio = 0.5;
  bool dump_memory = true;

  void apply(const std::string& key, const std::string& value);
  void validate() const {
    model.validate();
    train.validate();
    if (precision != "f32" && precision != "f64") {
      throw config_error("precision must be f32 or f64, got '" + precision +
                         "'");
    }
    if (!(split_ratio > 0.0 && split_ratio < 1.0)) {
      throw config_error("split_ratio must lie in (0, 1)");
    }
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

inline std::size_t parse_size(const std::string& key, const std::string& v) {
  try {
    const long long x = std::stoll(v);
    if (x < 0) throw std::out_of_range("negative");
    return static_cast<std::size_t>(x);
  } catch (const std::exception&) {
    throw config_error("key '" + key + "' needs a non-negative integer, got '" +
                       v + "'");
  }
}

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double x = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument("trailing junk");
    return x;
  } catch (const std::exception&) {
    throw config_error("key '" + key + "' needs a number, got '" + v + "'");
  }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "on" || v == "yes") return true;
  if (v == "0" || v == "false" || v == "off" || v == "no") return false;
  throw config_error("key '" + key + "' needs a boolean, got '" + v + "'");
}

inline TrainMethod parse_method(const std::string& v) {
  if (v == "supervised") return TrainMethod::supervised;
  if (v == "pseudo") return TrainMethod::pseudo_labeling;
  if (v == "allspark") return TrainMethod::allspark;
  throw config_error("method must be supervised|pseudo|allspark, got '" + v +
                     "'");
}

}  // namespace detail

inline void RunConfig::apply(const std::string& key, const std::string& value) {
  using detail::parse_bool;
  using detail::parse_double;
  using detail::parse_size;
  if (key == "height") {
    model.height = parse_size(key, value);
  } else if (key == "width") {
    model.width = parse_size(key, value);
  } else if (key == "patch_size") {
    model.patch = parse_size(key, value);
  } else if (key == "channels") {
    model.channels = parse_size(key, value);
  } else if (key == "encoder_depth") {
    model.depth = parse_size(key, value);
  } else if (key == "num_classes") {
    model.num_classes = parse_size(key, value);
  } else if (key == "num_heads") {
    model.num_heads = parse_size(key, value);
  } else if (key == "expansion_factor") {
    model.expansion = parse_size(key, value);
  } else if (key == "attention_residual") {
    model.attention_residual = parse_bool(key, value);
  } else if (key == "method") {
    train.method = detail::parse_method(value);
  } else if (key == "allspark") {
    // Ablation switch: "allspark=off" trains the plain pseudo-labeling
    // baseline.
    train.method = parse_bool(key, value) ? TrainMethod::allspark
                                          : TrainMethod::pseudo_labeling;
  } else if (key == "lr_init") {
    train.lr_init = parse_double(key, value);
  } else if (key == "max_iterations") {
    train.max_iterations = parse_size(key, value);
  } else if (key == "epochs") {
    train.epochs = parse_size(key, value);
  } else if (key == "poly_power") {
    train.poly_power = parse_double(key, value);
  } else if (key == "head_lr_multiplier") {
    train.head_lr_multiplier = parse_double(key, value);
  } else if (key == "batch_labeled") {
    train.batch_labeled = parse_size(key, value);
  } else if (key == "batch_unlabeled") {
    train.batch_unlabeled = parse_size(key, value);
  } else if (key == "momentum") {
    train.momentum = parse_double(key, value);
  } else if (key == "weight_decay") {
    train.weight_decay = parse_double(key, value);
  } else if (key == "seed") {
    train.seed = parse_size(key, value);
    model.seed = train.seed;
  } else if (key == "ignore_index") {
    train.ignore_index = static_cast<int>(parse_size(key, value));
  } else if (key == "eval_interval") {
    train.eval_interval = parse_size(key, value);
  } else if (key == "augment_hflip") {
    train.augment_hflip = parse_bool(key, value);
  } else if (key == "capacity_multiplier") {
    train.capacity_multiplier = parse_double(key, value);
  } else if (key == "warmup_threshold") {
    train.warmup_threshold = parse_size(key, value);
  } else if (key == "max_bank_width") {
    train.max_bank_width = parse_size(key, value);
  } else if (key == "precision") {
    precision = value;
  } else if (key == "data_dir") {
    data_dir = value;
  } else if (key == "out_dir") {
    out_dir = value;
  } else if (key == "gen_samples") {
    gen_samples = parse_size(key, value);
  } else if (key == "split_ratio") {
    split_ratio = parse_double(key, value);
  } else if (key == "dump_memory") {
    dump_memory = parse_bool(key, value);
  } else {
    throw config_error("unknown configuration key '" + key + "'");
  }
}

/// Reads a key=value file into the config. Later lines win; unknown keys are
/// rejected.
inline void load_config_file(const std::string& path, RunConfig& cfg) {
  std::ifstream in(path);
  if (!in) throw config_error("cannot open config file " + path);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw config_error(path + ":" + std::to_string(lineno) +
                         ": expected key=value");
    }
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    if (key.empty()) {
      throw config_error(path + ":" + std::to_string(lineno) + ": empty key");
    }
    cfg.apply(key, value);
  }
}

}  // namespace allspark
