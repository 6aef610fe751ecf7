#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "bsnet/bisim.hpp"
#include "bsnet/data.hpp"
#include "bsnet/train.hpp"

namespace bsnet {

/// One `key = value` entry; lists keep their items, scalars have one item.
struct ConfigEntry {
  std::vector<std::string> items;
  bool is_list = false;
  std::string origin;  // "file:line" or "override"
};
using ConfigEntries = std::map<std::string, ConfigEntry>;

/// Parses TOML-style text: `key = value` lines, `[section]` headers that
/// prefix keys with "section.", `#` comments, quoted or bare strings and
/// single-line `[a, b]` lists. Syntax errors are collected and thrown together.
ConfigEntries parse_config_text(const std::string& text, const std::string& source);
ConfigEntries parse_config_file(const std::filesystem::path& path);
/// `key=value` with the same value syntax.
void apply_override(ConfigEntries& entries, const std::string& assignment);

struct RademacherRunConfig {
  std::string family = "linear";  // linear | tanh
  std::size_t sample_size = 10;
  std::size_t input_dim = 2;      // tanh family only
  std::size_t hidden = 3;         // tanh family only
  std::size_t samples = 1;        // seeded samples S
  std::size_t n_sigma = 64;
  std::size_t restarts = 64;
  std::size_t steps = 100;
  std::size_t witnesses = 100;
};

struct VisualizeRunConfig {
  std::size_t episodes = 1;
  std::size_t queries = 0;  // per episode; 0 = all
  std::string target = "predicted";  // predicted | true
};

struct RunConfig {
  ModelSpec model;
  std::size_t way = 5;
  std::size_t shot = 1;
  std::size_t train_queries = 0;  // 0 = method default
  std::size_t test_queries = kDefaultEvalQueries;
  std::size_t train_episodes = 0;  // 0 = method default
  std::size_t eval_episodes = kDefaultEvalEpisodes;
  std::size_t eval_repeats = 0;  // 0 = method default
  std::string eval_split = "test";
  AdamConfig adam;
  std::int64_t lr_halving = -1;  // -1 = method default
  AugmentConfig augment;
  std::uint64_t seed = 1;
  NumericMode numeric_mode = NumericMode::f64;

  std::string dataset = "synthetic";  // "synthetic" or an image directory
  SyntheticSpec synthetic;
  std::vector<std::size_t> split_classes;  // empty = 2:1:1 ratio

  std::string output = "bsnet_run";
  std::size_t checkpoint_every = 1000;
  std::size_t jobs = 1;
  bool episode_csv = true;

  RademacherRunConfig rademacher;
  VisualizeRunConfig visualize;

  std::size_t resolved_train_queries() const;
  std::size_t resolved_train_episodes() const;
  std::size_t resolved_lr_halving() const;
  TrainConfig train_config() const;
  EvalConfig eval_config() const;
};

/// Builds and validates a config; unknown keys, bad values and inconsistent
/// settings are all reported in one ConfigError.
RunConfig build_config(const ConfigEntries& entries);
/// Canonical TOML-style dump of every key; parses back to the same config.
std::string resolved_config_text(const RunConfig& config);

/// `output` resolved against $BSNET_OUTPUT_ROOT when relative and set.
std::filesystem::path output_directory(const RunConfig& config);

}  // namespace bsnet
