#include "bsnet/config.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>

namespace bsnet {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// Strips a trailing comment that is not inside quotes.
std::string strip_comment(const std::string& line) {
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"') quoted = !quoted;
    if (line[i] == '#' && !quoted) return line.substr(0, i);
  }
  return line;
}

std::string unquote(const std::string& s, std::string& error) {
  if (s.size() >= 2 && s.front() == '"' && s.back() == '"') return s.substr(1, s.size() - 2);
  if (s.find('"') != std::string::npos) error = "unbalanced quotes in value " + s;
  return s;
}

ConfigEntry parse_value(const std::string& raw, std::string& error) {
  ConfigEntry e;
  const auto v = trim(raw);
  if (v.empty()) {
    error = "missing value";
    return e;
  }
  if (v.front() == '[') {
    if (v.back() != ']') {
      error = "unterminated list " + v;
      return e;
    }
    e.is_list = true;
    const auto body = trim(v.substr(1, v.size() - 2));
    if (body.empty()) return e;
    std::stringstream ss(body);
    std::string item;
    while (std::getline(ss, item, ',')) {
      const auto t = trim(item);
      if (t.empty()) {
        error = "empty list item in " + v;
        return e;
      }
      e.items.push_back(unquote(t, error));
    }
    return e;
  }
  e.items.push_back(unquote(v, error));
  return e;
}

std::string join_errors(const std::vector<std::string>& errors) {
  std::string msg;
  for (const auto& e : errors) msg += "\n  " + e;
  return msg;
}

}  // namespace

ConfigEntries parse_config_text(const std::string& text, const std::string& source) {
  ConfigEntries out;
  std::vector<std::string> errors;
  std::stringstream in(text);
  std::string line, section;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    const auto where = source + ":" + std::to_string(n);
    const auto body = trim(strip_comment(line));
    if (body.empty()) continue;
    if (body.front() == '[' && body.find('=') == std::string::npos) {
      if (body.back() != ']' || body.size() < 3) {
        errors.push_back(where + ": malformed section header");
        continue;
      }
      section = trim(body.substr(1, body.size() - 2));
      continue;
    }
    const auto eq = body.find('=');
    if (eq == std::string::npos) {
      errors.push_back(where + ": expected key = value");
      continue;
    }
    const auto key = trim(body.substr(0, eq));
    if (key.empty()) {
      errors.push_back(where + ": empty key");
      continue;
    }
    const auto full = section.empty() ? key : section + "." + key;
    std::string error;
    auto entry = parse_value(body.substr(eq + 1), error);
    if (!error.empty()) {
      errors.push_back(where + ": " + full + ": " + error);
      continue;
    }
    if (out.count(full)) {
      errors.push_back(where + ": duplicate key " + full + " (first at " + out[full].origin + ")");
      continue;
    }
    entry.origin = where;
    out[full] = std::move(entry);
  }
  if (!errors.empty()) throw ConfigError("config syntax errors:" + join_errors(errors));
  return out;
}

ConfigEntries parse_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), path.string());
}

void apply_override(ConfigEntries& entries, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override must be key=value: " + assignment);
  const auto key = trim(assignment.substr(0, eq));
  if (key.empty()) throw ConfigError("override has an empty key: " + assignment);
  std::string error;
  auto entry = parse_value(assignment.substr(eq + 1), error);
  if (!error.empty()) throw ConfigError("override " + key + ": " + error);
  entry.origin = "override";
  entries[key] = std::move(entry);
}

// RunConfig ------------------------------------------------------------------

std::size_t RunConfig::resolved_train_queries() const {
  return train_queries ? train_queries : default_train_queries(model, shot);
}

std::size_t RunConfig::resolved_train_episodes() const {
  return train_episodes ? train_episodes : default_train_episodes(model, shot);
}

std::size_t RunConfig::resolved_lr_halving() const {
  if (lr_halving >= 0) return static_cast<std::size_t>(lr_halving);
  return model.uses_image_to_class() ? kDn4HalvingInterval : 0;
}

TrainConfig RunConfig::train_config() const {
  TrainConfig t;
  t.way = way;
  t.shot = shot;
  t.n_query = resolved_train_queries();
  t.episodes = resolved_train_episodes();
  t.adam = adam;
  t.lr_halving_interval = resolved_lr_halving();
  t.augment = augment;
  t.seed = seed;
  return t;
}

EvalConfig RunConfig::eval_config() const {
  EvalConfig e;
  e.way = way;
  e.shot = shot;
  e.n_query = test_queries;
  e.episodes = eval_episodes;
  e.repeats = eval_repeats;
  e.seed = seed;
  e.jobs = jobs;
  return e;
}

namespace {

struct BadValue {
  std::string message;
};

const std::string& scalar(const ConfigEntry& e) {
  if (e.is_list || e.items.size() != 1) throw BadValue{"expected a single value"};
  return e.items[0];
}

std::size_t parse_size(const std::string& s) {
  std::size_t v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) {
    throw BadValue{"expected a non-negative integer, got '" + s + "'"};
  }
  return v;
}

std::int64_t parse_int(const std::string& s) {
  std::int64_t v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) {
    throw BadValue{"expected an integer, got '" + s + "'"};
  }
  return v;
}

double parse_double(const std::string& s) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size() || !std::isfinite(v)) {
    throw BadValue{"expected a finite number, got '" + s + "'"};
  }
  return v;
}

bool parse_bool(const std::string& s) {
  if (s == "true") return true;
  if (s == "false") return false;
  throw BadValue{"expected true or false, got '" + s + "'"};
}

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

using Setter = std::function<void(const ConfigEntry&, RunConfig&)>;

Setter size_field(std::size_t RunConfig::*field) {
  return [field](const ConfigEntry& e, RunConfig& c) { c.*field = parse_size(scalar(e)); };
}

template <typename Sub>
Setter sub_size(Sub RunConfig::*sub, std::size_t Sub::*field) {
  return [sub, field](const ConfigEntry& e, RunConfig& c) {
    (c.*sub).*field = parse_size(scalar(e));
  };
}

template <typename Sub>
Setter sub_double(Sub RunConfig::*sub, double Sub::*field) {
  return [sub, field](const ConfigEntry& e, RunConfig& c) {
    (c.*sub).*field = parse_double(scalar(e));
  };
}

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"backbone",
       [](const ConfigEntry& e, RunConfig& c) {
         try {
           c.model.backbone = parse_backbone(scalar(e));
         } catch (const ConfigError& err) {
           throw BadValue{err.what()};
         }
       }},
      {"heads",
       [](const ConfigEntry& e, RunConfig& c) {
         c.model.heads.clear();
         for (const auto& item : e.items) {
           try {
             c.model.heads.push_back(parse_head(item));
           } catch (const ConfigError& err) {
             throw BadValue{err.what()};
           }
         }
       }},
      {"loss_weights",
       [](const ConfigEntry& e, RunConfig& c) {
         c.model.loss_weights.clear();
         for (const auto& item : e.items) c.model.loss_weights.push_back(parse_double(item));
       }},
      {"way", size_field(&RunConfig::way)},
      {"shot", size_field(&RunConfig::shot)},
      {"train_queries", size_field(&RunConfig::train_queries)},
      {"test_queries", size_field(&RunConfig::test_queries)},
      {"train_episodes", size_field(&RunConfig::train_episodes)},
      {"eval_episodes", size_field(&RunConfig::eval_episodes)},
      {"eval_repeats", size_field(&RunConfig::eval_repeats)},
      {"eval_split", [](const ConfigEntry& e, RunConfig& c) { c.eval_split = scalar(e); }},
      {"lr", sub_double(&RunConfig::adam, &AdamConfig::lr)},
      {"beta1", sub_double(&RunConfig::adam, &AdamConfig::beta1)},
      {"beta2", sub_double(&RunConfig::adam, &AdamConfig::beta2)},
      {"adam_epsilon", sub_double(&RunConfig::adam, &AdamConfig::epsilon)},
      {"weight_decay", sub_double(&RunConfig::adam, &AdamConfig::weight_decay)},
      {"lr_halving",
       [](const ConfigEntry& e, RunConfig& c) { c.lr_halving = parse_int(scalar(e)); }},
      {"augment",
       [](const ConfigEntry& e, RunConfig& c) { c.augment.enabled = parse_bool(scalar(e)); }},
      {"augment.crop_scale_min", sub_double(&RunConfig::augment, &AugmentConfig::crop_scale_min)},
      {"augment.crop_scale_max", sub_double(&RunConfig::augment, &AugmentConfig::crop_scale_max)},
      {"augment.crop_ratio_min", sub_double(&RunConfig::augment, &AugmentConfig::crop_ratio_min)},
      {"augment.crop_ratio_max", sub_double(&RunConfig::augment, &AugmentConfig::crop_ratio_max)},
      {"augment.jitter", sub_double(&RunConfig::augment, &AugmentConfig::jitter)},
      {"augment.flip_probability",
       sub_double(&RunConfig::augment, &AugmentConfig::flip_probability)},
      {"seed",
       [](const ConfigEntry& e, RunConfig& c) { c.seed = parse_size(scalar(e)); }},
      {"numeric_mode",
       [](const ConfigEntry& e, RunConfig& c) {
         const auto& v = scalar(e);
         if (v == "f64") {
           c.numeric_mode = NumericMode::f64;
         } else if (v == "f32") {
           c.numeric_mode = NumericMode::f32;
         } else {
           throw BadValue{"expected f64 or f32, got '" + v + "'"};
         }
       }},
      {"dataset", [](const ConfigEntry& e, RunConfig& c) { c.dataset = scalar(e); }},
      {"split_classes",
       [](const ConfigEntry& e, RunConfig& c) {
         c.split_classes.clear();
         for (const auto& item : e.items) c.split_classes.push_back(parse_size(item));
       }},
      {"synthetic.classes", sub_size(&RunConfig::synthetic, &SyntheticSpec::classes)},
      {"synthetic.images_per_class",
       sub_size(&RunConfig::synthetic, &SyntheticSpec::images_per_class)},
      {"synthetic.variation", sub_double(&RunConfig::synthetic, &SyntheticSpec::variation)},
      {"synthetic.seed",
       [](const ConfigEntry& e, RunConfig& c) { c.synthetic.seed = parse_size(scalar(e)); }},
      {"output", [](const ConfigEntry& e, RunConfig& c) { c.output = scalar(e); }},
      {"checkpoint_every", size_field(&RunConfig::checkpoint_every)},
      {"jobs", size_field(&RunConfig::jobs)},
      {"episode_csv",
       [](const ConfigEntry& e, RunConfig& c) { c.episode_csv = parse_bool(scalar(e)); }},
      {"rademacher.family",
       [](const ConfigEntry& e, RunConfig& c) { c.rademacher.family = scalar(e); }},
      {"rademacher.sample_size",
       sub_size(&RunConfig::rademacher, &RademacherRunConfig::sample_size)},
      {"rademacher.input_dim", sub_size(&RunConfig::rademacher, &RademacherRunConfig::input_dim)},
      {"rademacher.hidden", sub_size(&RunConfig::rademacher, &RademacherRunConfig::hidden)},
      {"rademacher.samples", sub_size(&RunConfig::rademacher, &RademacherRunConfig::samples)},
      {"rademacher.n_sigma", sub_size(&RunConfig::rademacher, &RademacherRunConfig::n_sigma)},
      {"rademacher.restarts", sub_size(&RunConfig::rademacher, &RademacherRunConfig::restarts)},
      {"rademacher.steps", sub_size(&RunConfig::rademacher, &RademacherRunConfig::steps)},
      {"rademacher.witnesses", sub_size(&RunConfig::rademacher, &RademacherRunConfig::witnesses)},
      {"visualize.episodes", sub_size(&RunConfig::visualize, &VisualizeRunConfig::episodes)},
      {"visualize.queries", sub_size(&RunConfig::visualize, &VisualizeRunConfig::queries)},
      {"visualize.target",
       [](const ConfigEntry& e, RunConfig& c) { c.visualize.target = scalar(e); }},
  };
  return table;
}

void validate(const RunConfig& c, std::vector<std::string>& errors) {
  auto need = [&](bool ok, const std::string& message) {
    if (!ok) errors.push_back(message);
  };
  try {
    c.model.validate();
  } catch (const ConfigError& e) {
    errors.push_back(e.what());
  }
  need(c.way >= 2, "way must be at least 2");
  need(c.shot >= 1, "shot must be at least 1");
  need(c.test_queries >= 1, "test_queries must be at least 1");
  need(c.eval_episodes >= 1, "eval_episodes must be at least 1");
  need(c.eval_split == "test" || c.eval_split == "val", "eval_split must be test or val");
  need(c.adam.lr >= 0.0, "lr must be non-negative");
  need(c.adam.beta1 >= 0.0 && c.adam.beta1 < 1.0, "beta1 must lie in [0, 1)");
  need(c.adam.beta2 >= 0.0 && c.adam.beta2 < 1.0, "beta2 must lie in [0, 1)");
  need(c.adam.epsilon > 0.0, "adam_epsilon must be positive");
  need(c.lr_halving >= -1, "lr_halving must be -1 (method default), 0 (off) or positive");
  const auto& a = c.augment;
  need(a.crop_scale_min > 0.0 && a.crop_scale_min <= a.crop_scale_max && a.crop_scale_max <= 1.0,
       "augment crop scale bounds must satisfy 0 < min <= max <= 1");
  need(a.crop_ratio_min > 0.0 && a.crop_ratio_min <= a.crop_ratio_max,
       "augment crop ratio bounds must satisfy 0 < min <= max");
  need(a.jitter >= 0.0 && a.jitter < 1.0, "augment.jitter must lie in [0, 1)");
  need(a.flip_probability >= 0.0 && a.flip_probability <= 1.0,
       "augment.flip_probability must lie in [0, 1]");
  need(!c.dataset.empty(), "dataset must be 'synthetic' or a directory");
  need(c.split_classes.empty() || c.split_classes.size() == 3,
       "split_classes must list train, val and test class counts");
  for (auto n : c.split_classes) need(n >= 1, "split_classes entries must be positive");
  if (c.dataset == "synthetic") {
    need(c.synthetic.classes >= 4, "synthetic.classes must be at least 4");
    need(c.synthetic.images_per_class >= 1, "synthetic.images_per_class must be positive");
    need(c.synthetic.variation >= 0.0, "synthetic.variation must be non-negative");
  }
  need(!c.output.empty(), "output must name a directory");
  need(c.jobs >= 1, "jobs must be at least 1");
  const auto& r = c.rademacher;
  need(r.family == "linear" || r.family == "tanh", "rademacher.family must be linear or tanh");
  need(r.sample_size >= 1, "rademacher.sample_size must be at least 1");
  need(r.input_dim >= 1 && r.hidden >= 1, "rademacher.input_dim and hidden must be positive");
  need(r.samples >= 1, "rademacher.samples must be at least 1");
  need(r.n_sigma >= 1, "rademacher.n_sigma must be at least 1");
  need(r.restarts >= 1, "rademacher.restarts must be at least 1");
  need(c.visualize.target == "predicted" || c.visualize.target == "true",
       "visualize.target must be predicted or true");
  need(c.visualize.episodes >= 1, "visualize.episodes must be at least 1");
}

}  // namespace

RunConfig build_config(const ConfigEntries& entries) {
  RunConfig config;
  std::vector<std::string> errors;
  const auto& table = setters();
  for (const auto& [key, entry] : entries) {
    const auto it = table.find(key);
    if (it == table.end()) {
      errors.push_back(entry.origin + ": unknown key '" + key + "'");
      continue;
    }
    try {
      it->second(entry, config);
    } catch (const BadValue& bad) {
      errors.push_back(entry.origin + ": " + key + ": " + bad.message);
    }
  }
  validate(config, errors);
  if (!errors.empty()) throw ConfigError("invalid configuration:" + join_errors(errors));
  return config;
}

std::string resolved_config_text(const RunConfig& c) {
  std::ostringstream os;
  auto quoted = [](const std::string& s) { return "\"" + s + "\""; };
  auto list = [](const auto& items, auto fmt) {
    std::string out = "[";
    for (std::size_t i = 0; i < items.size(); ++i) out += (i ? ", " : "") + fmt(items[i]);
    return out + "]";
  };
  os << "backbone = " << to_string(c.model.backbone) << "\n";
  os << "heads = " << list(c.model.heads, [](HeadKind k) { return to_string(k); }) << "\n";
  os << "loss_weights = " << list(c.model.loss_weights, fmt_double) << "\n";
  os << "way = " << c.way << "\n";
  os << "shot = " << c.shot << "\n";
  os << "train_queries = " << c.resolved_train_queries() << "\n";
  os << "test_queries = " << c.test_queries << "\n";
  os << "train_episodes = " << c.resolved_train_episodes() << "\n";
  os << "eval_episodes = " << c.eval_episodes << "\n";
  os << "eval_repeats = " << c.eval_repeats << "\n";
  os << "eval_split = " << c.eval_split << "\n";
  os << "lr = " << fmt_double(c.adam.lr) << "\n";
  os << "beta1 = " << fmt_double(c.adam.beta1) << "\n";
  os << "beta2 = " << fmt_double(c.adam.beta2) << "\n";
  os << "adam_epsilon = " << fmt_double(c.adam.epsilon) << "\n";
  os << "weight_decay = " << fmt_double(c.adam.weight_decay) << "\n";
  os << "lr_halving = " << c.resolved_lr_halving() << "\n";
  os << "augment = " << (c.augment.enabled ? "true" : "false") << "\n";
  os << "augment.crop_scale_min = " << fmt_double(c.augment.crop_scale_min) << "\n";
  os << "augment.crop_scale_max = " << fmt_double(c.augment.crop_scale_max) << "\n";
  os << "augment.crop_ratio_min = " << fmt_double(c.augment.crop_ratio_min) << "\n";
  os << "augment.crop_ratio_max = " << fmt_double(c.augment.crop_ratio_max) << "\n";
  os << "augment.jitter = " << fmt_double(c.augment.jitter) << "\n";
  os << "augment.flip_probability = " << fmt_double(c.augment.flip_probability) << "\n";
  os << "seed = " << c.seed << "\n";
  os << "numeric_mode = " << (c.numeric_mode == NumericMode::f32 ? "f32" : "f64") << "\n";
  os << "dataset = " << quoted(c.dataset) << "\n";
  os << "split_classes = " << list(c.split_classes, [](std::size_t n) { return std::to_string(n); })
     << "\n";
  os << "output = " << quoted(c.output) << "\n";
  os << "checkpoint_every = " << c.checkpoint_every << "\n";
  os << "jobs = " << c.jobs << "\n";
  os << "episode_csv = " << (c.episode_csv ? "true" : "false") << "\n";
  os << "\n[synthetic]\n";
  os << "classes = " << c.synthetic.classes << "\n";
  os << "images_per_class = " << c.synthetic.images_per_class << "\n";
  os << "variation = " << fmt_double(c.synthetic.variation) << "\n";
  os << "seed = " << c.synthetic.seed << "\n";
  os << "\n[rademacher]\n";
  os << "family = " << c.rademacher.family << "\n";
  os << "sample_size = " << c.rademacher.sample_size << "\n";
  os << "input_dim = " << c.rademacher.input_dim << "\n";
  os << "hidden = " << c.rademacher.hidden << "\n";
  os << "samples = " << c.rademacher.samples << "\n";
  os << "n_sigma = " << c.rademacher.n_sigma << "\n";
  os << "restarts = " << c.rademacher.restarts << "\n";
  os << "steps = " << c.rademacher.steps << "\n";
  os << "witnesses = " << c.rademacher.witnesses << "\n";
  os << "\n[visualize]\n";
  os << "episodes = " << c.visualize.episodes << "\n";
  os << "queries = " << c.visualize.queries << "\n";
  os << "target = " << c.visualize.target << "\n";
  return os.str();
}

std::filesystem::path output_directory(const RunConfig& config) {
  std::filesystem::path out(config.output);
  if (out.is_relative()) {
    if (const char* root = std::getenv("BSNET_OUTPUT_ROOT"); root && *root) {
      return std::filesystem::path(root) / out;
    }
  }
  return out;
}

}  // namespace bsnet
