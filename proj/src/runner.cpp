#include "bsnet/runner.hpp"

#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "bsnet/explain.hpp"

namespace bsnet {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kVisualizeStream = 0x7669;

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

const LabeledDataset& eval_split(const DatasetSplits& splits, const RunConfig& config) {
  return config.eval_split == "val" ? splits.val : splits.test;
}

}  // namespace

LabeledDataset load_dataset(const RunConfig& config) {
  if (config.dataset == "synthetic") return generate_synthetic(config.synthetic);
  const fs::path root(config.dataset);
  if (!fs::is_directory(root)) throw DataError("dataset directory not found: " + root.string());
  return load_image_dir(root);
}

DatasetSplits make_splits(const LabeledDataset& dataset, const RunConfig& config) {
  if (config.split_classes.empty()) return split_dataset(dataset, config.seed);
  return split_counts(dataset, config.seed,
                      {config.split_classes[0], config.split_classes[1], config.split_classes[2]});
}

fs::path prepare_output(const RunConfig& config) {
  const auto dir = output_directory(config);
  fs::create_directories(dir);
  write_text(dir / "config.resolved.toml", resolved_config_text(config));
  return dir;
}

TrainSummary run_train(const RunConfig& config, const std::optional<fs::path>& resume,
                       std::ostream* progress) {
  set_numeric_mode(config.numeric_mode);
  const auto dataset = load_dataset(config);
  const auto splits = make_splits(dataset, config);
  Rng probe(0);  // data errors surface before any output is written
  EpisodeSampler(splits.train).sample(config.way, config.shot, config.resolved_train_queries(), probe);

  BisimModel model(config.model, config.seed);
  Adam optimizer(model.state().parameters, config.adam);
  std::size_t first = 0;
  if (resume) first = restore(model, &optimizer, read_checkpoint(*resume));

  const auto dir = prepare_output(config);
  if (config.dataset != "synthetic") write_text(dir / "manifest.json", manifest_json(dataset));
  for (const auto& e : dataset.load_errors) {
    if (progress) *progress << "warning: " << e << "\n";
  }

  const bool append = resume.has_value() && fs::exists(dir / "train_log.csv");
  const auto mode = append ? std::ios::app : std::ios::trunc;
  std::ofstream log(dir / "train_log.csv", mode);
  std::ofstream timing(dir / "timing.csv", mode);
  if (!log || !timing) throw DataError("cannot write training logs in " + dir.string());
  if (!append) {
    log << "episode,loss,accuracy,one_hot_loss,lr,skipped\n";
    timing << "episode,wallclock_ms\n";
  }

  const auto train = config.train_config();
  const auto checkpoint_path = dir / "checkpoint.bin";
  auto on_episode = [&](const EpisodeLog& e) {
    log << e.episode << ',' << fmt(e.loss) << ',' << fmt(e.accuracy) << ','
        << fmt(e.one_hot_loss) << ',' << fmt(e.lr) << ','
        << (e.skipped ? 1 : 0) << '\n';
    timing << e.episode << ',' << fmt(e.wallclock_ms) << '\n';
    if (config.checkpoint_every && e.episode % config.checkpoint_every == 0) {
      log.flush();
      write_checkpoint(checkpoint_path, capture(model, &optimizer, e.episode, config.numeric_mode));
    }
    if (progress && (e.episode % 100 == 0 || e.episode == train.episodes)) {
      *progress << "episode " << e.episode << "/" << train.episodes << " loss " << e.loss
                << " acc " << e.accuracy << "\n";
    }
  };
  const auto result = meta_train(model, optimizer, splits.train, train, first, on_episode);
  const auto done = std::max(first, train.episodes);
  write_checkpoint(checkpoint_path, capture(model, &optimizer, done, config.numeric_mode));

  TrainSummary s;
  s.checkpoint = checkpoint_path;
  s.episodes_done = done;
  s.mean_accuracy = result.mean_accuracy;
  s.events = result.events;
  if (!s.events.empty()) {
    std::string text;
    for (const auto& e : s.events) text += e + "\n";
    write_text(dir / "events.log", text);
  }
  return s;
}

EvalReport run_eval(const RunConfig& config, const fs::path& checkpoint) {
  set_numeric_mode(config.numeric_mode);
  const auto ck = read_checkpoint(checkpoint);
  BisimModel model(config.model, config.seed);
  restore(model, nullptr, ck);
  const auto dataset = load_dataset(config);
  const auto splits = make_splits(dataset, config);
  const auto& split = eval_split(splits, config);

  const auto report = evaluate(model, split, config.eval_config());
  const auto dir = prepare_output(config);
  write_text(dir / "eval.json", report_json(report) + "\n");
  if (config.episode_csv) {
    std::string csv = "episode,accuracy\n";
    for (std::size_t i = 0; i < report.episode_accuracy.size(); ++i) {
      csv += std::to_string(i + 1) + "," + fmt(report.episode_accuracy[i]) + "\n";
    }
    write_text(dir / "eval_episodes.csv", csv);
  }
  return report;
}

RademacherSummary rademacher_lab(const RunConfig& config) {
  const auto& r = config.rademacher;
  const auto families = r.family == "tanh" ? tanh_toy_families(r.input_dim, r.hidden)
                                           : linear_toy_families();
  const std::size_t dim = r.family == "tanh" ? r.input_dim : 1;
  BoundCheckConfig tc;
  tc.n_sigma = r.n_sigma;
  tc.budget.restarts = r.restarts;
  tc.budget.steps = r.steps;
  tc.witnesses = r.witnesses;

  RademacherSummary s;
  s.all_hold = true;
  for (std::size_t k = 0; k < r.samples; ++k) {
    Rng rng = stream_rng(config.seed, 0x7261, k);
    const auto sample = random_sample(r.sample_size, dim, rng);
    tc.seed = rng();
    auto rep = check_shared_bound(sample, families.i, families.j, families.z, tc);
    s.all_hold = s.all_hold && rep.inequality_holds;
    s.witnesses_checked += rep.witnesses_checked;
    s.witnesses_exact += rep.witnesses_exact;
    s.reports.push_back(std::move(rep));
  }
  return s;
}

std::string rademacher_json(const RademacherSummary& s) {
  nlohmann::ordered_json j;
  j["inequality_holds_all"] = s.all_hold;
  j["witnesses_checked"] = s.witnesses_checked;
  j["witnesses_exact"] = s.witnesses_exact;
  auto reports = nlohmann::ordered_json::array();
  for (const auto& r : s.reports) reports.push_back(nlohmann::ordered_json::parse(bound_json(r)));
  j["samples"] = std::move(reports);
  return j.dump(2);
}

RademacherSummary run_rademacher(const RunConfig& config) {
  const auto s = rademacher_lab(config);
  const auto dir = prepare_output(config);
  write_text(dir / "rademacher.json", rademacher_json(s) + "\n");
  return s;
}

std::vector<fs::path> run_visualize(const RunConfig& config, const fs::path& checkpoint) {
  set_numeric_mode(config.numeric_mode);
  const auto ck = read_checkpoint(checkpoint);
  BisimModel model(config.model, config.seed);
  restore(model, nullptr, ck);
  const auto dataset = load_dataset(config);
  const auto splits = make_splits(dataset, config);
  const auto& split = eval_split(splits, config);
  const EpisodeSampler sampler(split);
  const auto dir = prepare_output(config);

  std::vector<fs::path> written;
  nlohmann::ordered_json index = nlohmann::ordered_json::array();
  for (std::size_t ep = 0; ep < config.visualize.episodes; ++ep) {
    Rng rng = stream_rng(config.seed, kVisualizeStream, ep);
    const auto episode = sampler.sample(config.way, config.shot, config.test_queries, rng);
    const auto support = make_batch(split, episode.support, false, rng);
    const auto queries = make_batch(split, episode.query, false, rng);
    std::size_t count = episode.query.size();
    if (config.visualize.queries) count = std::min(count, config.visualize.queries);
    for (std::size_t q = 0; q < count; ++q) {
      std::optional<std::size_t> target;
      if (config.visualize.target == "true") target = episode.query_labels[q];
      const auto ex = explain_query(model, support, queries, episode.way, episode.shot, q, target);
      const auto& image = *split.items[episode.query[q]].image;
      auto emit = [&](const Heatmap& h) {
        written.push_back(write_heatmap(dir, ep, q, h, image));
        index.push_back({{"file", written.back().filename().string()},
                         {"episode", ep},
                         {"query", q},
                         {"class", h.target_class},
                         {"head", h.head},
                         {"flat", h.flat},
                         {"true_class", episode.query_labels[q]},
                         {"predicted_class", ex.predicted_class}});
      };
      for (const auto& h : ex.per_head) emit(h);
      emit(ex.mean);
    }
  }
  write_text(dir / "heatmaps.json", index.dump(2) + "\n");
  return written;
}

std::size_t run_synth(const RunConfig& config) {
  const auto dataset = generate_synthetic(config.synthetic);
  const auto dir = prepare_output(config);
  write_image_dir(dataset, dir / "images");
  write_text(dir / "manifest.json", manifest_json(dataset));
  return dataset.items.size();
}

std::vector<std::pair<double, double>> loss_weight_grid() {
  std::vector<std::pair<double, double>> grid;
  for (double w : {0.1, 0.3, 0.5, 0.7, 0.9}) grid.emplace_back(1.0, w);
  for (double w : {0.1, 0.3, 0.5, 0.7, 0.9}) grid.emplace_back(w, 1.0);
  grid.emplace_back(1.0, 1.0);
  return grid;
}

std::vector<SweepRow> weight_sweep(const RunConfig& base,
                                   const std::vector<std::pair<double, double>>& grid,
                                   std::ostream* progress) {
  if (base.model.heads.size() != 2) {
    throw ConfigError("weight sweep needs exactly two heads, got " +
                      std::to_string(base.model.heads.size()));
  }
  set_numeric_mode(base.numeric_mode);
  const auto dataset = load_dataset(base);
  const auto splits = make_splits(dataset, base);
  std::vector<SweepRow> rows;
  for (const auto& [lambda, beta] : grid) {
    auto config = base;
    config.model.loss_weights = {lambda, beta};
    config.model.validate();
    BisimModel model(config.model, config.seed);
    Adam optimizer(model.state().parameters, config.adam);
    const auto trained = meta_train(model, optimizer, splits.train, config.train_config());
    const auto report = evaluate(model, eval_split(splits, config), config.eval_config());
    SweepRow row;
    row.lambda = lambda;
    row.beta = beta;
    row.accuracy = report.combined;
    row.head_accuracy = report.head_accuracy;
    row.skipped_steps = trained.events.size();
    rows.push_back(row);
    if (progress) {
      *progress << "weights " << lambda << "/" << beta << ": " << report.combined.mean << "\n";
    }
  }
  return rows;
}

std::string sweep_table(const std::vector<SweepRow>& rows) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(2);
  out << "| lambda | beta | accuracy (%) | head 1 (%) | head 2 (%) |\n";
  out << "|---|---|---|---|---|\n";
  for (const auto& r : rows) {
    out << "| " << std::setprecision(1) << r.lambda << " | " << r.beta << " | "
        << std::setprecision(2) << 100 * r.accuracy.mean << " +- "
        << 100 * r.accuracy.ci_half_width;
    for (double h : r.head_accuracy) out << " | " << 100 * h;
    out << " |\n";
  }
  return out.str();
}

}  // namespace bsnet
