#pragma once

#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "bsnet/checkpoint.hpp"
#include "bsnet/config.hpp"
#include "bsnet/rademacher.hpp"

namespace bsnet {

/// Full dataset named by the config: synthetic, or an image directory
/// (DataError if it is missing or unusable).
LabeledDataset load_dataset(const RunConfig& config);
DatasetSplits make_splits(const LabeledDataset& dataset, const RunConfig& config);

/// Creates the output directory and writes config.resolved.toml into it.
std::filesystem::path prepare_output(const RunConfig& config);

struct TrainSummary {
  std::filesystem::path checkpoint;
  std::size_t episodes_done = 0;
  double mean_accuracy = 0.0;
  std::vector<std::string> events;
};

/// Artifacts: checkpoint.bin (every checkpoint_every episodes and at the end),
/// train_log.csv (appended on resume), timing.csv, config.resolved.toml,
/// manifest.json for image directories. `resume` continues from a checkpoint.
TrainSummary run_train(const RunConfig& config,
                       const std::optional<std::filesystem::path>& resume = std::nullopt,
                       std::ostream* progress = nullptr);

/// Writes eval.json and, when enabled, eval_episodes.csv.
EvalReport run_eval(const RunConfig& config, const std::filesystem::path& checkpoint);

struct RademacherSummary {
  std::vector<BoundReport> reports;  // one per seeded sample
  bool all_hold = false;
  std::size_t witnesses_checked = 0;
  std::size_t witnesses_exact = 0;
};

RademacherSummary rademacher_lab(const RunConfig& config);
/// rademacher_lab plus rademacher.json in the output directory.
RademacherSummary run_rademacher(const RunConfig& config);
std::string rademacher_json(const RademacherSummary& summary);

struct SweepRow {
  double lambda = 1.0;
  double beta = 1.0;
  AccuracyStats accuracy;
  std::vector<double> head_accuracy;
  std::size_t skipped_steps = 0;
};

/// Loss-weight pairs of the tuning table: lambda = 1 with beta rising from
/// 0.1 to 0.9, the mirrored rows, then equal weights.
std::vector<std::pair<double, double>> loss_weight_grid();

/// Trains and evaluates one two-head model per weight pair on the same data,
/// seeds and budgets; only the loss weights differ between rows.
std::vector<SweepRow> weight_sweep(const RunConfig& base,
                                   const std::vector<std::pair<double, double>>& grid,
                                   std::ostream* progress = nullptr);
/// Markdown table: lambda, beta, mean accuracy +- CI, per-head accuracy.
std::string sweep_table(const std::vector<SweepRow>& rows);

/// Grad-CAM PNGs for the configured episodes; returns the files written.
std::vector<std::filesystem::path> run_visualize(const RunConfig& config,
                                                 const std::filesystem::path& checkpoint);

/// Writes the synthetic dataset as an image directory plus manifest.json.
std::size_t run_synth(const RunConfig& config);

}  // namespace bsnet
