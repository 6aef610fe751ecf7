#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "bsnet/bisim.hpp"
#include "bsnet/data.hpp"

namespace bsnet {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.0;
};

class Adam {
 public:
  Adam(std::vector<NamedArray> params, AdamConfig config = {});

  /// One update from the parameters' current gradients.
  void step();
  void zero_grad();
  /// True when every gradient entry is finite.
  bool gradients_finite() const;

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }
  std::uint64_t steps() const { return steps_; }
  void set_steps(std::uint64_t steps) { steps_ = steps; }
  const AdamConfig& config() const { return config_; }
  const std::vector<NamedArray>& params() const { return params_; }
  std::vector<std::vector<double>>& first_moments() { return m_; }
  std::vector<std::vector<double>>& second_moments() { return v_; }

 private:
  std::vector<NamedArray> params_;
  AdamConfig config_;
  double lr_;
  std::uint64_t steps_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

inline constexpr std::size_t kDn4HalvingInterval = 100000;

/// Episode budget by method: 300k with an image-to-class head, else 60k
/// (1-shot) or 40k (5-shot).
std::size_t default_train_episodes(const ModelSpec& spec, std::size_t shot);
/// Query images per class in training: 15/10 (1/5-shot) with an
/// image-to-class head, else 16.
std::size_t default_train_queries(const ModelSpec& spec, std::size_t shot);

/// Seed of the RNG stream for one (seed, stream, index) triple.
Rng stream_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t index);

struct TrainConfig {
  std::size_t way = 5;
  std::size_t shot = 1;
  std::size_t n_query = 16;
  std::size_t episodes = 60000;
  AdamConfig adam;
  /// Halve the learning rate every this many episodes; 0 disables.
  std::size_t lr_halving_interval = 0;
  AugmentConfig augment;
  std::uint64_t seed = 1;
  /// Consecutive skipped steps tolerated before training aborts.
  std::size_t max_consecutive_skips = 20;
};

struct EpisodeLog {
  std::size_t episode = 0;  // 1-based
  double loss = 0.0;
  double accuracy = 0.0;
  double one_hot_loss = 0.0;  // literal one-hot form, reported only
  double lr = 0.0;
  double wallclock_ms = 0.0;
  bool skipped = false;
};

struct TrainResult {
  double mean_accuracy = 0.0;
  std::vector<EpisodeLog> log;
  std::vector<std::string> events;  // skipped steps and their causes
};

double learning_rate_at(const TrainConfig& config, std::size_t episode_index);

using EpisodeCallback = std::function<void(const EpisodeLog&)>;

/// Episodes [first_episode, config.episodes) of the meta-training loop. The
/// episode stream depends only on (seed, episode index), so a resumed run
/// continues the same sequence.
TrainResult meta_train(BisimModel& model, Adam& optimizer, const LabeledDataset& train,
                       const TrainConfig& config, std::size_t first_episode = 0,
                       const EpisodeCallback& on_episode = {});

/// Score and loss of one sampled episode; no optimizer step.
struct EpisodeOutcome {
  ScoreMatrix scores;
  EpisodeResult result;
};
EpisodeOutcome run_episode(const BisimModel& model, const LabeledDataset& data,
                           const Episode& episode, BatchNormMode mode, bool augment, Rng& rng,
                           const AugmentConfig& augment_config = {});

// Evaluation ------------------------------------------------------------------

inline constexpr std::size_t kDefaultEvalEpisodes = 600;
inline constexpr std::size_t kDefaultEvalQueries = 16;
inline constexpr std::size_t kDn4EvalRepeats = 5;

struct AccuracyStats {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation, 0 for n = 1
  double ci_half_width = 0.0;
  std::size_t n = 0;
};

/// 1.96 * std / sqrt(n).
double ci_half_width(double std, std::size_t n);
AccuracyStats accuracy_stats(const std::vector<double>& accuracies);

struct EvalConfig {
  std::size_t way = 5;
  std::size_t shot = 1;
  std::size_t n_query = kDefaultEvalQueries;
  std::size_t episodes = kDefaultEvalEpisodes;
  /// Whole-procedure repeats; 0 selects 5 with an image-to-class head, else 1.
  std::size_t repeats = 0;
  std::uint64_t seed = 1;
  std::size_t jobs = 1;
};

struct EvalReport {
  AccuracyStats combined;             // averaged over repeats
  std::vector<double> head_accuracy;  // per head, averaged over all episodes
  std::vector<HeadKind> heads;
  std::vector<AccuracyStats> repeats;
  std::vector<double> episode_accuracy;  // first repeat, episode order
};

EvalReport evaluate(const BisimModel& model, const LabeledDataset& split, const EvalConfig& config);
std::string report_json(const EvalReport& report);

}  // namespace bsnet
