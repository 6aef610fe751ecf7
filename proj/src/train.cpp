#include "bsnet/train.hpp"

#include <json.hpp>

#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <mutex>
#include <thread>

namespace bsnet {

// Adam ------------------------------------------------------------------------

Adam::Adam(std::vector<NamedArray> params, AdamConfig config)
    : params_(std::move(params)), config_(config), lr_(config.lr) {
  for (const auto& p : params_) {
    m_.emplace_back(p.value.size(), 0.0);
    v_.emplace_back(p.value.size(), 0.0);
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.value.zero_grad();
}

bool Adam::gradients_finite() const {
  for (const auto& p : params_) {
    if (!p.value.has_grad()) continue;
    for (double g : p.value.grad()) {
      if (!std::isfinite(g)) return false;
    }
  }
  return true;
}

void Adam::step() {
  ++steps_;
  const double t = static_cast<double>(steps_);
  const double c1 = 1.0 - std::pow(config_.beta1, t);
  const double c2 = 1.0 - std::pow(config_.beta2, t);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i].value;
    if (!p.has_grad()) continue;
    const auto g = p.grad();
    auto w = p.mutable_data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = g[j] + config_.weight_decay * w[j];
      m[j] = config_.beta1 * m[j] + (1.0 - config_.beta1) * gj;
      v[j] = config_.beta2 * v[j] + (1.0 - config_.beta2) * gj * gj;
      if (lr_ != 0.0) w[j] -= lr_ * (m[j] / c1) / (std::sqrt(v[j] / c2) + config_.epsilon);
    }
  }
}

// Defaults ----------------------------------------------------------------------

std::size_t default_train_episodes(const ModelSpec& spec, std::size_t shot) {
  if (spec.uses_image_to_class()) return 300000;
  return shot == 1 ? 60000 : 40000;
}

std::size_t default_train_queries(const ModelSpec& spec, std::size_t shot) {
  if (spec.uses_image_to_class()) return shot == 1 ? 15 : 10;
  return 16;
}

Rng stream_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  return Rng(seq);
}

namespace {

constexpr std::uint64_t kTrainStream = 0x7472;
constexpr std::uint64_t kEvalStream = 0x6576;

double elapsed_ms(std::chrono::steady_clock::time_point since) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - since)
      .count();
}

std::vector<LossKind> loss_kinds(const BisimModel& model) {
  std::vector<LossKind> out;
  for (std::size_t d = 0; d < model.head_count(); ++d) out.push_back(model.head(d).loss_kind());
  return out;
}

std::vector<double> loss_weights(const BisimModel& model) {
  std::vector<double> out;
  for (std::size_t d = 0; d < model.head_count(); ++d) out.push_back(model.spec().weight(d));
  return out;
}

std::vector<HeadKind> head_kinds(const BisimModel& model) {
  std::vector<HeadKind> out;
  for (std::size_t d = 0; d < model.head_count(); ++d) out.push_back(model.head(d).kind());
  return out;
}

}  // namespace

double learning_rate_at(const TrainConfig& config, std::size_t episode_index) {
  if (config.lr_halving_interval == 0) return config.adam.lr;
  const auto halvings = episode_index / config.lr_halving_interval;
  return config.adam.lr * std::pow(0.5, static_cast<double>(halvings));
}

EpisodeOutcome run_episode(const BisimModel& model, const LabeledDataset& data,
                           const Episode& episode, BatchNormMode mode, bool augment, Rng& rng,
                           const AugmentConfig& augment_config) {
  const auto support = make_batch(data, episode.support, augment, rng, augment_config);
  const auto query = make_batch(data, episode.query, augment, rng, augment_config);
  const auto features = model.embed(support, query, episode.way, episode.shot, mode);
  const auto scores = model.head_scores(features, mode);
  const auto loss = training_loss(scores, episode.query_labels, loss_kinds(model),
                                  loss_weights(model));
  EpisodeOutcome out;
  out.scores = ScoreMatrix::from_heads(scores, head_kinds(model));
  out.result = summarize_episode(out.scores, episode.query_labels, loss.item());
  return out;
}

TrainResult meta_train(BisimModel& model, Adam& optimizer, const LabeledDataset& train,
                       const TrainConfig& config, std::size_t first_episode,
                       const EpisodeCallback& on_episode) {
  const EpisodeSampler sampler(train);
  const auto kinds = loss_kinds(model);
  const auto weights = loss_weights(model);
  TrainResult result;
  double accuracy_sum = 0.0;
  std::size_t counted = 0, consecutive_skips = 0;
  for (std::size_t i = first_episode; i < config.episodes; ++i) {
    const auto start = std::chrono::steady_clock::now();
    Rng rng = stream_rng(config.seed, kTrainStream, i);
    const auto episode = sampler.sample(config.way, config.shot, config.n_query, rng);
    const auto support = make_batch(train, episode.support, true, rng, config.augment);
    const auto query = make_batch(train, episode.query, true, rng, config.augment);

    optimizer.set_lr(learning_rate_at(config, i));
    EpisodeLog entry;
    entry.episode = i + 1;
    entry.lr = optimizer.lr();
    std::string failure;
    try {
      const auto features =
          model.embed(support, query, episode.way, episode.shot, BatchNormMode::train);
      const auto scores = model.head_scores(features, BatchNormMode::train);
      const auto loss = training_loss(scores, episode.query_labels, kinds, weights);
      optimizer.zero_grad();
      loss.backward();
      entry.loss = loss.item();
      const auto matrix = ScoreMatrix::from_heads(scores);
      entry.accuracy = summarize_episode(matrix, episode.query_labels, entry.loss).accuracy;
      entry.one_hot_loss = one_hot_disagreement(matrix, episode.query_labels);
      if (optimizer.gradients_finite()) {
        optimizer.step();
      } else {
        failure = "non-finite gradient";
      }
    } catch (const NumericError& e) {
      failure = e.what();
      entry.loss = std::nan("");
    }
    if (!failure.empty()) {
      entry.skipped = true;
      result.events.push_back("episode " + std::to_string(entry.episode) +
                              ": step skipped (" + failure + ")");
      if (++consecutive_skips > config.max_consecutive_skips) {
        throw NumericError("training aborted after " + std::to_string(consecutive_skips) +
                           " consecutive skipped steps; last: " + failure);
      }
    } else {
      consecutive_skips = 0;
      accuracy_sum += entry.accuracy;
      ++counted;
    }
    entry.wallclock_ms = elapsed_ms(start);
    result.log.push_back(entry);
    if (on_episode) on_episode(entry);
  }
  result.mean_accuracy = counted ? accuracy_sum / static_cast<double>(counted) : 0.0;
  return result;
}

// Evaluation --------------------------------------------------------------------

double ci_half_width(double std, std::size_t n) {
  if (n == 0) return 0.0;
  return 1.96 * std / std::sqrt(static_cast<double>(n));
}

AccuracyStats accuracy_stats(const std::vector<double>& accuracies) {
  AccuracyStats s;
  s.n = accuracies.size();
  if (s.n == 0) return s;
  double total = 0.0;
  for (double a : accuracies) total += a;
  s.mean = total / static_cast<double>(s.n);
  if (s.n > 1) {
    double sq = 0.0;
    for (double a : accuracies) sq += (a - s.mean) * (a - s.mean);
    s.std = std::sqrt(sq / static_cast<double>(s.n - 1));
  }
  s.ci_half_width = ci_half_width(s.std, s.n);
  return s;
}

EvalReport evaluate(const BisimModel& model, const LabeledDataset& split, const EvalConfig& config) {
  if (config.episodes == 0) throw ConfigError("evaluation needs at least one episode");
  const std::size_t repeats =
      config.repeats != 0 ? config.repeats
                          : (model.spec().uses_image_to_class() ? kDn4EvalRepeats : 1);
  const EpisodeSampler sampler(split);
  const auto heads = model.head_count();
  EvalReport report;
  report.heads = head_kinds(model);
  report.head_accuracy.assign(heads, 0.0);

  std::vector<double> head_sum(heads, 0.0);
  for (std::size_t r = 0; r < repeats; ++r) {
    std::vector<double> acc(config.episodes, 0.0);
    std::vector<std::vector<double>> head_acc(config.episodes);
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    auto worker = [&] {
      NoGradGuard no_grad;
      for (std::size_t i = next++; i < config.episodes; i = next++) {
        try {
          Rng rng = stream_rng(config.seed, kEvalStream + r, i);
          const auto episode = sampler.sample(config.way, config.shot, config.n_query, rng);
          const auto outcome =
              run_episode(model, split, episode, BatchNormMode::eval, false, rng);
          acc[i] = outcome.result.accuracy;
          head_acc[i] = outcome.result.head_accuracy;
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
          next = config.episodes;
        }
      }
    };
    const auto jobs = std::max<std::size_t>(1, std::min(config.jobs, config.episodes));
    if (jobs == 1) {
      worker();
    } else {
      std::vector<std::thread> pool;
      for (std::size_t j = 0; j < jobs; ++j) pool.emplace_back(worker);
      for (auto& t : pool) t.join();
    }
    if (error) std::rethrow_exception(error);
    for (std::size_t i = 0; i < config.episodes; ++i) {
      for (std::size_t d = 0; d < heads; ++d) head_sum[d] += head_acc[i][d];
    }
    report.repeats.push_back(accuracy_stats(acc));
    if (r == 0) report.episode_accuracy = acc;
  }
  AccuracyStats combined;
  for (const auto& s : report.repeats) {
    combined.mean += s.mean;
    combined.std += s.std;
    combined.ci_half_width += s.ci_half_width;
  }
  const double nr = static_cast<double>(repeats);
  combined.mean /= nr;
  combined.std /= nr;
  combined.ci_half_width /= nr;
  combined.n = config.episodes;
  report.combined = combined;
  for (std::size_t d = 0; d < heads; ++d) {
    report.head_accuracy[d] = head_sum[d] / (nr * static_cast<double>(config.episodes));
  }
  return report;
}

std::string report_json(const EvalReport& report) {
  nlohmann::ordered_json j;
  j["mean"] = report.combined.mean;
  j["std"] = report.combined.std;
  j["ci_half_width"] = report.combined.ci_half_width;
  j["n_episodes"] = report.combined.n;
  j["repeats"] = report.repeats.size();
  auto per_head = nlohmann::ordered_json::object();
  for (std::size_t d = 0; d < report.heads.size(); ++d) {
    per_head[std::to_string(d) + ":" + to_string(report.heads[d])] = report.head_accuracy[d];
  }
  j["per_head_accuracy"] = std::move(per_head);
  auto reps = nlohmann::ordered_json::array();
  for (const auto& s : report.repeats) {
    reps.push_back({{"mean", s.mean}, {"std", s.std}, {"ci_half_width", s.ci_half_width}});
  }
  j["repeat_stats"] = std::move(reps);
  return j.dump(2);
}

}  // namespace bsnet
