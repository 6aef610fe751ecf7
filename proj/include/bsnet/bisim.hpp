#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "bsnet/heads.hpp"

namespace bsnet {

struct ModelSpec {
  BackboneKind backbone = BackboneKind::conv4;
  std::vector<HeadKind> heads{HeadKind::relation, HeadKind::cosine};
  /// One positive weight per head; empty means all 1.
  std::vector<double> loss_weights;

  /// Throws ConfigError on an empty head list or a bad weight vector.
  void validate() const;
  double weight(std::size_t head) const;
  bool uses_image_to_class() const;
};

/// Shared embedding plus an ordered list of similarity heads.
class BisimModel {
 public:
  BisimModel(ModelSpec spec, std::uint64_t seed);
  BisimModel(const BisimModel&) = delete;
  BisimModel& operator=(const BisimModel&) = delete;

  const ModelSpec& spec() const { return spec_; }
  std::size_t head_count() const { return heads_.size(); }
  const SimilarityHead& head(std::size_t d) const { return *heads_[d]; }
  const Backbone& backbone() const { return backbone_; }
  Shape feature_shape() const { return backbone_.output_shape(); }

  /// Parameters named "embed.*" and "head<d>.<kind>.*", plus batchnorm buffers.
  StateView state();
  std::vector<DiffArray> parameters();

  /// Embeds support and query images in one backbone pass.
  EpisodeFeatures embed(const DiffArray& support, const DiffArray& query, std::size_t way,
                        std::size_t shot, BatchNormMode mode) const;
  /// One [Q, way] score array per head, all from the same features.
  std::vector<DiffArray> head_scores(const EpisodeFeatures& features, BatchNormMode mode) const;

 private:
  ModelSpec spec_;
  Backbone backbone_;
  std::vector<std::unique_ptr<SimilarityHead>> heads_;
};

/// |Q| x C x H similarity scores of one episode.
struct ScoreMatrix {
  std::size_t queries = 0;
  std::size_t way = 0;
  std::size_t heads = 0;
  std::vector<double> values;  // [(q * way + c) * heads + d]
  std::vector<HeadKind> kinds;

  ScoreMatrix() = default;
  ScoreMatrix(std::size_t queries, std::size_t way, std::size_t heads);
  static ScoreMatrix from_heads(const std::vector<DiffArray>& per_head,
                                const std::vector<HeadKind>& kinds = {});

  double at(std::size_t q, std::size_t c, std::size_t d) const {
    return values[(q * way + c) * heads + d];
  }
  double& at(std::size_t q, std::size_t c, std::size_t d) { return values[(q * way + c) * heads + d]; }
};

/// Index of the maximum; ties resolve to the lowest index.
std::size_t argmax_lowest(std::span<const double> scores);
std::vector<int> one_hot(std::size_t index, std::size_t length);

std::size_t per_head_prediction(const ScoreMatrix& scores, std::size_t q, std::size_t d);
/// Argmax over classes of the unweighted mean of the H head scores.
std::size_t combined_prediction(const ScoreMatrix& scores, std::size_t q);
std::vector<std::size_t> combined_predictions(const ScoreMatrix& scores);

/// Weighted sum of per-head native losses, divided by way * |Q|.
/// MSE: sum_c (S - onehot)^2; cross entropy: -log softmax(S)[y]; NLL: -log S[y].
/// Throws NumericError on a non-finite result.
DiffArray training_loss(const std::vector<DiffArray>& per_head,
                        const std::vector<std::size_t>& labels,
                        const std::vector<LossKind>& losses, const std::vector<double>& weights);

/// Literal one-hot form: sum_d sum_q ||onehot(argmax S^d) - y||^2 / (way * |Q|).
/// Piecewise constant, reported as a diagnostic only.
double one_hot_disagreement(const ScoreMatrix& scores, const std::vector<std::size_t>& labels);

struct EpisodeResult {
  std::vector<std::vector<std::size_t>> head_predictions;  // [H][Q]
  std::vector<std::size_t> predictions;                    // combined, [Q]
  double loss = 0.0;
  double accuracy = 0.0;
  std::vector<double> head_accuracy;
};

EpisodeResult summarize_episode(const ScoreMatrix& scores, const std::vector<std::size_t>& labels,
                                double loss);

}  // namespace bsnet
