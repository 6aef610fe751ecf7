#pragma once

#include <memory>
#include <string>
#include <vector>

#include "bsnet/backbone.hpp"

namespace bsnet {

enum class HeadKind { prototype, matching, relation, cosine, image_to_class };
enum class LossKind { mse, cross_entropy, nll };

std::string to_string(HeadKind kind);
std::string to_string(LossKind kind);
HeadKind parse_head(const std::string& name);

/// Closed interval of attainable scores (infinite bounds allowed).
struct ScoreRange {
  double low;
  double high;
};

inline constexpr std::size_t kRelationHidden = 8;
inline constexpr std::size_t kRelationFlatten = 576;
inline constexpr std::size_t kImageToClassNeighbors = 3;

/// Embedded support and query images of one episode. Support rows are
/// class-major: rows [c*shot, (c+1)*shot) belong to class c.
struct EpisodeFeatures {
  DiffArray support;  // [way*shot, 64, h, w]
  DiffArray query;    // [Q, 64, h, w]
  std::size_t way = 0;
  std::size_t shot = 0;

  /// [way, 64, h, w], mean of each class's support features.
  DiffArray prototypes() const { return group_mean(support, way); }
};

/// Scores every query against every class of an episode.
class SimilarityHead {
 public:
  virtual ~SimilarityHead() = default;
  virtual HeadKind kind() const = 0;
  virtual LossKind loss_kind() const = 0;
  virtual ScoreRange range() const = 0;
  /// [Q, way] scores.
  virtual DiffArray score(const EpisodeFeatures& features, BatchNormMode mode) const = 0;
  virtual void collect(const std::string& prefix, StateView& out) { (void)prefix, (void)out; }
};

/// Builds a head for backbone features of shape [64,h,w]; throws ConfigError
/// when the head cannot consume that shape.
std::unique_ptr<SimilarityHead> make_head(HeadKind kind, const Shape& feature_shape, Rng& rng);

/// Negative squared Euclidean distance to the class prototype.
class PrototypeHead final : public SimilarityHead {
 public:
  HeadKind kind() const override { return HeadKind::prototype; }
  LossKind loss_kind() const override { return LossKind::cross_entropy; }
  ScoreRange range() const override;
  DiffArray score(const EpisodeFeatures& features, BatchNormMode mode) const override;
};

/// Softmax attention over the cosine similarities to every support item;
/// class probability is the attention mass on that class's items.
class MatchingHead final : public SimilarityHead {
 public:
  HeadKind kind() const override { return HeadKind::matching; }
  LossKind loss_kind() const override { return LossKind::nll; }
  ScoreRange range() const override { return {0.0, 1.0}; }
  DiffArray score(const EpisodeFeatures& features, BatchNormMode mode) const override;
};

/// Learned relation module over [prototype || query] (128 channels, 19x19):
/// two unpadded conv blocks with max pooling, FC 576->8, ReLU, FC 8->1, sigmoid.
class RelationHead final : public SimilarityHead {
 public:
  explicit RelationHead(Rng& rng);
  HeadKind kind() const override { return HeadKind::relation; }
  LossKind loss_kind() const override { return LossKind::mse; }
  ScoreRange range() const override { return {0.0, 1.0}; }
  DiffArray score(const EpisodeFeatures& features, BatchNormMode mode) const override;
  void collect(const std::string& prefix, StateView& out) override;

  /// pairs[N,128,19,19] -> [N] relation scores.
  DiffArray relate(const DiffArray& pairs, BatchNormMode mode) const;

 private:
  DiffArray relate_tail(const DiffArray& block1_out, BatchNormMode mode) const;

  ConvBlock block1_;
  ConvBlock block2_;
  LinearLayer fc1_;
  LinearLayer fc2_;
};

/// Two conv blocks (max then avg pooling) applied independently to
/// prototypes and queries, then cosine similarity mapped to [0,1].
class CosineHead final : public SimilarityHead {
 public:
  CosineHead(const Shape& feature_shape, Rng& rng);
  HeadKind kind() const override { return HeadKind::cosine; }
  LossKind loss_kind() const override { return LossKind::mse; }
  ScoreRange range() const override { return {0.0, 1.0}; }
  DiffArray score(const EpisodeFeatures& features, BatchNormMode mode) const override;
  void collect(const std::string& prefix, StateView& out) override;

  /// [N,64,h,w] -> [N, D] flattened h_em embeddings.
  DiffArray embed(const DiffArray& features, BatchNormMode mode) const;
  /// Raw cosine in [-1,1] between query rows and prototype rows: [Q, C].
  DiffArray raw_cosine(const DiffArray& prototypes, const DiffArray& queries,
                       BatchNormMode mode) const;
  std::size_t embedding_size() const { return embedding_size_; }

 private:
  ConvBlock block1_;
  ConvBlock block2_;
  std::size_t embedding_size_ = 0;
};

/// Sum over query local descriptors of their top-k cosine similarities in
/// each class's pooled support descriptors.
class ImageToClassHead final : public SimilarityHead {
 public:
  explicit ImageToClassHead(std::size_t neighbors = kImageToClassNeighbors)
      : neighbors_(neighbors) {}
  HeadKind kind() const override { return HeadKind::image_to_class; }
  LossKind loss_kind() const override { return LossKind::cross_entropy; }
  ScoreRange range() const override;
  DiffArray score(const EpisodeFeatures& features, BatchNormMode mode) const override;
  std::size_t neighbors() const { return neighbors_; }
  void set_descriptor_count(std::size_t m) { descriptors_ = m; }

 private:
  std::size_t neighbors_;
  std::size_t descriptors_ = 0;
};

/// Map from raw cosine [-1,1] to an MSE-compatible score in [0,1].
inline double cosine_to_unit(double c) { return 0.5 * (1.0 + c); }

// Single-query scoring on explicit class contexts -----------------------------

/// Support features of one class, each [64,h,w].
struct ClassContext {
  std::size_t class_index = 0;
  std::vector<DiffArray> support;

  /// Arithmetic mean of the support features, [64,h,w].
  DiffArray prototype() const;
  /// Pooled local descriptors of all support features, [shot*h*w, 64].
  DiffArray descriptor_pool() const;
};

/// Scalar -||q - prototype||^2.
DiffArray prototype_score(const DiffArray& query, const ClassContext& context);
/// Per-class attention mass [C]; sums to 1.
DiffArray matching_score(const DiffArray& query, const std::vector<ClassContext>& contexts);
DiffArray relation_score(const RelationHead& head, const DiffArray& query,
                         const ClassContext& context, BatchNormMode mode = BatchNormMode::eval);
/// Cosine score; mapped to [0,1] when `mapped`, raw cosine otherwise.
DiffArray cosine_score(const CosineHead& head, const DiffArray& query, const ClassContext& context,
                       BatchNormMode mode = BatchNormMode::eval, bool mapped = true);
/// query_descriptors[m,D], pool[P,D] -> scalar sum of per-descriptor top-k
/// cosine sums.
DiffArray image_to_class_score(const DiffArray& query_descriptors, const DiffArray& pool,
                               std::size_t k = kImageToClassNeighbors);

/// Batched image-to-class measure on unit-normalized descriptors:
/// queries[Q,m,D], pools[C,P,D] -> [Q,C]. Top-k ties resolve to the lowest
/// pool index.
DiffArray topk_cosine_sum(const DiffArray& queries, const DiffArray& pools, std::size_t k);

/// Cosine similarity of two vectors, 0 when either has zero norm.
double cosine_similarity(std::span<const double> a, std::span<const double> b);

}  // namespace bsnet
