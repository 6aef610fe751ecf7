#include "bsnet/bisim.hpp"

#include <cmath>

namespace bsnet {

void ModelSpec::validate() const {
  if (heads.empty()) throw ConfigError("model needs at least one similarity head");
  if (!loss_weights.empty() && loss_weights.size() != heads.size()) {
    throw ConfigError("loss_weights has " + std::to_string(loss_weights.size()) +
                      " entries for " + std::to_string(heads.size()) + " heads");
  }
  for (double w : loss_weights) {
    if (!(w > 0.0) || !std::isfinite(w)) {
      throw ConfigError("loss weights must be positive and finite");
    }
  }
}

double ModelSpec::weight(std::size_t head) const {
  return loss_weights.empty() ? 1.0 : loss_weights.at(head);
}

bool ModelSpec::uses_image_to_class() const {
  for (auto h : heads) {
    if (h == HeadKind::image_to_class) return true;
  }
  return false;
}

BisimModel::BisimModel(ModelSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
  spec_.validate();
  Rng rng(seed);
  backbone_ = Backbone(backbone_spec(spec_.backbone), rng);
  const auto shape = backbone_.output_shape();
  for (auto kind : spec_.heads) heads_.push_back(make_head(kind, shape, rng));
}

StateView BisimModel::state() {
  StateView view;
  backbone_.collect("embed", view);
  for (std::size_t d = 0; d < heads_.size(); ++d) {
    heads_[d]->collect("head" + std::to_string(d) + "." + to_string(heads_[d]->kind()), view);
  }
  return view;
}

std::vector<DiffArray> BisimModel::parameters() {
  std::vector<DiffArray> out;
  for (auto& p : state().parameters) out.push_back(p.value);
  return out;
}

EpisodeFeatures BisimModel::embed(const DiffArray& support, const DiffArray& query,
                                  std::size_t way, std::size_t shot, BatchNormMode mode) const {
  if (support.rank() != 4 || support.dim(0) != way * shot) {
    throw ShapeError("support batch " + shape_string(support.shape()) + " is not way*shot images");
  }
  const auto ns = support.dim(0);
  const auto features = backbone_.embed(concat(support, query, 0), mode);
  EpisodeFeatures f;
  f.support = slice(features, 0, ns);
  f.query = slice(features, ns, features.dim(0));
  f.way = way;
  f.shot = shot;
  return f;
}

std::vector<DiffArray> BisimModel::head_scores(const EpisodeFeatures& features,
                                               BatchNormMode mode) const {
  std::vector<DiffArray> out;
  out.reserve(heads_.size());
  for (const auto& h : heads_) out.push_back(h->score(features, mode));
  return out;
}

ScoreMatrix::ScoreMatrix(std::size_t queries, std::size_t way, std::size_t heads)
    : queries(queries), way(way), heads(heads), values(queries * way * heads, 0.0) {}

ScoreMatrix ScoreMatrix::from_heads(const std::vector<DiffArray>& per_head,
                                    const std::vector<HeadKind>& kinds) {
  if (per_head.empty()) throw ShapeError("score matrix needs at least one head");
  const auto& s0 = per_head.front().shape();
  if (s0.size() != 2) throw ShapeError("head scores must be [Q, way], got " + shape_string(s0));
  ScoreMatrix m(s0[0], s0[1], per_head.size());
  for (std::size_t d = 0; d < per_head.size(); ++d) {
    if (per_head[d].shape() != s0) {
      throw ShapeError("head " + std::to_string(d) + " scores " +
                       shape_string(per_head[d].shape()) + " differ from " + shape_string(s0));
    }
    const auto v = per_head[d].data();
    for (std::size_t q = 0; q < m.queries; ++q) {
      for (std::size_t c = 0; c < m.way; ++c) m.at(q, c, d) = v[q * m.way + c];
    }
  }
  m.kinds = kinds;
  return m;
}

std::size_t argmax_lowest(std::span<const double> scores) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    if (scores[i] > scores[best]) best = i;
  }
  return best;
}

std::vector<int> one_hot(std::size_t index, std::size_t length) {
  std::vector<int> v(length, 0);
  v.at(index) = 1;
  return v;
}

std::size_t per_head_prediction(const ScoreMatrix& scores, std::size_t q, std::size_t d) {
  std::vector<double> row(scores.way);
  for (std::size_t c = 0; c < scores.way; ++c) row[c] = scores.at(q, c, d);
  return argmax_lowest(row);
}

std::size_t combined_prediction(const ScoreMatrix& scores, std::size_t q) {
  std::vector<double> row(scores.way);
  const double h = static_cast<double>(scores.heads);
  for (std::size_t c = 0; c < scores.way; ++c) {
    double acc = 0.0;
    for (std::size_t d = 0; d < scores.heads; ++d) acc += scores.at(q, c, d);
    row[c] = acc / h;
  }
  return argmax_lowest(row);
}

std::vector<std::size_t> combined_predictions(const ScoreMatrix& scores) {
  std::vector<std::size_t> out(scores.queries);
  for (std::size_t q = 0; q < scores.queries; ++q) out[q] = combined_prediction(scores, q);
  return out;
}

DiffArray training_loss(const std::vector<DiffArray>& per_head,
                        const std::vector<std::size_t>& labels,
                        const std::vector<LossKind>& losses, const std::vector<double>& weights) {
  if (per_head.empty() || per_head.size() != losses.size() || per_head.size() != weights.size()) {
    throw ShapeError("training_loss: heads, loss kinds and weights must align");
  }
  const auto q = per_head.front().dim(0), way = per_head.front().dim(1);
  if (labels.size() != q) throw ShapeError("training_loss: one label per query required");
  std::vector<double> targets(q * way, 0.0);
  for (std::size_t i = 0; i < q; ++i) {
    if (labels[i] >= way) throw ShapeError("training_loss: label out of range");
    targets[i * way + labels[i]] = 1.0;
  }
  const auto target = DiffArray::from_data({q, way}, std::move(targets));

  DiffArray total;
  for (std::size_t d = 0; d < per_head.size(); ++d) {
    const auto& s = per_head[d];
    DiffArray head_loss;
    switch (losses[d]) {
      case LossKind::mse:
        head_loss = sum(square(sub(s, target)));
        break;
      case LossKind::cross_entropy:
        head_loss = scale(sum(pick(log_softmax(s, 1), labels)), -1.0);
        break;
      case LossKind::nll:
        head_loss = scale(sum(pick(log(s), labels)), -1.0);
        break;
    }
    head_loss = scale(head_loss, weights[d]);
    total = total.defined() ? add(total, head_loss) : head_loss;
  }
  total = scale(total, 1.0 / static_cast<double>(way * q));
  if (!std::isfinite(total.item())) {
    throw NumericError("training loss is not finite (" + std::to_string(total.item()) + ")");
  }
  return total;
}

double one_hot_disagreement(const ScoreMatrix& scores, const std::vector<std::size_t>& labels) {
  double total = 0.0;
  for (std::size_t d = 0; d < scores.heads; ++d) {
    for (std::size_t q = 0; q < scores.queries; ++q) {
      // Two distinct one-hots differ in exactly two entries.
      if (per_head_prediction(scores, q, d) != labels.at(q)) total += 2.0;
    }
  }
  return total / static_cast<double>(scores.way * scores.queries);
}

EpisodeResult summarize_episode(const ScoreMatrix& scores, const std::vector<std::size_t>& labels,
                                double loss) {
  if (labels.size() != scores.queries) throw ShapeError("one label per query required");
  EpisodeResult r;
  r.loss = loss;
  r.predictions = combined_predictions(scores);
  r.head_predictions.assign(scores.heads, std::vector<std::size_t>(scores.queries));
  r.head_accuracy.assign(scores.heads, 0.0);
  std::size_t correct = 0;
  for (std::size_t q = 0; q < scores.queries; ++q) {
    if (r.predictions[q] == labels[q]) ++correct;
    for (std::size_t d = 0; d < scores.heads; ++d) {
      r.head_predictions[d][q] = per_head_prediction(scores, q, d);
      if (r.head_predictions[d][q] == labels[q]) r.head_accuracy[d] += 1.0;
    }
  }
  const double n = static_cast<double>(scores.queries);
  r.accuracy = n > 0 ? static_cast<double>(correct) / n : 0.0;
  for (auto& a : r.head_accuracy) a = n > 0 ? a / n : 0.0;
  return r;
}

}  // namespace bsnet
