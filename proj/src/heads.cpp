#include "bsnet/heads.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace bsnet {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;

void require_feature_batch(const DiffArray& x, const char* who) {
  if (x.rank() != 4) {
    throw ShapeError(std::string(who) + ": expected [N,C,h,w] features, got " +
                     shape_string(x.shape()));
  }
}

void require_episode(const EpisodeFeatures& f, const char* who) {
  require_feature_batch(f.support, who);
  require_feature_batch(f.query, who);
  if (f.way == 0 || f.shot == 0 || f.support.dim(0) != f.way * f.shot) {
    throw ShapeError(std::string(who) + ": support " + shape_string(f.support.shape()) +
                     " is not way*shot = " + std::to_string(f.way) + "*" + std::to_string(f.shot));
  }
  if (!std::equal(f.support.shape().begin() + 1, f.support.shape().end(),
                  f.query.shape().begin() + 1)) {
    throw ShapeError(std::string(who) + ": support " + shape_string(f.support.shape()) +
                     " and query " + shape_string(f.query.shape()) + " differ");
  }
}

// [C, C*K] indicator with row c set over class c's support items.
DiffArray class_indicator(std::size_t way, std::size_t shot) {
  std::vector<double> ind(way * way * shot, 0.0);
  for (std::size_t c = 0; c < way; ++c) {
    for (std::size_t s = 0; s < shot; ++s) ind[c * way * shot + c * shot + s] = 1.0;
  }
  return DiffArray::from_data({way, way * shot}, std::move(ind));
}

DiffArray normalize_descriptors(const DiffArray& desc) {
  const auto& s = desc.shape();
  const auto d = s.back();
  return reshape(l2_normalize_rows(reshape(desc, {desc.size() / d, d})), s);
}

DiffArray as_batch(const DiffArray& feature) {
  Shape s{1};
  s.insert(s.end(), feature.shape().begin(), feature.shape().end());
  return reshape(feature, std::move(s));
}

// Indices of the k largest entries of row, ties to the lowest index.
void top_k(const double* row, std::size_t n, std::size_t k, std::vector<std::size_t>& order,
           std::size_t* out) {
  order.resize(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto better = [row](std::size_t a, std::size_t b) {
    return row[a] > row[b] || (row[a] == row[b] && a < b);
  };
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    better);
  std::copy_n(order.begin(), k, out);
}

}  // namespace

std::string to_string(HeadKind kind) {
  switch (kind) {
    case HeadKind::prototype:
      return "prototype";
    case HeadKind::matching:
      return "matching";
    case HeadKind::relation:
      return "relation";
    case HeadKind::cosine:
      return "cosine";
    case HeadKind::image_to_class:
      return "image_to_class";
  }
  return "unknown";
}

std::string to_string(LossKind kind) {
  switch (kind) {
    case LossKind::mse:
      return "mse";
    case LossKind::cross_entropy:
      return "cross_entropy";
    case LossKind::nll:
      return "nll";
  }
  return "unknown";
}

HeadKind parse_head(const std::string& name) {
  if (name == "prototype" || name == "proto") return HeadKind::prototype;
  if (name == "matching") return HeadKind::matching;
  if (name == "relation") return HeadKind::relation;
  if (name == "cosine") return HeadKind::cosine;
  if (name == "image_to_class" || name == "dn4") return HeadKind::image_to_class;
  throw ConfigError("unknown head '" + name +
                    "' (expected prototype|matching|relation|cosine|image_to_class)");
}

std::unique_ptr<SimilarityHead> make_head(HeadKind kind, const Shape& feature_shape, Rng& rng) {
  if (feature_shape.size() != 3 || feature_shape[0] != kFeatureChannels) {
    throw ConfigError("heads expect [64,h,w] features, got " + shape_string(feature_shape));
  }
  const auto h = feature_shape[1], w = feature_shape[2];
  switch (kind) {
    case HeadKind::prototype:
      return std::make_unique<PrototypeHead>();
    case HeadKind::matching:
      return std::make_unique<MatchingHead>();
    case HeadKind::relation:
      if (h != 19 || w != 19) {
        throw ConfigError("relation head needs 64x19x19 features (576-input FC), backbone gives " +
                          shape_string(feature_shape));
      }
      return std::make_unique<RelationHead>(rng);
    case HeadKind::cosine:
      if (h < 4 || w < 4) {
        throw ConfigError("cosine head needs features of at least 4x4, got " +
                          shape_string(feature_shape));
      }
      return std::make_unique<CosineHead>(feature_shape, rng);
    case HeadKind::image_to_class: {
      if (h * w < kImageToClassNeighbors) {
        throw ConfigError("image-to-class head needs at least 3 local descriptors per image");
      }
      auto head = std::make_unique<ImageToClassHead>();
      head->set_descriptor_count(h * w);
      return head;
    }
  }
  throw ConfigError("unknown head kind");
}

// Prototype -----------------------------------------------------------------

ScoreRange PrototypeHead::range() const {
  return {-std::numeric_limits<double>::infinity(), 0.0};
}

DiffArray PrototypeHead::score(const EpisodeFeatures& f, BatchNormMode) const {
  require_episode(f, "prototype head");
  return neg_sq_distance(flatten(f.query), flatten(f.prototypes()));
}

// Matching ------------------------------------------------------------------

DiffArray MatchingHead::score(const EpisodeFeatures& f, BatchNormMode) const {
  require_episode(f, "matching head");
  if (f.way < 2) throw ShapeError("matching head needs at least 2 classes");
  const auto cos = matmul_nt(l2_normalize_rows(flatten(f.query)),
                             l2_normalize_rows(flatten(f.support)));
  return matmul_nt(softmax(cos, 1), class_indicator(f.way, f.shot));
}

// Relation ------------------------------------------------------------------

RelationHead::RelationHead(Rng& rng) {
  BlockConfig b1;
  b1.in_channels = 2 * kFeatureChannels;
  b1.padding = 0;
  b1.pooling = Pooling::max;
  BlockConfig b2 = b1;
  b2.in_channels = kFeatureChannels;
  block1_ = ConvBlock(b1, rng);
  block2_ = ConvBlock(b2, rng);
  fc1_ = LinearLayer(kRelationFlatten, kRelationHidden, rng);
  fc2_ = LinearLayer(kRelationHidden, 1, rng);
}

DiffArray RelationHead::relate(const DiffArray& pairs, BatchNormMode mode) const {
  if (pairs.rank() != 4 || pairs.dim(1) != 2 * kFeatureChannels || pairs.dim(2) != 19 ||
      pairs.dim(3) != 19) {
    throw ShapeError("relation module expects [N,128,19,19] pairs, got " +
                     shape_string(pairs.shape()));
  }
  return relate_tail(block1_.forward(pairs, mode), mode);
}

DiffArray RelationHead::relate_tail(const DiffArray& block1_out, BatchNormMode mode) const {
  auto x = flatten(block2_.forward(block1_out, mode));
  x = relu(fc1_.forward(x));
  x = sigmoid(fc2_.forward(x));
  return reshape(x, {block1_out.dim(0)});
}

DiffArray RelationHead::score(const EpisodeFeatures& f, BatchNormMode mode) const {
  require_episode(f, "relation head");
  const auto q = f.query.dim(0), c = f.way;
  std::vector<std::size_t> proto_idx(q * c), query_idx(q * c);
  for (std::size_t i = 0; i < q; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      proto_idx[i * c + j] = j;
      query_idx[i * c + j] = i;
    }
  }
  const auto pairs = block1_.forward_pairs(f.prototypes(), f.query, proto_idx, query_idx, mode);
  return reshape(relate_tail(pairs, mode), {q, c});
}

void RelationHead::collect(const std::string& prefix, StateView& out) {
  block1_.collect(prefix + ".block1", out);
  block2_.collect(prefix + ".block2", out);
  fc1_.collect(prefix + ".fc1", out);
  fc2_.collect(prefix + ".fc2", out);
}

// Cosine --------------------------------------------------------------------

CosineHead::CosineHead(const Shape& feature_shape, Rng& rng) {
  BlockConfig b1;
  b1.in_channels = kFeatureChannels;
  b1.padding = 1;
  b1.pooling = Pooling::max;
  BlockConfig b2 = b1;
  b2.pooling = Pooling::avg;
  block1_ = ConvBlock(b1, rng);
  block2_ = ConvBlock(b2, rng);
  const auto h = block2_.output_extent(block1_.output_extent(feature_shape[1]));
  const auto w = block2_.output_extent(block1_.output_extent(feature_shape[2]));
  embedding_size_ = kFeatureChannels * h * w;
}

DiffArray CosineHead::embed(const DiffArray& features, BatchNormMode mode) const {
  require_feature_batch(features, "cosine head");
  return flatten(block2_.forward(block1_.forward(features, mode), mode));
}

DiffArray CosineHead::raw_cosine(const DiffArray& prototypes, const DiffArray& queries,
                                 BatchNormMode mode) const {
  const auto c = prototypes.dim(0), q = queries.dim(0);
  // One batch so prototypes and queries share normalization statistics.
  const auto z = l2_normalize_rows(embed(concat(prototypes, queries, 0), mode));
  return matmul_nt(slice(z, c, c + q), slice(z, 0, c));
}

DiffArray CosineHead::score(const EpisodeFeatures& f, BatchNormMode mode) const {
  require_episode(f, "cosine head");
  return add_scalar(scale(raw_cosine(f.prototypes(), f.query, mode), 0.5), 0.5);
}

void CosineHead::collect(const std::string& prefix, StateView& out) {
  block1_.collect(prefix + ".block1", out);
  block2_.collect(prefix + ".block2", out);
}

// Image-to-class ------------------------------------------------------------

ScoreRange ImageToClassHead::range() const {
  if (descriptors_ == 0) {
    return {-std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity()};
  }
  const double bound = static_cast<double>(descriptors_ * neighbors_);
  return {-bound, bound};
}

DiffArray ImageToClassHead::score(const EpisodeFeatures& f, BatchNormMode) const {
  require_episode(f, "image-to-class head");
  const auto q = f.query.dim(0), hw = f.query.dim(2) * f.query.dim(3), d = f.query.dim(1);
  const auto pools =
      reshape(normalize_descriptors(local_descriptors(f.support)), {f.way, f.shot * hw, d});
  const auto queries = normalize_descriptors(local_descriptors(f.query));
  return reshape(topk_cosine_sum(queries, pools, neighbors_), {q, f.way});
}

DiffArray topk_cosine_sum(const DiffArray& queries, const DiffArray& pools, std::size_t k) {
  if (queries.rank() != 3 || pools.rank() != 3 || queries.dim(2) != pools.dim(2)) {
    throw ShapeError("topk_cosine_sum: expected queries [Q,m,D] and pools [C,P,D], got " +
                     shape_string(queries.shape()) + " and " + shape_string(pools.shape()));
  }
  const auto nq = queries.dim(0), m = queries.dim(1), nc = pools.dim(0), p = pools.dim(1),
             d = queries.dim(2);
  if (p == 0) throw ShapeError("topk_cosine_sum: empty descriptor pool");
  if (k == 0 || k > p) {
    throw ShapeError("topk_cosine_sum: k=" + std::to_string(k) + " outside [1, pool size " +
                     std::to_string(p) + "]");
  }
  const auto qv = queries.data(), pv = pools.data();
  std::vector<double> out(nq * nc, 0.0);
  auto picks = std::make_shared<std::vector<std::size_t>>(nq * nc * m * k);
  std::vector<std::size_t> order;
  RowMat sims(m, p);
  for (std::size_t qi = 0; qi < nq; ++qi) {
    ConstMap qm(qv.data() + qi * m * d, m, d);
    for (std::size_t c = 0; c < nc; ++c) {
      sims.noalias() = qm * ConstMap(pv.data() + c * p * d, p, d).transpose();
      double total = 0.0;
      std::size_t* slot = picks->data() + (qi * nc + c) * m * k;
      for (std::size_t i = 0; i < m; ++i) {
        const double* row = sims.data() + i * p;
        top_k(row, p, k, order, slot + i * k);
        for (std::size_t j = 0; j < k; ++j) total += row[slot[i * k + j]];
      }
      out[qi * nc + c] = total;
    }
  }
  return apply_op(
      "topk_cosine_sum", {nq, nc}, std::move(out), {queries, pools},
      [queries, pools, picks, nq, nc, m, p, d, k](auto, std::span<const double> g,
                                                  GradSink& sink) {
        const bool wq = sink.wants(0), wp = sink.wants(1);
        std::span<double> dq, dp;
        if (wq) dq = sink[0];
        if (wp) dp = sink[1];
        const auto qv = queries.data(), pv = pools.data();
        for (std::size_t qi = 0; qi < nq; ++qi) {
          for (std::size_t c = 0; c < nc; ++c) {
            const double gv = g[qi * nc + c];
            if (gv == 0.0) continue;
            const std::size_t* slot = picks->data() + (qi * nc + c) * m * k;
            for (std::size_t i = 0; i < m; ++i) {
              const double* qrow = qv.data() + (qi * m + i) * d;
              for (std::size_t j = 0; j < k; ++j) {
                const auto pi = slot[i * k + j];
                const double* prow = pv.data() + (c * p + pi) * d;
                if (wq) {
                  double* out = dq.data() + (qi * m + i) * d;
                  for (std::size_t t = 0; t < d; ++t) out[t] += gv * prow[t];
                }
                if (wp) {
                  double* out = dp.data() + (c * p + pi) * d;
                  for (std::size_t t = 0; t < d; ++t) out[t] += gv * qrow[t];
                }
              }
            }
          }
        }
      });
}

// Single-query API ----------------------------------------------------------

DiffArray ClassContext::prototype() const {
  if (support.empty()) throw ShapeError("class context has no support features");
  return reshape(group_mean(stack(support), 1), support.front().shape());
}

DiffArray ClassContext::descriptor_pool() const {
  if (support.empty()) throw ShapeError("class context has no support features");
  const auto desc = local_descriptors(stack(support));
  return reshape(desc, {desc.dim(0) * desc.dim(1), desc.dim(2)});
}

DiffArray prototype_score(const DiffArray& query, const ClassContext& context) {
  const auto proto = context.prototype();
  if (query.shape() != proto.shape()) {
    throw ShapeError("prototype_score: query " + shape_string(query.shape()) + " vs prototype " +
                     shape_string(proto.shape()));
  }
  return reshape(neg_sq_distance(reshape(query, {1, query.size()}),
                                 reshape(proto, {1, proto.size()})),
                 {1});
}

DiffArray matching_score(const DiffArray& query, const std::vector<ClassContext>& contexts) {
  if (contexts.size() < 2) throw ShapeError("matching_score needs at least 2 classes");
  std::vector<DiffArray> items;
  std::vector<std::size_t> owner;
  for (std::size_t c = 0; c < contexts.size(); ++c) {
    for (const auto& s : contexts[c].support) {
      items.push_back(reshape(s, {s.size()}));
      owner.push_back(c);
    }
  }
  const auto cos = matmul_nt(l2_normalize_rows(reshape(query, {1, query.size()})),
                             l2_normalize_rows(stack(items)));
  std::vector<double> ind(contexts.size() * owner.size(), 0.0);
  for (std::size_t s = 0; s < owner.size(); ++s) ind[owner[s] * owner.size() + s] = 1.0;
  const auto indicator = DiffArray::from_data({contexts.size(), owner.size()}, std::move(ind));
  return reshape(matmul_nt(softmax(cos, 1), indicator), {contexts.size()});
}

DiffArray relation_score(const RelationHead& head, const DiffArray& query,
                         const ClassContext& context, BatchNormMode mode) {
  const auto pair = concat(as_batch(context.prototype()), as_batch(query), 1);
  return head.relate(pair, mode);
}

DiffArray cosine_score(const CosineHead& head, const DiffArray& query, const ClassContext& context,
                       BatchNormMode mode, bool mapped) {
  const auto cos = reshape(head.raw_cosine(as_batch(context.prototype()), as_batch(query), mode),
                           {1});
  return mapped ? add_scalar(scale(cos, 0.5), 0.5) : cos;
}

DiffArray image_to_class_score(const DiffArray& query_descriptors, const DiffArray& pool,
                               std::size_t k) {
  if (query_descriptors.rank() != 2 || pool.rank() != 2) {
    throw ShapeError("image_to_class_score expects [m,D] descriptors and a [P,D] pool");
  }
  if (pool.dim(0) == 0) throw ShapeError("image_to_class_score: empty pool");
  const auto q = reshape(l2_normalize_rows(query_descriptors),
                         {1, query_descriptors.dim(0), query_descriptors.dim(1)});
  const auto p = reshape(l2_normalize_rows(pool), {1, pool.dim(0), pool.dim(1)});
  return reshape(topk_cosine_sum(q, p, k), {1});
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("cosine_similarity: length mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

}  // namespace bsnet
