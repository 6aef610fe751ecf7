#include "bsnet/backbone.hpp"

namespace bsnet {

std::string to_string(BackboneKind kind) {
  switch (kind) {
    case BackboneKind::conv4:
      return "conv4";
    case BackboneKind::conv6:
      return "conv6";
    case BackboneKind::conv8:
      return "conv8";
    case BackboneKind::conv64f:
      return "conv64f";
  }
  return "unknown";
}

BackboneKind parse_backbone(const std::string& name) {
  if (name == "conv4") return BackboneKind::conv4;
  if (name == "conv6") return BackboneKind::conv6;
  if (name == "conv8") return BackboneKind::conv8;
  if (name == "conv64f") return BackboneKind::conv64f;
  throw ConfigError("unknown backbone '" + name + "' (expected conv4|conv6|conv8|conv64f)");
}

BackboneSpec backbone_spec(BackboneKind kind) {
  BackboneSpec spec;
  spec.kind = kind;
  auto block = [](std::size_t in, std::size_t pad, Pooling pool, double slope) {
    BlockConfig b;
    b.in_channels = in;
    b.filters = kFeatureChannels;
    b.kernel = 3;
    b.padding = pad;
    b.pooling = pool;
    b.slope = slope;
    return b;
  };
  if (kind == BackboneKind::conv64f) {
    spec.blocks = {block(kImageChannels, 1, Pooling::max, 0.2), block(64, 1, Pooling::max, 0.2),
                   block(64, 1, Pooling::none, 0.2), block(64, 1, Pooling::none, 0.2)};
    return spec;
  }
  spec.blocks = {block(kImageChannels, 1, Pooling::max, 0.0), block(64, 1, Pooling::max, 0.0),
                 block(64, 1, Pooling::none, 0.0), block(64, 0, Pooling::none, 0.0)};
  const std::size_t extra = kind == BackboneKind::conv6 ? 2 : kind == BackboneKind::conv8 ? 4 : 0;
  for (std::size_t i = 0; i < extra; ++i) spec.blocks.push_back(block(64, 1, Pooling::none, 0.0));
  return spec;
}

Shape feature_shape(const BackboneSpec& spec) {
  std::size_t extent = kImageSize;
  for (const auto& cfg : spec.blocks) {
    const auto padded = extent + 2 * cfg.padding;
    extent = padded < cfg.kernel ? 0 : padded - cfg.kernel + 1;
    if (cfg.pooling != Pooling::none) extent = extent < 2 ? 0 : (extent - 2) / 2 + 1;
  }
  return {spec.blocks.empty() ? kImageChannels : spec.blocks.back().filters, extent, extent};
}

Backbone::Backbone(BackboneSpec spec, Rng& rng) : spec_(std::move(spec)) {
  blocks_.reserve(spec_.blocks.size());
  for (const auto& cfg : spec_.blocks) blocks_.emplace_back(cfg, rng);
}

DiffArray Backbone::embed(const DiffArray& batch, BatchNormMode mode) const {
  if (batch.rank() != 4 || batch.dim(1) != kImageChannels || batch.dim(2) != kImageSize ||
      batch.dim(3) != kImageSize) {
    throw ShapeError(to_string(spec_.kind) + " expects input [N,3,84,84], got " +
                     shape_string(batch.shape()));
  }
  DiffArray x = batch;
  for (const auto& block : blocks_) x = block.forward(x, mode);
  return x;
}

void Backbone::collect(const std::string& prefix, StateView& out) {
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    blocks_[i].collect(prefix + ".block" + std::to_string(i + 1), out);
  }
}

DiffArray local_descriptors(const DiffArray& feature) {
  if (feature.rank() != 4) {
    throw ShapeError("local_descriptors expects [N,C,h,w], got " + shape_string(feature.shape()));
  }
  const auto n = feature.dim(0), c = feature.dim(1), hw = feature.dim(2) * feature.dim(3);
  std::vector<double> out(feature.size());
  const auto v = feature.data();
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t p = 0; p < hw; ++p) out[(b * hw + p) * c + ch] = v[(b * c + ch) * hw + p];
    }
  }
  return apply_op("local_descriptors", {n, hw, c}, std::move(out), {feature},
                  [n, c, hw](auto, std::span<const double> g, GradSink& sink) {
                    auto d = sink[0];
                    for (std::size_t b = 0; b < n; ++b) {
                      for (std::size_t ch = 0; ch < c; ++ch) {
                        for (std::size_t p = 0; p < hw; ++p) {
                          d[(b * c + ch) * hw + p] += g[(b * hw + p) * c + ch];
                        }
                      }
                    }
                  });
}

DiffArray descriptors_to_feature(const DiffArray& descriptors, std::size_t height,
                                 std::size_t width) {
  if (descriptors.rank() != 3 || descriptors.dim(1) != height * width) {
    throw ShapeError("descriptors_to_feature: " + shape_string(descriptors.shape()) +
                     " does not hold " + std::to_string(height) + "x" + std::to_string(width) +
                     " positions");
  }
  const auto n = descriptors.dim(0), hw = height * width, c = descriptors.dim(2);
  std::vector<double> out(descriptors.size());
  const auto v = descriptors.data();
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t p = 0; p < hw; ++p) {
      for (std::size_t ch = 0; ch < c; ++ch) out[(b * c + ch) * hw + p] = v[(b * hw + p) * c + ch];
    }
  }
  return apply_op("descriptors_to_feature", {n, c, height, width}, std::move(out), {descriptors},
                  [n, c, hw](auto, std::span<const double> g, GradSink& sink) {
                    auto d = sink[0];
                    for (std::size_t b = 0; b < n; ++b) {
                      for (std::size_t p = 0; p < hw; ++p) {
                        for (std::size_t ch = 0; ch < c; ++ch) {
                          d[(b * hw + p) * c + ch] += g[(b * c + ch) * hw + p];
                        }
                      }
                    }
                  });
}

}  // namespace bsnet
