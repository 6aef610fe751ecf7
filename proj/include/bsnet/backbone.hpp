#pragma once

#include <string>
#include <vector>

#include "bsnet/layers.hpp"

namespace bsnet {

enum class BackboneKind { conv4, conv6, conv8, conv64f };

std::string to_string(BackboneKind kind);
BackboneKind parse_backbone(const std::string& name);

inline constexpr std::size_t kImageSize = 84;
inline constexpr std::size_t kImageChannels = 3;
inline constexpr std::size_t kFeatureChannels = 64;

struct BackboneSpec {
  BackboneKind kind = BackboneKind::conv4;
  std::vector<BlockConfig> blocks;
};

/// Block schedule per kind. Conv4: 84 -> 42 -> 21 -> 21 -> 19 (last block
/// unpadded). Conv6/Conv8 append padded blocks without pooling. Conv64F:
/// four padded blocks, leaky ReLU 0.2, pooling in the first two (-> 21).
BackboneSpec backbone_spec(BackboneKind kind);

/// Output feature shape [64, h, w] for a 3x84x84 input.
Shape feature_shape(const BackboneSpec& spec);

/// The shared embedding network.
class Backbone {
 public:
  Backbone() = default;
  Backbone(BackboneSpec spec, Rng& rng);

  /// batch[N,3,84,84] -> [N,64,h,w].
  DiffArray embed(const DiffArray& batch, BatchNormMode mode) const;
  const BackboneSpec& spec() const { return spec_; }
  Shape output_shape() const { return feature_shape(spec_); }
  void collect(const std::string& prefix, StateView& out);

 private:
  BackboneSpec spec_;
  std::vector<ConvBlock> blocks_;
};

/// feature[N,C,h,w] -> [N, h*w, C]; row r is the channel vector at spatial
/// position r in row-major order.
DiffArray local_descriptors(const DiffArray& feature);
/// Inverse of local_descriptors for the given spatial extent.
DiffArray descriptors_to_feature(const DiffArray& descriptors, std::size_t height,
                                 std::size_t width);

}  // namespace bsnet
