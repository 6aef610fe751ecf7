#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "bsnet/grad_check.hpp"
#include "bsnet/ops.hpp"

namespace bsnet {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using Rng = std::mt19937_64;

struct NamedBuffer {
  std::string name;
  std::vector<double>* data;
};

/// Flat view over a model's learnable parameters and persistent buffers.
struct StateView {
  std::vector<NamedArray> parameters;
  std::vector<NamedBuffer> buffers;

  void add(const std::string& name, const DiffArray& value) { parameters.push_back({name, value}); }
  void add_buffer(const std::string& name, std::vector<double>& data) {
    buffers.push_back({name, &data});
  }
};

/// Zero-mean normal with std sqrt(2 / fan_in).
DiffArray he_normal(Shape shape, std::size_t fan_in, Rng& rng);

struct Conv2dLayer {
  DiffArray weight;  // [out, in, k, k]
  DiffArray bias;    // [out]

  Conv2dLayer() = default;
  Conv2dLayer(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, Rng& rng);
  void collect(const std::string& prefix, StateView& out) const;
};

struct BatchNormLayer {
  DiffArray gamma;
  DiffArray beta;
  // Running statistics change only in train mode.
  mutable BatchNormStats stats;

  BatchNormLayer() = default;
  explicit BatchNormLayer(std::size_t channels);
  DiffArray forward(const DiffArray& x, BatchNormMode mode) const;
  void collect(const std::string& prefix, StateView& out);
};

struct LinearLayer {
  DiffArray weight;  // [out, in]
  DiffArray bias;

  LinearLayer() = default;
  LinearLayer(std::size_t in_features, std::size_t out_features, Rng& rng);
  DiffArray forward(const DiffArray& x) const { return linear(x, weight, bias); }
  void collect(const std::string& prefix, StateView& out) const;
};

enum class Pooling { none, max, avg };

struct BlockConfig {
  std::size_t in_channels = 64;
  std::size_t filters = 64;
  std::size_t kernel = 3;
  std::size_t padding = 1;
  Pooling pooling = Pooling::none;
  double slope = 0.0;  // 0 = ReLU, otherwise leaky ReLU
};

/// conv -> batchnorm -> (leaky) ReLU -> optional 2x2 pooling.
class ConvBlock {
 public:
  ConvBlock() = default;
  ConvBlock(const BlockConfig& config, Rng& rng);

  DiffArray forward(const DiffArray& x, BatchNormMode mode) const;
  /// forward(concat(left[left_rows], right[right_rows], channel axis)) without
  /// materializing the pairs: the convolution is linear, so each side is
  /// convolved once with its half of the filters and the results are summed.
  DiffArray forward_pairs(const DiffArray& left, const DiffArray& right,
                          const std::vector<std::size_t>& left_rows,
                          const std::vector<std::size_t>& right_rows, BatchNormMode mode) const;
  void collect(const std::string& prefix, StateView& out);
  const BlockConfig& config() const { return config_; }
  /// Spatial extent after this block for an input of extent `size`.
  std::size_t output_extent(std::size_t size) const;

 private:
  DiffArray finish(DiffArray y, BatchNormMode mode) const;

  BlockConfig config_;
  Conv2dLayer conv_;
  BatchNormLayer bn_;
};

}  // namespace bsnet
