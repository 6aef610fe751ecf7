#include "bsnet/layers.hpp"

#include <cmath>

namespace bsnet {

DiffArray he_normal(Shape shape, std::size_t fan_in, Rng& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  std::vector<double> data(shape_size(shape));
  for (auto& v : data) v = dist(rng);
  return DiffArray::from_data(std::move(shape), std::move(data), true);
}

Conv2dLayer::Conv2dLayer(std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
                         Rng& rng)
    : weight(he_normal({out_channels, in_channels, kernel, kernel}, in_channels * kernel * kernel,
                       rng)),
      bias(DiffArray::zeros({out_channels}, true)) {}

void Conv2dLayer::collect(const std::string& prefix, StateView& out) const {
  out.add(prefix + ".weight", weight);
  out.add(prefix + ".bias", bias);
}

BatchNormLayer::BatchNormLayer(std::size_t channels)
    : gamma(DiffArray::full({channels}, 1.0, true)),
      beta(DiffArray::zeros({channels}, true)),
      stats(channels) {}

DiffArray BatchNormLayer::forward(const DiffArray& x, BatchNormMode mode) const {
  return batchnorm2d(x, gamma, beta, stats, mode);
}

void BatchNormLayer::collect(const std::string& prefix, StateView& out) {
  out.add(prefix + ".gamma", gamma);
  out.add(prefix + ".beta", beta);
  out.add_buffer(prefix + ".running_mean", stats.running_mean);
  out.add_buffer(prefix + ".running_var", stats.running_var);
}

LinearLayer::LinearLayer(std::size_t in_features, std::size_t out_features, Rng& rng)
    : weight(he_normal({out_features, in_features}, in_features, rng)),
      bias(DiffArray::zeros({out_features}, true)) {}

void LinearLayer::collect(const std::string& prefix, StateView& out) const {
  out.add(prefix + ".weight", weight);
  out.add(prefix + ".bias", bias);
}

ConvBlock::ConvBlock(const BlockConfig& config, Rng& rng)
    : config_(config),
      conv_(config.in_channels, config.filters, config.kernel, rng),
      bn_(config.filters) {}

DiffArray ConvBlock::forward(const DiffArray& x, BatchNormMode mode) const {
  return finish(conv2d(x, conv_.weight, conv_.bias, config_.padding), mode);
}

DiffArray ConvBlock::forward_pairs(const DiffArray& left, const DiffArray& right,
                                   const std::vector<std::size_t>& left_rows,
                                   const std::vector<std::size_t>& right_rows,
                                   BatchNormMode mode) const {
  if (left.rank() != 4 || right.rank() != 4 || left.dim(1) + right.dim(1) != config_.in_channels) {
    throw ShapeError("conv block pairs: " + shape_string(left.shape()) + " and " +
                     shape_string(right.shape()) + " do not give " +
                     std::to_string(config_.in_channels) + " channels");
  }
  if (left_rows.size() != right_rows.size()) throw ShapeError("conv block pairs: row count mismatch");
  const auto split = left.dim(1);
  const auto zero = DiffArray::from_data({config_.filters}, std::vector<double>(config_.filters, 0.0));
  const auto l = conv2d(left, narrow(conv_.weight, 1, 0, split), conv_.bias, config_.padding);
  const auto r = conv2d(right, narrow(conv_.weight, 1, split, config_.in_channels), zero,
                        config_.padding);
  return finish(add(index_select(l, left_rows), index_select(r, right_rows)), mode);
}

DiffArray ConvBlock::finish(DiffArray y, BatchNormMode mode) const {
  y = bn_.forward(y, mode);
  y = leaky_relu(y, config_.slope);
  switch (config_.pooling) {
    case Pooling::max:
      return maxpool2d(y, 2, 2);
    case Pooling::avg:
      return avgpool2d(y, 2, 2);
    case Pooling::none:
      break;
  }
  return y;
}

void ConvBlock::collect(const std::string& prefix, StateView& out) {
  conv_.collect(prefix + ".conv", out);
  bn_.collect(prefix + ".bn", out);
}

std::size_t ConvBlock::output_extent(std::size_t size) const {
  const auto padded = size + 2 * config_.padding;
  if (padded < config_.kernel) return 0;
  auto out = padded - config_.kernel + 1;
  if (config_.pooling != Pooling::none) out = out < 2 ? 0 : (out - 2) / 2 + 1;
  return out;
}

}  // namespace bsnet
