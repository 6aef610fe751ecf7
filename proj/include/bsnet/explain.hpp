#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bsnet/bisim.hpp"
#include "bsnet/data.hpp"

namespace bsnet {

inline constexpr std::size_t kHeatmapSize = 84;

/// Class-activation map of one query. `values` is [h, w] and `upsampled` is
/// [84, 84]; both lie in [0, 1] with max 1, or are all zero when `flat`.
struct Heatmap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;
  std::vector<double> upsampled;
  std::size_t target_class = 0;
  std::string head;  // head kind, or "mean"
  /// Zero gradient or a constant map; the heatmap is all zero.
  bool flat = false;
};

/// Channel weights = spatial mean of `grad`; map = ReLU(sum_k w_k feature_k),
/// min-max normalized, then bilinearly upsampled. Both inputs are [C, h, w].
Heatmap grad_cam_map(std::span<const double> feature, std::span<const double> grad,
                     std::size_t channels, std::size_t height, std::size_t width);

/// Grad-CAM of score(feature) for a [C, h, w] or [1, C, h, w] feature map.
Heatmap grad_cam(const DiffArray& feature,
                 const std::function<DiffArray(const DiffArray&)>& score);

struct QueryExplanation {
  std::size_t query = 0;
  std::size_t target_class = 0;
  std::size_t predicted_class = 0;
  std::vector<Heatmap> per_head;
  Heatmap mean;  // Grad-CAM of the head-averaged score
};

/// Heatmaps of every head for query q of an episode, BN in eval mode. The
/// target defaults to the model's combined prediction for that query.
/// Parameter gradients are cleared afterwards.
QueryExplanation explain_query(BisimModel& model, const DiffArray& support,
                               const DiffArray& queries, std::size_t way, std::size_t shot,
                               std::size_t q, std::optional<std::size_t> target = std::nullopt);

/// 3x84x84 composite: half the image, half the heat colormap of the map.
Image heatmap_overlay(const Image& image, const Heatmap& heatmap);

/// Writes `<dir>/<episode>_<q>_<class>_<head>.png` (PPM if PNG encoding is
/// unavailable) and returns the path.
std::filesystem::path write_heatmap(const std::filesystem::path& dir, std::size_t episode,
                                    std::size_t q, const Heatmap& heatmap, const Image& image);

}  // namespace bsnet
