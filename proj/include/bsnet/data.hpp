#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "bsnet/diff_array.hpp"
#include "bsnet/layers.hpp"

namespace bsnet {

/// Missing, unreadable or insufficient data.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Decoded RGB image, row-major HWC, channel values in [0,1].
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(std::size_t h, std::size_t w) : height(h), width(w), pixels(h * w * 3, 0.0f) {}
  float& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * width + x) * 3 + c]; }
  float at(std::size_t y, std::size_t x, std::size_t c) const {
    return pixels[(y * width + x) * 3 + c];
  }
};

enum class SplitTag { full, train, val, test };
std::string to_string(SplitTag tag);

struct DatasetItem {
  std::shared_ptr<const Image> image;
  std::size_t label = 0;  // global class id
  std::string source;     // file path or synthetic tag
};

/// Items plus the global class table. Immutable after construction.
struct LabeledDataset {
  std::vector<DatasetItem> items;
  std::vector<std::string> class_names;  // indexed by global class id
  SplitTag split = SplitTag::full;
  std::vector<std::string> load_errors;  // per-file failures, "path: reason"

  /// Sorted distinct class ids present in items.
  std::vector<std::size_t> classes() const;
};

struct DatasetSplits {
  LabeledDataset train;
  LabeledDataset val;
  LabeledDataset test;
};

/// Class-level split after a seeded shuffle of class ids. Sizes follow
/// ratio by integer division; the remainder goes to train, then val.
DatasetSplits split_dataset(const LabeledDataset& dataset, std::uint64_t seed,
                            std::array<std::size_t, 3> ratio = {2, 1, 1});
/// Class-level split with explicit class counts (train, val, test).
DatasetSplits split_counts(const LabeledDataset& dataset, std::uint64_t seed,
                           std::array<std::size_t, 3> counts);
std::array<std::size_t, 3> split_sizes(std::size_t classes, std::array<std::size_t, 3> ratio);

/// One C-way K-shot task. Support and query item lists are class-major.
struct Episode {
  std::size_t way = 0;
  std::size_t shot = 0;
  std::size_t queries_per_class = 0;
  std::vector<std::size_t> classes;       // global ids, local index = position
  std::vector<std::size_t> support;       // item indices, way*shot
  std::vector<std::size_t> query;         // item indices, way*queries_per_class
  std::vector<std::size_t> query_labels;  // local labels of query items
};

/// Per-class item index built once for repeated sampling.
class EpisodeSampler {
 public:
  explicit EpisodeSampler(const LabeledDataset& dataset);

  /// Uniform class choice among classes holding at least shot + n_query
  /// items, uniform item choice without replacement within each class.
  Episode sample(std::size_t way, std::size_t shot, std::size_t n_query, Rng& rng) const;
  const LabeledDataset& dataset() const { return *dataset_; }

 private:
  const LabeledDataset* dataset_;
  std::vector<std::size_t> class_ids_;
  std::vector<std::vector<std::size_t>> members_;
};

Episode sample_episode(const LabeledDataset& dataset, std::size_t way, std::size_t shot,
                       std::size_t n_query, Rng& rng);

// Image pipeline -------------------------------------------------------------

struct AugmentConfig {
  double crop_scale_min = 0.08;
  double crop_scale_max = 1.0;
  double crop_ratio_min = 3.0 / 4.0;
  double crop_ratio_max = 4.0 / 3.0;
  double jitter = 0.4;  // brightness, contrast and saturation factors in [1-j, 1+j]
  double flip_probability = 0.5;
  bool enabled = true;
};

inline constexpr std::array<double, 3> kChannelMean{0.485, 0.456, 0.406};
inline constexpr std::array<double, 3> kChannelStd{0.229, 0.224, 0.225};
inline constexpr std::size_t kMinImageExtent = 8;

/// Bilinear resize with half-pixel centers.
Image resize_bilinear(const Image& image, std::size_t height, std::size_t width);
Image flip_horizontal(const Image& image);

/// Train mode: random resized crop, color jitter, horizontal flip. Eval mode:
/// bilinear resize. Both end at 84x84, per-channel normalized, CHW layout.
DiffArray preprocess(const Image& image, bool train_mode, Rng& rng,
                     const AugmentConfig& augment = {});
/// Normalized [N,3,84,84] batch of the given items.
DiffArray make_batch(const LabeledDataset& dataset, const std::vector<std::size_t>& items,
                     bool train_mode, Rng& rng, const AugmentConfig& augment = {});

// Image directories ----------------------------------------------------------

/// root/<class>/<file>, lexicographic order, extension allowlist, hidden
/// entries skipped. Undecodable files are listed in load_errors.
LabeledDataset load_image_dir(const std::filesystem::path& root);
bool has_image_extension(const std::filesystem::path& path);
/// Deterministic JSON listing of classes, items and load errors.
std::string manifest_json(const LabeledDataset& dataset);
void write_image_dir(const LabeledDataset& dataset, const std::filesystem::path& root);

Image decode_image(const std::filesystem::path& path);
void encode_image(const Image& image, const std::filesystem::path& path);

// Synthetic fine-grained data ------------------------------------------------

struct SyntheticSpec {
  std::size_t classes = 30;
  std::size_t images_per_class = 40;
  double variation = 0.15;  // per-image perturbation scale
  std::uint64_t seed = 7;
  std::size_t size = kImageExtent;

  static constexpr std::size_t kImageExtent = 84;
};

/// Each class is a colored shape over a striped background with its own hue,
/// shape, background and stripe parameters; images perturb those parameters
/// and add pixel noise in proportion to `variation`.
LabeledDataset generate_synthetic(const SyntheticSpec& spec);

}  // namespace bsnet
