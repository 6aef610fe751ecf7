#include "bsnet/data.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>

namespace bsnet {

namespace fs = std::filesystem;

std::string to_string(SplitTag tag) {
  switch (tag) {
    case SplitTag::full:
      return "full";
    case SplitTag::train:
      return "train";
    case SplitTag::val:
      return "val";
    case SplitTag::test:
      return "test";
  }
  return "unknown";
}

std::vector<std::size_t> LabeledDataset::classes() const {
  std::set<std::size_t> ids;
  for (const auto& item : items) ids.insert(item.label);
  return {ids.begin(), ids.end()};
}

// Splitting -------------------------------------------------------------------

std::array<std::size_t, 3> split_sizes(std::size_t classes, std::array<std::size_t, 3> ratio) {
  const auto parts = ratio[0] + ratio[1] + ratio[2];
  if (parts == 0 || ratio[0] == 0 || ratio[1] == 0 || ratio[2] == 0) {
    throw ConfigError("split ratio entries must be positive");
  }
  std::array<std::size_t, 3> sizes{};
  std::size_t used = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    sizes[i] = classes * ratio[i] / parts;
    used += sizes[i];
  }
  for (std::size_t i = 0; used < classes; i = (i + 1) % 2, ++used) ++sizes[i];
  return sizes;
}

namespace {

DatasetSplits split_by_sizes(const LabeledDataset& dataset, std::uint64_t seed,
                             std::array<std::size_t, 3> sizes) {
  auto ids = dataset.classes();
  if (sizes[0] + sizes[1] + sizes[2] > ids.size()) {
    throw DataError("split needs " + std::to_string(sizes[0] + sizes[1] + sizes[2]) +
                    " classes, dataset has " + std::to_string(ids.size()));
  }
  Rng rng(seed);
  std::shuffle(ids.begin(), ids.end(), rng);
  std::vector<int> owner(dataset.class_names.size(), -1);
  std::size_t pos = 0;
  for (int s = 0; s < 3; ++s) {
    for (std::size_t i = 0; i < sizes[static_cast<std::size_t>(s)]; ++i) owner[ids[pos++]] = s;
  }
  DatasetSplits out;
  LabeledDataset* parts[3] = {&out.train, &out.val, &out.test};
  const SplitTag tags[3] = {SplitTag::train, SplitTag::val, SplitTag::test};
  for (int s = 0; s < 3; ++s) {
    parts[s]->class_names = dataset.class_names;
    parts[s]->split = tags[s];
  }
  for (const auto& item : dataset.items) {
    const int s = owner.at(item.label);
    if (s >= 0) parts[s]->items.push_back(item);
  }
  return out;
}

}  // namespace

DatasetSplits split_dataset(const LabeledDataset& dataset, std::uint64_t seed,
                            std::array<std::size_t, 3> ratio) {
  const auto n = dataset.classes().size();
  if (n < 4) {
    throw DataError("splitting needs at least 4 classes, dataset has " + std::to_string(n));
  }
  return split_by_sizes(dataset, seed, split_sizes(n, ratio));
}

DatasetSplits split_counts(const LabeledDataset& dataset, std::uint64_t seed,
                           std::array<std::size_t, 3> counts) {
  if (counts[0] == 0 || counts[1] == 0 || counts[2] == 0) {
    throw ConfigError("split counts must be positive");
  }
  return split_by_sizes(dataset, seed, counts);
}

// Episodes --------------------------------------------------------------------

EpisodeSampler::EpisodeSampler(const LabeledDataset& dataset) : dataset_(&dataset) {
  class_ids_ = dataset.classes();
  std::vector<std::size_t> slot(dataset.class_names.size(), 0);
  for (std::size_t i = 0; i < class_ids_.size(); ++i) slot[class_ids_[i]] = i;
  members_.resize(class_ids_.size());
  for (std::size_t i = 0; i < dataset.items.size(); ++i) {
    members_[slot[dataset.items[i].label]].push_back(i);
  }
}

namespace {

// First `count` entries of a partial Fisher-Yates shuffle of `pool`.
std::vector<std::size_t> choose(std::vector<std::size_t> pool, std::size_t count, Rng& rng) {
  for (std::size_t i = 0; i < count; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  pool.resize(count);
  return pool;
}

}  // namespace

Episode EpisodeSampler::sample(std::size_t way, std::size_t shot, std::size_t n_query,
                               Rng& rng) const {
  if (way < 2 || shot < 1 || n_query < 1) {
    throw ConfigError("episodes need way >= 2, shot >= 1 and at least one query per class");
  }
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < class_ids_.size(); ++i) {
    if (members_[i].size() >= shot + n_query) eligible.push_back(i);
  }
  if (eligible.size() < way) {
    throw DataError(std::to_string(way) + "-way episodes with " + std::to_string(shot + n_query) +
                    " images per class need " + std::to_string(way) + " classes; only " +
                    std::to_string(eligible.size()) + " of " + std::to_string(class_ids_.size()) +
                    " in the " + to_string(dataset_->split) + " split qualify");
  }
  Episode ep;
  ep.way = way;
  ep.shot = shot;
  ep.queries_per_class = n_query;
  const auto picked = choose(eligible, way, rng);
  std::vector<std::vector<std::size_t>> drawn(way);
  for (std::size_t c = 0; c < way; ++c) {
    ep.classes.push_back(class_ids_[picked[c]]);
    drawn[c] = choose(members_[picked[c]], shot + n_query, rng);
  }
  for (std::size_t c = 0; c < way; ++c) {
    ep.support.insert(ep.support.end(), drawn[c].begin(), drawn[c].begin() + shot);
  }
  for (std::size_t c = 0; c < way; ++c) {
    ep.query.insert(ep.query.end(), drawn[c].begin() + shot, drawn[c].end());
    ep.query_labels.insert(ep.query_labels.end(), n_query, c);
  }
  return ep;
}

Episode sample_episode(const LabeledDataset& dataset, std::size_t way, std::size_t shot,
                       std::size_t n_query, Rng& rng) {
  return EpisodeSampler(dataset).sample(way, shot, n_query, rng);
}

// Image pipeline --------------------------------------------------------------

namespace {

cv::Mat as_mat(const Image& image) {
  return cv::Mat(static_cast<int>(image.height), static_cast<int>(image.width), CV_32FC3,
                 const_cast<float*>(image.pixels.data()));
}

Image from_mat(const cv::Mat& mat) {
  cv::Mat m = mat.isContinuous() ? mat : mat.clone();
  Image out(static_cast<std::size_t>(m.rows), static_cast<std::size_t>(m.cols));
  std::copy_n(m.ptr<float>(), out.pixels.size(), out.pixels.begin());
  return out;
}

void check_extent(const Image& image) {
  if (image.height < kMinImageExtent || image.width < kMinImageExtent) {
    throw DataError("image " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                    " is smaller than the 8x8 minimum");
  }
}

struct CropBox {
  std::size_t y, x, h, w;
};

CropBox random_resized_crop(std::size_t height, std::size_t width, const AugmentConfig& a,
                            Rng& rng) {
  const double area = static_cast<double>(height * width);
  std::uniform_real_distribution<double> scale(a.crop_scale_min, a.crop_scale_max);
  std::uniform_real_distribution<double> log_ratio(std::log(a.crop_ratio_min),
                                                   std::log(a.crop_ratio_max));
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = area * scale(rng);
    const double ratio = std::exp(log_ratio(rng));
    const auto w = static_cast<std::size_t>(std::lround(std::sqrt(target * ratio)));
    const auto h = static_cast<std::size_t>(std::lround(std::sqrt(target / ratio)));
    if (w > 0 && h > 0 && w <= width && h <= height) {
      std::uniform_int_distribution<std::size_t> oy(0, height - h), ox(0, width - w);
      const auto y = oy(rng);
      return {y, ox(rng), h, w};
    }
  }
  // Fallback: central crop with the aspect ratio clamped into range.
  const double in_ratio = static_cast<double>(width) / static_cast<double>(height);
  std::size_t w = width, h = height;
  if (in_ratio < a.crop_ratio_min) {
    h = static_cast<std::size_t>(std::lround(static_cast<double>(w) / a.crop_ratio_min));
  } else if (in_ratio > a.crop_ratio_max) {
    w = static_cast<std::size_t>(std::lround(static_cast<double>(h) * a.crop_ratio_max));
  }
  return {(height - h) / 2, (width - w) / 2, h, w};
}

void jitter_colors(Image& image, double j, Rng& rng) {
  if (j <= 0.0) return;
  std::uniform_real_distribution<double> factor(std::max(0.0, 1.0 - j), 1.0 + j);
  const auto b = static_cast<float>(factor(rng));
  const auto c = static_cast<float>(factor(rng));
  const auto s = static_cast<float>(factor(rng));
  auto& px = image.pixels;
  const std::size_t n = px.size() / 3;
  auto gray = [&px](std::size_t i) {
    return 0.299f * px[3 * i] + 0.587f * px[3 * i + 1] + 0.114f * px[3 * i + 2];
  };
  for (auto& v : px) v = std::clamp(v * b, 0.0f, 1.0f);
  double mean = 0.0;
  for (std::size_t i = 0; i < n; ++i) mean += gray(i);
  const auto m = static_cast<float>(mean / static_cast<double>(n));
  for (auto& v : px) v = std::clamp((v - m) * c + m, 0.0f, 1.0f);
  for (std::size_t i = 0; i < n; ++i) {
    const float g = gray(i);
    for (std::size_t k = 0; k < 3; ++k) {
      px[3 * i + k] = std::clamp((px[3 * i + k] - g) * s + g, 0.0f, 1.0f);
    }
  }
}

void write_normalized(const Image& image, double* out) {
  const std::size_t plane = image.height * image.width;
  for (std::size_t k = 0; k < 3; ++k) {
    for (std::size_t i = 0; i < plane; ++i) {
      out[k * plane + i] = (static_cast<double>(image.pixels[3 * i + k]) - kChannelMean[k]) /
                           kChannelStd[k];
    }
  }
}

Image augmented_or_resized(const Image& image, bool train_mode, Rng& rng,
                           const AugmentConfig& augment) {
  check_extent(image);
  if (!train_mode || !augment.enabled) return resize_bilinear(image, 84, 84);
  const auto box = random_resized_crop(image.height, image.width, augment, rng);
  const cv::Mat roi = as_mat(image)(cv::Rect(static_cast<int>(box.x), static_cast<int>(box.y),
                                             static_cast<int>(box.w), static_cast<int>(box.h)));
  cv::Mat resized;
  cv::resize(roi, resized, cv::Size(84, 84), 0, 0, cv::INTER_LINEAR);
  Image out = from_mat(resized);
  jitter_colors(out, augment.jitter, rng);
  std::bernoulli_distribution flip(augment.flip_probability);
  if (flip(rng)) out = flip_horizontal(out);
  return out;
}

}  // namespace

Image resize_bilinear(const Image& image, std::size_t height, std::size_t width) {
  if (image.height == height && image.width == width) return image;
  cv::Mat out;
  cv::resize(as_mat(image), out, cv::Size(static_cast<int>(width), static_cast<int>(height)), 0, 0,
             cv::INTER_LINEAR);
  return from_mat(out);
}

Image flip_horizontal(const Image& image) {
  cv::Mat out;
  cv::flip(as_mat(image), out, 1);
  return from_mat(out);
}

DiffArray preprocess(const Image& image, bool train_mode, Rng& rng, const AugmentConfig& augment) {
  const Image ready = augmented_or_resized(image, train_mode, rng, augment);
  std::vector<double> data(3 * 84 * 84);
  write_normalized(ready, data.data());
  return DiffArray::from_data({3, 84, 84}, std::move(data));
}

DiffArray make_batch(const LabeledDataset& dataset, const std::vector<std::size_t>& items,
                     bool train_mode, Rng& rng, const AugmentConfig& augment) {
  constexpr std::size_t per = 3 * 84 * 84;
  std::vector<double> data(items.size() * per);
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& image = *dataset.items.at(items[i]).image;
    write_normalized(augmented_or_resized(image, train_mode, rng, augment), data.data() + i * per);
  }
  return DiffArray::from_data({items.size(), 3, 84, 84}, std::move(data));
}

// Image directories -------------------------------------------------------------

bool has_image_extension(const fs::path& path) {
  auto ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(),
                 [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".ppm" || ext == ".bmp";
}

Image decode_image(const fs::path& path) {
  const cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw DataError(path.string() + ": cannot decode image");
  cv::Mat rgb, f;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  rgb.convertTo(f, CV_32FC3, 1.0 / 255.0);
  return from_mat(f);
}

void encode_image(const Image& image, const fs::path& path) {
  cv::Mat u8, bgr;
  as_mat(image).convertTo(u8, CV_8UC3, 255.0);
  cv::cvtColor(u8, bgr, cv::COLOR_RGB2BGR);
  if (!cv::imwrite(path.string(), bgr)) throw DataError(path.string() + ": cannot write image");
}

namespace {

bool hidden(const fs::path& p) {
  const auto name = p.filename().string();
  return !name.empty() && name.front() == '.';
}

std::vector<fs::path> sorted_entries(const fs::path& dir, bool directories) {
  std::vector<fs::path> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (hidden(entry.path())) continue;
    if (directories ? entry.is_directory() : entry.is_regular_file()) out.push_back(entry.path());
  }
  std::sort(out.begin(), out.end(),
            [](const fs::path& a, const fs::path& b) { return a.filename() < b.filename(); });
  return out;
}

}  // namespace

LabeledDataset load_image_dir(const fs::path& root) {
  std::error_code ec;
  if (!fs::is_directory(root, ec)) throw DataError("dataset root " + root.string() + " not found");
  LabeledDataset ds;
  for (const auto& class_dir : sorted_entries(root, true)) {
    const auto label = ds.class_names.size();
    std::size_t loaded = 0;
    for (const auto& file : sorted_entries(class_dir, false)) {
      if (!has_image_extension(file)) continue;
      try {
        auto image = std::make_shared<const Image>(decode_image(file));
        ds.items.push_back({std::move(image), label, file.string()});
        ++loaded;
      } catch (const std::exception& e) {
        ds.load_errors.push_back(e.what());
      }
    }
    if (loaded == 0) {
      throw DataError("class directory " + class_dir.string() + " holds no readable images");
    }
    ds.class_names.push_back(class_dir.filename().string());
  }
  if (ds.class_names.empty()) throw DataError("dataset root " + root.string() + " has no classes");
  return ds;
}

std::string manifest_json(const LabeledDataset& dataset) {
  nlohmann::ordered_json j;
  j["split"] = to_string(dataset.split);
  j["classes"] = dataset.class_names;
  auto items = nlohmann::ordered_json::array();
  for (const auto& item : dataset.items) {
    items.push_back({{"source", item.source},
                     {"label", item.label},
                     {"height", item.image ? item.image->height : 0},
                     {"width", item.image ? item.image->width : 0}});
  }
  j["items"] = std::move(items);
  j["errors"] = dataset.load_errors;
  return j.dump(2);
}

void write_image_dir(const LabeledDataset& dataset, const fs::path& root) {
  std::vector<std::size_t> counter(dataset.class_names.size(), 0);
  for (const auto& name : dataset.class_names) fs::create_directories(root / name);
  for (const auto& item : dataset.items) {
    char name[32];
    std::snprintf(name, sizeof name, "%05zu.png", counter[item.label]++);
    encode_image(*item.image, root / dataset.class_names[item.label] / name);
  }
}

// Synthetic data -----------------------------------------------------------------

namespace {

enum class Glyph { disc, square, triangle, ring, cross };
constexpr int kGlyphs = 5;

struct ClassStyle {
  double hue, bg_hue, radius, cx, cy, stripe_freq, stripe_angle, saturation;
  Glyph glyph;
};

std::array<float, 3> hsv_to_rgb(double h, double s, double v) {
  h = h - std::floor(h);
  s = std::clamp(s, 0.0, 1.0);
  v = std::clamp(v, 0.0, 1.0);
  const double hh = h * 6.0;
  const int sector = static_cast<int>(hh) % 6;
  const double f = hh - std::floor(hh);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  double r = v, g = t, b = p;
  switch (sector) {
    case 1: r = q, g = v, b = p; break;
    case 2: r = p, g = v, b = t; break;
    case 3: r = p, g = q, b = v; break;
    case 4: r = t, g = p, b = v; break;
    case 5: r = v, g = p, b = q; break;
    default: break;
  }
  return {static_cast<float>(r), static_cast<float>(g), static_cast<float>(b)};
}

bool inside(Glyph glyph, double dx, double dy, double r) {
  const double ax = std::abs(dx), ay = std::abs(dy);
  switch (glyph) {
    case Glyph::disc:
      return dx * dx + dy * dy <= r * r;
    case Glyph::square:
      return ax <= 0.8 * r && ay <= 0.8 * r;
    case Glyph::triangle:
      return dy <= 0.8 * r && dy >= -r + 2.0 * ax;
    case Glyph::ring: {
      const double d2 = dx * dx + dy * dy;
      return d2 <= r * r && d2 >= 0.36 * r * r;
    }
    case Glyph::cross:
      return (ax <= 0.3 * r && ay <= r) || (ay <= 0.3 * r && ax <= r);
  }
  return false;
}

ClassStyle class_style(std::uint64_t seed, std::size_t c) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(c), 0x5eedu};
  Rng rng(seq);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  ClassStyle s{};
  s.hue = std::fmod(static_cast<double>(c) * 0.6180339887 + 0.1 * u(rng), 1.0);
  s.bg_hue = std::fmod(s.hue + 0.3 + 0.4 * u(rng), 1.0);
  s.radius = 0.2 + 0.12 * u(rng);
  s.cx = 0.5 + 0.2 * (u(rng) - 0.5);
  s.cy = 0.5 + 0.2 * (u(rng) - 0.5);
  s.stripe_freq = 2.0 + 5.0 * u(rng);
  s.stripe_angle = std::numbers::pi * u(rng);
  s.saturation = 0.6 + 0.4 * u(rng);
  s.glyph = static_cast<Glyph>(c % kGlyphs);
  return s;
}

Image render(const ClassStyle& base, double variation, std::size_t size, Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  ClassStyle s = base;
  s.hue += 0.1 * variation * n(rng);
  s.bg_hue += 0.1 * variation * n(rng);
  s.radius *= 1.0 + 0.5 * variation * n(rng);
  s.cx += 0.3 * variation * n(rng);
  s.cy += 0.3 * variation * n(rng);
  s.stripe_angle += variation * n(rng);
  const double phase = 2.0 * std::numbers::pi * variation * n(rng);
  const double brightness = 1.0 + 0.3 * variation * n(rng);
  const double noise = 0.2 * variation;

  const auto fg = hsv_to_rgb(s.hue, s.saturation, 0.95 * brightness);
  const auto bg_light = hsv_to_rgb(s.bg_hue, 0.35, 0.55 * brightness);
  const auto bg_dark = hsv_to_rgb(s.bg_hue, 0.35, 0.3 * brightness);
  const double ca = std::cos(s.stripe_angle), sa = std::sin(s.stripe_angle);
  Image img(size, size);
  const double inv = 1.0 / static_cast<double>(size);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const double px = (static_cast<double>(x) + 0.5) * inv, py = (static_cast<double>(y) + 0.5) * inv;
      std::array<float, 3> rgb;
      if (inside(s.glyph, px - s.cx, py - s.cy, s.radius)) {
        rgb = fg;
      } else {
        const double t = std::sin(2.0 * std::numbers::pi * s.stripe_freq * (px * ca + py * sa) + phase);
        rgb = t > 0.0 ? bg_light : bg_dark;
      }
      for (std::size_t k = 0; k < 3; ++k) {
        const double v = rgb[k] + (noise > 0.0 ? noise * n(rng) : 0.0);
        img.at(y, x, k) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return img;
}

}  // namespace

LabeledDataset generate_synthetic(const SyntheticSpec& spec) {
  if (spec.classes == 0 || spec.images_per_class == 0) {
    throw ConfigError("synthetic dataset needs at least one class and one image per class");
  }
  if (spec.variation < 0.0) throw ConfigError("synthetic variation must be non-negative");
  if (spec.size < kMinImageExtent) throw ConfigError("synthetic image size must be at least 8");
  LabeledDataset ds;
  for (std::size_t c = 0; c < spec.classes; ++c) {
    char name[32];
    std::snprintf(name, sizeof name, "class_%03zu", c);
    ds.class_names.emplace_back(name);
    const auto style = class_style(spec.seed, c);
    for (std::size_t i = 0; i < spec.images_per_class; ++i) {
      std::seed_seq seq{static_cast<std::uint32_t>(spec.seed),
                        static_cast<std::uint32_t>(spec.seed >> 32), static_cast<std::uint32_t>(c),
                        static_cast<std::uint32_t>(i + 1)};
      Rng rng(seq);
      auto image = std::make_shared<const Image>(render(style, spec.variation, spec.size, rng));
      ds.items.push_back({std::move(image), c, std::string(name) + "/" + std::to_string(i)});
    }
  }
  return ds;
}

}  // namespace bsnet
