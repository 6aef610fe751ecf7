#include "bsnet/explain.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "bsnet/colormap.hpp"
#include "bsnet/ops.hpp"

namespace bsnet {

Heatmap grad_cam_map(std::span<const double> feature, std::span<const double> grad,
                     std::size_t channels, std::size_t height, std::size_t width) {
  const std::size_t hw = height * width;
  if (feature.size() != channels * hw || grad.size() != channels * hw || hw == 0) {
    throw ShapeError("grad_cam_map: feature and gradient must both be [C, h, w]");
  }
  Heatmap h;
  h.height = height;
  h.width = width;
  h.values.assign(hw, 0.0);
  for (std::size_t k = 0; k < channels; ++k) {
    double w = 0.0;
    for (std::size_t i = 0; i < hw; ++i) w += grad[k * hw + i];
    w /= static_cast<double>(hw);
    if (w == 0.0) continue;
    for (std::size_t i = 0; i < hw; ++i) h.values[i] += w * feature[k * hw + i];
  }
  for (auto& v : h.values) v = std::max(v, 0.0);
  const auto [lo, hi] = std::minmax_element(h.values.begin(), h.values.end());
  const double min = *lo, range = *hi - *lo;
  if (!(range > 0.0) || !std::isfinite(range)) {
    std::fill(h.values.begin(), h.values.end(), 0.0);
    h.flat = true;
  } else {
    for (auto& v : h.values) v = (v - min) / range;
  }

  cv::Mat src(static_cast<int>(height), static_cast<int>(width), CV_64F, h.values.data());
  cv::Mat up;
  cv::resize(src, up, cv::Size(kHeatmapSize, kHeatmapSize), 0, 0, cv::INTER_LINEAR);
  h.upsampled.assign(up.begin<double>(), up.end<double>());
  for (auto& v : h.upsampled) v = std::clamp(v, 0.0, 1.0);
  return h;
}

Heatmap grad_cam(const DiffArray& feature,
                 const std::function<DiffArray(const DiffArray&)>& score) {
  const auto& s = feature.shape();
  const bool batched = s.size() == 4;
  if (!(s.size() == 3 || (batched && s[0] == 1))) {
    throw ShapeError("grad_cam expects a [C, h, w] or [1, C, h, w] feature map, got " +
                     shape_string(s));
  }
  const std::size_t c = s[s.size() - 3], h = s[s.size() - 2], w = s[s.size() - 1];
  const auto leaf = feature.detach(true);
  const auto out = score(leaf);
  if (out.size() != 1) throw ShapeError("grad_cam score must be a scalar");
  out.backward();
  std::vector<double> grad(leaf.size(), 0.0);
  if (leaf.has_grad()) grad.assign(leaf.grad().begin(), leaf.grad().end());
  return grad_cam_map(leaf.data(), grad, c, h, w);
}

QueryExplanation explain_query(BisimModel& model, const DiffArray& support,
                               const DiffArray& queries, std::size_t way, std::size_t shot,
                               std::size_t q, std::optional<std::size_t> target) {
  if (q >= queries.dim(0)) throw ShapeError("query index out of range");
  if (target && *target >= way) throw ConfigError("target class out of range");
  EpisodeFeatures base;
  {
    NoGradGuard no_grad;
    base = model.embed(support, slice(queries, q, q + 1), way, shot, BatchNormMode::eval);
  }
  base.support = base.support.detach();
  const std::size_t heads = model.head_count();

  QueryExplanation ex;
  ex.query = q;
  {
    NoGradGuard no_grad;
    const auto scores = ScoreMatrix::from_heads(model.head_scores(base, BatchNormMode::eval));
    ex.predicted_class = combined_prediction(scores, 0);
  }
  ex.target_class = target.value_or(ex.predicted_class);

  // Scalar sum_d weight_d * S^d[0, target]; one backward per heatmap.
  auto target_score = [&](const DiffArray& qf, std::size_t only_head, double weight) {
    EpisodeFeatures f = base;
    f.query = qf;
    const auto per_head = model.head_scores(f, BatchNormMode::eval);
    std::vector<double> mask(way, 0.0);
    mask[ex.target_class] = weight;
    const auto m = DiffArray::from_data({1, way}, mask);
    DiffArray total;
    for (std::size_t d = 0; d < heads; ++d) {
      if (only_head != heads && d != only_head) continue;
      const auto term = sum(mul(per_head[d], m));
      total = total.defined() ? add(total, term) : term;
    }
    return total;
  };

  for (std::size_t d = 0; d < heads; ++d) {
    auto hm = grad_cam(base.query, [&](const DiffArray& qf) { return target_score(qf, d, 1.0); });
    hm.target_class = ex.target_class;
    hm.head = to_string(model.head(d).kind());
    ex.per_head.push_back(std::move(hm));
  }
  ex.mean = grad_cam(base.query, [&](const DiffArray& qf) {
    return target_score(qf, heads, 1.0 / static_cast<double>(heads));
  });
  ex.mean.target_class = ex.target_class;
  ex.mean.head = "mean";
  for (auto& p : model.parameters()) p.zero_grad();
  return ex;
}

Image heatmap_overlay(const Image& image, const Heatmap& heatmap) {
  const Image base = resize_bilinear(image, kHeatmapSize, kHeatmapSize);
  Image out(kHeatmapSize, kHeatmapSize);
  for (std::size_t y = 0; y < kHeatmapSize; ++y) {
    for (std::size_t x = 0; x < kHeatmapSize; ++x) {
      const double v = heatmap.upsampled.at(y * kHeatmapSize + x);
      const auto idx = static_cast<std::size_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
      const auto& rgb = kHeatColormap[idx];
      for (std::size_t c = 0; c < 3; ++c) {
        out.at(y, x, c) =
            static_cast<float>(0.5 * base.at(y, x, c) + 0.5 * (rgb[c] / 255.0));
      }
    }
  }
  return out;
}

namespace {

void write_ppm(const Image& image, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(path.string() + ": cannot write image");
  out << "P6\n" << image.width << ' ' << image.height << "\n255\n";
  for (float v : image.pixels) {
    out.put(static_cast<char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)));
  }
  if (!out) throw DataError(path.string() + ": write failed");
}

}  // namespace

std::filesystem::path write_heatmap(const std::filesystem::path& dir, std::size_t episode,
                                    std::size_t q, const Heatmap& heatmap, const Image& image) {
  const auto stem = std::to_string(episode) + "_" + std::to_string(q) + "_" +
                    std::to_string(heatmap.target_class) + "_" + heatmap.head;
  const auto overlay = heatmap_overlay(image, heatmap);
  auto path = dir / (stem + ".png");
  try {
    encode_image(overlay, path);
  } catch (const std::exception&) {
    path = dir / (stem + ".ppm");
    write_ppm(overlay, path);
  }
  return path;
}

}  // namespace bsnet
