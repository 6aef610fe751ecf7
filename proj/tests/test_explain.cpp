#include <doctest.h>

#include <algorithm>

#include "bsnet/explain.hpp"
#include "support.hpp"

using namespace bsnet;

namespace {

std::vector<double> uniform_values(std::size_t n, Rng& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

}  // namespace

TEST_SUITE("grad-cam") {
  TEST_CASE("a single weighted channel reproduces that channel") {
    Rng rng(1);
    const std::size_t c = 3, h = 4, w = 5;
    const auto feature = uniform_values(c * h * w, rng, 0.1, 2.0);
    std::vector<double> grad(c * h * w, 0.0);
    std::fill(grad.begin(), grad.begin() + h * w, 0.7);
    const auto hm = grad_cam_map(feature, grad, c, h, w);
    const auto [lo, hi] = std::minmax_element(feature.begin(), feature.begin() + h * w);
    CHECK_FALSE(hm.flat);
    for (std::size_t i = 0; i < h * w; ++i) {
      CHECK(hm.values[i] == doctest::Approx((feature[i] - *lo) / (*hi - *lo)).epsilon(1e-12));
    }
    CHECK(hm.upsampled.size() == kHeatmapSize * kHeatmapSize);
  }

  TEST_CASE("zero gradient gives an all-zero flagged map") {
    const std::vector<double> feature(2 * 3 * 3, 1.0), grad(2 * 3 * 3, 0.0);
    const auto hm = grad_cam_map(feature, grad, 2, 3, 3);
    CHECK(hm.flat);
    CHECK(std::all_of(hm.values.begin(), hm.values.end(), [](double v) { return v == 0.0; }));
    CHECK(std::all_of(hm.upsampled.begin(), hm.upsampled.end(), [](double v) { return v == 0.0; }));
  }

  TEST_CASE("maps lie in the unit interval and ignore positive gradient scale") {
    Rng rng(2);
    for (int t = 0; t < 20; ++t) {
      const std::size_t c = 4, h = 5, w = 5;
      const auto feature = uniform_values(c * h * w, rng, -1.0, 1.0);
      const auto grad = uniform_values(c * h * w, rng, -1.0, 1.0);
      auto scaled = grad;
      for (auto& g : scaled) g *= 3.5;
      const auto a = grad_cam_map(feature, grad, c, h, w);
      const auto b = grad_cam_map(feature, scaled, c, h, w);
      for (std::size_t i = 0; i < a.values.size(); ++i) {
        CHECK(a.values[i] == doctest::Approx(b.values[i]).epsilon(1e-9));
      }
      for (double v : a.upsampled) CHECK((v >= 0.0 && v <= 1.0));
      if (!a.flat) CHECK(*std::max_element(a.values.begin(), a.values.end()) == doctest::Approx(1.0));
    }
  }

  TEST_CASE("autodiff gradients feed the map") {
    Rng rng(3);
    const auto feature = bsnet::testing::random_array({1, 3, 4, 4}, rng, false);
    const auto weights = bsnet::testing::random_array({1, 3, 4, 4}, rng, false);
    const auto hm = grad_cam(feature, [&](const DiffArray& f) { return sum(mul(f, weights)); });
    const auto direct = grad_cam_map(feature.data(), weights.data(), 3, 4, 4);
    CHECK(hm.values == direct.values);
  }
}

TEST_SUITE("query explanations") {
  TEST_CASE("every head and the mean get a map") {
    ModelSpec spec;
    spec.heads = {HeadKind::relation, HeadKind::cosine};
    BisimModel model(spec, 4);
    const auto ds = generate_synthetic({2, 3, 0.1, 2, 84});
    Rng rng(5);
    const auto support = make_batch(ds, {0, 3}, false, rng);
    const auto queries = make_batch(ds, {1, 4}, false, rng);
    const auto ex = explain_query(model, support, queries, 2, 1, 1);
    REQUIRE(ex.per_head.size() == 2);
    CHECK(ex.per_head[0].head == "relation");
    CHECK(ex.per_head[1].head == "cosine");
    CHECK(ex.mean.head == "mean");
    CHECK(ex.target_class == ex.predicted_class);
    for (const auto& hm : ex.per_head) {
      CHECK(hm.height == 19);
      CHECK(hm.width == 19);
      CHECK(hm.target_class == ex.target_class);
    }
    for (const auto& p : model.state().parameters) {
      if (p.value.has_grad()) {
        const auto g = p.value.grad();
        CHECK(std::all_of(g.begin(), g.end(), [](double v) { return v == 0.0; }));
      }
    }
    const auto forced = explain_query(model, support, queries, 2, 1, 1, 0);
    CHECK(forced.target_class == 0);
    CHECK_THROWS(explain_query(model, support, queries, 2, 1, 2));
  }

  TEST_CASE("overlay and file output") {
    bsnet::testing::TempDir dir("heat");
    Heatmap hm;
    hm.height = hm.width = 1;
    hm.values = {1.0};
    hm.upsampled.assign(kHeatmapSize * kHeatmapSize, 1.0);
    hm.head = "relation";
    hm.target_class = 2;
    Image img(30, 40);
    const auto over = heatmap_overlay(img, hm);
    CHECK(over.height == kHeatmapSize);
    CHECK(over.at(0, 0, 0) == doctest::Approx(0.5));
    for (float v : over.pixels) CHECK((v >= 0.0f && v <= 1.0f));
    const auto path = write_heatmap(dir.path(), 3, 7, hm, img);
    CHECK(std::filesystem::exists(path));
    CHECK(path.stem().string() == "3_7_2_relation");
  }
}
