#include <doctest.h>

#include <algorithm>
#include <fstream>
#include <limits>
#include <map>
#include <set>

#include "bsnet/data.hpp"
#include "support.hpp"

using namespace bsnet;
using bsnet::testing::TempDir;

namespace {

LabeledDataset toy_dataset(std::size_t classes, std::size_t per_class) {
  LabeledDataset ds;
  for (std::size_t c = 0; c < classes; ++c) {
    ds.class_names.push_back("c" + std::to_string(c));
    for (std::size_t i = 0; i < per_class; ++i) {
      auto img = std::make_shared<Image>(10, 12);
      std::fill(img->pixels.begin(), img->pixels.end(), static_cast<float>(c) / classes);
      ds.items.push_back({img, c, "toy"});
    }
  }
  return ds;
}

std::set<std::size_t> class_set(const LabeledDataset& ds) {
  const auto c = ds.classes();
  return {c.begin(), c.end()};
}

}  // namespace

TEST_SUITE("splits") {
  TEST_CASE("2:1:1 class counts") {
    CHECK(split_sizes(200, {2, 1, 1}) == std::array<std::size_t, 3>{100, 50, 50});
    CHECK(split_sizes(4, {2, 1, 1}) == std::array<std::size_t, 3>{2, 1, 1});
    CHECK(split_sizes(7, {2, 1, 1}) == std::array<std::size_t, 3>{4, 2, 1});
    CHECK(split_sizes(6, {2, 1, 1}) == std::array<std::size_t, 3>{4, 1, 1});
    CHECK_THROWS_AS(split_dataset(toy_dataset(3, 2), 1), DataError);
  }

  TEST_CASE("splits are disjoint and complete for random seeds") {
    const auto ds = toy_dataset(23, 3);
    for (std::uint64_t seed = 0; seed < 25; ++seed) {
      const auto s = split_dataset(ds, seed);
      const auto a = class_set(s.train), b = class_set(s.val), c = class_set(s.test);
      CHECK(a.size() + b.size() + c.size() == 23);
      std::set<std::size_t> all = a;
      all.insert(b.begin(), b.end());
      all.insert(c.begin(), c.end());
      CHECK(all.size() == 23);
      CHECK(s.train.items.size() + s.val.items.size() + s.test.items.size() == ds.items.size());
      for (const auto& item : s.val.items) CHECK(b.count(item.label) == 1);
    }
    const auto x = split_counts(ds, 3, {20, 2, 1});
    CHECK(x.train.classes().size() == 20);
    CHECK(x.test.classes().size() == 1);
    CHECK_THROWS_AS(split_counts(ds, 3, {20, 5, 5}), DataError);
  }
}

TEST_SUITE("episodes") {
  TEST_CASE("episode composition counts") {
    const auto ds = toy_dataset(8, 12);
    const EpisodeSampler sampler(ds);
    Rng rng(1);
    for (std::size_t way : {2, 5}) {
      for (std::size_t shot : {1, 5}) {
        for (std::size_t nq : {1, 6}) {
          const auto e = sampler.sample(way, shot, nq, rng);
          CHECK(e.support.size() == way * shot);
          CHECK(e.query.size() == way * nq);
          CHECK(e.query_labels.size() == way * nq);
          std::set<std::size_t> s(e.support.begin(), e.support.end());
          for (auto q : e.query) CHECK(s.count(q) == 0);
          for (std::size_t i = 0; i < e.query.size(); ++i) {
            CHECK(ds.items[e.query[i]].label == e.classes[e.query_labels[i]]);
            CHECK(e.query_labels[i] == i / nq);
          }
        }
      }
    }
    const auto five = EpisodeSampler(toy_dataset(5, 17)).sample(5, 1, 16, rng);
    CHECK(five.support.size() + five.query.size() == 85);
  }

  TEST_CASE("class choice is uniform") {
    const auto ds = toy_dataset(10, 3);
    const EpisodeSampler sampler(ds);
    Rng rng(2);
    std::map<std::size_t, int> hits;
    const int n = 10000;
    for (int i = 0; i < n; ++i) {
      for (auto c : sampler.sample(5, 1, 1, rng).classes) ++hits[c];
    }
    for (const auto& [c, k] : hits) CHECK(std::abs(k / double(n) - 0.5) < 0.02);
  }

  TEST_CASE("insufficient data") {
    auto ds = toy_dataset(6, 3);
    const EpisodeSampler sampler(ds);
    Rng rng(3);
    CHECK_THROWS_AS(sampler.sample(7, 1, 1, rng), DataError);
    CHECK_THROWS_AS(sampler.sample(5, 2, 2, rng), DataError);  // needs 4 items per class
    CHECK_THROWS_AS(sampler.sample(1, 1, 1, rng), ConfigError);
  }
}

TEST_SUITE("preprocess") {
  TEST_CASE("output is always 3x84x84") {
    Rng rng(4);
    std::uniform_int_distribution<std::size_t> size(8, 130);
    for (int i = 0; i < 20; ++i) {
      Image img(size(rng), size(rng));
      for (auto& p : img.pixels) p = std::uniform_real_distribution<float>(0, 1)(rng);
      CHECK(preprocess(img, true, rng).shape() == Shape{3, 84, 84});
      CHECK(preprocess(img, false, rng).shape() == Shape{3, 84, 84});
    }
    CHECK_THROWS_AS(preprocess(Image(7, 20), false, rng), DataError);
  }

  TEST_CASE("eval path is deterministic and normalized") {
    Image img(84, 84);
    std::fill(img.pixels.begin(), img.pixels.end(), 0.5f);
    Rng a(1), b(99);
    const auto x = preprocess(img, false, a), y = preprocess(img, false, b);
    CHECK(std::equal(x.data().begin(), x.data().end(), y.data().begin()));
    CHECK(x.at(0) == doctest::Approx((0.5 - kChannelMean[0]) / kChannelStd[0]).epsilon(1e-6));
    CHECK(x.at(84 * 84 * 2) == doctest::Approx((0.5 - kChannelMean[2]) / kChannelStd[2]).epsilon(1e-6));
  }

  TEST_CASE("train path is deterministic given the rng state") {
    const auto ds = generate_synthetic({8, 2, 0.1, 3, 84});
    Rng a(7), b(7);
    const auto x = preprocess(*ds.items[0].image, true, a);
    const auto y = preprocess(*ds.items[0].image, true, b);
    CHECK(std::equal(x.data().begin(), x.data().end(), y.data().begin()));
  }

  TEST_CASE("horizontal flip is an involution") {
    Image img(5, 7);
    Rng rng(5);
    for (auto& p : img.pixels) p = std::uniform_real_distribution<float>(0, 1)(rng);
    const auto f = flip_horizontal(img);
    CHECK(f.at(2, 0, 1) == img.at(2, 6, 1));
    CHECK(flip_horizontal(f).pixels == img.pixels);
  }
}

TEST_SUITE("image directories") {
  TEST_CASE("enumeration, allowlist and manifest stability") {
    TempDir dir("imgdir");
    const auto ds = generate_synthetic({2, 3, 0.1, 5, 16});
    write_image_dir(ds, dir.path());
    std::ofstream(dir.path() / "class_000" / "notes.txt") << "ignored";
    std::ofstream(dir.path() / "class_000" / ".hidden.png") << "ignored";
    const auto loaded = load_image_dir(dir.path());
    CHECK(loaded.items.size() == 6);
    CHECK(loaded.class_names == std::vector<std::string>{"class_000", "class_001"});
    CHECK(loaded.load_errors.empty());
    CHECK(manifest_json(loaded) == manifest_json(load_image_dir(dir.path())));
    // PNG round trip keeps pixels to 8-bit precision
    const auto& a = *ds.items[0].image;
    const auto& b = *loaded.items[0].image;
    REQUIRE(a.pixels.size() == b.pixels.size());
    for (std::size_t i = 0; i < a.pixels.size(); ++i) CHECK(std::abs(a.pixels[i] - b.pixels[i]) < 0.003);
  }

  TEST_CASE("undecodable files are listed and empty classes fail") {
    TempDir dir("baddir");
    std::filesystem::create_directories(dir.path() / "a");
    encode_image(Image(9, 9), dir.path() / "a" / "ok.png");
    std::ofstream(dir.path() / "a" / "broken.jpg") << "not a jpeg";
    const auto loaded = load_image_dir(dir.path());
    CHECK(loaded.items.size() == 1);
    REQUIRE(loaded.load_errors.size() == 1);
    CHECK(loaded.load_errors[0].find("broken.jpg") != std::string::npos);
    std::filesystem::create_directories(dir.path() / "b");
    CHECK_THROWS_AS(load_image_dir(dir.path()), DataError);
    CHECK_THROWS_AS(load_image_dir(dir.path() / "missing"), DataError);
  }
}

TEST_SUITE("synthetic") {
  TEST_CASE("zero variation makes every image of a class identical") {
    const auto ds = generate_synthetic({5, 4, 0.0, 11, 32});
    for (const auto& item : ds.items) {
      const auto& first = *ds.items[item.label * 4].image;
      CHECK(item.image->pixels == first.pixels);
    }
    CHECK(ds.items[0].image->pixels != ds.items[4].image->pixels);
  }

  TEST_CASE("regeneration with the same seed is bitwise identical") {
    const auto a = generate_synthetic({6, 3, 0.2, 9, 40});
    const auto b = generate_synthetic({6, 3, 0.2, 9, 40});
    const auto c = generate_synthetic({6, 3, 0.2, 10, 40});
    for (std::size_t i = 0; i < a.items.size(); ++i) {
      CHECK(a.items[i].image->pixels == b.items[i].image->pixels);
    }
    CHECK(a.items[0].image->pixels != c.items[0].image->pixels);
  }

  TEST_CASE("pixel-space 1-NN separates classes at low variation") {
    const auto ds = generate_synthetic({20, 10, 0.05, 7, 84});
    const EpisodeSampler sampler(ds);
    Rng rng(6);
    std::size_t correct = 0, total = 0;
    for (int e = 0; e < 100; ++e) {
      const auto ep = sampler.sample(5, 1, 5, rng);
      for (std::size_t q = 0; q < ep.query.size(); ++q) {
        const auto& qp = ds.items[ep.query[q]].image->pixels;
        double best = std::numeric_limits<double>::infinity();
        std::size_t pick = 0;
        for (std::size_t c = 0; c < ep.way; ++c) {
          const auto& sp = ds.items[ep.support[c]].image->pixels;
          double d = 0;
          for (std::size_t i = 0; i < qp.size(); ++i) d += (qp[i] - sp[i]) * (qp[i] - sp[i]);
          if (d < best) best = d, pick = c;
        }
        correct += pick == ep.query_labels[q];
        ++total;
      }
    }
    CHECK(correct / double(total) > 0.95);
  }
}
