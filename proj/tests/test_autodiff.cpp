#include <doctest.h>

#include <cmath>

#include "bsnet/grad_check.hpp"
#include "bsnet/ops.hpp"
#include "support.hpp"

using namespace bsnet;
using bsnet::testing::check_gradients;
using bsnet::testing::random_array;

namespace {

// Direct-loop convolution, the reference for conv2d.
std::vector<double> naive_conv(const DiffArray& x, const DiffArray& w, const DiffArray& b,
                               std::size_t pad, std::size_t stride) {
  const auto n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const auto cout = w.dim(0), k = w.dim(2);
  const auto oh = (h + 2 * pad - k) / stride + 1, ow = (wd + 2 * pad - k) / stride + 1;
  std::vector<double> out(n * cout * oh * ow, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t o = 0; o < cout; ++o)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t xx = 0; xx < ow; ++xx) {
          double acc = b.at(o);
          for (std::size_t c = 0; c < cin; ++c)
            for (std::size_t ky = 0; ky < k; ++ky)
              for (std::size_t kx = 0; kx < k; ++kx) {
                const long iy = static_cast<long>(y * stride + ky) - static_cast<long>(pad);
                const long ix = static_cast<long>(xx * stride + kx) - static_cast<long>(pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(wd))
                  continue;
                acc += x.at(((i * cin + c) * h + iy) * wd + ix) *
                       w.at(((o * cin + c) * k + ky) * k + kx);
              }
          out[((i * cout + o) * oh + y) * ow + xx] = acc;
        }
  return out;
}

}  // namespace

TEST_SUITE("autodiff") {
  TEST_CASE("leaf gradients accumulate across backward calls") {
    auto x = DiffArray::from_data({3}, {1.0, 2.0, 3.0}, true);
    const auto y = sum(square(x));
    y.backward();
    y.backward();
    const auto g = x.grad();
    CHECK(g[0] == doctest::Approx(4.0));
    CHECK(g[2] == doctest::Approx(12.0));
    x.zero_grad();
    sum(x).backward();
    CHECK(x.grad()[1] == 1.0);
  }

  TEST_CASE("interior nodes hold no gradient after backward") {
    auto x = DiffArray::from_data({2}, {1.0, -1.0}, true);
    const auto mid = scale(x, 3.0);
    sum(square(mid)).backward();
    CHECK_FALSE(mid.has_grad());
    CHECK(x.grad()[0] == doctest::Approx(18.0));
  }

  TEST_CASE("a parameter reached twice gets the summed gradient once per call") {
    auto x = DiffArray::from_data({1}, {2.0}, true);
    const auto y = sum(mul(x, x));  // d/dx x^2 through two edges
    y.backward();
    CHECK(x.grad()[0] == doctest::Approx(4.0));
  }

  TEST_CASE("no-grad scope records nothing") {
    auto x = DiffArray::from_data({2}, {1.0, 2.0}, true);
    DiffArray y;
    {
      NoGradGuard guard;
      y = square(x);
    }
    CHECK(y.is_leaf());
    CHECK_FALSE(y.requires_grad());
    CHECK(grad_enabled());
  }

  TEST_CASE("detach copies values and drops history") {
    auto x = DiffArray::from_data({2}, {1.0, 2.0}, true);
    const auto y = square(x);
    const auto d = y.detach(true);
    CHECK(d.is_leaf());
    CHECK(d.requires_grad());
    CHECK(d.at(1) == 4.0);
    CHECK_FALSE(d.same_node(y));
  }

  TEST_CASE("shape errors are reported") {
    const auto a = DiffArray::zeros({2, 3});
    const auto b = DiffArray::zeros({3, 2});
    CHECK_THROWS_AS(add(a, b), ShapeError);
    CHECK_THROWS_AS(reshape(a, {5}), ShapeError);
    const auto v = DiffArray::from_data({2}, {1.0, 2.0}, true);
    CHECK_THROWS_AS(square(v).backward(), ShapeError);
  }
}

TEST_SUITE("ops forward") {
  TEST_CASE("conv2d matches direct loops") {
    Rng rng(1);
    const auto x = random_array({2, 3, 7, 6}, rng, false);
    const auto w = random_array({4, 3, 3, 3}, rng, false);
    const auto b = random_array({4}, rng, false);
    for (std::size_t pad : {0, 1}) {
      for (std::size_t stride : {1, 2}) {
        const auto y = conv2d(x, w, b, pad, stride);
        const auto ref = naive_conv(x, w, b, pad, stride);
        REQUIRE(y.size() == ref.size());
        for (std::size_t i = 0; i < ref.size(); ++i) CHECK(y.at(i) == doctest::Approx(ref[i]));
      }
    }
  }

  TEST_CASE("conv2d in f32 mode stays close to f64") {
    Rng rng(2);
    const auto x = random_array({1, 3, 9, 9}, rng, false);
    const auto w = random_array({2, 3, 3, 3}, rng, false);
    const auto b = random_array({2}, rng, false);
    const auto ref = conv2d(x, w, b, 1);
    set_numeric_mode(NumericMode::f32);
    const auto y = conv2d(x, w, b, 1);
    set_numeric_mode(NumericMode::f64);
    for (std::size_t i = 0; i < y.size(); ++i) CHECK(std::abs(y.at(i) - ref.at(i)) < 1e-4);
  }

  TEST_CASE("batchnorm train mode normalizes and updates running statistics") {
    Rng rng(3);
    const auto x = random_array({4, 2, 3, 3}, rng, false, 2.0);
    const auto gamma = DiffArray::full({2}, 1.0);
    const auto beta = DiffArray::full({2}, 0.0);
    BatchNormStats stats(2);
    const auto y = batchnorm2d(x, gamma, beta, stats, BatchNormMode::train);
    for (std::size_t c = 0; c < 2; ++c) {
      double m = 0, m2 = 0, xm = 0, xm2 = 0;
      const std::size_t count = 4 * 9;
      for (std::size_t n = 0; n < 4; ++n)
        for (std::size_t i = 0; i < 9; ++i) {
          const auto idx = (n * 2 + c) * 9 + i;
          m += y.at(idx);
          m2 += y.at(idx) * y.at(idx);
          xm += x.at(idx);
          xm2 += x.at(idx) * x.at(idx);
        }
      m /= count;
      CHECK(std::abs(m) < 1e-12);
      CHECK(m2 / count == doctest::Approx(1.0).epsilon(1e-3));
      xm /= count;
      const double unbiased = (xm2 - count * xm * xm) / (count - 1);
      CHECK(stats.running_mean[c] == doctest::Approx(0.1 * xm));
      CHECK(stats.running_var[c] == doctest::Approx(0.9 + 0.1 * unbiased));
    }
    // eval mode reads the stored statistics
    BatchNormStats fixed(2);
    fixed.running_mean = {1.0, -1.0};
    fixed.running_var = {4.0, 1.0};
    const auto e = batchnorm2d(x, gamma, beta, fixed, BatchNormMode::eval);
    CHECK(e.at(0) == doctest::Approx((x.at(0) - 1.0) / std::sqrt(4.0 + kBatchNormEpsilon)));
    CHECK(fixed.running_mean[0] == 1.0);
  }

  TEST_CASE("pooling picks the window max and mean") {
    const auto x = DiffArray::from_data({1, 1, 2, 4}, {1, 5, 2, 0, 3, -1, 8, 4});
    const auto mx = maxpool2d(x);
    const auto av = avgpool2d(x);
    REQUIRE(mx.shape() == Shape{1, 1, 1, 2});
    CHECK(mx.at(0) == 5.0);
    CHECK(mx.at(1) == 8.0);
    CHECK(av.at(0) == doctest::Approx(2.0));
    CHECK(av.at(1) == doctest::Approx(3.5));
    // odd extents floor
    CHECK(maxpool2d(DiffArray::zeros({1, 1, 5, 5})).shape() == Shape{1, 1, 2, 2});
  }

  TEST_CASE("softmax rows sum to one and log_softmax agrees") {
    Rng rng(4);
    const auto x = random_array({3, 5}, rng, false, 10.0);
    const auto s = softmax(x, 1);
    const auto ls = log_softmax(x, 1);
    for (std::size_t r = 0; r < 3; ++r) {
      double total = 0;
      for (std::size_t c = 0; c < 5; ++c) {
        total += s.at(r * 5 + c);
        CHECK(ls.at(r * 5 + c) == doctest::Approx(std::log(s.at(r * 5 + c))));
      }
      CHECK(total == doctest::Approx(1.0));
    }
    // large logits do not overflow
    const auto big = log_softmax(DiffArray::from_data({1, 2}, {1000.0, 0.0}), 1);
    CHECK(std::isfinite(big.at(1)));
    CHECK(big.at(0) == doctest::Approx(0.0));
  }

  TEST_CASE("l2 normalization keeps zero rows at zero") {
    const auto x = DiffArray::from_data({2, 2}, {3, 4, 0, 0});
    const auto y = l2_normalize_rows(x);
    CHECK(y.at(0) == doctest::Approx(0.6));
    CHECK(y.at(1) == doctest::Approx(0.8));
    CHECK(y.at(2) == 0.0);
    CHECK(y.at(3) == 0.0);
  }

  TEST_CASE("negative squared distance matches the definition") {
    Rng rng(5);
    const auto a = random_array({3, 4}, rng, false);
    const auto b = random_array({2, 4}, rng, false);
    const auto d = neg_sq_distance(a, b);
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 2; ++j) {
        double s = 0;
        for (std::size_t k = 0; k < 4; ++k) s += std::pow(a.at(i * 4 + k) - b.at(j * 4 + k), 2);
        CHECK(d.at(i * 2 + j) == doctest::Approx(-s));
      }
  }

  TEST_CASE("group_mean, pick, slice, narrow, stack and index_select") {
    const auto x = DiffArray::from_data({4, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
    const auto g = group_mean(x, 2);
    CHECK(g.shape() == Shape{2, 2});
    CHECK(g.at(0) == 2.0);
    CHECK(g.at(3) == 7.0);
    const auto p = pick(x, {1, 0, 1, 0});
    CHECK(p.at(0) == 2.0);
    CHECK(p.at(1) == 3.0);
    CHECK(slice(x, 1, 3).at(0) == 3.0);
    const auto s = stack({slice(x, 0, 1), slice(x, 3, 4)});
    CHECK(s.shape() == Shape{2, 1, 2});
    CHECK(s.at(3) == 8.0);
    const auto r = index_select(x, {3, 3, 0});
    CHECK(r.at(0) == 7.0);
    CHECK(r.at(2) == 7.0);
    CHECK(r.at(4) == 1.0);
    CHECK_THROWS_AS(index_select(x, {4}), ShapeError);
    const auto n = narrow(x, 1, 1, 2);
    CHECK(n.shape() == Shape{4, 1});
    CHECK(std::vector<double>(n.data().begin(), n.data().end()) == std::vector<double>{2, 4, 6, 8});
    CHECK_THROWS_AS(narrow(x, 1, 1, 3), ShapeError);
    CHECK_THROWS_AS(narrow(x, 2, 0, 1), ShapeError);
  }
}

TEST_SUITE("ops gradients") {
  TEST_CASE("elementwise and reductions") {
    Rng rng(10);
    auto a = random_array({2, 3}, rng);
    auto b = random_array({2, 3}, rng);
    auto pos = DiffArray::from_data({3}, {0.5, 1.5, 2.5}, true);
    check_gradients([&] { return sum(mul(add(a, b), sub(a, scale(b, 2.0)))); },
                    {{"a", a}, {"b", b}});
    check_gradients([&] { return mean(square(add_scalar(a, 0.3))); }, {{"a", a}});
    check_gradients([&] { return sum(log(pos)); }, {{"pos", pos}});
  }

  TEST_CASE("shape manipulation") {
    Rng rng(11);
    auto a = random_array({4, 3}, rng);
    auto b = random_array({4, 2}, rng);
    auto w = random_array({4, 5}, rng, false);
    check_gradients(
        [&] {
          const auto c = concat(a, b, 1);
          return sum(mul(flatten(reshape(c, {2, 2, 5})), reshape(w, {2, 10})));
        },
        {{"a", a}, {"b", b}});
    check_gradients(
        [&] {
          const auto g = group_mean(index_select(a, {0, 2, 2, 3}), 2);
          const auto s = stack({g, slice(a, 1, 3)});
          return sum(square(add(slice(s, 0, 1), slice(s, 1, 2))));
        },
        {{"a", a}});
    check_gradients([&] { return sum(square(pick(a, {2, 0, 1, 1}))); }, {{"a", a}});
    auto t = random_array({2, 4, 3}, rng);
    check_gradients([&] { return sum(square(narrow(t, 1, 1, 3))); }, {{"t", t}});
    check_gradients([&] { return sum(square(narrow(t, 2, 2, 3))); }, {{"t", t}});
  }

  TEST_CASE("convolution, batchnorm and pooling") {
    Rng rng(12);
    auto x = random_array({2, 2, 6, 6}, rng);
    auto w = random_array({3, 2, 3, 3}, rng);
    auto b = random_array({3}, rng);
    auto gamma = random_array({3}, rng);
    auto beta = random_array({3}, rng);
    auto probe = random_array({2 * 3 * 3 * 3}, rng, false);
    BatchNormStats stats(3);
    check_gradients(
        [&] {
          const auto y = conv2d(x, w, b, 1);
          const auto n = batchnorm2d(y, gamma, beta, stats, BatchNormMode::train);
          const auto p = maxpool2d(leaky_relu(n, 0.2));
          return sum(mul(flatten(p), reshape(probe, {2, 27})));
        },
        {{"x", x}, {"w", w}, {"b", b}, {"gamma", gamma}, {"beta", beta}});
    check_gradients(
        [&] {
          const auto y = conv2d(x, w, b, 0, 2);
          return sum(square(avgpool2d(relu(y))));
        },
        {{"x", x}, {"w", w}, {"b", b}});
  }

  TEST_CASE("linear, matmul, activations and normalization") {
    Rng rng(13);
    auto x = random_array({3, 4}, rng);
    auto w = random_array({2, 4}, rng);
    auto b = random_array({2}, rng);
    auto y = random_array({5, 4}, rng);
    check_gradients([&] { return sum(sigmoid(linear(x, w, b))); },
                    {{"x", x}, {"w", w}, {"b", b}});
    check_gradients([&] { return sum(square(softmax(matmul_nt(x, y), 1))); },
                    {{"x", x}, {"y", y}});
    check_gradients([&] { return sum(pick(log_softmax(matmul_nt(x, y), 1), {0, 4, 2})); },
                    {{"x", x}, {"y", y}});
    check_gradients([&] { return sum(matmul_nt(l2_normalize_rows(x), l2_normalize_rows(y))); },
                    {{"x", x}, {"y", y}});
    check_gradients([&] { return sum(neg_sq_distance(x, y)); }, {{"x", x}, {"y", y}});
  }
}

TEST_SUITE("grad check") {
  TEST_CASE("a small planted gradient error survives the rounding allowance") {
    Rng rng(14);
    auto a = random_array({4, 3}, rng);
    // The first call feeds backward(); later probes see a 0.5% different slope.
    int calls = 0;
    const auto f = [&] { return sum(scale(square(a), calls++ == 0 ? 1.005 : 1.0)); };
    GradCheckOptions o;
    o.epsilon = 1e-6;
    o.tolerance = 1e-3;
    o.floor = 1e-6;
    o.noise_scale = 500.0;
    o.kink_retries = 2;
    const auto r = grad_check(f, {{"a", a}}, o);
    CHECK(r.failures.size() == a.size());
    CHECK(r.max_noise < 1e-5);
    CHECK(grad_check([&] { return sum(square(a)); }, {{"a", a}}, o).passed());
  }
}
