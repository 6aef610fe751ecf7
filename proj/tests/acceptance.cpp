// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fail.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "bsnet/runner.hpp"

using namespace bsnet;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

template <typename... Args>
std::string format(const char* fmt, Args... args) {
  char buf[1024];
  std::snprintf(buf, sizeof buf, fmt, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

DiffArray random_array(Shape shape, Rng& rng, bool grad = true, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  std::vector<double> v(shape_size(shape));
  for (auto& x : v) x = n(rng);
  return DiffArray::from_data(std::move(shape), std::move(v), grad);
}

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::string without_output_line(const std::string& text) {
  std::istringstream in(text);
  std::string line, out;
  while (std::getline(in, line)) {
    if (line.rfind("output =", 0) != 0) out += line + "\n";
  }
  return out;
}

std::vector<LossKind> loss_kinds_of(const BisimModel& m) {
  std::vector<LossKind> out;
  for (std::size_t d = 0; d < m.head_count(); ++d) out.push_back(m.head(d).loss_kind());
  return out;
}

std::vector<double> weights_of(const BisimModel& m) {
  std::vector<double> out;
  for (std::size_t d = 0; d < m.head_count(); ++d) out.push_back(m.spec().weight(d));
  return out;
}

// 1. Gradient suite -----------------------------------------------------------

constexpr double kGradTolerance = 1e-3;
constexpr double kGradFloor = 1e-6;

struct GradTally {
  std::size_t checks = 0;
  std::size_t coords = 0;
  std::size_t kink_retries = 0;
  double max_error = 0.0;
  double max_loss = 0.0;
  double max_noise = 0.0;
  std::vector<std::string> failures;

  void run(const std::string& name, const std::function<DiffArray()>& f,
           const std::vector<NamedArray>& params, std::size_t max_coords = 0,
           double epsilon = 1e-5, double noise_scale = 0.0) {
    GradCheckOptions o;
    o.noise_scale = noise_scale;
    o.epsilon = epsilon;
    o.kink_retries = 2;
    o.tolerance = kGradTolerance;
    o.floor = kGradFloor;
    o.max_coords_per_param = max_coords;
    o.seed = checks;
    const auto r = grad_check(f, params, o);
    ++checks;
    coords += r.checked;
    kink_retries += r.kink_retries;
    max_error = std::max(max_error, r.max_error);
    max_noise = std::max(max_noise, r.max_noise);
    max_loss = std::max(max_loss, std::abs(f().item()));
    for (const auto& fail : r.failures) {
      failures.push_back(format("%s %s[%zu] analytic %.6g numeric %.6g", name.c_str(),
                                fail.param.c_str(), fail.index, fail.analytic, fail.numeric));
    }
  }
};

// sum(y * w) with a fixed random w so every output coordinate matters.
DiffArray weighted(const DiffArray& y, std::uint64_t seed) {
  Rng rng(seed);
  return sum(mul(y, random_array(y.shape(), rng, false)));
}

void primitive_gradients(GradTally& t) {
  Rng rng(100);
  auto a = random_array({3, 4}, rng), b = random_array({3, 4}, rng);
  t.run("add", [&] { return weighted(add(a, b), 1); }, {{"a", a}, {"b", b}});
  t.run("sub", [&] { return weighted(sub(a, b), 2); }, {{"a", a}, {"b", b}});
  t.run("mul", [&] { return weighted(mul(a, b), 3); }, {{"a", a}, {"b", b}});
  t.run("scale", [&] { return weighted(scale(a, -1.7), 4); }, {{"a", a}});
  t.run("add_scalar", [&] { return weighted(add_scalar(a, 0.4), 5); }, {{"a", a}});
  t.run("square", [&] { return weighted(square(a), 6); }, {{"a", a}});
  auto pos = DiffArray::from_data({4}, {0.5, 1.3, 2.0, 0.9}, true);
  t.run("log", [&] { return weighted(log(pos), 7); }, {{"pos", pos}});
  t.run("sum", [&] { return sum(square(a)); }, {{"a", a}});
  t.run("mean", [&] { return square(mean(a)); }, {{"a", a}});
  t.run("reshape", [&] { return weighted(reshape(a, {2, 6}), 8); }, {{"a", a}});
  auto img = random_array({2, 3, 5, 5}, rng);
  t.run("flatten", [&] { return weighted(flatten(img), 9); }, {{"img", img}});
  t.run("concat axis 0", [&] { return weighted(concat(a, b, 0), 10); }, {{"a", a}, {"b", b}});
  t.run("concat axis 1", [&] { return weighted(concat(a, b, 1), 11); }, {{"a", a}, {"b", b}});
  t.run("index_select", [&] { return weighted(index_select(a, {2, 0, 2}), 12); }, {{"a", a}});
  t.run("stack", [&] { return weighted(stack({a, b, a}), 13); }, {{"a", a}, {"b", b}});
  t.run("slice", [&] { return weighted(slice(a, 1, 3), 14); }, {{"a", a}});
  t.run("narrow", [&] { return weighted(narrow(img, 1, 1, 3), 34); }, {{"img", img}});
  auto rows = random_array({6, 5}, rng);
  t.run("group_mean", [&] { return weighted(group_mean(rows, 3), 15); }, {{"rows", rows}});
  t.run("pick", [&] { return weighted(pick(a, {3, 0, 1}), 16); }, {{"a", a}});

  auto w = random_array({4, 3, 3, 3}, rng, true, 0.3), cb = random_array({4}, rng);
  t.run("conv2d", [&] { return weighted(conv2d(img, w, cb, 1), 17); },
        {{"img", img}, {"w", w}, {"b", cb}});
  t.run("conv2d unpadded stride 2", [&] { return weighted(conv2d(img, w, cb, 0, 2), 18); },
        {{"img", img}, {"w", w}, {"b", cb}});
  auto gamma = random_array({3}, rng), beta = random_array({3}, rng);
  BatchNormStats stats(3);
  t.run("batchnorm2d train",
        [&] { return weighted(batchnorm2d(img, gamma, beta, stats, BatchNormMode::train), 19); },
        {{"img", img}, {"gamma", gamma}, {"beta", beta}});
  t.run("batchnorm2d eval",
        [&] { return weighted(batchnorm2d(img, gamma, beta, stats, BatchNormMode::eval), 20); },
        {{"img", img}, {"gamma", gamma}, {"beta", beta}});
  t.run("relu", [&] { return weighted(relu(img), 21); }, {{"img", img}});
  t.run("leaky_relu", [&] { return weighted(leaky_relu(img, 0.2), 22); }, {{"img", img}});
  auto even = random_array({2, 3, 6, 6}, rng);
  t.run("maxpool2d", [&] { return weighted(maxpool2d(even), 23); }, {{"x", even}});
  t.run("avgpool2d", [&] { return weighted(avgpool2d(even), 24); }, {{"x", even}});

  auto x = random_array({3, 5}, rng), y = random_array({4, 5}, rng);
  auto lw = random_array({2, 5}, rng), lb = random_array({2}, rng);
  t.run("linear", [&] { return weighted(linear(x, lw, lb), 25); },
        {{"x", x}, {"w", lw}, {"b", lb}});
  t.run("matmul_nt", [&] { return weighted(matmul_nt(x, y), 26); }, {{"x", x}, {"y", y}});
  t.run("sigmoid", [&] { return weighted(sigmoid(x), 27); }, {{"x", x}});
  t.run("softmax", [&] { return weighted(softmax(x, 1), 28); }, {{"x", x}});
  t.run("log_softmax", [&] { return weighted(log_softmax(x, 1), 29); }, {{"x", x}});
  t.run("l2_normalize_rows", [&] { return weighted(l2_normalize_rows(x), 30); }, {{"x", x}});
  t.run("neg_sq_distance", [&] { return weighted(neg_sq_distance(x, y), 31); },
        {{"x", x}, {"y", y}});
  auto qd = random_array({2, 6, 5}, rng), pool = random_array({3, 7, 5}, rng);
  t.run("topk_cosine_sum",
        [&] {
          const auto q = reshape(l2_normalize_rows(reshape(qd, {12, 5})), {2, 6, 5});
          const auto p = reshape(l2_normalize_rows(reshape(pool, {21, 5})), {3, 7, 5});
          return weighted(topk_cosine_sum(q, p, 3), 32);
        },
        {{"queries", qd}, {"pools", pool}});
}

// Full model on a 2-way 1-shot episode of random images, BN in train mode.
// The smaller step keeps central differences off ReLU and pooling kinks.
void model_gradients(GradTally& t, const std::string& name, const ModelSpec& spec) {
  BisimModel model(spec, 21);
  Rng rng(22);
  const auto support = random_array({2, 3, 84, 84}, rng, false);
  const auto query = random_array({2, 3, 84, 84}, rng, false);
  const std::vector<std::size_t> labels{0, 1};
  const auto kinds = loss_kinds_of(model);
  const auto weights = weights_of(model);
  // Losses are logsumexp-style reductions of the head scores, so their
  // rounding error follows the largest score rather than the loss itself.
  double scale = 0.0;
  {
    NoGradGuard guard;
    const auto f = model.embed(support, query, 2, 1, BatchNormMode::train);
    for (const auto& s : model.head_scores(f, BatchNormMode::train))
      for (double v : s.data()) scale = std::max(scale, std::abs(v));
  }
  t.run(
      name,
      [&] {
        const auto f = model.embed(support, query, 2, 1, BatchNormMode::train);
        return training_loss(model.head_scores(f, BatchNormMode::train), labels, kinds, weights);
      },
      model.state().parameters, 3, 1e-6, scale);
}

Verdict criterion_gradients() {
  const auto start = std::chrono::steady_clock::now();
  set_numeric_mode(NumericMode::f64);
  GradTally t;
  primitive_gradients(t);
  const std::size_t primitive_checks = t.checks;
  for (auto head : {HeadKind::prototype, HeadKind::matching, HeadKind::relation, HeadKind::cosine,
                    HeadKind::image_to_class}) {
    ModelSpec s;
    s.heads = {head};
    model_gradients(t, "conv4+" + to_string(head), s);
  }
  ModelSpec dn4;
  dn4.backbone = BackboneKind::conv64f;
  dn4.heads = {HeadKind::image_to_class};
  model_gradients(t, "conv64f+image_to_class", dn4);
  model_gradients(t, "bsnet relation+cosine", ModelSpec{});
  const double secs = seconds_since(start);
  Verdict v;
  v.pass = t.failures.empty() && secs < 300.0;
  v.detail = format("%zu primitive checks, %zu model checks, %zu coordinates (%zu kink retries), "
                    "max rel err %.2e beyond rounding (tol %.0e, floor 1e-6, largest |f| %.3g, "
                    "rounding bound <= %.1e), %.1f s (limit 300 s)",
                    primitive_checks, t.checks - primitive_checks, t.coords, t.kink_retries,
                    t.max_error, kGradTolerance, t.max_loss, t.max_noise, secs);
  for (std::size_t i = 0; i < std::min<std::size_t>(t.failures.size(), 5); ++i) {
    v.detail += "\n    " + t.failures[i];
  }
  return v;
}

// 2. Shape contracts ----------------------------------------------------------

Verdict criterion_shapes() {
  set_numeric_mode(NumericMode::f64);
  NoGradGuard guard;
  Rng rng(30);
  std::vector<std::string> bad;
  auto expect = [&](bool ok, const std::string& what) {
    if (!ok) bad.push_back(what);
  };
  const auto batch = random_array({2, 3, 84, 84}, rng, false);
  Backbone conv4(backbone_spec(BackboneKind::conv4), rng);
  Backbone conv64f(backbone_spec(BackboneKind::conv64f), rng);
  expect(conv4.embed(batch, BatchNormMode::train).shape() == Shape{2, 64, 19, 19}, "conv4 19x19");
  expect(conv64f.embed(batch, BatchNormMode::train).shape() == Shape{2, 64, 21, 21},
         "conv64f 21x21");

  // The relation module must consume exactly 576 features after its two blocks.
  RelationHead relation(rng);
  StateView rv;
  relation.collect("r", rv);
  std::size_t fc_inputs = 0;
  for (const auto& p : rv.parameters) {
    if (p.value.rank() == 2 && p.value.dim(0) == kRelationHidden) fc_inputs = p.value.dim(1);
  }
  expect(fc_inputs == 576 && kRelationFlatten == 576, "relation flatten 576");
  expect(relation.relate(random_array({3, 128, 19, 19}, rng, false), BatchNormMode::train).shape() ==
             Shape{3},
         "relation scores");

  for (std::size_t shot : {1, 5}) {
    ClassContext ctx;
    for (std::size_t k = 0; k < shot; ++k) ctx.support.push_back(random_array({64, 21, 21}, rng, false));
    const auto expected = shot == 1 ? std::size_t{441} : std::size_t{2205};
    expect(ctx.descriptor_pool().shape() == Shape{expected, 64},
           "descriptor pool " + std::to_string(expected));
  }
  Verdict v;
  v.pass = bad.empty();
  v.detail = bad.empty() ? "conv4 64x19x19, conv64f 64x21x21, relation FC in 576, pools 441/2205"
                         : "failed: ";
  for (const auto& b : bad) v.detail += b + "; ";
  return v;
}

// 3. Single relation head equals a plain relation network ---------------------

// Relation network built and trained without the multi-head model.
struct StandaloneRelationNet {
  Backbone backbone;
  std::unique_ptr<RelationHead> head;
  std::vector<NamedArray> params;

  explicit StandaloneRelationNet(std::uint64_t seed) {
    Rng rng(seed);
    backbone = Backbone(backbone_spec(BackboneKind::conv4), rng);
    head = std::make_unique<RelationHead>(rng);
    StateView view;
    backbone.collect("embed", view);
    head->collect("relation", view);
    params = view.parameters;
  }

  // Mean squared error between relation scores and one-hot targets.
  std::pair<DiffArray, DiffArray> loss(const DiffArray& support, const DiffArray& query,
                                       std::size_t way, const std::vector<std::size_t>& labels) {
    const auto all = backbone.embed(concat(support, query, 0), BatchNormMode::train);
    EpisodeFeatures f;
    f.support = slice(all, 0, support.dim(0));
    f.query = slice(all, support.dim(0), all.dim(0));
    f.way = way;
    f.shot = support.dim(0) / way;
    const auto scores = head->score(f, BatchNormMode::train);
    std::vector<double> onehot(labels.size() * way, 0.0);
    for (std::size_t q = 0; q < labels.size(); ++q) onehot[q * way + labels[q]] = 1.0;
    const auto target = DiffArray::from_data({labels.size(), way}, std::move(onehot));
    const auto sse = sum(square(sub(scores, target)));
    return {scale(sse, 1.0 / static_cast<double>(way * labels.size())), scores};
  }
};

Verdict criterion_single_relation() {
  set_numeric_mode(NumericMode::f64);
  const auto data = generate_synthetic({10, 6, 0.15, 31, 84});
  const EpisodeSampler sampler(data);
  ModelSpec spec;
  spec.heads = {HeadKind::relation};
  const std::uint64_t seed = 17;
  BisimModel model(spec, seed);
  Adam model_opt(model.state().parameters);
  StandaloneRelationNet plain(seed);
  Adam plain_opt(plain.params);
  AugmentConfig no_aug;
  no_aug.enabled = false;

  std::size_t loss_mismatch = 0, pred_mismatch = 0, predictions = 0;
  for (std::size_t e = 0; e < 100; ++e) {
    Rng rng = stream_rng(33, 3, e);
    const auto ep = sampler.sample(5, 1, 2, rng);
    const auto support = make_batch(data, ep.support, true, rng, no_aug);
    const auto query = make_batch(data, ep.query, true, rng, no_aug);

    const auto f = model.embed(support, query, 5, 1, BatchNormMode::train);
    const auto scores = model.head_scores(f, BatchNormMode::train);
    const auto loss = training_loss(scores, ep.query_labels, loss_kinds_of(model), weights_of(model));
    const auto preds = combined_predictions(ScoreMatrix::from_heads(scores));
    model_opt.zero_grad();
    loss.backward();
    model_opt.step();

    const auto [plain_loss, plain_scores] = plain.loss(support, query, 5, ep.query_labels);
    plain_opt.zero_grad();
    plain_loss.backward();
    plain_opt.step();

    const double a = loss.item(), b = plain_loss.item();
    loss_mismatch += std::memcmp(&a, &b, sizeof a) != 0;
    for (std::size_t q = 0; q < preds.size(); ++q) {
      const auto row = plain_scores.data().subspan(q * 5, 5);
      const auto plain_pred = static_cast<std::size_t>(
          std::max_element(row.begin(), row.end()) - row.begin());  // first maximum
      pred_mismatch += preds[q] != plain_pred;
      ++predictions;
    }
  }
  Verdict v;
  v.pass = loss_mismatch == 0 && pred_mismatch == 0;
  v.detail = format("100 training episodes: %zu loss mismatches, %zu/%zu prediction mismatches",
                    loss_mismatch, pred_mismatch, predictions);
  return v;
}

// 4. Synthetic end-to-end run -------------------------------------------------

constexpr std::size_t kEndToEndEpisodes = 300;

Verdict criterion_end_to_end() {
  const auto start = std::chrono::steady_clock::now();
  RunConfig base;
  base.numeric_mode = NumericMode::f32;
  base.synthetic.classes = 30;
  base.synthetic.variation = 0.15;
  base.split_classes = {20, 5, 5};
  base.way = 5;
  base.shot = 1;
  base.train_queries = 5;
  base.train_episodes = kEndToEndEpisodes;
  base.augment.enabled = false;
  base.eval_episodes = 100;
  base.seed = 5;
  set_numeric_mode(base.numeric_mode);
  const auto dataset = load_dataset(base);
  const auto splits = make_splits(dataset, base);

  auto run = [&](std::vector<HeadKind> heads) {
    auto config = base;
    config.model.heads = std::move(heads);
    BisimModel model(config.model, config.seed);
    Adam opt(model.state().parameters, config.adam);
    meta_train(model, opt, splits.train, config.train_config());
    return evaluate(model, splits.test, config.eval_config()).combined.mean;
  };
  const double both = run({HeadKind::relation, HeadKind::cosine});
  const double rel = run({HeadKind::relation});
  const double cos = run({HeadKind::cosine});
  const double secs = seconds_since(start);
  Verdict v;
  v.pass = both >= 0.85 && both >= std::min(rel, cos) && secs < 1800.0;
  v.detail = format("%zu episodes each: R&C %.4f, relation %.4f, cosine %.4f over 100 test "
                    "episodes (need >= 0.85 and >= %.4f), %.0f s (limit 1800 s)",
                    kEndToEndEpisodes, both, rel, cos, std::min(rel, cos), secs);
  return v;
}

// 5. Prediction rule properties -----------------------------------------------

Verdict criterion_prediction_rule() {
  Rng rng(50);
  std::uniform_int_distribution<int> level(0, 3);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::size_t tie = 0, relabel = 0, single = 0, failures = 0;
  for (int trial = 0; trial < 10000; ++trial) {
    const std::size_t way = 2 + trial % 9, heads = 1 + (trial / 9) % 4;
    const bool coarse = trial % 2 == 0;  // coarse levels force ties
    ScoreMatrix m(1, way, heads);
    for (auto& x : m.values) x = coarse ? 0.25 * level(rng) : normal(rng);
    const auto pred = combined_prediction(m, 0);

    // Lowest index among the maxima of the head sums (the 1/H factor is monotone).
    std::vector<double> total(way, 0.0);
    for (std::size_t c = 0; c < way; ++c)
      for (std::size_t d = 0; d < heads; ++d) total[c] += m.at(0, c, d);
    const auto expected = static_cast<std::size_t>(
        std::max_element(total.begin(), total.end()) - total.begin());
    const auto winners = std::count(total.begin(), total.end(), total[expected]);
    if (winners > 1) ++tie;
    if (pred != expected) ++failures;

    if (winners == 1) {
      std::vector<std::size_t> perm(way);
      std::iota(perm.begin(), perm.end(), 0);
      std::shuffle(perm.begin(), perm.end(), rng);
      ScoreMatrix p(1, way, heads);
      for (std::size_t c = 0; c < way; ++c)
        for (std::size_t d = 0; d < heads; ++d) p.at(0, perm[c], d) = m.at(0, c, d);
      if (combined_prediction(p, 0) != perm[pred]) ++failures;
      ++relabel;
    }
    if (heads == 1) {
      if (pred != per_head_prediction(m, 0, 0)) ++failures;
      ++single;
    }
  }
  Verdict v;
  v.pass = failures == 0;
  v.detail = format("10000 cases (%zu with ties, %zu relabelings, %zu single-head): %zu failures",
                    tie, relabel, single, failures);
  return v;
}

// 6. Rademacher lab -----------------------------------------------------------

Verdict criterion_rademacher() {
  const auto start = std::chrono::steady_clock::now();
  set_numeric_mode(NumericMode::f64);
  RunConfig config;
  config.rademacher.family = "linear";
  config.rademacher.samples = 20;
  config.rademacher.witnesses = 5;
  const auto lab = rademacher_lab(config);
  double min_margin = 1e300;
  for (const auto& r : lab.reports) min_margin = std::min(min_margin, r.margin);

  Rng rng(60);
  const auto constant = estimate_complexity(constant_family(), Sample{{0.5}}, 64, SupBudget{}, rng);

  // 100 fresh Z points on one sample, compared bitwise through P.
  const auto toys = linear_toy_families();
  const auto& st = *toys.z.structure;
  const auto p = average_family(st.embedding, st.scorer1, *st.scorer2);
  const auto sample = random_sample(config.rademacher.sample_size, 1, rng);
  std::size_t exact = 0;
  for (int t = 0; t < 100; ++t) {
    std::vector<double> z(toys.z.box.dim());
    for (std::size_t k = 0; k < z.size(); ++k) {
      z[k] = std::uniform_real_distribution<double>(toys.z.box.low[k], toys.z.box.high[k])(rng);
    }
    const auto w = containment_witness(st, z);
    bool same = p.box.contains(w);
    for (const auto& x : sample) {
      const double a = toys.z.evaluate(z, x, {}), b = p.evaluate(w, x, {});
      same = same && std::memcmp(&a, &b, sizeof a) == 0;
    }
    exact += same;
  }
  const double secs = seconds_since(start);
  Verdict v;
  v.pass = lab.all_hold && lab.reports.size() == 20 && constant.value == 1.0 && exact == 100 &&
           lab.witnesses_exact == lab.witnesses_checked && secs < 120.0;
  v.detail = format("inequality holds on %zu/20 samples (min margin %.4f), constant family %.17g, "
                    "witnesses %zu/100 exact, %.1f s (limit 120 s)",
                    static_cast<std::size_t>(std::count_if(lab.reports.begin(), lab.reports.end(),
                                                           [](const auto& r) { return r.inequality_holds; })),
                    min_margin, constant.value, exact, secs);
  return v;
}

// 7. Confidence interval ------------------------------------------------------

Verdict criterion_confidence_interval() {
  set_numeric_mode(NumericMode::f64);
  const double got = ci_half_width(10.0, 600);
  const double hand = std::sqrt(1.96 * 1.96 * 100.0 / 600.0);
  const bool arithmetic = std::abs(got - hand) <= 1e-12 && std::abs(got - 0.800) < 5e-4;

  // Default evaluation length, from the config layer down to an actual run.
  ModelSpec proto;
  proto.heads = {HeadKind::prototype};
  BisimModel model(proto, 70);
  EvalConfig e;
  e.way = 2;
  e.n_query = 1;
  const auto data = generate_synthetic({4, 3, 0.1, 71, 84});
  const auto report = evaluate(model, data, e);
  const auto resolved = build_config({}).eval_config();
  const bool defaults = resolved.episodes == 600 && report.combined.n == 600 &&
                        report.episode_accuracy.size() == 600;
  Verdict v;
  v.pass = arithmetic && defaults;
  v.detail = format("half-width %.15f vs hand value %.15f (|diff| %.1e, rounds to %.3f); default "
                    "evaluation ran %zu episodes",
                    got, hand, std::abs(got - hand), got, report.combined.n);
  return v;
}

// 8. Bitwise reproducibility --------------------------------------------------

Verdict criterion_reproducibility(const fs::path& work) {
  auto config = RunConfig{};
  config.numeric_mode = NumericMode::f64;
  config.synthetic.classes = 8;
  config.synthetic.images_per_class = 6;
  config.way = 2;
  config.train_queries = 2;
  config.test_queries = 2;
  config.train_episodes = 4;
  config.checkpoint_every = 2;
  config.eval_episodes = 6;
  config.seed = 80;
  std::vector<std::string> runs;
  for (const char* name : {"a", "b"}) {
    config.output = (work / name).string();
    const auto summary = run_train(config);
    run_eval(config, summary.checkpoint);
    runs.push_back(config.output);
  }
  std::vector<std::string> differing;
  std::size_t compared = 0;
  for (const char* file : {"checkpoint.bin", "train_log.csv", "eval.json", "eval_episodes.csv",
                           "config.resolved.toml"}) {
    auto a = file_bytes(fs::path(runs[0]) / file), b = file_bytes(fs::path(runs[1]) / file);
    if (std::string(file) == "config.resolved.toml") {  // the output paths differ by design
      a = without_output_line(a);
      b = without_output_line(b);
    }
    if (a.empty() || a != b) differing.push_back(file);
    ++compared;
  }
  Verdict v;
  v.pass = differing.empty();
  v.detail = format("%zu artifacts compared byte for byte", compared);
  for (const auto& d : differing) v.detail += "; differs or missing: " + d;
  return v;
}

// 9. Loss-weight sweep --------------------------------------------------------

Verdict criterion_weight_sweep() {
  const auto start = std::chrono::steady_clock::now();
  RunConfig base;
  base.numeric_mode = NumericMode::f32;
  base.synthetic.classes = 12;
  base.synthetic.images_per_class = 10;
  base.split_classes = {6, 3, 3};
  base.way = 3;
  base.shot = 1;
  base.train_queries = 3;
  base.test_queries = 4;
  base.train_episodes = 20;
  base.eval_episodes = 30;
  base.augment.enabled = false;
  base.seed = 90;
  const auto grid = loss_weight_grid();
  const auto rows = weight_sweep(base, grid);
  bool equal_row = false;
  std::size_t skipped = 0;
  for (const auto& r : rows) {
    equal_row = equal_row || (r.lambda == 1.0 && r.beta == 1.0);
    skipped += r.skipped_steps;
  }
  std::cout << sweep_table(rows);
  Verdict v;
  v.pass = rows.size() == 11 && grid.size() == 11 && equal_row;
  v.detail = format("%zu rows completed (equal weights %s), %zu skipped steps, %.0f s",
                    rows.size(), equal_row ? "included" : "missing", skipped, seconds_since(start));
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  configure_allocator();
  CLI::App app{"Runs the acceptance criteria and prints one verdict per criterion."};
  std::vector<int> only;
  std::string work = (fs::temp_directory_path() / "bsnet_acceptance").string();
  app.add_option("--only", only, "Criteria to run (default: all)")->check(CLI::Range(1, 9));
  app.add_option("--work", work, "Scratch directory for run artifacts");
  CLI11_PARSE(app, argc, argv);

  fs::remove_all(work);
  fs::create_directories(work);
  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria{
      {"gradient suite", criterion_gradients},
      {"shape contracts", criterion_shapes},
      {"single relation head equals relation network", criterion_single_relation},
      {"synthetic end-to-end", criterion_end_to_end},
      {"prediction rule invariants", criterion_prediction_rule},
      {"rademacher lab", criterion_rademacher},
      {"confidence interval", criterion_confidence_interval},
      {"bitwise reproducibility", [&] { return criterion_reproducibility(work); }},
      {"loss-weight sweep", criterion_weight_sweep},
  };
  bool all = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    all = all && v.pass;
    std::cout << (v.pass ? "PASS" : "FAIL") << "  " << id << ". " << criteria[i].first << ": "
              << v.detail << std::endl;
  }
  fs::remove_all(work);
  return all ? 0 : 1;
}
