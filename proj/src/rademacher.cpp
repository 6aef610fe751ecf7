#include "bsnet/rademacher.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>

#include "bsnet/diff_array.hpp"

namespace bsnet {

bool ParamBox::contains(std::span<const double> params) const {
  if (params.size() != dim()) return false;
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (!(params[k] >= low[k] && params[k] <= high[k])) return false;
  }
  return true;
}

std::string to_string(FamilyKind kind) {
  switch (kind) {
    case FamilyKind::single_i: return "I";
    case FamilyKind::single_j: return "J";
    case FamilyKind::shared_z: return "Z";
    case FamilyKind::average_p: return "P";
    case FamilyKind::custom: return "custom";
  }
  return "?";
}

namespace {

// Forward/backward of one affine block. Parameters are W (row-major [out, in])
// followed by b.
struct BlockTrace {
  std::vector<double> pre;
  std::vector<double> out;
};

BlockTrace block_forward(const AffineBlock& blk, std::span<const double> p,
                         std::span<const double> x) {
  BlockTrace t;
  t.pre.assign(blk.out, 0.0);
  t.out.assign(blk.out, 0.0);
  for (std::size_t o = 0; o < blk.out; ++o) {
    double acc = blk.bias ? p[blk.out * blk.in + o] : 0.0;
    for (std::size_t i = 0; i < blk.in; ++i) acc += p[o * blk.in + i] * x[i];
    t.pre[o] = acc;
    t.out[o] = blk.activation == Activation::tanh ? std::tanh(acc) : acc;
  }
  return t;
}

// Accumulates d/dparams into grad and returns d/dx, given d/dout.
std::vector<double> block_backward(const AffineBlock& blk, std::span<const double> p,
                                   std::span<const double> x, const BlockTrace& t,
                                   std::span<const double> dout, std::span<double> grad) {
  std::vector<double> dx(blk.in, 0.0);
  for (std::size_t o = 0; o < blk.out; ++o) {
    double dpre = dout[o];
    if (blk.activation == Activation::tanh) dpre *= 1.0 - t.out[o] * t.out[o];
    if (blk.bias) grad[blk.out * blk.in + o] += dpre;
    for (std::size_t i = 0; i < blk.in; ++i) {
      grad[o * blk.in + i] += dpre * x[i];
      dx[i] += p[o * blk.in + i] * dpre;
    }
  }
  return dx;
}

void check_block(const AffineBlock& blk, const char* what) {
  if (blk.in == 0 || blk.out == 0) throw ConfigError(std::string(what) + " block has a zero extent");
  if (!(blk.bound > 0.0) || !std::isfinite(blk.bound)) {
    throw ConfigError(std::string(what) + " block bound must be positive and finite");
  }
}

void check_scorer(const AffineBlock& scorer, const AffineBlock& embedding, const char* what) {
  check_block(scorer, what);
  if (scorer.out != 1) throw ConfigError(std::string(what) + " must output one value");
  if (scorer.in != embedding.out) {
    throw ConfigError(std::string(what) + " input does not match the embedding width");
  }
}

ParamBox box_for(std::initializer_list<AffineBlock> blocks) {
  ParamBox box;
  for (const auto& b : blocks) {
    box.low.insert(box.low.end(), b.param_count(), -b.bound);
    box.high.insert(box.high.end(), b.param_count(), b.bound);
  }
  return box;
}

void check_input(const AffineBlock& embedding, const Point& x) {
  if (x.size() != embedding.in) {
    throw ShapeError("sample point has " + std::to_string(x.size()) + " coordinates, embedding takes " +
                     std::to_string(embedding.in));
  }
}

// scorer(embedding(x)); parameter block offsets are explicit so P can reuse it.
double chain(const AffineBlock& em, std::span<const double> pe, const AffineBlock& sc,
             std::span<const double> ps, const Point& x, std::span<double> ge,
             std::span<double> gs, double upstream) {
  const auto e = block_forward(em, pe, x);
  const auto s = block_forward(sc, ps, e.out);
  if (!ge.empty()) {
    const double d[1] = {upstream};
    const auto de = block_backward(sc, ps, e.out, s, d, gs);
    block_backward(em, pe, x, e, de, ge);
  }
  return s.out[0];
}

}  // namespace

FunctionFamily single_family(const AffineBlock& embedding, const AffineBlock& scorer,
                             FamilyKind tag) {
  check_block(embedding, "embedding");
  check_scorer(scorer, embedding, "scorer");
  FunctionFamily f;
  f.name = to_string(tag);
  f.kind = tag;
  f.box = box_for({embedding, scorer});
  f.structure = FamilyStructure{embedding, scorer, std::nullopt};
  const std::size_t ne = embedding.param_count();
  f.evaluate = [embedding, scorer, ne](std::span<const double> p, const Point& x,
                                       std::span<double> g) {
    check_input(embedding, x);
    const auto ge = g.empty() ? g : g.subspan(0, ne);
    const auto gs = g.empty() ? g : g.subspan(ne);
    return chain(embedding, p.subspan(0, ne), scorer, p.subspan(ne), x, ge, gs, 1.0);
  };
  return f;
}

FunctionFamily shared_family(const AffineBlock& embedding, const AffineBlock& scorer1,
                             const AffineBlock& scorer2) {
  check_block(embedding, "embedding");
  check_scorer(scorer1, embedding, "scorer1");
  check_scorer(scorer2, embedding, "scorer2");
  FunctionFamily f;
  f.name = "Z";
  f.kind = FamilyKind::shared_z;
  f.box = box_for({embedding, scorer1, scorer2});
  f.structure = FamilyStructure{embedding, scorer1, scorer2};
  const std::size_t ne = embedding.param_count(), n1 = scorer1.param_count();
  f.evaluate = [embedding, scorer1, scorer2, ne, n1](std::span<const double> p, const Point& x,
                                                     std::span<double> g) {
    check_input(embedding, x);
    const auto pe = p.subspan(0, ne), p1 = p.subspan(ne, n1), p2 = p.subspan(ne + n1);
    const auto e = block_forward(embedding, pe, x);
    const auto s1 = block_forward(scorer1, p1, e.out);
    const auto s2 = block_forward(scorer2, p2, e.out);
    if (!g.empty()) {
      const double half[1] = {0.5};
      auto de = block_backward(scorer1, p1, e.out, s1, half, g.subspan(ne, n1));
      const auto de2 = block_backward(scorer2, p2, e.out, s2, half, g.subspan(ne + n1));
      for (std::size_t k = 0; k < de.size(); ++k) de[k] += de2[k];
      block_backward(embedding, pe, x, e, de, g.subspan(0, ne));
    }
    return 0.5 * (s1.out[0] + s2.out[0]);
  };
  return f;
}

FunctionFamily average_family(const AffineBlock& embedding, const AffineBlock& scorer1,
                              const AffineBlock& scorer2) {
  check_block(embedding, "embedding");
  check_scorer(scorer1, embedding, "scorer1");
  check_scorer(scorer2, embedding, "scorer2");
  FunctionFamily f;
  f.name = "P";
  f.kind = FamilyKind::average_p;
  f.box = box_for({embedding, scorer1, embedding, scorer2});
  f.structure = FamilyStructure{embedding, scorer1, scorer2};
  const std::size_t ne = embedding.param_count(), n1 = scorer1.param_count();
  f.evaluate = [embedding, scorer1, scorer2, ne, n1](std::span<const double> p, const Point& x,
                                                     std::span<double> g) {
    check_input(embedding, x);
    const std::size_t o2 = ne + n1;
    const std::span<double> none;
    const double a = chain(embedding, p.subspan(0, ne), scorer1, p.subspan(ne, n1), x,
                           g.empty() ? none : g.subspan(0, ne),
                           g.empty() ? none : g.subspan(ne, n1), 0.5);
    const double b = chain(embedding, p.subspan(o2, ne), scorer2, p.subspan(o2 + ne), x,
                           g.empty() ? none : g.subspan(o2, ne),
                           g.empty() ? none : g.subspan(o2 + ne), 0.5);
    return 0.5 * (a + b);
  };
  return f;
}

std::vector<double> containment_witness(const FamilyStructure& z,
                                        std::span<const double> z_params) {
  if (!z.scorer2) throw ConfigError("containment witness needs a two-scorer structure");
  const std::size_t ne = z.embedding.param_count(), n1 = z.scorer1.param_count();
  if (z_params.size() != ne + n1 + z.scorer2->param_count()) {
    throw ShapeError("parameter point does not match the shared-embedding structure");
  }
  std::vector<double> out;
  out.reserve(2 * ne + z_params.size() - ne);
  const auto pe = z_params.subspan(0, ne);
  out.insert(out.end(), pe.begin(), pe.end());
  out.insert(out.end(), z_params.begin() + ne, z_params.begin() + ne + n1);
  out.insert(out.end(), pe.begin(), pe.end());
  out.insert(out.end(), z_params.begin() + ne + n1, z_params.end());
  return out;
}

FunctionFamily constant_family() {
  FunctionFamily f;
  f.name = "constant";
  f.box = ParamBox::uniform(1, 1.0);
  f.evaluate = [](std::span<const double> p, const Point&, std::span<double> g) {
    if (!g.empty()) g[0] += 1.0;
    return p[0];
  };
  return f;
}

FunctionFamily zero_family() {
  FunctionFamily f;
  f.name = "zero";
  f.evaluate = [](std::span<const double>, const Point&, std::span<double>) { return 0.0; };
  return f;
}

FunctionFamily linear_family(double bound) {
  FunctionFamily f;
  f.name = "linear";
  f.box = ParamBox::uniform(1, bound);
  f.evaluate = [](std::span<const double> p, const Point& x, std::span<double> g) {
    if (x.empty()) throw ShapeError("linear family needs a non-empty sample point");
    if (!g.empty()) g[0] += x[0];
    return p[0] * x[0];
  };
  return f;
}

ToyFamilies linear_toy_families() {
  const AffineBlock scalar{1, 1, false, Activation::identity, 1.0};
  return {single_family(scalar, scalar, FamilyKind::single_i),
          single_family(scalar, scalar, FamilyKind::single_j),
          shared_family(scalar, scalar, scalar)};
}

ToyFamilies tanh_toy_families(std::size_t input_dim, std::size_t hidden) {
  const AffineBlock em{input_dim, hidden, true, Activation::tanh, 2.0};
  const AffineBlock s1{hidden, 1, false, Activation::identity, 1.0};
  const AffineBlock s2{hidden, 1, true, Activation::identity, 0.5};
  return {single_family(em, s1, FamilyKind::single_i), single_family(em, s2, FamilyKind::single_j),
          shared_family(em, s1, s2)};
}

// Estimation --------------------------------------------------------------------

std::vector<std::vector<int>> draw_sigmas(std::size_t n_sigma, std::size_t m, Rng& rng) {
  std::bernoulli_distribution coin(0.5);
  std::vector<std::vector<int>> out(n_sigma, std::vector<int>(m));
  for (auto& s : out) {
    for (auto& v : s) v = coin(rng) ? 1 : -1;
  }
  return out;
}

namespace {

std::string point_string(std::span<const double> p) {
  std::ostringstream os;
  os.precision(17);
  os << '[';
  for (std::size_t k = 0; k < p.size(); ++k) os << (k ? ", " : "") << p[k];
  os << ']';
  return os.str();
}

double objective(const FunctionFamily& f, const Sample& sample, std::span<const int> sigma,
                 std::span<const double> theta, std::span<double> grad) {
  std::fill(grad.begin(), grad.end(), 0.0);
  std::vector<double> gi(grad.size());
  double total = 0.0;
  for (std::size_t i = 0; i < sample.size(); ++i) {
    std::fill(gi.begin(), gi.end(), 0.0);
    const double v = f.evaluate(theta, sample[i], gi);
    if (!std::isfinite(v)) {
      throw NumericError("family " + f.name + " is non-finite at parameters " +
                         point_string(theta) + " on sample point " + std::to_string(i));
    }
    total += sigma[i] * v;
    for (std::size_t k = 0; k < grad.size(); ++k) grad[k] += sigma[i] * gi[k];
  }
  const double m = static_cast<double>(sample.size());
  for (auto& g : grad) g /= m;
  return total / m;
}

}  // namespace

double search_sup(const FunctionFamily& f, const Sample& sample, std::span<const int> sigma,
                  const SupBudget& budget, Rng& rng) {
  if (sample.empty()) throw ConfigError("Rademacher estimation needs a non-empty sample");
  if (sigma.size() != sample.size()) throw ShapeError("sigma length does not match the sample");
  const std::size_t d = f.box.dim();
  std::vector<double> grad(d);
  if (d == 0) return objective(f, sample, sigma, {}, grad);
  if (budget.restarts == 0) throw ConfigError("sup search needs at least one restart");

  double best = -std::numeric_limits<double>::infinity();
  std::vector<double> theta(d);
  for (std::size_t r = 0; r < budget.restarts; ++r) {
    for (std::size_t k = 0; k < d; ++k) {
      theta[k] = std::uniform_real_distribution<double>(f.box.low[k], f.box.high[k])(rng);
    }
    for (std::size_t t = 0;; ++t) {
      const double v = objective(f, sample, sigma, theta, grad);
      best = std::max(best, v);
      if (t == budget.steps) break;
      double gmax = 0.0;
      for (double g : grad) gmax = std::max(gmax, std::abs(g));
      if (gmax == 0.0) break;
      const double eta = budget.step_size / std::sqrt(1.0 + static_cast<double>(t));
      for (std::size_t k = 0; k < d; ++k) {
        const double width = f.box.high[k] - f.box.low[k];
        theta[k] = std::clamp(theta[k] + eta * width * grad[k] / gmax, f.box.low[k], f.box.high[k]);
      }
    }
  }
  return best;
}

RademacherEstimate estimate_complexity(const FunctionFamily& family, const Sample& sample,
                                       const std::vector<std::vector<int>>& sigmas,
                                       const SupBudget& budget, std::uint64_t search_seed) {
  if (sigmas.empty()) throw ConfigError("Rademacher estimation needs at least one sigma draw");
  RademacherEstimate est;
  est.budget = budget;
  est.n_sigma = sigmas.size();
  Rng rng(search_seed);
  for (const auto& s : sigmas) est.per_draw.push_back(search_sup(family, sample, s, budget, rng));
  const double n = static_cast<double>(est.per_draw.size());
  double total = 0.0;
  for (double v : est.per_draw) total += v;
  est.value = total / n;
  if (est.per_draw.size() > 1) {
    double sq = 0.0;
    for (double v : est.per_draw) sq += (v - est.value) * (v - est.value);
    est.standard_error = std::sqrt(sq / (n - 1.0)) / std::sqrt(n);
  }
  return est;
}

RademacherEstimate estimate_complexity(const FunctionFamily& family, const Sample& sample,
                                       std::size_t n_sigma, const SupBudget& budget, Rng& rng) {
  const auto sigmas = draw_sigmas(n_sigma, sample.size(), rng);
  return estimate_complexity(family, sample, sigmas, budget, rng());
}

BoundReport check_shared_bound(const Sample& sample, const FunctionFamily& i,
                            const FunctionFamily& j, const FunctionFamily& z,
                            const BoundCheckConfig& config) {
  if (!i.structure || !j.structure || !z.structure || !z.structure->scorer2) {
    throw ConfigError("bound check needs structured I, J and shared-embedding Z families");
  }
  const auto& zs = *z.structure;
  if (!(i.structure->embedding == zs.embedding) || !(j.structure->embedding == zs.embedding)) {
    throw ConfigError("I, J and Z must use structurally identical embeddings");
  }
  if (!(i.structure->scorer1 == zs.scorer1) || !(j.structure->scorer1 == *zs.scorer2)) {
    throw ConfigError("Z's scorers must match the scorers of I and J");
  }

  Rng rng(config.seed);
  const auto sigmas = draw_sigmas(config.n_sigma, sample.size(), rng);
  const std::uint64_t search_seed = rng();
  BoundReport rep;
  rep.i = estimate_complexity(i, sample, sigmas, config.budget, search_seed);
  rep.j = estimate_complexity(j, sample, sigmas, config.budget, search_seed);
  rep.z = estimate_complexity(z, sample, sigmas, config.budget, search_seed);
  rep.bound = 0.5 * (rep.i.value + rep.j.value);
  rep.combined_se = std::sqrt(rep.z.standard_error * rep.z.standard_error +
                              0.25 * (rep.i.standard_error * rep.i.standard_error +
                                      rep.j.standard_error * rep.j.standard_error));
  rep.margin = rep.bound + 2.0 * rep.combined_se - rep.z.value;
  rep.inequality_holds = rep.margin >= 0.0;

  const auto p = average_family(zs.embedding, zs.scorer1, *zs.scorer2);
  std::vector<double> theta(z.box.dim());
  for (std::size_t w = 0; w < config.witnesses; ++w) {
    for (std::size_t k = 0; k < theta.size(); ++k) {
      theta[k] = std::uniform_real_distribution<double>(z.box.low[k], z.box.high[k])(rng);
    }
    const auto witness = containment_witness(zs, theta);
    bool exact = p.box.contains(witness);
    for (std::size_t s = 0; exact && s < sample.size(); ++s) {
      const double a = z.evaluate(theta, sample[s], {});
      const double b = p.evaluate(witness, sample[s], {});
      exact = std::memcmp(&a, &b, sizeof(double)) == 0;
    }
    ++rep.witnesses_checked;
    if (exact) ++rep.witnesses_exact;
  }
  return rep;
}

std::string bound_json(const BoundReport& r) {
  auto est = [](const RademacherEstimate& e) {
    return nlohmann::ordered_json{{"estimate", e.value},
                                  {"standard_error", e.standard_error},
                                  {"n_sigma", e.n_sigma},
                                  {"restarts", e.budget.restarts},
                                  {"steps", e.budget.steps},
                                  {"lower_bound", e.lower_bound}};
  };
  nlohmann::ordered_json j;
  j["I"] = est(r.i);
  j["J"] = est(r.j);
  j["Z"] = est(r.z);
  j["bound"] = r.bound;
  j["combined_standard_error"] = r.combined_se;
  j["margin"] = r.margin;
  j["inequality_holds"] = r.inequality_holds;
  j["witnesses_checked"] = r.witnesses_checked;
  j["witnesses_exact"] = r.witnesses_exact;
  return j.dump(2);
}

Sample random_sample(std::size_t m, std::size_t dim, Rng& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Sample s(m, Point(dim));
  for (auto& x : s) {
    for (auto& v : x) v = u(rng);
  }
  return s;
}

}  // namespace bsnet
