#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bsnet/layers.hpp"

namespace bsnet {

using Point = std::vector<double>;
using Sample = std::vector<Point>;

/// Axis-aligned parameter box.
struct ParamBox {
  std::vector<double> low;
  std::vector<double> high;

  static ParamBox uniform(std::size_t dim, double bound) {
    return {std::vector<double>(dim, -bound), std::vector<double>(dim, bound)};
  }
  std::size_t dim() const { return low.size(); }
  bool contains(std::span<const double> params) const;
};

enum class FamilyKind { single_i, single_j, shared_z, average_p, custom };
std::string to_string(FamilyKind kind);

enum class Activation { identity, tanh };

/// y = act(W x + b) with W [out, in]; every parameter lies in [-bound, bound].
struct AffineBlock {
  std::size_t in = 1;
  std::size_t out = 1;
  bool bias = false;
  Activation activation = Activation::identity;
  double bound = 1.0;

  std::size_t param_count() const { return out * in + (bias ? out : 0); }
  bool operator==(const AffineBlock&) const = default;
};

/// Embedding block feeding one or two scorer blocks (scorers output 1 value).
struct FamilyStructure {
  AffineBlock embedding;
  AffineBlock scorer1;
  std::optional<AffineBlock> scorer2;
};

/// f(params, x); fills `grad` (d f / d params) when it is non-empty.
using FamilyEvaluator =
    std::function<double(std::span<const double> params, const Point& x, std::span<double> grad)>;

struct FunctionFamily {
  std::string name;
  FamilyKind kind = FamilyKind::custom;
  ParamBox box;
  FamilyEvaluator evaluate;
  std::optional<FamilyStructure> structure;
};

/// I or J: scorer(embedding(x)).
FunctionFamily single_family(const AffineBlock& embedding, const AffineBlock& scorer,
                             FamilyKind tag = FamilyKind::single_i);
/// Z: one embedding shared by two scorers, output (s1(e(x)) + s2(e(x))) / 2.
FunctionFamily shared_family(const AffineBlock& embedding, const AffineBlock& scorer1,
                             const AffineBlock& scorer2);
/// P: (s1(e1(x)) + s2(e2(x))) / 2 with independent embeddings.
FunctionFamily average_family(const AffineBlock& embedding, const AffineBlock& scorer1,
                              const AffineBlock& scorer2);
/// P parameters reproducing Z at `z_params` (both embeddings set to Z's).
std::vector<double> containment_witness(const FamilyStructure& z, std::span<const double> z_params);

/// {f = c : c in [-1, 1]}.
FunctionFamily constant_family();
/// The single function f = 0 (no parameters).
FunctionFamily zero_family();
/// {f(x) = w * x[0] : |w| <= bound}.
FunctionFamily linear_family(double bound = 1.0);

struct ToyFamilies {
  FunctionFamily i, j, z;
};
/// Scalar embedding weight and scalar scorer weights, all in [-1, 1].
ToyFamilies linear_toy_families();
/// tanh embedding into `hidden` units with linear scorers of different bounds.
ToyFamilies tanh_toy_families(std::size_t input_dim = 2, std::size_t hidden = 3);

struct SupBudget {
  std::size_t restarts = 64;
  std::size_t steps = 100;
  double step_size = 0.1;  // fraction of each box side per normalized step
};

/// Monte-Carlo estimate of E_sigma[sup_f (1/M) sum sigma_i f(x_i)]. The sup is
/// approximated by projected gradient ascent from random restarts, so each
/// per-draw maximum (and the estimate) is a lower bound of the true value.
struct RademacherEstimate {
  double value = 0.0;
  double standard_error = 0.0;
  std::size_t n_sigma = 0;
  SupBudget budget;
  std::vector<double> per_draw;
  bool lower_bound = true;
};

std::vector<std::vector<int>> draw_sigmas(std::size_t n_sigma, std::size_t m, Rng& rng);

RademacherEstimate estimate_complexity(const FunctionFamily& family, const Sample& sample,
                                       const std::vector<std::vector<int>>& sigmas,
                                       const SupBudget& budget, std::uint64_t search_seed);
RademacherEstimate estimate_complexity(const FunctionFamily& family, const Sample& sample,
                                       std::size_t n_sigma, const SupBudget& budget, Rng& rng);

/// Best value of (1/M) sum sigma_i f(theta, x_i) found by the search.
double search_sup(const FunctionFamily& family, const Sample& sample, std::span<const int> sigma,
                  const SupBudget& budget, Rng& rng);

struct BoundReport {
  RademacherEstimate i, j, z;
  double bound = 0.0;        // (R(I) + R(J)) / 2
  double combined_se = 0.0;  // sqrt(SE_Z^2 + (SE_I^2 + SE_J^2) / 4)
  double margin = 0.0;       // bound + 2 * combined_se - R(Z)
  bool inequality_holds = false;
  std::size_t witnesses_checked = 0;
  std::size_t witnesses_exact = 0;
};

struct BoundCheckConfig {
  std::size_t n_sigma = 64;
  SupBudget budget;
  std::size_t witnesses = 100;
  std::uint64_t seed = 1;
};

/// Estimates all three families on common sigma draws and checks
/// R(Z) <= (R(I) + R(J)) / 2 + 2 * combined SE, plus exact Z-in-P witnesses.
/// Throws ConfigError unless Z shares I's embedding structure and its scorers
/// match I's and J's.
BoundReport check_shared_bound(const Sample& sample, const FunctionFamily& i,
                            const FunctionFamily& j, const FunctionFamily& z,
                            const BoundCheckConfig& config);

std::string bound_json(const BoundReport& report);

/// M points with coordinates uniform in [-1, 1].
Sample random_sample(std::size_t m, std::size_t dim, Rng& rng);

}  // namespace bsnet
