#include "bsnet/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <tuple>
#include <utility>

namespace bsnet {

GradCheckReport grad_check(const std::function<DiffArray()>& f,
                           const std::vector<NamedArray>& params,
                           const GradCheckOptions& options) {
  if (numeric_mode() != NumericMode::f64) {
    throw std::logic_error("grad_check requires 64-bit numeric mode");
  }
  for (const auto& p : params) {
    auto value = p.value;
    value.zero_grad();
  }
  f().backward();

  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (const auto& p : params) {
    if (!p.value.requires_grad()) {
      throw std::invalid_argument("grad_check: parameter " + p.name + " does not require grad");
    }
    const auto g = p.value.grad();
    analytic.emplace_back(g.begin(), g.end());
  }

  GradCheckReport report;
  std::mt19937_64 rng(options.seed);
  NoGradGuard no_grad;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto value = params[pi].value;
    const auto n = value.size();
    std::vector<std::size_t> coords(n);
    std::iota(coords.begin(), coords.end(), 0);
    if (options.max_coords_per_param > 0 && options.max_coords_per_param < n) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.max_coords_per_param);
      std::sort(coords.begin(), coords.end());
    }
    for (auto idx : coords) {
      auto data = value.mutable_data();
      const double saved = data[idx];
      auto probe = [&](double eps) {
        data[idx] = saved + eps;
        const double plus = f().item();
        data[idx] = saved - eps;
        const double minus = f().item();
        data[idx] = saved;
        return std::pair{plus, minus};
      };
      double eps = options.epsilon;
      auto [plus, minus] = probe(eps);
      const double ulps = options.rounding_ulps * std::numeric_limits<double>::epsilon() *
                          std::max({1.0, options.noise_scale, std::abs(plus), std::abs(minus)});
      if (options.kink_retries > 0) {
        const double center = f().item();
        for (std::size_t r = 0; r < options.kink_retries; ++r) {
          const double fwd = (plus - center) / eps, bwd = (center - minus) / eps;
          const double gap = std::max(0.0, std::abs(fwd - bwd) - 4.0 * ulps / eps) /
                             std::max({options.floor, std::abs(fwd), std::abs(bwd)});
          if (gap <= options.tolerance) break;
          eps /= 10.0;
          std::tie(plus, minus) = probe(eps);
          ++report.kink_retries;
        }
      }
      const double numeric = (plus - minus) / (2.0 * eps);
      const double a = analytic[pi][idx];
      report.max_noise = std::max(report.max_noise, ulps / eps);
      const double err = std::max(0.0, std::abs(a - numeric) - ulps / eps) /
                         std::max({options.floor, std::abs(a), std::abs(numeric)});
      ++report.checked;
      report.max_error = std::max(report.max_error, err);
      if (!(err <= options.tolerance)) {
        report.failures.push_back({params[pi].name, idx, a, numeric, err});
      }
    }
  }
  return report;
}

}  // namespace bsnet
