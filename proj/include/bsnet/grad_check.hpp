#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "bsnet/diff_array.hpp"

namespace bsnet {

struct GradCheckOptions {
  double epsilon = 1e-5;
  double tolerance = 1e-4;
  /// Error per coordinate is max(0, |analytic - numeric| - noise) /
  /// max(floor, |analytic|, |numeric|), where noise = rounding_ulps *
  /// machine epsilon * max(1, |f|, noise_scale) / epsilon bounds the rounding
  /// error of the central difference. noise_scale is the magnitude of the
  /// largest intermediate f is computed from, when that exceeds |f|.
  double floor = 1.0;
  double rounding_ulps = 64.0;
  double noise_scale = 0.0;
  /// When the one-sided slopes disagree beyond `tolerance` the probe straddles
  /// a kink (ReLU, max pooling); retry with epsilon / 10 up to this many times.
  std::size_t kink_retries = 0;
  /// Coordinates probed per parameter; 0 probes every coordinate.
  std::size_t max_coords_per_param = 0;
  std::uint64_t seed = 0;
};

struct GradCheckFailure {
  std::string param;
  std::size_t index;
  double analytic;
  double numeric;
  double error;
};

struct GradCheckReport {
  std::size_t checked = 0;
  std::size_t kink_retries = 0;
  double max_error = 0.0;
  double max_noise = 0.0;  // largest rounding bound subtracted from a difference
  std::vector<GradCheckFailure> failures;
  bool passed() const { return failures.empty(); }
};

struct NamedArray {
  std::string name;
  DiffArray value;
};

/// Compares backward() of the scalar `f` against central differences for
/// every probed coordinate of `params`. Requires 64-bit mode.
GradCheckReport grad_check(const std::function<DiffArray()>& f,
                           const std::vector<NamedArray>& params,
                           const GradCheckOptions& options = {});

}  // namespace bsnet
