#pragma once

#include <doctest.h>

#include <filesystem>
#include <random>
#include <string>

#include "bsnet/layers.hpp"

namespace bsnet::testing {

inline DiffArray random_array(Shape shape, Rng& rng, bool requires_grad = true,
                              double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  std::vector<double> v(shape_size(shape));
  for (auto& x : v) x = n(rng);
  return DiffArray::from_data(std::move(shape), std::move(v), requires_grad);
}

inline void check_gradients(const std::function<DiffArray()>& f,
                            const std::vector<NamedArray>& params, double tolerance = 1e-6,
                            std::size_t max_coords = 0) {
  GradCheckOptions o;
  o.tolerance = tolerance;
  o.max_coords_per_param = max_coords;
  const auto report = grad_check(f, params, o);
  for (const auto& fail : report.failures) {
    INFO(fail.param << "[" << fail.index << "] analytic " << fail.analytic << " numeric "
                    << fail.numeric);
    CHECK(fail.error <= tolerance);
  }
  CHECK(report.checked > 0);
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("bsnet_" + tag + "_" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace bsnet::testing
