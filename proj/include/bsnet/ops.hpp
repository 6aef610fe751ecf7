#pragma once

#include <cstddef>
#include <vector>

#include "bsnet/diff_array.hpp"

namespace bsnet {

// Elementwise and reductions -------------------------------------------------

DiffArray add(const DiffArray& a, const DiffArray& b);
DiffArray sub(const DiffArray& a, const DiffArray& b);
DiffArray mul(const DiffArray& a, const DiffArray& b);
DiffArray scale(const DiffArray& x, double factor);
DiffArray add_scalar(const DiffArray& x, double offset);
DiffArray square(const DiffArray& x);
/// Natural log with inputs floored at `floor` (gradient is zero below it).
DiffArray log(const DiffArray& x, double floor = 1e-300);
DiffArray sum(const DiffArray& x);
DiffArray mean(const DiffArray& x);

// Shape manipulation ---------------------------------------------------------

DiffArray reshape(const DiffArray& x, Shape shape);
/// [N, ...] -> [N, prod(...)]
DiffArray flatten(const DiffArray& x);
DiffArray concat(const DiffArray& a, const DiffArray& b, std::size_t axis);
/// Rows `indices` of the leading axis; repeated indices are allowed.
DiffArray index_select(const DiffArray& x, const std::vector<std::size_t>& indices);
/// Same-shape arrays -> [K, ...].
DiffArray stack(const std::vector<DiffArray>& items);
/// Leading-axis slice [begin, end).
DiffArray slice(const DiffArray& x, std::size_t begin, std::size_t end);
/// Slice [begin, end) along `axis`.
DiffArray narrow(const DiffArray& x, std::size_t axis, std::size_t begin, std::size_t end);
/// x[G*K, ...] -> [G, ...], mean of each run of K consecutive rows.
DiffArray group_mean(const DiffArray& x, std::size_t groups);
/// x[N, C] -> [N], element labels[n] of row n.
DiffArray pick(const DiffArray& x, const std::vector<std::size_t>& labels);

// Layers ---------------------------------------------------------------------

/// input[N,Cin,H,W] (*) weight[Cout,Cin,k,k] + bias[Cout] -> [N,Cout,H',W'].
DiffArray conv2d(const DiffArray& input, const DiffArray& weight, const DiffArray& bias,
                 std::size_t padding, std::size_t stride = 1);

enum class BatchNormMode { train, eval };

struct BatchNormStats {
  std::vector<double> running_mean;
  std::vector<double> running_var;
  explicit BatchNormStats(std::size_t channels = 0)
      : running_mean(channels, 0.0), running_var(channels, 1.0) {}
};

inline constexpr double kBatchNormEpsilon = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

/// Per-channel normalization of [N,C,H,W]. Train mode uses batch statistics
/// and updates `stats` (unbiased variance); eval mode reads `stats`.
DiffArray batchnorm2d(const DiffArray& input, const DiffArray& gamma, const DiffArray& beta,
                      BatchNormStats& stats, BatchNormMode mode,
                      double momentum = kBatchNormMomentum, double epsilon = kBatchNormEpsilon);

/// max(x, slope*x); the derivative at 0 is `slope`.
DiffArray leaky_relu(const DiffArray& x, double slope);
DiffArray relu(const DiffArray& x);

DiffArray maxpool2d(const DiffArray& x, std::size_t window = 2, std::size_t stride = 2);
DiffArray avgpool2d(const DiffArray& x, std::size_t window = 2, std::size_t stride = 2);

/// input[N,Din] * weight[Dout,Din]^T + bias[Dout].
DiffArray linear(const DiffArray& input, const DiffArray& weight, const DiffArray& bias);
/// a[N,D] * b[M,D]^T -> [N,M].
DiffArray matmul_nt(const DiffArray& a, const DiffArray& b);

DiffArray sigmoid(const DiffArray& x);
DiffArray softmax(const DiffArray& x, std::size_t axis);
DiffArray log_softmax(const DiffArray& x, std::size_t axis);

/// Rows of x[N,D] scaled to unit L2 norm; all-zero rows stay zero.
DiffArray l2_normalize_rows(const DiffArray& x);

/// -||a_i - b_j||^2 for a[N,D], b[M,D] -> [N,M].
DiffArray neg_sq_distance(const DiffArray& a, const DiffArray& b);

}  // namespace bsnet
