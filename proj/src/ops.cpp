#include "bsnet/ops.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>

namespace bsnet {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

void check_same_shape(const DiffArray& a, const DiffArray& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

void check_rank(const DiffArray& x, std::size_t rank, const char* op) {
  if (x.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_string(x.shape()));
  }
}

struct AxisSplit {
  std::size_t outer = 1, length = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) throw ShapeError("axis out of range for " + shape_string(shape));
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.length = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

// Convolution geometry shared by the forward and backward kernels.
struct ConvGeometry {
  std::size_t batch, in_channels, height, width;
  std::size_t out_channels, kernel, padding, stride;
  std::size_t out_height, out_width;
  std::size_t patch() const { return in_channels * kernel * kernel; }
  std::size_t out_pixels() const { return out_height * out_width; }
};

// Output columns [lo, hi) read in-bounds input for kernel offset kx.
struct ColumnRange {
  std::size_t lo, hi;
};

ColumnRange valid_columns(const ConvGeometry& g, std::size_t kx) {
  // ix = ox*stride + kx - padding must lie in [0, width).
  std::size_t lo = 0;
  while (lo < g.out_width && lo * g.stride + kx < g.padding) ++lo;
  std::size_t hi = lo;
  while (hi < g.out_width && hi * g.stride + kx < g.padding + g.width) ++hi;
  return {lo, hi};
}

template <typename T>
void im2col(const double* image, const ConvGeometry& g, T* cols) {
  const auto pixels = g.out_pixels();
  for (std::size_t c = 0; c < g.in_channels; ++c) {
    const double* plane = image + c * g.height * g.width;
    for (std::size_t ky = 0; ky < g.kernel; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        T* row = cols + ((c * g.kernel + ky) * g.kernel + kx) * pixels;
        const auto [lo, hi] = valid_columns(g, kx);
        for (std::size_t oy = 0; oy < g.out_height; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                          static_cast<std::ptrdiff_t>(g.padding);
          T* out = row + oy * g.out_width;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) {
            std::fill(out, out + g.out_width, T(0));
            continue;
          }
          const double* src = plane + static_cast<std::size_t>(iy) * g.width;
          std::fill(out, out + lo, T(0));
          if (lo < hi) {
            const double* first = src + (lo * g.stride + kx - g.padding);
            if (g.stride == 1) {
              for (std::size_t i = 0; i < hi - lo; ++i) out[lo + i] = static_cast<T>(first[i]);
            } else {
              for (std::size_t i = 0; i < hi - lo; ++i) {
                out[lo + i] = static_cast<T>(first[i * g.stride]);
              }
            }
          }
          std::fill(out + hi, out + g.out_width, T(0));
        }
      }
    }
  }
}

template <typename T>
void col2im_accumulate(const T* cols, const ConvGeometry& g, double* image_grad) {
  const auto pixels = g.out_pixels();
  for (std::size_t c = 0; c < g.in_channels; ++c) {
    double* plane = image_grad + c * g.height * g.width;
    for (std::size_t ky = 0; ky < g.kernel; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        const T* row = cols + ((c * g.kernel + ky) * g.kernel + kx) * pixels;
        const auto [lo, hi] = valid_columns(g, kx);
        for (std::size_t oy = 0; oy < g.out_height; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                          static_cast<std::ptrdiff_t>(g.padding);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
          if (lo >= hi) continue;
          double* dst = plane + static_cast<std::size_t>(iy) * g.width +
                        (lo * g.stride + kx - g.padding);
          const T* src = row + oy * g.out_width + lo;
          for (std::size_t i = 0; i < hi - lo; ++i) {
            dst[i * g.stride] += static_cast<double>(src[i]);
          }
        }
      }
    }
  }
}

template <typename T>
std::vector<T> cast_copy(std::span<const double> values) {
  return std::vector<T>(values.begin(), values.end());
}

template <typename T>
void conv_forward(std::span<const double> input, std::span<const double> weight,
                  std::span<const double> bias, const ConvGeometry& g, std::vector<double>& out) {
  const auto w = cast_copy<T>(weight);
  ConstMapMat<T> wmat(w.data(), g.out_channels, g.patch());
  std::vector<T> cols(g.patch() * g.out_pixels());
  RowMat<T> result(g.out_channels, g.out_pixels());
  const auto in_stride = g.in_channels * g.height * g.width;
  const auto out_stride = g.out_channels * g.out_pixels();
  for (std::size_t n = 0; n < g.batch; ++n) {
    im2col(input.data() + n * in_stride, g, cols.data());
    result.noalias() = wmat * ConstMapMat<T>(cols.data(), g.patch(), g.out_pixels());
    double* dst = out.data() + n * out_stride;
    for (std::size_t o = 0; o < g.out_channels; ++o) {
      for (std::size_t p = 0; p < g.out_pixels(); ++p) {
        dst[o * g.out_pixels() + p] = static_cast<double>(result(o, p)) + bias[o];
      }
    }
  }
}

template <typename T>
void conv_backward(std::span<const double> input, std::span<const double> weight,
                   std::span<const double> out_grad, const ConvGeometry& g, GradSink& sink) {
  const bool want_input = sink.wants(0);
  const bool want_weight = sink.wants(1);
  const bool want_bias = sink.wants(2);
  const auto in_stride = g.in_channels * g.height * g.width;
  const auto out_stride = g.out_channels * g.out_pixels();

  if (want_bias) {
    auto db = sink[2];
    for (std::size_t n = 0; n < g.batch; ++n) {
      for (std::size_t o = 0; o < g.out_channels; ++o) {
        const double* src = out_grad.data() + n * out_stride + o * g.out_pixels();
        double acc = 0.0;
        for (std::size_t p = 0; p < g.out_pixels(); ++p) acc += src[p];
        db[o] += acc;
      }
    }
  }
  if (!want_input && !want_weight) return;

  const auto w = cast_copy<T>(weight);
  ConstMapMat<T> wmat(w.data(), g.out_channels, g.patch());
  std::vector<T> cols(g.patch() * g.out_pixels());
  std::vector<T> dout(out_stride);
  RowMat<T> dw = RowMat<T>::Zero(g.out_channels, g.patch());
  RowMat<T> dcols(g.patch(), g.out_pixels());
  for (std::size_t n = 0; n < g.batch; ++n) {
    const double* src = out_grad.data() + n * out_stride;
    std::copy(src, src + out_stride, dout.begin());
    ConstMapMat<T> dout_mat(dout.data(), g.out_channels, g.out_pixels());
    if (want_weight) {
      im2col(input.data() + n * in_stride, g, cols.data());
      dw.noalias() += dout_mat * ConstMapMat<T>(cols.data(), g.patch(), g.out_pixels()).transpose();
    }
    if (want_input) {
      dcols.noalias() = wmat.transpose() * dout_mat;
      auto dx = sink[0];
      col2im_accumulate(dcols.data(), g, dx.data() + n * in_stride);
    }
  }
  if (want_weight) {
    auto dweight = sink[1];
    for (std::size_t i = 0; i < dweight.size(); ++i) dweight[i] += static_cast<double>(dw.data()[i]);
  }
}

template <typename T>
void linear_forward(std::span<const double> input, std::span<const double> weight,
                    std::size_t rows, std::size_t in_dim, std::size_t out_dim,
                    std::vector<double>& out) {
  const auto x = cast_copy<T>(input);
  const auto w = cast_copy<T>(weight);
  RowMat<T> result = ConstMapMat<T>(x.data(), rows, in_dim) *
                     ConstMapMat<T>(w.data(), out_dim, in_dim).transpose();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<double>(result.data()[i]);
}

template <typename T>
void linear_backward(std::span<const double> input, std::span<const double> weight,
                     std::span<const double> out_grad, std::size_t rows, std::size_t in_dim,
                     std::size_t out_dim, GradSink& sink) {
  const auto g = cast_copy<T>(out_grad);
  ConstMapMat<T> gmat(g.data(), rows, out_dim);
  if (sink.wants(0)) {
    const auto w = cast_copy<T>(weight);
    RowMat<T> dx = gmat * ConstMapMat<T>(w.data(), out_dim, in_dim);
    auto dst = sink[0];
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += static_cast<double>(dx.data()[i]);
  }
  if (sink.wants(1)) {
    const auto x = cast_copy<T>(input);
    RowMat<T> dw = gmat.transpose() * ConstMapMat<T>(x.data(), rows, in_dim);
    auto dst = sink[1];
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += static_cast<double>(dw.data()[i]);
  }
}

}  // namespace

// ---------------------------------------------------------------------------

DiffArray add(const DiffArray& a, const DiffArray& b) {
  check_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  const auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return apply_op("add", a.shape(), std::move(out), {a, b},
                  [](auto, std::span<const double> g, GradSink& sink) {
                    for (std::size_t p = 0; p < 2; ++p) {
                      if (!sink.wants(p)) continue;
                      auto d = sink[p];
                      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
                    }
                  });
}

DiffArray sub(const DiffArray& a, const DiffArray& b) {
  check_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  const auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return apply_op("sub", a.shape(), std::move(out), {a, b},
                  [](auto, std::span<const double> g, GradSink& sink) {
                    if (sink.wants(0)) {
                      auto d = sink[0];
                      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
                    }
                    if (sink.wants(1)) {
                      auto d = sink[1];
                      for (std::size_t i = 0; i < g.size(); ++i) d[i] -= g[i];
                    }
                  });
}

DiffArray mul(const DiffArray& a, const DiffArray& b) {
  check_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  const auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return apply_op("mul", a.shape(), std::move(out), {a, b},
                  [a, b](auto, std::span<const double> g, GradSink& sink) {
                    const auto av = a.data(), bv = b.data();
                    if (sink.wants(0)) {
                      auto d = sink[0];
                      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * bv[i];
                    }
                    if (sink.wants(1)) {
                      auto d = sink[1];
                      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * av[i];
                    }
                  });
}

DiffArray scale(const DiffArray& x, double factor) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.at(i) * factor;
  return apply_op("scale", x.shape(), std::move(out), {x},
                  [factor](auto, std::span<const double> g, GradSink& sink) {
                    auto d = sink[0];
                    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * factor;
                  });
}

DiffArray add_scalar(const DiffArray& x, double offset) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.at(i) + offset;
  return apply_op("add_scalar", x.shape(), std::move(out), {x},
                  [](auto, std::span<const double> g, GradSink& sink) {
                    auto d = sink[0];
                    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
                  });
}

DiffArray square(const DiffArray& x) {
  std::vector<double> out(x.size());
  const auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * xv[i];
  return apply_op("square", x.shape(), std::move(out), {x},
                  [x](auto, std::span<const double> g, GradSink& sink) {
                    auto d = sink[0];
                    const auto xv = x.data();
                    for (std::size_t i = 0; i < g.size(); ++i) d[i] += 2.0 * xv[i] * g[i];
                  });
}

DiffArray log(const DiffArray& x, double floor) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(std::max(x.at(i), floor));
  return apply_op("log", x.shape(), std::move(out), {x},
                  [x, floor](auto, std::span<const double> g, GradSink& sink) {
                    auto d = sink[0];
                    for (std::size_t i = 0; i < g.size(); ++i) {
                      if (x.at(i) > floor) d[i] += g[i] / x.at(i);
                    }
                  });
}

DiffArray sum(const DiffArray& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  return apply_op("sum", {1}, {acc}, {x}, [](auto, std::span<const double> g, GradSink& sink) {
    auto d = sink[0];
    for (auto& v : d) v += g[0];
  });
}

DiffArray mean(const DiffArray& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

DiffArray reshape(const DiffArray& x, Shape shape) {
  if (shape_size(shape) != x.size()) {
    throw ShapeError("reshape: cannot view " + shape_string(x.shape()) + " as " +
                     shape_string(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return apply_op("reshape", std::move(shape), std::move(out), {x},
                  [](auto, std::span<const double> g, GradSink& sink) {
                    auto d = sink[0];
                    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
                  });
}

DiffArray flatten(const DiffArray& x) {
  if (x.rank() < 1) throw ShapeError("flatten: rank-0 input");
  const auto n = x.dim(0);
  return reshape(x, {n, n == 0 ? 0 : x.size() / n});
}

DiffArray concat(const DiffArray& a, const DiffArray& b, std::size_t axis) {
  if (a.rank() != b.rank() || axis >= a.rank()) {
    throw ShapeError("concat: incompatible ranks " + shape_string(a.shape()) + " and " +
                     shape_string(b.shape()));
  }
  for (std::size_t i = 0; i < a.rank(); ++i) {
    if (i != axis && a.dim(i) != b.dim(i)) {
      throw ShapeError("concat: extent mismatch off the concat axis: " + shape_string(a.shape()) +
                       " vs " + shape_string(b.shape()));
    }
  }
  if (a.size() == 0 || b.size() == 0) {
    throw ShapeError("concat: empty operand " + shape_string(a.shape()) + " / " +
                     shape_string(b.shape()));
  }
  const auto sa = split_axis(a.shape(), axis);
  const auto sb = split_axis(b.shape(), axis);
  const auto chunk_a = sa.length * sa.inner;
  const auto chunk_b = sb.length * sb.inner;
  Shape shape = a.shape();
  shape[axis] += b.dim(axis);
  std::vector<double> out(a.size() + b.size());
  for (std::size_t o = 0; o < sa.outer; ++o) {
    auto dst = out.begin() + static_cast<std::ptrdiff_t>(o * (chunk_a + chunk_b));
    std::copy_n(a.data().begin() + static_cast<std::ptrdiff_t>(o * chunk_a), chunk_a, dst);
    std::copy_n(b.data().begin() + static_cast<std::ptrdiff_t>(o * chunk_b), chunk_b,
                dst + static_cast<std::ptrdiff_t>(chunk_a));
  }
  return apply_op("concat", std::move(shape), std::move(out), {a, b},
                  [outer = sa.outer, chunk_a, chunk_b](auto, std::span<const double> g,
                                                       GradSink& sink) {
                    for (std::size_t o = 0; o < outer; ++o) {
                      const double* src = g.data() + o * (chunk_a + chunk_b);
                      if (sink.wants(0)) {
                        auto d = sink[0];
                        for (std::size_t i = 0; i < chunk_a; ++i) d[o * chunk_a + i] += src[i];
                      }
                      if (sink.wants(1)) {
                        auto d = sink[1];
                        for (std::size_t i = 0; i < chunk_b; ++i) {
                          d[o * chunk_b + i] += src[chunk_a + i];
                        }
                      }
                    }
                  });
}

DiffArray index_select(const DiffArray& x, const std::vector<std::size_t>& indices) {
  if (x.rank() < 1) throw ShapeError("index_select: rank-0 input");
  const auto rows = x.dim(0);
  const auto row = rows == 0 ? 0 : x.size() / rows;
  Shape shape = x.shape();
  shape[0] = indices.size();
  std::vector<double> out(indices.size() * row);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= rows) throw ShapeError("index_select: index out of range");
    std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(indices[i] * row), row,
                out.begin() + static_cast<std::ptrdiff_t>(i * row));
  }
  return apply_op("index_select", std::move(shape), std::move(out), {x},
                  [indices, row](auto, std::span<const double> g, GradSink& sink) {
                    auto d = sink[0];
                    for (std::size_t i = 0; i < indices.size(); ++i) {
                      for (std::size_t j = 0; j < row; ++j) d[indices[i] * row + j] += g[i * row + j];
                    }
                  });
}

DiffArray stack(const std::vector<DiffArray>& items) {
  if (items.empty()) throw ShapeError("stack: no inputs");
  const auto& shape0 = items.front().shape();
  const auto row = items.front().size();
  std::vector<double> out;
  out.reserve(row * items.size());
  for (const auto& item : items) {
    if (item.shape() != shape0) {
      throw ShapeError("stack: shape mismatch " + shape_string(shape0) + " vs " +
                       shape_string(item.shape()));
    }
    out.insert(out.end(), item.data().begin(), item.data().end());
  }
  Shape shape{items.size()};
  shape.insert(shape.end(), shape0.begin(), shape0.end());
  return apply_op("stack", std::move(shape), std::move(out), items,
                  [count = items.size(), row](auto, std::span<const double> g, GradSink& sink) {
                    for (std::size_t k = 0; k < count; ++k) {
                      if (!sink.wants(k)) continue;
                      auto d = sink[k];
                      for (std::size_t j = 0; j < row; ++j) d[j] += g[k * row + j];
                    }
                  });
}

DiffArray slice(const DiffArray& x, std::size_t begin, std::size_t end) {
  if (x.rank() < 1 || begin > end || end > x.dim(0)) {
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") invalid for " + shape_string(x.shape()));
  }
  std::vector<std::size_t> indices(end - begin);
  for (std::size_t i = 0; i < indices.size(); ++i) indices[i] = begin + i;
  return index_select(x, indices);
}

DiffArray narrow(const DiffArray& x, std::size_t axis, std::size_t begin, std::size_t end) {
  if (axis >= x.rank() || begin > end || end > x.dim(axis)) {
    throw ShapeError("narrow: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") on axis " + std::to_string(axis) + " invalid for " +
                     shape_string(x.shape()));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t a = 0; a < axis; ++a) outer *= x.dim(a);
  for (std::size_t a = axis + 1; a < x.rank(); ++a) inner *= x.dim(a);
  const auto full = x.dim(axis) * inner, offset = begin * inner, run = (end - begin) * inner;
  Shape shape = x.shape();
  shape[axis] = end - begin;
  std::vector<double> out(outer * run);
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(o * full + offset), run,
                out.begin() + static_cast<std::ptrdiff_t>(o * run));
  }
  return apply_op("narrow", std::move(shape), std::move(out), {x},
                  [outer, full, offset, run](auto, std::span<const double> g, GradSink& sink) {
                    auto d = sink[0];
                    for (std::size_t o = 0; o < outer; ++o) {
                      for (std::size_t j = 0; j < run; ++j) d[o * full + offset + j] += g[o * run + j];
                    }
                  });
}

DiffArray group_mean(const DiffArray& x, std::size_t groups) {
  if (x.rank() < 1 || groups == 0 || x.dim(0) % groups != 0 || x.dim(0) == 0) {
    throw ShapeError("group_mean: " + shape_string(x.shape()) + " cannot form " +
                     std::to_string(groups) + " groups");
  }
  const auto per_group = x.dim(0) / groups;
  const auto row = x.size() / x.dim(0);
  Shape shape = x.shape();
  shape[0] = groups;
  std::vector<double> out(groups * row, 0.0);
  const double inv = 1.0 / static_cast<double>(per_group);
  for (std::size_t g = 0; g < groups; ++g) {
    for (std::size_t j = 0; j < row; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < per_group; ++k) acc += x.at((g * per_group + k) * row + j);
      out[g * row + j] = acc * inv;
    }
  }
  return apply_op("group_mean", std::move(shape), std::move(out), {x},
                  [groups, per_group, row, inv](auto, std::span<const double> g, GradSink& sink) {
                    auto d = sink[0];
                    for (std::size_t grp = 0; grp < groups; ++grp) {
                      for (std::size_t k = 0; k < per_group; ++k) {
                        for (std::size_t j = 0; j < row; ++j) {
                          d[(grp * per_group + k) * row + j] += g[grp * row + j] * inv;
                        }
                      }
                    }
                  });
}

DiffArray pick(const DiffArray& x, const std::vector<std::size_t>& labels) {
  check_rank(x, 2, "pick");
  const auto rows = x.dim(0), cols = x.dim(1);
  if (labels.size() != rows) throw ShapeError("pick: one label per row required");
  std::vector<double> out(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    if (labels[i] >= cols) throw ShapeError("pick: label out of range");
    out[i] = x.at(i * cols + labels[i]);
  }
  return apply_op("pick", {rows}, std::move(out), {x},
                  [labels, cols](auto, std::span<const double> g, GradSink& sink) {
                    auto d = sink[0];
                    for (std::size_t i = 0; i < labels.size(); ++i) d[i * cols + labels[i]] += g[i];
                  });
}

// ---------------------------------------------------------------------------

DiffArray conv2d(const DiffArray& input, const DiffArray& weight, const DiffArray& bias,
                 std::size_t padding, std::size_t stride) {
  check_rank(input, 4, "conv2d input");
  check_rank(weight, 4, "conv2d weight");
  if (input.dim(1) != weight.dim(1)) {
    throw ShapeError("conv2d: input " + shape_string(input.shape()) + " has " +
                     std::to_string(input.dim(1)) + " channels but weight " +
                     shape_string(weight.shape()) + " expects " + std::to_string(weight.dim(1)));
  }
  if (weight.dim(2) != weight.dim(3)) throw ShapeError("conv2d: kernel must be square");
  if (bias.size() != weight.dim(0)) {
    throw ShapeError("conv2d: bias " + shape_string(bias.shape()) + " does not match " +
                     std::to_string(weight.dim(0)) + " filters");
  }
  if (stride == 0) throw ShapeError("conv2d: stride must be >= 1");
  ConvGeometry g{};
  g.batch = input.dim(0);
  g.in_channels = input.dim(1);
  g.height = input.dim(2);
  g.width = input.dim(3);
  g.out_channels = weight.dim(0);
  g.kernel = weight.dim(2);
  g.padding = padding;
  g.stride = stride;
  if (g.kernel > g.height + 2 * padding || g.kernel > g.width + 2 * padding) {
    throw ShapeError("conv2d: kernel " + std::to_string(g.kernel) + " larger than padded input " +
                     shape_string(input.shape()));
  }
  g.out_height = (g.height + 2 * padding - g.kernel) / stride + 1;
  g.out_width = (g.width + 2 * padding - g.kernel) / stride + 1;

  std::vector<double> out(g.batch * g.out_channels * g.out_pixels());
  if (numeric_mode() == NumericMode::f32) {
    conv_forward<float>(input.data(), weight.data(), bias.data(), g, out);
  } else {
    conv_forward<double>(input.data(), weight.data(), bias.data(), g, out);
  }
  const bool single = numeric_mode() == NumericMode::f32;
  return apply_op("conv2d", {g.batch, g.out_channels, g.out_height, g.out_width}, std::move(out),
                  {input, weight, bias},
                  [input, weight, g, single](auto, std::span<const double> grad, GradSink& sink) {
                    if (single) {
                      conv_backward<float>(input.data(), weight.data(), grad, g, sink);
                    } else {
                      conv_backward<double>(input.data(), weight.data(), grad, g, sink);
                    }
                  });
}

DiffArray batchnorm2d(const DiffArray& input, const DiffArray& gamma, const DiffArray& beta,
                      BatchNormStats& stats, BatchNormMode mode, double momentum,
                      double epsilon) {
  check_rank(input, 4, "batchnorm2d");
  const auto n = input.dim(0), channels = input.dim(1), plane = input.dim(2) * input.dim(3);
  if (gamma.size() != channels || beta.size() != channels ||
      stats.running_mean.size() != channels || stats.running_var.size() != channels) {
    throw ShapeError("batchnorm2d: per-channel parameters do not match " +
                     shape_string(input.shape()));
  }
  const auto count = n * plane;
  if (count == 0) throw ShapeError("batchnorm2d: empty batch");
  const auto x = input.data();

  std::vector<double> mu(channels), inv_std(channels);
  if (mode == BatchNormMode::train) {
    for (std::size_t c = 0; c < channels; ++c) {
      double acc = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const double* p = x.data() + (b * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) acc += p[i];
      }
      const double m = acc / static_cast<double>(count);
      double var = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const double* p = x.data() + (b * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) var += (p[i] - m) * (p[i] - m);
      }
      var /= static_cast<double>(count);
      mu[c] = m;
      inv_std[c] = 1.0 / std::sqrt(var + epsilon);
      const double unbiased =
          count > 1 ? var * static_cast<double>(count) / static_cast<double>(count - 1) : var;
      stats.running_mean[c] = (1.0 - momentum) * stats.running_mean[c] + momentum * m;
      stats.running_var[c] = (1.0 - momentum) * stats.running_var[c] + momentum * unbiased;
    }
  } else {
    for (std::size_t c = 0; c < channels; ++c) {
      mu[c] = stats.running_mean[c];
      inv_std[c] = 1.0 / std::sqrt(stats.running_var[c] + epsilon);
    }
  }

  std::vector<double> out(input.size());
  const auto gv = gamma.data(), bv = beta.data();
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t c = 0; c < channels; ++c) {
      const auto base = (b * channels + c) * plane;
      const double scale_c = gv[c] * inv_std[c];
      const double shift_c = bv[c] - mu[c] * scale_c;
      for (std::size_t i = 0; i < plane; ++i) out[base + i] = x[base + i] * scale_c + shift_c;
    }
  }
  if (!records_graph({input, gamma, beta})) {
    return DiffArray::from_data(input.shape(), std::move(out));
  }
  const bool train = mode == BatchNormMode::train;
  // The normalized input is recomputed from the parent's value in backward.
  return apply_op(
      "batchnorm2d", input.shape(), std::move(out), {input, gamma, beta},
      [input, gamma, mu = std::move(mu), inv_std = std::move(inv_std), n, channels, plane, count,
       train](auto, std::span<const double> g, GradSink& sink) {
        const auto x = input.data();
        std::vector<double> sum_g(channels, 0.0), sum_gx(channels, 0.0);
        for (std::size_t b = 0; b < n; ++b) {
          for (std::size_t c = 0; c < channels; ++c) {
            const auto base = (b * channels + c) * plane;
            double sg = 0.0, sgx = 0.0;
            for (std::size_t i = 0; i < plane; ++i) {
              sg += g[base + i];
              sgx += g[base + i] * (x[base + i] - mu[c]);
            }
            sum_g[c] += sg;
            sum_gx[c] += sgx * inv_std[c];
          }
        }
        if (sink.wants(1)) {
          auto d = sink[1];
          for (std::size_t c = 0; c < channels; ++c) d[c] += sum_gx[c];
        }
        if (sink.wants(2)) {
          auto d = sink[2];
          for (std::size_t c = 0; c < channels; ++c) d[c] += sum_g[c];
        }
        if (!sink.wants(0)) return;
        auto dx = sink[0];
        const auto gamma_v = gamma.data();
        const double m = static_cast<double>(count);
        for (std::size_t b = 0; b < n; ++b) {
          for (std::size_t c = 0; c < channels; ++c) {
            const auto base = (b * channels + c) * plane;
            const double k = gamma_v[c] * inv_std[c];
            if (train) {
              const double mean_g = sum_g[c] / m, mean_gx = sum_gx[c] / m;
              for (std::size_t i = 0; i < plane; ++i) {
                const double h = (x[base + i] - mu[c]) * inv_std[c];
                dx[base + i] += k * (g[base + i] - mean_g - h * mean_gx);
              }
            } else {
              for (std::size_t i = 0; i < plane; ++i) dx[base + i] += k * g[base + i];
            }
          }
        }
      });
}

DiffArray leaky_relu(const DiffArray& x, double slope) {
  if (!(slope >= 0.0 && slope < 1.0)) throw std::invalid_argument("leaky_relu: slope not in [0,1)");
  std::vector<double> out(x.size());
  const auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : slope * xv[i];
  return apply_op("leaky_relu", x.shape(), std::move(out), {x},
                  [x, slope](auto, std::span<const double> g, GradSink& sink) {
                    auto d = sink[0];
                    const auto xv = x.data();
                    for (std::size_t i = 0; i < g.size(); ++i) d[i] += xv[i] > 0.0 ? g[i] : slope * g[i];
                  });
}

DiffArray relu(const DiffArray& x) { return leaky_relu(x, 0.0); }

DiffArray maxpool2d(const DiffArray& x, std::size_t window, std::size_t stride) {
  check_rank(x, 4, "maxpool2d");
  const auto n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (window == 0 || stride == 0 || h < window || w < window) {
    throw ShapeError("maxpool2d: window " + std::to_string(window) + " does not fit " +
                     shape_string(x.shape()));
  }
  const auto oh = (h - window) / stride + 1, ow = (w - window) / stride + 1;
  std::vector<double> out(n * c * oh * ow);
  const bool record = records_graph({x});
  std::vector<std::size_t> argmax(record ? out.size() : 0);
  const auto v = x.data();
  for (std::size_t p = 0; p < n * c; ++p) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = p * h * w + oy * stride * w + ox * stride;
        for (std::size_t ky = 0; ky < window; ++ky) {
          for (std::size_t kx = 0; kx < window; ++kx) {
            const auto idx = p * h * w + (oy * stride + ky) * w + ox * stride + kx;
            if (v[idx] > v[best]) best = idx;  // strict: ties keep the lowest index
          }
        }
        const auto o = (p * oh + oy) * ow + ox;
        out[o] = v[best];
        if (record) argmax[o] = best;
      }
    }
  }
  return apply_op("maxpool2d", {n, c, oh, ow}, std::move(out), {x},
                  [argmax = std::move(argmax)](auto, std::span<const double> g, GradSink& sink) {
                    auto d = sink[0];
                    for (std::size_t i = 0; i < g.size(); ++i) d[argmax[i]] += g[i];
                  });
}

DiffArray avgpool2d(const DiffArray& x, std::size_t window, std::size_t stride) {
  check_rank(x, 4, "avgpool2d");
  const auto n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (window == 0 || stride == 0 || h < window || w < window) {
    throw ShapeError("avgpool2d: window " + std::to_string(window) + " does not fit " +
                     shape_string(x.shape()));
  }
  const auto oh = (h - window) / stride + 1, ow = (w - window) / stride + 1;
  const double inv = 1.0 / static_cast<double>(window * window);
  std::vector<double> out(n * c * oh * ow);
  const auto v = x.data();
  for (std::size_t p = 0; p < n * c; ++p) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        double acc = 0.0;
        for (std::size_t ky = 0; ky < window; ++ky) {
          for (std::size_t kx = 0; kx < window; ++kx) {
            acc += v[p * h * w + (oy * stride + ky) * w + ox * stride + kx];
          }
        }
        out[(p * oh + oy) * ow + ox] = acc * inv;
      }
    }
  }
  return apply_op("avgpool2d", {n, c, oh, ow}, std::move(out), {x},
                  [n, c, h, w, oh, ow, window, stride, inv](auto, std::span<const double> g,
                                                            GradSink& sink) {
                    auto d = sink[0];
                    for (std::size_t p = 0; p < n * c; ++p) {
                      for (std::size_t oy = 0; oy < oh; ++oy) {
                        for (std::size_t ox = 0; ox < ow; ++ox) {
                          const double share = g[(p * oh + oy) * ow + ox] * inv;
                          for (std::size_t ky = 0; ky < window; ++ky) {
                            for (std::size_t kx = 0; kx < window; ++kx) {
                              d[p * h * w + (oy * stride + ky) * w + ox * stride + kx] += share;
                            }
                          }
                        }
                      }
                    }
                  });
}

DiffArray linear(const DiffArray& input, const DiffArray& weight, const DiffArray& bias) {
  check_rank(input, 2, "linear input");
  check_rank(weight, 2, "linear weight");
  const auto rows = input.dim(0), in_dim = input.dim(1), out_dim = weight.dim(0);
  if (weight.dim(1) != in_dim) {
    throw ShapeError("linear: input " + shape_string(input.shape()) + " vs weight " +
                     shape_string(weight.shape()));
  }
  if (bias.size() != out_dim) throw ShapeError("linear: bias size mismatch");
  std::vector<double> out(rows * out_dim);
  const bool single = numeric_mode() == NumericMode::f32;
  if (single) {
    linear_forward<float>(input.data(), weight.data(), rows, in_dim, out_dim, out);
  } else {
    linear_forward<double>(input.data(), weight.data(), rows, in_dim, out_dim, out);
  }
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t o = 0; o < out_dim; ++o) out[r * out_dim + o] += bias.at(o);
  }
  return apply_op("linear", {rows, out_dim}, std::move(out), {input, weight, bias},
                  [input, weight, rows, in_dim, out_dim, single](
                      auto, std::span<const double> g, GradSink& sink) {
                    if (single) {
                      linear_backward<float>(input.data(), weight.data(), g, rows, in_dim, out_dim,
                                             sink);
                    } else {
                      linear_backward<double>(input.data(), weight.data(), g, rows, in_dim,
                                              out_dim, sink);
                    }
                    if (sink.wants(2)) {
                      auto d = sink[2];
                      for (std::size_t r = 0; r < rows; ++r) {
                        for (std::size_t o = 0; o < out_dim; ++o) d[o] += g[r * out_dim + o];
                      }
                    }
                  });
}

DiffArray matmul_nt(const DiffArray& a, const DiffArray& b) {
  check_rank(a, 2, "matmul_nt");
  check_rank(b, 2, "matmul_nt");
  if (a.dim(1) != b.dim(1)) {
    throw ShapeError("matmul_nt: inner dimensions differ " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
  const auto n = a.dim(0), m = b.dim(0), k = a.dim(1);
  std::vector<double> out(n * m);
  MapMat<double>(out.data(), n, m).noalias() =
      ConstMapMat<double>(a.data().data(), n, k) * ConstMapMat<double>(b.data().data(), m, k).transpose();
  return apply_op("matmul_nt", {n, m}, std::move(out), {a, b},
                  [a, b, n, m, k](auto, std::span<const double> g, GradSink& sink) {
                    ConstMapMat<double> gm(g.data(), n, m);
                    if (sink.wants(0)) {
                      auto d = sink[0];
                      MapMat<double>(d.data(), n, k).noalias() +=
                          gm * ConstMapMat<double>(b.data().data(), m, k);
                    }
                    if (sink.wants(1)) {
                      auto d = sink[1];
                      MapMat<double>(d.data(), m, k).noalias() +=
                          gm.transpose() * ConstMapMat<double>(a.data().data(), n, k);
                    }
                  });
}

DiffArray sigmoid(const DiffArray& x) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = x.at(i);
    out[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
  return apply_op("sigmoid", x.shape(), std::move(out), {x},
                  [](std::span<const double> y, std::span<const double> g, GradSink& sink) {
                    auto d = sink[0];
                    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * y[i] * (1.0 - y[i]);
                  });
}

DiffArray softmax(const DiffArray& x, std::size_t axis) {
  const auto s = split_axis(x.shape(), axis);
  std::vector<double> out(x.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const auto base = o * s.length * s.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < s.length; ++j) mx = std::max(mx, x.at(base + j * s.inner));
      double total = 0.0;
      for (std::size_t j = 0; j < s.length; ++j) {
        const double e = std::exp(x.at(base + j * s.inner) - mx);
        out[base + j * s.inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < s.length; ++j) out[base + j * s.inner] /= total;
    }
  }
  return apply_op("softmax", x.shape(), std::move(out), {x},
                  [s](std::span<const double> y, std::span<const double> g, GradSink& sink) {
                    auto d = sink[0];
                    for (std::size_t o = 0; o < s.outer; ++o) {
                      for (std::size_t in = 0; in < s.inner; ++in) {
                        const auto base = o * s.length * s.inner + in;
                        double dot = 0.0;
                        for (std::size_t j = 0; j < s.length; ++j) {
                          dot += g[base + j * s.inner] * y[base + j * s.inner];
                        }
                        for (std::size_t j = 0; j < s.length; ++j) {
                          const auto idx = base + j * s.inner;
                          d[idx] += y[idx] * (g[idx] - dot);
                        }
                      }
                    }
                  });
}

DiffArray log_softmax(const DiffArray& x, std::size_t axis) {
  const auto s = split_axis(x.shape(), axis);
  std::vector<double> out(x.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const auto base = o * s.length * s.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < s.length; ++j) mx = std::max(mx, x.at(base + j * s.inner));
      double total = 0.0;
      for (std::size_t j = 0; j < s.length; ++j) total += std::exp(x.at(base + j * s.inner) - mx);
      const double lse = mx + std::log(total);
      for (std::size_t j = 0; j < s.length; ++j) {
        out[base + j * s.inner] = x.at(base + j * s.inner) - lse;
      }
    }
  }
  return apply_op("log_softmax", x.shape(), std::move(out), {x},
                  [s](std::span<const double> y, std::span<const double> g, GradSink& sink) {
                    auto d = sink[0];
                    for (std::size_t o = 0; o < s.outer; ++o) {
                      for (std::size_t in = 0; in < s.inner; ++in) {
                        const auto base = o * s.length * s.inner + in;
                        double total = 0.0;
                        for (std::size_t j = 0; j < s.length; ++j) total += g[base + j * s.inner];
                        for (std::size_t j = 0; j < s.length; ++j) {
                          const auto idx = base + j * s.inner;
                          d[idx] += g[idx] - std::exp(y[idx]) * total;
                        }
                      }
                    }
                  });
}

DiffArray l2_normalize_rows(const DiffArray& x) {
  check_rank(x, 2, "l2_normalize_rows");
  const auto rows = x.dim(0), cols = x.dim(1);
  std::vector<double> out(x.size(), 0.0), norms(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < cols; ++c) acc += x.at(r * cols + c) * x.at(r * cols + c);
    norms[r] = std::sqrt(acc);
    if (norms[r] > 0.0) {
      for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = x.at(r * cols + c) / norms[r];
    }
  }
  return apply_op("l2_normalize_rows", x.shape(), std::move(out), {x},
                  [norms = std::move(norms), rows, cols](std::span<const double> y,
                                                         std::span<const double> g,
                                                         GradSink& sink) {
                    auto d = sink[0];
                    for (std::size_t r = 0; r < rows; ++r) {
                      if (norms[r] == 0.0) continue;
                      double dot = 0.0;
                      for (std::size_t c = 0; c < cols; ++c) dot += y[r * cols + c] * g[r * cols + c];
                      for (std::size_t c = 0; c < cols; ++c) {
                        const auto i = r * cols + c;
                        d[i] += (g[i] - y[i] * dot) / norms[r];
                      }
                    }
                  });
}

DiffArray neg_sq_distance(const DiffArray& a, const DiffArray& b) {
  check_rank(a, 2, "neg_sq_distance");
  check_rank(b, 2, "neg_sq_distance");
  if (a.dim(1) != b.dim(1)) {
    throw ShapeError("neg_sq_distance: feature sizes differ " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
  const auto n = a.dim(0), m = b.dim(0), k = a.dim(1);
  std::vector<double> out(n * m);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      double acc = 0.0;
      for (std::size_t t = 0; t < k; ++t) {
        const double diff = a.at(i * k + t) - b.at(j * k + t);
        acc += diff * diff;
      }
      out[i * m + j] = -acc;
    }
  }
  return apply_op("neg_sq_distance", {n, m}, std::move(out), {a, b},
                  [a, b, n, m, k](auto, std::span<const double> g, GradSink& sink) {
                    const bool wa = sink.wants(0), wb = sink.wants(1);
                    for (std::size_t i = 0; i < n; ++i) {
                      for (std::size_t j = 0; j < m; ++j) {
                        const double gij = g[i * m + j];
                        if (gij == 0.0) continue;
                        for (std::size_t t = 0; t < k; ++t) {
                          const double diff = a.at(i * k + t) - b.at(j * k + t);
                          if (wa) sink[0][i * k + t] -= 2.0 * diff * gij;
                          if (wb) sink[1][j * k + t] += 2.0 * diff * gij;
                        }
                      }
                    }
                  });
}

}  // namespace bsnet
