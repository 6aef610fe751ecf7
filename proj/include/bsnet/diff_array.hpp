#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace bsnet {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Precision used by the matrix-multiply kernels (convolution, linear).
/// Storage is always 64-bit; f32 runs the heavy kernels in single precision.
enum class NumericMode { f64, f32 };

void set_numeric_mode(NumericMode mode);
NumericMode numeric_mode();

/// Disables graph recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

/// Keeps large activation buffers in the heap instead of fresh mappings
/// (glibc only; a no-op elsewhere). Entry points call this once at startup.
void configure_allocator();

namespace detail {
struct Node;
}

class GradSink;

/// Backward closure of a recorded operation. Receives the output value, the
/// gradient flowing into the output, and a sink for the parents' gradients.
using BackwardFn = std::function<void(std::span<const double> out_value,
                                      std::span<const double> out_grad,
                                      GradSink& parents)>;

/// N-dimensional array of reals with an optional gradient and a record of the
/// operation that produced it. Copies share the underlying node.
class DiffArray {
 public:
  DiffArray() = default;

  static DiffArray zeros(Shape shape, bool requires_grad = false);
  static DiffArray full(Shape shape, double value, bool requires_grad = false);
  static DiffArray from_data(Shape shape, std::vector<double> data,
                             bool requires_grad = false);
  static DiffArray scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t size() const;

  std::span<const double> data() const;
  /// Mutable access to the values. Intended for leaves (parameters, inputs).
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t flat_index) const { return data()[flat_index]; }

  bool requires_grad() const;
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();
  bool is_leaf() const;
  std::string_view op_name() const;

  /// Reverse-mode sweep from this scalar. Leaf gradients accumulate across
  /// calls; interior nodes hold no gradient afterwards.
  void backward() const;

  /// Same values, no history, new storage.
  DiffArray detach(bool requires_grad = false) const;

  bool same_node(const DiffArray& other) const { return node_ == other.node_; }

 private:
  friend class GradSink;
  friend DiffArray apply_op(std::string_view, Shape, std::vector<double>,
                            std::vector<DiffArray>, BackwardFn);
  explicit DiffArray(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

  std::shared_ptr<detail::Node> node_;
};

/// Parent-gradient access handed to backward closures. Buffers are allocated
/// on first touch; parents that do not need a gradient report wants() false.
class GradSink {
 public:
  explicit GradSink(std::vector<std::shared_ptr<detail::Node>>& parents) : parents_(parents) {}
  bool wants(std::size_t index) const;
  std::span<double> operator[](std::size_t index);

 private:
  std::vector<std::shared_ptr<detail::Node>>& parents_;
};

/// Records a new operation. When no parent requires a gradient (or recording is
/// disabled) the result is a plain constant and `backward` is dropped.
DiffArray apply_op(std::string_view name, Shape shape, std::vector<double> value,
                   std::vector<DiffArray> parents, BackwardFn backward);

/// Whether apply_op with these parents would record a backward closure.
bool records_graph(std::initializer_list<DiffArray> parents);

}  // namespace bsnet
