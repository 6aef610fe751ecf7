#include "bsnet/diff_array.hpp"

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include <atomic>
#include <sstream>
#include <unordered_set>

namespace bsnet {

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn backward;
  std::string_view op = "leaf";

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

}  // namespace detail

namespace {

std::atomic<NumericMode> g_mode{NumericMode::f64};
thread_local bool t_grad_enabled = true;

std::shared_ptr<detail::Node> make_leaf(Shape shape, std::vector<double> data, bool requires_grad) {
  if (data.size() != shape_size(shape)) {
    throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                     shape_string(shape));
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(data);
  node->requires_grad = requires_grad;
  return node;
}

void require(const std::shared_ptr<detail::Node>& node) {
  if (!node) throw std::logic_error("use of an undefined DiffArray");
}

}  // namespace

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

void set_numeric_mode(NumericMode mode) { g_mode.store(mode); }
NumericMode numeric_mode() { return g_mode.load(); }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }
bool grad_enabled() { return t_grad_enabled; }

void configure_allocator() {
#ifdef __GLIBC__
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
#endif
}

bool records_graph(std::initializer_list<DiffArray> parents) {
  if (!t_grad_enabled) return false;
  for (const auto& p : parents) {
    if (p.requires_grad()) return true;
  }
  return false;
}

DiffArray DiffArray::zeros(Shape shape, bool requires_grad) {
  const auto n = shape_size(shape);
  return DiffArray(make_leaf(std::move(shape), std::vector<double>(n, 0.0), requires_grad));
}

DiffArray DiffArray::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_size(shape);
  return DiffArray(make_leaf(std::move(shape), std::vector<double>(n, value), requires_grad));
}

DiffArray DiffArray::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  return DiffArray(make_leaf(std::move(shape), std::move(data), requires_grad));
}

DiffArray DiffArray::scalar(double value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

const Shape& DiffArray::shape() const {
  require(node_);
  return node_->shape;
}

std::size_t DiffArray::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_string(s));
  }
  return s[axis];
}

std::size_t DiffArray::size() const {
  require(node_);
  return node_->value.size();
}

std::span<const double> DiffArray::data() const {
  require(node_);
  return node_->value;
}

std::span<double> DiffArray::mutable_data() {
  require(node_);
  return node_->value;
}

double DiffArray::item() const {
  if (size() != 1) throw ShapeError("item() on non-scalar " + shape_string(shape()));
  return node_->value[0];
}

bool DiffArray::requires_grad() const {
  require(node_);
  return node_->requires_grad;
}

bool DiffArray::has_grad() const {
  require(node_);
  return node_->grad.size() == node_->value.size() && !node_->value.empty();
}

std::span<const double> DiffArray::grad() const {
  require(node_);
  node_->ensure_grad();
  return node_->grad;
}

std::span<double> DiffArray::mutable_grad() {
  require(node_);
  node_->ensure_grad();
  return node_->grad;
}

void DiffArray::zero_grad() {
  require(node_);
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

bool DiffArray::is_leaf() const {
  require(node_);
  return !node_->backward;
}

std::string_view DiffArray::op_name() const {
  require(node_);
  return node_->op;
}

void DiffArray::backward() const {
  require(node_);
  if (node_->value.size() != 1) {
    throw ShapeError("backward() requires a scalar, got " + shape_string(node_->shape));
  }
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Interior gradients are allocated on first touch and released once
  // propagated, so peak memory stays near one activation set.
  for (auto* node : order) {
    if (node->backward) std::vector<double>().swap(node->grad);
  }
  node_->ensure_grad();
  node_->grad[0] += 1.0;

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    if (!node->backward || node->grad.empty()) continue;
    GradSink sink(node->parents);
    node->backward(node->value, node->grad, sink);
    std::vector<double>().swap(node->grad);
  }
}

DiffArray DiffArray::detach(bool requires_grad) const {
  require(node_);
  return from_data(node_->shape, node_->value, requires_grad);
}

bool GradSink::wants(std::size_t index) const { return parents_.at(index)->requires_grad; }

std::span<double> GradSink::operator[](std::size_t index) {
  auto& parent = parents_.at(index);
  parent->ensure_grad();
  return parent->grad;
}

DiffArray apply_op(std::string_view name, Shape shape, std::vector<double> value,
                   std::vector<DiffArray> parents, BackwardFn backward) {
  auto node = make_leaf(std::move(shape), std::move(value), false);
  node->op = name;
  bool needs = false;
  if (t_grad_enabled) {
    for (const auto& p : parents) {
      require(p.node_);
      needs = needs || p.node_->requires_grad;
    }
  }
  if (needs) {
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (auto& p : parents) node->parents.push_back(std::move(p.node_));
    node->backward = std::move(backward);
  }
  return DiffArray(std::move(node));
}

}  // namespace bsnet
