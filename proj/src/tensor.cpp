#include "ucaps/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace ucaps {

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t e : shape) {
    if (e <= 0) throw ValidationError("tensor extent must be positive, got " + shape_str(shape));
    n *= e;
  }
  return n;
}

std::vector<int64_t> row_major_strides(const Shape& shape) {
  std::vector<int64_t> strides(shape.size(), 1);
  for (int64_t i = static_cast<int64_t>(shape.size()) - 2; i >= 0; --i)
    strides[i] = strides[i + 1] * shape[i + 1];
  return strides;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (size_t i = 0; i < shape.size(); ++i) out << (i ? "," : "") << shape[i];
  out << ']';
  return out.str();
}

double Rng::normal() {
  if (has_cached_) {
    has_cached_ = false;
    return cached_;
  }
  double u1 = 0.0;
  do {
    u1 = uniform();
  } while (u1 <= 0.0);
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * 3.14159265358979323846 * u2;
  cached_ = r * std::sin(theta);
  has_cached_ = true;
  return r * std::cos(theta);
}

int64_t Rng::below(int64_t n) {
  if (n <= 0) throw ValidationError("Rng::below requires n > 0");
  // rejection sampling keeps the distribution exactly uniform
  const uint64_t un = static_cast<uint64_t>(n);
  const uint64_t limit = std::numeric_limits<uint64_t>::max() - std::numeric_limits<uint64_t>::max() % un;
  uint64_t x;
  do {
    x = engine_();
  } while (x >= limit);
  return static_cast<int64_t>(x % un);
}

namespace detail {

namespace {
thread_local bool g_recording = true;
}

bool grad_recording_enabled() { return g_recording; }

template <typename T>
void check_finite(const std::vector<T>& values, const char* op) {
  for (size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw NumericError(std::string("non-finite value produced by op '") + op +
                         "' at flat index " + std::to_string(i));
    }
  }
}

template void check_finite<float>(const std::vector<float>&, const char*);
template void check_finite<double>(const std::vector<double>&, const char*);

template <typename T>
TensorT<T> make_op_node(const char* op, Shape shape, std::vector<T> values,
                        std::vector<TensorT<T>> parents,
                        std::function<void(NodeT<T>&)> backprop) {
  if (shape_numel(shape) != static_cast<int64_t>(values.size()))
    throw ValidationError(std::string("op '") + op + "': value count does not match shape");
  check_finite(values, op);
  auto node = std::make_shared<NodeT<T>>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  node->op = op;
  bool any_grad = false;
  for (const auto& p : parents) any_grad = any_grad || p.node()->requires_grad;
  if (grad_recording_enabled() && any_grad) {
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (auto& p : parents) node->parents.push_back(p.handle());
    node->backprop = std::move(backprop);
  }
  return TensorT<T>(std::move(node));
}

template TensorT<float> make_op_node<float>(const char*, Shape, std::vector<float>,
                                            std::vector<TensorT<float>>,
                                            std::function<void(NodeT<float>&)>);
template TensorT<double> make_op_node<double>(const char*, Shape, std::vector<double>,
                                              std::vector<TensorT<double>>,
                                              std::function<void(NodeT<double>&)>);

}  // namespace detail

NoGradGuard::NoGradGuard() : prev_(detail::g_recording) { detail::g_recording = false; }
NoGradGuard::~NoGradGuard() { detail::g_recording = prev_; }

template <typename T>
TensorT<T> TensorT<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
TensorT<T> TensorT<T>::full(Shape shape, T value, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->values.assign(static_cast<size_t>(shape_numel(shape)), value);
  node->shape = std::move(shape);
  node->requires_grad = requires_grad;
  return TensorT(std::move(node));
}

template <typename T>
TensorT<T> TensorT<T>::from_data(Shape shape, std::vector<T> values, bool requires_grad) {
  if (shape_numel(shape) != static_cast<int64_t>(values.size()))
    throw ValidationError("from_data: value count " + std::to_string(values.size()) +
                          " does not match shape " + shape_str(shape));
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  node->requires_grad = requires_grad;
  return TensorT(std::move(node));
}

template <typename T>
TensorT<T> TensorT<T>::scalar(T value, bool requires_grad) {
  return from_data(Shape{1}, {value}, requires_grad);
}

template <typename T>
TensorT<T> TensorT<T>::randn(Shape shape, Rng& rng, T stddev, bool requires_grad) {
  std::vector<T> values(static_cast<size_t>(shape_numel(shape)));
  for (auto& v : values) v = static_cast<T>(rng.normal()) * stddev;
  return from_data(std::move(shape), std::move(values), requires_grad);
}

template <typename T>
TensorT<T> TensorT<T>::rand_uniform(Shape shape, Rng& rng, T lo, T hi, bool requires_grad) {
  std::vector<T> values(static_cast<size_t>(shape_numel(shape)));
  for (auto& v : values) v = static_cast<T>(rng.uniform(lo, hi));
  return from_data(std::move(shape), std::move(values), requires_grad);
}

template <typename T>
T TensorT<T>::item() const {
  if (numel() != 1) throw ValidationError("item() requires a single-element tensor");
  return node_->values[0];
}

template <typename T>
T TensorT<T>::at(std::initializer_list<int64_t> idx) const {
  if (static_cast<int64_t>(idx.size()) != ndim())
    throw ValidationError("at(): index rank mismatch");
  const auto strides = row_major_strides(node_->shape);
  int64_t flat = 0;
  size_t axis = 0;
  for (int64_t i : idx) {
    if (i < 0 || i >= node_->shape[axis]) throw ValidationError("at(): index out of range");
    flat += i * strides[axis];
    ++axis;
  }
  return node_->values[static_cast<size_t>(flat)];
}

template <typename T>
std::span<const T> TensorT<T>::grad() const {
  if (node_->grad.empty()) throw ValidationError("grad(): no gradient accumulated");
  return node_->grad;
}

template <typename T>
std::span<T> TensorT<T>::mutable_grad() {
  node_->ensure_grad();
  return node_->grad;
}

template <typename T>
void TensorT<T>::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
}

template <typename T>
void TensorT<T>::backward() const {
  if (!defined()) throw ValidationError("backward() on undefined tensor");
  if (numel() != 1) throw NumericError("backward() requires a scalar loss, got shape " + shape_str(shape()));

  // Iterative post-order DFS: children before parents in `order`.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && !visited.count(parent)) {
        visited.insert(parent);
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Intermediate grads are per-sweep scratch; only leaves accumulate
  // across repeated backward() calls.
  for (Node* node : order)
    if (node->backprop) node->grad.assign(node->values.size(), T(0));

  node_->ensure_grad();
  node_->grad[0] += T(1);
  // Reverse topological order: each node backpropagates exactly once.
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backprop) {
      for (auto& parent : node->parents)
        if (parent->requires_grad) parent->ensure_grad();
      node->backprop(*node);
    }
  }
}

template class TensorT<float>;
template class TensorT<double>;

}  // namespace ucaps
