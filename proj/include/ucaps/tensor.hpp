#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ucaps {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::vector<int64_t> row_major_strides(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Invalid configuration, shape mismatch or malformed input. Maps to CLI exit 2.
class ValidationError : public std::invalid_argument {
 public:
  explicit ValidationError(const std::string& what) : std::invalid_argument(what) {}
};

/// Non-finite value or other numeric failure at run time. Maps to CLI exit 3.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

/// Deterministic random source. mt19937_64 has a standard-pinned bit stream;
/// the value transforms below are ours, so sequences are stable across
/// library versions.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller, one value per call (pair cached).
  double normal();

  /// Uniform integer in [0, n).
  int64_t below(int64_t n);

  uint64_t next_seed() { return engine_(); }

 private:
  std::mt19937_64 engine_;
  double cached_ = 0.0;
  bool has_cached_ = false;
};

namespace detail {

template <typename T>
struct NodeT {
  Shape shape;
  std::vector<T> values;
  std::vector<T> grad;  // allocated lazily, same length as values
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<NodeT>> parents;
  std::function<void(NodeT&)> backprop;  // accumulates into parents' grad

  void ensure_grad() {
    if (grad.empty()) grad.assign(values.size(), T(0));
  }
};

bool grad_recording_enabled();

}  // namespace detail

/// RAII guard: disables graph recording in its scope (inference mode).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// Dense row-major tensor (last axis fastest) with reverse-mode autodiff.
/// T is float in production; double instantiation backs the shadow-precision
/// gradient checks.
template <typename T>
class TensorT {
 public:
  using Node = detail::NodeT<T>;

  TensorT() = default;

  static TensorT zeros(Shape shape, bool requires_grad = false);
  static TensorT full(Shape shape, T value, bool requires_grad = false);
  static TensorT from_data(Shape shape, std::vector<T> values, bool requires_grad = false);
  static TensorT scalar(T value, bool requires_grad = false);
  static TensorT randn(Shape shape, Rng& rng, T stddev = T(1), bool requires_grad = false);
  static TensorT rand_uniform(Shape shape, Rng& rng, T lo, T hi, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int64_t ndim() const { return static_cast<int64_t>(node_->shape.size()); }
  int64_t dim(int64_t axis) const { return node_->shape[static_cast<size_t>(axis)]; }
  int64_t numel() const { return static_cast<int64_t>(node_->values.size()); }

  std::span<const T> data() const { return node_->values; }
  /// Direct write access; meant for leaves (parameters, test fixtures).
  std::span<T> mutable_data() { return node_->values; }

  T item() const;
  T at(std::initializer_list<int64_t> idx) const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool value) { node_->requires_grad = value; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const;
  std::span<T> mutable_grad();
  void zero_grad();

  /// Reverse-mode sweep from a scalar. Accumulates into every
  /// requires_grad leaf; repeated calls without zero_grad() add up.
  void backward() const;

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& handle() const { return node_; }
  explicit TensorT(std::shared_ptr<Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<Node> node_;
};

using Tensor = TensorT<float>;
using TensorD = TensorT<double>;

namespace detail {

/// Throws NumericError naming `op` if any value is NaN/Inf. Every forward
/// op funnels its output through this; silent NaN propagation is treated
/// as a hard bug.
template <typename T>
void check_finite(const std::vector<T>& values, const char* op);

/// Builds a recorded op node: output values + backward closure. When grad
/// recording is off or no parent requires grad, the closure is dropped.
template <typename T>
TensorT<T> make_op_node(const char* op, Shape shape, std::vector<T> values,
                        std::vector<TensorT<T>> parents,
                        std::function<void(NodeT<T>&)> backprop);

}  // namespace detail

}  // namespace ucaps
