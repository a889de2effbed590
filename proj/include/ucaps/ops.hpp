#pragma once

#include <vector>

#include "ucaps/tensor.hpp"

namespace ucaps {

// ---- elementwise ----
template <typename T> TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b);
template <typename T> TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b);
template <typename T> TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b);
template <typename T> TensorT<T> scale(const TensorT<T>& a, T factor);
template <typename T> TensorT<T> relu(const TensorT<T>& a);
template <typename T> TensorT<T> sigmoid(const TensorT<T>& a);
template <typename T> TensorT<T> log_op(const TensorT<T>& a);

/// Elementwise multiply with NumPy-style broadcasting of `b` onto `a`'s
/// shape: b must have the same rank and every extent either equal or 1.
template <typename T> TensorT<T> mul_bc(const TensorT<T>& a, const TensorT<T>& b);

// ---- shape ----
template <typename T> TensorT<T> reshape(const TensorT<T>& a, Shape shape);
template <typename T> TensorT<T> permute(const TensorT<T>& a, const std::vector<int64_t>& perm);
template <typename T> TensorT<T> concat(const std::vector<TensorT<T>>& parts, int64_t axis);

// ---- reductions / normalization ----
template <typename T> TensorT<T> sum(const TensorT<T>& a);
template <typename T> TensorT<T> mean(const TensorT<T>& a);
template <typename T> TensorT<T> sum_axis(const TensorT<T>& a, int64_t axis);
template <typename T> TensorT<T> softmax(const TensorT<T>& a, int64_t axis);
/// L2 norm along `axis`; the axis is dropped from the output shape.
/// Gradient at an exactly zero vector is taken as 0.
template <typename T> TensorT<T> norm_along(const TensorT<T>& a, int64_t axis);
template <typename T> TensorT<T> mse(const TensorT<T>& a, const TensorT<T>& b);

// ---- convolution ----

/// 3D convolution (cross-correlation), NCXYZ layout. Output extent per axis:
/// floor((E + 2*padding - dilation*(k-1) - 1) / stride) + 1.
template <typename T>
TensorT<T> conv3d(const TensorT<T>& input, const TensorT<T>& weight, const TensorT<T>& bias,
                  int64_t stride, int64_t dilation, int64_t padding);

/// Transposed 3D convolution: scatter-add of strided windows, i.e. the
/// adjoint of conv3d(stride, dilation=1, padding=0) applied as a forward op.
/// weight layout [Cin, Cout, k, k, k]; output extent (E-1)*stride + k.
template <typename T>
TensorT<T> conv_transpose3d(const TensorT<T>& input, const TensorT<T>& weight, int64_t stride);

Shape conv3d_output_shape(const Shape& input, const Shape& weight, int64_t stride,
                          int64_t dilation, int64_t padding);

// ---- batch normalization ----

template <typename T>
struct BatchNormStats {
  std::vector<T> mean;
  std::vector<T> var;
};

/// Batch normalization over all non-channel axes of a NC... tensor.
/// Training mode uses batch statistics and updates `stats` in place
/// (running var stored unbiased); eval mode normalizes with `stats`.
template <typename T>
TensorT<T> batchnorm(const TensorT<T>& input, const TensorT<T>& gamma, const TensorT<T>& beta,
                     BatchNormStats<T>* stats, bool training, T eps = T(1e-5),
                     T momentum = T(0.1));

// convenience operators for test/loss code
template <typename T> TensorT<T> operator+(const TensorT<T>& a, const TensorT<T>& b) { return add(a, b); }
template <typename T> TensorT<T> operator-(const TensorT<T>& a, const TensorT<T>& b) { return sub(a, b); }
template <typename T> TensorT<T> operator*(const TensorT<T>& a, const TensorT<T>& b) { return mul(a, b); }

namespace detail {
// Fixed-chunk parallel GEMM helpers shared by conv and capsule kernels.
// Row-major operands; chunk boundaries do not depend on the thread count,
// so results are bit-identical for any OMP setting.
template <typename T>
void gemm_rm(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k, const T* a,
             int64_t lda, const T* b, int64_t ldb, T* c, int64_t ldc, bool accumulate);
}  // namespace detail

}  // namespace ucaps
