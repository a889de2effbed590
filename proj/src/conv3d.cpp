#include <Eigen/Core>
#include <algorithm>
#include <cmath>

#include "ucaps/ops.hpp"

namespace ucaps {

using detail::NodeT;
using detail::make_op_node;

namespace detail {

namespace {
constexpr int64_t kGemmChunk = 2048;
}

template <typename T>
void gemm_rm(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k, const T* a,
             int64_t lda, const T* b, int64_t ldb, T* c, int64_t ldc, bool accumulate) {
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using CMap = Eigen::Map<const Mat, 0, Eigen::OuterStride<>>;
  using MMap = Eigen::Map<Mat, 0, Eigen::OuterStride<>>;

  CMap amap(a, trans_a ? k : m, trans_a ? m : k, Eigen::OuterStride<>(lda));
  CMap bmap(b, trans_b ? n : k, trans_b ? k : n, Eigen::OuterStride<>(ldb));
  MMap cmap(c, m, n, Eigen::OuterStride<>(ldc));

  // Fixed-size chunks along the longer output axis: per-cell accumulation
  // happens inside a single Eigen call whose block extents do not depend on
  // the thread count, so results are reproducible under any OMP setting.
  const bool by_rows = m > n;
  const int64_t span = by_rows ? m : n;
  const int64_t chunks = (span + kGemmChunk - 1) / kGemmChunk;
  auto compute = [&](const auto& alog, const auto& blog) {
#pragma omp parallel for schedule(static) if (chunks > 1 && m * n * k > 1 << 16)
    for (int64_t chunk = 0; chunk < chunks; ++chunk) {
      const int64_t c0 = chunk * kGemmChunk;
      const int64_t cw = std::min(kGemmChunk, span - c0);
      if (by_rows) {
        if (accumulate)
          cmap.middleRows(c0, cw).noalias() += alog.middleRows(c0, cw) * blog;
        else
          cmap.middleRows(c0, cw).noalias() = alog.middleRows(c0, cw) * blog;
      } else {
        if (accumulate)
          cmap.middleCols(c0, cw).noalias() += alog * blog.middleCols(c0, cw);
        else
          cmap.middleCols(c0, cw).noalias() = alog * blog.middleCols(c0, cw);
      }
    }
  };
  if (!trans_a && !trans_b)
    compute(amap, bmap);
  else if (!trans_a && trans_b)
    compute(amap, bmap.transpose());
  else if (trans_a && !trans_b)
    compute(amap.transpose(), bmap);
  else
    compute(amap.transpose(), bmap.transpose());
}

template void gemm_rm<float>(bool, bool, int64_t, int64_t, int64_t, const float*, int64_t,
                             const float*, int64_t, float*, int64_t, bool);
template void gemm_rm<double>(bool, bool, int64_t, int64_t, int64_t, const double*, int64_t,
                              const double*, int64_t, double*, int64_t, bool);

}  // namespace detail

namespace {

struct ConvGeom {
  int64_t k = 1, stride = 1, dilation = 1, padding = 0;
  int64_t in[3] = {0, 0, 0};
  int64_t out[3] = {0, 0, 0};

  int64_t in_spatial() const { return in[0] * in[1] * in[2]; }
  int64_t out_spatial() const { return out[0] * out[1] * out[2]; }
  int64_t taps() const { return k * k * k; }
};

int64_t conv_out_extent(int64_t e, int64_t k, int64_t stride, int64_t dilation, int64_t padding) {
  return (e + 2 * padding - dilation * (k - 1) - 1) / stride + 1;
}

ConvGeom make_geom(const Shape& input, int64_t k, int64_t stride, int64_t dilation,
                   int64_t padding, const char* op) {
  if (k < 1 || stride < 1 || dilation < 1 || padding < 0)
    throw ValidationError(std::string(op) + ": kernel/stride/dilation must be >= 1, padding >= 0");
  ConvGeom g;
  g.k = k;
  g.stride = stride;
  g.dilation = dilation;
  g.padding = padding;
  for (int i = 0; i < 3; ++i) {
    g.in[i] = input[2 + i];
    g.out[i] = conv_out_extent(g.in[i], k, stride, dilation, padding);
    if (g.out[i] <= 0)
      throw ValidationError(std::string(op) + ": zero output extent for input " +
                            shape_str(input));
  }
  return g;
}

// Gathers rows [(c, kx, ky, kz)] x columns [output voxels s0..s1) into `col`.
template <typename T>
void im2col_chunk(const T* im, int64_t channels, const ConvGeom& g, int64_t s0, int64_t s1,
                  T* col) {
  const int64_t rows = channels * g.taps();
  const int64_t cols = s1 - s0;
  const int64_t oyz = g.out[1] * g.out[2];
#pragma omp parallel for schedule(static) if (rows > 8 && cols * rows > 1 << 14)
  for (int64_t r = 0; r < rows; ++r) {
    const int64_t c = r / g.taps();
    const int64_t kidx = r % g.taps();
    const int64_t kx = kidx / (g.k * g.k);
    const int64_t ky = (kidx / g.k) % g.k;
    const int64_t kz = kidx % g.k;
    const T* src = im + c * g.in_spatial();
    T* dst = col + r * cols;
    for (int64_t s = s0; s < s1; ++s) {
      const int64_t ox = s / oyz;
      const int64_t oy = (s / g.out[2]) % g.out[1];
      const int64_t oz = s % g.out[2];
      const int64_t ix = ox * g.stride - g.padding + kx * g.dilation;
      const int64_t iy = oy * g.stride - g.padding + ky * g.dilation;
      const int64_t iz = oz * g.stride - g.padding + kz * g.dilation;
      T v = T(0);
      if (ix >= 0 && ix < g.in[0] && iy >= 0 && iy < g.in[1] && iz >= 0 && iz < g.in[2])
        v = src[(ix * g.in[1] + iy) * g.in[2] + iz];
      dst[s - s0] = v;
    }
  }
}

// Adjoint of im2col for one channel block: accumulates col rows [k^3 x S_out]
// of channel `c` back into the input-shaped buffer (gather form, so it can
// run parallel over input voxels).
template <typename T>
void col2im_add_channel(const T* col, const ConvGeom& g, T* im_channel) {
  const int64_t oyz = g.out[1] * g.out[2];
  const int64_t S = g.out_spatial();
#pragma omp parallel for schedule(static) if (g.in[0] > 1)
  for (int64_t ix = 0; ix < g.in[0]; ++ix)
    for (int64_t iy = 0; iy < g.in[1]; ++iy)
      for (int64_t iz = 0; iz < g.in[2]; ++iz) {
        T acc = T(0);
        for (int64_t kx = 0; kx < g.k; ++kx) {
          const int64_t tx = ix + g.padding - kx * g.dilation;
          if (tx < 0 || tx % g.stride) continue;
          const int64_t ox = tx / g.stride;
          if (ox >= g.out[0]) continue;
          for (int64_t ky = 0; ky < g.k; ++ky) {
            const int64_t ty = iy + g.padding - ky * g.dilation;
            if (ty < 0 || ty % g.stride) continue;
            const int64_t oy = ty / g.stride;
            if (oy >= g.out[1]) continue;
            for (int64_t kz = 0; kz < g.k; ++kz) {
              const int64_t tz = iz + g.padding - kz * g.dilation;
              if (tz < 0 || tz % g.stride) continue;
              const int64_t oz = tz / g.stride;
              if (oz >= g.out[2]) continue;
              const int64_t kidx = (kx * g.k + ky) * g.k + kz;
              acc += col[kidx * S + ox * oyz + oy * g.out[2] + oz];
            }
          }
        }
        im_channel[(ix * g.in[1] + iy) * g.in[2] + iz] += acc;
      }
}

// grad wrt conv input for one batch item: grad_col = W^T * grad_out, then
// col2im. Runs per input channel to bound the col buffer.
template <typename T>
void conv_grad_input_item(const T* grad_out, const T* weight, int64_t cin, int64_t cout,
                          const ConvGeom& g, T* grad_in) {
  const int64_t S = g.out_spatial();
  const int64_t taps = g.taps();
  std::vector<T> gcol(static_cast<size_t>(taps * S));
  for (int64_t c = 0; c < cin; ++c) {
    // rows of W^T for channel c == column block c*taps..(c+1)*taps of W
    detail::gemm_rm<T>(true, false, taps, S, cout, weight + c * taps, cin * taps, grad_out, S,
                       gcol.data(), S, false);
    col2im_add_channel(gcol.data(), g, grad_in + c * g.in_spatial());
  }
}

constexpr int64_t kColChunkVoxels = 16384;

}  // namespace

Shape conv3d_output_shape(const Shape& input, const Shape& weight, int64_t stride,
                          int64_t dilation, int64_t padding) {
  const ConvGeom g = make_geom(input, weight[2], stride, dilation, padding, "conv3d");
  return Shape{input[0], weight[0], g.out[0], g.out[1], g.out[2]};
}

template <typename T>
TensorT<T> conv3d(const TensorT<T>& input, const TensorT<T>& weight, const TensorT<T>& bias,
                  int64_t stride, int64_t dilation, int64_t padding) {
  if (input.ndim() != 5) throw ValidationError("conv3d: input must be [N,C,X,Y,Z]");
  if (weight.ndim() != 5 || weight.dim(2) != weight.dim(3) || weight.dim(3) != weight.dim(4))
    throw ValidationError("conv3d: weight must be [Cout,Cin,k,k,k]");
  if (weight.dim(1) != input.dim(1))
    throw ValidationError("conv3d: input channels " + std::to_string(input.dim(1)) +
                          " do not match weight Cin " + std::to_string(weight.dim(1)));
  if (bias.ndim() != 1 || bias.dim(0) != weight.dim(0))
    throw ValidationError("conv3d: bias must be [Cout]");

  const int64_t batch = input.dim(0);
  const int64_t cin = input.dim(1);
  const int64_t cout = weight.dim(0);
  const ConvGeom g = make_geom(input.shape(), weight.dim(2), stride, dilation, padding, "conv3d");
  const int64_t S = g.out_spatial();
  const int64_t ck = cin * g.taps();

  std::vector<T> out(static_cast<size_t>(batch * cout * S));
  {
    std::vector<T> col(static_cast<size_t>(ck * std::min(S, kColChunkVoxels)));
    for (int64_t n = 0; n < batch; ++n) {
      const T* in_n = input.data().data() + n * cin * g.in_spatial();
      T* out_n = out.data() + n * cout * S;
      for (int64_t s0 = 0; s0 < S; s0 += kColChunkVoxels) {
        const int64_t s1 = std::min(S, s0 + kColChunkVoxels);
        im2col_chunk(in_n, cin, g, s0, s1, col.data());
        detail::gemm_rm<T>(false, false, cout, s1 - s0, ck, weight.data().data(), ck, col.data(),
                           s1 - s0, out_n + s0, S, false);
      }
      auto bd = bias.data();
      for (int64_t c = 0; c < cout; ++c) {
        T* row = out_n + c * S;
        for (int64_t s = 0; s < S; ++s) row[s] += bd[c];
      }
    }
  }

  Shape out_shape{batch, cout, g.out[0], g.out[1], g.out[2]};
  return make_op_node<T>("conv3d", std::move(out_shape), std::move(out), {input, weight, bias},
                         [g, batch, cin, cout, S, ck](NodeT<T>& self) {
    auto& pin = *self.parents[0];
    auto& pw = *self.parents[1];
    auto& pb = *self.parents[2];
    std::vector<T> col;
    if (pw.requires_grad) col.resize(static_cast<size_t>(ck * std::min(S, kColChunkVoxels)));
    for (int64_t n = 0; n < batch; ++n) {
      const T* g_n = self.grad.data() + n * cout * S;
      if (pb.requires_grad) {
        for (int64_t c = 0; c < cout; ++c) {
          T acc = T(0);
          for (int64_t s = 0; s < S; ++s) acc += g_n[c * S + s];
          pb.grad[c] += acc;
        }
      }
      if (pw.requires_grad) {
        const T* in_n = pin.values.data() + n * cin * g.in_spatial();
        for (int64_t s0 = 0; s0 < S; s0 += kColChunkVoxels) {
          const int64_t s1 = std::min(S, s0 + kColChunkVoxels);
          im2col_chunk(in_n, cin, g, s0, s1, col.data());
          // dW[Cout, ck] += g_chunk [Cout, cw] * col^T [cw, ck]
          std::vector<T> gchunk(static_cast<size_t>(cout * (s1 - s0)));
          for (int64_t c = 0; c < cout; ++c)
            std::copy(g_n + c * S + s0, g_n + c * S + s1, gchunk.data() + c * (s1 - s0));
          detail::gemm_rm<T>(false, true, cout, ck, s1 - s0, gchunk.data(), s1 - s0, col.data(),
                             s1 - s0, pw.grad.data(), ck, true);
        }
      }
      if (pin.requires_grad) {
        conv_grad_input_item(g_n, pw.values.data(), cin, cout, g,
                             pin.grad.data() + n * cin * g.in_spatial());
      }
    }
  });
}

template <typename T>
TensorT<T> conv_transpose3d(const TensorT<T>& input, const TensorT<T>& weight, int64_t stride) {
  if (input.ndim() != 5) throw ValidationError("conv_transpose3d: input must be [N,C,X,Y,Z]");
  if (weight.ndim() != 5 || weight.dim(2) != weight.dim(3) || weight.dim(3) != weight.dim(4))
    throw ValidationError("conv_transpose3d: weight must be [Cin,Cout,k,k,k]");
  if (weight.dim(0) != input.dim(1))
    throw ValidationError("conv_transpose3d: input channels do not match weight Cin");
  const int64_t k = weight.dim(2);
  if (stride < 1 || k < stride)
    throw ValidationError("conv_transpose3d: requires k >= stride >= 1");

  const int64_t batch = input.dim(0);
  const int64_t cin = input.dim(1);
  const int64_t cout = weight.dim(1);

  // Geometry of the convolution this op is the adjoint of: its input is our
  // output (big side), its output is our input (small side).
  Shape big{batch, cout, (input.dim(2) - 1) * stride + k, (input.dim(3) - 1) * stride + k,
            (input.dim(4) - 1) * stride + k};
  const ConvGeom g = make_geom(big, k, stride, /*dilation=*/1, /*padding=*/0, "conv_transpose3d");
  const int64_t S = g.out_spatial();       // small side voxels
  const int64_t big_spatial = g.in_spatial();
  const int64_t taps = g.taps();

  std::vector<T> out(static_cast<size_t>(batch * cout * big_spatial), T(0));
  {
    std::vector<T> col(static_cast<size_t>(cout * taps * S));
    for (int64_t n = 0; n < batch; ++n) {
      const T* in_n = input.data().data() + n * cin * S;
      // col[(co,kidx), s] = sum_ci W[ci, (co,kidx)] * in[ci, s]
      detail::gemm_rm<T>(true, false, cout * taps, S, cin, weight.data().data(), cout * taps,
                         in_n, S, col.data(), S, false);
      T* out_n = out.data() + n * cout * big_spatial;
      for (int64_t c = 0; c < cout; ++c)
        col2im_add_channel(col.data() + c * taps * S, g, out_n + c * big_spatial);
    }
  }

  Shape out_shape{batch, cout, g.in[0], g.in[1], g.in[2]};
  return make_op_node<T>("conv_transpose3d", std::move(out_shape), std::move(out),
                         {input, weight},
                         [g, batch, cin, cout, S, big_spatial, taps](NodeT<T>& self) {
    auto& pin = *self.parents[0];
    auto& pw = *self.parents[1];
    std::vector<T> col(static_cast<size_t>(cout * taps * S));
    for (int64_t n = 0; n < batch; ++n) {
      const T* g_n = self.grad.data() + n * cout * big_spatial;
      // both grads consume im2col of grad_out under the underlying conv
      im2col_chunk(g_n, cout, g, 0, S, col.data());
      if (pin.requires_grad) {
        detail::gemm_rm<T>(false, false, cin, S, cout * taps, pw.values.data(), cout * taps,
                           col.data(), S, pin.grad.data() + n * cin * S, S, true);
      }
      if (pw.requires_grad) {
        detail::gemm_rm<T>(false, true, cin, cout * taps, S, pin.values.data() + n * cin * S, S,
                           col.data(), S, pw.grad.data(), cout * taps, true);
      }
    }
  });
}

template <typename T>
TensorT<T> batchnorm(const TensorT<T>& input, const TensorT<T>& gamma, const TensorT<T>& beta,
                     BatchNormStats<T>* stats, bool training, T eps, T momentum) {
  if (input.ndim() < 2) throw ValidationError("batchnorm: input must be [N,C,...]");
  const int64_t channels = input.dim(1);
  if (gamma.ndim() != 1 || gamma.dim(0) != channels || beta.ndim() != 1 ||
      beta.dim(0) != channels)
    throw ValidationError("batchnorm: gamma/beta must be [C]");
  const int64_t batch = input.dim(0);
  int64_t spatial = 1;
  for (int64_t i = 2; i < input.ndim(); ++i) spatial *= input.dim(i);
  const int64_t m = batch * spatial;
  if (training && m == 1)
    throw ValidationError("batchnorm: variance undefined for a single sample in training mode");
  if (!training && (stats == nullptr || static_cast<int64_t>(stats->mean.size()) != channels))
    throw ValidationError("batchnorm: eval mode requires running stats of size C");

  auto xd = input.data();
  std::vector<T> mean_c(channels), rstd_c(channels);
  if (training) {
    for (int64_t c = 0; c < channels; ++c) {
      T acc = T(0);
      for (int64_t n = 0; n < batch; ++n) {
        const T* src = xd.data() + (n * channels + c) * spatial;
        for (int64_t s = 0; s < spatial; ++s) acc += src[s];
      }
      const T mu = acc / static_cast<T>(m);
      T var = T(0);
      for (int64_t n = 0; n < batch; ++n) {
        const T* src = xd.data() + (n * channels + c) * spatial;
        for (int64_t s = 0; s < spatial; ++s) {
          const T d = src[s] - mu;
          var += d * d;
        }
      }
      var /= static_cast<T>(m);
      mean_c[c] = mu;
      rstd_c[c] = T(1) / std::sqrt(var + eps);
      if (stats) {
        if (static_cast<int64_t>(stats->mean.size()) != channels) {
          stats->mean.assign(channels, T(0));
          stats->var.assign(channels, T(1));
        }
        const T unbiased = var * static_cast<T>(m) / static_cast<T>(m - 1);
        stats->mean[c] = (T(1) - momentum) * stats->mean[c] + momentum * mu;
        stats->var[c] = (T(1) - momentum) * stats->var[c] + momentum * unbiased;
      }
    }
  } else {
    for (int64_t c = 0; c < channels; ++c) {
      mean_c[c] = stats->mean[c];
      rstd_c[c] = T(1) / std::sqrt(stats->var[c] + eps);
    }
  }

  std::vector<T> xhat(static_cast<size_t>(input.numel()));
  std::vector<T> out(static_cast<size_t>(input.numel()));
  auto gd = gamma.data();
  auto bd = beta.data();
  for (int64_t n = 0; n < batch; ++n)
    for (int64_t c = 0; c < channels; ++c) {
      const int64_t base = (n * channels + c) * spatial;
      for (int64_t s = 0; s < spatial; ++s) {
        const T xh = (xd[base + s] - mean_c[c]) * rstd_c[c];
        xhat[base + s] = xh;
        out[base + s] = gd[c] * xh + bd[c];
      }
    }

  return make_op_node<T>("batchnorm", input.shape(), std::move(out), {input, gamma, beta},
                         [xhat = std::move(xhat), rstd_c = std::move(rstd_c), batch, channels,
                          spatial, m, training](NodeT<T>& self) {
    auto& pin = *self.parents[0];
    auto& pg = *self.parents[1];
    auto& pb = *self.parents[2];
    for (int64_t c = 0; c < channels; ++c) {
      T sum_g = T(0), sum_gx = T(0);
      for (int64_t n = 0; n < batch; ++n) {
        const int64_t base = (n * channels + c) * spatial;
        for (int64_t s = 0; s < spatial; ++s) {
          sum_g += self.grad[base + s];
          sum_gx += self.grad[base + s] * xhat[base + s];
        }
      }
      if (pg.requires_grad) pg.grad[c] += sum_gx;
      if (pb.requires_grad) pb.grad[c] += sum_g;
      if (pin.requires_grad) {
        const T gamma_c = pg.values[c];
        if (training) {
          const T scale = gamma_c * rstd_c[c] / static_cast<T>(m);
          for (int64_t n = 0; n < batch; ++n) {
            const int64_t base = (n * channels + c) * spatial;
            for (int64_t s = 0; s < spatial; ++s)
              pin.grad[base + s] += scale * (static_cast<T>(m) * self.grad[base + s] - sum_g -
                                             xhat[base + s] * sum_gx);
          }
        } else {
          const T scale = gamma_c * rstd_c[c];
          for (int64_t n = 0; n < batch; ++n) {
            const int64_t base = (n * channels + c) * spatial;
            for (int64_t s = 0; s < spatial; ++s) pin.grad[base + s] += scale * self.grad[base + s];
          }
        }
      }
    }
  });
}

#define UCAPS_INSTANTIATE(T)                                                                  \
  template TensorT<T> conv3d<T>(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&,      \
                                int64_t, int64_t, int64_t);                                   \
  template TensorT<T> conv_transpose3d<T>(const TensorT<T>&, const TensorT<T>&, int64_t);     \
  template TensorT<T> batchnorm<T>(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&,   \
                                   BatchNormStats<T>*, bool, T, T);

UCAPS_INSTANTIATE(float)
UCAPS_INSTANTIATE(double)
#undef UCAPS_INSTANTIATE

}  // namespace ucaps
