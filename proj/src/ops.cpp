#include "ucaps/ops.hpp"

#include <algorithm>
#include <cmath>

namespace ucaps {

using detail::NodeT;
using detail::make_op_node;

namespace {

template <typename T>
void require_same_shape(const TensorT<T>& a, const TensorT<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw ValidationError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                          " vs " + shape_str(b.shape()));
}

int64_t normalize_axis(int64_t axis, int64_t ndim, const char* op) {
  if (axis < 0) axis += ndim;
  if (axis < 0 || axis >= ndim)
    throw ValidationError(std::string(op) + ": axis out of range");
  return axis;
}

// outer: product of extents before axis; inner: product after.
struct AxisSplit {
  int64_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_at(const Shape& shape, int64_t axis) {
  AxisSplit s;
  for (int64_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  require_same_shape(a, b, "add");
  std::vector<T> out(a.data().begin(), a.data().end());
  auto bd = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] += bd[i];
  return make_op_node<T>("add", a.shape(), std::move(out), {a, b}, [](NodeT<T>& self) {
    for (int p = 0; p < 2; ++p) {
      auto& parent = *self.parents[p];
      if (!parent.requires_grad) continue;
      for (size_t i = 0; i < self.grad.size(); ++i) parent.grad[i] += self.grad[i];
    }
  });
}

template <typename T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
  require_same_shape(a, b, "sub");
  std::vector<T> out(a.data().begin(), a.data().end());
  auto bd = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] -= bd[i];
  return make_op_node<T>("sub", a.shape(), std::move(out), {a, b}, [](NodeT<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad)
      for (size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
    if (pb.requires_grad)
      for (size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] -= self.grad[i];
  });
}

template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
  require_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  auto ad = a.data();
  auto bd = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
  return make_op_node<T>("mul", a.shape(), std::move(out), {a, b}, [](NodeT<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad)
      for (size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i] * pb.values[i];
    if (pb.requires_grad)
      for (size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] += self.grad[i] * pa.values[i];
  });
}

template <typename T>
TensorT<T> scale(const TensorT<T>& a, T factor) {
  std::vector<T> out(a.numel());
  auto ad = a.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * factor;
  return make_op_node<T>("scale", a.shape(), std::move(out), {a}, [factor](NodeT<T>& self) {
    auto& pa = *self.parents[0];
    for (size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i] * factor;
  });
}

template <typename T>
TensorT<T> relu(const TensorT<T>& a) {
  std::vector<T> out(a.numel());
  auto ad = a.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = ad[i] > T(0) ? ad[i] : T(0);
  return make_op_node<T>("relu", a.shape(), std::move(out), {a}, [](NodeT<T>& self) {
    auto& pa = *self.parents[0];
    for (size_t i = 0; i < self.grad.size(); ++i)
      if (pa.values[i] > T(0)) pa.grad[i] += self.grad[i];
  });
}

template <typename T>
TensorT<T> sigmoid(const TensorT<T>& a) {
  std::vector<T> out(a.numel());
  auto ad = a.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = T(1) / (T(1) + std::exp(-ad[i]));
  return make_op_node<T>("sigmoid", a.shape(), std::move(out), {a}, [](NodeT<T>& self) {
    auto& pa = *self.parents[0];
    for (size_t i = 0; i < self.grad.size(); ++i) {
      const T y = self.values[i];
      pa.grad[i] += self.grad[i] * y * (T(1) - y);
    }
  });
}

template <typename T>
TensorT<T> log_op(const TensorT<T>& a) {
  std::vector<T> out(a.numel());
  auto ad = a.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::log(ad[i]);
  return make_op_node<T>("log", a.shape(), std::move(out), {a}, [](NodeT<T>& self) {
    auto& pa = *self.parents[0];
    for (size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i] / pa.values[i];
  });
}

template <typename T>
TensorT<T> mul_bc(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.ndim() != b.ndim()) throw ValidationError("mul_bc: rank mismatch");
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  for (size_t i = 0; i < as.size(); ++i)
    if (bs[i] != as[i] && bs[i] != 1)
      throw ValidationError("mul_bc: shape " + shape_str(bs) + " not broadcastable to " +
                            shape_str(as));

  const auto b_strides_full = row_major_strides(bs);
  std::vector<int64_t> bstride(as.size());
  for (size_t i = 0; i < as.size(); ++i) bstride[i] = bs[i] == 1 ? 0 : b_strides_full[i];

  const int64_t n = a.numel();
  const int64_t nd = a.ndim();
  std::vector<T> out(n);
  auto ad = a.data();
  auto bd = b.data();
  // odometer walk keeps the b index in sync without per-element division
  std::vector<int64_t> idx(nd, 0);
  int64_t bpos = 0;
  for (int64_t i = 0; i < n; ++i) {
    out[i] = ad[i] * bd[bpos];
    for (int64_t ax = nd - 1; ax >= 0; --ax) {
      if (++idx[ax] < as[ax]) {
        bpos += bstride[ax];
        break;
      }
      bpos -= bstride[ax] * (as[ax] - 1);
      idx[ax] = 0;
    }
  }
  Shape ashape = a.shape();
  auto bstr = bstride;
  return make_op_node<T>("mul_bc", a.shape(), std::move(out), {a, b},
                         [ashape, bstr](NodeT<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    const int64_t nd = static_cast<int64_t>(ashape.size());
    std::vector<int64_t> idx(nd, 0);
    int64_t bpos = 0;
    for (size_t i = 0; i < self.grad.size(); ++i) {
      if (pa.requires_grad) pa.grad[i] += self.grad[i] * pb.values[bpos];
      if (pb.requires_grad) pb.grad[bpos] += self.grad[i] * pa.values[i];
      for (int64_t ax = nd - 1; ax >= 0; --ax) {
        if (++idx[ax] < ashape[ax]) {
          bpos += bstr[ax];
          break;
        }
        bpos -= bstr[ax] * (ashape[ax] - 1);
        idx[ax] = 0;
      }
    }
  });
}

template <typename T>
TensorT<T> reshape(const TensorT<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw ValidationError("reshape: element count mismatch, " + shape_str(a.shape()) + " -> " +
                          shape_str(shape));
  std::vector<T> out(a.data().begin(), a.data().end());
  return make_op_node<T>("reshape", std::move(shape), std::move(out), {a}, [](NodeT<T>& self) {
    auto& pa = *self.parents[0];
    for (size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
  });
}

template <typename T>
TensorT<T> permute(const TensorT<T>& a, const std::vector<int64_t>& perm) {
  const int64_t nd = a.ndim();
  if (static_cast<int64_t>(perm.size()) != nd) throw ValidationError("permute: rank mismatch");
  std::vector<bool> seen(nd, false);
  Shape out_shape(nd);
  for (int64_t i = 0; i < nd; ++i) {
    if (perm[i] < 0 || perm[i] >= nd || seen[perm[i]])
      throw ValidationError("permute: invalid permutation");
    seen[perm[i]] = true;
    out_shape[i] = a.dim(perm[i]);
  }
  const auto in_strides = row_major_strides(a.shape());
  // stride of output axis i in the input buffer
  std::vector<int64_t> gather(nd);
  for (int64_t i = 0; i < nd; ++i) gather[i] = in_strides[perm[i]];

  const int64_t n = a.numel();
  std::vector<T> out(n);
  auto ad = a.data();
  std::vector<int64_t> idx(nd, 0);
  int64_t src = 0;
  for (int64_t i = 0; i < n; ++i) {
    out[i] = ad[src];
    for (int64_t ax = nd - 1; ax >= 0; --ax) {
      if (++idx[ax] < out_shape[ax]) {
        src += gather[ax];
        break;
      }
      src -= gather[ax] * (out_shape[ax] - 1);
      idx[ax] = 0;
    }
  }
  Shape oshape = out_shape;
  return make_op_node<T>("permute", std::move(out_shape), std::move(out), {a},
                         [oshape, gather](NodeT<T>& self) {
    auto& pa = *self.parents[0];
    const int64_t nd = static_cast<int64_t>(oshape.size());
    std::vector<int64_t> idx(nd, 0);
    int64_t src = 0;
    for (size_t i = 0; i < self.grad.size(); ++i) {
      pa.grad[src] += self.grad[i];
      for (int64_t ax = nd - 1; ax >= 0; --ax) {
        if (++idx[ax] < oshape[ax]) {
          src += gather[ax];
          break;
        }
        src -= gather[ax] * (oshape[ax] - 1);
        idx[ax] = 0;
      }
    }
  });
}

template <typename T>
TensorT<T> concat(const std::vector<TensorT<T>>& parts, int64_t axis) {
  if (parts.empty()) throw ValidationError("concat: no inputs");
  const int64_t nd = parts[0].ndim();
  axis = normalize_axis(axis, nd, "concat");
  Shape out_shape = parts[0].shape();
  int64_t total_axis = 0;
  for (const auto& p : parts) {
    if (p.ndim() != nd) throw ValidationError("concat: rank mismatch");
    for (int64_t i = 0; i < nd; ++i)
      if (i != axis && p.dim(i) != out_shape[i])
        throw ValidationError("concat: extent mismatch off the concat axis");
    total_axis += p.dim(axis);
  }
  out_shape[axis] = total_axis;

  const auto sp = split_at(out_shape, axis);
  std::vector<T> out(static_cast<size_t>(shape_numel(out_shape)));
  std::vector<int64_t> offsets(parts.size());
  int64_t offset = 0;
  for (size_t p = 0; p < parts.size(); ++p) {
    offsets[p] = offset;
    const int64_t ext = parts[p].dim(axis);
    auto pd = parts[p].data();
    for (int64_t o = 0; o < sp.outer; ++o) {
      const T* src = pd.data() + o * ext * sp.inner;
      T* dst = out.data() + (o * total_axis + offset) * sp.inner;
      std::copy(src, src + ext * sp.inner, dst);
    }
    offset += ext;
  }
  std::vector<int64_t> extents(parts.size());
  for (size_t p = 0; p < parts.size(); ++p) extents[p] = parts[p].dim(axis);
  return make_op_node<T>("concat", std::move(out_shape), std::move(out), parts,
                         [sp, offsets, extents, total_axis](NodeT<T>& self) {
    for (size_t p = 0; p < self.parents.size(); ++p) {
      auto& parent = *self.parents[p];
      if (!parent.requires_grad) continue;
      for (int64_t o = 0; o < sp.outer; ++o) {
        const T* src = self.grad.data() + (o * total_axis + offsets[p]) * sp.inner;
        T* dst = parent.grad.data() + o * extents[p] * sp.inner;
        for (int64_t i = 0; i < extents[p] * sp.inner; ++i) dst[i] += src[i];
      }
    }
  });
}

template <typename T>
TensorT<T> sum(const TensorT<T>& a) {
  T total = T(0);
  for (T v : a.data()) total += v;
  return make_op_node<T>("sum", Shape{1}, {total}, {a}, [](NodeT<T>& self) {
    auto& pa = *self.parents[0];
    for (auto& g : pa.grad) g += self.grad[0];
  });
}

template <typename T>
TensorT<T> mean(const TensorT<T>& a) {
  T total = T(0);
  for (T v : a.data()) total += v;
  const T inv = T(1) / static_cast<T>(a.numel());
  return make_op_node<T>("mean", Shape{1}, {total * inv}, {a}, [inv](NodeT<T>& self) {
    auto& pa = *self.parents[0];
    for (auto& g : pa.grad) g += self.grad[0] * inv;
  });
}

template <typename T>
TensorT<T> sum_axis(const TensorT<T>& a, int64_t axis) {
  axis = normalize_axis(axis, a.ndim(), "sum_axis");
  const auto sp = split_at(a.shape(), axis);
  Shape out_shape;
  for (int64_t i = 0; i < a.ndim(); ++i)
    if (i != axis) out_shape.push_back(a.dim(i));
  if (out_shape.empty()) out_shape.push_back(1);

  std::vector<T> out(static_cast<size_t>(sp.outer * sp.inner), T(0));
  auto ad = a.data();
  for (int64_t o = 0; o < sp.outer; ++o)
    for (int64_t e = 0; e < sp.extent; ++e) {
      const T* src = ad.data() + (o * sp.extent + e) * sp.inner;
      T* dst = out.data() + o * sp.inner;
      for (int64_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
    }
  return make_op_node<T>("sum_axis", std::move(out_shape), std::move(out), {a},
                         [sp](NodeT<T>& self) {
    auto& pa = *self.parents[0];
    for (int64_t o = 0; o < sp.outer; ++o)
      for (int64_t e = 0; e < sp.extent; ++e) {
        T* dst = pa.grad.data() + (o * sp.extent + e) * sp.inner;
        const T* src = self.grad.data() + o * sp.inner;
        for (int64_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
      }
  });
}

template <typename T>
TensorT<T> softmax(const TensorT<T>& a, int64_t axis) {
  axis = normalize_axis(axis, a.ndim(), "softmax");
  const auto sp = split_at(a.shape(), axis);
  std::vector<T> out(a.numel());
  auto ad = a.data();
  for (int64_t o = 0; o < sp.outer; ++o)
    for (int64_t i = 0; i < sp.inner; ++i) {
      const int64_t base = o * sp.extent * sp.inner + i;
      T max_v = ad[base];
      for (int64_t e = 1; e < sp.extent; ++e)
        max_v = std::max(max_v, ad[base + e * sp.inner]);
      T denom = T(0);
      for (int64_t e = 0; e < sp.extent; ++e) {
        const T v = std::exp(ad[base + e * sp.inner] - max_v);
        out[base + e * sp.inner] = v;
        denom += v;
      }
      const T inv = T(1) / denom;
      for (int64_t e = 0; e < sp.extent; ++e) out[base + e * sp.inner] *= inv;
    }
  return make_op_node<T>("softmax", a.shape(), std::move(out), {a}, [sp](NodeT<T>& self) {
    auto& pa = *self.parents[0];
    for (int64_t o = 0; o < sp.outer; ++o)
      for (int64_t i = 0; i < sp.inner; ++i) {
        const int64_t base = o * sp.extent * sp.inner + i;
        T dot = T(0);
        for (int64_t e = 0; e < sp.extent; ++e) {
          const int64_t idx = base + e * sp.inner;
          dot += self.grad[idx] * self.values[idx];
        }
        for (int64_t e = 0; e < sp.extent; ++e) {
          const int64_t idx = base + e * sp.inner;
          pa.grad[idx] += self.values[idx] * (self.grad[idx] - dot);
        }
      }
  });
}

template <typename T>
TensorT<T> norm_along(const TensorT<T>& a, int64_t axis) {
  axis = normalize_axis(axis, a.ndim(), "norm_along");
  const auto sp = split_at(a.shape(), axis);
  Shape out_shape;
  for (int64_t i = 0; i < a.ndim(); ++i)
    if (i != axis) out_shape.push_back(a.dim(i));
  if (out_shape.empty()) out_shape.push_back(1);

  std::vector<T> out(static_cast<size_t>(sp.outer * sp.inner));
  auto ad = a.data();
  for (int64_t o = 0; o < sp.outer; ++o)
    for (int64_t i = 0; i < sp.inner; ++i) {
      T acc = T(0);
      for (int64_t e = 0; e < sp.extent; ++e) {
        const T v = ad[(o * sp.extent + e) * sp.inner + i];
        acc += v * v;
      }
      out[o * sp.inner + i] = std::sqrt(acc);
    }
  return make_op_node<T>("norm_along", std::move(out_shape), std::move(out), {a},
                         [sp](NodeT<T>& self) {
    auto& pa = *self.parents[0];
    for (int64_t o = 0; o < sp.outer; ++o)
      for (int64_t i = 0; i < sp.inner; ++i) {
        const T n = self.values[o * sp.inner + i];
        if (n <= T(0)) continue;  // zero-vector subgradient
        const T g = self.grad[o * sp.inner + i] / n;
        for (int64_t e = 0; e < sp.extent; ++e) {
          const int64_t idx = (o * sp.extent + e) * sp.inner + i;
          pa.grad[idx] += g * pa.values[idx];
        }
      }
  });
}

template <typename T>
TensorT<T> mse(const TensorT<T>& a, const TensorT<T>& b) {
  require_same_shape(a, b, "mse");
  auto ad = a.data();
  auto bd = b.data();
  T acc = T(0);
  for (size_t i = 0; i < ad.size(); ++i) {
    const T d = ad[i] - bd[i];
    acc += d * d;
  }
  const T inv = T(1) / static_cast<T>(a.numel());
  return make_op_node<T>("mse", Shape{1}, {acc * inv}, {a, b}, [inv](NodeT<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    const T g = self.grad[0] * T(2) * inv;
    for (size_t i = 0; i < pa.values.size(); ++i) {
      const T d = g * (pa.values[i] - pb.values[i]);
      if (pa.requires_grad) pa.grad[i] += d;
      if (pb.requires_grad) pb.grad[i] -= d;
    }
  });
}

#define UCAPS_INSTANTIATE(T)                                                            \
  template TensorT<T> add<T>(const TensorT<T>&, const TensorT<T>&);                     \
  template TensorT<T> sub<T>(const TensorT<T>&, const TensorT<T>&);                     \
  template TensorT<T> mul<T>(const TensorT<T>&, const TensorT<T>&);                     \
  template TensorT<T> scale<T>(const TensorT<T>&, T);                                   \
  template TensorT<T> relu<T>(const TensorT<T>&);                                       \
  template TensorT<T> sigmoid<T>(const TensorT<T>&);                                    \
  template TensorT<T> log_op<T>(const TensorT<T>&);                                     \
  template TensorT<T> mul_bc<T>(const TensorT<T>&, const TensorT<T>&);                  \
  template TensorT<T> reshape<T>(const TensorT<T>&, Shape);                             \
  template TensorT<T> permute<T>(const TensorT<T>&, const std::vector<int64_t>&);       \
  template TensorT<T> concat<T>(const std::vector<TensorT<T>>&, int64_t);               \
  template TensorT<T> sum<T>(const TensorT<T>&);                                        \
  template TensorT<T> mean<T>(const TensorT<T>&);                                       \
  template TensorT<T> sum_axis<T>(const TensorT<T>&, int64_t);                          \
  template TensorT<T> softmax<T>(const TensorT<T>&, int64_t);                           \
  template TensorT<T> norm_along<T>(const TensorT<T>&, int64_t);                        \
  template TensorT<T> mse<T>(const TensorT<T>&, const TensorT<T>&);

UCAPS_INSTANTIATE(float)
UCAPS_INSTANTIATE(double)
#undef UCAPS_INSTANTIATE

}  // namespace ucaps
