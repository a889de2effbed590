#include "ucaps/capsule.hpp"

#include <cmath>

namespace ucaps {

using detail::NodeT;
using detail::make_op_node;

template <typename T>
TensorT<T> squash(const TensorT<T>& s, T eps) {
  if (eps <= T(0)) throw ValidationError("squash: eps must be > 0");
  const int64_t a_dim = s.dim(s.ndim() - 1);
  const int64_t vectors = s.numel() / a_dim;
  std::vector<T> out(static_cast<size_t>(s.numel()));
  auto sd = s.data();
#pragma omp parallel for schedule(static) if (vectors > 1024)
  for (int64_t v = 0; v < vectors; ++v) {
    const T* src = sd.data() + v * a_dim;
    T* dst = out.data() + v * a_dim;
    T n2 = T(0);
    for (int64_t i = 0; i < a_dim; ++i) n2 += src[i] * src[i];
    const T n = std::sqrt(n2);
    const T g = n2 / ((T(1) + n2) * (n + eps));
    for (int64_t i = 0; i < a_dim; ++i) dst[i] = src[i] * g;
  }
  return make_op_node<T>("squash", s.shape(), std::move(out), {s},
                         [a_dim, vectors, eps](NodeT<T>& self) {
    auto& ps = *self.parents[0];
#pragma omp parallel for schedule(static) if (vectors > 1024)
    for (int64_t v = 0; v < vectors; ++v) {
      const T* src = ps.values.data() + v * a_dim;
      const T* g_out = self.grad.data() + v * a_dim;
      T* g_in = ps.grad.data() + v * a_dim;
      T n2 = T(0), dot = T(0);
      for (int64_t i = 0; i < a_dim; ++i) {
        n2 += src[i] * src[i];
        dot += g_out[i] * src[i];
      }
      const T n = std::sqrt(n2);
      const T den = (T(1) + n2) * (n + eps);
      const T g = n2 / den;
      // d g(n) / dn divided by n, finite as n -> 0
      const T dden = T(2) * n * (n + eps) + (T(1) + n2);
      const T gp_over_n = (T(2) * den - n * dden) / (den * den);
      for (int64_t i = 0; i < a_dim; ++i) g_in[i] += g * g_out[i] + gp_over_n * dot * src[i];
    }
  });
}

namespace {

struct CapsGeom {
  int64_t k = 1, stride = 1, padding = 0;
  int64_t in[3] = {0, 0, 0};
  int64_t out[3] = {0, 0, 0};
  int64_t taps() const { return k * k * k; }
};

CapsGeom caps_geom(const Shape& grid, int64_t k, int64_t stride, int64_t padding) {
  if (k < 1 || stride < 1 || padding < 0)
    throw ValidationError("capsule conv: kernel/stride must be >= 1, padding >= 0");
  CapsGeom g;
  g.k = k;
  g.stride = stride;
  g.padding = padding;
  for (int i = 0; i < 3; ++i) {
    g.in[i] = grid[1 + i];
    g.out[i] = (g.in[i] + 2 * padding - k) / stride + 1;
    if (g.out[i] <= 0)
      throw ValidationError("capsule conv: zero output extent for grid " + shape_str(grid));
  }
  return g;
}

// Gathers capsule windows into col[R][site][Ain]; sites run over
// (n, ox, oy, oz) row-major.
template <typename T>
void caps_im2col(const T* grid, int64_t batch, int64_t cin, int64_t ain, const CapsGeom& g,
                 T* col) {
  const int64_t sites = batch * g.out[0] * g.out[1] * g.out[2];
  const int64_t rows = cin * g.taps();
  const int64_t in_yz = g.in[1] * g.in[2];
#pragma omp parallel for schedule(static) if (rows > 4)
  for (int64_t r = 0; r < rows; ++r) {
    const int64_t ci = r / g.taps();
    const int64_t kidx = r % g.taps();
    const int64_t kx = kidx / (g.k * g.k);
    const int64_t ky = (kidx / g.k) % g.k;
    const int64_t kz = kidx % g.k;
    T* dst = col + r * sites * ain;
    for (int64_t s = 0; s < sites; ++s) {
      const int64_t n = s / (g.out[0] * g.out[1] * g.out[2]);
      const int64_t rem = s % (g.out[0] * g.out[1] * g.out[2]);
      const int64_t ox = rem / (g.out[1] * g.out[2]);
      const int64_t oy = (rem / g.out[2]) % g.out[1];
      const int64_t oz = rem % g.out[2];
      const int64_t ix = ox * g.stride - g.padding + kx;
      const int64_t iy = oy * g.stride - g.padding + ky;
      const int64_t iz = oz * g.stride - g.padding + kz;
      T* out_vec = dst + s * ain;
      if (ix >= 0 && ix < g.in[0] && iy >= 0 && iy < g.in[1] && iz >= 0 && iz < g.in[2]) {
        const T* src =
            grid + (((n * g.in[0] + ix) * g.in[1] + iy) * g.in[2] + iz) * cin * ain + ci * ain;
        for (int64_t a = 0; a < ain; ++a) out_vec[a] = src[a];
      } else {
        for (int64_t a = 0; a < ain; ++a) out_vec[a] = T(0);
      }
    }
  }
}

// Adjoint of caps_im2col: accumulates col gradients back onto the grid
// (gather form over grid voxels).
template <typename T>
void caps_col2im_add(const T* col, int64_t batch, int64_t cin, int64_t ain, const CapsGeom& g,
                     T* grid_grad) {
  const int64_t sites = batch * g.out[0] * g.out[1] * g.out[2];
  const int64_t out_spatial = g.out[0] * g.out[1] * g.out[2];
#pragma omp parallel for schedule(static) collapse(2) if (batch * g.in[0] > 1)
  for (int64_t n = 0; n < batch; ++n)
    for (int64_t ix = 0; ix < g.in[0]; ++ix)
      for (int64_t iy = 0; iy < g.in[1]; ++iy)
        for (int64_t iz = 0; iz < g.in[2]; ++iz)
          for (int64_t ci = 0; ci < cin; ++ci) {
            T* dst = grid_grad +
                     (((n * g.in[0] + ix) * g.in[1] + iy) * g.in[2] + iz) * cin * ain + ci * ain;
            for (int64_t kx = 0; kx < g.k; ++kx) {
              const int64_t tx = ix + g.padding - kx;
              if (tx < 0 || tx % g.stride) continue;
              const int64_t ox = tx / g.stride;
              if (ox >= g.out[0]) continue;
              for (int64_t ky = 0; ky < g.k; ++ky) {
                const int64_t ty = iy + g.padding - ky;
                if (ty < 0 || ty % g.stride) continue;
                const int64_t oy = ty / g.stride;
                if (oy >= g.out[1]) continue;
                for (int64_t kz = 0; kz < g.k; ++kz) {
                  const int64_t tz = iz + g.padding - kz;
                  if (tz < 0 || tz % g.stride) continue;
                  const int64_t oz = tz / g.stride;
                  if (oz >= g.out[2]) continue;
                  const int64_t r = ci * g.taps() + (kx * g.k + ky) * g.k + kz;
                  const int64_t s = n * out_spatial + (ox * g.out[1] + oy) * g.out[2] + oz;
                  const T* src = col + (r * sites + s) * ain;
                  for (int64_t a = 0; a < ain; ++a) dst[a] += src[a];
                }
              }
            }
          }
}

struct RoutingDims {
  int64_t lead = 1, r = 1, j = 1, a = 1;
};

RoutingDims routing_dims(const Shape& votes) {
  if (votes.size() < 3)
    throw ValidationError("routing: votes must be [..., R, Cout, Aout]");
  RoutingDims d;
  const size_t nd = votes.size();
  for (size_t i = 0; i + 3 < nd; ++i) d.lead *= votes[i];
  d.r = votes[nd - 3];
  d.j = votes[nd - 2];
  d.a = votes[nd - 1];
  return d;
}

}  // namespace

template <typename T>
TensorT<T> weighted_vote_sum(const TensorT<T>& votes, const TensorT<T>& coefficients) {
  const RoutingDims d = routing_dims(votes.shape());
  if (coefficients.numel() != d.lead * d.r * d.j)
    throw ValidationError("weighted_vote_sum: coefficient shape mismatch");
  Shape out_shape(votes.shape().begin(), votes.shape().end() - 3);
  out_shape.push_back(d.j);
  out_shape.push_back(d.a);

  std::vector<T> out(static_cast<size_t>(d.lead * d.j * d.a), T(0));
  auto vd = votes.data();
  auto cd = coefficients.data();
#pragma omp parallel for schedule(static) if (d.lead > 256)
  for (int64_t l = 0; l < d.lead; ++l) {
    const T* v = vd.data() + l * d.r * d.j * d.a;
    const T* cf = cd.data() + l * d.r * d.j;
    T* o = out.data() + l * d.j * d.a;
    for (int64_t r = 0; r < d.r; ++r)
      for (int64_t j = 0; j < d.j; ++j) {
        const T w = cf[r * d.j + j];
        const T* vv = v + (r * d.j + j) * d.a;
        T* oo = o + j * d.a;
        for (int64_t a = 0; a < d.a; ++a) oo[a] += w * vv[a];
      }
  }
  return make_op_node<T>("weighted_vote_sum", std::move(out_shape), std::move(out),
                         {votes, coefficients}, [d](NodeT<T>& self) {
    auto& pv = *self.parents[0];
    auto& pc = *self.parents[1];
#pragma omp parallel for schedule(static) if (d.lead > 256)
    for (int64_t l = 0; l < d.lead; ++l) {
      const T* g = self.grad.data() + l * d.j * d.a;
      const int64_t vbase = l * d.r * d.j * d.a;
      const int64_t cbase = l * d.r * d.j;
      for (int64_t r = 0; r < d.r; ++r)
        for (int64_t j = 0; j < d.j; ++j) {
          const int64_t vi = vbase + (r * d.j + j) * d.a;
          const T w = pc.values[cbase + r * d.j + j];
          T dot = T(0);
          for (int64_t a = 0; a < d.a; ++a) {
            if (pv.requires_grad) pv.grad[vi + a] += w * g[j * d.a + a];
            dot += pv.values[vi + a] * g[j * d.a + a];
          }
          if (pc.requires_grad) pc.grad[cbase + r * d.j + j] += dot;
        }
    }
  });
}

template <typename T>
TensorT<T> vote_agreement(const TensorT<T>& votes, const TensorT<T>& caps) {
  const RoutingDims d = routing_dims(votes.shape());
  if (caps.numel() != d.lead * d.j * d.a)
    throw ValidationError("vote_agreement: capsule shape mismatch");
  Shape out_shape(votes.shape().begin(), votes.shape().end() - 1);

  std::vector<T> out(static_cast<size_t>(d.lead * d.r * d.j));
  auto vd = votes.data();
  auto cd = caps.data();
#pragma omp parallel for schedule(static) if (d.lead > 256)
  for (int64_t l = 0; l < d.lead; ++l) {
    const T* v = vd.data() + l * d.r * d.j * d.a;
    const T* cp = cd.data() + l * d.j * d.a;
    T* o = out.data() + l * d.r * d.j;
    for (int64_t r = 0; r < d.r; ++r)
      for (int64_t j = 0; j < d.j; ++j) {
        const T* vv = v + (r * d.j + j) * d.a;
        const T* cc = cp + j * d.a;
        T dot = T(0);
        for (int64_t a = 0; a < d.a; ++a) dot += vv[a] * cc[a];
        o[r * d.j + j] = dot;
      }
  }
  return make_op_node<T>("vote_agreement", std::move(out_shape), std::move(out), {votes, caps},
                         [d](NodeT<T>& self) {
    auto& pv = *self.parents[0];
    auto& pc = *self.parents[1];
#pragma omp parallel for schedule(static) if (d.lead > 256)
    for (int64_t l = 0; l < d.lead; ++l) {
      const T* g = self.grad.data() + l * d.r * d.j;
      const int64_t vbase = l * d.r * d.j * d.a;
      const int64_t cbase = l * d.j * d.a;
      for (int64_t r = 0; r < d.r; ++r)
        for (int64_t j = 0; j < d.j; ++j) {
          const T gg = g[r * d.j + j];
          const int64_t vi = vbase + (r * d.j + j) * d.a;
          for (int64_t a = 0; a < d.a; ++a) {
            if (pv.requires_grad) pv.grad[vi + a] += gg * pc.values[cbase + j * d.a + a];
            if (pc.requires_grad) pc.grad[cbase + j * d.a + a] += gg * pv.values[vi + a];
          }
        }
    }
  });
}

template <typename T>
TensorT<T> compute_votes(const CapsuleGridT<T>& input, const CapsuleConvParamsT<T>& params,
                         int64_t stride, int64_t padding) {
  const TensorT<T>& grid = input.tensor;
  const TensorT<T>& w = params.weight;
  if (params.ain() != input.caps_dim())
    throw ValidationError("compute_votes: input capsule dim " +
                          std::to_string(input.caps_dim()) + " does not match weight Ain " +
                          std::to_string(params.ain()));
  if (params.cin() != input.types())
    throw ValidationError("compute_votes: input capsule types do not match weight Cin");

  const CapsGeom g = caps_geom(grid.shape(), params.kernel(), stride, padding);
  const int64_t batch = grid.dim(0);
  const int64_t cin = params.cin(), ain = params.ain();
  const int64_t cout = params.cout(), aout = params.aout();
  const int64_t R = cin * g.taps();
  const int64_t ja = cout * aout;
  const int64_t sites = batch * g.out[0] * g.out[1] * g.out[2];

  std::vector<T> out(static_cast<size_t>(sites * R * ja));
  {
    std::vector<T> col(static_cast<size_t>(R * sites * ain));
    caps_im2col(grid.data().data(), batch, cin, ain, g, col.data());
    // per window position r: votes[:, r, :, :] = col_r [sites, Ain] * W_r^T [Ain, J*Aout]
    for (int64_t r = 0; r < R; ++r)
      detail::gemm_rm<T>(false, true, sites, ja, ain, col.data() + r * sites * ain, ain,
                         w.data().data() + r * ja * ain, ain, out.data() + r * ja, R * ja, false);
  }

  Shape out_shape{batch, g.out[0], g.out[1], g.out[2], R, cout, aout};
  return make_op_node<T>("compute_votes", std::move(out_shape), std::move(out), {grid, w},
                         [g, batch, cin, ain, cout, aout, R, ja, sites](NodeT<T>& self) {
    auto& pg = *self.parents[0];
    auto& pw = *self.parents[1];
    std::vector<T> col(static_cast<size_t>(R * sites * ain));
    caps_im2col(pg.values.data(), batch, cin, ain, g, col.data());
    if (pw.requires_grad) {
      for (int64_t r = 0; r < R; ++r)
        detail::gemm_rm<T>(true, false, ja, ain, sites, self.grad.data() + r * ja, R * ja,
                           col.data() + r * sites * ain, ain, pw.grad.data() + r * ja * ain, ain,
                           true);
    }
    if (pg.requires_grad) {
      std::vector<T>& gcol = col;  // reuse buffer
      for (int64_t r = 0; r < R; ++r)
        detail::gemm_rm<T>(false, false, sites, ain, ja, self.grad.data() + r * ja, R * ja,
                           pw.values.data() + r * ja * ain, ain, gcol.data() + r * sites * ain,
                           ain, false);
      caps_col2im_add(gcol.data(), batch, cin, ain, g, pg.grad.data());
    }
  });
}

template <typename T>
RoutingResultT<T> dynamic_routing(const TensorT<T>& votes, int64_t iterations) {
  if (iterations < 1) throw ValidationError("dynamic_routing: iterations must be >= 1");
  const RoutingDims d = routing_dims(votes.shape());
  Shape b_shape(votes.shape().begin(), votes.shape().end() - 1);

  // Logits start at exactly zero: uniform coupling on the first pass.
  TensorT<T> b = TensorT<T>::zeros(b_shape);
  TensorT<T> coefficients, caps;
  for (int64_t it = 0; it < iterations; ++it) {
    coefficients = softmax(b, static_cast<int64_t>(b_shape.size()) - 1);
    caps = squash(weighted_vote_sum(votes, coefficients));
    if (it + 1 < iterations) b = add(b, vote_agreement(votes, caps));
  }
  return RoutingResultT<T>{std::move(caps), std::move(coefficients)};
}

template <typename T>
CapsuleGridT<T> capsule_conv3d(const CapsuleGridT<T>& input, const CapsuleConvParamsT<T>& params,
                               int64_t stride, int64_t padding, int64_t iterations) {
  TensorT<T> votes = compute_votes(input, params, stride, padding);
  RoutingResultT<T> routed = dynamic_routing(votes, iterations);
  return CapsuleGridT<T>(std::move(routed.output));
}

template <typename T>
TensorT<T> margin_loss(const TensorT<T>& lengths, const TensorT<T>& onehot, T m_plus, T m_minus,
                       T lambda) {
  if (lengths.shape() != onehot.shape())
    throw ValidationError("margin_loss: lengths/onehot shape mismatch");
  const int64_t classes = lengths.dim(lengths.ndim() - 1);
  const int64_t sites = lengths.numel() / classes;
  auto ld = lengths.data();
  auto td = onehot.data();
  T acc = T(0);
  for (int64_t i = 0; i < lengths.numel(); ++i) {
    const T pos = std::max(T(0), m_plus - ld[i]);
    const T neg = std::max(T(0), ld[i] - m_minus);
    acc += td[i] * pos * pos + lambda * (T(1) - td[i]) * neg * neg;
  }
  const T inv_sites = T(1) / static_cast<T>(sites);
  return make_op_node<T>("margin_loss", Shape{1}, {acc * inv_sites}, {lengths, onehot},
                         [m_plus, m_minus, lambda, inv_sites](NodeT<T>& self) {
    auto& pl = *self.parents[0];
    auto& pt = *self.parents[1];
    const T g = self.grad[0] * inv_sites;
    for (size_t i = 0; i < pl.values.size(); ++i) {
      const T pos = std::max(T(0), m_plus - pl.values[i]);
      const T neg = std::max(T(0), pl.values[i] - m_minus);
      if (pl.requires_grad)
        pl.grad[i] += g * (T(-2) * pt.values[i] * pos +
                           T(2) * lambda * (T(1) - pt.values[i]) * neg);
      if (pt.requires_grad) pt.grad[i] += g * (pos * pos - lambda * neg * neg);
    }
  });
}

#define UCAPS_INSTANTIATE(T)                                                                   \
  template TensorT<T> squash<T>(const TensorT<T>&, T);                                         \
  template TensorT<T> weighted_vote_sum<T>(const TensorT<T>&, const TensorT<T>&);              \
  template TensorT<T> vote_agreement<T>(const TensorT<T>&, const TensorT<T>&);                 \
  template TensorT<T> compute_votes<T>(const CapsuleGridT<T>&, const CapsuleConvParamsT<T>&,   \
                                       int64_t, int64_t);                                      \
  template RoutingResultT<T> dynamic_routing<T>(const TensorT<T>&, int64_t);                   \
  template CapsuleGridT<T> capsule_conv3d<T>(const CapsuleGridT<T>&,                           \
                                             const CapsuleConvParamsT<T>&, int64_t, int64_t,   \
                                             int64_t);                                         \
  template TensorT<T> margin_loss<T>(const TensorT<T>&, const TensorT<T>&, T, T, T);

UCAPS_INSTANTIATE(float)
UCAPS_INSTANTIATE(double)
#undef UCAPS_INSTANTIATE

}  // namespace ucaps
