#pragma once

#include "ucaps/ops.hpp"
#include "ucaps/tensor.hpp"

namespace ucaps {

/// Spatial grid of capsules, layout [N, X, Y, Z, C, A]: C capsule types per
/// voxel, each an A-dimensional vector.
template <typename T>
struct CapsuleGridT {
  TensorT<T> tensor;

  CapsuleGridT() = default;
  explicit CapsuleGridT(TensorT<T> t) : tensor(std::move(t)) {
    if (tensor.ndim() != 6)
      throw ValidationError("CapsuleGrid: tensor must be [N,X,Y,Z,C,A], got " +
                            shape_str(tensor.shape()));
  }

  int64_t types() const { return tensor.dim(4); }
  int64_t caps_dim() const { return tensor.dim(5); }
};

/// Shared transformation weights of a convolutional capsule layer:
/// [Cin, k, k, k, Cout, Aout, Ain], one Aout x Ain vote transform per
/// (input type, kernel offset, output type).
template <typename T>
struct CapsuleConvParamsT {
  TensorT<T> weight;

  CapsuleConvParamsT() = default;
  explicit CapsuleConvParamsT(TensorT<T> w) : weight(std::move(w)) {
    if (weight.ndim() != 7 || weight.dim(1) != weight.dim(2) || weight.dim(2) != weight.dim(3))
      throw ValidationError("CapsuleConvParams: weight must be [Cin,k,k,k,Cout,Aout,Ain]");
  }

  int64_t cin() const { return weight.dim(0); }
  int64_t kernel() const { return weight.dim(1); }
  int64_t cout() const { return weight.dim(4); }
  int64_t aout() const { return weight.dim(5); }
  int64_t ain() const { return weight.dim(6); }
};

/// Norm-compressing nonlinearity along the last axis:
/// (|s|^2 / (1 + |s|^2)) * s / (|s| + eps). Maps into the open unit ball,
/// preserves direction, and fixes the zero vector.
template <typename T>
TensorT<T> squash(const TensorT<T>& s, T eps = T(1e-7));

/// Votes v_{j|i} = W_ij c_i for every output site: each lower capsule in the
/// k^3 window predicts every output type. Weights are shared across space.
/// Result: [N, X', Y', Z', R = Cin*k^3, Cout, Aout]; out-of-bounds window
/// positions contribute zero votes.
template <typename T>
TensorT<T> compute_votes(const CapsuleGridT<T>& input, const CapsuleConvParamsT<T>& params,
                         int64_t stride, int64_t padding);

template <typename T>
struct RoutingResultT {
  TensorT<T> output;        // [..., Cout, Aout]
  TensorT<T> coefficients;  // [..., R, Cout], final-iteration r_ij
};

/// Routing-by-agreement over the trailing (R, J, A) axes of `votes`:
///   b = 0; repeat: r = softmax_j(b); s_j = sum_i r_ij v_{j|i};
///   c_j = squash(s_j); b_ij += <v_{j|i}, c_j> (skipped after the last pass).
/// Every update stays on the autodiff graph; nothing is detached.
template <typename T>
RoutingResultT<T> dynamic_routing(const TensorT<T>& votes, int64_t iterations);

/// compute_votes followed by per-site dynamic routing.
template <typename T>
CapsuleGridT<T> capsule_conv3d(const CapsuleGridT<T>& input, const CapsuleConvParamsT<T>& params,
                               int64_t stride, int64_t padding, int64_t iterations);

/// Two-sided hinge on capsule lengths, mean over sites:
/// sum_k T_k max(0, m+ - l_k)^2 + lambda (1 - T_k) max(0, l_k - m-)^2.
template <typename T>
TensorT<T> margin_loss(const TensorT<T>& lengths, const TensorT<T>& onehot, T m_plus = T(0.9),
                       T m_minus = T(0.1), T lambda = T(0.5));

// Fused routing contractions, exported so the gradient suite can exercise
// them directly.

/// s[l,j,a] = sum_r r[l,r,j] * votes[l,r,j,a]
template <typename T>
TensorT<T> weighted_vote_sum(const TensorT<T>& votes, const TensorT<T>& coefficients);

/// agr[l,r,j] = sum_a votes[l,r,j,a] * caps[l,j,a]
template <typename T>
TensorT<T> vote_agreement(const TensorT<T>& votes, const TensorT<T>& caps);

}  // namespace ucaps
