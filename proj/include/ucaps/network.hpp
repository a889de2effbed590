#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ucaps/capsule.hpp"
#include "ucaps/ops.hpp"
#include "ucaps/tensor.hpp"

namespace ucaps {

/// Full architecture + loss configuration. Drives construction, the
/// ablation switches and the parameter audit.
struct NetworkConfig {
  int64_t in_channels = 1;
  int64_t num_classes = 4;

  // visual feature extractor; last entry is the primary capsule dimension
  std::vector<int64_t> feature_channels{16, 32, 64};
  int64_t feature_kernel = 5;
  std::vector<int64_t> feature_dilations{1, 3, 3};

  // capsule encoder
  std::vector<int64_t> capsule_types{16, 16, 16, 8, 8, 8};
  std::vector<int64_t> capsule_dims{4, 8, 8, 16, 16, 32};
  int64_t capsule_kernel = 3;
  std::vector<int64_t> capsule_strides{1, 2, 1, 2, 1, 2};
  int64_t routing_iterations = 3;

  // convolutional decoder, coarsest level first
  std::vector<int64_t> decoder_channels{96, 64, 64};

  // ablation switches
  bool use_feature_extractor = true;
  bool use_margin_loss = true;
  bool use_reconstruction = true;

  // loss weights and margin-loss constants
  double w_ce = 1.0;
  double w_margin = 1.0;
  double w_reconstruction = 0.005;
  double margin_m_plus = 0.9;
  double margin_m_minus = 0.1;
  double margin_lambda = 0.5;
  double squash_eps = 1e-7;

  void validate() const;
  int64_t downsample_factor() const;  // 2^(# stride-2 capsule layers)
  int64_t num_levels() const;

  std::string to_json() const;
  static NetworkConfig from_json(const std::string& json_text);

  /// A5/A6 reduced desk-scale variant: capsule types (4,4,4,2,2,K), dims halved.
  static NetworkConfig reduced(int64_t num_classes = 4);
};

template <typename T>
struct NetworkOutputT {
  TensorT<T> logits;                      // [N, K, X, Y, Z]
  TensorT<T> capsule_lengths;             // [N, X/f, Y/f, Z/f, K]
  std::optional<TensorT<T>> reconstruction;  // [N, Cin, X, Y, Z]
};

template <typename T>
struct Conv3dLayerT {
  TensorT<T> weight, bias;
  int64_t stride = 1, dilation = 1, padding = 0;

  TensorT<T> operator()(const TensorT<T>& x) const {
    return conv3d(x, weight, bias, stride, dilation, padding);
  }
};

template <typename T>
struct BatchNormLayerT {
  TensorT<T> gamma, beta;
  BatchNormStats<T> stats;

  TensorT<T> operator()(const TensorT<T>& x, bool training) {
    return batchnorm(x, gamma, beta, &stats, training);
  }
};

template <typename T>
struct CapsuleLayerT {
  CapsuleConvParamsT<T> params;
  int64_t stride = 1, padding = 0;
};

template <typename T>
struct DecoderLevelT {
  TensorT<T> deconv_weight;  // [Cin, Cout, 2, 2, 2]
  Conv3dLayerT<T> conv;
  BatchNormLayerT<T> bn;
};

/// The 3D-UCaps network: dilated feature extractor, convolutional-capsule
/// encoder with dynamic routing, 3D-Unet-style convolutional decoder with
/// capsule-grid skip connections, plus an optional reconstruction head.
template <typename T>
class NetworkT {
 public:
  NetworkT(NetworkConfig config, uint64_t seed);

  NetworkOutputT<T> forward(const TensorT<T>& input, bool training = false);

  /// Trainable tensors in declaration order, with stable names.
  std::vector<std::pair<std::string, TensorT<T>>> named_parameters();
  /// Non-trainable buffers (batchnorm running stats).
  std::vector<std::pair<std::string, std::vector<T>*>> named_buffers();

  int64_t parameter_count();
  /// Number of weight-bearing conv / capsule / deconv layers.
  int64_t depth() const;

  const NetworkConfig& config() const { return config_; }

 private:
  NetworkConfig config_;
  std::vector<Conv3dLayerT<T>> feature_layers_;
  std::vector<CapsuleLayerT<T>> capsule_layers_;
  std::vector<DecoderLevelT<T>> decoder_;
  Conv3dLayerT<T> logits_conv_;
  std::vector<Conv3dLayerT<T>> recon_layers_;
};

using Network = NetworkT<float>;

/// Checkpoint file: magic "UCAP", u32 format version, u32 JSON length,
/// JSON metadata (config + tensor manifest), raw little-endian f32 payload.
/// Round-trips bit-exactly for float networks.
template <typename T>
void save_checkpoint(NetworkT<T>& net, const std::string& path);

template <typename T>
NetworkT<T> load_checkpoint_as(const std::string& path);

Network load_checkpoint(const std::string& path);

}  // namespace ucaps
