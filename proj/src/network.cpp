#include "ucaps/network.hpp"

#include <算lgorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "json_util.hpp"

namespace ucaps {

void NetworkConfig::validate() const {
  if (in_channels < 1) throw ValidationError("config: in_channels must be >= 1");
  if (num_classes < 2) throw ValidationError("config: num_classes must be >= 2");
  if (feature_channels.empty()) throw ValidationError("config: feature_channels must be non-empty");
  if (use_feature_extractor) {
    if (feature_dilations.size() != feature_channels.size())
      throw ValidationError("config: feature_dilations must match feature_channels");
    if (feature_kernel < 1 || feature_kernel % 2 == 0)
      throw ValidationError("config: feature_kernel must be odd for same-size padding");
    for (int64_t d : feature_dilations)
      if (d < 1) throw ValidationError("config: feature dilation must be >= 1");
  }
  const size_t layers = capsule_types.size();
  if (layers == 0) throw ValidationError("config: at least one capsule layer required");
  if (capsule_dims.size() != layers || capsule_strides.size() != layers)
    throw ValidationError("config: capsule_types/dims/strides must have equal length");
  if (capsule_types.back() != num_classes)
    throw ValidationError("config: last capsule type count must equal num_classes");
  if (capsule_kernel < 1 || capsule_kernel % 2 == 0)
    throw ValidationError("config: capsule_kernel must be odd for same-size padding");
  for (size_t i = 0; i < layers; ++i) {
    if (capsule_types[i] < 1 || capsule_dims[i] < 1)
      throw ValidationError("config: capsule types/dims must be >= 1");
    if (capsule_strides[i] != 1 && capsule_strides[i] != 2)
      throw ValidationError("config: capsule strides must be 1 or 2");
  }
  if (routing_iterations < 1) throw ValidationError("config: routing_iterations must be >= 1");
  if (static_cast<int64_t>(decoder_channels.size()) != num_levels())
    throw ValidationError("config: decoder_channels must have one entry per stride-2 stage");
  for (int64_t c : decoder_channels)
    if (c < 1) throw ValidationError("config: decoder channels must be >= 1");
  if (w_ce < 0 || w_margin < 0 || w_reconstruction < 0)
    throw ValidationError("config: loss weights must be >= 0");
  if (squash_eps <= 0) throw ValidationError("config: squash_eps must be > 0");
}

int64_t NetworkConfig::num_levels() const {
  int64_t levels = 0;
  for (int64_t s : capsule_strides)
    if (s == 2) ++levels;
  return levels;
}

int64_t NetworkConfig::downsample_factor() const {
  int64_t f = 1;
  for (int64_t l = 0; l < num_levels(); ++l) f *= 2;
  return f;
}

NetworkConfig NetworkConfig::reduced(int64_t num_classes) {
  NetworkConfig cfg;
  cfg.num_classes = num_classes;
  cfg.capsule_types = {4, 4, 4, 2, 2, num_classes};
  cfg.capsule_dims = {2, 4, 4, 8, 8, 16};
  return cfg;
}

namespace {

using detail::json;

json config_to_json_obj(const NetworkConfig& c) {
  json j;
  j["in_channels"] = c.in_channels;
  j["num_classes"] = c.num_classes;
  j["feature_channels"] = c.feature_channels;
  j["feature_kernel"] = c.feature_kernel;
  j["feature_dilations"] = c.feature_dilations;
  j["capsule_types"] = c.capsule_types;
  j["capsule_dims"] = c.capsule_dims;
  j["capsule_kernel"] = c.capsule_kernel;
  j["capsule_strides"] = c.capsule_strides;
  j["routing_iterations"] = c.routing_iterations;
  j["decoder_channels"] = c.decoder_channels;
  j["use_feature_extractor"] = c.use_feature_extractor;
  j["use_margin_loss"] = c.use_margin_loss;
  j["use_reconstruction"] = c.use_reconstruction;
  j["loss_weights"] = {{"ce", c.w_ce}, {"margin", c.w_margin}, {"reconstruction", c.w_reconstruction}};
  j["margin_m_plus"] = c.margin_m_plus;
  j["margin_m_minus"] = c.margin_m_minus;
  j["margin_lambda"] = c.margin_lambda;
  j["squash_eps"] = c.squash_eps;
  return j;
}

NetworkConfig config_from_json_obj(const json& j) {
  detail::require_keys(j,
                       {"in_channels", "num_classes", "feature_channels", "feature_kernel",
                        "feature_dilations", "capsule_types", "capsule_dims", "capsule_kernel",
                        "capsule_strides", "routing_iterations", "decoder_channels",
                        "use_feature_extractor", "use_margin_loss", "use_reconstruction",
                        "loss_weights", "margin_m_plus", "margin_m_minus", "margin_lambda",
                        "squash_eps"},
                       "network config");
  NetworkConfig c;
  c.in_channels = j.value("in_channels", c.in_channels);
  c.num_classes = j.value("num_classes", c.num_classes);
  c.feature_channels = detail::get_vector<int64_t>(j, "feature_channels", c.feature_channels);
  c.feature_kernel = j.value("feature_kernel", c.feature_kernel);
  c.feature_dilations = detail::get_vector<int64_t>(j, "feature_dilations", c.feature_dilations);
  c.capsule_types = detail::get_vector<int64_t>(j, "capsule_types", c.capsule_types);
  c.capsule_dims = detail::get_vector<int64_t>(j, "capsule_dims", c.capsule_dims);
  c.capsule_kernel = j.value("capsule_kernel", c.capsule_kernel);
  c.capsule_strides = detail::get_vector<int64_t>(j, "capsule_strides", c.capsule_strides);
  c.routing_iterations = j.value("routing_iterations", c.routing_iterations);
  c.decoder_channels = detail::get_vector<int64_t>(j, "decoder_channels", c.decoder_channels);
  c.use_feature_extractor = j.value("use_feature_extractor", c.use_feature_extractor);
  c.use_margin_loss = j.value("use_margin_loss", c.use_margin_loss);
  c.use_reconstruction = j.value("use_reconstruction", c.use_reconstruction);
  if (j.contains("loss_weights")) {
    const json& w = j.at("loss_weights");
    detail::require_keys(w, {"ce", "margin", "reconstruction"}, "loss_weights");
    c.w_ce = w.value("ce", c.w_ce);
    c.w_margin = w.value("margin", c.w_margin);
    c.w_reconstruction = w.value("reconstruction", c.w_reconstruction);
  }
  c.margin_m_plus = j.value("margin_m_plus", c.margin_m_plus);
  c.margin_m_minus = j.value("margin_m_minus", c.margin_m_minus);
  c.margin_lambda = j.value("margin_lambda", c.margin_lambda);
  c.squash_eps = j.value("squash_eps", c.squash_eps);
  c.validate();
  return c;
}

template <typename T>
TensorT<T> he_init(Shape shape, int64_t fan_in, Rng& rng) {
  const T stddev = static_cast<T>(std::sqrt(2.0 / static_cast<double>(fan_in)));
  return TensorT<T>::randn(std::move(shape), rng, stddev, /*requires_grad=*/true);
}

template <typename T>
Conv3dLayerT<T> make_conv(int64_t cin, int64_t cout, int64_t k, int64_t stride, int64_t dilation,
                          int64_t padding, Rng& rng) {
  Conv3dLayerT<T> layer;
  layer.weight = he_init<T>({cout, cin, k, k, k}, cin * k * k * k, rng);
  layer.bias = TensorT<T>::zeros({cout}, /*requires_grad=*/true);
  layer.stride = stride;
  layer.dilation = dilation;
  layer.padding = padding;
  return layer;
}

/// [N,X,Y,Z,C,A] capsule grid viewed as a [N,C*A,X,Y,Z] channel tensor.
template <typename T>
TensorT<T> grid_to_channels(const CapsuleGridT<T>& grid) {
  const Shape& s = grid.tensor.shape();
  TensorT<T> flat = reshape(grid.tensor, {s[0], s[1], s[2], s[3], s[4] * s[5]});
  return permute(flat, {0, 4, 1, 2, 3});
}

}  // namespace

std::string NetworkConfig::to_json() const { return config_to_json_obj(*this).dump(2); }

NetworkConfig NetworkConfig::from_json(const std::string& json_text) {
  json j = json::parse(json_text, nullptr, /*allow_exceptions=*/false);
  if (j.is_discarded()) throw ValidationError("network config: invalid JSON");
  return config_from_json_obj(j);
}

template <typename T>
NetworkT<T>::NetworkT(NetworkConfig config, uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  Rng rng(seed);
  const NetworkConfig& c = config_;

  const int64_t primary_dim = c.feature_channels.back();
  if (c.use_feature_extractor) {
    int64_t cin = c.in_channels;
    for (size_t i = 0; i < c.feature_channels.size(); ++i) {
      const int64_t dil = c.feature_dilations[i];
      const int64_t pad = dil * (c.feature_kernel - 1) / 2;  // same-size output
      feature_layers_.push_back(
          make_conv<T>(cin, c.feature_channels[i], c.feature_kernel, 1, dil, pad, rng));
      cin = c.feature_channels[i];
    }
  } else {
    // Table-2 "without feature extractor": one 1x1x1 conv into capsule space.
    feature_layers_.push_back(make_conv<T>(c.in_channels, primary_dim, 1, 1, 1, 0, rng));
  }

  int64_t types = 1;
  int64_t dims = primary_dim;
  const int64_t k = c.capsule_kernel;
  for (size_t i = 0; i < c.capsule_types.size(); ++i) {
    CapsuleLayerT<T> layer;
    const int64_t cout = c.capsule_types[i];
    const int64_t aout = c.capsule_dims[i];
    layer.params = CapsuleConvParamsT<T>(
        he_init<T>({types, k, k, k, cout, aout, dims}, types * k * k * k * dims, rng));
    layer.stride = c.capsule_strides[i];
    layer.padding = (k - 1) / 2;
    capsule_layers_.push_back(std::move(layer));
    types = cout;
    dims = aout;
  }

  int64_t channels = types * dims;
  // skip channel counts at each recorded resolution, encoder order
  std::vector<int64_t> skip_channels;
  {
    int64_t st = 1, sd = primary_dim;
    for (size_t i = 0; i < c.capsule_types.size(); ++i) {
      if (c.capsule_strides[i] == 2) skip_channels.push_back(st * sd);
      st = c.capsule_types[i];
      sd = c.capsule_dims[i];
    }
  }
  for (int64_t l = 0; l < c.num_levels(); ++l) {
    DecoderLevelT<T> level;
    const int64_t cout = c.decoder_channels[l];
    level.deconv_weight = he_init<T>({channels, cout, 2, 2, 2}, channels, rng);
    const int64_t skip = skip_channels[skip_channels.size() - 1 - l];
    level.conv = make_conv<T>(cout + skip, cout, 3, 1, 1, 1, rng);
    level.bn.gamma = TensorT<T>::full({cout}, T(1), /*requires_grad=*/true);
    level.bn.beta = TensorT<T>::zeros({cout}, /*requires_grad=*/true);
    level.bn.stats.mean.assign(cout, T(0));
    level.bn.stats.var.assign(cout, T(1));
    decoder_.push_back(std::move(level));
    channels = cout;
  }
  logits_conv_ = make_conv<T>(channels, c.num_classes, 1, 1, 1, 0, rng);
  if (c.use_reconstruction) {
    recon_layers_.push_back(make_conv<T>(channels, channels, 1, 1, 1, 0, rng));
    recon_layers_.push_back(make_conv<T>(channels, c.in_channels, 1, 1, 1, 0, rng));
  }
}

template <typename T>
NetworkOutputT<T> NetworkT<T>::forward(const TensorT<T>& input, bool training) {
  if (input.ndim() != 5)
    throw ValidationError("forward: input must be [N,Cin,X,Y,Z]");
  if (input.dim(1) != config_.in_channels)
    throw ValidationError("forward: expected " + std::to_string(config_.in_channels) +
                          " input channels, got " + std::to_string(input.dim(1)));
  const int64_t factor = config_.downsample_factor();
  for (int64_t axis = 2; axis < 5; ++axis)
    if (input.dim(axis) % factor != 0)
      throw ValidationError("forward: spatial extents must be multiples of " +
                            std::to_string(factor) + ", got " + shape_str(input.shape()));

  TensorT<T> x = input;
  for (auto& layer : feature_layers_) x = relu(layer(x));

  const Shape& fs = x.shape();
  CapsuleGridT<T> grid(reshape(permute(x, {0, 2, 3, 4, 1}), {fs[0], fs[2], fs[3], fs[4], 1, fs[1]}));

  std::vector<TensorT<T>> skips;
  for (auto& layer : capsule_layers_) {
    if (layer.stride == 2) skips.push_back(grid_to_channels(grid));
    grid = capsule_conv3d(grid, layer.params, layer.stride, layer.padding,
                          config_.routing_iterations);
  }

  TensorT<T> lengths = norm_along(grid.tensor, 5);

  x = grid_to_channels(grid);
  const int64_t levels = config_.num_levels();
  for (int64_t l = 0; l < levels; ++l) {
    auto& level = decoder_[l];
    x = conv_transpose3d(x, level.deconv_weight, 2);
    x = concat<T>({x, skips[static_cast<size_t>(levels - 1 - l)]}, 1);
    x = relu(level.bn(level.conv(x), training));
  }

  NetworkOutputT<T> out;
  out.logits = logits_conv_(x);
  out.capsule_lengths = std::move(lengths);
  if (config_.use_reconstruction) {
    TensorT<T> h = relu(recon_layers_[0](x));
    out.reconstruction = sigmoid(recon_layers_[1](h));
  }
  return out;
}

template <typename T>
std::vector<std::pair<std::string, TensorT<T>>> NetworkT<T>::named_parameters() {
  std::vector<std::pair<std::string, TensorT<T>>> params;
  for (size_t i = 0; i < feature_layers_.size(); ++i) {
    params.emplace_back("fe." + std::to_string(i) + ".weight", feature_layers_[i].weight);
    params.emplace_back("fe." + std::to_string(i) + ".bias", feature_layers_[i].bias);
  }
  for (size_t i = 0; i < capsule_layers_.size(); ++i)
    params.emplace_back("caps." + std::to_string(i) + ".weight", capsule_layers_[i].params.weight);
  for (size_t i = 0; i < decoder_.size(); ++i) {
    const std::string p = "dec." + std::to_string(i) + ".";
    params.emplace_back(p + "deconv.weight", decoder_[i].deconv_weight);
    params.emplace_back(p + "conv.weight", decoder_[i].conv.weight);
    params.emplace_back(p + "conv.bias", decoder_[i].conv.bias);
    params.emplace_back(p + "bn.gamma", decoder_[i].bn.gamma);
    params.emplace_back(p + "bn.beta", decoder_[i].bn.beta);
  }
  params.emplace_back("head.logits.weight", logits_conv_.weight);
  params.emplace_back("head.logits.bias", logits_conv_.bias);
  for (size_t i = 0; i < recon_layers_.size(); ++i) {
    params.emplace_back("recon." + std::to_string(i) + ".weight", recon_layers_[i].weight);
    params.emplace_back("recon." + std::to_string(i) + ".bias", recon_layers_[i].bias);
  }
  return params;
}

template <typename T>
std::vector<std::pair<std::string, std::vector<T>*>> NetworkT<T>::named_buffers() {
  std::vector<std::pair<std::string, std::vector<T>*>> buffers;
  for (size_t i = 0; i < decoder_.size(); ++i) {
    const std::string p = "dec." + std::to_string(i) + ".bn.";
    buffers.emplace_back(p + "running_mean", &decoder_[i].bn.stats.mean);
    buffers.emplace_back(p + "running_var", &decoder_[i].bn.stats.var);
  }
  return buffers;
}

template <typename T>
int64_t NetworkT<T>::parameter_count() {
  int64_t total = 0;
  for (auto& [name, tensor] : named_parameters()) total += tensor.numel();
  return total;
}

template <typename T>
int64_t NetworkT<T>::depth() const {
  return static_cast<int64_t>(feature_layers_.size()) +
         static_cast<int64_t>(capsule_layers_.size()) +
         2 * static_cast<int64_t>(decoder_.size()) + 1 +
         static_cast<int64_t>(recon_layers_.size());
}

namespace {
constexpr uint32_t kCheckpointVersion = 1;

void write_u32(std::ostream& out, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t read_u32(std::istream& in, const char* what) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw IoError(std::string("checkpoint: truncated ") + what);
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}
}  // namespace

template <typename T>
void save_checkpoint(NetworkT<T>& net, const std::string& path) {
  json manifest = json::array();
  std::vector<float> payload;
  auto append = [&](const std::string& name, const Shape& shape, std::span<const T> values) {
    json entry;
    entry["name"] = name;
    entry["shape"] = shape;
    entry["offset"] = payload.size() * sizeof(float);
    entry["count"] = values.size();
    manifest.push_back(entry);
    for (T v : values) payload.push_back(static_cast<float>(v));
  };
  for (auto& [name, tensor] : net.named_parameters()) append(name, tensor.shape(), tensor.data());
  for (auto& [name, buffer] : net.named_buffers())
    append(name, Shape{static_cast<int64_t>(buffer->size())}, *buffer);

  json meta;
  meta["config"] = json::parse(net.config().to_json());
  meta["tensors"] = std::move(manifest);
  const std::string meta_text = meta.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("checkpoint: cannot open for writing: " + path);
  out.write("UCAP", 4);
  write_u32(out, kCheckpointVersion);
  write_u32(out, static_cast<uint32_t>(meta_text.size()));
  out.write(meta_text.data(), static_cast<std::streamsize>(meta_text.size()));
  out.write(reinterpret_cast<const char*>(payload.data()),
            static_cast<std::streamsize>(payload.size() * sizeof(float)));
  if (!out) throw IoError("checkpoint: write failed: " + path);
}

template <typename T>
NetworkT<T> load_checkpoint_as(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("checkpoint: cannot open: " + path);
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "UCAP", 4) != 0)
    throw IoError("checkpoint: bad magic in " + path);
  const uint32_t version = read_u32(in, "version");
  if (version != kCheckpointVersion)
    throw IoError("checkpoint: unsupported format version " + std::to_string(version));
  const uint32_t meta_len = read_u32(in, "header length");
  if (meta_len == 0) throw IoError("checkpoint: empty header");
  std::string meta_text(meta_len, '\0');
  if (!in.read(meta_text.data(), meta_len)) throw IoError("checkpoint: truncated metadata");
  json meta = json::parse(meta_text, nullptr, false);
  if (meta.is_discarded()) throw IoError("checkpoint: corrupt metadata JSON");

  NetworkConfig config = NetworkConfig::from_json(meta.at("config").dump());
  NetworkT<T> net(config, /*seed=*/0);

  std::vector<char> payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  auto fill = [&](const std::string& name, std::span<T> dst) {
    for (const auto& entry : meta.at("tensors")) {
      if (entry.at("name") != name) continue;
      const size_t offset = entry.at("offset").get<size_t>();
      const size_t count = entry.at("count").get<size_t>();
      if (count != dst.size())
        throw IoError("checkpoint: tensor '" + name + "' size mismatch");
      if (offset + count * sizeof(float) > payload.size())
        throw IoError("checkpoint: truncated payload for tensor '" + name + "'");
      const float* src = reinterpret_cast<const float*>(payload.data() + offset);
      for (size_t i = 0; i < count; ++i) dst[i] = static_cast<T>(src[i]);
      return;
    }
    throw IoError("checkpoint: missing tensor '" + name + "'");
  };
  for (auto& [name, tensor] : net.named_parameters()) fill(name, tensor.mutable_data());
  for (auto& [name, buffer] : net.named_buffers()) fill(name, *buffer);
  return net;
}

Network load_checkpoint(const std::string& path) { return load_checkpoint_as<float>(path); }

template class NetworkT<float>;
template class NetworkT<double>;
template void save_checkpoint<float>(NetworkT<float>&, const std::string&);
template void save_checkpoint<double>(NetworkT<double>&, const std::string&);
template NetworkT<float> load_checkpoint_as<float>(const std::string&);
template NetworkT<double> load_checkpoint_as<double>(const std::string&);

}  // namespace ucaps
