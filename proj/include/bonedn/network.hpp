#pragma once

// Six-layer 3D denoising CNN. Layers (in-plane × in-plane × axial):
// 5×5×3, 5×5×3, 3×3×1, 3×3×3, 3×3×1, 3×3×3; ReLU after all but the last.
// Receptive field 17×17×9 voxels, so valid-mode inference shrinks each
// (x, y, z) extent by (16, 16, 8).

#include <array>
#include <bit>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "bonedn/common.hpp"
#include "bonedn/conv_kernels.hpp"
#include "bonedn/structmaps.hpp"
#include "bonedn/tensor.hpp"
#include "bonedn/volume.hpp"

namespace bonedn {

using ChannelProfile = std::array<std::size_t, 5>;

inline constexpr ChannelProfile kDefaultChannels{24, 16, 8, 16, 24};
inline constexpr std::size_t kLayerCount = 6;
/// Kernel extents (x, y, z) per layer.
inline constexpr std::array<Index3, kLayerCount> kLayerKernels{
    {{5, 5, 3}, {5, 5, 3}, {3, 3, 1}, {3, 3, 3}, {3, 3, 1}, {3, 3, 3}}};
/// Receptive field (x, y, z).
inline constexpr Index3 kReceptiveField{17, 17, 9};
/// Voxels consumed per side in valid mode (x, y, z).
inline constexpr std::array<int, 3> kBorder{8, 8, 4};

struct LayerSpec {
  Index3 kernel{};  // (x, y, z)
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  bool relu = true;

  std::size_t fan_in() const { return in_channels * kernel[0] * kernel[1] * kernel[2]; }
  std::size_t weight_count() const { return out_channels * fan_in(); }
  std::size_t parameter_count() const { return weight_count() + out_channels; }
  Shape5 weight_shape() const { return {out_channels, in_channels, kernel[2], kernel[1], kernel[0]}; }
  Shape5 bias_shape() const { return {1, out_channels, 1, 1, 1}; }
};

/// Fixed affine map between densities and network units: the network sees
/// (V − offset) / scale and its output is mapped back by y·scale + offset.
struct Normalization {
  double offset = 0.0;
  double scale = 1000.0;
  friend bool operator==(const Normalization&, const Normalization&) = default;
};

inline bool is_valley(const ChannelProfile& c) {
  std::size_t i = 0;
  while (i + 1 < c.size() && c[i + 1] <= c[i]) ++i;
  while (i + 1 < c.size() && c[i + 1] >= c[i]) ++i;
  return i + 1 == c.size();
}

inline std::vector<LayerSpec> layer_specs(const ChannelProfile& channels) {
  std::vector<LayerSpec> specs;
  std::size_t in = 1;
  for (std::size_t l = 0; l < kLayerCount; ++l) {
    const std::size_t out = l + 1 < kLayerCount ? channels[l] : 1;
    specs.push_back({kLayerKernels[l], in, out, l + 1 < kLayerCount});
    in = out;
  }
  return specs;
}

class DenoiserNet {
 public:
  /// Default profile with zero parameters.
  DenoiserNet() : DenoiserNet(kDefaultChannels) {}

  DenoiserNet(ChannelProfile channels, Normalization norm = {})
      : channels_(channels), norm_(norm), layers_(layer_specs(channels)) {
    for (auto c : channels_)
      if (c == 0) throw ArgumentError("channel counts must be positive");
    if (!is_valley(channels_)) throw ArgumentError("channel profile must be valley-shaped");
    if (!(norm_.scale > 0.0) || !std::isfinite(norm_.offset))
      throw ArgumentError("normalization scale must be positive");
    for (const auto& l : layers_) {
      weights_.emplace_back(l.weight_shape());
      biases_.emplace_back(l.bias_shape());
    }
  }

  const ChannelProfile& channels() const { return channels_; }
  const Normalization& normalization() const { return norm_; }
  const std::vector<LayerSpec>& layers() const { return layers_; }
  Tensor5& weights(std::size_t l) { return weights_[l]; }
  const Tensor5& weights(std::size_t l) const { return weights_[l]; }
  Tensor5& bias(std::size_t l) { return biases_[l]; }
  const Tensor5& bias(std::size_t l) const { return biases_[l]; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += l.parameter_count();
    return n;
  }

  /// Parameters in layer order: weights then bias of each layer.
  std::vector<double> flat_parameters() const {
    std::vector<double> out;
    out.reserve(parameter_count());
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      out.insert(out.end(), weights_[l].data().begin(), weights_[l].data().end());
      out.insert(out.end(), biases_[l].data().begin(), biases_[l].data().end());
    }
    return out;
  }

  void set_flat_parameters(std::span<const double> p) {
    if (p.size() != parameter_count()) throw ShapeError("parameter vector length mismatch");
    std::size_t o = 0;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      for (double& w : weights_[l].data()) w = p[o++];
      for (double& b : biases_[l].data()) b = p[o++];
    }
  }

  friend bool operator==(const DenoiserNet& a, const DenoiserNet& b) {
    return a.channels_ == b.channels_ && a.norm_ == b.norm_ && a.weights_ == b.weights_ &&
           a.biases_ == b.biases_;
  }

 private:
  ChannelProfile channels_;
  Normalization norm_;
  std::vector<LayerSpec> layers_;
  std::vector<Tensor5> weights_;
  std::vector<Tensor5> biases_;
};

/// Zero-mean normal weights with variance 2/fan_in, zero biases.
inline DenoiserNet build_network(ChannelProfile channels, std::uint64_t seed, Normalization norm = {}) {
  DenoiserNet net(channels, norm);
  std::mt19937_64 rng(mix_seed(seed, 0x6e6574ULL));
  for (std::size_t l = 0; l < net.layers().size(); ++l) {
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(net.layers()[l].fan_in())));
    for (double& w : net.weights(l).data()) w = dist(rng);
  }
  return net;
}

// ---------------------------------------------------------------------------
// Forward passes

/// Parameter leaves of a network on a tape.
struct NetVars {
  std::vector<Var> weights;
  std::vector<Var> biases;
};

inline NetVars bind_parameters(Tape& tape, const DenoiserNet& net, bool requires_grad = true) {
  NetVars v;
  for (std::size_t l = 0; l < net.layers().size(); ++l) {
    v.weights.push_back(tape.leaf(net.weights(l), requires_grad));
    v.biases.push_back(tape.leaf(net.bias(l), requires_grad));
  }
  return v;
}

/// Differentiable valid-mode forward: (n,1,Z,Y,X) -> (n,1,Z−8,Y−16,X−16).
inline Var forward_valid(const DenoiserNet& net, const NetVars& params, Var input) {
  const Shape5 s = input.shape();
  if (s.c != 1) throw ShapeError("network input must have one channel");
  if (s.x < kReceptiveField[0] || s.y < kReceptiveField[1] || s.z < kReceptiveField[2])
    throw ShapeError("network input smaller than the 17x17x9 receptive field");
  const auto& nm = net.normalization();
  const double inv = 1.0 / nm.scale;
  Var x = affine(input, inv, -nm.offset * inv);
  for (std::size_t l = 0; l < net.layers().size(); ++l) {
    x = conv3d(x, params.weights[l], params.biases[l]);
    if (net.layers()[l].relu) x = relu(x);
  }
  return affine(x, nm.scale, nm.offset);
}

/// Tape-free valid-mode inference with the same arithmetic as forward_valid.
inline Tensor5 infer_valid(const DenoiserNet& net, const Tensor5& input) {
  const Shape5 s = input.shape();
  if (s.c != 1) throw ShapeError("network input must have one channel");
  if (s.x < kReceptiveField[0] || s.y < kReceptiveField[1] || s.z < kReceptiveField[2])
    throw ShapeError("network input smaller than the 17x17x9 receptive field");
  const auto& nm = net.normalization();
  const double inv = 1.0 / nm.scale;
  std::vector<double> cur(input.data().begin(), input.data().end());
  for (double& v : cur) v = std::fma(v, inv, -nm.offset * inv);
  Index3 grid = s.grid();
  std::size_t ch = 1;
  for (std::size_t l = 0; l < net.layers().size(); ++l) {
    const auto& spec = net.layers()[l];
    const kernels::ValidGeometry g(grid, spec.kernel);
    std::vector<double> next(s.n * spec.out_channels * g.out_size());
    for (std::size_t b = 0; b < s.n; ++b)
      kernels::conv3d_valid_forward(g, cur.data() + b * ch * g.in_size, ch, net.weights(l).data().data(),
                                    net.bias(l).data().data(), spec.out_channels,
                                    next.data() + b * spec.out_channels * g.out_size());
    if (spec.relu)
      for (double& v : next) v = v > 0.0 ? v : 0.0;
    cur = std::move(next);
    grid = g.out;
    ch = spec.out_channels;
  }
  for (double& v : cur) v = std::fma(v, nm.scale, nm.offset);
  return Tensor5({s.n, 1, grid[2], grid[1], grid[0]}, std::move(cur));
}

/// Production inference on a whole volume: mirror-extends the input once by
/// the network border, then runs valid mode. Output dims equal input dims.
inline Volume forward_padded(const DenoiserNet& net, const Volume& v) {
  const Volume padded = pad_volume(v, kBorder, Padding::Mirror);
  return infer_valid(net, Tensor5::from_volume(padded)).to_volume(0, 0, v.spacing());
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// "TNET" | u32 version | u32 profile length | u32 channels... | u32 layer count |
// per layer u32 kx, ky, kz, in, out, relu | f64 offset | f64 scale |
// u64 parameter count | f64 parameters (layer order: weights, bias).

namespace tnet {

inline constexpr char kMagic[4] = {'T', 'N', 'E', 'T'};
inline constexpr std::uint32_t kVersion = 1;

namespace detail {

template <typename T>
void put(std::string& buf, T v) {
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  const U bits = std::bit_cast<U>(v);
  for (std::size_t i = 0; i < sizeof(T); ++i) buf.push_back(static_cast<char>((bits >> (8 * i)) & 0xffu));
}

class Reader {
 public:
  explicit Reader(std::span<const unsigned char> b) : b_(b) {}
  template <typename T>
  T get() {
    using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    if (pos_ + sizeof(T) > b_.size())
      throw CheckpointError("checkpoint truncated at byte offset " + std::to_string(b_.size()));
    U bits = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) bits |= static_cast<U>(b_[pos_ + i]) << (8 * i);
    pos_ += sizeof(T);
    return std::bit_cast<T>(bits);
  }
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return b_.size() - pos_; }

 private:
  std::span<const unsigned char> b_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode(const DenoiserNet& net) {
  std::string buf(kMagic, 4);
  detail::put(buf, kVersion);
  detail::put(buf, static_cast<std::uint32_t>(net.channels().size()));
  for (auto c : net.channels()) detail::put(buf, static_cast<std::uint32_t>(c));
  detail::put(buf, static_cast<std::uint32_t>(net.layers().size()));
  for (const auto& l : net.layers()) {
    for (auto k : l.kernel) detail::put(buf, static_cast<std::uint32_t>(k));
    detail::put(buf, static_cast<std::uint32_t>(l.in_channels));
    detail::put(buf, static_cast<std::uint32_t>(l.out_channels));
    detail::put(buf, static_cast<std::uint32_t>(l.relu));
  }
  detail::put(buf, net.normalization().offset);
  detail::put(buf, net.normalization().scale);
  detail::put(buf, static_cast<std::uint64_t>(net.parameter_count()));
  for (double p : net.flat_parameters()) detail::put(buf, p);
  return buf;
}

inline DenoiserNet decode(std::span<const unsigned char> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw CheckpointError("checkpoint: bad magic");
  detail::Reader r(bytes.subspan(4));
  const auto version = r.get<std::uint32_t>();
  if (version != kVersion) throw CheckpointError("checkpoint: unsupported version " + std::to_string(version));
  const auto plen = r.get<std::uint32_t>();
  ChannelProfile channels{};
  if (plen != channels.size()) throw CheckpointError("checkpoint: channel profile length mismatch");
  for (auto& c : channels) c = r.get<std::uint32_t>();
  const auto nlayers = r.get<std::uint32_t>();
  if (nlayers != kLayerCount) throw CheckpointError("checkpoint: layer count mismatch");
  const auto expected = layer_specs(channels);
  for (std::size_t l = 0; l < kLayerCount; ++l) {
    LayerSpec s;
    for (auto& k : s.kernel) k = r.get<std::uint32_t>();
    s.in_channels = r.get<std::uint32_t>();
    s.out_channels = r.get<std::uint32_t>();
    s.relu = r.get<std::uint32_t>() != 0;
    const auto& e = expected[l];
    if (s.kernel != e.kernel || s.in_channels != e.in_channels || s.out_channels != e.out_channels ||
        s.relu != e.relu)
      throw CheckpointError("checkpoint: layer " + std::to_string(l) + " shape mismatch");
  }
  Normalization norm;
  norm.offset = r.get<double>();
  norm.scale = r.get<double>();
  DenoiserNet net = [&] {
    try {
      return DenoiserNet(channels, norm);
    } catch (const Error& e) {
      throw CheckpointError(std::string("checkpoint: ") + e.what());
    }
  }();
  const auto count = r.get<std::uint64_t>();
  if (count != net.parameter_count()) throw CheckpointError("checkpoint: parameter count mismatch");
  if (r.remaining() != count * sizeof(double))
    throw CheckpointError(r.remaining() < count * sizeof(double)
                              ? "checkpoint truncated: expected " + std::to_string(count) + " parameters"
                              : "checkpoint: trailing data");
  std::vector<double> params(count);
  for (auto& p : params) {
    p = r.get<double>();
    if (!std::isfinite(p)) throw CheckpointError("checkpoint: non-finite parameter");
  }
  net.set_flat_parameters(params);
  return net;
}

}  // namespace tnet

inline void save_checkpoint(const DenoiserNet& net, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot open " + path.string() + " for writing");
  const std::string buf = tnet::encode(net);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw CheckpointError("failed writing " + path.string());
}

inline DenoiserNet load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return tnet::decode(bytes);
}

}  // namespace bonedn
