#pragma once

// Rank-5 tensors (batch, channel, z, y, x) and a reverse-mode tape.

#include <cmath>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "bonedn/common.hpp"
#include "bonedn/conv_kernels.hpp"
#include "bonedn/structmaps.hpp"
#include "bonedn/volume.hpp"

namespace bonedn {

struct Shape5 {
  std::size_t n = 0, c = 0, z = 0, y = 0, x = 0;

  std::size_t spatial() const { return z * y * x; }
  std::size_t size() const { return n * c * spatial(); }
  /// Spatial extent as (x, y, z).
  Index3 grid() const { return {x, y, z}; }

  friend bool operator==(const Shape5&, const Shape5&) = default;
};

inline std::string to_string(const Shape5& s) {
  return "(" + std::to_string(s.n) + "," + std::to_string(s.c) + "," + std::to_string(s.z) + "," +
         std::to_string(s.y) + "," + std::to_string(s.x) + ")";
}

class Tensor5 {
 public:
  Tensor5() = default;
  explicit Tensor5(Shape5 shape, double fill = 0.0) : shape_(shape), data_(shape.size(), fill) {}
  Tensor5(Shape5 shape, std::vector<double> data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.size()) throw ShapeError("tensor data length does not match shape");
  }

  static Tensor5 scalar(double v) { return Tensor5({1, 1, 1, 1, 1}, v); }

  /// Single-item, single-channel tensor holding a volume.
  static Tensor5 from_volume(const Volume& v) {
    return Tensor5({1, 1, v.nz(), v.ny(), v.nx()}, std::vector<double>(v.data().begin(), v.data().end()));
  }

  /// Stacks equally sized volumes along the batch axis.
  static Tensor5 from_volumes(std::span<const Volume> vs) {
    if (vs.empty()) throw ArgumentError("cannot stack zero volumes");
    const Index3 d = vs.front().dims();
    Tensor5 t({vs.size(), 1, d[2], d[1], d[0]});
    auto out = t.data_.begin();
    for (const auto& v : vs) {
      if (v.dims() != d) throw ShapeError("stacked volumes differ in dims");
      out = std::copy(v.data().begin(), v.data().end(), out);
    }
    return t;
  }

  /// Channel c of batch item b as a volume.
  Volume to_volume(std::size_t b = 0, std::size_t c = 0, Spacing3 spacing = kClinicalSpacing) const {
    const std::size_t s = shape_.spatial();
    const auto* p = data_.data() + (b * shape_.c + c) * s;
    return Volume(shape_.grid(), spacing, std::vector<double>(p, p + s));
  }

  const Shape5& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double item() const {
    if (data_.size() != 1) throw ShapeError("item() on non-scalar tensor");
    return data_[0];
  }

  friend bool operator==(const Tensor5&, const Tensor5&) = default;

 private:
  Shape5 shape_;
  std::vector<double> data_;
};

class Tape;

/// Handle to a recorded tensor.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor5& value() const;
  const Shape5& shape() const { return value().shape(); }
};

/// Append-only record of operations. A tape is single-owner: build it,
/// call backward() once per gradient evaluation, read gradients, discard.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor5& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor5 value, bool requires_grad = false) {
    nodes_.push_back({std::move(value), {}, requires_grad, nullptr});
    return {this, nodes_.size() - 1};
  }

  Var record(Tensor5 value, std::span<const Var> inputs, BackwardFn fn) {
    bool rg = false;
    for (const Var& v : inputs) {
      if (v.tape != this) throw ArgumentError("operands belong to a different tape");
      rg = rg || nodes_[v.id].requires_grad;
    }
    nodes_.push_back({std::move(value), {}, rg, rg ? std::move(fn) : nullptr});
    return {this, nodes_.size() - 1};
  }

  Var record(Tensor5 value, std::initializer_list<Var> inputs, BackwardFn fn) {
    return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(fn));
  }

  const Tensor5& value(Var v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

  /// Accumulated d(root)/d(v); zeros if v received no gradient.
  Tensor5 grad(Var v) const {
    const auto& n = nodes_.at(v.id);
    return n.grad.empty() ? Tensor5(n.value.shape()) : n.grad;
  }

  /// Adds g into the gradient slot of v (no-op if v does not require grad).
  void accumulate(Var v, const Tensor5& g) {
    auto& n = nodes_[v.id];
    if (!n.requires_grad) return;
    if (g.shape() != n.value.shape()) throw ShapeError("gradient shape mismatch");
    if (n.grad.empty()) {
      n.grad = g;
      return;
    }
    auto dst = n.grad.data();
    auto src = g.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }

  /// Raw gradient buffer of v, allocated on demand.
  std::span<double> grad_buffer(Var v) {
    auto& n = nodes_[v.id];
    if (n.grad.empty()) n.grad = Tensor5(n.value.shape());
    return n.grad.data();
  }

  void zero_grad() {
    for (auto& n : nodes_) n.grad = Tensor5();
  }

  std::size_t size() const { return nodes_.size(); }

  /// Reverse sweep from a scalar root in strict reverse recording order.
  void backward(Var root) {
    if (root.tape != this) throw ArgumentError("root belongs to a different tape");
    if (value(root).size() != 1) throw ArgumentError("backward requires a scalar root");
    zero_grad();
    if (!nodes_[root.id].requires_grad) return;
    nodes_[root.id].grad = Tensor5(nodes_[root.id].value.shape(), 1.0);
    for (std::size_t i = root.id + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (!n.backward || n.grad.empty()) continue;
      // Closures only touch gradients of lower-indexed nodes.
      n.backward(*this, n.grad);
    }
  }

 private:
  struct Node {
    Tensor5 value;
    Tensor5 grad;
    bool requires_grad = false;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
};

inline const Tensor5& Var::value() const { return tape->value(*this); }

inline void backward(Tape& tape, Var root) { tape.backward(root); }

// ---------------------------------------------------------------------------
// Elementwise operations

namespace ops_detail {

inline void require_same(const Var& a, const Var& b) {
  if (a.shape() != b.shape())
    throw ShapeError("operand shapes differ: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
}

/// Unary op with derivative expressed through input x and output y.
template <typename F, typename D>
Var unary(Var a, F f, D dfdx) {
  const Tensor5& x = a.value();
  Tensor5 y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  const std::size_t out_id = a.tape->size();
  return a.tape->record(std::move(y), {a}, [a, out_id, dfdx](Tape& t, const Tensor5& g) {
    const Tensor5& xv = t.value(a);
    const Tensor5& yv = t.value({&t, out_id});
    Tensor5 gi(xv.shape());
    for (std::size_t i = 0; i < gi.size(); ++i) gi[i] = g[i] * dfdx(xv[i], yv[i]);
    t.accumulate(a, gi);
  });
}

}  // namespace ops_detail

inline Var add(Var a, Var b) {
  ops_detail::require_same(a, b);
  Tensor5 y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += b.value()[i];
  return a.tape->record(std::move(y), {a, b}, [a, b](Tape& t, const Tensor5& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

inline Var add(Var a, double s) {
  return ops_detail::unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

inline Var negate(Var a) {
  return ops_detail::unary(a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

inline Var sub(Var a, Var b) {
  ops_detail::require_same(a, b);
  Tensor5 y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= b.value()[i];
  return a.tape->record(std::move(y), {a, b}, [a, b](Tape& t, const Tensor5& g) {
    t.accumulate(a, g);
    Tensor5 n = g;
    for (double& v : n.data()) v = -v;
    t.accumulate(b, n);
  });
}

inline Var sub(Var a, double s) { return add(a, -s); }

inline Var mul(Var a, Var b) {
  ops_detail::require_same(a, b);
  Tensor5 y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= b.value()[i];
  return a.tape->record(std::move(y), {a, b}, [a, b](Tape& t, const Tensor5& g) {
    const Tensor5& av = t.value(a);
    const Tensor5& bv = t.value(b);
    if (t.requires_grad(a)) {
      Tensor5 ga(g.shape());
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * bv[i];
      t.accumulate(a, ga);
    }
    if (t.requires_grad(b)) {
      Tensor5 gb(g.shape());
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] = g[i] * av[i];
      t.accumulate(b, gb);
    }
  });
}

/// a·s for scalar s.
inline Var scale(Var a, double s) {
  return ops_detail::unary(a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

inline Var mul(Var a, double s) { return scale(a, s); }

/// fma(a, m, c) elementwise; the fused form keeps results independent of
/// compiler contraction choices.
inline Var affine(Var a, double m, double c) {
  return ops_detail::unary(a, [m, c](double x) { return std::fma(x, m, c); },
                           [m](double, double) { return m; });
}

/// a / b. The caller keeps b away from zero.
inline Var div(Var a, Var b) {
  ops_detail::require_same(a, b);
  Tensor5 y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] /= b.value()[i];
  return a.tape->record(std::move(y), {a, b}, [a, b](Tape& t, const Tensor5& g) {
    const Tensor5& av = t.value(a);
    const Tensor5& bv = t.value(b);
    if (t.requires_grad(a)) {
      Tensor5 ga(g.shape());
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] / bv[i];
      t.accumulate(a, ga);
    }
    if (t.requires_grad(b)) {
      Tensor5 gb(g.shape());
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] = -g[i] * av[i] / (bv[i] * bv[i]);
      t.accumulate(b, gb);
    }
  });
}

inline Var div(Var a, double s) { return scale(a, 1.0 / s); }

inline Var exp(Var a) {
  return ops_detail::unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Var ln(Var a) {
  return ops_detail::unary(a, [](double x) { return std::log(x); },
                           [](double x, double) { return 1.0 / x; });
}

inline Var square(Var a) {
  return ops_detail::unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

/// sqrt(max(x, 0)); derivative taken as 0 on the clamped side.
inline Var sqrt_clamped(Var a) {
  return ops_detail::unary(
      a, [](double x) { return x > 0.0 ? std::sqrt(x) : 0.0; },
      [](double x, double y) { return x > 0.0 ? 0.5 / y : 0.0; });
}

inline Var relu(Var a) {
  return ops_detail::unary(a, [](double x) { return x > 0.0 ? x : 0.0; },
                           [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

/// Fuzzy threshold H_σ(x − t).
inline Var sigmoid_threshold(Var a, double t, double sigma) {
  return ops_detail::unary(a, [t, sigma](double x) { return fuzzy_heaviside(x, t, sigma); },
                           [sigma](double, double y) { return y * (1.0 - y) / sigma; });
}

inline Var softplus_eps(Var a, double eps) {
  return ops_detail::unary(a, [eps](double x) { return bonedn::softplus_eps(x, eps); },
                           [eps](double x, double) { return softplus_eps_derivative(x, eps); });
}

// ---------------------------------------------------------------------------
// Reductions

inline Var mean(Var a) {
  const Tensor5& x = a.value();
  if (x.empty()) throw ArgumentError("mean of empty tensor");
  double s = 0.0;
  for (double v : x.data()) s += v;
  const double n = static_cast<double>(x.size());
  return a.tape->record(Tensor5::scalar(s / n), {a}, [a, n](Tape& t, const Tensor5& g) {
    t.accumulate(a, Tensor5(t.value(a).shape(), g[0] / n));
  });
}

inline Var sum(Var a) {
  const Tensor5& x = a.value();
  if (x.empty()) throw ArgumentError("sum of empty tensor");
  double s = 0.0;
  for (double v : x.data()) s += v;
  return a.tape->record(Tensor5::scalar(s), {a}, [a](Tape& t, const Tensor5& g) {
    t.accumulate(a, Tensor5(t.value(a).shape(), g[0]));
  });
}

/// Σ_i w_i a_i over all elements of a.
inline Var weighted_sum(Var a, std::vector<double> weights) {
  const Tensor5& x = a.value();
  if (x.empty()) throw ArgumentError("weighted_sum of empty tensor");
  if (weights.size() != x.size()) throw ShapeError("weighted_sum: weight count does not match");
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += weights[i] * x[i];
  return a.tape->record(Tensor5::scalar(s), {a}, [a, w = std::move(weights)](Tape& t, const Tensor5& g) {
    Tensor5 gi(t.value(a).shape());
    for (std::size_t i = 0; i < gi.size(); ++i) gi[i] = g[0] * w[i];
    t.accumulate(a, gi);
  });
}

/// Stacks scalar nodes into a (k,1,1,1,1) tensor.
inline Var stack_scalars(std::span<const Var> parts) {
  if (parts.empty()) throw ArgumentError("stack of zero scalars");
  Tape* tape = parts.front().tape;
  Tensor5 y({parts.size(), 1, 1, 1, 1});
  for (std::size_t i = 0; i < parts.size(); ++i) y[i] = parts[i].value().item();
  std::vector<Var> inputs(parts.begin(), parts.end());
  return tape->record(std::move(y), parts, [inputs](Tape& t, const Tensor5& g) {
    for (std::size_t i = 0; i < inputs.size(); ++i) t.accumulate(inputs[i], Tensor5::scalar(g[i]));
  });
}

// ---------------------------------------------------------------------------
// Spatial operations

/// Border extension by pad voxels per side (x, y, z).
inline Var pad(Var a, std::array<int, 3> pad_xyz, Padding mode) {
  const Tensor5& x = a.value();
  const Shape5 s = x.shape();
  Index3 pd{};
  auto map = std::make_shared<std::vector<std::ptrdiff_t>>(
      detail::pad_index_map(s.grid(), pad_xyz, mode, &pd));
  const Shape5 os{s.n, s.c, pd[2], pd[1], pd[0]};
  Tensor5 y(os);
  const std::size_t in_sp = s.spatial(), out_sp = os.spatial();
  for (std::size_t bc = 0; bc < s.n * s.c; ++bc)
    for (std::size_t i = 0; i < out_sp; ++i) {
      const auto src = (*map)[i];
      y[bc * out_sp + i] = src < 0 ? 0.0 : x[bc * in_sp + static_cast<std::size_t>(src)];
    }
  return a.tape->record(std::move(y), {a}, [a, map, in_sp, out_sp](Tape& t, const Tensor5& g) {
    Tensor5 gi(t.value(a).shape());
    const std::size_t nbc = gi.size() / in_sp;
    for (std::size_t bc = 0; bc < nbc; ++bc)
      for (std::size_t i = 0; i < out_sp; ++i) {
        const auto src = (*map)[i];
        if (src >= 0) gi[bc * in_sp + static_cast<std::size_t>(src)] += g[bc * out_sp + i];
      }
    t.accumulate(a, gi);
  });
}

/// Centered spatial crop to (z, y, x) extent.
inline Var center_crop(Var a, std::size_t cz, std::size_t cy, std::size_t cx) {
  const Tensor5& x = a.value();
  const Shape5 s = x.shape();
  if (cz > s.z || cy > s.y || cx > s.x) throw ShapeError("crop larger than tensor");
  const std::size_t oz = (s.z - cz) / 2, oy = (s.y - cy) / 2, ox = (s.x - cx) / 2;
  const Shape5 os{s.n, s.c, cz, cy, cx};
  Tensor5 y(os);
  std::size_t o = 0;
  for (std::size_t bc = 0; bc < s.n * s.c; ++bc)
    for (std::size_t z = 0; z < cz; ++z)
      for (std::size_t yy = 0; yy < cy; ++yy)
        for (std::size_t xx = 0; xx < cx; ++xx)
          y[o++] = x[((bc * s.z + z + oz) * s.y + yy + oy) * s.x + xx + ox];
  return a.tape->record(std::move(y), {a}, [a, os, oz, oy, ox](Tape& t, const Tensor5& g) {
    const Shape5 s = t.value(a).shape();
    Tensor5 gi(s);
    std::size_t o = 0;
    for (std::size_t bc = 0; bc < s.n * s.c; ++bc)
      for (std::size_t z = 0; z < os.z; ++z)
        for (std::size_t yy = 0; yy < os.y; ++yy)
          for (std::size_t xx = 0; xx < os.x; ++xx)
            gi[((bc * s.z + z + oz) * s.y + yy + oy) * s.x + xx + ox] = g[o++];
    t.accumulate(a, gi);
  });
}

enum class ConvPadding { Valid, Same };

/// Multi-channel 3D cross-correlation, stride 1.
/// weights: (out_ch, in_ch, kz, ky, kx); bias: (1, out_ch, 1, 1, 1).
/// Same mode mirror-extends the input by (k − 1)/2 per side (odd kernels).
inline Var conv3d(Var input, Var weights, Var bias, ConvPadding padding = ConvPadding::Valid) {
  const Shape5 ws = weights.shape();
  if (padding == ConvPadding::Same) {
    if (ws.x % 2 == 0 || ws.y % 2 == 0 || ws.z % 2 == 0)
      throw ShapeError("same-mode conv3d requires odd kernel extents");
    Var padded = pad(input, {static_cast<int>(ws.x / 2), static_cast<int>(ws.y / 2),
                             static_cast<int>(ws.z / 2)},
                     Padding::Mirror);
    return conv3d(padded, weights, bias, ConvPadding::Valid);
  }
  const Shape5 is = input.shape();
  if (ws.c != is.c)
    throw ShapeError("conv3d: weights expect " + std::to_string(ws.c) + " input channels, got " +
                     std::to_string(is.c));
  if (bias.shape().size() != ws.n) throw ShapeError("conv3d: bias length does not match out channels");
  auto geo = std::make_shared<kernels::ValidGeometry>(is.grid(), ws.grid());
  const Shape5 os{is.n, ws.n, geo->out[2], geo->out[1], geo->out[0]};
  Tensor5 y(os);
  const std::size_t in_item = is.c * is.spatial(), out_item = os.c * os.spatial();
  for (std::size_t b = 0; b < is.n; ++b)
    kernels::conv3d_valid_forward(*geo, input.value().data().data() + b * in_item, is.c,
                                  weights.value().data().data(), bias.value().data().data(), ws.n,
                                  y.data().data() + b * out_item);
  return input.tape->record(std::move(y), {input, weights, bias},
                            [input, weights, bias, geo, in_item, out_item](Tape& t, const Tensor5& g) {
    const Shape5 is = t.value(input).shape();
    const Shape5 ws = t.value(weights).shape();
    const bool gi = t.requires_grad(input), gw = t.requires_grad(weights), gb = t.requires_grad(bias);
    double* gin = gi ? t.grad_buffer(input).data() : nullptr;
    double* gwt = gw ? t.grad_buffer(weights).data() : nullptr;
    double* gbs = gb ? t.grad_buffer(bias).data() : nullptr;
    for (std::size_t b = 0; b < is.n; ++b)
      kernels::conv3d_valid_backward(*geo, t.value(input).data().data() + b * in_item, is.c,
                                     t.value(weights).data().data(), ws.n, g.data().data() + b * out_item,
                                     gin ? gin + b * in_item : nullptr, gwt, gbs);
  });
}

/// Convolution with a fixed spherical averaging mask, applied per batch item
/// and channel. Same mode mirror-extends the border.
inline Var kernel_conv(Var input, const SphericalKernel& k, MapMode mode = MapMode::Valid) {
  if (mode == MapMode::Same) return kernel_conv(pad(input, k.radius(), Padding::Mirror), k, MapMode::Valid);
  const Shape5 is = input.shape();
  const Index3 od = detail::valid_dims(is.grid(), k.box());
  const Shape5 os{is.n, is.c, od[2], od[1], od[0]};
  Tensor5 y(os);
  const std::size_t isp = is.spatial(), osp = os.spatial();
  for (std::size_t bc = 0; bc < is.n * is.c; ++bc)
    detail::sphere_correlate_valid(input.value().data().data() + bc * isp, is.grid(), k,
                                   y.data().data() + bc * osp);
  return input.tape->record(std::move(y), {input}, [input, k, isp, osp](Tape& t, const Tensor5& g) {
    const Shape5 is = t.value(input).shape();
    double* gin = t.grad_buffer(input).data();
    for (std::size_t bc = 0; bc < is.n * is.c; ++bc)
      detail::sphere_correlate_valid_adjoint(g.data().data() + bc * osp, is.grid(), k, gin + bc * isp);
  });
}

}  // namespace bonedn
