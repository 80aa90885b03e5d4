#pragma once

// Dense multi-channel 3D cross-correlation kernels on x-fastest grids.
//
// Valid-mode outputs are computed on the "full-width" linear index range of
// the input grid: output voxel (x,y,z) lives at l = (z·Y + y)·X + x and tap
// (dx,dy,dz) reads input index l + (dz·Y + dy)·X + dx. Every output element is
// produced by the same vector code path with a fixed summation order (bias,
// then input channels, then taps in z,y,x order), so results do not depend on
// the grid size or on the position of the voxel.

#include <algorithm>
#include <cstring>
#include <span>
#include <vector>

#include "bonedn/common.hpp"

namespace bonedn::kernels {

typedef double vd8 __attribute__((vector_size(64)));

inline constexpr std::size_t kLanes = 8;
inline constexpr std::size_t kChunk = 2 * kLanes;

inline std::size_t round_up(std::size_t n, std::size_t m) { return (n + m - 1) / m * m; }

inline vd8 load(const double* p) {
  vd8 v;
  std::memcpy(&v, p, sizeof(v));
  return v;
}

inline void store(double* p, vd8 v) { std::memcpy(p, &v, sizeof(v)); }

inline vd8 splat(double s) { return vd8{s, s, s, s, s, s, s, s}; }

inline double hsum(vd8 v) {
  double s = 0.0;
  for (std::size_t i = 0; i < kLanes; ++i) s += v[i];
  return s;
}

namespace detail {

template <int OB>
void correlate_block(const double* in, std::size_t in_stride, std::size_t n_in,
                     const double* wpack, const std::size_t* offs, std::size_t n_taps,
                     const double* bias, double* out, std::size_t out_stride, std::size_t length) {
  for (std::size_t l = 0; l < length; l += kChunk) {
    vd8 acc[OB][2];
    for (int o = 0; o < OB; ++o) {
      const double b = bias ? bias[o] : 0.0;
      acc[o][0] = splat(b);
      acc[o][1] = splat(b);
    }
    const double* w = wpack;
    for (std::size_t i = 0; i < n_in; ++i) {
      const double* base = in + i * in_stride + l;
      for (std::size_t k = 0; k < n_taps; ++k, w += OB) {
        const vd8 v0 = load(base + offs[k]);
        const vd8 v1 = load(base + offs[k] + kLanes);
        for (int o = 0; o < OB; ++o) {
          acc[o][0] += w[o] * v0;
          acc[o][1] += w[o] * v1;
        }
      }
    }
    for (int o = 0; o < OB; ++o) {
      store(out + o * out_stride + l, acc[o][0]);
      store(out + o * out_stride + l + kLanes, acc[o][1]);
    }
  }
}

}  // namespace detail

/// out[o][l] = bias[o] + Σ_i Σ_k w[o][i][k] · in[i][l + offs[k]] for
/// l ∈ [0, round_up(length, kChunk)).
///
/// `in` must be readable up to round_up(length, kChunk) + max(offs) in every
/// channel; `out` must have room for round_up(length, kChunk) per channel.
/// bias may be null.
inline void correlate(const double* in, std::size_t in_stride, std::size_t n_in, const double* w,
                      std::size_t n_out, std::span<const std::size_t> offs, const double* bias,
                      double* out, std::size_t out_stride, std::size_t length) {
  const std::size_t n_taps = offs.size();
  const std::size_t padded = round_up(length, kChunk);
  std::vector<double> wpack;
  constexpr std::size_t kMaxBlock = 8;
  for (std::size_t o0 = 0; o0 < n_out; o0 += kMaxBlock) {
    const std::size_t ob = std::min(kMaxBlock, n_out - o0);
    wpack.assign(n_in * n_taps * ob, 0.0);
    for (std::size_t i = 0; i < n_in; ++i)
      for (std::size_t k = 0; k < n_taps; ++k)
        for (std::size_t o = 0; o < ob; ++o)
          wpack[(i * n_taps + k) * ob + o] = w[((o0 + o) * n_in + i) * n_taps + k];
    const double* b = bias ? bias + o0 : nullptr;
    double* dst = out + o0 * out_stride;
    switch (ob) {
#define BONEDN_CASE(N)                                                                         \
  case N:                                                                                     \
    detail::correlate_block<N>(in, in_stride, n_in, wpack.data(), offs.data(), n_taps, b, dst, \
                               out_stride, padded);                                           \
    break;
      BONEDN_CASE(1)
      BONEDN_CASE(2)
      BONEDN_CASE(3)
      BONEDN_CASE(4)
      BONEDN_CASE(5)
      BONEDN_CASE(6)
      BONEDN_CASE(7)
      BONEDN_CASE(8)
#undef BONEDN_CASE
      default:
        break;
    }
  }
}

/// dw[o][i][k] += Σ_{l<length'} g[o][l] · in[i][l + offs[k]], where length'
/// = round_up(length, kLanes); g must be zero on [length, length').
inline void correlate_weight_grad(const double* in, std::size_t in_stride, std::size_t n_in,
                                  const double* g, std::size_t g_stride, std::size_t n_out,
                                  std::span<const std::size_t> offs, double* dw, std::size_t length) {
  const std::size_t n_taps = offs.size();
  const std::size_t padded = round_up(length, kLanes);
  constexpr std::size_t OB = 4, KB = 4;
  for (std::size_t o0 = 0; o0 < n_out; o0 += OB) {
    const std::size_t ob = std::min(OB, n_out - o0);
    for (std::size_t i = 0; i < n_in; ++i) {
      const double* x = in + i * in_stride;
      for (std::size_t k0 = 0; k0 < n_taps; k0 += KB) {
        const std::size_t kb = std::min(KB, n_taps - k0);
        vd8 acc[OB][KB];
        for (auto& row : acc)
          for (auto& a : row) a = splat(0.0);
        if (ob == OB && kb == KB) {
          for (std::size_t l = 0; l < padded; l += kLanes) {
            vd8 gv[OB], xv[KB];
            for (std::size_t o = 0; o < OB; ++o) gv[o] = load(g + (o0 + o) * g_stride + l);
            for (std::size_t k = 0; k < KB; ++k) xv[k] = load(x + l + offs[k0 + k]);
            for (std::size_t o = 0; o < OB; ++o)
              for (std::size_t k = 0; k < KB; ++k) acc[o][k] += gv[o] * xv[k];
          }
        } else {
          for (std::size_t l = 0; l < padded; l += kLanes) {
            for (std::size_t o = 0; o < ob; ++o) {
              const vd8 gv = load(g + (o0 + o) * g_stride + l);
              for (std::size_t k = 0; k < kb; ++k) acc[o][k] += gv * load(x + l + offs[k0 + k]);
            }
          }
        }
        for (std::size_t o = 0; o < ob; ++o)
          for (std::size_t k = 0; k < kb; ++k)
            dw[((o0 + o) * n_in + i) * n_taps + k0 + k] += hsum(acc[o][k]);
      }
    }
  }
}

/// Geometry of a valid 3D correlation of an (X,Y,Z) grid with a (kx,ky,kz)
/// kernel in full-width linear indexing.
struct ValidGeometry {
  Index3 in{};      // (x, y, z)
  Index3 kernel{};  // (x, y, z)
  Index3 out{};     // (x, y, z)
  std::size_t in_size = 0;
  std::size_t length = 0;   // full-width output range
  std::size_t max_off = 0;  // largest tap offset
  std::vector<std::size_t> offs;

  ValidGeometry(Index3 in_dims, Index3 kernel_dims) : in(in_dims), kernel(kernel_dims) {
    for (int a = 0; a < 3; ++a) {
      if (kernel[a] == 0 || in[a] < kernel[a])
        throw ShapeError("valid convolution: input smaller than kernel");
      out[a] = in[a] - kernel[a] + 1;
    }
    in_size = in[0] * in[1] * in[2];
    for (std::size_t dz = 0; dz < kernel[2]; ++dz)
      for (std::size_t dy = 0; dy < kernel[1]; ++dy)
        for (std::size_t dx = 0; dx < kernel[0]; ++dx) offs.push_back((dz * in[1] + dy) * in[0] + dx);
    max_off = offs.back();
    length = in_size - max_off;
  }

  std::size_t out_size() const { return out[0] * out[1] * out[2]; }

  /// Full-width index of compact output voxel (x, y, z).
  std::size_t full_index(std::size_t x, std::size_t y, std::size_t z) const {
    return (z * in[1] + y) * in[0] + x;
  }
};

/// Valid multi-channel correlation of one batch item.
/// in: n_in × in_size, w: n_out × n_in × taps, out: n_out × out_size (compact).
inline void conv3d_valid_forward(const ValidGeometry& g, const double* in, std::size_t n_in,
                                 const double* w, const double* bias, std::size_t n_out,
                                 double* out) {
  const std::size_t lp = round_up(g.length, kChunk);
  const std::size_t in_stride = lp + g.max_off;
  std::vector<double> xin(n_in * in_stride, 0.0);
  for (std::size_t i = 0; i < n_in; ++i)
    std::copy(in + i * g.in_size, in + (i + 1) * g.in_size, xin.begin() + i * in_stride);
  std::vector<double> full(n_out * lp);
  correlate(xin.data(), in_stride, n_in, w, n_out, g.offs, bias, full.data(), lp, g.length);
  const std::size_t osz = g.out_size();
  for (std::size_t o = 0; o < n_out; ++o)
    for (std::size_t z = 0; z < g.out[2]; ++z)
      for (std::size_t y = 0; y < g.out[1]; ++y) {
        const double* src = &full[o * lp + g.full_index(0, y, z)];
        std::copy(src, src + g.out[0], out + o * osz + (z * g.out[1] + y) * g.out[0]);
      }
}

/// Backward of conv3d_valid_forward for one batch item. Accumulates into
/// gin (may be null), gw and gb (may be null).
inline void conv3d_valid_backward(const ValidGeometry& g, const double* in, std::size_t n_in,
                                  const double* w, std::size_t n_out, const double* gout,
                                  double* gin, double* gw, double* gb) {
  const std::size_t osz = g.out_size();
  const std::size_t n_taps = g.offs.size();
  // Upstream gradient scattered to full-width layout, with max_off leading
  // zeros so the input-gradient pass reads only non-negative offsets.
  const std::size_t lead = g.max_off;
  const std::size_t gin_len = round_up(g.in_size, kChunk);
  const std::size_t g_stride = std::max(lead + round_up(g.length, kLanes), gin_len + g.max_off);
  std::vector<double> gfull(n_out * g_stride, 0.0);
  for (std::size_t o = 0; o < n_out; ++o) {
    double* dst = &gfull[o * g_stride + lead];
    for (std::size_t z = 0; z < g.out[2]; ++z)
      for (std::size_t y = 0; y < g.out[1]; ++y) {
        const double* src = gout + o * osz + (z * g.out[1] + y) * g.out[0];
        std::copy(src, src + g.out[0], dst + g.full_index(0, y, z));
      }
  }

  if (gb) {
    for (std::size_t o = 0; o < n_out; ++o) {
      double s = 0.0;
      for (std::size_t j = 0; j < osz; ++j) s += gout[o * osz + j];
      gb[o] += s;
    }
  }

  if (gw) {
    const std::size_t lpad = round_up(g.length, kLanes);
    const std::size_t in_stride = lpad + g.max_off;
    std::vector<double> xin(n_in * in_stride, 0.0);
    for (std::size_t i = 0; i < n_in; ++i)
      std::copy(in + i * g.in_size, in + (i + 1) * g.in_size, xin.begin() + i * in_stride);
    correlate_weight_grad(xin.data(), in_stride, n_in, gfull.data() + lead, g_stride, n_out,
                          g.offs, gw, g.length);
  }

  if (gin) {
    // gin[i][p] = Σ_o Σ_k w[o][i][k] · gfull[o][p + max_off − offs[k]]
    std::vector<std::size_t> rev(n_taps);
    for (std::size_t k = 0; k < n_taps; ++k) rev[k] = g.max_off - g.offs[k];
    std::vector<double> wt(n_in * n_out * n_taps);
    for (std::size_t o = 0; o < n_out; ++o)
      for (std::size_t i = 0; i < n_in; ++i)
        for (std::size_t k = 0; k < n_taps; ++k)
          wt[(i * n_out + o) * n_taps + k] = w[(o * n_in + i) * n_taps + k];
    std::vector<double> res(n_in * gin_len);
    correlate(gfull.data(), g_stride, n_out, wt.data(), n_in, rev, nullptr, res.data(), gin_len,
              g.in_size);
    for (std::size_t i = 0; i < n_in; ++i)
      for (std::size_t p = 0; p < g.in_size; ++p) gin[i * g.in_size + p] += res[i * gin_len + p];
  }
}

}  // namespace bonedn::kernels
