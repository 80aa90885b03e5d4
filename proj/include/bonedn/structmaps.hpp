#pragma once

// Spherical neighbourhood kernels and the structural parameters of
// trabecular bone: global BMD / BV/TV / TMD and their smooth local maps
// (fuzzy-thresholded, softplus-guarded) plus the local standard deviation.

#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

#include "bonedn/common.hpp"
#include "bonedn/volume.hpp"

namespace bonedn {

/// ε·ln(1 + exp(x/ε − 1)) + ε. Smooth, strictly positive version of
/// max(0, x); close to x once x exceeds a few ε.
inline double softplus_eps(double x, double eps) {
  const double a = x / eps - 1.0;
  const double lp = a > 0.0 ? a + std::log1p(std::exp(-a)) : std::log1p(std::exp(a));
  return eps * lp + eps;
}

/// d/dx softplus_eps = logistic(x/ε − 1).
inline double softplus_eps_derivative(double x, double eps) {
  const double a = x / eps - 1.0;
  if (a >= 0.0) return 1.0 / (1.0 + std::exp(-a));
  const double e = std::exp(a);
  return e / (1.0 + e);
}

/// Sigmoid relaxation of H(x − t) with scale σ.
inline double fuzzy_heaviside(double x, double t, double sigma) {
  return 1.0 / (1.0 + std::exp((t - x) / sigma));
}

struct FuzzyParams {
  double sigma = 10.0;  // mg/cm^3
  double eps = 1e-4;

  void validate() const {
    if (!(sigma > 0.0) || !(eps > 0.0)) throw ArgumentError("fuzzy sigma and eps must be > 0");
  }
};

enum class MapMode { Valid, Same };
enum class Padding { Mirror, Zero };

/// Constant-weight sphere of diameter d (mm) on an anisotropic voxel grid.
/// Offset (i,j,k) belongs to the sphere iff (i·sx)² + (j·sy)² + (k·sz)² ≤ (d/2)².
class SphericalKernel {
 public:
  struct Run {
    int dz, dy, x0, x1;  // inclusive x range
  };

  SphericalKernel(double diameter, Spacing3 spacing) : diameter_(diameter), spacing_(spacing) {
    if (!(diameter > 0.0)) throw ArgumentError("kernel diameter must be > 0");
    const double r = diameter / 2.0;
    const double r2 = r * r;
    for (int a = 0; a < 3; ++a) {
      if (!(spacing[a] > 0.0)) throw ArgumentError("kernel spacing must be > 0");
      radius_[a] = static_cast<int>(std::floor(r / spacing[a] * (1.0 + 1e-12)));
    }
    for (int k = -radius_[2]; k <= radius_[2]; ++k)
      for (int j = -radius_[1]; j <= radius_[1]; ++j) {
        int lo = 1, hi = 0;
        for (int i = -radius_[0]; i <= radius_[0]; ++i) {
          const double dx = i * spacing[0], dy = j * spacing[1], dz = k * spacing[2];
          if (dx * dx + dy * dy + dz * dz <= r2 * (1.0 + 1e-12)) {
            offsets_.push_back({i, j, k});
            if (lo > hi) lo = i;
            hi = i;
          }
        }
        if (lo <= hi) runs_.push_back({k, j, lo, hi});
      }
    weight_ = 1.0 / static_cast<double>(offsets_.size());
  }

  double diameter() const { return diameter_; }
  const Spacing3& spacing() const { return spacing_; }
  /// Offsets ordered z-major, then y, then x.
  const std::vector<Offset3>& offsets() const { return offsets_; }
  const std::vector<Run>& runs() const { return runs_; }
  std::size_t count() const { return offsets_.size(); }
  double weight() const { return weight_; }
  /// Σ N_d² = 1/n.
  double sum_squared_weights() const { return weight_ * weight_ * static_cast<double>(count()); }
  const std::array<int, 3>& radius() const { return radius_; }
  Index3 box() const {
    return {static_cast<std::size_t>(2 * radius_[0] + 1), static_cast<std::size_t>(2 * radius_[1] + 1),
            static_cast<std::size_t>(2 * radius_[2] + 1)};
  }

 private:
  double diameter_;
  Spacing3 spacing_;
  std::array<int, 3> radius_{};
  std::vector<Offset3> offsets_;
  std::vector<Run> runs_;
  double weight_ = 0.0;
};

inline SphericalKernel make_spherical_kernel(double diameter, Spacing3 spacing) {
  return SphericalKernel(diameter, spacing);
}

// ---------------------------------------------------------------------------
// Raw-buffer kernels shared with the tensor module.

namespace detail {

inline Index3 valid_dims(Index3 in, Index3 box) {
  Index3 out{};
  for (int a = 0; a < 3; ++a) {
    if (in[a] < box[a]) throw ShapeError("input smaller than kernel box in valid mode");
    out[a] = in[a] - box[a] + 1;
  }
  return out;
}

/// out = in ⋆ N_d over fully covered positions. Per output voxel the values
/// are summed in the kernel's fixed offset order, then scaled by 1/n.
inline void sphere_correlate_valid(const double* in, Index3 in_dims, const SphericalKernel& k,
                                   double* out) {
  const Index3 od = valid_dims(in_dims, k.box());
  const auto r = k.radius();
  const std::size_t sx = 1, sy = in_dims[0], sz = in_dims[0] * in_dims[1];
  const double w = k.weight();
  for (std::size_t z = 0; z < od[2]; ++z)
    for (std::size_t y = 0; y < od[1]; ++y)
      for (std::size_t x = 0; x < od[0]; ++x) {
        const std::size_t cx = x + r[0], cy = y + r[1], cz = z + r[2];
        double acc = 0.0;
        for (const auto& run : k.runs()) {
          const double* row = in + (cz + run.dz) * sz + (cy + run.dy) * sy;
          for (int i = run.x0; i <= run.x1; ++i) acc += row[(cx + i) * sx];
        }
        out[(z * od[1] + y) * od[0] + x] = acc * w;
      }
}

/// Adjoint of sphere_correlate_valid: scatters gout back onto the input grid
/// (accumulating into gin).
inline void sphere_correlate_valid_adjoint(const double* gout, Index3 in_dims,
                                           const SphericalKernel& k, double* gin) {
  const Index3 od = valid_dims(in_dims, k.box());
  const auto r = k.radius();
  const std::size_t sy = in_dims[0], sz = in_dims[0] * in_dims[1];
  const double w = k.weight();
  for (std::size_t z = 0; z < od[2]; ++z)
    for (std::size_t y = 0; y < od[1]; ++y)
      for (std::size_t x = 0; x < od[0]; ++x) {
        const double g = gout[(z * od[1] + y) * od[0] + x] * w;
        if (g == 0.0) continue;
        const std::size_t cx = x + r[0], cy = y + r[1], cz = z + r[2];
        for (const auto& run : k.runs()) {
          double* row = gin + (cz + run.dz) * sz + (cy + run.dy) * sy;
          for (int i = run.x0; i <= run.x1; ++i) row[cx + i] += g;
        }
      }
}

/// Index map of a border-extended grid: padded voxel -> source voxel, or -1
/// for zero padding outside the source.
inline std::vector<std::ptrdiff_t> pad_index_map(Index3 src, std::array<int, 3> pad, Padding mode,
                                                 Index3* padded_dims = nullptr) {
  const Index3 pd{src[0] + 2 * pad[0], src[1] + 2 * pad[1], src[2] + 2 * pad[2]};
  if (padded_dims) *padded_dims = pd;
  std::vector<std::ptrdiff_t> map(pd[0] * pd[1] * pd[2]);
  std::size_t o = 0;
  for (std::size_t z = 0; z < pd[2]; ++z)
    for (std::size_t y = 0; y < pd[1]; ++y)
      for (std::size_t x = 0; x < pd[0]; ++x, ++o) {
        std::ptrdiff_t c[3] = {static_cast<std::ptrdiff_t>(x) - pad[0],
                               static_cast<std::ptrdiff_t>(y) - pad[1],
                               static_cast<std::ptrdiff_t>(z) - pad[2]};
        bool outside = false;
        for (int a = 0; a < 3; ++a) {
          const auto n = static_cast<std::ptrdiff_t>(src[a]);
          if (c[a] < 0 || c[a] >= n) {
            if (mode == Padding::Zero) outside = true;
            c[a] = mirror_index(c[a], n);
          }
        }
        map[o] = outside ? -1
                         : (c[2] * static_cast<std::ptrdiff_t>(src[1]) + c[1]) *
                                   static_cast<std::ptrdiff_t>(src[0]) +
                               c[0];
      }
  return map;
}

}  // namespace detail

/// Border-extended copy of v with pad voxels added on both sides of each axis.
inline Volume pad_volume(const Volume& v, std::array<int, 3> pad, Padding mode = Padding::Mirror) {
  Index3 pd{};
  const auto map = detail::pad_index_map(v.dims(), pad, mode, &pd);
  Volume out(pd, v.spacing());
  auto dst = out.data();
  auto src = v.data();
  for (std::size_t i = 0; i < map.size(); ++i) dst[i] = map[i] < 0 ? 0.0 : src[map[i]];
  return out;
}

/// V ⋆ N_d. Valid mode shrinks each axis by (box − 1); same mode extends the
/// border first (mirror by default).
inline Volume convolve_sphere(const Volume& v, const SphericalKernel& k, MapMode mode,
                              Padding padding = Padding::Mirror) {
  if (mode == MapMode::Same) return convolve_sphere(pad_volume(v, k.radius(), padding), k, MapMode::Valid);
  const Index3 od = detail::valid_dims(v.dims(), k.box());
  Volume out(od, v.spacing());
  detail::sphere_correlate_valid(v.data().data(), v.dims(), k, out.data().data());
  return out;
}

/// Same-mode sphere average using per-row prefix sums; O(rows) per voxel
/// instead of O(voxels). Suited to large kernels on whole volumes.
inline Volume convolve_sphere_fast(const Volume& v, const SphericalKernel& k,
                                   Padding padding = Padding::Mirror) {
  const Volume p = pad_volume(v, k.radius(), padding);
  const Index3 pd = p.dims();
  const auto r = k.radius();
  // prefix[(z*ny + y)*(nx+1) + x] = sum of row values [0, x)
  std::vector<double> prefix(pd[2] * pd[1] * (pd[0] + 1));
  for (std::size_t z = 0; z < pd[2]; ++z)
    for (std::size_t y = 0; y < pd[1]; ++y) {
      double* pre = &prefix[(z * pd[1] + y) * (pd[0] + 1)];
      pre[0] = 0.0;
      for (std::size_t x = 0; x < pd[0]; ++x) pre[x + 1] = pre[x] + p(x, y, z);
    }
  Volume out(v.dims(), v.spacing());
  const double w = k.weight();
  for (std::size_t z = 0; z < v.nz(); ++z)
    for (std::size_t y = 0; y < v.ny(); ++y)
      for (std::size_t x = 0; x < v.nx(); ++x) {
        double acc = 0.0;
        for (const auto& run : k.runs()) {
          const double* pre = &prefix[((z + r[2] + run.dz) * pd[1] + (y + r[1] + run.dy)) * (pd[0] + 1)];
          acc += pre[x + r[0] + run.x1 + 1] - pre[x + r[0] + run.x0];
        }
        out(x, y, z) = acc * w;
      }
  return out;
}

namespace detail {

template <typename F>
Volume pointwise(const Volume& v, F f) {
  Volume out(v.dims(), v.spacing());
  auto src = v.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = f(src[i]);
  return out;
}

}  // namespace detail

/// Local BMD: V ⋆ N_d.
inline Volume map_bmd(const Volume& v, const SphericalKernel& k, MapMode mode,
                      Padding padding = Padding::Mirror) {
  return convolve_sphere(v, k, mode, padding);
}

/// Local BV/TV: H_σ(V − t) ⋆ N_d.
inline Volume map_bvtv(const Volume& v, const SphericalKernel& k, double t, const FuzzyParams& fp,
                       MapMode mode, Padding padding = Padding::Mirror) {
  fp.validate();
  return convolve_sphere(detail::pointwise(v, [&](double x) { return fuzzy_heaviside(x, t, fp.sigma); }),
                         k, mode, padding);
}

/// Local TMD: ((V·H_σ(V − t)) ⋆ N_d) / softplus_ε(H_σ(V − t) ⋆ N_d).
inline Volume map_tmd(const Volume& v, const SphericalKernel& k, double t, const FuzzyParams& fp,
                      MapMode mode, Padding padding = Padding::Mirror) {
  fp.validate();
  const Volume h = detail::pointwise(v, [&](double x) { return fuzzy_heaviside(x, t, fp.sigma); });
  Volume vh = h;
  for (std::size_t i = 0; i < vh.size(); ++i) vh.data()[i] *= v.data()[i];
  Volume num = convolve_sphere(vh, k, mode, padding);
  const Volume den = convolve_sphere(h, k, mode, padding);
  for (std::size_t i = 0; i < num.size(); ++i)
    num.data()[i] /= softplus_eps(den.data()[i], fp.eps);
  return num;
}

/// Local sample standard deviation over the sphere.
inline Volume map_sd(const Volume& v, const SphericalKernel& k, MapMode mode,
                     Padding padding = Padding::Mirror) {
  if (k.count() < 2) throw ArgumentError("local SD needs a kernel with at least 2 voxels");
  const double bessel = 1.0 - k.sum_squared_weights();
  Volume m = convolve_sphere(v, k, mode, padding);
  const Volume m2 =
      convolve_sphere(detail::pointwise(v, [](double x) { return x * x; }), k, mode, padding);
  for (std::size_t i = 0; i < m.size(); ++i) {
    const double mean = m.data()[i];
    m.data()[i] = std::sqrt(std::max(0.0, (m2.data()[i] - mean * mean) / bessel));
  }
  return m;
}

// ---------------------------------------------------------------------------
// Global (crisp) parameters over a mask (voxels with mask > 0.5).

namespace detail {

template <typename F>
void for_masked(const Volume& v, const Volume* mask, F f) {
  if (mask && mask->dims() != v.dims()) throw ShapeError("mask dims differ from volume dims");
  auto d = v.data();
  for (std::size_t i = 0; i < d.size(); ++i)
    if (!mask || mask->data()[i] > 0.5) f(d[i]);
}

}  // namespace detail

inline double global_bmd(const Volume& v, const Volume* mask = nullptr) {
  double sum = 0.0;
  std::size_t n = 0;
  detail::for_masked(v, mask, [&](double x) { sum += x; ++n; });
  if (n == 0) throw ArgumentError("empty mask");
  return sum / static_cast<double>(n);
}

inline double global_bvtv(const Volume& v, double t, const Volume* mask = nullptr) {
  std::size_t n = 0, above = 0;
  detail::for_masked(v, mask, [&](double x) { ++n; above += x > t; });
  if (n == 0) throw ArgumentError("empty mask");
  return static_cast<double>(above) / static_cast<double>(n);
}

inline double global_tmd(const Volume& v, double t, const Volume* mask = nullptr) {
  double sum = 0.0;
  std::size_t above = 0;
  detail::for_masked(v, mask, [&](double x) {
    if (x > t) { sum += x; ++above; }
  });
  if (above == 0) throw DegenerateError("TMD undefined: no voxel above threshold");
  return sum / static_cast<double>(above);
}

}  // namespace bonedn
