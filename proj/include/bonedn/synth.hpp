#pragma once

// Synthetic trabecular phantoms and simulated low-dose acquisitions, plus a
// separable Gaussian smoothing filter used as the comparison baseline.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <vector>

#include "bonedn/common.hpp"
#include "bonedn/structmaps.hpp"
#include "bonedn/volume.hpp"

namespace bonedn {

inline constexpr double kFwhmPerSigma = 2.3548200450309493;  // 2·sqrt(2·ln 2)

/// Portable standard-normal stream (Box-Muller on 53-bit uniforms).
class NormalStream {
 public:
  explicit NormalStream(std::uint64_t seed) : rng_(seed) {}

  double operator()() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1;
    do u1 = uniform(); while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

 private:
  double uniform() { return static_cast<double>(rng_() >> 11) * 0x1.0p-53; }

  std::mt19937_64 rng_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

// ---------------------------------------------------------------------------
// Gaussian smoothing

/// Sampled Gaussian with standard deviation sigma (voxels), truncated at
/// 4 sigma and normalised to unit sum. sigma 0 gives the identity tap.
inline std::vector<double> gaussian_taps(double sigma) {
  if (!(sigma >= 0.0)) throw ArgumentError("Gaussian sigma must be >= 0");
  if (sigma == 0.0) return {1.0};
  const int r = std::max(1, static_cast<int>(std::ceil(4.0 * sigma)));
  std::vector<double> k(2 * r + 1);
  double s = 0.0;
  for (int i = -r; i <= r; ++i) s += k[i + r] = std::exp(-0.5 * (i / sigma) * (i / sigma));
  for (double& v : k) v /= s;
  return k;
}

inline double l2_norm(const std::vector<double>& k) {
  double s = 0.0;
  for (double v : k) s += v * v;
  return std::sqrt(s);
}

namespace detail {

/// In-place 1D filtering along one axis with mirrored borders.
inline void filter_axis(std::vector<double>& data, const Index3& dims, int axis, const std::vector<double>& taps) {
  if (taps.size() == 1) return;
  const std::size_t n = dims[axis];
  const std::size_t stride = axis == 0 ? 1 : axis == 1 ? dims[0] : dims[0] * dims[1];
  const int r = static_cast<int>(taps.size() / 2);
  std::vector<double> line(n), out(n);
  const std::size_t lines = data.size() / n;
  for (std::size_t l = 0; l < lines; ++l) {
    std::size_t base;
    if (axis == 0) {
      base = l * n;
    } else if (axis == 1) {
      base = (l / dims[0]) * dims[0] * dims[1] + l % dims[0];
    } else {
      base = l;
    }
    for (std::size_t i = 0; i < n; ++i) line[i] = data[base + i * stride];
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (int k = -r; k <= r; ++k)
        s += taps[k + r] * line[mirror_index(static_cast<std::ptrdiff_t>(i) + k, static_cast<std::ptrdiff_t>(n))];
      out[i] = s;
    }
    for (std::size_t i = 0; i < n; ++i) data[base + i * stride] = out[i];
  }
}

inline std::array<std::vector<double>, 3> taps_mm(const Spacing3& spacing, const Spacing3& sigma_mm) {
  std::array<std::vector<double>, 3> t;
  for (int a = 0; a < 3; ++a) t[a] = gaussian_taps(sigma_mm[a] / spacing[a]);
  return t;
}

}  // namespace detail

/// Separable Gaussian smoothing with per-axis sigma in mm; mirrored borders.
inline Volume gaussian_smooth(const Volume& v, const Spacing3& sigma_mm) {
  const auto taps = detail::taps_mm(v.spacing(), sigma_mm);
  std::vector<double> d(v.data().begin(), v.data().end());
  for (int a = 0; a < 3; ++a) detail::filter_axis(d, v.dims(), a, taps[a]);
  return Volume(v.dims(), v.spacing(), std::move(d));
}

/// Baseline comparator filter.
inline Volume gaussian_baseline_filter(const Volume& v, const Spacing3& sigma_mm) {
  for (double s : sigma_mm)
    if (!(s >= 0.0)) throw ArgumentError("baseline sigma must be >= 0");
  return gaussian_smooth(v, sigma_mm);
}

/// Stationary zero-mean unit-variance Gaussian noise smoothed by a Gaussian
/// of sigma_mm. Generated on a grid padded by the kernel radius so every
/// output voxel sees a full kernel, then divided by the kernel l2 norm.
inline Volume correlated_noise(Index3 dims, Spacing3 spacing, const Spacing3& sigma_mm, std::uint64_t seed) {
  const auto taps = detail::taps_mm(spacing, sigma_mm);
  Index3 pd;
  for (int a = 0; a < 3; ++a) pd[a] = dims[a] + taps[a].size() - 1;
  NormalStream normal(seed);
  std::vector<double> d(pd[0] * pd[1] * pd[2]);
  for (double& x : d) x = normal();
  double norm = 1.0;
  for (int a = 0; a < 3; ++a) {
    detail::filter_axis(d, pd, a, taps[a]);
    norm *= l2_norm(taps[a]);
  }
  Volume padded(pd, spacing, std::move(d));
  Index3 corner;
  for (int a = 0; a < 3; ++a) corner[a] = taps[a].size() / 2;
  Volume out = padded.crop(corner, dims);
  for (double& x : out.data()) x /= norm;
  return out;
}

// ---------------------------------------------------------------------------
// Phantoms

struct PhantomSpec {
  Index3 dims{121, 121, 61};
  Spacing3 spacing = kClinicalSpacing;
  double correlation_length_mm = 0.6;  // autocorrelation sigma of the random field
  double heterogeneity = 0.35;         // weight of the large-scale field
  double heterogeneity_length_mm = 3.0;
  double target_bvtv = 0.17;
  double bone_density = 370.0;   // mg/cm^3
  double marrow_density = 0.0;   // mg/cm^3
  double pv_blur_fwhm_mm = 0.25;
  double threshold = 225.0;      // segmentation threshold the target refers to
  std::uint64_t seed = 1;

  void validate() const {
    for (int a = 0; a < 3; ++a) {
      if (dims[a] == 0) throw ArgumentError("phantom dims must be positive");
      if (!(spacing[a] > 0.0)) throw ArgumentError("phantom spacing must be positive");
    }
    if (!(target_bvtv > 0.0 && target_bvtv < 1.0)) throw ArgumentError("target BV/TV must lie in (0, 1)");
    if (!(bone_density > marrow_density)) throw ArgumentError("bone density must exceed marrow density");
    if (!(correlation_length_mm > 0.0)) throw ArgumentError("correlation length must be > 0");
    if (!(heterogeneity >= 0.0) || !(heterogeneity_length_mm > 0.0))
      throw ArgumentError("heterogeneity parameters out of range");
    if (!(pv_blur_fwhm_mm >= 0.0)) throw ArgumentError("partial-volume blur must be >= 0");
  }
};

/// Binary structure of `field > level` with densities assigned and the
/// partial-volume blur applied.
inline Volume render_phantom(const Volume& field, double level, const PhantomSpec& s) {
  Volume v(field.dims(), field.spacing());
  for (std::size_t i = 0; i < v.size(); ++i)
    v.data()[i] = field.data()[i] > level ? s.bone_density : s.marrow_density;
  const double sg = s.pv_blur_fwhm_mm / kFwhmPerSigma;
  return gaussian_smooth(v, {sg, sg, sg});
}

/// Unit-variance random field: small-scale texture plus weighted
/// large-scale modulation.
inline Volume phantom_field(const PhantomSpec& s) {
  // A Gaussian kernel of sigma k gives an autocorrelation of sigma k·sqrt(2).
  const double ks = s.correlation_length_mm / std::numbers::sqrt2;
  Volume fine = correlated_noise(s.dims, s.spacing, {ks, ks, ks}, mix_seed(s.seed, 0x6669));
  if (s.heterogeneity > 0.0) {
    const double kl = s.heterogeneity_length_mm / std::numbers::sqrt2;
    Volume white(s.dims, s.spacing);
    NormalStream normal(mix_seed(s.seed, 0x6c61));
    for (double& x : white.data()) x = normal();
    Volume coarse = gaussian_smooth(white, {kl, kl, kl});
    double m = 0.0, q = 0.0;
    for (double x : coarse.data()) m += x;
    m /= static_cast<double>(coarse.size());
    for (double x : coarse.data()) q += (x - m) * (x - m);
    const double sd = std::sqrt(q / static_cast<double>(coarse.size()));
    for (std::size_t i = 0; i < fine.size(); ++i)
      fine.data()[i] += s.heterogeneity * (coarse.data()[i] - m) / sd;
  }
  return fine;
}

/// Ground-truth phantom whose global BV/TV at the configured threshold matches the
/// target: bisection over the field quantile used as the binarisation level.
inline Volume generate_phantom(const PhantomSpec& s) {
  s.validate();
  const Volume field = phantom_field(s);
  std::vector<double> sorted(field.data().begin(), field.data().end());
  std::sort(sorted.begin(), sorted.end());
  const auto level_at = [&](double q) {
    const auto i = static_cast<std::size_t>(std::clamp(q, 0.0, 1.0) * static_cast<double>(sorted.size() - 1));
    return sorted[i];
  };
  // BV/TV decreases as the binarisation quantile grows.
  double lo = 0.0, hi = 1.0;
  Volume best;
  double best_err = std::numeric_limits<double>::infinity();
  for (int it = 0; it < 30; ++it) {
    const double q = 0.5 * (lo + hi);
    Volume v = render_phantom(field, level_at(q), s);
    const double bvtv = global_bvtv(v, s.threshold);
    const double err = std::abs(bvtv - s.target_bvtv);
    if (err < best_err) {
      best_err = err;
      best = std::move(v);
    }
    if (err < 1e-4) break;
    (bvtv > s.target_bvtv ? lo : hi) = q;
  }
  if (best_err > 0.03)
    throw DegenerateError("phantom BV/TV target " + std::to_string(s.target_bvtv) +
                          " unattainable (closest miss " + std::to_string(best_err) + ")");
  return best;
}

// ---------------------------------------------------------------------------
// Acquisitions

struct ScannerSpec {
  double psf_fwhm_inplane_mm = 0.50;
  double psf_fwhm_axial_mm = 0.67;
  double noise_sd_ref = 320.0;  // mg/cm^3 at the reference current
  double reference_mAs = 100.0;
  double noise_correlation_mm = 0.3;  // in-plane autocorrelation sigma
  std::uint64_t seed = 7;

  void validate() const {
    if (!(psf_fwhm_inplane_mm > 0.0 && psf_fwhm_axial_mm > 0.0 && noise_sd_ref > 0.0 && reference_mAs > 0.0 &&
          noise_correlation_mm > 0.0))
      throw ArgumentError("scanner parameters must be positive");
  }

  double noise_sd(double mAs) const { return noise_sd_ref * std::sqrt(reference_mAs / mAs); }
};

inline Volume psf_blur(const Volume& gt, const ScannerSpec& s) {
  const double sp = s.psf_fwhm_inplane_mm / kFwhmPerSigma, sa = s.psf_fwhm_axial_mm / kFwhmPerSigma;
  return gaussian_smooth(gt, {sp, sp, sa});
}

/// PSF-blurred ground truth plus in-plane correlated Gaussian noise whose SD
/// follows the inverse square root of the tube current.
inline Volume simulate_scan(const Volume& gt, const ScannerSpec& s, double mAs, std::uint64_t repetition) {
  s.validate();
  if (!(mAs > 0.0)) throw ArgumentError("tube current must be > 0");
  Volume out = psf_blur(gt, s);
  const double kc = s.noise_correlation_mm / std::numbers::sqrt2;
  const Volume noise = correlated_noise(gt.dims(), gt.spacing(), {kc, kc, 0.0},
                                        mix_seed(s.seed, std::bit_cast<std::uint64_t>(mAs), repetition));
  const double sd = s.noise_sd(mAs);
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] += sd * noise.data()[i];
  return out;
}

}  // namespace bonedn
