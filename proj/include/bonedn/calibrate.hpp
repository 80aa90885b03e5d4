#pragma once

#include "bonedn/structmaps.hpp"

namespace bonedn {

struct Calibration {
  double slope = 1.0;
  double intercept = 0.0;
  Volume calibrated;
};

/// Linear density calibration of `moving` onto `reference`: the least-squares
/// line through (low-pass moving, low-pass reference) pairs over the masked
/// voxels, where low-pass is the d-diameter sphere average. The fitted map is
/// applied to the unsmoothed moving volume.
inline Calibration calibrate_linear(const Volume& moving, const Volume& reference, const Volume& mask,
                                    double diameter_mm = 5.0) {
  if (moving.dims() != reference.dims() || moving.dims() != mask.dims())
    throw ShapeError("calibration volumes must share dims");
  if (moving.spacing() != reference.spacing())
    throw ShapeError("calibration volumes must share spacing");
  const SphericalKernel k(diameter_mm, moving.spacing());
  const Volume lm = convolve_sphere_fast(moving, k);
  const Volume lr = convolve_sphere_fast(reference, k);

  std::size_t n = 0;
  double mean_m = 0.0, mean_r = 0.0;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask.data()[i] > 0.5) {
      ++n;
      mean_m += lm.data()[i];
      mean_r += lr.data()[i];
    }
  if (n < 2) throw DegenerateError("calibration mask selects fewer than 2 voxels");
  mean_m /= static_cast<double>(n);
  mean_r /= static_cast<double>(n);
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask.data()[i] > 0.5) {
      const double dm = lm.data()[i] - mean_m;
      sxx += dm * dm;
      sxy += dm * (lr.data()[i] - mean_r);
    }
  if (!(sxx > 1e-24 * static_cast<double>(n) * (1.0 + mean_m * mean_m)))
    throw DegenerateError("calibration degenerate: constant low-pass map under mask");

  Calibration c;
  c.slope = sxy / sxx;
  c.intercept = mean_r - c.slope * mean_m;
  c.calibrated = moving;
  for (double& x : c.calibrated.data()) x = c.slope * x + c.intercept;
  return c;
}

}  // namespace bonedn
