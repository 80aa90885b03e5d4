#pragma once

// Structural-parameter losses: per-map MSE terms, the Gaussian-weighted
// multi-threshold sum, weighted compounds, and the two training presets.

#include <cmath>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bonedn/common.hpp"
#include "bonedn/structmaps.hpp"
#include "bonedn/tensor.hpp"

namespace bonedn {

enum class MapKind { Voxelwise, Bmd, Bvtv, Tmd, Sd };

inline std::string to_string(MapKind k) {
  switch (k) {
    case MapKind::Voxelwise: return "voxelwise";
    case MapKind::Bmd: return "bmd";
    case MapKind::Bvtv: return "bvtv";
    case MapKind::Tmd: return "tmd";
    case MapKind::Sd: return "sd";
  }
  return "?";
}

inline MapKind map_kind_from_string(const std::string& s) {
  if (s == "voxelwise") return MapKind::Voxelwise;
  if (s == "bmd") return MapKind::Bmd;
  if (s == "bvtv") return MapKind::Bvtv;
  if (s == "tmd") return MapKind::Tmd;
  if (s == "sd") return MapKind::Sd;
  throw ArgumentError("unknown map kind '" + s + "'");
}

inline bool is_thresholded(MapKind k) { return k == MapKind::Bvtv || k == MapKind::Tmd; }

/// Default threshold grid 125, 150, ..., 325 mg/cm^3.
inline std::vector<double> default_thresholds() {
  std::vector<double> t;
  for (int v = 125; v <= 325; v += 25) t.push_back(v);
  return t;
}

/// Gaussian ordinates exp(−(t−μ)²/(2σ²)) normalised to sum 1.
inline std::vector<double> threshold_weights(double mu, double sigma, std::span<const double> thresholds) {
  if (!(sigma > 0.0)) throw ArgumentError("threshold weight sigma must be > 0");
  if (thresholds.empty()) throw ArgumentError("threshold list is empty");
  std::vector<double> b;
  double total = 0.0;
  for (double t : thresholds) {
    const double z = (t - mu) / sigma;
    b.push_back(std::exp(-0.5 * z * z));
    total += b.back();
  }
  for (double& v : b) v /= total;
  return b;
}

struct LossSpec {
  MapKind kind = MapKind::Voxelwise;
  double diameter_mm = 0.0;         // unused for voxelwise
  std::vector<double> thresholds;   // bvtv / tmd only
  FuzzyParams fuzzy;
  double weight_mu = 225.0;         // centre of the threshold weights
  double weight_sigma = 100.0;      // spread of the threshold weights
  double norm = 1.0;                // a_f
  double weight = 1.0;              // w_f

  void validate() const {
    if (is_thresholded(kind) != !thresholds.empty())
      throw ArgumentError("thresholds must be given exactly for bvtv/tmd terms");
    if (!(norm > 0.0)) throw ArgumentError("loss normalisation must be > 0");
    if (!(weight >= 0.0)) throw ArgumentError("loss weight must be >= 0");
    if (kind != MapKind::Voxelwise && !(diameter_mm > 0.0))
      throw ArgumentError("structural loss needs a positive kernel diameter");
    fuzzy.validate();
  }
};

struct CompoundSpec {
  std::string name;
  std::vector<LossSpec> terms;

  void validate() const {
    if (terms.empty()) throw ArgumentError("compound loss has no terms");
    double total = 0.0;
    for (const auto& t : terms) {
      t.validate();
      total += t.weight;
    }
    if (!(total > 0.0)) throw ArgumentError("compound loss weights must not all be zero");
  }
};

/// Neighbourhood diameters whose spheres have 3×3×1, 9×9×5 and 17×17×9
/// bounding boxes on the clinical grid (midpoints of the admissible ranges).
inline constexpr double kBmdSmallDiameter = 0.60;
inline constexpr double kBmdMediumDiameter = 1.50;
inline constexpr double kSdDiameter = 2.90;
/// Sphere spanning the whole 25×25×13 valid output of a training patch.
inline constexpr double kPatchVoiDiameter = 4.3;

inline LossSpec make_term(MapKind kind, double diameter_mm, double weight) {
  LossSpec s;
  s.kind = kind;
  s.diameter_mm = diameter_mm;
  if (is_thresholded(kind)) s.thresholds = default_thresholds();
  s.weight = weight;
  return s;
}

/// "nn_sp": 0.64 TMD + 0.32 BV/TV + 0.04 BMD on 4.3 mm spheres.
/// "nn_bmd": 0.4 voxelwise + 0.1 BMD(d1) + 0.1 BMD(d2) + 0.4 SD(d3).
inline CompoundSpec preset(const std::string& name) {
  CompoundSpec c;
  c.name = name;
  if (name == "nn_sp") {
    c.terms = {make_term(MapKind::Tmd, kPatchVoiDiameter, 0.64), make_term(MapKind::Bvtv, kPatchVoiDiameter, 0.32),
               make_term(MapKind::Bmd, kPatchVoiDiameter, 0.04)};
  } else if (name == "nn_bmd") {
    c.terms = {make_term(MapKind::Voxelwise, 0.0, 0.4), make_term(MapKind::Bmd, kBmdSmallDiameter, 0.1),
               make_term(MapKind::Bmd, kBmdMediumDiameter, 0.1), make_term(MapKind::Sd, kSdDiameter, 0.4)};
  } else {
    throw ArgumentError("unknown loss preset '" + name + "'");
  }
  return c;
}

// ---------------------------------------------------------------------------
// Differentiable maps

/// f(V) for one structural map on the tape, valid mode.
inline Var structural_map(Var v, MapKind kind, const SphericalKernel* k, double t, const FuzzyParams& fp) {
  switch (kind) {
    case MapKind::Voxelwise: return v;
    case MapKind::Bmd: return kernel_conv(v, *k);
    case MapKind::Bvtv: return kernel_conv(sigmoid_threshold(v, t, fp.sigma), *k);
    case MapKind::Tmd: {
      Var h = sigmoid_threshold(v, t, fp.sigma);
      return div(kernel_conv(mul(v, h), *k), softplus_eps(kernel_conv(h, *k), fp.eps));
    }
    case MapKind::Sd: {
      if (k->count() < 2) throw ArgumentError("local SD needs a kernel with at least 2 voxels");
      Var m = kernel_conv(v, *k);
      Var m2 = kernel_conv(square(v), *k);
      return sqrt_clamped(scale(sub(m2, square(m)), 1.0 / (1.0 - k->sum_squared_weights())));
    }
  }
  throw ArgumentError("unknown map kind");
}

/// Repeats a batch-1 tensor along the batch axis.
inline Var replicate(Var a, std::size_t n) {
  const Shape5 s = a.shape();
  if (s.n == n) return a;
  if (s.n != 1) throw ShapeError("can only replicate a batch of one");
  Tensor5 y({n, s.c, s.z, s.y, s.x});
  const std::size_t item = s.size();
  for (std::size_t b = 0; b < n; ++b)
    std::copy(a.value().data().begin(), a.value().data().end(), y.data().begin() + b * item);
  return a.tape->record(std::move(y), {a}, [a, n, item](Tape& t, const Tensor5& g) {
    Tensor5 gi(t.value(a).shape());
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t i = 0; i < item; ++i) gi[i] += g[b * item + i];
    t.accumulate(a, gi);
  });
}

inline Var mse(Var a, Var b) { return mean(square(sub(a, b))); }

/// A compound spec with its spherical kernels built for one voxel grid.
class CompiledLoss {
 public:
  CompiledLoss(CompoundSpec spec, Spacing3 spacing) : spec_(std::move(spec)), spacing_(spacing) {
    spec_.validate();
    for (const auto& t : spec_.terms) {
      kernels_.push_back(t.kind == MapKind::Voxelwise ? nullptr
                                                      : std::make_shared<SphericalKernel>(t.diameter_mm, spacing));
      tweights_.push_back(is_thresholded(t.kind) ? threshold_weights(t.weight_mu, t.weight_sigma, t.thresholds)
                                                 : std::vector<double>{});
    }
  }

  const CompoundSpec& spec() const { return spec_; }
  CompoundSpec& spec() { return spec_; }
  const Spacing3& spacing() const { return spacing_; }
  std::size_t size() const { return spec_.terms.size(); }
  const SphericalKernel* kernel(std::size_t i) const { return kernels_.at(i).get(); }
  const std::vector<double>& threshold_weights_of(std::size_t i) const { return tweights_.at(i); }

  /// a_f · MSE(f(filtered), f(truth)) for a threshold-free term.
  Var elementary(std::size_t i, Var filtered, Var truth) const {
    const LossSpec& s = spec_.terms.at(i);
    if (is_thresholded(s.kind)) throw ArgumentError("elementary loss on a thresholded map");
    truth = replicate(truth, filtered.shape().n);
    if (filtered.shape() != truth.shape()) throw ShapeError("filtered and truth shapes differ");
    const Var d = mse(structural_map(filtered, s.kind, kernel(i), 0.0, s.fuzzy),
                      structural_map(truth, s.kind, kernel(i), 0.0, s.fuzzy));
    return scale(d, s.norm);
  }

  /// a_f · Σ_t b_t · MSE(f_t(filtered), f_t(truth)).
  Var multithreshold(std::size_t i, Var filtered, Var truth) const {
    const LossSpec& s = spec_.terms.at(i);
    if (!is_thresholded(s.kind)) throw ArgumentError("multi-threshold loss needs a bvtv or tmd term");
    if (s.thresholds.empty()) throw ArgumentError("multi-threshold loss without thresholds");
    truth = replicate(truth, filtered.shape().n);
    if (filtered.shape() != truth.shape()) throw ShapeError("filtered and truth shapes differ");
    std::vector<Var> per_t;
    for (double t : s.thresholds)
      per_t.push_back(mse(structural_map(filtered, s.kind, kernel(i), t, s.fuzzy),
                          structural_map(truth, s.kind, kernel(i), t, s.fuzzy)));
    return scale(weighted_sum(stack_scalars(per_t), threshold_weights_of(i)), s.norm);
  }

  /// L_f of term i (dispatching on the map kind).
  Var term(std::size_t i, Var filtered, Var truth) const {
    return is_thresholded(spec_.terms.at(i).kind) ? multithreshold(i, filtered, truth)
                                                  : elementary(i, filtered, truth);
  }

  /// Σ_f w_f L_f.
  Var compound(Var filtered, Var truth) const {
    std::vector<Var> parts;
    std::vector<double> w;
    for (std::size_t i = 0; i < size(); ++i) {
      parts.push_back(term(i, filtered, truth));
      w.push_back(spec_.terms[i].weight);
    }
    return weighted_sum(stack_scalars(parts), std::move(w));
  }

  /// Constant-input evaluation of the unnormalised term i (a_f = 1).
  double raw_term_value(std::size_t i, const Tensor5& filtered, const Tensor5& truth) const {
    Tape tape;
    const Var f = tape.leaf(filtered), t = tape.leaf(truth);
    return term(i, f, t).value().item() / spec_.terms.at(i).norm;
  }

 private:
  CompoundSpec spec_;
  Spacing3 spacing_;
  std::vector<std::shared_ptr<const SphericalKernel>> kernels_;
  std::vector<std::vector<double>> tweights_;
};

/// Normalisation factors a_f = 1 / mean over pairs of the unnormalised term
/// computed on unfiltered data (the filter is the identity). Each pair is
/// (noisy, truth) already cropped to the loss domain.
inline std::vector<double> normalization_factors(const CompiledLoss& loss,
                                                 std::span<const std::pair<Tensor5, Tensor5>> pairs) {
  if (pairs.empty()) throw ArgumentError("normalisation needs a non-empty training set");
  std::vector<double> out;
  for (std::size_t i = 0; i < loss.size(); ++i) {
    double total = 0.0;
    for (const auto& [noisy, truth] : pairs) total += loss.raw_term_value(i, noisy, truth);
    const double m = total / static_cast<double>(pairs.size());
    if (!(m > 0.0) || !std::isfinite(m))
      throw DegenerateError("normalisation degenerate: unfiltered loss of term " + to_string(loss.spec().terms[i].kind) +
                            " is zero");
    out.push_back(1.0 / m);
  }
  return out;
}

inline void apply_normalization(CompiledLoss& loss, std::span<const double> factors) {
  if (factors.size() != loss.size()) throw ArgumentError("normalisation factor count mismatch");
  for (std::size_t i = 0; i < factors.size(); ++i) loss.spec().terms[i].norm = factors[i];
}

}  // namespace bonedn
