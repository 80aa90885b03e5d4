#pragma once

// Patch-level evaluation of a filter against ground truth: per-voxel values
// and crisp BMD / TMD / BV/TV inside the spherical VOI of each output patch,
// arranged as repeated measurements over the noisy acquisitions.

#include <array>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "bonedn/dataset.hpp"
#include "bonedn/metrics.hpp"
#include "bonedn/network.hpp"
#include "bonedn/structmaps.hpp"
#include "bonedn/synth.hpp"

namespace bonedn {

enum class Parameter { Voxel, Bmd, Tmd, Bvtv };

inline constexpr std::array<Parameter, 4> kParameters{Parameter::Voxel, Parameter::Bmd, Parameter::Tmd,
                                                      Parameter::Bvtv};

inline std::string to_string(Parameter p) {
  switch (p) {
    case Parameter::Voxel: return "voxel";
    case Parameter::Bmd: return "bmd";
    case Parameter::Tmd: return "tmd";
    case Parameter::Bvtv: return "bvtv";
  }
  return "?";
}

struct EvalSettings {
  double threshold = 225.0;
  double voi_diameter_mm = 4.3;
  Spacing3 spacing = kClinicalSpacing;
};

/// Maps a full input patch to the valid-size centre patch it predicts.
using PatchFilter = std::function<Volume(const Volume& patch)>;

inline Volume crop_border(const Volume& patch) {
  const std::array<std::size_t, 3> b{kBorder[0], kBorder[1], kBorder[2]};
  Index3 size;
  for (int a = 0; a < 3; ++a) {
    if (patch.dims()[a] <= 2 * b[a]) throw ShapeError("patch smaller than the network border");
    size[a] = patch.dims()[a] - 2 * b[a];
  }
  return patch.crop({b[0], b[1], b[2]}, size);
}

inline PatchFilter unfiltered() {
  return [](const Volume& p) { return crop_border(p); };
}

inline PatchFilter gaussian_filter(Spacing3 sigma_mm) {
  return [sigma_mm](const Volume& p) { return crop_border(gaussian_baseline_filter(p, sigma_mm)); };
}

inline PatchFilter network_filter(const DenoiserNet& net) {
  return [&net](const Volume& p) { return infer_valid(net, Tensor5::from_volume(p)).to_volume(0, 0, p.spacing()); };
}

/// Crisp structural parameters inside a VOI mask.
struct VoiParameters {
  double bmd = 0.0;
  double bvtv = 0.0;
  double tmd = 0.0;
  bool tmd_defined = false;
};

inline VoiParameters voi_parameters(const Volume& v, const Volume& voi, double t) {
  VoiParameters p;
  p.bmd = global_bmd(v, &voi);
  p.bvtv = global_bvtv(v, t, &voi);
  p.tmd_defined = p.bvtv > 0.0;
  if (p.tmd_defined) p.tmd = global_tmd(v, t, &voi);
  return p;
}

/// Sphere of the given diameter centred in a box of the given dims.
inline Volume sphere_mask(Index3 dims, Spacing3 spacing, double diameter_mm) {
  const SphericalKernel k(diameter_mm, spacing);
  Volume m(dims, spacing, 0.0);
  const Index3 box = k.box();
  for (int a = 0; a < 3; ++a)
    if (box[a] > dims[a]) throw ShapeError("VOI sphere larger than the evaluation patch");
  for (const auto& o : k.offsets())
    m(static_cast<std::size_t>(static_cast<int>(dims[0] / 2) + o[0]),
      static_cast<std::size_t>(static_cast<int>(dims[1] / 2) + o[1]),
      static_cast<std::size_t>(static_cast<int>(dims[2] / 2) + o[2])) = 1.0;
  return m;
}

/// Repeated measurements for each parameter; TMD points whose ground truth
/// or any repetition has no voxel above the threshold are dropped and
/// counted. A parameter left with fewer than 2 points is absent.
struct Evaluation {
  std::map<Parameter, RepeatedMeasurements> measurements;
  std::size_t tmd_dropped = 0;

  bool has(Parameter p) const { return measurements.count(p) != 0; }
  const RepeatedMeasurements& at(Parameter p) const {
    if (!has(p)) throw DegenerateError("fewer than 2 patches with a defined " + to_string(p));
    return measurements.at(p);
  }
};

/// Filters every (entry, noisy index) patch and gathers the four parameter
/// sets with points = entries (voxels for the per-voxel set) and
/// repetitions = the given noisy indices.
inline Evaluation evaluate(const PairedDataset& ds, const std::vector<std::size_t>& entries,
                           const std::vector<std::size_t>& noisy, const PatchFilter& filter,
                           const EvalSettings& s = {}) {
  if (entries.size() < 2) throw ArgumentError("evaluation needs at least 2 patches");
  if (noisy.size() < 2) throw ArgumentError("evaluation needs at least 2 repetitions");
  const std::size_t n = noisy.size();
  std::vector<double> vx, vy;
  std::array<std::vector<double>, 3> px, py;  // bmd, tmd, bvtv
  Volume voi;
  std::size_t dropped = 0;
  for (std::size_t e : entries) {
    const Volume truth = crop_border(ds.truth_patch(e));
    if (voi.empty()) voi = sphere_mask(truth.dims(), s.spacing, s.voi_diameter_mm);
    const VoiParameters tp = voi_parameters(truth, voi, s.threshold);
    std::vector<Volume> out;
    for (std::size_t r : noisy) {
      out.push_back(filter(ds.noisy_patch(e, r)));
      if (out.back().dims() != truth.dims()) throw ShapeError("filter output dims differ from the evaluation patch");
    }
    for (std::size_t i = 0; i < truth.size(); ++i) {
      vy.push_back(truth.data()[i]);
      for (std::size_t r = 0; r < n; ++r) vx.push_back(out[r].data()[i]);
    }
    std::vector<VoiParameters> rp;
    bool tmd_ok = tp.tmd_defined;
    for (const auto& o : out) {
      rp.push_back(voi_parameters(o, voi, s.threshold));
      tmd_ok = tmd_ok && rp.back().tmd_defined;
    }
    py[0].push_back(tp.bmd);
    py[2].push_back(tp.bvtv);
    for (const auto& r : rp) {
      px[0].push_back(r.bmd);
      px[2].push_back(r.bvtv);
    }
    if (tmd_ok) {
      py[1].push_back(tp.tmd);
      for (const auto& r : rp) px[1].push_back(r.tmd);
    } else {
      ++dropped;
    }
  }
  Evaluation ev;
  ev.tmd_dropped = dropped;
  const std::size_t voxels = vy.size();
  ev.measurements.emplace(Parameter::Voxel, RepeatedMeasurements(voxels, n, std::move(vx), std::move(vy)));
  const std::array<Parameter, 3> ps{Parameter::Bmd, Parameter::Tmd, Parameter::Bvtv};
  for (int k = 0; k < 3; ++k) {
    if (py[k].size() < 2) continue;
    const std::size_t pts = py[k].size();
    ev.measurements.emplace(ps[k], RepeatedMeasurements(pts, n, std::move(px[k]), std::move(py[k])));
  }
  return ev;
}

/// Noisy indices of one tube current (all repetitions).
inline std::vector<std::size_t> noisy_indices_at(const PairedDataset& ds, double mAs) {
  const std::size_t c = ds.current_index(mAs);
  std::vector<std::size_t> out;
  for (int r = 0; r < ds.repetitions(); ++r) out.push_back(c * ds.repetitions() + r);
  return out;
}

inline std::vector<std::size_t> all_noisy_indices(const PairedDataset& ds) {
  std::vector<std::size_t> out(ds.noisy_per_coordinate());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = i;
  return out;
}

}  // namespace bonedn
