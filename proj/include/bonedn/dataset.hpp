#pragma once

// Paired ground-truth / noisy patch datasets, coordinate-disjoint cohort
// splitting and the JSON manifests that describe them on disk.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bonedn/common.hpp"
#include "bonedn/volume.hpp"

namespace bonedn {

enum class Cohort { Train, Validation, Test };

inline std::string to_string(Cohort c) {
  switch (c) {
    case Cohort::Train: return "train";
    case Cohort::Validation: return "validation";
    case Cohort::Test: return "test";
  }
  return "?";
}

struct SplitFractions {
  double train = 0.70;
  double validation = 0.10;
  double test = 0.20;
};

/// Uniform integer in [0, n) from a 64-bit engine, independent of the
/// standard library's distribution implementation.
inline std::size_t uniform_index(std::mt19937_64& rng, std::size_t n) {
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t r;
  do r = rng(); while (r >= limit);
  return static_cast<std::size_t>(r % n);
}

template <typename T>
void shuffle_in_place(std::vector<T>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[uniform_index(rng, i)]);
}

/// Number of folds implied by the test fraction (1/test).
inline int fold_count(const SplitFractions& f) {
  return static_cast<int>(std::lround(1.0 / f.test));
}

/// Cohort of each of n coordinates for one fold. One seeded permutation is
/// shared by all folds; fold k tests on the k-th of K contiguous blocks, so
/// the K test sets partition the coordinates. Validation takes the next
/// round(n·validation) coordinates after the test block (cyclically).
inline std::vector<Cohort> split_dataset(std::size_t n, const SplitFractions& f, int fold,
                                         std::uint64_t seed) {
  if (std::abs(f.train + f.validation + f.test - 1.0) > 1e-9)
    throw ArgumentError("split fractions must sum to 1");
  if (f.train <= 0.0 || f.validation < 0.0 || f.test <= 0.0)
    throw ArgumentError("split fractions must be positive");
  if (n < 10) throw ArgumentError("splitting needs at least 10 coordinates");
  const int k = fold_count(f);
  if (std::abs(k * f.test - 1.0) > 1e-9)
    throw ArgumentError("test fraction must be the reciprocal of an integer fold count");
  if (fold < 0 || fold >= k) throw ArgumentError("fold index out of range");

  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(mix_seed(seed, 0x73706c6974ULL));
  shuffle_in_place(perm, rng);

  std::vector<Cohort> out(n, Cohort::Train);
  const std::size_t lo = static_cast<std::size_t>(fold) * n / k;
  const std::size_t hi = static_cast<std::size_t>(fold + 1) * n / k;
  for (std::size_t i = lo; i < hi; ++i) out[perm[i]] = Cohort::Test;
  const auto n_val = static_cast<std::size_t>(std::llround(static_cast<double>(n) * f.validation));
  for (std::size_t j = 0; j < n_val && j < n - (hi - lo); ++j) out[perm[(hi + j) % n]] = Cohort::Validation;
  return out;
}

// ---------------------------------------------------------------------------

struct CoordKey {
  std::string phantom;
  Index3 corner{};
  auto operator<=>(const CoordKey&) const = default;
};

/// Repeated noisy acquisitions of co-registered ground-truth volumes, cut
/// into patches on a shared coordinate lattice.
class PairedDataset {
 public:
  struct Source {
    std::string id;
    Volume truth;
    /// noisy[c * repetitions + r] for current index c and repetition r.
    std::vector<Volume> noisy;
  };
  struct Entry {
    CoordKey key;
    std::size_t source = 0;
  };

  PairedDataset(std::vector<double> currents, int repetitions, Index3 patch_size = kPatchSize)
      : currents_(std::move(currents)), repetitions_(repetitions), patch_size_(patch_size) {
    if (currents_.empty() || repetitions_ < 1) throw ArgumentError("dataset needs currents and repetitions");
  }

  /// Adds a phantom and its noisy scans; lattice coordinates whose patch is
  /// fully inside the mask become entries.
  void add_source(Source s, const Volume& mask, Index3 offset = kPatchOffset) {
    if (s.noisy.size() != noisy_per_coordinate())
      throw ArgumentError("source '" + s.id + "' has an incomplete current x repetition grid");
    for (const auto& v : s.noisy)
      if (v.dims() != s.truth.dims()) throw ShapeError("noisy volume dims differ from ground truth");
    if (mask.dims() != s.truth.dims()) throw ShapeError("mask dims differ from ground truth");
    const std::size_t idx = sources_.size();
    for (const auto& c : masked_patch_corners(mask, patch_size_, offset))
      entries_.push_back({{s.id, c}, idx});
    sources_.push_back(std::move(s));
  }

  /// Adds a phantom with explicit patch corners.
  void add_source(Source s, const std::vector<Index3>& corners) {
    if (s.noisy.size() != noisy_per_coordinate())
      throw ArgumentError("source '" + s.id + "' has an incomplete current x repetition grid");
    const std::size_t idx = sources_.size();
    for (const auto& c : corners) {
      for (int a = 0; a < 3; ++a)
        if (c[a] + patch_size_[a] > s.truth.dims()[a]) throw ShapeError("patch corner outside volume");
      entries_.push_back({{s.id, c}, idx});
    }
    sources_.push_back(std::move(s));
  }

  const std::vector<double>& currents() const { return currents_; }
  int repetitions() const { return repetitions_; }
  std::size_t noisy_per_coordinate() const { return currents_.size() * static_cast<std::size_t>(repetitions_); }
  const Index3& patch_size() const { return patch_size_; }
  const std::vector<Source>& sources() const { return sources_; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  Volume truth_patch(std::size_t e) const {
    const auto& en = entries_.at(e);
    return sources_[en.source].truth.crop(en.key.corner, patch_size_);
  }

  /// Noisy patch n = current_index · repetitions + repetition.
  Volume noisy_patch(std::size_t e, std::size_t n) const {
    const auto& en = entries_.at(e);
    return sources_[en.source].noisy.at(n).crop(en.key.corner, patch_size_);
  }

  std::size_t current_index(double mAs) const {
    for (std::size_t i = 0; i < currents_.size(); ++i)
      if (currents_[i] == mAs) return i;
    throw ArgumentError("dataset has no scans at " + std::to_string(mAs) + " mAs");
  }

  // Folds -----------------------------------------------------------------

  void assign_folds(const SplitFractions& f, std::uint64_t seed) {
    fractions_ = f;
    folds_.clear();
    for (int k = 0; k < fold_count(f); ++k) folds_.push_back(split_dataset(entries_.size(), f, k, seed));
  }

  void set_folds(std::vector<std::vector<Cohort>> folds) {
    for (const auto& f : folds)
      if (f.size() != entries_.size()) throw ArgumentError("fold assignment length mismatch");
    folds_ = std::move(folds);
  }

  const std::vector<std::vector<Cohort>>& folds() const { return folds_; }
  int fold_total() const { return static_cast<int>(folds_.size()); }

  std::vector<std::size_t> cohort(int fold, Cohort c) const {
    if (fold < 0 || fold >= fold_total()) throw ArgumentError("fold index out of range");
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < entries_.size(); ++i)
      if (folds_[fold][i] == c) out.push_back(i);
    return out;
  }

 private:
  std::vector<double> currents_;
  int repetitions_;
  Index3 patch_size_;
  std::vector<Source> sources_;
  std::vector<Entry> entries_;
  SplitFractions fractions_;
  std::vector<std::vector<Cohort>> folds_;
};

// ---------------------------------------------------------------------------
// Manifests

using json = nlohmann::json;

struct ManifestEntry {
  std::string file;  // relative to the manifest directory
  Provenance provenance;
  bool has_corner = false;
};

inline json to_json(const ManifestEntry& e) {
  json j{{"file", e.file},
         {"phantom", e.provenance.phantom},
         {"mAs", e.provenance.mAs},
         {"repetition", e.provenance.repetition},
         {"role", to_string(e.provenance.role)}};
  if (e.has_corner) j["corner"] = e.provenance.corner;
  return j;
}

inline ManifestEntry manifest_entry_from_json(const json& j) {
  ManifestEntry e;
  try {
    e.file = j.at("file").get<std::string>();
    e.provenance.phantom = j.at("phantom").get<std::string>();
    e.provenance.mAs = j.at("mAs").get<double>();
    e.provenance.repetition = j.at("repetition").get<int>();
    e.provenance.role = role_from_string(j.at("role").get<std::string>());
    if (j.contains("corner")) {
      e.provenance.corner = j.at("corner").get<Index3>();
      e.has_corner = true;
    }
  } catch (const json::exception& ex) {
    throw FormatError(std::string("manifest entry: ") + ex.what());
  }
  return e;
}

/// Volume manifest written by the phantom stage.
struct VolumeManifest {
  std::vector<ManifestEntry> volumes;
  std::map<std::string, std::string> masks;  // phantom id -> mask file

  json to_json() const {
    json j;
    j["volumes"] = json::array();
    for (const auto& e : volumes) j["volumes"].push_back(bonedn::to_json(e));
    j["masks"] = masks;
    return j;
  }

  static VolumeManifest from_json(const json& j) {
    VolumeManifest m;
    if (!j.contains("volumes")) throw FormatError("manifest: missing 'volumes'");
    for (const auto& e : j.at("volumes")) m.volumes.push_back(manifest_entry_from_json(e));
    if (j.contains("masks")) m.masks = j.at("masks").get<std::map<std::string, std::string>>();
    return m;
  }
};

inline json read_json(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw FormatError("cannot open " + p.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(p.string() + ": " + e.what());
  }
}

inline void write_json(const json& j, const std::filesystem::path& p) {
  std::ofstream out(p);
  if (!out) throw Error("cannot open " + p.string() + " for writing");
  out << j.dump(2) << '\n';
}

/// Dataset manifest: one entry per patch (ground truth and every noisy
/// repetition) referencing the calibrated source volume it is cut from,
/// plus the coordinate list and fold assignment.
inline json dataset_to_json(const PairedDataset& ds, const std::vector<std::string>& truth_files,
                            const std::vector<std::vector<std::string>>& noisy_files) {
  json j;
  j["patch_size"] = ds.patch_size();
  j["currents"] = ds.currents();
  j["repetitions"] = ds.repetitions();
  j["sources"] = json::array();
  for (std::size_t s = 0; s < ds.sources().size(); ++s)
    j["sources"].push_back({{"phantom", ds.sources()[s].id}, {"ground_truth", truth_files[s]},
                            {"noisy", noisy_files[s]}});
  j["coordinates"] = json::array();
  j["patches"] = json::array();
  for (const auto& e : ds.entries()) {
    j["coordinates"].push_back({{"phantom", e.key.phantom}, {"corner", e.key.corner}});
    ManifestEntry gt{truth_files[e.source], {e.key.phantom, e.key.corner, 0.0, 0, Role::GroundTruth}, true};
    j["patches"].push_back(to_json(gt));
    for (std::size_t c = 0; c < ds.currents().size(); ++c)
      for (int r = 0; r < ds.repetitions(); ++r) {
        const std::size_t n = c * static_cast<std::size_t>(ds.repetitions()) + static_cast<std::size_t>(r);
        ManifestEntry ne{noisy_files[e.source][n],
                         {e.key.phantom, e.key.corner, ds.currents()[c], r + 1, Role::Noisy}, true};
        j["patches"].push_back(to_json(ne));
      }
  }
  j["folds"] = json::array();
  for (const auto& f : ds.folds()) {
    json fj = json::array();
    for (auto c : f) fj.push_back(to_string(c));
    j["folds"].push_back(fj);
  }
  return j;
}

inline Cohort cohort_from_string(const std::string& s) {
  if (s == "train") return Cohort::Train;
  if (s == "validation") return Cohort::Validation;
  if (s == "test") return Cohort::Test;
  throw FormatError("unknown cohort '" + s + "'");
}

inline PairedDataset load_dataset(const std::filesystem::path& manifest_path) {
  const json j = read_json(manifest_path);
  const auto dir = manifest_path.parent_path();
  try {
    PairedDataset ds(j.at("currents").get<std::vector<double>>(), j.at("repetitions").get<int>(),
                     j.at("patch_size").get<Index3>());
    std::map<std::string, std::vector<Index3>> corners;
    for (const auto& c : j.at("coordinates"))
      corners[c.at("phantom").get<std::string>()].push_back(c.at("corner").get<Index3>());
    // Entries are re-created in source order, which is the order they were
    // written in.
    for (const auto& s : j.at("sources")) {
      PairedDataset::Source src;
      src.id = s.at("phantom").get<std::string>();
      src.truth = read_volume(dir / s.at("ground_truth").get<std::string>());
      for (const auto& f : s.at("noisy")) src.noisy.push_back(read_volume(dir / f.get<std::string>()));
      ds.add_source(std::move(src), corners[s.at("phantom").get<std::string>()]);
    }
    if (ds.size() != j.at("coordinates").size()) throw FormatError("dataset: coordinate list inconsistent");
    std::vector<std::vector<Cohort>> folds;
    for (const auto& f : j.at("folds")) {
      std::vector<Cohort> fc;
      for (const auto& c : f) fc.push_back(cohort_from_string(c.get<std::string>()));
      folds.push_back(std::move(fc));
    }
    ds.set_folds(std::move(folds));
    return ds;
  } catch (const json::exception& e) {
    throw FormatError(manifest_path.string() + ": " + e.what());
  }
}

}  // namespace bonedn
