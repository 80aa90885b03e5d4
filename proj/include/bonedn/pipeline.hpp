#pragma once

// Run configuration and the pipeline stages behind the command-line tool:
// phantom -> patches -> train -> denoise / eval -> report.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bonedn/calibrate.hpp"
#include "bonedn/dataset.hpp"
#include "bonedn/evaluate.hpp"
#include "bonedn/loss.hpp"
#include "bonedn/metrics.hpp"
#include "bonedn/network.hpp"
#include "bonedn/synth.hpp"
#include "bonedn/train.hpp"
#include "bonedn/volume.hpp"

namespace bonedn {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Configuration

struct EvalConfig {
  double threshold = 225.0;
  double voi_diameter_mm = kPatchVoiDiameter;
  Spacing3 gaussian_sigma_mm{0.5, 0.5, 0.5};
  std::size_t histogram_bins = 64;
  std::size_t voxel_samples = 20000;  // per-voxel values kept for histograms
};

struct RunConfig {
  std::uint64_t seed = 1;
  Spacing3 spacing = kClinicalSpacing;
  int phantoms = 2;
  PhantomSpec phantom;
  ScannerSpec scanner;
  std::vector<double> currents{100.0, 250.0, 360.0};
  int repetitions = 3;
  Index3 patch_size = kPatchSize;
  Index3 patch_offset = kPatchOffset;
  double calibration_diameter_mm = 5.0;
  SplitFractions split;
  FuzzyParams fuzzy;
  std::vector<double> thresholds = default_thresholds();
  /// Preset name, or empty when `loss` holds an explicit compound.
  std::string loss_preset = "nn_sp";
  CompoundSpec loss;
  TrainConfig train;
  EvalConfig eval;

  /// Loss used for training: the named preset (or the explicit compound)
  /// with the configured fuzzy parameters and threshold list.
  CompoundSpec effective_loss(const std::string& preset_override = "") const {
    const std::string name = preset_override.empty() ? loss_preset : preset_override;
    CompoundSpec c = name.empty() ? loss : preset(name);
    for (auto& t : c.terms) {
      t.fuzzy = fuzzy;
      if (is_thresholded(t.kind)) t.thresholds = thresholds;
    }
    c.validate();
    return c;
  }

  TrainConfig train_config(const std::string& preset_override = "") const {
    TrainConfig t = train;
    t.seed = seed;
    t.loss = effective_loss(preset_override);
    t.eval = eval_settings();
    return t;
  }

  EvalSettings eval_settings() const { return {eval.threshold, eval.voi_diameter_mm, spacing}; }

  PhantomSpec phantom_spec(int index) const {
    PhantomSpec p = phantom;
    p.spacing = spacing;
    p.seed = mix_seed(seed, 0x7068, static_cast<std::uint64_t>(index));
    return p;
  }

  ScannerSpec scanner_spec(int index) const {
    ScannerSpec s = scanner;
    s.seed = mix_seed(seed, 0x7363, static_cast<std::uint64_t>(index));
    return s;
  }

  void validate() const {
    if (phantoms < 1) throw ConfigError("phantoms must be >= 1");
    if (currents.empty()) throw ConfigError("currents must not be empty");
    for (double c : currents)
      if (!(c > 0.0)) throw ConfigError("currents must be > 0");
    if (repetitions < 1) throw ConfigError("repetitions must be >= 1");
    for (int a = 0; a < 3; ++a) {
      if (!(spacing[a] > 0.0)) throw ConfigError("spacing must be positive");
      if (patch_size[a] == 0 || patch_offset[a] == 0) throw ConfigError("patch size and offset must be positive");
      if (patch_size[a] <= 2 * static_cast<std::size_t>(kBorder[a]))
        throw ConfigError("patch size must exceed the network border");
    }
    if (!(split.train > 0.0 && split.validation > 0.0 && split.test > 0.0) ||
        std::abs(split.train + split.validation + split.test - 1.0) > 1e-9)
      throw ConfigError("split fractions must be positive and sum to 1");
    if (eval.histogram_bins == 0) throw ConfigError("histogram bins must be > 0");
    try {
      phantom.validate();
      scanner.validate();
      fuzzy.validate();
      train_config().validate();
    } catch (const ArgumentError& e) {
      throw ConfigError(e.what());
    }
  }
};

namespace config_detail {

using json = nlohmann::json;

/// Strict object reader: unknown keys and type mismatches are errors.
class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    if (!j_.contains(key)) return;
    seen_.insert(key);
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(path_ + "." + key + ": " + e.what());
    }
  }

  const json* sub(const char* key) {
    if (!j_.contains(key)) return nullptr;
    seen_.insert(key);
    return &j_.at(key);
  }

  std::string path(const char* key) const { return path_ + "." + key; }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError(path_ + ": unknown key '" + k + "'");
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline LossSpec loss_spec_from_json(const json& j, const std::string& path) {
  Reader r(j, path);
  LossSpec s;
  std::string kind;
  r.get("kind", kind);
  try {
    s.kind = map_kind_from_string(kind);
  } catch (const ArgumentError& e) {
    throw ConfigError(path + ".kind: " + e.what());
  }
  r.get("diameter_mm", s.diameter_mm);
  r.get("thresholds", s.thresholds);
  if (is_thresholded(s.kind) && s.thresholds.empty()) s.thresholds = default_thresholds();
  r.get("weight", s.weight);
  r.get("weight_mu", s.weight_mu);
  r.get("weight_sigma", s.weight_sigma);
  r.finish();
  return s;
}

}  // namespace config_detail

inline nlohmann::json to_json(const RunConfig& c) {
  using json = nlohmann::json;
  json j;
  j["seed"] = c.seed;
  j["spacing"] = c.spacing;
  j["phantoms"] = c.phantoms;
  const auto& p = c.phantom;
  j["phantom"] = {{"dims", p.dims},
                  {"correlation_length_mm", p.correlation_length_mm},
                  {"heterogeneity", p.heterogeneity},
                  {"heterogeneity_length_mm", p.heterogeneity_length_mm},
                  {"target_bvtv", p.target_bvtv},
                  {"bone_density", p.bone_density},
                  {"marrow_density", p.marrow_density},
                  {"pv_blur_fwhm_mm", p.pv_blur_fwhm_mm},
                  {"threshold", p.threshold}};
  const auto& s = c.scanner;
  j["scanner"] = {{"psf_fwhm_inplane_mm", s.psf_fwhm_inplane_mm},
                  {"psf_fwhm_axial_mm", s.psf_fwhm_axial_mm},
                  {"noise_sd_ref", s.noise_sd_ref},
                  {"reference_mAs", s.reference_mAs},
                  {"noise_correlation_mm", s.noise_correlation_mm}};
  j["currents"] = c.currents;
  j["repetitions"] = c.repetitions;
  j["patch"] = {{"size", c.patch_size}, {"offset", c.patch_offset}};
  j["calibration_diameter_mm"] = c.calibration_diameter_mm;
  j["split"] = {{"train", c.split.train}, {"validation", c.split.validation}, {"test", c.split.test}};
  j["fuzzy"] = {{"sigma", c.fuzzy.sigma}, {"eps", c.fuzzy.eps}};
  j["thresholds"] = c.thresholds;
  if (!c.loss_preset.empty()) {
    j["loss"] = {{"preset", c.loss_preset}};
  } else {
    json terms = json::array();
    for (const auto& t : c.loss.terms) {
      json tj{{"kind", to_string(t.kind)},
              {"diameter_mm", t.diameter_mm},
              {"weight", t.weight},
              {"weight_mu", t.weight_mu},
              {"weight_sigma", t.weight_sigma}};
      if (is_thresholded(t.kind)) tj["thresholds"] = t.thresholds;
      terms.push_back(tj);
    }
    j["loss"] = {{"name", c.loss.name}, {"terms", terms}};
  }
  const auto& t = c.train;
  j["network"] = {{"channels", t.channels},
                  {"normalization", {{"offset", t.normalization.offset}, {"scale", t.normalization.scale}}}};
  j["adam"] = {{"lr", t.adam.lr}, {"beta1", t.adam.beta1}, {"beta2", t.adam.beta2}, {"eps", t.adam.eps}};
  j["batch"] = {{"coordinates", t.batch_coordinates}, {"noisy_per_coordinate", t.noisy_per_coordinate}};
  j["training"] = {{"patience", t.patience},
                   {"max_epochs", t.max_epochs},
                   {"batches_per_epoch", t.batches_per_epoch},
                   {"min_relative_improvement", t.min_relative_improvement},
                   {"augment", t.augment},
                   {"log_test_metrics", t.log_test_metrics}};
  j["evaluation"] = {{"threshold", c.eval.threshold},
                     {"voi_diameter_mm", c.eval.voi_diameter_mm},
                     {"gaussian_sigma_mm", c.eval.gaussian_sigma_mm},
                     {"histogram_bins", c.eval.histogram_bins},
                     {"voxel_samples", c.eval.voxel_samples}};
  return j;
}

/// Parses a run configuration; every key is optional and defaults to the
/// values above. Unknown keys are rejected.
inline RunConfig run_config_from_json(const nlohmann::json& j) {
  using config_detail::Reader;
  RunConfig c;
  Reader r(j, "config");
  r.get("seed", c.seed);
  r.get("spacing", c.spacing);
  r.get("phantoms", c.phantoms);
  if (const auto* pj = r.sub("phantom")) {
    Reader p(*pj, r.path("phantom"));
    auto& s = c.phantom;
    p.get("dims", s.dims);
    p.get("correlation_length_mm", s.correlation_length_mm);
    p.get("heterogeneity", s.heterogeneity);
    p.get("heterogeneity_length_mm", s.heterogeneity_length_mm);
    p.get("target_bvtv", s.target_bvtv);
    p.get("bone_density", s.bone_density);
    p.get("marrow_density", s.marrow_density);
    p.get("pv_blur_fwhm_mm", s.pv_blur_fwhm_mm);
    p.get("threshold", s.threshold);
    p.finish();
  }
  if (const auto* sj = r.sub("scanner")) {
    Reader p(*sj, r.path("scanner"));
    auto& s = c.scanner;
    p.get("psf_fwhm_inplane_mm", s.psf_fwhm_inplane_mm);
    p.get("psf_fwhm_axial_mm", s.psf_fwhm_axial_mm);
    p.get("noise_sd_ref", s.noise_sd_ref);
    p.get("reference_mAs", s.reference_mAs);
    p.get("noise_correlation_mm", s.noise_correlation_mm);
    p.finish();
  }
  r.get("currents", c.currents);
  r.get("repetitions", c.repetitions);
  if (const auto* pj = r.sub("patch")) {
    Reader p(*pj, r.path("patch"));
    p.get("size", c.patch_size);
    p.get("offset", c.patch_offset);
    p.finish();
  }
  r.get("calibration_diameter_mm", c.calibration_diameter_mm);
  if (const auto* sj = r.sub("split")) {
    Reader p(*sj, r.path("split"));
    p.get("train", c.split.train);
    p.get("validation", c.split.validation);
    p.get("test", c.split.test);
    p.finish();
  }
  if (const auto* fj = r.sub("fuzzy")) {
    Reader p(*fj, r.path("fuzzy"));
    p.get("sigma", c.fuzzy.sigma);
    p.get("eps", c.fuzzy.eps);
    p.finish();
  }
  r.get("thresholds", c.thresholds);
  if (const auto* lj = r.sub("loss")) {
    Reader p(*lj, r.path("loss"));
    std::string name;
    p.get("preset", name);
    if (!name.empty()) {
      try {
        preset(name);
      } catch (const ArgumentError& e) {
        throw ConfigError(r.path("loss") + ".preset: " + e.what());
      }
      c.loss_preset = name;
    } else {
      c.loss_preset.clear();
      p.get("name", c.loss.name);
      const auto* tj = p.sub("terms");
      if (!tj || !tj->is_array()) throw ConfigError(r.path("loss") + ": needs 'preset' or a 'terms' array");
      for (std::size_t i = 0; i < tj->size(); ++i)
        c.loss.terms.push_back(config_detail::loss_spec_from_json((*tj)[i], r.path("loss") + ".terms[" +
                                                                               std::to_string(i) + "]"));
    }
    p.finish();
  }
  auto& t = c.train;
  if (const auto* nj = r.sub("network")) {
    Reader p(*nj, r.path("network"));
    p.get("channels", t.channels);
    if (const auto* mj = p.sub("normalization")) {
      Reader q(*mj, p.path("normalization"));
      q.get("offset", t.normalization.offset);
      q.get("scale", t.normalization.scale);
      q.finish();
    }
    p.finish();
  }
  if (const auto* aj = r.sub("adam")) {
    Reader p(*aj, r.path("adam"));
    p.get("lr", t.adam.lr);
    p.get("beta1", t.adam.beta1);
    p.get("beta2", t.adam.beta2);
    p.get("eps", t.adam.eps);
    p.finish();
  }
  if (const auto* bj = r.sub("batch")) {
    Reader p(*bj, r.path("batch"));
    p.get("coordinates", t.batch_coordinates);
    p.get("noisy_per_coordinate", t.noisy_per_coordinate);
    p.finish();
  }
  if (const auto* tj = r.sub("training")) {
    Reader p(*tj, r.path("training"));
    p.get("patience", t.patience);
    p.get("max_epochs", t.max_epochs);
    p.get("batches_per_epoch", t.batches_per_epoch);
    p.get("min_relative_improvement", t.min_relative_improvement);
    p.get("augment", t.augment);
    p.get("log_test_metrics", t.log_test_metrics);
    p.finish();
  }
  if (const auto* ej = r.sub("evaluation")) {
    Reader p(*ej, r.path("evaluation"));
    p.get("threshold", c.eval.threshold);
    p.get("voi_diameter_mm", c.eval.voi_diameter_mm);
    p.get("gaussian_sigma_mm", c.eval.gaussian_sigma_mm);
    p.get("histogram_bins", c.eval.histogram_bins);
    p.get("voxel_samples", c.eval.voxel_samples);
    p.finish();
  }
  r.finish();
  c.phantom.spacing = c.spacing;
  if (!c.loss_preset.empty()) c.loss = preset(c.loss_preset);
  c.validate();
  return c;
}

inline RunConfig load_run_config(const fs::path& p) {
  if (p.empty()) {
    RunConfig c;
    c.loss = preset(c.loss_preset);
    return c;
  }
  try {
    return run_config_from_json(read_json(p));
  } catch (const FormatError& e) {
    throw ConfigError(e.what());
  }
}

/// Writes the effective configuration next to a stage's outputs.
inline void echo_config(const RunConfig& c, const fs::path& dir) { write_json(to_json(c), dir / "config.json"); }

inline void ensure_directory(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw Error("cannot create output directory " + dir.string());
}

using Log = std::function<void(const std::string&)>;

// ---------------------------------------------------------------------------
// Stages

inline std::string phantom_id(int p) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "phantom%02d", p);
  return buf;
}

inline std::string current_tag(double mAs) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%gmAs", mAs);
  return buf;
}

/// Ground truth, an all-ones spongiosa mask and current × repetition scans
/// for every phantom, plus manifest.json.
inline VolumeManifest cmd_phantom(const RunConfig& c, const fs::path& out, const Log& log = {}) {
  ensure_directory(out / "volumes");
  echo_config(c, out);
  VolumeManifest m;
  for (int p = 0; p < c.phantoms; ++p) {
    const std::string id = phantom_id(p);
    const Volume gt = generate_phantom(c.phantom_spec(p));
    const std::string gt_file = "volumes/" + id + "_truth.tvol";
    write_volume(gt, out / gt_file);
    m.volumes.push_back({gt_file, {id, {0, 0, 0}, 0.0, 0, Role::GroundTruth}, false});
    const std::string mask_file = "volumes/" + id + "_mask.tvol";
    write_volume(Volume(gt.dims(), gt.spacing(), 1.0), out / mask_file);
    m.masks[id] = mask_file;
    const ScannerSpec sc = c.scanner_spec(p);
    for (double mAs : c.currents)
      for (int r = 0; r < c.repetitions; ++r) {
        const std::string f = "volumes/" + id + "_" + current_tag(mAs) + "_r" + std::to_string(r + 1) + ".tvol";
        write_volume(simulate_scan(gt, sc, mAs, static_cast<std::uint64_t>(r)), out / f);
        m.volumes.push_back({f, {id, {0, 0, 0}, mAs, r + 1, Role::Noisy}, false});
      }
    if (log)
      log(id + ": BV/TV " + std::to_string(global_bvtv(gt, c.phantom.threshold)) + ", TMD " +
          std::to_string(global_tmd(gt, c.phantom.threshold)));
  }
  write_json(m.to_json(), out / "manifest.json");
  return m;
}

/// Calibrates every noisy volume onto its ground truth, cuts the patch
/// lattice inside each mask, assigns folds and writes dataset.json.
inline PairedDataset cmd_patches(const RunConfig& c, const fs::path& manifest_path, const fs::path& out,
                                 const Log& log = {}) {
  ensure_directory(out / "calibrated");
  echo_config(c, out);
  const fs::path mdir = manifest_path.parent_path();
  const VolumeManifest m = VolumeManifest::from_json(read_json(manifest_path));
  std::vector<std::string> phantoms;
  std::map<std::string, std::string> truth_file;
  std::map<std::string, std::map<std::pair<double, int>, std::string>> noisy_file;
  for (const auto& e : m.volumes) {
    const auto& pv = e.provenance;
    if (std::find(phantoms.begin(), phantoms.end(), pv.phantom) == phantoms.end()) phantoms.push_back(pv.phantom);
    if (pv.role == Role::GroundTruth)
      truth_file[pv.phantom] = e.file;
    else
      noisy_file[pv.phantom][{pv.mAs, pv.repetition}] = e.file;
  }
  PairedDataset ds(c.currents, c.repetitions, c.patch_size);
  std::vector<std::string> truth_rel;
  std::vector<std::vector<std::string>> noisy_rel;
  const auto rel = [&](const fs::path& p) { return fs::proximate(p, out).generic_string(); };
  for (const auto& id : phantoms) {
    if (!truth_file.count(id)) throw FormatError("manifest: phantom '" + id + "' has no ground truth");
    PairedDataset::Source src;
    src.id = id;
    src.truth = read_volume(mdir / truth_file[id]);
    const Volume mask = m.masks.count(id) ? read_volume(mdir / m.masks.at(id))
                                          : Volume(src.truth.dims(), src.truth.spacing(), 1.0);
    if (mask.dims() != src.truth.dims())
      throw ShapeError("mask of '" + id + "' does not match its ground-truth dims");
    std::vector<std::string> files;
    for (double mAs : c.currents)
      for (int r = 1; r <= c.repetitions; ++r) {
        const auto it = noisy_file[id].find({mAs, r});
        if (it == noisy_file[id].end())
          throw FormatError("manifest: phantom '" + id + "' lacks a " + current_tag(mAs) + " repetition " +
                            std::to_string(r));
        const Volume raw = read_volume(mdir / it->second);
        if (raw.dims() != src.truth.dims()) throw ShapeError("noisy volume dims differ for '" + id + "'");
        const Calibration cal = calibrate_linear(raw, src.truth, mask, c.calibration_diameter_mm);
        const fs::path f = out / "calibrated" / fs::path(it->second).filename();
        write_volume(cal.calibrated, f);
        files.push_back(rel(f));
        src.noisy.push_back(cal.calibrated);
        if (log) log(id + " " + current_tag(mAs) + " r" + std::to_string(r) + ": slope " +
                     std::to_string(cal.slope) + ", intercept " + std::to_string(cal.intercept));
      }
    truth_rel.push_back(rel(mdir / truth_file[id]));
    noisy_rel.push_back(files);
    ds.add_source(std::move(src), mask, c.patch_offset);
  }
  ds.assign_folds(c.split, mix_seed(c.seed, 0x666f6c64));
  write_json(dataset_to_json(ds, truth_rel, noisy_rel), out / "dataset.json");
  if (log) log(std::to_string(ds.size()) + " coordinates, " + std::to_string(ds.fold_total()) + " folds");
  return ds;
}

inline std::string fold_dir(int f) { return "fold" + std::to_string(f); }

/// Trains all folds (or one) and writes per-fold checkpoint, epoch log and
/// normalisation factors. Returns false if any fold diverged; its last good
/// checkpoint is still written.
inline bool cmd_train(const RunConfig& c, const fs::path& dataset_path, const std::string& preset_name,
                      const fs::path& out, std::optional<int> fold, int jobs, const Log& log = {}) {
  ensure_directory(out);
  RunConfig used = c;
  if (!preset_name.empty()) {
    used.loss_preset = preset_name;
    used.loss = preset(preset_name);
  }
  echo_config(used, out);
  const PairedDataset ds = load_dataset(dataset_path);
  const TrainConfig tc = used.train_config();
  std::vector<FoldResult> results;
  if (fold) {
    if (*fold < 0 || *fold >= ds.fold_total()) throw ArgumentError("fold index out of range");
    results.push_back(train_fold(ds, *fold, tc, log));
  } else {
    results = cross_validate(ds, tc, jobs, log);
  }
  bool ok = true;
  nlohmann::json summary = nlohmann::json::array();
  for (const auto& r : results) {
    const fs::path d = out / fold_dir(r.fold);
    ensure_directory(d);
    save_checkpoint(r.best, d / "checkpoint.tnet");
    std::ofstream csv(d / "epochs.csv");
    write_epoch_log(csv, r.log);
    nlohmann::json norm = nlohmann::json::array();
    for (std::size_t i = 0; i < r.normalization.size(); ++i)
      norm.push_back({{"kind", to_string(tc.loss.terms[i].kind)}, {"a_f", r.normalization[i]}});
    write_json({{"fold", r.fold},
                {"best_epoch", r.best_epoch},
                {"best_validation_loss", r.best_validation},
                {"epochs_run", r.epochs_run},
                {"diverged", r.diverged},
                {"failure", r.failure},
                {"normalization", norm}},
               d / "result.json");
    summary.push_back({{"fold", r.fold}, {"best_epoch", r.best_epoch}, {"diverged", r.diverged}});
    ok = ok && !r.diverged;
    if (r.diverged && log) log("fold " + std::to_string(r.fold) + " diverged: " + r.failure);
  }
  write_json(summary, out / "summary.json");
  return ok;
}

inline Volume cmd_denoise(const fs::path& checkpoint, const fs::path& in, const fs::path& out) {
  const DenoiserNet net = load_checkpoint(checkpoint);
  const Volume v = read_volume(in);
  Volume y = forward_padded(net, v);
  if (!out.parent_path().empty()) ensure_directory(out.parent_path());
  write_volume(y, out);
  return y;
}

inline const std::vector<std::string>& filter_names() {
  static const std::vector<std::string> names{"unfiltered", "gaussian", "nn_bmd", "nn_sp"};
  return names;
}

inline nlohmann::json to_json(const StatRow& r) {
  return {{"delta_avg", r.delta_avg}, {"sd", r.sd},         {"rmse", r.rmse},
          {"ae", r.ae},               {"ae_clamped", r.ae_clamped},
          {"pe", std::isnan(r.pe) ? nlohmann::json(nullptr) : nlohmann::json(r.pe)},
          {"psnr_db", r.psnr_infinite ? nlohmann::json(nullptr) : nlohmann::json(r.psnr_db)},
          {"psnr_infinite", r.psnr_infinite},
          {"adj_r2", std::isnan(r.adj_r2) ? nlohmann::json(nullptr) : nlohmann::json(r.adj_r2)}};
}

inline StatRow stat_row_from_json(const nlohmann::json& j) {
  const auto num = [&](const char* k) {
    return j.at(k).is_null() ? std::numeric_limits<double>::quiet_NaN() : j.at(k).get<double>();
  };
  StatRow r;
  r.delta_avg = num("delta_avg");
  r.sd = num("sd");
  r.rmse = num("rmse");
  r.ae = num("ae");
  r.ae_clamped = j.at("ae_clamped").get<bool>();
  r.pe = num("pe");
  r.psnr_infinite = j.at("psnr_infinite").get<bool>();
  r.psnr_db = r.psnr_infinite ? std::numeric_limits<double>::infinity() : num("psnr_db");
  r.adj_r2 = num("adj_r2");
  return r;
}

/// Test-cohort statistics of every available filter, per tube current and
/// fold, written to evaluation.json; value samples for histograms go to
/// samples.json. Network filters whose checkpoint directory is not given
/// are skipped. With `fold` set only that fold's test cohort is evaluated.
inline nlohmann::json cmd_eval(const RunConfig& c, const fs::path& dataset_path,
                               const std::map<std::string, fs::path>& network_dirs, const fs::path& out,
                               const Log& log = {}, std::optional<int> fold = std::nullopt) {
  ensure_directory(out);
  echo_config(c, out);
  const PairedDataset ds = load_dataset(dataset_path);
  const EvalSettings es = c.eval_settings();
  nlohmann::json result;
  result["currents"] = ds.currents();
  result["folds"] = ds.fold_total();
  result["filters"] = nlohmann::json::array();
  result["rows"] = nlohmann::json::array();
  std::map<std::string, std::map<std::string, std::vector<double>>> samples;  // parameter -> source -> values
  for (const auto& f : filter_names())
    if (f == "unfiltered" || f == "gaussian" || network_dirs.count(f)) result["filters"].push_back(f);

  if (fold && (*fold < 0 || *fold >= ds.fold_total())) throw ArgumentError("fold index out of range");
  const int first = fold ? *fold : 0, last = fold ? *fold + 1 : ds.fold_total();
  for (int k = first; k < last; ++k) {
    const auto test = ds.cohort(k, Cohort::Test);
    std::map<std::string, DenoiserNet> nets;
    for (const auto& [name, dir] : network_dirs) {
      const fs::path ck = dir / fold_dir(k) / "checkpoint.tnet";
      if (!fs::exists(ck)) throw CheckpointError("missing checkpoint " + ck.string());
      nets.emplace(name, load_checkpoint(ck));
    }
    for (double mAs : ds.currents()) {
      const auto idx = noisy_indices_at(ds, mAs);
      for (const auto& fname : result["filters"]) {
        const std::string name = fname.get<std::string>();
        PatchFilter filter = name == "unfiltered" ? unfiltered()
                             : name == "gaussian" ? gaussian_filter(c.eval.gaussian_sigma_mm)
                                                  : network_filter(nets.at(name));
        const Evaluation ev = evaluate(ds, test, idx, filter, es);
        for (auto p : kParameters) {
          result["rows"].push_back({{"fold", k},
                                    {"mAs", mAs},
                                    {"filter", name},
                                    {"parameter", to_string(p)},
                                    {"points", ev.at(p).points()},
                                    {"stats", to_json(compute_stat_row(ev.at(p)))}});
        }
        if (ev.tmd_dropped && log)
          log("fold " + std::to_string(k) + " " + current_tag(mAs) + " " + name + ": " +
              std::to_string(ev.tmd_dropped) + " patches without voxels above threshold dropped from TMD");
        // Histogram samples: input, target and the goal-driven output.
        const std::string source = name == "unfiltered" ? "input" : name == "nn_sp" ? "output" : "";
        if (source.empty()) continue;
        for (auto p : kParameters) {
          const auto& m = ev.at(p);
          const auto x = m.x_flat();
          const std::size_t step = p == Parameter::Voxel ? std::max<std::size_t>(1, x.size() / c.eval.voxel_samples) : 1;
          for (std::size_t i = 0; i < x.size(); i += step) samples[to_string(p)][source].push_back(x[i]);
          if (source == "input") {
            const auto y = m.y();
            const std::size_t ys = p == Parameter::Voxel ? std::max<std::size_t>(1, y.size() / c.eval.voxel_samples) : 1;
            for (std::size_t i = 0; i < y.size(); i += ys) samples[to_string(p)]["target"].push_back(y[i]);
          }
        }
      }
    }
    if (log) log("evaluated fold " + std::to_string(k));
  }
  write_json(result, out / "evaluation.json");
  write_json(samples, out / "samples.json");
  return result;
}

/// Tables per tube current (mean ± half-range over folds), learning curves
/// of the given training directories and histograms from the evaluation
/// samples.
inline void cmd_report(const RunConfig& c, const fs::path& eval_dir,
                       const std::map<std::string, fs::path>& train_dirs, const fs::path& out) {
  ensure_directory(out);
  echo_config(c, out);
  const auto ev = read_json(eval_dir / "evaluation.json");
  try {
    for (const auto& mj : ev.at("currents")) {
      const double mAs = mj.get<double>();
      StatsTable table;
      std::vector<std::string> params;
      for (auto p : kParameters) params.push_back(to_string(p));
      table.declare(params, filter_names());
      for (const auto& row : ev.at("rows"))
        if (row.at("mAs").get<double>() == mAs)
          table.add(row.at("parameter").get<std::string>(), row.at("filter").get<std::string>(),
                    stat_row_from_json(row.at("stats")));
      std::ofstream csv(out / ("table_" + current_tag(mAs) + ".csv"));
      table.write_csv(csv);
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("evaluation.json: " + std::string(e.what()));
  }

  std::ofstream curves(out / "learning_curves.csv");
  bool header = false;
  for (const auto& [name, dir] : train_dirs)
    for (int k = 0;; ++k) {
      const fs::path f = dir / fold_dir(k) / "epochs.csv";
      if (!fs::exists(f)) break;
      std::ifstream in(f);
      std::string line;
      std::getline(in, line);
      if (!header) {
        curves << "filter,fold," << line << '\n';
        header = true;
      }
      while (std::getline(in, line))
        if (!line.empty()) curves << name << ',' << k << ',' << line << '\n';
    }

  const auto samples = read_json(eval_dir / "samples.json");
  std::ofstream hist(out / "histograms.csv");
  hist << "parameter,bin_left,bin_right,pdf,cdf,source\n";
  hist.precision(17);
  for (const auto& [param, sources] : samples.items()) {
    std::vector<std::pair<std::string, std::vector<double>>> src;
    for (const auto& [name, values] : sources.items()) src.emplace_back(name, values.get<std::vector<double>>());
    for (const auto& h : histogram_report(src, c.eval.histogram_bins))
      for (const auto& b : h.bins)
        hist << param << ',' << b.left << ',' << b.right << ',' << b.pdf << ',' << b.cdf << ',' << h.source << '\n';
  }
}

}  // namespace bonedn
