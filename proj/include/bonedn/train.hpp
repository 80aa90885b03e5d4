#pragma once

// Adam optimisation, batch sampling with on-the-fly augmentation, early
// stopping on validation loss, per-epoch learning-curve logging and k-fold
// cross-validation.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <mutex>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "bonedn/dataset.hpp"
#include "bonedn/evaluate.hpp"
#include "bonedn/loss.hpp"
#include "bonedn/metrics.hpp"
#include "bonedn/network.hpp"
#include "bonedn/tensor.hpp"
#include "bonedn/volume.hpp"

namespace bonedn {

// ---------------------------------------------------------------------------
// Adam

struct AdamParams {
  double lr = 3.1622776601683794e-4;  // 10^-3.5
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const {
    if (!(lr > 0.0)) throw ArgumentError("learning rate must be > 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
      throw ArgumentError("Adam betas must lie in [0, 1)");
    if (!(eps > 0.0)) throw ArgumentError("Adam epsilon must be > 0");
  }
};

struct AdamState {
  AdamParams params;
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t step = 0;

  AdamState() = default;
  AdamState(std::size_t n, AdamParams p) : params(p), m(n, 0.0), v(n, 0.0) { p.validate(); }
};

/// One bias-corrected Adam update in place.
inline void adam_step(AdamState& s, std::span<double> params, std::span<const double> grads) {
  if (params.size() != s.m.size() || grads.size() != s.m.size())
    throw ShapeError("Adam state, parameter and gradient sizes differ");
  for (std::size_t i = 0; i < grads.size(); ++i)
    if (!std::isfinite(grads[i]))
      throw NumericError("non-finite gradient at parameter " + std::to_string(i) + ": " + std::to_string(grads[i]));
  const auto& p = s.params;
  ++s.step;
  const double c1 = 1.0 - std::pow(p.beta1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(p.beta2, static_cast<double>(s.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    s.m[i] = p.beta1 * s.m[i] + (1.0 - p.beta1) * grads[i];
    s.v[i] = p.beta2 * s.v[i] + (1.0 - p.beta2) * grads[i] * grads[i];
    const double mh = s.m[i] / c1, vh = s.v[i] / c2;
    params[i] -= p.lr * mh / (std::sqrt(vh) + p.eps);
  }
}

// ---------------------------------------------------------------------------
// Configuration

struct TrainConfig {
  std::size_t batch_coordinates = 16;
  std::size_t noisy_per_coordinate = 4;
  int patience = 20;
  int max_epochs = 300;
  /// Batches per epoch; 0 means ceil(training pairs / batch size).
  std::size_t batches_per_epoch = 0;
  double min_relative_improvement = 1e-6;
  bool augment = true;
  std::uint64_t seed = 1;
  ChannelProfile channels = kDefaultChannels;
  Normalization normalization;
  AdamParams adam;
  CompoundSpec loss = preset("nn_sp");
  EvalSettings eval;
  /// Log test-cohort metrics every epoch.
  bool log_test_metrics = true;

  std::size_t batch_size() const { return batch_coordinates * noisy_per_coordinate; }

  void validate() const {
    if (batch_coordinates == 0 || noisy_per_coordinate == 0) throw ArgumentError("batch composition must be positive");
    if (patience < 1) throw ArgumentError("patience must be >= 1");
    if (max_epochs < 1) throw ArgumentError("epoch cap must be >= 1");
    if (!(min_relative_improvement >= 0.0)) throw ArgumentError("improvement tolerance must be >= 0");
    adam.validate();
    loss.validate();
  }
};

// ---------------------------------------------------------------------------
// Batches

struct TrainPair {
  std::size_t entry = 0;
  std::size_t noisy = 0;
  int symmetry = 0;
};

/// Pairs grouped by coordinate; every group shares one ground-truth patch.
using Batch = std::vector<std::vector<TrainPair>>;

/// Up to `batch_coordinates` distinct training coordinates, each with
/// `noisy_per_coordinate` distinct noisy acquisitions and a uniformly drawn
/// symmetry per pair. Deterministic in (seed, fold, epoch, iteration).
inline Batch sample_batch(const std::vector<std::size_t>& train, std::size_t noisy_total, const TrainConfig& c,
                          int fold, std::uint64_t epoch, std::uint64_t iteration) {
  if (train.empty()) throw ArgumentError("training cohort is empty");
  if (c.noisy_per_coordinate > noisy_total)
    throw ArgumentError("batch asks for more noisy patches per coordinate than exist");
  std::mt19937_64 rng(mix_seed(c.seed, 0x6261, static_cast<std::uint64_t>(fold), epoch, iteration));
  std::vector<std::size_t> coords = train;
  const std::size_t k = std::min(c.batch_coordinates, coords.size());
  // Partial Fisher-Yates: the first k slots become the sample.
  for (std::size_t i = 0; i < k; ++i) std::swap(coords[i], coords[i + uniform_index(rng, coords.size() - i)]);
  Batch b;
  std::vector<std::size_t> reps(noisy_total);
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t r = 0; r < noisy_total; ++r) reps[r] = r;
    std::vector<TrainPair> group;
    for (std::size_t j = 0; j < c.noisy_per_coordinate; ++j) {
      std::swap(reps[j], reps[j + uniform_index(rng, noisy_total - j)]);
      const int sym = c.augment ? static_cast<int>(uniform_index(rng, Symmetry::kCount)) : 0;
      group.push_back({coords[i], reps[j], sym});
    }
    b.push_back(std::move(group));
  }
  return b;
}

// ---------------------------------------------------------------------------
// Early stopping

class EarlyStopping {
 public:
  EarlyStopping(int patience, double min_relative_improvement)
      : patience_(patience), tol_(min_relative_improvement) {
    if (patience < 1) throw ArgumentError("patience must be >= 1");
  }

  /// Records one validation loss; true when it is a new best.
  bool update(double loss) {
    ++epoch_;
    if (best_epoch_ == 0 || loss < best_ - tol_ * std::abs(best_)) {
      best_ = loss;
      best_epoch_ = epoch_;
      stale_ = 0;
      return true;
    }
    ++stale_;
    return false;
  }

  bool should_stop() const { return stale_ >= patience_; }
  int stale() const { return stale_; }
  int best_epoch() const { return best_epoch_; }
  double best() const { return best_; }

 private:
  int patience_;
  double tol_;
  int epoch_ = 0;
  int stale_ = 0;
  int best_epoch_ = 0;
  double best_ = std::numeric_limits<double>::infinity();
};

// ---------------------------------------------------------------------------
// Loss evaluation

namespace detail {

inline Tensor5 stack(std::span<const Volume> vs) { return Tensor5::from_volumes(vs); }

/// Flattened parameter gradient of a bound network.
inline void add_parameter_grads(const Tape& tape, const NetVars& vars, double scale, std::vector<double>& out) {
  std::size_t o = 0;
  for (std::size_t l = 0; l < vars.weights.size(); ++l)
    for (const Var& v : {vars.weights[l], vars.biases[l]}) {
      const Tensor5 g = tape.grad(v);
      for (double x : g.data()) out[o++] += scale * x;
    }
}

}  // namespace detail

/// Batch loss and parameter gradient: one tape per coordinate group, losses
/// averaged over groups in batch order.
inline double batch_gradient(const DenoiserNet& net, const CompiledLoss& loss, const PairedDataset& ds,
                             const Batch& batch, std::vector<double>& grad) {
  grad.assign(net.parameter_count(), 0.0);
  double total = 0.0;
  const double w = 1.0 / static_cast<double>(batch.size());
  for (const auto& group : batch) {
    std::vector<Volume> in, truth;
    const Volume gt = ds.truth_patch(group.front().entry);
    for (const auto& p : group) {
      const Symmetry s(p.symmetry);
      in.push_back(s.apply(ds.noisy_patch(p.entry, p.noisy)));
      truth.push_back(crop_border(s.apply(gt)));
    }
    Tape tape;
    const NetVars vars = bind_parameters(tape, net);
    const Var x = tape.leaf(detail::stack(in));
    const Var y = tape.leaf(detail::stack(truth));
    const Var l = loss.compound(forward_valid(net, vars, x), y);
    const double lv = l.value().item();
    if (!std::isfinite(lv)) throw NumericError("non-finite training loss");
    total += w * lv;
    tape.backward(l);
    detail::add_parameter_grads(tape, vars, w, grad);
  }
  return total;
}

/// Mean compound loss over coordinates using the given noisy indices, no
/// augmentation, tape-free network inference.
inline double cohort_loss(const DenoiserNet& net, const CompiledLoss& loss, const PairedDataset& ds,
                          const std::vector<std::size_t>& entries, const std::vector<std::size_t>& noisy) {
  if (entries.empty()) throw ArgumentError("loss over an empty cohort");
  double total = 0.0;
  for (std::size_t e : entries) {
    std::vector<Volume> in;
    for (std::size_t r : noisy) in.push_back(ds.noisy_patch(e, r));
    Tape tape;
    const Var f = tape.leaf(infer_valid(net, detail::stack(in)));
    const Var y = tape.leaf(Tensor5::from_volume(crop_border(ds.truth_patch(e))));
    total += loss.compound(f, y).value().item();
  }
  return total / static_cast<double>(entries.size());
}

/// a_f per loss term from unfiltered training data (all noisy acquisitions).
inline std::vector<double> training_normalization(const CompiledLoss& loss, const PairedDataset& ds,
                                                  const std::vector<std::size_t>& train) {
  std::vector<std::pair<Tensor5, Tensor5>> pairs;
  for (std::size_t e : train) {
    std::vector<Volume> in;
    for (std::size_t r = 0; r < ds.noisy_per_coordinate(); ++r) in.push_back(crop_border(ds.noisy_patch(e, r)));
    pairs.emplace_back(detail::stack(in), Tensor5::from_volume(crop_border(ds.truth_patch(e))));
  }
  return normalization_factors(loss, pairs);
}

// ---------------------------------------------------------------------------
// Fold training

struct EpochRecord {
  int epoch = 0;
  std::string split;  // train, validation, test
  double loss = std::numeric_limits<double>::quiet_NaN();
  /// RMSE, AE, PE per parameter in kParameters order; empty when not computed.
  std::vector<std::array<double, 3>> metrics;
};

inline void write_epoch_log(std::ostream& os, const std::vector<EpochRecord>& log) {
  os << "epoch,split,loss";
  for (auto p : kParameters) os << ',' << to_string(p) << "_rmse," << to_string(p) << "_ae," << to_string(p) << "_pe";
  os << '\n';
  os.precision(17);
  for (const auto& r : log) {
    os << r.epoch << ',' << r.split << ',';
    if (std::isnan(r.loss))
      os << "NA";
    else
      os << r.loss;
    for (std::size_t p = 0; p < kParameters.size(); ++p)
      for (int k = 0; k < 3; ++k) {
        os << ',';
        if (r.metrics.empty() || std::isnan(r.metrics[p][k]))
          os << "NA";
        else
          os << r.metrics[p][k];
      }
    os << '\n';
  }
}

inline std::vector<std::array<double, 3>> cohort_metrics(const Evaluation& ev) {
  std::vector<std::array<double, 3>> out;
  constexpr double na = std::numeric_limits<double>::quiet_NaN();
  for (auto p : kParameters) {
    if (!ev.has(p)) {
      out.push_back({na, na, na});
      continue;
    }
    const auto& m = ev.at(p);
    const auto x = m.x_flat();
    const auto y = m.y_replicated();
    const double pe = m.mean_spatial_variance() > 0.0 ? precision_error(m) : na;
    out.push_back({rmse(x, y), accuracy_error(m).value, pe});
  }
  return out;
}

struct FoldResult {
  int fold = 0;
  DenoiserNet best;
  std::vector<double> normalization;  // a_f per loss term
  std::vector<EpochRecord> log;
  int best_epoch = 0;
  double best_validation = std::numeric_limits<double>::infinity();
  int epochs_run = 0;
  bool diverged = false;
  std::string failure;
};

using ProgressFn = std::function<void(const std::string&)>;

/// Trains one fold from a fresh network. Epoch 0 in the log is the
/// untrained network. On divergence the result carries the last best
/// network and `diverged` is set.
inline FoldResult train_fold(const PairedDataset& ds, int fold, const TrainConfig& c, const ProgressFn& progress = {}) {
  c.validate();
  const auto train = ds.cohort(fold, Cohort::Train);
  const auto val = ds.cohort(fold, Cohort::Validation);
  const auto test = ds.cohort(fold, Cohort::Test);
  if (train.empty()) throw ArgumentError("fold " + std::to_string(fold) + " has an empty training cohort");
  if (val.empty()) throw ArgumentError("fold " + std::to_string(fold) + " has an empty validation cohort");

  FoldResult res;
  res.fold = fold;
  CompiledLoss loss(c.loss, ds.sources().front().truth.spacing());
  res.normalization = training_normalization(loss, ds, train);
  apply_normalization(loss, res.normalization);

  DenoiserNet net = build_network(c.channels, mix_seed(c.seed, static_cast<std::uint64_t>(fold)), c.normalization);
  res.best = net;
  AdamState adam(net.parameter_count(), c.adam);
  EarlyStopping stopper(c.patience, c.min_relative_improvement);
  const auto all_noisy = all_noisy_indices(ds);
  const std::size_t pairs = train.size() * ds.noisy_per_coordinate();
  const std::size_t batches =
      c.batches_per_epoch ? c.batches_per_epoch : (pairs + c.batch_size() - 1) / c.batch_size();

  const auto log_eval = [&](int epoch, const DenoiserNet& n) {
    const double vl = cohort_loss(n, loss, ds, val, all_noisy);
    res.log.push_back({epoch, "validation", vl, {}});
    if (c.log_test_metrics && test.size() >= 2) {
      const auto ev = evaluate(ds, test, all_noisy, network_filter(n), c.eval);
      res.log.push_back({epoch, "test", cohort_loss(n, loss, ds, test, all_noisy), cohort_metrics(ev)});
    }
    return vl;
  };

  log_eval(0, net);
  std::vector<double> grad;
  for (int epoch = 1; epoch <= c.max_epochs; ++epoch) {
    double train_loss = 0.0;
    try {
      for (std::size_t it = 0; it < batches; ++it) {
        const Batch b = sample_batch(train, ds.noisy_per_coordinate(), c, fold, epoch, it);
        train_loss += batch_gradient(net, loss, ds, b, grad);
        auto p = net.flat_parameters();
        adam_step(adam, p, grad);
        net.set_flat_parameters(p);
      }
    } catch (const NumericError& e) {
      res.diverged = true;
      res.failure = "epoch " + std::to_string(epoch) + ": " + e.what();
      res.epochs_run = epoch;
      return res;
    }
    train_loss /= static_cast<double>(batches);
    res.log.push_back({epoch, "train", train_loss, {}});
    const double vl = log_eval(epoch, net);
    res.epochs_run = epoch;
    if (!std::isfinite(vl)) {
      res.diverged = true;
      res.failure = "epoch " + std::to_string(epoch) + ": non-finite validation loss";
      return res;
    }
    if (stopper.update(vl)) {
      res.best = net;
      res.best_epoch = epoch;
      res.best_validation = vl;
    }
    if (progress)
      progress("fold " + std::to_string(fold) + " epoch " + std::to_string(epoch) + " train " +
               std::to_string(train_loss) + " validation " + std::to_string(vl) +
               (stopper.stale() == 0 ? " *" : ""));
    if (stopper.should_stop()) break;
  }
  return res;
}

/// Trains every fold, optionally on several threads. Results are ordered by
/// fold and independent of the thread count.
inline std::vector<FoldResult> cross_validate(const PairedDataset& ds, const TrainConfig& c, int jobs = 1,
                                              const ProgressFn& progress = {}) {
  const int k = ds.fold_total();
  if (k < 1) throw ArgumentError("dataset has no fold assignment");
  if (ds.size() < static_cast<std::size_t>(5 * k))
    throw ArgumentError("cross-validation needs at least 5x more coordinates than folds");
  std::vector<FoldResult> out(k);
  std::vector<std::string> errors(k);
  std::mutex progress_mutex;
  const ProgressFn locked = [&](const std::string& s) {
    if (!progress) return;
    std::lock_guard lock(progress_mutex);
    progress(s);
  };
  const auto run = [&](int f) {
    try {
      out[f] = train_fold(ds, f, c, locked);
    } catch (const std::exception& e) {
      errors[f] = e.what();
    }
  };
  jobs = std::max(1, std::min(jobs, k));
  for (int start = 0; start < k; start += jobs) {
    std::vector<std::thread> pool;
    for (int f = start; f < std::min(k, start + jobs); ++f) pool.emplace_back(run, f);
    for (auto& t : pool) t.join();
  }
  for (int f = 0; f < k; ++f)
    if (!errors[f].empty()) throw Error("fold " + std::to_string(f) + ": " + errors[f]);
  return out;
}

}  // namespace bonedn
