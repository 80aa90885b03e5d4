#include <gtest/gtest.h>

#include <set>
#include <sstream>

#include "bonedn/synth.hpp"
#include "bonedn/train.hpp"

using namespace bonedn;

namespace {

// Two 73x73x37 phantoms: 27 patch coordinates each, 3 currents x 3 scans.
const PairedDataset& small_dataset() {
  static const PairedDataset ds = [] {
    PairedDataset d({100.0, 250.0, 360.0}, 3);
    const ScannerSpec sc;
    for (int p = 0; p < 2; ++p) {
      PhantomSpec s;
      s.dims = {73, 73, 37};
      s.seed = 40 + static_cast<std::uint64_t>(p);
      PairedDataset::Source src{"p" + std::to_string(p), generate_phantom(s), {}};
      for (double mAs : {100.0, 250.0, 360.0})
        for (std::uint64_t r = 0; r < 3; ++r) src.noisy.push_back(simulate_scan(src.truth, sc, mAs, 10 * p + r));
      const Volume mask(src.truth.dims(), src.truth.spacing(), 1.0);
      d.add_source(std::move(src), mask);
    }
    d.assign_folds({}, 3);
    return d;
  }();
  return ds;
}

TrainConfig quick_config() {
  TrainConfig c;
  c.channels = {8, 6, 4, 6, 8};
  c.batch_coordinates = 4;
  c.batches_per_epoch = 4;
  c.max_epochs = 2;
  c.adam.lr = 1e-3;
  return c;
}

}  // namespace

TEST(Adam, DefaultsMatchSchedule) {
  const AdamParams p;
  EXPECT_NEAR(p.lr, std::pow(10.0, -3.5), 1e-18);
  EXPECT_EQ(p.beta1, 0.9);
  EXPECT_EQ(p.beta2, 1.0 - 1e-3);
  EXPECT_EQ(p.eps, 1e-8);
}

TEST(Adam, ZeroGradientLeavesParameters) {
  AdamState s(3, {});
  std::vector<double> p{1.0, -2.0, 3.0};
  const std::vector<double> g(3, 0.0);
  for (int i = 0; i < 5; ++i) adam_step(s, p, g);
  EXPECT_EQ(p, (std::vector<double>{1.0, -2.0, 3.0}));
}

TEST(Adam, FirstStepMovesByLearningRate) {
  const std::vector<double> g{1e-3, -0.5, 2.0, -1e3, 7e5};
  AdamState s(g.size(), {});
  std::vector<double> p(g.size(), 0.0);
  adam_step(s, p, g);
  for (std::size_t i = 0; i < g.size(); ++i) {
    // m/sqrt(v) = sign(g) after bias correction; eps shrinks it by |g|/(|g|+eps).
    EXPECT_NEAR(p[i], -std::copysign(s.params.lr, g[i]) * std::abs(g[i]) / (std::abs(g[i]) + s.params.eps), 1e-15);
    EXPECT_NEAR(std::abs(p[i]), s.params.lr, 1e-5 * s.params.lr);
  }
}

TEST(Adam, ConstantGradientConvergesToLearningRate) {
  AdamState s(1, {});
  std::vector<double> p{0.0};
  const std::vector<double> g{0.37};
  double last = 0.0;
  for (int i = 0; i < 3000; ++i) {
    const double before = p[0];
    adam_step(s, p, g);
    last = before - p[0];
  }
  EXPECT_NEAR(last, s.params.lr, 1e-6 * s.params.lr);
  EXPECT_EQ(s.step, 3000u);
}

TEST(Adam, Errors) {
  AdamState s(2, {});
  std::vector<double> p{0.0, 0.0};
  try {
    adam_step(s, p, std::vector<double>{1.0, std::nan("")});
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("parameter 1"), std::string::npos);
  }
  EXPECT_THROW(adam_step(s, p, std::vector<double>{1.0}), ShapeError);
  AdamParams bad;
  bad.beta2 = 1.0;
  EXPECT_THROW(AdamState(1, bad), ArgumentError);
}

// ---------------------------------------------------------------------------

TEST(Batch, Composition) {
  std::vector<std::size_t> train(40);
  std::iota(train.begin(), train.end(), 100);
  const TrainConfig c;
  EXPECT_EQ(c.batch_size(), 64u);
  std::vector<std::size_t> symmetry_counts(Symmetry::kCount, 0);
  for (std::uint64_t it = 0; it < 50; ++it) {
    const Batch b = sample_batch(train, 9, c, 0, 1, it);
    ASSERT_EQ(b.size(), 16u);
    std::set<std::size_t> coords;
    std::size_t pairs = 0;
    for (const auto& group : b) {
      ASSERT_EQ(group.size(), 4u);
      coords.insert(group.front().entry);
      std::set<std::size_t> reps;
      for (const auto& p : group) {
        EXPECT_EQ(p.entry, group.front().entry);
        EXPECT_LT(p.noisy, 9u);
        reps.insert(p.noisy);
        ASSERT_GE(p.symmetry, 0);
        ASSERT_LT(p.symmetry, Symmetry::kCount);
        ++symmetry_counts[static_cast<std::size_t>(p.symmetry)];
        ++pairs;
      }
      EXPECT_EQ(reps.size(), 4u);
      EXPECT_TRUE(std::find(train.begin(), train.end(), group.front().entry) != train.end());
    }
    EXPECT_EQ(coords.size(), 16u);
    EXPECT_EQ(pairs, 64u);
  }
  // 3200 draws over 16 symmetries: 200 expected each.
  for (std::size_t n : symmetry_counts) {
    EXPECT_GT(n, 140u);
    EXPECT_LT(n, 260u);
  }
}

TEST(Batch, DeterminismAndSmallCohort) {
  std::vector<std::size_t> train(30);
  std::iota(train.begin(), train.end(), 0);
  TrainConfig c;
  const auto flat = [](const Batch& b) {
    std::vector<std::size_t> v;
    for (const auto& g : b)
      for (const auto& p : g) v.insert(v.end(), {p.entry, p.noisy, static_cast<std::size_t>(p.symmetry)});
    return v;
  };
  EXPECT_EQ(flat(sample_batch(train, 9, c, 1, 2, 3)), flat(sample_batch(train, 9, c, 1, 2, 3)));
  EXPECT_NE(flat(sample_batch(train, 9, c, 1, 2, 3)), flat(sample_batch(train, 9, c, 1, 2, 4)));
  EXPECT_NE(flat(sample_batch(train, 9, c, 1, 2, 3)), flat(sample_batch(train, 9, c, 2, 2, 3)));

  const Batch small = sample_batch(std::vector<std::size_t>{3, 4, 5}, 9, c, 0, 1, 0);
  EXPECT_EQ(small.size(), 3u);
  c.augment = false;
  for (const auto& g : sample_batch(train, 9, c, 0, 1, 0))
    for (const auto& p : g) EXPECT_EQ(p.symmetry, 0);
  EXPECT_THROW(sample_batch({}, 9, c, 0, 1, 0), ArgumentError);
  EXPECT_THROW(sample_batch(train, 3, c, 0, 1, 0), ArgumentError);
}

// ---------------------------------------------------------------------------

TEST(EarlyStopping, PatienceRule) {
  EarlyStopping s(20, 1e-6);
  EXPECT_TRUE(s.update(1.0));
  EXPECT_TRUE(s.update(0.9));
  int epochs = 2;
  while (!s.should_stop()) {
    s.update(0.95);
    ++epochs;
  }
  EXPECT_EQ(epochs, 22);
  EXPECT_EQ(s.stale(), 20);
  EXPECT_EQ(s.best_epoch(), 2);
  EXPECT_EQ(s.best(), 0.9);
  EXPECT_THROW(EarlyStopping(0, 0.0), ArgumentError);
}

TEST(EarlyStopping, RelativeTolerance) {
  EarlyStopping s(3, 1e-6);
  s.update(1.0);
  EXPECT_FALSE(s.update(1.0 - 1e-7));
  EXPECT_TRUE(s.update(1.0 - 1e-5));
}

// ---------------------------------------------------------------------------

TEST(TrainFold, DeterministicLogAndCheckpoint) {
  const PairedDataset& ds = small_dataset();
  ASSERT_EQ(ds.size(), 54u);
  TrainConfig c = quick_config();
  c.channels = {4, 2, 1, 2, 4};
  c.log_test_metrics = false;
  const FoldResult a = train_fold(ds, 1, c);
  const FoldResult b = train_fold(ds, 1, c);
  EXPECT_TRUE(a.best == b.best);
  EXPECT_EQ(tnet::encode(a.best), tnet::encode(b.best));
  std::ostringstream la, lb;
  write_epoch_log(la, a.log);
  write_epoch_log(lb, b.log);
  EXPECT_EQ(la.str(), lb.str());
  EXPECT_EQ(a.normalization, b.normalization);

  c.seed = 2;
  EXPECT_FALSE(train_fold(ds, 1, c).best == a.best);
}

TEST(TrainFold, LogStructureAndProgress) {
  const PairedDataset& ds = small_dataset();
  TrainConfig c = quick_config();
  c.max_epochs = 4;
  std::vector<std::string> messages;
  const FoldResult r = train_fold(ds, 0, c, [&](const std::string& s) { messages.push_back(s); });
  EXPECT_FALSE(r.diverged);
  EXPECT_EQ(r.epochs_run, 4);
  EXPECT_EQ(messages.size(), 4u);
  ASSERT_EQ(r.normalization.size(), c.loss.terms.size());
  for (double a : r.normalization) EXPECT_GT(a, 0.0);

  // epoch 0: validation + test; later epochs: train + validation + test.
  ASSERT_EQ(r.log.size(), 2u + 3u * 4u);
  EXPECT_EQ(r.log[0].split, "validation");
  EXPECT_EQ(r.log[1].split, "test");
  EXPECT_EQ(r.log[2].split, "train");
  double min_val = std::numeric_limits<double>::infinity();
  const EpochRecord *first_test = nullptr, *last_test = nullptr;
  for (const auto& e : r.log) {
    if (e.split == "validation" && e.epoch > 0) min_val = std::min(min_val, e.loss);
    if (e.split == "test") {
      ASSERT_EQ(e.metrics.size(), kParameters.size());
      if (!first_test) first_test = &e;
      last_test = &e;
    }
  }
  EXPECT_EQ(r.best_validation, min_val);
  EXPECT_GE(r.best_epoch, 1);
  EXPECT_EQ(cohort_loss(r.best, [&] {
              CompiledLoss l(c.loss, kClinicalSpacing);
              apply_normalization(l, r.normalization);
              return l;
            }(), ds, ds.cohort(0, Cohort::Validation), all_noisy_indices(ds)),
            r.best_validation);

  // Test TMD RMSE falls from the untrained network.
  const std::size_t tmd = 2;
  ASSERT_EQ(kParameters[tmd], Parameter::Tmd);
  EXPECT_LT(last_test->metrics[tmd][0], first_test->metrics[tmd][0]);

  std::ostringstream os;
  write_epoch_log(os, r.log);
  std::istringstream in(os.str());
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header.rfind("epoch,split,loss,voxel_rmse,voxel_ae,voxel_pe,bmd_rmse", 0), 0u);
  EXPECT_NE(os.str().find("\n1,train,"), std::string::npos);
}

TEST(CrossValidate, FoldsAndThreadIndependence) {
  const PairedDataset& ds = small_dataset();
  ASSERT_EQ(ds.fold_total(), 5);
  std::set<std::size_t> seen;
  for (int k = 0; k < 5; ++k)
    for (std::size_t e : ds.cohort(k, Cohort::Test)) EXPECT_TRUE(seen.insert(e).second);
  EXPECT_EQ(seen.size(), ds.size());

  TrainConfig c = quick_config();
  c.channels = {4, 2, 1, 2, 4};
  c.max_epochs = 1;
  c.batches_per_epoch = 1;
  c.log_test_metrics = false;
  const auto serial = cross_validate(ds, c, 1);
  const auto parallel = cross_validate(ds, c, 3);
  ASSERT_EQ(serial.size(), 5u);
  for (int k = 0; k < 5; ++k) {
    EXPECT_EQ(serial[k].fold, k);
    EXPECT_TRUE(serial[k].best == parallel[k].best);
    EXPECT_EQ(serial[k].best_validation, parallel[k].best_validation);
  }
}

TEST(CohortMetrics, UndefinedParameterIsNotFatal) {
  // Output below the threshold everywhere leaves TMD undefined.
  const PairedDataset& ds = small_dataset();
  const auto entries = ds.cohort(0, Cohort::Test);
  const PatchFilter zero = [](const Volume& p) { return Volume(crop_border(p).dims(), p.spacing(), 0.0); };
  const Evaluation ev = evaluate(ds, entries, all_noisy_indices(ds), zero);
  EXPECT_FALSE(ev.has(Parameter::Tmd));
  EXPECT_EQ(ev.tmd_dropped, entries.size());
  EXPECT_THROW(ev.at(Parameter::Tmd), DegenerateError);
  const auto m = cohort_metrics(ev);
  ASSERT_EQ(m.size(), kParameters.size());
  EXPECT_TRUE(std::isnan(m[2][0]));
  EXPECT_TRUE(std::isfinite(m[1][0]));
  EXPECT_TRUE(std::isfinite(m[3][0]));
}
