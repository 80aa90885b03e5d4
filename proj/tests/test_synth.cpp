#include <gtest/gtest.h>

#include "bonedn/metrics.hpp"
#include "bonedn/synth.hpp"
#include "test_util.hpp"

using namespace bonedn;

namespace {

PhantomSpec small_spec(std::uint64_t seed = 1) {
  PhantomSpec s;
  s.dims = {64, 64, 32};
  s.seed = seed;
  return s;
}

double correlation(std::span<const double> a, std::span<const double> b) {
  const double ma = stats::mean(a), mb = stats::mean(b);
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

std::vector<double> difference(const Volume& a, const Volume& b) {
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = a.data()[i] - b.data()[i];
  return d;
}

}  // namespace

TEST(NormalStream, Moments) {
  NormalStream n(3);
  double s = 0, q = 0;
  const int count = 200000;
  for (int i = 0; i < count; ++i) {
    const double x = n();
    s += x;
    q += x * x;
  }
  EXPECT_NEAR(s / count, 0.0, 0.01);
  EXPECT_NEAR(q / count, 1.0, 0.01);
  NormalStream a(9), b(9);
  for (int i = 0; i < 10; ++i) EXPECT_EQ(a(), b());
}

TEST(Phantom, DefaultHitsTargetBands) {
  const PhantomSpec s;
  const Volume gt = generate_phantom(s);
  EXPECT_EQ(gt.dims(), (Index3{121, 121, 61}));
  EXPECT_EQ(gt.spacing(), kClinicalSpacing);
  const double bvtv = global_bvtv(gt, 225.0);
  EXPECT_GE(bvtv, 0.14);
  EXPECT_LE(bvtv, 0.20);
  const double tmd = global_tmd(gt, 225.0);
  EXPECT_GE(tmd, 300.0);
  EXPECT_LE(tmd, 360.0);
}

TEST(Phantom, DeterministicPerSeed) {
  const Volume a = generate_phantom(small_spec(4));
  const Volume b = generate_phantom(small_spec(4));
  const Volume c = generate_phantom(small_spec(5));
  EXPECT_TRUE(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
  EXPECT_FALSE(std::equal(a.data().begin(), a.data().end(), c.data().begin()));
}

TEST(Phantom, FollowsTargetFraction) {
  for (double target : {0.08, 0.17, 0.35}) {
    PhantomSpec s = small_spec(6);
    s.target_bvtv = target;
    EXPECT_NEAR(global_bvtv(generate_phantom(s), 225.0), target, 0.03) << target;
  }
}

TEST(Phantom, LongerCorrelationGivesLargerRegions) {
  // Phase changes between x-neighbours become rarer as the field smooths.
  const auto changes = [](double length) {
    PhantomSpec s = small_spec(7);
    s.correlation_length_mm = length;
    s.heterogeneity = 0.0;
    s.pv_blur_fwhm_mm = 0.0;
    const Volume v = generate_phantom(s);
    std::size_t n = 0;
    for (std::size_t z = 0; z < v.nz(); ++z)
      for (std::size_t y = 0; y < v.ny(); ++y)
        for (std::size_t x = 0; x + 1 < v.nx(); ++x) n += (v(x, y, z) > 225.0) != (v(x + 1, y, z) > 225.0);
    return static_cast<double>(n) / static_cast<double>(v.size());
  };
  const double fine = changes(0.6), coarse = changes(2.4);
  EXPECT_LT(coarse, 0.4 * fine);
  EXPECT_LT(coarse, 0.03);
}

TEST(Phantom, BoneDensitySweepSelectsDefault) {
  // Bone density whose phantom TMD lands nearest 334 mg/cm^3.
  double best = 0.0, best_err = 1e300;
  for (double bd = 350.0; bd <= 600.0; bd += 10.0) {
    PhantomSpec s = small_spec(8);
    s.bone_density = bd;
    const double err = std::abs(global_tmd(generate_phantom(s), 225.0) - 334.0);
    if (err < best_err) {
      best_err = err;
      best = bd;
    }
  }
  EXPECT_EQ(best, PhantomSpec{}.bone_density);
}

TEST(Phantom, Errors) {
  PhantomSpec s = small_spec();
  s.target_bvtv = 1.0;
  EXPECT_THROW(generate_phantom(s), ArgumentError);
  s = small_spec();
  s.bone_density = -5.0;
  EXPECT_THROW(generate_phantom(s), ArgumentError);
  s = small_spec();
  s.correlation_length_mm = 0.0;
  EXPECT_THROW(generate_phantom(s), ArgumentError);
}

// ---------------------------------------------------------------------------

TEST(Scan, NoiseSdFollowsCurrent) {
  const ScannerSpec sc;
  EXPECT_DOUBLE_EQ(sc.noise_sd(sc.reference_mAs), sc.noise_sd_ref);
  EXPECT_NEAR(sc.noise_sd(100.0) / sc.noise_sd(360.0), std::sqrt(3.6), 1e-12);
  const Volume gt = generate_phantom(PhantomSpec{});
  const Volume blurred = psf_blur(gt, sc);
  for (double mAs : {100.0, 250.0, 360.0}) {
    const auto d = difference(simulate_scan(gt, sc, mAs, 0), blurred);
    EXPECT_NEAR(stats::sd(d) / sc.noise_sd(mAs), 1.0, 0.03) << mAs;
  }
  EXPECT_THROW(simulate_scan(gt, sc, 0.0, 0), ArgumentError);
}

TEST(Scan, RepetitionsIndependentAndDeterministic) {
  const ScannerSpec sc;
  const Volume gt = generate_phantom(small_spec(9));
  const Volume blurred = psf_blur(gt, sc);
  const Volume a = simulate_scan(gt, sc, 100.0, 0);
  const Volume again = simulate_scan(gt, sc, 100.0, 0);
  EXPECT_TRUE(std::equal(a.data().begin(), a.data().end(), again.data().begin()));
  const auto na = difference(a, blurred);
  for (const auto& [mAs, rep] : {std::pair{100.0, 1}, std::pair{100.0, 2}, std::pair{250.0, 0}}) {
    const auto nb = difference(simulate_scan(gt, sc, mAs, static_cast<std::uint64_t>(rep)), blurred);
    EXPECT_LT(std::abs(correlation(na, nb)), 0.05) << mAs << ' ' << rep;
  }
}

TEST(Scan, PreservesBmdOverRepetitions) {
  const ScannerSpec sc;
  const Volume gt = generate_phantom(PhantomSpec{});
  const double truth = global_bmd(gt);
  for (double mAs : {100.0, 250.0, 360.0}) {
    double mean = 0.0;
    for (std::uint64_t r = 0; r < 9; ++r) mean += global_bmd(simulate_scan(gt, sc, mAs, r)) / 9.0;
    EXPECT_NEAR(mean, truth, 2.0) << mAs;
  }
}

// ---------------------------------------------------------------------------

TEST(GaussianBaseline, IdentityAndConstant) {
  const Volume v = testutil::random_volume({20, 18, 10}, 1);
  const Volume same = gaussian_baseline_filter(v, {0.0, 0.0, 0.0});
  EXPECT_TRUE(std::equal(v.data().begin(), v.data().end(), same.data().begin()));
  const Volume c = gaussian_baseline_filter(Volume({20, 18, 10}, kClinicalSpacing, 123.0), {0.5, 0.5, 0.5});
  for (double x : c.data()) EXPECT_NEAR(x, 123.0, 1e-10);
  EXPECT_THROW(gaussian_baseline_filter(v, {0.5, -0.1, 0.5}), ArgumentError);
}

TEST(GaussianBaseline, WhiteNoiseSdRatio) {
  Volume v({96, 96, 64}, kClinicalSpacing);
  NormalStream n(11);
  for (double& x : v.data()) x = n();
  const Spacing3 sigma{0.4, 0.4, 0.5};
  const Volume g = gaussian_baseline_filter(v, sigma);
  // Interior only: mirrored borders correlate the reflected samples.
  const Volume gi = g.crop({10, 10, 6}, {76, 76, 52});
  const Volume vi = v.crop({10, 10, 6}, {76, 76, 52});
  double expect = 1.0;
  for (int a = 0; a < 3; ++a) {
    const auto taps = gaussian_taps(sigma[a] / kClinicalSpacing[a]);
    double s = 0, q = 0;
    for (double t : taps) {
      s += t;
      q += t * t;
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
    expect *= std::sqrt(q);
  }
  const double ratio = stats::sd(gi.data()) / stats::sd(vi.data());
  EXPECT_LT(ratio, 1.0);
  EXPECT_NEAR(ratio / expect, 1.0, 0.05);
}

TEST(CorrelatedNoise, UnitVariance) {
  const Volume n = correlated_noise({80, 80, 40}, kClinicalSpacing, {0.3, 0.3, 0.0}, 12);
  EXPECT_NEAR(stats::mean(n.data()), 0.0, 0.05);
  EXPECT_NEAR(stats::sd(n.data()), 1.0, 0.03);
}
