// Acceptance checks: one PASS/FAIL line per criterion.

#include <sys/wait.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "bonedn/pipeline.hpp"

using namespace bonedn;
using json = nlohmann::json;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Volume random_volume(Index3 dims, std::uint64_t seed, double lo, double hi) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Volume v(dims, kClinicalSpacing);
  for (double& x : v.data()) x = u(rng);
  return v;
}

Tensor5 random_tensor(Shape5 s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor5 t(s);
  for (double& x : t.data()) x = u(rng);
  return t;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(BONEDN_CLI_PATH) + " " + args;
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

fs::path fresh_dir(const std::string& name) {
  const fs::path d = fs::current_path() / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

// ---------------------------------------------------------------------------
// 1. Structural maps against per-voxel summation

double fuzzy(double x, double t, double s) { return 1.0 / (1.0 + std::exp(-(x - t) / s)); }

double relu_eps(double x, double eps) {
  const double z = x / eps - 1.0;
  return eps * (z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z))) + eps;
}

// Largest deviation from per-voxel summation over 20 random volumes, or -1
// when the kernel disagrees with the geometric voxel count.
double oracle_deviation(double d) {
  const double t = 225.0, sig = 10.0, eps = 1e-4;
  const Spacing3 sp = kClinicalSpacing;
  std::vector<std::array<int, 3>> offs;
  int rad[3];
  for (int a = 0; a < 3; ++a) rad[a] = static_cast<int>(std::floor(d / 2 / sp[a]));
  for (int z = -rad[2]; z <= rad[2]; ++z)
    for (int y = -rad[1]; y <= rad[1]; ++y)
      for (int x = -rad[0]; x <= rad[0]; ++x) {
        const double dx = x * sp[0], dy = y * sp[1], dz = z * sp[2];
        if (dx * dx + dy * dy + dz * dz <= d * d / 4) offs.push_back({x, y, z});
      }
  const SphericalKernel k(d, sp);
  if (k.count() != offs.size()) return -1.0;
  const double n = static_cast<double>(offs.size());
  double worst = 0.0;
  std::vector<double> nb(offs.size());
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Volume v = random_volume({16, 16, 16}, 1000 + seed, 0.0, 500.0);
    for (MapMode mode : {MapMode::Valid, MapMode::Same}) {
      const Volume maps[4] = {map_bmd(v, k, mode), map_bvtv(v, k, t, {sig, eps}, mode),
                              map_tmd(v, k, t, {sig, eps}, mode), map_sd(v, k, mode)};
      const int shift = mode == MapMode::Valid ? 1 : 0;
      const Index3 od = maps[0].dims();
      for (std::size_t z = 0; z < od[2]; ++z)
        for (std::size_t y = 0; y < od[1]; ++y)
          for (std::size_t x = 0; x < od[0]; ++x) {
            double s = 0, h = 0, xh = 0;
            for (std::size_t j = 0; j < offs.size(); ++j) {
              std::ptrdiff_t p[3] = {static_cast<std::ptrdiff_t>(x) + offs[j][0] + shift * rad[0],
                                     static_cast<std::ptrdiff_t>(y) + offs[j][1] + shift * rad[1],
                                     static_cast<std::ptrdiff_t>(z) + offs[j][2] + shift * rad[2]};
              // Half-sample mirror.
              for (auto& c : p)
                while (c < 0 || c >= 16) c = c < 0 ? -c - 1 : 2 * 16 - c - 1;
              nb[j] = v(static_cast<std::size_t>(p[0]), static_cast<std::size_t>(p[1]),
                        static_cast<std::size_t>(p[2]));
              s += nb[j];
              h += fuzzy(nb[j], t, sig);
              xh += nb[j] * fuzzy(nb[j], t, sig);
            }
            const double mean = s / n;
            double s2 = 0;
            for (double val : nb) s2 += (val - mean) * (val - mean);
            const double expect[4] = {mean, h / n, (xh / n) / relu_eps(h / n, eps), std::sqrt(s2 / (n - 1))};
            for (int m = 0; m < 4; ++m) worst = std::max(worst, std::abs(maps[m](x, y, z) - expect[m]));
          }
    }
  }
  return worst;
}

Outcome oracle_equivalence() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  for (double d : {1.0, 1.5}) {
    const double e = oracle_deviation(d);
    if (e < 0) return {false, fmt("kernel voxel count at %.1f mm differs from geometry", d)};
    worst = std::max(worst, e);
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-9 && secs < 10.0,
          fmt("20 volumes x 2 diameters x 4 maps x 2 modes, max |diff| %.3g, %.1f s", worst, secs)};
}

// ---------------------------------------------------------------------------
// 2. Gradients

using Fn = std::function<Var(std::vector<Var>&)>;

// Largest relative deviation between analytic and central-difference
// gradients of a random linear functional of f.
double gradient_error(const std::vector<Tensor5>& inputs, const Fn& f, double h = 1e-5) {
  std::vector<double> w;
  auto value = [&](const std::vector<Tensor5>& in, std::vector<Tensor5>* grads) {
    Tape tape;
    std::vector<Var> vars;
    for (const auto& t : in) vars.push_back(tape.leaf(t, true));
    Var y = f(vars);
    if (w.empty()) {
      std::mt19937_64 rng(77);
      std::uniform_real_distribution<double> u(0.5, 1.5);
      w.resize(y.value().size());
      for (double& x : w) x = u(rng);
    }
    Var root = weighted_sum(y, w);
    if (grads) {
      backward(tape, root);
      for (const auto& v : vars) grads->push_back(tape.grad(v));
    }
    return root.value().item();
  };
  std::vector<Tensor5> grads;
  value(inputs, &grads);
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k)
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      auto plus = inputs, minus = inputs;
      plus[k][i] += h;
      minus[k][i] -= h;
      const double fd = (value(plus, nullptr) - value(minus, nullptr)) / (2 * h);
      const double an = grads[k][i];
      worst = std::max(worst, std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-3}));
    }
  return worst;
}

Outcome gradient_checks() {
  const auto t0 = std::chrono::steady_clock::now();
  const Shape5 s{2, 1, 3, 4, 4};
  const Tensor5 a = random_tensor(s, 1), b = random_tensor(s, 2, 0.5, 2.0);
  Tensor5 away = random_tensor(s, 3, 0.1, 1.0);  // kept off the ReLU kink
  for (std::size_t i = 0; i < away.size(); i += 2) away[i] = -away[i];
  const Tensor5 dens = random_tensor(s, 4, 150.0, 300.0);
  const SphericalKernel k(0.6, kClinicalSpacing);
  const std::vector<std::pair<std::string, std::pair<std::vector<Tensor5>, Fn>>> ops{
      {"add", {{a, b}, [](auto& v) { return add(v[0], v[1]); }}},
      {"add_scalar", {{a}, [](auto& v) { return add(v[0], 0.7); }}},
      {"sub", {{a, b}, [](auto& v) { return sub(v[0], v[1]); }}},
      {"mul", {{a, b}, [](auto& v) { return mul(v[0], v[1]); }}},
      {"div", {{a, b}, [](auto& v) { return div(v[0], v[1]); }}},
      {"scale", {{a}, [](auto& v) { return scale(v[0], -1.7); }}},
      {"affine", {{a}, [](auto& v) { return affine(v[0], 0.3, 2.0); }}},
      {"negate", {{a}, [](auto& v) { return negate(v[0]); }}},
      {"exp", {{a}, [](auto& v) { return exp(v[0]); }}},
      {"ln", {{b}, [](auto& v) { return ln(v[0]); }}},
      {"square", {{a}, [](auto& v) { return square(v[0]); }}},
      {"sqrt_clamped", {{b}, [](auto& v) { return sqrt_clamped(v[0]); }}},
      {"relu", {{away}, [](auto& v) { return relu(v[0]); }}},
      {"sigmoid_threshold", {{dens}, [](auto& v) { return sigmoid_threshold(v[0], 225.0, 10.0); }}},
      {"softplus_eps", {{a}, [](auto& v) { return softplus_eps(v[0], 0.3); }}},
      {"mean", {{a}, [](auto& v) { return mean(v[0]); }}},
      {"sum", {{a}, [](auto& v) { return sum(v[0]); }}},
      {"weighted_sum", {{a}, [](auto& v) { return weighted_sum(v[0], std::vector<double>(v[0].value().size(), 0.3)); }}},
      {"stack_scalars", {{a, b}, [](auto& v) {
         const std::vector<Var> parts{mean(v[0]), sum(v[1]), mean(mul(v[0], v[1]))};
         return stack_scalars(parts);
       }}},
      {"pad_mirror", {{a}, [](auto& v) { return pad(v[0], {2, 1, 1}, Padding::Mirror); }}},
      {"pad_zero", {{a}, [](auto& v) { return pad(v[0], {1, 2, 1}, Padding::Zero); }}},
      {"center_crop", {{a}, [](auto& v) { return center_crop(v[0], 1, 2, 2); }}},
      {"conv3d_valid", {{random_tensor({2, 2, 4, 5, 5}, 5), random_tensor({3, 2, 3, 3, 3}, 6),
                         random_tensor({1, 3, 1, 1, 1}, 7)},
                        [](auto& v) { return conv3d(v[0], v[1], v[2]); }}},
      {"conv3d_same", {{random_tensor({1, 2, 3, 4, 4}, 8), random_tensor({2, 2, 3, 3, 1}, 9),
                        random_tensor({1, 2, 1, 1, 1}, 10)},
                       [](auto& v) { return conv3d(v[0], v[1], v[2], ConvPadding::Same); }}},
      {"kernel_conv_valid", {{random_tensor({1, 1, 3, 5, 5}, 11)}, [&](auto& v) { return kernel_conv(v[0], k); }}},
      {"kernel_conv_same", {{random_tensor({1, 1, 3, 5, 5}, 12)},
                            [&](auto& v) { return kernel_conv(v[0], k, MapMode::Same); }}},
  };
  double op_worst = 0.0;
  std::string worst_op;
  for (const auto& [name, job] : ops) {
    const double e = gradient_error(job.first, job.second);
    if (e > op_worst) {
      op_worst = e;
      worst_op = name;
    }
  }

  // Compound loss through the full-size network, sampled parameters.
  const DenoiserNet net0 = build_network(kDefaultChannels, 3);
  std::mt19937_64 rng(5);
  std::normal_distribution<double> noise(0.0, 80.0);
  PhantomSpec ps;
  ps.dims = {41, 41, 21};
  const Volume truth = generate_phantom(ps);
  Volume noisy = truth;
  for (double& x : noisy.data()) x += noise(rng);
  const Tensor5 in = Tensor5::from_volume(noisy);
  const Tensor5 target = Tensor5::from_volume(truth.center_crop({25, 25, 13}));
  CompiledLoss loss(preset("nn_sp"), kClinicalSpacing);
  std::vector<std::pair<Tensor5, Tensor5>> norm_pairs{{Tensor5::from_volume(noisy.center_crop({25, 25, 13})), target}};
  apply_normalization(loss, normalization_factors(loss, norm_pairs));
  const auto value = [&](const DenoiserNet& n) {
    Tape tape;
    return loss.compound(forward_valid(n, bind_parameters(tape, n, false), tape.leaf(in)), tape.leaf(target))
        .value()
        .item();
  };
  Tape tape;
  const NetVars vars = bind_parameters(tape, net0);
  backward(tape, loss.compound(forward_valid(net0, vars, tape.leaf(in)), tape.leaf(target)));
  std::vector<double> grad;
  for (std::size_t l = 0; l < vars.weights.size(); ++l)
    for (const Var& v : {vars.weights[l], vars.biases[l]}) {
      const Tensor5 g = tape.grad(v);
      grad.insert(grad.end(), g.data().begin(), g.data().end());
    }
  const auto p0 = net0.flat_parameters();
  int sampled = 0, failed = 0;
  double net_worst = 0.0;
  for (; sampled < 60; ++sampled) {
    const std::size_t i = uniform_index(rng, p0.size());
    const double h = 1e-6 * std::max(1.0, std::abs(p0[i]));
    DenoiserNet up = net0, down = net0;
    auto pu = p0, pd = p0;
    pu[i] += h;
    pd[i] -= h;
    up.set_flat_parameters(pu);
    down.set_flat_parameters(pd);
    const double fd = (value(up) - value(down)) / (2 * h);
    const double diff = std::abs(fd - grad[i]);
    const double mag = std::max(std::abs(fd), std::abs(grad[i]));
    if (diff > std::max(1e-3 * mag, 1e-6)) ++failed;
    if (diff > 1e-6) net_worst = std::max(net_worst, diff / mag);
  }
  const double secs = seconds_since(t0);
  return {op_worst <= 1e-5 && failed == 0 && secs < 300.0,
          fmt("%zu ops, worst rel %.2g (%s); network %d params, %d outside 1e-3 (worst rel %.2g); %.0f s",
              ops.size(), op_worst, worst_op.c_str(), sampled, failed, net_worst, secs)};
}

// ---------------------------------------------------------------------------
// 3. Receptive field

DenoiserNet positive_net() {
  DenoiserNet net(kDefaultChannels);
  std::vector<double> p(net.parameter_count());
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = 0.01 + 0.005 * static_cast<double>(i % 5);
  net.set_flat_parameters(p);
  return net;
}

Outcome receptive_field() {
  const Index3 dims{21, 21, 11};
  const Volume base = random_volume(dims, 21, 0.0, 400.0);
  const std::size_t probe = (1 * 5 + 2) * 5 + 2;  // output (2, 2, 1) of 5x5x3
  std::size_t outside_changed = 0, inside_changed = 0, inside = 0;
  const DenoiserNet nets[2] = {build_network(kDefaultChannels, 22), positive_net()};
  for (int n = 0; n < 2; ++n) {
    const double ref = infer_valid(nets[n], Tensor5::from_volume(base))[probe];
    for (std::size_t z = 0; z < dims[2]; ++z)
      for (std::size_t y = 0; y < dims[1]; ++y)
        for (std::size_t x = 0; x < dims[0]; ++x) {
          Volume p = base;
          p(x, y, z) += 500.0;
          const bool in = x >= 2 && x <= 18 && y >= 2 && y <= 18 && z >= 1 && z <= 9;
          const bool changed = infer_valid(nets[n], Tensor5::from_volume(p))[probe] != ref;
          if (!in) outside_changed += changed;
          if (in && n == 1) {
            ++inside;
            inside_changed += changed;
          }
        }
  }
  const bool ok = outside_changed == 0 && inside == 17 * 17 * 9 && inside_changed == inside;
  return {ok, fmt("footprint %zu voxels (17x17x9 = 2601) all reach the output; %zu outside changes", inside_changed,
                  outside_changed)};
}

// ---------------------------------------------------------------------------
// 4. Shapes

Outcome shape_contracts() {
  const DenoiserNet net = build_network(kDefaultChannels, 31);
  const Shape5 out = infer_valid(net, Tensor5::from_volume(random_volume(kPatchSize, 32, 0.0, 500.0))).shape();
  const bool valid_ok = out == Shape5{1, 1, 13, 25, 25};
  const Volume v = random_volume({48, 48, 24}, 33, 0.0, 500.0);
  const Volume padded = forward_padded(net, v);
  const Volume valid = infer_valid(net, Tensor5::from_volume(v)).to_volume(0, 0, v.spacing());
  std::size_t mismatches = 0;
  for (std::size_t z = 0; z < valid.nz(); ++z)
    for (std::size_t y = 0; y < valid.ny(); ++y)
      for (std::size_t x = 0; x < valid.nx(); ++x) mismatches += padded(x + 8, y + 8, z + 4) != valid(x, y, z);
  return {valid_ok && padded.dims() == v.dims() && mismatches == 0,
          fmt("41x41x21 -> %zux%zux%zu; padded dims %s; %zu interior mismatches", out.x, out.y, out.z,
              padded.dims() == v.dims() ? "preserved" : "CHANGED", mismatches)};
}

// ---------------------------------------------------------------------------
// 5. Kernel geometry

Outcome kernel_geometry() {
  const std::pair<double, Index3> cases[] = {{4.3, {25, 25, 13}},
                                             {kBmdSmallDiameter, {3, 3, 1}},
                                             {kBmdMediumDiameter, {9, 9, 5}},
                                             {kSdDiameter, {17, 17, 9}}};
  bool ok = true;
  double worst = 0.0;
  std::string boxes;
  for (const auto& [d, box] : cases) {
    const SphericalKernel k(d, kClinicalSpacing);
    ok = ok && k.box() == box;
    worst = std::max(worst, std::abs(k.weight() * static_cast<double>(k.count()) - 1.0));
    boxes += fmt("%s%zux%zux%zu", boxes.empty() ? "" : ", ", k.box()[0], k.box()[1], k.box()[2]);
  }
  const auto bmd = preset("nn_bmd");
  std::vector<double> diam;
  for (const auto& t : bmd.terms)
    if (t.kind != MapKind::Voxelwise) diam.push_back(t.diameter_mm);
  ok = ok && diam == std::vector<double>{kBmdSmallDiameter, kBmdMediumDiameter, kSdDiameter};
  return {ok && worst < 1e-12, "boxes " + boxes + fmt("; |sum w - 1| <= %.2g", worst)};
}

// ---------------------------------------------------------------------------
// 6. Loss plumbing

Outcome loss_plumbing() {
  const auto t = default_thresholds();
  const auto b = threshold_weights(225.0, 100.0, t);
  double sum = 0.0, b225 = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    sum += b[i];
    if (t[i] == 225.0) b225 = b[i];
  }
  // Unfiltered pairs from a phantom with additive noise.
  PhantomSpec ps;
  ps.dims = {41, 41, 21};
  const Volume truth = generate_phantom(ps).center_crop({25, 25, 13});
  std::vector<std::pair<Tensor5, Tensor5>> pairs;
  std::mt19937_64 rng(61);
  std::normal_distribution<double> noise(0.0, 150.0);
  for (int p = 0; p < 4; ++p) {
    std::vector<Volume> reps;
    for (int r = 0; r < 3; ++r) {
      Volume v = truth;
      for (double& x : v.data()) x += noise(rng);
      reps.push_back(v);
    }
    pairs.emplace_back(Tensor5::from_volumes(reps), Tensor5::from_volume(truth));
  }
  double worst = 0.0;
  for (const char* name : {"nn_sp", "nn_bmd"}) {
    CompiledLoss l(preset(name), kClinicalSpacing);
    apply_normalization(l, normalization_factors(l, pairs));
    for (std::size_t i = 0; i < l.size(); ++i) {
      double m = 0.0;
      for (const auto& [x, y] : pairs) {
        Tape tape;
        m += l.term(i, tape.leaf(x), tape.leaf(y)).value().item();
      }
      worst = std::max(worst, std::abs(m / static_cast<double>(pairs.size()) - 1.0));
    }
  }
  std::vector<double> sp, bm;
  for (const auto& term : preset("nn_sp").terms) sp.push_back(term.weight);
  for (const auto& term : preset("nn_bmd").terms) bm.push_back(term.weight);
  const bool weights = sp == std::vector<double>{0.64, 0.32, 0.04} && bm == std::vector<double>{0.4, 0.1, 0.1, 0.4};
  const bool ok = std::abs(sum - 1.0) <= 1e-12 && std::abs(b225 - 0.13466) <= 1e-4 && worst <= 1e-9 && weights;
  return {ok, fmt("sum b_t - 1 = %.2g, b_225 = %.5f; normalized mean losses within %.2g of 1; preset weights %s",
                  sum - 1.0, b225, worst, weights ? "exact" : "WRONG")};
}

// ---------------------------------------------------------------------------
// 7. Metrics

Outcome metric_units() {
  std::vector<double> y(100);
  std::mt19937_64 rng(71);
  std::uniform_real_distribution<double> u(0.0, 50.0);
  for (double& v : y) v = u(rng);
  const double s = stats::sd(y);
  double psnr_err = 0.0;
  for (const auto& [factor, db] : {std::pair{3.0, 0.0}, std::pair{0.3, 20.0}}) {
    std::vector<double> x = y;
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += (i % 2 ? -factor : factor) * s;
    psnr_err = std::max(psnr_err, std::abs(psnr(x, y).db - db));
  }
  const auto worked = RepeatedMeasurements::from_repetitions({{0, 1}, {0, 3}, {0, 2}}, {0, 2});
  const double pe_err = std::abs(precision_error(worked) - std::sqrt(3.0 / 7.0));
  const double ae = accuracy_error(worked).value;
  const std::vector<double> truth{1.0, 5.0, -2.0};
  const std::vector<std::vector<double>> biased(3, std::vector<double>{2.0, 6.0, -1.0});
  const double ae_bias = accuracy_error(RepeatedMeasurements::from_repetitions(biased, truth)).value;
  const bool ok = psnr_err <= 1e-9 && pe_err <= 1e-12 && ae == 0.0 && ae_bias == 1.0;
  return {ok, fmt("PSNR anchor error %.2g dB; PE %.6f (error %.2g); worked AE %g; pure-bias AE %g", psnr_err,
                  precision_error(worked), pe_err, ae, ae_bias)};
}

// ---------------------------------------------------------------------------
// 8. Augmentation group

Outcome augmentation() {
  const Volume p = random_volume(kPatchSize, 81, 0.0, 500.0);
  std::vector<Volume> images;
  for (int k = 0; k < Symmetry::kCount; ++k) images.push_back(Symmetry(k).apply(p));
  const auto same = [](const Volume& a, const Volume& b) {
    return std::equal(a.data().begin(), a.data().end(), b.data().begin());
  };
  int distinct = 0;
  for (int i = 0; i < Symmetry::kCount; ++i) {
    bool unique = true;
    for (int j = 0; j < i; ++j) unique = unique && !same(images[i], images[j]);
    distinct += unique;
  }
  // Exhaustive composition table on the patch itself.
  int closed = 0;
  std::vector<std::vector<int>> table(Symmetry::kCount, std::vector<int>(Symmetry::kCount, -1));
  for (int a = 0; a < Symmetry::kCount; ++a)
    for (int b = 0; b < Symmetry::kCount; ++b) {
      const Volume ab = Symmetry(a).apply(images[b]);
      for (int c = 0; c < Symmetry::kCount; ++c)
        if (same(ab, images[c])) table[a][b] = c;
      closed += table[a][b] >= 0;
    }
  int with_inverse = 0;
  for (int a = 0; a < Symmetry::kCount; ++a) {
    bool inv = false;
    for (int b = 0; b < Symmetry::kCount; ++b) inv = inv || (table[a][b] == 0 && table[b][a] == 0);
    with_inverse += inv;
  }
  // Augmented training set: every base pair appears under all 16 maps.
  TrainConfig c;
  std::vector<std::size_t> train(40);
  std::iota(train.begin(), train.end(), 0);
  std::set<int> drawn;
  for (std::uint64_t it = 0; it < 20; ++it)
    for (const auto& g : sample_batch(train, 9, c, 0, 1, it))
      for (const auto& pr : g) drawn.insert(pr.symmetry);
  const bool ok = distinct == 16 && closed == 256 && with_inverse == 16 && drawn.size() == 16;
  return {ok, fmt("%d distinct images, %d/256 compositions closed, %d inverses, %zu symmetries drawn in training "
                  "(x16 augmentation)",
                  distinct, closed, with_inverse, drawn.size())};
}

// ---------------------------------------------------------------------------
// 9. Determinism of full training runs

Outcome determinism() {
  const fs::path dir = fresh_dir("acceptance_determinism");
  const json cfg{{"phantoms", 2},
                 {"phantom", {{"dims", {73, 73, 37}}}},
                 {"network", {{"channels", {4, 2, 1, 2, 4}}}},
                 {"batch", {{"coordinates", 4}}},
                 {"training", {{"max_epochs", 2}, {"batches_per_epoch", 2}}}};
  std::ofstream(dir / "config.json") << cfg.dump(2);
  const std::string c = "--config " + q(dir / "config.json");
  if (run_cli(c + " phantom --out " + q(dir / "phantom")) != 0 ||
      run_cli(c + " patches --manifest " + q(dir / "phantom/manifest.json") + " --out " + q(dir / "patches")) != 0)
    return {false, "dataset preparation failed"};
  for (const char* run : {"run_a", "run_b"})
    if (run_cli(c + " train --dataset " + q(dir / "patches/dataset.json") + " --out " + q(dir / run)) != 0)
      return {false, std::string("cmd_train failed in ") + run};
  std::size_t files = 0, differing = 0;
  for (const auto& e : fs::recursive_directory_iterator(dir / "run_a")) {
    if (!e.is_regular_file()) continue;
    ++files;
    const fs::path other = dir / "run_b" / fs::relative(e.path(), dir / "run_a");
    differing += !fs::exists(other) || slurp(e.path()) != slurp(other);
  }
  std::size_t checkpoints = 0;
  for (const auto& e : fs::recursive_directory_iterator(dir / "run_a"))
    checkpoints += e.path().filename() == "checkpoint.tnet";
  return {differing == 0 && checkpoints == 5,
          fmt("%zu files over 5 folds (%zu checkpoints), %zu differ between runs", files, checkpoints, differing)};
}

// ---------------------------------------------------------------------------
// 10-11. End-to-end synthetic experiment

struct Cell {
  double rmse = 0.0, ae = 0.0;
};

struct EndToEnd {
  bool ran = false;
  std::string error;
  std::size_t coordinates = 0;
  double minutes = 0.0;
  std::map<std::string, std::map<std::string, Cell>> cells;  // filter -> parameter
};

const EndToEnd& end_to_end() {
  static const EndToEnd r = [] {
    EndToEnd e;
    const auto t0 = std::chrono::steady_clock::now();
    const fs::path dir = fresh_dir("acceptance_experiment");
    // Reduced network and a larger step so the run fits a desktop budget.
    const json cfg{{"phantoms", 2},
                   {"network", {{"channels", {8, 6, 4, 6, 8}}}},
                   {"adam", {{"lr", 1e-3}}},
                   {"training", {{"max_epochs", 15}, {"batches_per_epoch", 10}}}};
    std::ofstream(dir / "config.json") << cfg.dump(2);
    const std::string c = "--config " + q(dir / "config.json") + " -v";
    if (run_cli(c + " phantom --out " + q(dir / "phantom")) != 0 ||
        run_cli(c + " patches --manifest " + q(dir / "phantom/manifest.json") + " --out " + q(dir / "patches")) != 0 ||
        run_cli(c + " train --dataset " + q(dir / "patches/dataset.json") + " --preset nn_sp --fold 0 --out " +
                q(dir / "nn_sp")) != 0 ||
        run_cli(c + " eval --dataset " + q(dir / "patches/dataset.json") + " --nn-sp " + q(dir / "nn_sp") +
                " --fold 0 --out " + q(dir / "eval")) != 0 ||
        run_cli(c + " report --eval " + q(dir / "eval") + " --nn-sp " + q(dir / "nn_sp") + " --out " +
                q(dir / "report")) != 0) {
      e.error = "pipeline stage failed";
      return e;
    }
    const json ds = json::parse(slurp(dir / "patches/dataset.json"));
    e.coordinates = ds.at("coordinates").size();
    const json ev = json::parse(slurp(dir / "eval/evaluation.json"));
    for (const auto& row : ev.at("rows")) {
      if (row.at("mAs").get<double>() != 100.0) continue;
      const auto& st = row.at("stats");
      e.cells[row.at("filter").get<std::string>()][row.at("parameter").get<std::string>()] = {
          st.at("rmse").get<double>(), st.at("ae").get<double>()};
    }
    e.minutes = seconds_since(t0) / 60.0;
    e.ran = true;
    return e;
  }();
  return r;
}

Outcome headline_analogue() {
  const EndToEnd& e = end_to_end();
  if (!e.ran) return {false, e.error};
  const auto& raw = e.cells.at("unfiltered");
  const auto& nn = e.cells.at("nn_sp");
  bool ok = e.minutes <= 60.0 && e.coordinates >= 400 && e.coordinates <= 600;
  std::string detail = fmt("%zu coordinates, %.1f min;", e.coordinates, e.minutes);
  for (const char* p : {"tmd", "bvtv"}) {
    const double r_rmse = nn.at(p).rmse / raw.at(p).rmse, r_ae = nn.at(p).ae / raw.at(p).ae;
    ok = ok && r_rmse <= 0.5 && r_ae <= 0.5;
    detail += fmt(" %s RMSE %.4g/%.4g (%.0f%%) AE %.4g/%.4g (%.0f%%);", p, nn.at(p).rmse, raw.at(p).rmse,
                  100 * r_rmse, nn.at(p).ae, raw.at(p).ae, 100 * r_ae);
  }
  const double bmd = nn.at("bmd").rmse / raw.at("bmd").rmse;
  ok = ok && bmd <= 1.5;
  detail += fmt(" BMD RMSE %.4g/%.4g (x%.2f)", nn.at("bmd").rmse, raw.at("bmd").rmse, bmd);
  return {ok, detail};
}

Outcome comparator_ordering() {
  const EndToEnd& e = end_to_end();
  if (!e.ran) return {false, e.error};
  bool ok = true;
  std::string detail;
  for (const char* p : {"tmd", "bvtv"}) {
    const double nn = e.cells.at("nn_sp").at(p).rmse, g = e.cells.at("gaussian").at(p).rmse,
                 raw = e.cells.at("unfiltered").at(p).rmse;
    ok = ok && nn <= g && nn <= raw;
    detail += fmt("%s%s RMSE nn_sp %.4g, gaussian %.4g, unfiltered %.4g", detail.empty() ? "" : "; ", p, nn, g, raw);
  }
  return {ok, detail};
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"oracle equivalence of structural maps", oracle_equivalence},
      {"gradient checks", gradient_checks},
      {"receptive field 17x17x9", receptive_field},
      {"shape contracts", shape_contracts},
      {"kernel geometry", kernel_geometry},
      {"loss plumbing", loss_plumbing},
      {"metric unit values", metric_units},
      {"augmentation group", augmentation},
      {"training determinism", determinism},
      {"end-to-end synthetic analogue", headline_analogue},
      {"comparator ordering", comparator_ordering},
  };
  int failures = 0;
  std::vector<std::string> lines;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& ex) {
      o = {false, std::string("exception: ") + ex.what()};
    }
    failures += !o.pass;
    lines.push_back(fmt("%s %2zu %s: ", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first) + o.detail);
    std::cout << lines.back() << std::endl;
  }
  std::cout << "\nSummary\n";
  for (const auto& l : lines) std::cout << l.substr(0, 4) << ' ' << l.substr(5, l.find(':') - 5) << '\n';
  return failures == 0 ? 0 : 1;
}
