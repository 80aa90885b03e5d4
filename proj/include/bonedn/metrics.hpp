#pragma once

// Evaluation statistics for filtered-versus-ground-truth comparisons:
// difference of averages, SD, RMSE, PSNR on a 3·SD(y) peak, accuracy and
// precision errors from repeated acquisitions, adjusted R², cross-fold
// aggregation and CSV reports.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "bonedn/common.hpp"

namespace bonedn {

namespace stats {

inline double mean(std::span<const double> v) {
  if (v.empty()) throw ArgumentError("mean of empty sample");
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

/// Sample (n − 1) variance.
inline double variance(std::span<const double> v) {
  if (v.size() < 2) throw ArgumentError("variance needs at least 2 values");
  const double m = mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return s / static_cast<double>(v.size() - 1);
}

inline double sd(std::span<const double> v) { return std::sqrt(variance(v)); }

}  // namespace stats

struct BasicStats {
  double delta_avg = 0.0;
  double sd = 0.0;
  double rmse = 0.0;
};

inline void require_paired(std::span<const double> x, std::span<const double> y, std::size_t min_n) {
  if (x.size() != y.size()) throw ArgumentError("x and y lengths differ");
  if (x.size() < min_n) throw ArgumentError("need at least " + std::to_string(min_n) + " values");
}

inline double rmse(std::span<const double> x, std::span<const double> y) {
  require_paired(x, y, 1);
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += (x[i] - y[i]) * (x[i] - y[i]);
  return std::sqrt(s / static_cast<double>(x.size()));
}

inline BasicStats basic_stats(std::span<const double> x, std::span<const double> y) {
  require_paired(x, y, 2);
  return {stats::mean(x) - stats::mean(y), stats::sd(x), rmse(x, y)};
}

struct Psnr {
  double db = 0.0;
  bool infinite = false;  // RMSE == 0
};

/// 20·(log10(3·SD(y)) − log10(RMSE(x, y))).
inline Psnr psnr(std::span<const double> x, std::span<const double> y) {
  require_paired(x, y, 2);
  const double sy = stats::sd(y);
  if (!(sy > 0.0)) throw DegenerateError("PSNR undefined: ground truth has zero SD");
  const double e = rmse(x, y);
  if (e == 0.0) return {std::numeric_limits<double>::infinity(), true};
  return {20.0 * (std::log10(3.0 * sy) - std::log10(e)), false};
}

/// Values x(p, r) for P points and N repetitions, with ground truth y(p).
class RepeatedMeasurements {
 public:
  RepeatedMeasurements(std::size_t points, std::size_t repetitions, std::vector<double> x, std::vector<double> y)
      : p_(points), n_(repetitions), x_(std::move(x)), y_(std::move(y)) {
    if (n_ < 2) throw ArgumentError("need at least 2 repetitions");
    if (p_ < 2) throw ArgumentError("need at least 2 points");
    if (x_.size() != p_ * n_) throw ArgumentError("repetition grid incomplete");
    if (y_.size() != p_) throw ArgumentError("ground truth length differs from point count");
  }

  /// Builds from per-repetition vectors (reps[r][p]).
  static RepeatedMeasurements from_repetitions(const std::vector<std::vector<double>>& reps, std::vector<double> y) {
    if (reps.empty()) throw ArgumentError("no repetitions");
    const std::size_t p = y.size();
    std::vector<double> x(p * reps.size());
    for (std::size_t r = 0; r < reps.size(); ++r) {
      if (reps[r].size() != p) throw ArgumentError("repetition grid incomplete");
      for (std::size_t i = 0; i < p; ++i) x[i * reps.size() + r] = reps[r][i];
    }
    return RepeatedMeasurements(p, reps.size(), std::move(x), std::move(y));
  }

  std::size_t points() const { return p_; }
  std::size_t repetitions() const { return n_; }
  double x(std::size_t p, std::size_t r) const { return x_[p * n_ + r]; }
  std::span<const double> x_flat() const { return x_; }
  std::span<const double> y() const { return y_; }

  /// y replicated to match x_flat().
  std::vector<double> y_replicated() const {
    std::vector<double> out;
    out.reserve(x_.size());
    for (double v : y_) out.insert(out.end(), n_, v);
    return out;
  }

  /// E_r(x) per point.
  std::vector<double> repetition_means() const {
    std::vector<double> out(p_);
    for (std::size_t p = 0; p < p_; ++p) out[p] = stats::mean(std::span(x_).subspan(p * n_, n_));
    return out;
  }

  /// E_p(Var_r(x)).
  double mean_repetition_variance() const {
    double s = 0.0;
    for (std::size_t p = 0; p < p_; ++p) s += stats::variance(std::span(x_).subspan(p * n_, n_));
    return s / static_cast<double>(p_);
  }

  /// E_r(Var_p(x)).
  double mean_spatial_variance() const {
    double s = 0.0;
    std::vector<double> col(p_);
    for (std::size_t r = 0; r < n_; ++r) {
      for (std::size_t p = 0; p < p_; ++p) col[p] = x(p, r);
      s += stats::variance(col);
    }
    return s / static_cast<double>(n_);
  }

 private:
  std::size_t p_, n_;
  std::vector<double> x_;
  std::vector<double> y_;
};

/// sqrt(E_p(Var_r(x)) · Var_p(y) / E_r(Var_p(x))).
inline double precision_error(const RepeatedMeasurements& m) {
  const double spatial = m.mean_spatial_variance();
  if (!(spatial > 0.0)) throw DegenerateError("PE undefined: zero spatial variance of x");
  return std::sqrt(m.mean_repetition_variance() * stats::variance(m.y()) / spatial);
}

struct AccuracyError {
  double value = 0.0;
  bool clamped = false;  // the variance correction exceeded the bias term
  double mse_of_means = 0.0;
  double correction = 0.0;
};

/// sqrt(max(0, MSE(E_r(x), y) − E_p(Var_r(x)) / (N − 1))).
inline AccuracyError accuracy_error(const RepeatedMeasurements& m) {
  AccuracyError a;
  const auto means = m.repetition_means();
  double s = 0.0;
  for (std::size_t p = 0; p < m.points(); ++p) s += (means[p] - m.y()[p]) * (means[p] - m.y()[p]);
  a.mse_of_means = s / static_cast<double>(m.points());
  a.correction = m.mean_repetition_variance() / static_cast<double>(m.repetitions() - 1);
  const double d = a.mse_of_means - a.correction;
  a.clamped = d < 0.0;
  a.value = std::sqrt(std::max(0.0, d));
  return a;
}

/// Adjusted R² of the simple linear regression of y on x.
inline double adjusted_r2(std::span<const double> x, std::span<const double> y) {
  require_paired(x, y, 3);
  const double mx = stats::mean(x), my = stats::mean(y);
  double sxx = 0.0, syy = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
    sxy += (x[i] - mx) * (y[i] - my);
  }
  if (!(sxx > 0.0)) throw DegenerateError("adjusted R2 undefined: zero variance in x");
  const double r2 = syy > 0.0 ? sxy * sxy / (sxx * syy) : 1.0;
  const double n = static_cast<double>(x.size());
  return 1.0 - (1.0 - r2) * (n - 1.0) / (n - 2.0);
}

// ---------------------------------------------------------------------------
// Rows and cross-fold aggregation

/// One table row for a single fold.
struct StatRow {
  double delta_avg = 0.0;
  double sd = 0.0;
  double rmse = 0.0;
  double ae = 0.0;
  bool ae_clamped = false;
  double pe = 0.0;
  double psnr_db = 0.0;
  bool psnr_infinite = false;
  double adj_r2 = 0.0;
};

inline StatRow compute_stat_row(const RepeatedMeasurements& m) {
  StatRow r;
  const auto x = m.x_flat();
  const auto y = m.y_replicated();
  const auto b = basic_stats(x, y);
  r.delta_avg = b.delta_avg;
  r.sd = b.sd;
  r.rmse = b.rmse;
  const auto ae = accuracy_error(m);
  r.ae = ae.value;
  r.ae_clamped = ae.clamped;
  r.pe = m.mean_spatial_variance() > 0.0 ? precision_error(m) : std::numeric_limits<double>::quiet_NaN();
  const auto p = psnr(x, y);
  r.psnr_db = p.db;
  r.psnr_infinite = p.infinite;
  double vx = 0.0;
  for (double v : x) vx += (v - x[0]) * (v - x[0]);
  r.adj_r2 = vx > 0.0 ? adjusted_r2(x, y) : std::numeric_limits<double>::quiet_NaN();
  return r;
}

struct Aggregate {
  double mean = 0.0;
  double half_range = 0.0;
};

/// Mean ± (max − min)/2.
inline Aggregate aggregate(std::span<const double> v) {
  if (v.empty()) throw ArgumentError("aggregate of zero folds");
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  return {stats::mean(v), (*hi - *lo) / 2.0};
}

inline constexpr std::array<const char*, 7> kStatColumns{"delta_avg", "sd", "rmse", "ae", "pe", "psnr_db",
                                                         "adj_r2_pct"};

inline std::array<double, 7> row_values(const StatRow& r) {
  return {r.delta_avg, r.sd, r.rmse, r.ae, r.pe, r.psnr_db, 100.0 * r.adj_r2};
}

/// Statistics for every (parameter, filter) cell across folds.
class StatsTable {
 public:
  void add(const std::string& parameter, const std::string& filter, const StatRow& row) {
    if (std::find(parameters_.begin(), parameters_.end(), parameter) == parameters_.end())
      parameters_.push_back(parameter);
    if (std::find(filters_.begin(), filters_.end(), filter) == filters_.end()) filters_.push_back(filter);
    cells_[{parameter, filter}].push_back(row);
  }

  void declare(std::vector<std::string> parameters, std::vector<std::string> filters) {
    parameters_ = std::move(parameters);
    filters_ = std::move(filters);
  }

  const std::vector<StatRow>* cell(const std::string& parameter, const std::string& filter) const {
    auto it = cells_.find({parameter, filter});
    return it == cells_.end() ? nullptr : &it->second;
  }

  std::optional<Aggregate> aggregate_column(const std::string& parameter, const std::string& filter,
                                            std::size_t column) const {
    const auto* rows = cell(parameter, filter);
    if (!rows || rows->empty()) return std::nullopt;
    std::vector<double> v;
    for (const auto& r : *rows) v.push_back(row_values(r)[column]);
    return aggregate(v);
  }

  /// CSV with one line per (parameter, filter): mean and half-range of each
  /// column plus clamp / infinity flags. Missing cells print "NA".
  void write_csv(std::ostream& os) const {
    os << "parameter,filter,folds";
    for (auto c : kStatColumns) os << ',' << c << "_mean," << c << "_half_range";
    os << ",ae_clamped,psnr_infinite\n";
    os.precision(17);
    for (const auto& p : parameters_)
      for (const auto& f : filters_) {
        const auto* rows = cell(p, f);
        os << p << ',' << f << ',' << (rows ? rows->size() : 0);
        for (std::size_t c = 0; c < kStatColumns.size(); ++c) {
          const auto a = aggregate_column(p, f, c);
          if (a)
            os << ',' << a->mean << ',' << a->half_range;
          else
            os << ",NA,NA";
        }
        bool clamped = false, inf = false;
        if (rows)
          for (const auto& r : *rows) {
            clamped = clamped || r.ae_clamped;
            inf = inf || r.psnr_infinite;
          }
        os << ',' << (rows ? (clamped ? "1" : "0") : "NA") << ',' << (rows ? (inf ? "1" : "0") : "NA") << '\n';
      }
  }

  const std::vector<std::string>& parameters() const { return parameters_; }
  const std::vector<std::string>& filters() const { return filters_; }

 private:
  std::vector<std::string> parameters_;
  std::vector<std::string> filters_;
  std::map<std::pair<std::string, std::string>, std::vector<StatRow>> cells_;
};

// ---------------------------------------------------------------------------
// Histograms

struct HistogramBin {
  double left = 0.0, right = 0.0, pdf = 0.0, cdf = 0.0;
};

struct Histogram {
  std::string source;
  std::vector<HistogramBin> bins;
};

/// Normalised and cumulative histograms of several sources on shared bin
/// edges spanning all values.
inline std::vector<Histogram> histogram_report(const std::vector<std::pair<std::string, std::vector<double>>>& sources,
                                               std::size_t bins) {
  if (bins == 0) throw ArgumentError("histogram needs at least one bin");
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto& [name, values] : sources) {
    if (values.empty()) throw ArgumentError("histogram source '" + name + "' is empty");
    std::size_t bad = 0;
    for (double v : values) {
      if (!std::isfinite(v)) {
        ++bad;
        continue;
      }
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    if (bad) throw ArgumentError("histogram source '" + name + "' has " + std::to_string(bad) + " non-finite values");
  }
  if (hi == lo) bins = 1;
  const double width = hi > lo ? (hi - lo) / static_cast<double>(bins) : 1.0;
  std::vector<Histogram> out;
  for (const auto& [name, values] : sources) {
    std::vector<double> counts(bins, 0.0);
    for (double v : values) {
      auto b = hi > lo ? static_cast<std::size_t>((v - lo) / width) : 0;
      counts[std::min(b, bins - 1)] += 1.0;
    }
    Histogram h{name, {}};
    double c = 0.0;
    const double n = static_cast<double>(values.size());
    for (std::size_t b = 0; b < bins; ++b) {
      const double left = lo + width * static_cast<double>(b);
      const double pdf = counts[b] / n;
      c += counts[b];
      h.bins.push_back({left, b + 1 == bins ? std::max(hi, left + width * (hi == lo)) : left + width, pdf, c / n});
    }
    out.push_back(std::move(h));
  }
  return out;
}

inline void write_histogram_csv(std::ostream& os, const std::vector<Histogram>& hs) {
  os << "bin_left,bin_right,pdf,cdf,source\n";
  os.precision(17);
  for (const auto& h : hs)
    for (const auto& b : h.bins) os << b.left << ',' << b.right << ',' << b.pdf << ',' << b.cdf << ',' << h.source << '\n';
}

}  // namespace bonedn
