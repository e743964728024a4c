#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dare/error.hpp"

namespace dare {

struct CurvePoint {
  std::int64_t step = 0;
  double accuracy = 0.0;
};

struct AccuracyCurve {
  std::vector<CurvePoint> points;
  std::int64_t horizon = 0;
};

inline void validate(const AccuracyCurve& c) {
  for (std::size_t i = 0; i < c.points.size(); ++i) {
    if (i > 0 && c.points[i].step <= c.points[i - 1].step) throw MetricError("curve steps must strictly increase");
    if (c.points[i].step > c.horizon) throw MetricError("curve step beyond horizon");
  }
}

struct CalibrationBin {
  double lo = 0.0;
  double hi = 0.0;
  double mean_estimate = 0.0;
  double mean_truth = 0.0;
  std::size_t count = 0;
  std::optional<double> ci_half_width;  ///< 95% normal CI of mean truth
};

inline constexpr std::size_t kCalibrationBins = 10;
inline constexpr std::size_t kMinCiCount = 5;

struct EstimatorReport {
  std::string method;
  double mae = 0.0;
  double mse = 0.0;
  std::size_t count = 0;
  std::array<CalibrationBin, kCalibrationBins> calibration{};
};

inline EstimatorReport estimator_report(std::span<const double> estimates, std::span<const double> truths,
                                        std::string method = {}) {
  if (estimates.size() != truths.size()) throw DataError("estimates and truths differ in length");
  if (estimates.empty()) throw DataError("no estimates to report");
  EstimatorReport r;
  r.method = std::move(method);
  r.count = estimates.size();
  std::array<double, kCalibrationBins> sum_sq{};
  for (std::size_t b = 0; b < kCalibrationBins; ++b) {
    r.calibration[b].lo = static_cast<double>(b) / kCalibrationBins;
    r.calibration[b].hi = static_cast<double>(b + 1) / kCalibrationBins;
  }
  for (std::size_t i = 0; i < estimates.size(); ++i) {
    const double e = estimates[i];
    const double t = truths[i];
    r.mae += std::abs(e - t);
    r.mse += (e - t) * (e - t);
    const auto b = std::min<std::size_t>(kCalibrationBins - 1,
                                         static_cast<std::size_t>(std::max(0.0, e) * kCalibrationBins));
    CalibrationBin& bin = r.calibration[b];
    bin.mean_estimate += e;
    bin.mean_truth += t;
    sum_sq[b] += t * t;
    ++bin.count;
  }
  const double n = static_cast<double>(estimates.size());
  r.mae /= n;
  r.mse /= n;
  for (std::size_t b = 0; b < kCalibrationBins; ++b) {
    CalibrationBin& bin = r.calibration[b];
    if (bin.count == 0) continue;
    const double k = static_cast<double>(bin.count);
    bin.mean_estimate /= k;
    bin.mean_truth /= k;
    if (bin.count >= kMinCiCount) {
      const double var = std::max(0.0, sum_sq[b] / k - bin.mean_truth * bin.mean_truth) * k / (k - 1.0);
      bin.ci_half_width = 1.96 * std::sqrt(var / k);
    }
  }
  return r;
}

/// First step whose accuracy reaches tau.
inline std::optional<std::int64_t> steps_to_target(const AccuracyCurve& curve, double tau) {
  for (const CurvePoint& p : curve.points)
    if (p.accuracy >= tau && p.step <= curve.horizon) return p.step;
  return std::nullopt;
}

inline std::optional<double> speedup(const AccuracyCurve& base, const AccuracyCurve& method, double tau) {
  const auto sb = steps_to_target(base, tau);
  const auto sm = steps_to_target(method, tau);
  if (!sb || !sm) return std::nullopt;
  if (*sm == 0) return *sb == 0 ? std::optional<double>(1.0) : std::nullopt;
  return static_cast<double>(*sb) / static_cast<double>(*sm);
}

/// Trapezoidal area over [first step, H] divided by the span; the last
/// recorded accuracy is held flat up to H.
inline double auc(const AccuracyCurve& curve) {
  if (curve.points.size() < 2) throw MetricError("auc needs at least 2 points");
  validate(curve);
  const double s0 = static_cast<double>(curve.points.front().step);
  const double span = static_cast<double>(curve.horizon) - s0;
  if (!(span > 0.0)) throw MetricError("auc needs a positive span");
  double area = 0.0;
  for (std::size_t i = 1; i < curve.points.size(); ++i) {
    const CurvePoint& a = curve.points[i - 1];
    const CurvePoint& b = curve.points[i];
    area += 0.5 * (a.accuracy + b.accuracy) * static_cast<double>(b.step - a.step);
  }
  area += curve.points.back().accuracy * static_cast<double>(curve.horizon - curve.points.back().step);
  return area / span;
}

/// One evaluation rollout, tagged with its prompt's true difficulty.
struct EvalRecord {
  double true_difficulty = 0.0;
  std::size_t length = 0;
  int reward = 0;
};

struct TierTokenRow {
  std::size_t bin = 0;
  double lo = 0.0;
  double hi = 0.0;
  double mean_tokens = 0.0;
  double accuracy = 0.0;
  std::size_t count = 0;
};

/// Mean generated length and success rate per true-difficulty bin; empty
/// bins are omitted. Default bins split at the tier thresholds.
inline std::vector<TierTokenRow> tier_token_report(std::span<const EvalRecord> logs,
                                                   std::span<const double> edges = {}) {
  if (logs.empty()) throw MetricError("no evaluation records");
  std::vector<double> e(edges.begin(), edges.end());
  if (e.empty()) e = {0.0, 0.3, 0.8, 1.0};
  if (e.size() < 2) throw MetricError("need at least 2 bin edges");
  const std::size_t n_bins = e.size() - 1;
  std::vector<TierTokenRow> rows(n_bins);
  for (std::size_t b = 0; b < n_bins; ++b) {
    rows[b].bin = b;
    rows[b].lo = e[b];
    rows[b].hi = e[b + 1];
  }
  for (const EvalRecord& r : logs) {
    std::size_t b = 0;
    while (b + 1 < n_bins && r.true_difficulty >= e[b + 1]) ++b;
    rows[b].mean_tokens += static_cast<double>(r.length);
    rows[b].accuracy += r.reward;
    ++rows[b].count;
  }
  std::vector<TierTokenRow> out;
  for (TierTokenRow& row : rows) {
    if (row.count == 0) continue;
    row.mean_tokens /= static_cast<double>(row.count);
    row.accuracy /= static_cast<double>(row.count);
    out.push_back(row);
  }
  return out;
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw MetricError("median of empty set");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace dare
