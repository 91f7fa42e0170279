#pragma once

// Cleaning pipeline: sentinel scores -> anomaly flags -> KNN imputation ->
// feature-specific smoothing -> min-max scaling -> sliding windows.

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "adaptcast/common.hpp"
#include "adaptcast/dataio.hpp"

namespace adaptcast {

// ---------------------------------------------------------------------------
// Missing values

// Scores of -1 and 0 are device sentinels for "no measurement".
inline SubjectSeries mark_missing(SubjectSeries series) {
  const auto F = series.features.cols();
  for (Eigen::Index t = 0; t < series.target.size(); ++t) {
    const double v = series.target(t);
    if (v == -1.0 || v == 0.0) {
      series.target(t) = kMissing;
      series.missing_mask(t, F) = true;
    }
  }
  return series;
}

// ---------------------------------------------------------------------------
// Anomalies

// Linear interpolation between order statistics ("type 7"). `sorted` must be
// ascending and non-empty.
inline double quantile_sorted(std::span<const double> sorted, double p) {
  const double h = (static_cast<double>(sorted.size()) - 1.0) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

// Indices outside [Q1 - m*IQR, Q3 + m*IQR]. Needs at least 4 values;
// otherwise warns and returns nothing.
inline std::vector<std::size_t> detect_anomalies_iqr(std::span<const double> column,
                                                     double multiplier = 1.0) {
  if (column.size() < 4) {
    warn("detect_anomalies_iqr: fewer than 4 values, skipping");
    return {};
  }
  std::vector<double> sorted(column.begin(), column.end());
  std::sort(sorted.begin(), sorted.end());
  const double q1 = quantile_sorted(sorted, 0.25);
  const double q3 = quantile_sorted(sorted, 0.75);
  const double iqr = q3 - q1;
  const double lo = q1 - multiplier * iqr, hi = q3 + multiplier * iqr;
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < column.size(); ++i)
    if (column[i] < lo || column[i] > hi) out.push_back(i);
  return out;
}

// Centered rolling mean with partial windows at the edges; NaN entries are
// ignored and never flagged.
inline std::vector<std::size_t> detect_anomalies_rolling(std::span<const double> column,
                                                         std::size_t window = 5,
                                                         double threshold = 30.0) {
  if (window == 0) throw ConfigError("rolling window must be >= 1", "roll_window");
  const std::size_t left = window / 2;
  const std::size_t right = window - 1 - left;
  std::vector<std::size_t> out;
  const std::size_t n = column.size();
  for (std::size_t t = 0; t < n; ++t) {
    if (std::isnan(column[t])) continue;
    const std::size_t a = t >= left ? t - left : 0;
    const std::size_t b = std::min(n - 1, t + right);
    double sum = 0.0;
    std::size_t cnt = 0;
    for (std::size_t i = a; i <= b; ++i)
      if (!std::isnan(column[i])) {
        sum += column[i];
        ++cnt;
      }
    if (std::abs(column[t] - sum / static_cast<double>(cnt)) > threshold) out.push_back(t);
  }
  return out;
}

struct FlaggedCell {
  int subject_id;
  int day_index;  // row index within the subject's series
  bool operator<(const FlaggedCell& o) const {
    return std::tie(subject_id, day_index) < std::tie(o.subject_id, o.day_index);
  }
  bool operator==(const FlaggedCell& o) const = default;
};

struct AnomalyReport {
  std::string method;  // "iqr" or "rolling"
  std::map<std::string, std::vector<FlaggedCell>> cells;  // feature -> cells

  std::size_t total() const {
    std::size_t n = 0;
    for (const auto& [k, v] : cells) n += v.size();
    return n;
  }
};

inline void to_json(nlohmann::json& j, const AnomalyReport& r) {
  j = nlohmann::json{{"method", r.method}, {"cells", nlohmann::json::object()}};
  for (const auto& [name, cells] : r.cells) {
    auto arr = nlohmann::json::array();
    for (const auto& c : cells) arr.push_back({c.subject_id, c.day_index});
    j["cells"][name] = std::move(arr);
  }
}

// ---------------------------------------------------------------------------
// KNN imputation

// Fills each NaN with the unweighted mean of that column over the k nearest
// rows observing it. Distance: sqrt((C / n_co) * sum_co w_c ((a_c - b_c)/sd_c)^2)
// over co-observed columns (sd_c: observed standard deviation, 1 when zero).
// Ties go to the lower row index.
inline Eigen::MatrixXd impute_knn(const Eigen::MatrixXd& data, int k = 3,
                                  std::span<const double> column_weights = {},
                                  std::span<const std::string> column_names = {}) {
  if (k < 1) throw ConfigError("knn k must be >= 1", "knn_k");
  const Eigen::Index R = data.rows(), C = data.cols();
  if (!column_weights.empty() && column_weights.size() != static_cast<std::size_t>(C))
    throw ShapeError("impute_knn: weight count does not match columns");
  std::vector<double> sd(static_cast<std::size_t>(C), 1.0);
  for (Eigen::Index c = 0; c < C; ++c) {
    double s = 0, ss = 0;
    std::size_t n = 0;
    for (Eigen::Index r = 0; r < R; ++r)
      if (!std::isnan(data(r, c))) {
        s += data(r, c);
        ss += data(r, c) * data(r, c);
        ++n;
      }
    if (n == 0) {
      const std::string name = static_cast<std::size_t>(c) < column_names.size()
                                   ? column_names[static_cast<std::size_t>(c)]
                                   : "column " + std::to_string(c);
      throw ImputationError("impute_knn: " + name + " has no observed values");
    }
    const double m = s / static_cast<double>(n);
    const double var = std::max(0.0, ss / static_cast<double>(n) - m * m);
    if (var > 1e-24) sd[static_cast<std::size_t>(c)] = std::sqrt(var);
  }
  Eigen::MatrixXd out = data;
  std::vector<std::pair<double, Eigen::Index>> cand;
  std::vector<double> dist(static_cast<std::size_t>(R));
  for (Eigen::Index i = 0; i < R; ++i) {
    bool any_missing = false;
    for (Eigen::Index c = 0; c < C; ++c) any_missing |= std::isnan(data(i, c));
    if (!any_missing) continue;
    for (Eigen::Index j = 0; j < R; ++j) {
      double acc = 0.0;
      std::size_t co = 0;
      if (j != i)
        for (Eigen::Index c = 0; c < C; ++c) {
          const double a = data(i, c), b = data(j, c);
          if (std::isnan(a) || std::isnan(b)) continue;
          const double w = column_weights.empty() ? 1.0 : column_weights[static_cast<std::size_t>(c)];
          const double d = (a - b) / sd[static_cast<std::size_t>(c)];
          acc += w * d * d;
          ++co;
        }
      dist[static_cast<std::size_t>(j)] =
          co == 0 ? std::numeric_limits<double>::infinity()
                  : std::sqrt(acc * static_cast<double>(C) / static_cast<double>(co));
    }
    for (Eigen::Index c = 0; c < C; ++c) {
      if (!std::isnan(data(i, c))) continue;
      cand.clear();
      for (Eigen::Index j = 0; j < R; ++j)
        if (j != i && !std::isnan(data(j, c)) && std::isfinite(dist[static_cast<std::size_t>(j)]))
          cand.emplace_back(dist[static_cast<std::size_t>(j)], j);
      double fill;
      if (cand.empty()) {
        double s = 0;
        std::size_t n = 0;
        for (Eigen::Index j = 0; j < R; ++j)
          if (!std::isnan(data(j, c))) {
            s += data(j, c);
            ++n;
          }
        fill = s / static_cast<double>(n);
      } else {
        const std::size_t take = std::min<std::size_t>(static_cast<std::size_t>(k), cand.size());
        std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(take), cand.end());
        double s = 0;
        for (std::size_t q = 0; q < take; ++q) s += data(cand[q].second, c);
        fill = s / static_cast<double>(take);
      }
      out(i, c) = fill;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Smoothing

enum class SmoothMethod { kExponential, kWma, kAdaptive, kSavgol, kEnsemble };

inline SmoothMethod parse_smooth_method(const std::string& s) {
  if (s == "exponential") return SmoothMethod::kExponential;
  if (s == "wma") return SmoothMethod::kWma;
  if (s == "adaptive") return SmoothMethod::kAdaptive;
  if (s == "savgol") return SmoothMethod::kSavgol;
  if (s == "ensemble") return SmoothMethod::kEnsemble;
  throw ConfigError("unknown smoothing method '" + s + "'", "smooth");
}

inline const char* to_string(SmoothMethod m) {
  switch (m) {
    case SmoothMethod::kExponential: return "exponential";
    case SmoothMethod::kWma: return "wma";
    case SmoothMethod::kAdaptive: return "adaptive";
    case SmoothMethod::kSavgol: return "savgol";
    case SmoothMethod::kEnsemble: return "ensemble";
  }
  return "?";
}

struct SmoothingParams {
  double lambda = 0.3;           // exponential
  std::size_t adaptive_window = 5;
  double adaptive_min = 0.1;
  double adaptive_max = 0.9;
};

namespace detail {

inline std::vector<double> smooth_exponential(std::span<const double> v, double lambda) {
  std::vector<double> out(v.size());
  if (v.empty()) return out;
  out[0] = v[0];
  for (std::size_t t = 1; t < v.size(); ++t) out[t] = lambda * v[t] + (1 - lambda) * out[t - 1];
  return out;
}

// Centered [1,2,3,2,1]/9, renormalized over the weights that fit at edges.
inline std::vector<double> smooth_wma(std::span<const double> v) {
  static constexpr double w[5] = {1, 2, 3, 2, 1};
  const auto n = static_cast<std::ptrdiff_t>(v.size());
  std::vector<double> out(v.size());
  for (std::ptrdiff_t t = 0; t < n; ++t) {
    double s = 0, ws = 0;
    for (std::ptrdiff_t k = -2; k <= 2; ++k) {
      const auto i = t + k;
      if (i < 0 || i >= n) continue;
      s += w[k + 2] * v[static_cast<std::size_t>(i)];
      ws += w[k + 2];
    }
    out[static_cast<std::size_t>(t)] = s / ws;
  }
  return out;
}

inline double population_sd(std::span<const double> v) {
  if (v.empty()) return 0.0;
  const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double ss = 0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size()));
}

inline std::vector<double> smooth_adaptive(std::span<const double> v, const SmoothingParams& p) {
  std::vector<double> out(v.size());
  if (v.empty()) return out;
  const double global = population_sd(v);
  const std::size_t left = p.adaptive_window / 2;
  const std::size_t right = p.adaptive_window - 1 - left;
  out[0] = v[0];
  for (std::size_t t = 1; t < v.size(); ++t) {
    const std::size_t a = t >= left ? t - left : 0;
    const std::size_t b = std::min(v.size() - 1, t + right);
    const double local = population_sd(v.subspan(a, b - a + 1));
    const double lam =
        global > 0 ? std::clamp(local / global, p.adaptive_min, p.adaptive_max) : p.adaptive_min;
    out[t] = lam * v[t] + (1 - lam) * out[t - 1];
  }
  return out;
}

// Window 5, order 2: [-3, 12, 17, 12, -3] / 35. Edges use point reflection
// x[-k] = 2 x[0] - x[k], which keeps straight lines exact.
inline std::vector<double> smooth_savgol(std::span<const double> v) {
  static constexpr double c[5] = {-3, 12, 17, 12, -3};
  const auto n = static_cast<std::ptrdiff_t>(v.size());
  std::vector<double> out(v.size());
  if (n < 3) {
    std::copy(v.begin(), v.end(), out.begin());
    return out;
  }
  auto at = [&](std::ptrdiff_t i) {
    if (i < 0) return 2 * v[0] - v[static_cast<std::size_t>(-i)];
    if (i >= n) return 2 * v[static_cast<std::size_t>(n - 1)] - v[static_cast<std::size_t>(2 * (n - 1) - i)];
    return v[static_cast<std::size_t>(i)];
  };
  for (std::ptrdiff_t t = 0; t < n; ++t) {
    double s = 0;
    for (std::ptrdiff_t k = -2; k <= 2; ++k) s += c[k + 2] * at(t + k);
    out[static_cast<std::size_t>(t)] = s / 35.0;
  }
  return out;
}

}  // namespace detail

inline std::vector<double> smooth(std::span<const double> column, SmoothMethod method,
                                  const SmoothingParams& params = {}) {
  for (double x : column)
    if (std::isnan(x)) throw ContractError("smooth: column contains missing values");
  switch (method) {
    case SmoothMethod::kExponential: return detail::smooth_exponential(column, params.lambda);
    case SmoothMethod::kWma: return detail::smooth_wma(column);
    case SmoothMethod::kAdaptive: return detail::smooth_adaptive(column, params);
    case SmoothMethod::kSavgol: return detail::smooth_savgol(column);
    case SmoothMethod::kEnsemble: {
      const auto a = detail::smooth_exponential(column, params.lambda);
      const auto b = detail::smooth_wma(column);
      const auto c = detail::smooth_savgol(column);
      std::vector<double> out(column.size());
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = (a[i] + b[i] + c[i]) / 3.0;
      return out;
    }
  }
  throw ConfigError("unknown smoothing method", "smooth");
}

inline std::vector<double> smooth(std::span<const double> column, const std::string& method,
                                  const SmoothingParams& params = {}) {
  return smooth(column, parse_smooth_method(method), params);
}

// Heart rate -> exponential, activity -> wma, sleep stages and stress ->
// adaptive, respiration -> savgol. Anything else (and the score) -> ensemble.
inline SmoothMethod smoother_for(const std::string& feature) {
  static const std::map<std::string, SmoothMethod> routing = {
      {"RH", SmoothMethod::kExponential}, {"MH", SmoothMethod::kExponential},
      {"XH", SmoothMethod::kExponential}, {"TK", SmoothMethod::kWma},
      {"TS", SmoothMethod::kWma},         {"TD", SmoothMethod::kWma},
      {"HA", SmoothMethod::kWma},         {"AS", SmoothMethod::kWma},
      {"MI", SmoothMethod::kWma},         {"DS", SmoothMethod::kAdaptive},
      {"LS", SmoothMethod::kAdaptive},    {"RS", SmoothMethod::kAdaptive},
      {"AW", SmoothMethod::kAdaptive},    {"AC", SmoothMethod::kAdaptive},
      {"SS", SmoothMethod::kAdaptive},    {"RM", SmoothMethod::kAdaptive},
      {"ST", SmoothMethod::kAdaptive},    {"AWR", SmoothMethod::kSavgol},
      {"HRV", SmoothMethod::kSavgol},     {"LRV", SmoothMethod::kSavgol},
      {"LR", SmoothMethod::kSavgol},      {"HR", SmoothMethod::kSavgol},
      {"AR", SmoothMethod::kSavgol}};
  const auto it = routing.find(feature);
  return it == routing.end() ? SmoothMethod::kEnsemble : it->second;
}

// ---------------------------------------------------------------------------
// Min-max scaling

struct ScalerState {
  std::vector<double> min, max;
  bool fitted() const { return !min.empty(); }
  std::size_t size() const { return min.size(); }
};

inline ScalerState fit_scaler(const Eigen::MatrixXd& split) {
  if (split.rows() == 0 || split.cols() == 0)
    throw ContractError("fit_scaler: empty split");
  ScalerState s;
  for (Eigen::Index c = 0; c < split.cols(); ++c) {
    s.min.push_back(split.col(c).minCoeff());
    s.max.push_back(split.col(c).maxCoeff());
  }
  return s;
}

inline Eigen::MatrixXd apply_scaler(const ScalerState& s, const Eigen::MatrixXd& m) {
  if (!s.fitted()) throw StateError("apply_scaler: scaler has not been fitted");
  if (static_cast<std::size_t>(m.cols()) != s.size())
    throw ShapeError("apply_scaler: fitted on " + std::to_string(s.size()) +
                     " features, got " + std::to_string(m.cols()));
  Eigen::MatrixXd out(m.rows(), m.cols());
  for (Eigen::Index c = 0; c < m.cols(); ++c) {
    const double lo = s.min[static_cast<std::size_t>(c)];
    const double span = s.max[static_cast<std::size_t>(c)] - lo;
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      out(r, c) = span > 0 ? (m(r, c) - lo) / span : 0.0;
  }
  return out;
}

// Maps scaled values of feature `column` back to raw units.
inline Eigen::VectorXd invert_scaler(const ScalerState& s, const Eigen::VectorXd& v,
                                     std::size_t column = 0) {
  if (!s.fitted()) throw StateError("invert_scaler: scaler has not been fitted");
  if (column >= s.size()) throw ShapeError("invert_scaler: column out of range");
  const double lo = s.min[column], span = s.max[column] - lo;
  return (v.array() * span + lo).matrix();
}

// ---------------------------------------------------------------------------
// Sliding windows

struct WindowSample {
  Eigen::MatrixXd x;  // w x F
  Eigen::VectorXd y;  // delta
  int domain = 0;
  std::size_t t0 = 0;
};

struct WindowSet {
  std::vector<WindowSample> samples;
  std::size_t w = 0, delta = 0, stride = 1;
  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
};

// x = feature rows [t0, t0+w), y = score rows [t0+w, t0+w+delta).
inline WindowSet make_windows(const SubjectSeries& series, std::size_t w, std::size_t delta,
                              std::size_t stride = 1, int domain = 0) {
  if (w < 1 || delta < 1 || stride < 1)
    throw ConfigError("window sizes and stride must be >= 1", "window");
  for (Eigen::Index i = 0; i < series.missing_mask.size(); ++i)
    if (series.missing_mask.data()[i])
      throw ContractError("make_windows: series " + std::to_string(series.subject_id) +
                          " still has missing values");
  WindowSet set;
  set.w = w;
  set.delta = delta;
  set.stride = stride;
  const std::size_t T = series.length();
  if (T < w + delta) {
    warn("make_windows: subject " + std::to_string(series.subject_id) + " has " +
         std::to_string(T) + " rows, fewer than w + delta = " + std::to_string(w + delta));
    return set;
  }
  for (std::size_t t0 = 0; t0 + w + delta <= T; t0 += stride) {
    WindowSample s;
    s.x = series.features.middleRows(static_cast<Eigen::Index>(t0), static_cast<Eigen::Index>(w));
    s.y = series.target.segment(static_cast<Eigen::Index>(t0 + w), static_cast<Eigen::Index>(delta));
    s.domain = domain;
    s.t0 = t0;
    set.samples.push_back(std::move(s));
  }
  return set;
}

// ---------------------------------------------------------------------------
// Split-level cleaning

struct PreprocessConfig {
  double iqr_multiplier = 1.0;
  std::size_t roll_window = 5;
  double roll_threshold = 30.0;
  int knn_k = 3;
  double day_position_weight = 1.0;
  SmoothingParams smoothing;
  bool smooth = true;
};

struct CleanResult {
  std::vector<SubjectSeries> series;  // no missing values
  AnomalyReport iqr{"iqr", {}};
  AnomalyReport rolling{"rolling", {}};
};

// Runs the fixed stage order on a group of subjects that are processed
// together (one LOOCV split, or a whole cohort). IQR fences and KNN neighbours
// are pooled across the group; rolling checks and smoothing are per subject.
// Feature imputation never looks at scores, so labels cannot leak into inputs.
inline CleanResult clean_split(const std::vector<SubjectSeries>& group,
                               const std::vector<std::string>& feature_names,
                               const PreprocessConfig& cfg = {}) {
  CleanResult res;
  if (group.empty()) return res;
  const auto F = static_cast<Eigen::Index>(feature_names.size());
  for (const auto& s : group) res.series.push_back(mark_missing(s));

  // Anomalies (raw units), union of both rules becomes missing.
  for (Eigen::Index f = 0; f < F; ++f) {
    const std::string& name = feature_names[static_cast<std::size_t>(f)];
    std::vector<double> pooled;
    std::vector<std::pair<std::size_t, Eigen::Index>> where;
    for (std::size_t si = 0; si < res.series.size(); ++si) {
      const auto& s = res.series[si];
      for (Eigen::Index t = 0; t < s.features.rows(); ++t)
        if (!std::isnan(s.features(t, f))) {
          pooled.push_back(s.features(t, f));
          where.emplace_back(si, t);
        }
    }
    std::set<std::pair<std::size_t, Eigen::Index>> flagged;
    if (pooled.size() >= 4) {
      for (auto idx : detect_anomalies_iqr(pooled, cfg.iqr_multiplier)) {
        const auto [si, t] = where[idx];
        res.iqr.cells[name].push_back({res.series[si].subject_id, static_cast<int>(t)});
        flagged.insert(where[idx]);
      }
    }
    for (std::size_t si = 0; si < res.series.size(); ++si) {
      const auto& s = res.series[si];
      std::vector<double> col(s.features.col(f).data(), s.features.col(f).data() + s.features.rows());
      for (auto t : detect_anomalies_rolling(col, cfg.roll_window, cfg.roll_threshold)) {
        res.rolling.cells[name].push_back({s.subject_id, static_cast<int>(t)});
        flagged.insert({si, static_cast<Eigen::Index>(t)});
      }
    }
    for (const auto& [si, t] : flagged) res.series[si].features(t, f) = kMissing;
  }

  // Pooled KNN imputation; day position (0..1 within subject) is a context column.
  Eigen::Index rows = 0;
  for (const auto& s : res.series) rows += s.features.rows();
  Eigen::MatrixXd pooled(rows, F + 1);
  Eigen::Index r = 0;
  for (const auto& s : res.series) {
    const auto T = s.features.rows();
    for (Eigen::Index t = 0; t < T; ++t, ++r) {
      pooled.row(r).head(F) = s.features.row(t);
      pooled(r, F) = T > 1 ? static_cast<double>(t) / static_cast<double>(T - 1) : 0.0;
    }
  }
  std::vector<double> weights(static_cast<std::size_t>(F + 1), 1.0);
  weights.back() = cfg.day_position_weight;
  std::vector<std::string> names = feature_names;
  names.push_back("day_position");
  const Eigen::MatrixXd filled = impute_knn(pooled, cfg.knn_k, weights, names);

  // Scores: same neighbourhood definition with the score as an extra column.
  Eigen::MatrixXd with_target(rows, F + 2);
  with_target.leftCols(F + 1) = filled;
  r = 0;
  for (const auto& s : res.series)
    for (Eigen::Index t = 0; t < s.target.size(); ++t, ++r) with_target(r, F + 1) = s.target(t);
  weights.push_back(1.0);
  names.push_back(kTargetColumn);
  const Eigen::MatrixXd filled_t = impute_knn(with_target, cfg.knn_k, weights, names);

  r = 0;
  for (auto& s : res.series) {
    const auto T = s.features.rows();
    s.features = filled.block(r, 0, T, F);
    s.target = filled_t.block(r, F + 1, T, 1);
    r += T;
    if (cfg.smooth) {
      for (Eigen::Index f = 0; f < F; ++f) {
        std::vector<double> col(s.features.col(f).data(), s.features.col(f).data() + T);
        const auto sm = smooth(col, smoother_for(feature_names[static_cast<std::size_t>(f)]),
                               cfg.smoothing);
        for (Eigen::Index t = 0; t < T; ++t) s.features(t, f) = sm[static_cast<std::size_t>(t)];
      }
      std::vector<double> col(s.target.data(), s.target.data() + T);
      const auto sm = smooth(col, SmoothMethod::kEnsemble, cfg.smoothing);
      for (Eigen::Index t = 0; t < T; ++t) s.target(t) = sm[static_cast<std::size_t>(t)];
    }
    s.refresh_mask();
  }
  for (auto* rep : {&res.iqr, &res.rolling})
    for (auto& [name, cells] : rep->cells) std::sort(cells.begin(), cells.end());
  return res;
}

}  // namespace adaptcast
