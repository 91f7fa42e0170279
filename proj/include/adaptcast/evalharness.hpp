#pragma once

// Metrics, trend statistics, PCA diagnostics and the leave-one-subject-out
// harness that ties preprocessing, selection, training and adaptation together.

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "adaptcast/adapt.hpp"
#include "adaptcast/common.hpp"
#include "adaptcast/dataio.hpp"
#include "adaptcast/featselect.hpp"
#include "adaptcast/model.hpp"
#include "adaptcast/preprocess.hpp"

namespace adaptcast {

struct Metrics {
  double mse = 0.0, mae = 0.0, rmse = 0.0;
};

inline void to_json(nlohmann::json& j, const Metrics& m) {
  j = {{"mse", m.mse}, {"mae", m.mae}, {"rmse", m.rmse}};
}

inline Metrics compute_metrics(std::span<const double> y, std::span<const double> yhat) {
  if (y.size() != yhat.size())
    throw ContractError("compute_metrics: " + std::to_string(y.size()) + " targets vs " +
                        std::to_string(yhat.size()) + " predictions");
  if (y.empty()) throw ContractError("compute_metrics: empty input");
  Metrics m;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double d = yhat[i] - y[i];
    m.mse += d * d;
    m.mae += std::abs(d);
  }
  m.mse /= static_cast<double>(y.size());
  m.mae /= static_cast<double>(y.size());
  m.rmse = std::sqrt(m.mse);
  return m;
}

// Centered rolling mean; windows shrink at the edges to the in-range part.
inline std::vector<double> rolling_mean(std::span<const double> v, std::size_t window) {
  const std::size_t n = v.size();
  const std::size_t left = window / 2, right = window - 1 - left;
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t lo = i >= left ? i - left : 0;
    const std::size_t hi = std::min(n - 1, i + right);
    double s = 0.0;
    for (std::size_t k = lo; k <= hi; ++k) s += v[k];
    out[i] = s / static_cast<double>(hi - lo + 1);
  }
  return out;
}

// Pearson r of the rolling-mean trends; nullopt when a trend is constant.
inline std::optional<double> trend_correlation(std::span<const double> y,
                                               std::span<const double> yhat,
                                               std::size_t window = 7) {
  if (y.size() != yhat.size()) throw ContractError("trend_correlation: length mismatch");
  if (window < 1 || y.size() < window)
    throw ContractError("trend_correlation: need at least " + std::to_string(window) + " points");
  const auto a = rolling_mean(y, window), b = rolling_mean(yhat, window);
  auto flat = [](const std::vector<double>& v) {
    const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    return *hi - *lo <= 1e-12 * std::max({1.0, std::abs(*lo), std::abs(*hi)});
  };
  if (flat(a) || flat(b)) return std::nullopt;
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa <= 0.0 || sbb <= 0.0) return std::nullopt;
  return sab / std::sqrt(saa * sbb);
}

inline double trend_direction_accuracy(std::span<const double> y, std::span<const double> yhat,
                                       double tol = 1e-9) {
  if (y.size() != yhat.size()) throw ContractError("trend_direction_accuracy: length mismatch");
  if (y.size() < 2) throw ContractError("trend_direction_accuracy: need at least 2 points");
  auto sign = [tol](double d) { return d > tol ? 1 : (d < -tol ? -1 : 0); };
  std::size_t hits = 0;
  for (std::size_t t = 0; t + 1 < y.size(); ++t)
    if (sign(y[t + 1] - y[t]) == sign(yhat[t + 1] - yhat[t])) ++hits;
  return static_cast<double>(hits) / static_cast<double>(y.size() - 1);
}

// Centered rolling population standard deviation. Positions outside the
// series repeat the nearest edge value, so every day sees a full window.
inline std::vector<double> rolling_uncertainty(std::span<const double> yhat, std::size_t window = 7) {
  const auto n = static_cast<std::ptrdiff_t>(yhat.size());
  if (n == 0) throw ContractError("rolling_uncertainty: empty input");
  const auto left = static_cast<std::ptrdiff_t>(window / 2);
  const auto right = static_cast<std::ptrdiff_t>(window) - 1 - left;
  std::vector<double> out(yhat.size());
  auto at = [&](std::ptrdiff_t k) { return yhat[static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(k, 0, n - 1))]; };
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    // shifted by the centre value so a constant window is exactly zero
    const double c = at(i);
    double s = 0.0, ss = 0.0;
    for (std::ptrdiff_t k = i - left; k <= i + right; ++k) s += at(k) - c;
    const double mean = s / static_cast<double>(window);
    for (std::ptrdiff_t k = i - left; k <= i + right; ++k) {
      const double d = at(k) - c - mean;
      ss += d * d;
    }
    out[static_cast<std::size_t>(i)] = std::sqrt(ss / static_cast<double>(window));
  }
  return out;
}

// ---------------------------------------------------------------------------
// PCA by power iteration with deflation.

struct PcaResult {
  Eigen::MatrixXd coords;      // N x k
  Eigen::MatrixXd components;  // F x k, unit columns
  std::vector<double> explained;
  Eigen::VectorXd center, scale;
};

inline PcaResult pca_project(const Eigen::MatrixXd& X, int dims = 2, bool standardize = true,
                             double tol = 1e-10, int max_iter = 10000) {
  const Eigen::Index N = X.rows(), F = X.cols();
  if (N < 2) throw ContractError("pca_project: need at least 2 rows");
  if (dims < 1 || dims > F) throw ContractError("pca_project: dims must be in [1, F]");
  PcaResult r;
  r.center = X.colwise().mean().transpose();
  r.scale = Eigen::VectorXd::Ones(F);
  Eigen::MatrixXd Z = X.rowwise() - r.center.transpose();
  if (standardize)
    for (Eigen::Index c = 0; c < F; ++c) {
      const double sd = std::sqrt(Z.col(c).squaredNorm() / static_cast<double>(N - 1));
      if (sd > 0) {
        r.scale(c) = sd;
        Z.col(c) /= sd;
      }
    }
  Eigen::MatrixXd C = Z.transpose() * Z / static_cast<double>(N - 1);
  const double total = C.trace();
  std::vector<Eigen::VectorXd> comps;
  for (int k = 0; k < dims; ++k) {
    // deterministic start: the column of C with the largest norm
    Eigen::Index start = 0;
    C.colwise().norm().maxCoeff(&start);
    Eigen::VectorXd v = C.col(start);
    if (v.norm() <= 1e-14 * std::max(1.0, total)) {
      warn("pca_project: data rank below " + std::to_string(dims) + ", returning " +
           std::to_string(k) + " components");
      break;
    }
    v.normalize();
    double lambda = 0.0;
    for (int it = 0; it < max_iter; ++it) {
      Eigen::VectorXd w = C * v;
      const double norm = w.norm();
      if (norm == 0.0) break;
      w /= norm;
      const double diff = std::min((w - v).norm(), (w + v).norm());
      v = w;
      lambda = v.dot(C * v);
      if (diff < tol) break;
    }
    if (lambda <= 1e-12 * std::max(1.0, total)) {
      warn("pca_project: data rank below " + std::to_string(dims) + ", returning " +
           std::to_string(k) + " components");
      break;
    }
    Eigen::Index big = 0;
    v.cwiseAbs().maxCoeff(&big);
    if (v(big) < 0) v = -v;
    comps.push_back(v);
    r.explained.push_back(total > 0 ? lambda / total : 0.0);
    C -= lambda * v * v.transpose();
  }
  r.components.resize(F, static_cast<Eigen::Index>(comps.size()));
  for (std::size_t k = 0; k < comps.size(); ++k) r.components.col(static_cast<Eigen::Index>(k)) = comps[k];
  r.coords = Z * r.components;
  return r;
}

// ---------------------------------------------------------------------------
// Fold preparation

struct PipelineConfig {
  PreprocessConfig preprocess;
  std::string selection = "ensemble";
  int target_k = 15;
  bool global_selection = false;
  int window = 3;
  int horizon = 1;
  ModelConfig model;
  AdaptConfig adapt;
  std::vector<AdaptMode> modes = {AdaptMode::kBoth};
  bool include_baseline = false;
  ModelConfig baseline;  // kind forced to the LSTM baseline
  int trend_window = 7;
  ValPolicy val_policy = ValPolicy::kNextSubject;
  int val_id = 0;
  std::vector<int> test_ids;  // empty: every subject
  int jobs = 1;
  std::uint64_t seed = 0;
};

struct PreparedFold {
  FoldSplit split;
  std::vector<std::string> selected_names;
  std::vector<int> selected;
  FoldWindows windows;
  SubjectSeries val_series, test_series;  // cleaned and scaled
  ScalerState test_target_scaler;
  int n_domains = 0;
};

namespace eval_detail {

inline std::vector<SubjectSeries> pick(const Cohort& c, const std::vector<int>& ids) {
  std::vector<SubjectSeries> out;
  for (int id : ids) out.push_back(c.subject(id));
  return out;
}

inline SubjectSeries select_columns(const SubjectSeries& s, const std::vector<int>& cols) {
  SubjectSeries out = s;
  out.features.resize(s.features.rows(), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t k = 0; k < cols.size(); ++k)
    out.features.col(static_cast<Eigen::Index>(k)) = s.features.col(cols[k]);
  out.refresh_mask();
  return out;
}

// Stacks features (and scores) of one split.
inline std::pair<Eigen::MatrixXd, Eigen::VectorXd> stack(const std::vector<SubjectSeries>& group) {
  Eigen::Index rows = 0;
  for (const auto& s : group) rows += s.features.rows();
  const Eigen::Index F = group.empty() ? 0 : group[0].features.cols();
  Eigen::MatrixXd X(rows, F);
  Eigen::VectorXd y(rows);
  Eigen::Index r = 0;
  for (const auto& s : group) {
    X.block(r, 0, s.features.rows(), F) = s.features;
    y.segment(r, s.target.size()) = s.target;
    r += s.features.rows();
  }
  return {X, y};
}

// Fits one feature scaler and one score scaler on the split and applies both.
inline ScalerState scale_split(std::vector<SubjectSeries>& group) {
  auto [X, y] = stack(group);
  const auto fs = fit_scaler(X);
  const auto ts = fit_scaler(y);
  for (auto& s : group) {
    s.features = apply_scaler(fs, s.features);
    s.target = apply_scaler(ts, s.target).col(0);
  }
  return ts;
}

}  // namespace eval_detail

// Selection on a whole cohort's cleaned data (the --global variant).
inline SelectionResult select_on_cohort(const Cohort& cohort, const PipelineConfig& cfg) {
  const auto clean = clean_split(cohort.subjects, cohort.feature_names, cfg.preprocess);
  auto [X, y] = eval_detail::stack(clean.series);
  return select_features(cfg.selection, X, y, cfg.target_k, mix_seed(cfg.seed, 21), cfg.jobs);
}

// Cleans each split on its own, selects features on the training split,
// scales each split with its own min/max and cuts windows. Domain labels are
// positions in split.train_ids.
inline PreparedFold prepare_fold(const Cohort& cohort, const FoldSplit& split,
                                 const PipelineConfig& cfg,
                                 const std::optional<SelectionResult>& global = std::nullopt) {
  PreparedFold p;
  p.split = split;
  const auto& names = cohort.feature_names;
  auto train = clean_split(eval_detail::pick(cohort, split.train_ids), names, cfg.preprocess).series;
  auto val = clean_split({cohort.subject(split.val_id)}, names, cfg.preprocess).series;
  auto test = clean_split({cohort.subject(split.test_id)}, names, cfg.preprocess).series;

  if (global) {
    p.selected = global->selected;
  } else {
    auto [X, y] = eval_detail::stack(train);
    p.selected = select_features(cfg.selection, X, y, cfg.target_k,
                                 mix_seed(cfg.seed, 100 + static_cast<std::uint64_t>(split.test_id)), 1)
                     .selected;
  }
  for (int c : p.selected) p.selected_names.push_back(names[static_cast<std::size_t>(c)]);
  for (auto* group : {&train, &val, &test})
    for (auto& s : *group) s = eval_detail::select_columns(s, p.selected);

  eval_detail::scale_split(train);
  eval_detail::scale_split(val);
  p.test_target_scaler = eval_detail::scale_split(test);

  const auto w = static_cast<std::size_t>(cfg.window), d = static_cast<std::size_t>(cfg.horizon);
  p.windows.train.w = p.windows.val.w = p.windows.test.w = w;
  p.windows.train.delta = p.windows.val.delta = p.windows.test.delta = d;
  for (std::size_t i = 0; i < train.size(); ++i) {
    auto ws = make_windows(train[i], w, d, 1, static_cast<int>(i));
    for (auto& s : ws.samples) p.windows.train.samples.push_back(std::move(s));
  }
  p.windows.val = make_windows(val[0], w, d);
  p.windows.test = make_windows(test[0], w, d);
  p.val_series = val[0];
  p.test_series = test[0];
  p.n_domains = static_cast<int>(split.train_ids.size());
  return p;
}

// ---------------------------------------------------------------------------
// Reports

struct DayPrediction {
  int day = 0;
  double truth = 0.0, pred = 0.0, band = 0.0;
  int direction_correct = -1;  // -1 on the first day
};

struct FoldReport {
  int fold = 0;
  int test_subject = 0;
  int val_subject = 0;
  std::string model;  // "adaptive" or "lstm"
  std::string mode;
  Metrics metrics;
  std::optional<double> trend_corr_val, trend_corr_test;
  double dir_acc_val = 0.0, dir_acc_test = 0.0;
  std::vector<DayPrediction> predictions;
  std::vector<std::string> selected_features;
  TrainHistory history;
  std::optional<TtaHistory> tta;

  std::string label() const { return model == "lstm" ? std::string("lstm") : model + ":" + mode; }
};

inline void to_json(nlohmann::json& j, const FoldReport& r) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  j = {{"fold", r.fold},
       {"test_subject", r.test_subject},
       {"val_subject", r.val_subject},
       {"model", r.model},
       {"mode", r.mode},
       {"metrics", r.metrics},
       {"trend_corr_val", opt(r.trend_corr_val)},
       {"trend_corr_test", opt(r.trend_corr_test)},
       {"dir_acc_val", r.dir_acc_val},
       {"dir_acc_test", r.dir_acc_test},
       {"selected_features", r.selected_features},
       {"history", r.history}};
  if (r.tta) j["tta"] = *r.tta;
  auto& preds = j["predictions"] = nlohmann::json::array();
  for (const auto& p : r.predictions)
    preds.push_back({p.day, p.truth, p.pred, p.band, p.direction_correct});
}

struct Summary {
  Metrics mean, median;
  std::size_t folds = 0;
};

struct CohortReport {
  nlohmann::json config;
  std::vector<FoldReport> folds;
  std::map<std::string, Summary> summary;  // keyed by FoldReport::label()
  std::vector<std::pair<int, std::string>> failures;

  struct RadarRow {
    int subject;
    std::string metric, model;
    double value;
  };
  std::vector<RadarRow> radar() const {
    std::vector<RadarRow> rows;
    for (const auto& f : folds)
      for (const auto& [name, v] : {std::pair<const char*, double>{"mae", f.metrics.mae},
                                    {"mse", f.metrics.mse},
                                    {"rmse", f.metrics.rmse}})
        rows.push_back({f.test_subject, name, f.label(), v});
    return rows;
  }
};

inline double median(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline std::map<std::string, Summary> summarize(const std::vector<FoldReport>& folds) {
  std::map<std::string, std::vector<const FoldReport*>> by;
  for (const auto& f : folds) by[f.label()].push_back(&f);
  std::map<std::string, Summary> out;
  for (const auto& [label, list] : by) {
    Summary s;
    s.folds = list.size();
    std::vector<double> mse, mae, rmse;
    for (const auto* f : list) {
      mse.push_back(f->metrics.mse);
      mae.push_back(f->metrics.mae);
      rmse.push_back(f->metrics.rmse);
    }
    auto mean = [](const std::vector<double>& v) {
      double t = 0.0;
      for (double x : v) t += x;
      return t / static_cast<double>(v.size());
    };
    s.mean = {mean(mse), mean(mae), mean(rmse)};
    s.median = {median(mse), median(mae), median(rmse)};
    out[label] = s;
  }
  return out;
}

inline void to_json(nlohmann::json& j, const CohortReport& r) {
  j["config"] = r.config;
  j["folds"] = r.folds;
  for (const auto& [label, s] : r.summary)
    j["summary"][label] = {{"mean", s.mean}, {"median", s.median}, {"folds", s.folds}};
  j["failures"] = nlohmann::json::array();
  for (const auto& [id, msg] : r.failures) j["failures"].push_back({{"test_subject", id}, {"error", msg}});
  auto& radar = j["radar"] = nlohmann::json::array();
  for (const auto& row : r.radar()) radar.push_back({row.subject, row.metric, row.model, row.value});
}

// First horizon entry of every window, as a per-day series.
inline std::vector<double> first_step(const Eigen::MatrixXd& m) {
  std::vector<double> v(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) v[static_cast<std::size_t>(i)] = m(i, 0);
  return v;
}

inline std::vector<double> first_step(const WindowSet& ws) {
  std::vector<double> v;
  for (const auto& s : ws.samples) v.push_back(s.y(0));
  return v;
}

template <class T>
FoldReport make_fold_report(const PreparedFold& p, int fold, const std::string& model,
                            const ModeResult<T>& r, int trend_window) {
  FoldReport f;
  f.fold = fold;
  f.test_subject = p.split.test_id;
  f.val_subject = p.split.val_id;
  f.model = model;
  f.mode = to_string(r.mode);
  f.selected_features = p.selected_names;
  f.history = r.history;
  f.tta = r.tta;
  std::vector<double> y, yhat;
  for (const auto& s : p.windows.test.samples)
    for (Eigen::Index j = 0; j < s.y.size(); ++j) y.push_back(s.y(j));
  for (Eigen::Index i = 0; i < r.test_pred.rows(); ++i)
    for (Eigen::Index j = 0; j < r.test_pred.cols(); ++j) yhat.push_back(r.test_pred(i, j));
  f.metrics = compute_metrics(y, yhat);

  const auto yt = first_step(p.windows.test), pt = first_step(r.test_pred);
  const auto yv = first_step(p.windows.val), pv = first_step(r.val_pred);
  const auto tw = static_cast<std::size_t>(trend_window);
  if (yt.size() >= tw) f.trend_corr_test = trend_correlation(yt, pt, tw);
  if (yv.size() >= tw) f.trend_corr_val = trend_correlation(yv, pv, tw);
  if (yt.size() >= 2) f.dir_acc_test = trend_direction_accuracy(yt, pt);
  if (yv.size() >= 2) f.dir_acc_val = trend_direction_accuracy(yv, pv);
  const auto band = rolling_uncertainty(pt, tw);
  for (std::size_t i = 0; i < yt.size(); ++i) {
    DayPrediction d;
    const auto& s = p.windows.test.samples[i];
    d.day = p.test_series.days[s.t0 + p.windows.test.w];
    d.truth = yt[i];
    d.pred = pt[i];
    d.band = band[i];
    if (i > 0) {
      auto sign = [](double v) { return v > 1e-9 ? 1 : (v < -1e-9 ? -1 : 0); };
      d.direction_correct = sign(yt[i] - yt[i - 1]) == sign(pt[i] - pt[i - 1]) ? 1 : 0;
    }
    f.predictions.push_back(d);
  }
  return f;
}

inline nlohmann::json pipeline_json(const PipelineConfig& c) {
  nlohmann::json modes = nlohmann::json::array();
  for (auto m : c.modes) modes.push_back(to_string(m));
  return {{"selection", c.selection},
          {"target_k", c.target_k},
          {"global_selection", c.global_selection},
          {"window", c.window},
          {"horizon", c.horizon},
          {"model", c.model},
          {"adapt", c.adapt},
          {"modes", modes},
          {"include_baseline", c.include_baseline},
          {"baseline", c.baseline},
          {"trend_window", c.trend_window},
          {"val_policy", c.val_policy == ValPolicy::kNextSubject ? "next-subject" : "fixed-id"},
          {"val_id", c.val_id},
          {"test_ids", c.test_ids},
          {"seed", c.seed},
          {"preprocess",
           {{"iqr_multiplier", c.preprocess.iqr_multiplier},
            {"roll_window", c.preprocess.roll_window},
            {"roll_threshold", c.preprocess.roll_threshold},
            {"knn_k", c.preprocess.knn_k},
            {"day_position_weight", c.preprocess.day_position_weight},
            {"smooth", c.preprocess.smooth}}}};
}

// Runs every requested mode (and optionally the LSTM baseline) on one fold.
template <class T = float>
std::vector<FoldReport> run_fold(const PreparedFold& p, int fold, const PipelineConfig& cfg) {
  std::vector<FoldReport> out;
  ModelConfig mcfg = cfg.model;
  mcfg.kind = ModelKind::kAdaptive;
  mcfg.window = cfg.window;
  mcfg.horizon = cfg.horizon;
  mcfg.n_features = static_cast<int>(p.selected.size());
  mcfg.n_domains = p.n_domains;
  AdaptConfig acfg = cfg.adapt;
  acfg.seed = mix_seed(cfg.seed, 1000 + static_cast<std::uint64_t>(p.split.test_id));
  if (!cfg.modes.empty()) {
    const auto results = run_ablation<T>(p.windows, mcfg, acfg, cfg.modes);
    for (auto m : cfg.modes) out.push_back(make_fold_report(p, fold, "adaptive", results.at(m), cfg.trend_window));
  }
  if (cfg.include_baseline) {
    ModelConfig b = cfg.baseline;
    b.kind = ModelKind::kLstmBaseline;
    b.window = cfg.window;
    b.horizon = cfg.horizon;
    b.n_features = mcfg.n_features;
    b.n_domains = p.n_domains;
    AdaptConfig bcfg = acfg;
    bcfg.mode = AdaptMode::kNone;
    out.push_back(make_fold_report(p, fold, "lstm", run_mode<T>(p.windows, b, bcfg), cfg.trend_window));
  }
  return out;
}

template <class T = float>
CohortReport run_loocv(const Cohort& cohort, const PipelineConfig& cfg) {
  cohort.validate();
  cfg.adapt.validate();
  auto folds = make_folds(cohort, cfg.val_policy, cfg.val_id);
  if (!cfg.test_ids.empty()) {
    std::vector<FoldSplit> keep;
    for (const auto& f : folds)
      if (std::find(cfg.test_ids.begin(), cfg.test_ids.end(), f.test_id) != cfg.test_ids.end())
        keep.push_back(f);
    folds = std::move(keep);
  }
  std::optional<SelectionResult> global;
  if (cfg.global_selection) global = select_on_cohort(cohort, cfg);

  std::vector<std::vector<FoldReport>> results(folds.size());
  std::vector<std::string> errors(folds.size());
  parallel_for(folds.size(), resolve_jobs(cfg.jobs), [&](std::size_t i) {
    try {
      const auto p = prepare_fold(cohort, folds[i], cfg, global);
      results[i] = run_fold<T>(p, static_cast<int>(i), cfg);
    } catch (const std::exception& e) {
      errors[i] = e.what();
      if (errors[i].empty()) errors[i] = "unknown error";
    }
  });
  CohortReport report;
  report.config = pipeline_json(cfg);
  for (std::size_t i = 0; i < folds.size(); ++i) {
    if (!errors[i].empty()) {
      warn("fold " + std::to_string(i) + " (test subject " + std::to_string(folds[i].test_id) +
           ") failed: " + errors[i]);
      report.failures.emplace_back(folds[i].test_id, errors[i]);
      continue;
    }
    for (auto& r : results[i]) report.folds.push_back(std::move(r));
  }
  if (report.folds.empty()) throw Error("run_loocv: every fold failed");
  report.summary = summarize(report.folds);
  return report;
}

// ---------------------------------------------------------------------------
// Seeded random search over the architecture / regularization space. The
// objective is the mean test RMSE over the configured LOOCV folds of the
// first requested mode.

inline void sample_hyperparameters(ModelConfig& m, AdaptConfig& a, Rng& rng) {
  auto pick = [&rng](std::initializer_list<int> set) {
    std::uniform_int_distribution<std::size_t> u(0, set.size() - 1);
    return *(set.begin() + u(rng));
  };
  std::uniform_real_distribution<double> dropout(0.1, 0.5), unit(0.0, 1.0);
  m.conv_layers = pick({1, 2});
  m.lstm_layers = pick({1, 2, 3});
  m.cnn_hidden = pick({16, 32, 64});
  m.lstm_hidden = pick({64, 128, 256});
  m.cnn_dropout = dropout(rng);
  m.lstm_dropout = dropout(rng);
  m.batchnorm = pick({0, 1}) == 1;
  a.batch_size = pick({8, 16, 32});
  a.alpha = unit(rng);
}

struct SearchTrial {
  ModelConfig model;
  AdaptConfig adapt;
  double score = std::numeric_limits<double>::quiet_NaN();
  std::string error;
};

struct SearchResult {
  std::vector<SearchTrial> trials;
  int best = -1;
};

inline void to_json(nlohmann::json& j, const SearchResult& r) {
  j["best"] = r.best;
  j["trials"] = nlohmann::json::array();
  for (const auto& t : r.trials)
    j["trials"].push_back({{"model", t.model},
                           {"adapt", t.adapt},
                           {"score", std::isfinite(t.score) ? nlohmann::json(t.score) : nlohmann::json(nullptr)},
                           {"error", t.error}});
}

template <class T = float>
SearchResult random_search(const Cohort& cohort, const PipelineConfig& base, int trials) {
  if (trials < 1) throw ConfigError("trials must be >= 1", "trials");
  if (base.modes.empty()) throw ConfigError("random search needs at least one mode", "modes");
  SearchResult out;
  Rng rng(mix_seed(base.seed, 77));
  double best = std::numeric_limits<double>::infinity();
  for (int k = 0; k < trials; ++k) {
    PipelineConfig cfg = base;
    cfg.modes = {base.modes.front()};
    cfg.include_baseline = false;
    sample_hyperparameters(cfg.model, cfg.adapt, rng);
    SearchTrial t;
    t.model = cfg.model;
    t.adapt = cfg.adapt;
    try {
      const auto report = run_loocv<T>(cohort, cfg);
      double sum = 0.0;
      for (const auto& f : report.folds) sum += f.metrics.rmse;
      t.score = sum / static_cast<double>(report.folds.size());
    } catch (const std::exception& e) {
      t.error = e.what();
    }
    if (std::isfinite(t.score) && t.score < best) {
      best = t.score;
      out.best = k;
    }
    out.trials.push_back(std::move(t));
  }
  return out;
}

// Window-mean feature vectors for the cohort (cleaned together), one row per
// window, plus the subject of each row.
inline std::pair<Eigen::MatrixXd, std::vector<int>> window_means(const Cohort& cohort, int window,
                                                                 const PreprocessConfig& pre = {}) {
  const auto clean = clean_split(cohort.subjects, cohort.feature_names, pre);
  std::vector<Eigen::VectorXd> rows;
  std::vector<int> ids;
  const auto w = static_cast<Eigen::Index>(window);
  for (const auto& s : clean.series)
    for (Eigen::Index t0 = 0; t0 + w <= s.features.rows(); ++t0) {
      rows.push_back(s.features.middleRows(t0, w).colwise().mean().transpose());
      ids.push_back(s.subject_id);
    }
  Eigen::MatrixXd X(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(cohort.n_features()));
  for (std::size_t i = 0; i < rows.size(); ++i) X.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
  return {X, ids};
}

}  // namespace adaptcast
