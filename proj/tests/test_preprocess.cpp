#include <gtest/gtest.h>

#include <limits>

#include "adaptcast/preprocess.hpp"
#include "support.hpp"

using namespace adaptcast;

namespace {

const double kNan = std::numeric_limits<double>::quiet_NaN();

SubjectSeries series_from(int id, const Eigen::MatrixXd& X, const Eigen::VectorXd& y) {
  SubjectSeries s;
  s.subject_id = id;
  s.features = X;
  s.target = y;
  for (Eigen::Index t = 0; t < X.rows(); ++t) s.days.push_back(static_cast<int>(t));
  s.refresh_mask();
  return s;
}

std::vector<double> smooth_all(const std::vector<double>& v, SmoothMethod m) {
  return smooth(std::span<const double>(v), m);
}

}  // namespace

TEST(MarkMissing, ScoreSentinels) {
  Eigen::MatrixXd X(4, 1);
  X << 1, -1, 0, 2;
  Eigen::VectorXd y(4);
  y << 80, -1, 0, 75;
  const auto s = mark_missing(series_from(0, X, y));
  EXPECT_FALSE(s.is_missing(0, 1));
  EXPECT_TRUE(s.is_missing(1, 1));
  EXPECT_TRUE(s.is_missing(2, 1));
  EXPECT_FALSE(s.is_missing(3, 1));
  // feature sentinels are left alone
  EXPECT_FALSE(s.is_missing(1, 0));
  EXPECT_EQ(s.features(1, 0), -1.0);
}

TEST(MarkMissing, PositiveScoresUnchanged) {
  Eigen::MatrixXd X = Eigen::MatrixXd::Ones(3, 2);
  Eigen::VectorXd y(3);
  y << 50, 60, 70;
  const auto s = mark_missing(series_from(0, X, y));
  EXPECT_FALSE(s.missing_mask.any());
}

TEST(Iqr, HandCases) {
  const std::vector<double> flat{5, 5, 5, 5, 5};
  EXPECT_TRUE(detect_anomalies_iqr(flat).empty());
  // Q1 = 1.75, Q3 = 27.25, IQR = 25.5: upper fence 52.75 flags 100 only.
  const std::vector<double> v{1, 2, 3, 100};
  EXPECT_DOUBLE_EQ(testsupport::oracle_quantile(v, 0.25), 1.75);
  EXPECT_DOUBLE_EQ(testsupport::oracle_quantile(v, 0.75), 27.25);
  EXPECT_EQ(detect_anomalies_iqr(v), (std::vector<std::size_t>{3}));
}

TEST(Iqr, TooFewValuesWarns) {
  WarningCapture cap;
  const std::vector<double> v{1, 2, 100};
  EXPECT_TRUE(detect_anomalies_iqr(v).empty());
  EXPECT_TRUE(cap.contains("fewer than 4"));
}

TEST(Iqr, MatchesOracleOnRandomVectors) {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = std::uniform_int_distribution<std::size_t>(4, 60)(rng);
    std::vector<double> v(n);
    std::student_t_distribution<double> heavy(2.0);
    for (auto& x : v) x = trial % 3 == 0 ? std::round(heavy(rng) * 3) : heavy(rng);
    const double m = trial % 2 ? 1.0 : 1.5;
    ASSERT_EQ(detect_anomalies_iqr(v, m), testsupport::oracle_iqr(v, m)) << "trial " << trial;
  }
}

TEST(Rolling, HandCases) {
  const std::vector<double> spike{10, 10, 10, 100, 10, 10, 10};
  EXPECT_EQ(detect_anomalies_rolling(spike, 5, 30), (std::vector<std::size_t>{3}));
  EXPECT_TRUE(detect_anomalies_rolling(std::vector<double>(9, 4.0), 5, 30).empty());
  EXPECT_TRUE(detect_anomalies_rolling(spike, 5, std::numeric_limits<double>::infinity()).empty());
  EXPECT_THROW(detect_anomalies_rolling(spike, 0, 30), ConfigError);
}

TEST(Knn, NoMissingIsIdentity) {
  std::mt19937_64 rng(2);
  Eigen::MatrixXd X = Eigen::MatrixXd::Random(6, 3);
  EXPECT_EQ(impute_knn(X), X);
}

TEST(Knn, HandCase) {
  Eigen::MatrixXd X(4, 2);
  X << 1, 10, 1, 11, 1, 12, 1, kNan;
  EXPECT_DOUBLE_EQ(impute_knn(X, 3)(3, 1), 11.0);
}

TEST(Knn, FullyMissingColumnNamed) {
  Eigen::MatrixXd X(3, 2);
  X << 1, kNan, 2, kNan, 3, kNan;
  const std::vector<std::string> names{"TK", "TS"};
  try {
    impute_knn(X, 3, {}, names);
    FAIL();
  } catch (const ImputationError& e) {
    EXPECT_NE(std::string(e.what()).find("TS"), std::string::npos);
  }
}

TEST(Knn, MatchesExhaustiveOracle) {
  std::mt19937_64 rng(23);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 100; ++trial) {
    const Eigen::Index R = 5 + trial % 12, C = 2 + trial % 5;
    Eigen::MatrixXd X(R, C);
    for (Eigen::Index r = 0; r < R; ++r)
      for (Eigen::Index c = 0; c < C; ++c) X(r, c) = trial % 4 == 0 ? std::round(u(rng) * 3) : u(rng) * 10;
    for (Eigen::Index r = 0; r < R; ++r)
      for (Eigen::Index c = 0; c < C; ++c)
        if (u(rng) < 0.15) X(r, c) = kNan;
    for (Eigen::Index c = 0; c < C; ++c) X(c % R, c) = 1.0 + static_cast<double>(c);  // keep one observation
    std::vector<double> w(static_cast<std::size_t>(C));
    for (auto& x : w) x = trial % 2 ? 1.0 : 0.5 + u(rng);
    const int k = 1 + trial % 4;
    const Eigen::MatrixXd got = impute_knn(X, k, w);
    const Eigen::MatrixXd want = testsupport::oracle_knn(X, k, w);
    ASSERT_FALSE(got.hasNaN());
    for (Eigen::Index r = 0; r < R; ++r)
      for (Eigen::Index c = 0; c < C; ++c) ASSERT_NEAR(got(r, c), want(r, c), 1e-12) << trial;
  }
}

TEST(Smooth, ConstantsPreserved) {
  const std::vector<double> v(11, 3.5);
  for (auto m : {SmoothMethod::kExponential, SmoothMethod::kWma, SmoothMethod::kAdaptive, SmoothMethod::kSavgol,
                 SmoothMethod::kEnsemble})
    for (double x : smooth_all(v, m)) EXPECT_NEAR(x, 3.5, 1e-12) << to_string(m);
}

TEST(Smooth, SavgolReproducesRampIncludingEdges) {
  const std::vector<double> ramp{0, 1, 2, 3, 4, 5, 6};
  const auto out = smooth_all(ramp, SmoothMethod::kSavgol);
  for (std::size_t i = 0; i < ramp.size(); ++i) EXPECT_NEAR(out[i], ramp[i], 1e-12);
}

TEST(Smooth, SavgolExactOnQuadraticsInterior) {
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> u(-2, 2);
  for (int trial = 0; trial < 50; ++trial) {
    const double a = u(rng), b = u(rng), c = u(rng);
    std::vector<double> v(15);
    for (std::size_t t = 0; t < v.size(); ++t) {
      const double x = static_cast<double>(t);
      v[t] = a + b * x + c * x * x;
    }
    const auto out = smooth_all(v, SmoothMethod::kSavgol);
    for (std::size_t t = 2; t + 2 < v.size(); ++t) EXPECT_NEAR(out[t], v[t], 1e-9);
  }
}

TEST(Smooth, WmaHandValue) {
  const auto out = smooth_all({0, 0, 10, 0, 0}, SmoothMethod::kWma);
  EXPECT_NEAR(out[2], 10.0 * 3 / 9, 1e-12);
  EXPECT_NEAR(out[0], 10.0 * 1 / 6, 1e-12);  // weights 3,2,1 fit at the left edge
}

TEST(Smooth, ExponentialRecurrence) {
  const auto out = smooth_all({1, 2, 4}, SmoothMethod::kExponential);
  EXPECT_DOUBLE_EQ(out[0], 1.0);
  EXPECT_DOUBLE_EQ(out[1], 0.3 * 2 + 0.7 * 1);
  EXPECT_DOUBLE_EQ(out[2], 0.3 * 4 + 0.7 * out[1]);
}

TEST(Smooth, EnsembleIsMeanOfThree) {
  std::mt19937_64 rng(4);
  std::vector<double> v(12);
  for (auto& x : v) x = std::uniform_real_distribution<double>(0, 9)(rng);
  const auto e = smooth_all(v, SmoothMethod::kExponential), w = smooth_all(v, SmoothMethod::kWma),
             s = smooth_all(v, SmoothMethod::kSavgol), ens = smooth_all(v, SmoothMethod::kEnsemble);
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_NEAR(ens[i], (e[i] + w[i] + s[i]) / 3, 1e-12);
}

TEST(Smooth, ErrorsOnBadInput) {
  const std::vector<double> v{1, kNan, 2};
  EXPECT_THROW(smooth(std::span<const double>(v), SmoothMethod::kWma), ContractError);
  const std::vector<double> ok{1, 2};
  EXPECT_THROW(smooth(std::span<const double>(ok), std::string("median")), ConfigError);
}

TEST(Smooth, Routing) {
  EXPECT_EQ(smoother_for("RH"), SmoothMethod::kExponential);
  EXPECT_EQ(smoother_for("TK"), SmoothMethod::kWma);
  EXPECT_EQ(smoother_for("DS"), SmoothMethod::kAdaptive);
  EXPECT_EQ(smoother_for("HRV"), SmoothMethod::kSavgol);
  EXPECT_EQ(smoother_for("sleep_score"), SmoothMethod::kEnsemble);
}

TEST(Scaler, HandCases) {
  Eigen::MatrixXd fit(2, 1);
  fit << 2, 4;
  const auto s = fit_scaler(fit);
  Eigen::MatrixXd q(1, 1);
  q << 3;
  EXPECT_DOUBLE_EQ(apply_scaler(s, q)(0, 0), 0.5);
  Eigen::MatrixXd flat = Eigen::MatrixXd::Constant(3, 1, 7.0);
  EXPECT_TRUE(apply_scaler(fit_scaler(flat), flat).isZero());
  EXPECT_THROW(apply_scaler(ScalerState{}, q), StateError);
  EXPECT_THROW(invert_scaler(ScalerState{}, Eigen::VectorXd::Zero(1)), StateError);
}

TEST(Scaler, RoundTripAndRange) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    Eigen::MatrixXd X = Eigen::MatrixXd::Random(30, 4) * 50.0;
    const auto s = fit_scaler(X);
    const Eigen::MatrixXd Z = apply_scaler(s, X);
    EXPECT_GE(Z.minCoeff(), 0.0);
    EXPECT_LE(Z.maxCoeff(), 1.0);
    for (std::size_t c = 0; c < 4; ++c) {
      const Eigen::VectorXd back = invert_scaler(s, Z.col(static_cast<Eigen::Index>(c)), c);
      EXPECT_LE((back - X.col(static_cast<Eigen::Index>(c))).cwiseAbs().maxCoeff(), 1e-12);
    }
    // other splits may fall outside [0, 1]; the scaler does not clamp
    const Eigen::MatrixXd other = apply_scaler(s, X * 2.0);
    EXPECT_GT(other.maxCoeff(), 1.0);
  }
}

TEST(Windows, CountFormulaOverGrid) {
  for (std::size_t T = 1; T <= 40; ++T)
    for (std::size_t w : {3, 5, 7, 9, 11})
      for (std::size_t d : {1, 3, 5, 7, 9}) {
        WarningCapture cap;
        const auto s = series_from(0, Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(T), 2),
                                   Eigen::VectorXd::Zero(static_cast<Eigen::Index>(T)));
        const auto ws = make_windows(s, w, d);
        const std::size_t want = T >= w + d ? T - w - d + 1 : 0;
        ASSERT_EQ(ws.size(), want);
        EXPECT_EQ(cap.contains("fewer than"), want == 0);
      }
}

TEST(Windows, ContentsAndStride) {
  Eigen::MatrixXd X(10, 1);
  Eigen::VectorXd y(10);
  for (int t = 0; t < 10; ++t) {
    X(t, 0) = t;
    y(t) = 100 + t;
  }
  const auto ws = make_windows(series_from(4, X, y), 3, 1, 1, 7);
  ASSERT_EQ(ws.size(), 7u);
  EXPECT_EQ(ws.samples[2].x(0, 0), 2);
  EXPECT_EQ(ws.samples[2].y(0), 105);
  EXPECT_EQ(ws.samples[2].domain, 7);
  const auto strided = make_windows(series_from(4, X, y), 3, 5, 2);
  ASSERT_EQ(strided.size(), 2u);
  EXPECT_EQ(strided.samples[0].y.size(), 5);
  EXPECT_EQ(make_windows(series_from(4, X, y), 2, 1, 3).size(), 3u);
}

TEST(Windows, ShortSeriesWarns) {
  WarningCapture cap;
  const auto ws = make_windows(series_from(0, Eigen::MatrixXd::Zero(4, 1), Eigen::VectorXd::Zero(4)), 3, 3);
  EXPECT_TRUE(ws.empty());
  EXPECT_FALSE(cap.messages.empty());
}

TEST(Windows, RejectsMissing) {
  Eigen::VectorXd y = Eigen::VectorXd::Zero(6);
  y(2) = kNan;
  EXPECT_THROW(make_windows(series_from(0, Eigen::MatrixXd::Zero(6, 1), y), 3, 1), ContractError);
}

TEST(CleanSplit, StageOrderHoldsEndToEnd) {
  SynthSpec spec;
  spec.seed = 5;
  spec.n_subjects = 4;
  spec.anomaly_rate = 0.03;
  spec.missing_rate = 0.05;
  const auto cohort = generate_cohort(spec);
  const auto res = clean_split(cohort.subjects, cohort.feature_names);
  ASSERT_EQ(res.series.size(), 4u);
  for (const auto& s : res.series) {
    EXPECT_FALSE(s.missing_mask.any());
    EXPECT_TRUE(s.features.allFinite());
    EXPECT_TRUE(s.target.allFinite());
  }
  EXPECT_GT(res.iqr.total(), 0u);
  // every flagged cell was replaced
  for (const auto& [name, cells] : res.iqr.cells)
    for (const auto& c : cells) {
      const auto f = std::find(cohort.feature_names.begin(), cohort.feature_names.end(), name) -
                     cohort.feature_names.begin();
      EXPECT_NE(res.series[static_cast<std::size_t>(c.subject_id)].features(c.day_index, f),
                cohort.subjects[static_cast<std::size_t>(c.subject_id)].features(c.day_index, f));
    }
  const auto ws = make_windows(res.series[0], 3, 1);
  EXPECT_EQ(ws.size(), 57u);
}

TEST(CleanSplit, FeaturesIgnoreScores) {
  SynthSpec spec;
  spec.seed = 6;
  spec.n_subjects = 3;
  spec.missing_rate = 0.1;
  auto cohort = generate_cohort(spec);
  PreprocessConfig cfg;
  const auto a = clean_split(cohort.subjects, cohort.feature_names, cfg);
  for (auto& s : cohort.subjects) s.target.array() += 7.0;
  const auto b = clean_split(cohort.subjects, cohort.feature_names, cfg);
  for (std::size_t i = 0; i < a.series.size(); ++i) EXPECT_EQ(a.series[i].features, b.series[i].features);
}

TEST(CleanSplit, AnomalyReportJson) {
  AnomalyReport r{"iqr", {{"TK", {{1, 2}}}}};
  const nlohmann::json j = r;
  EXPECT_EQ(j["method"], "iqr");
  EXPECT_EQ(j["cells"]["TK"][0][1], 2);
}
