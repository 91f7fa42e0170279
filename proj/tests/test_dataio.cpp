#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "adaptcast/dataio.hpp"

using namespace adaptcast;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("adaptcast_dataio_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string header(const std::vector<std::string>& names) {
  std::string h = "subject_id,day";
  for (const auto& n : names) h += "," + n;
  return h + ",sleep_score\n";
}

std::string row(int sid, int day, std::size_t F, double base, const std::string& target = "70") {
  std::string r = std::to_string(sid) + "," + std::to_string(day);
  for (std::size_t f = 0; f < F; ++f) r += "," + std::to_string(base + static_cast<double>(f));
  return r + "," + target + "\n";
}

void write(const fs::path& p, const std::string& s) {
  std::ofstream(p) << s;
}

}  // namespace

TEST(LoadCohort, TwoSubjectsThreeDaysRoundTrip) {
  const auto dir = temp_dir("roundtrip");
  const auto& names = default_features();
  std::string csv = header(names);
  for (int s = 0; s < 2; ++s)
    for (int d = 0; d < 3; ++d) csv += row(s, d, names.size(), s * 100 + d);
  write(dir / "c.csv", csv);
  const auto c = load_cohort(dir / "c.csv", names, {.trim_ends = false});
  ASSERT_EQ(c.subjects.size(), 2u);
  for (const auto& s : c.subjects) {
    EXPECT_EQ(s.features.rows(), 3);
    EXPECT_EQ(s.features.cols(), 23);
    EXPECT_EQ(s.days, (std::vector<int>{0, 1, 2}));
  }
  EXPECT_DOUBLE_EQ(c.subject(1).features(2, 4), 100 + 2 + 4);

  std::ostringstream out;
  write_cohort_csv(c, out);
  write(dir / "again.csv", out.str());
  EXPECT_EQ(load_cohort(dir / "again.csv", names, {.trim_ends = false}), c);
}

TEST(LoadCohort, EmptyCellIsMissing) {
  const auto dir = temp_dir("empty");
  const std::vector<std::string> names{"TK", "TS", "TD"};
  write(dir / "c.csv", header(names) + "0,0,1,2,3,70\n0,1,1,2,3,71\n0,2,1,,3,72\n");
  const auto c = load_cohort(dir / "c.csv", names, {.trim_ends = false});
  const auto& s = c.subjects[0];
  EXPECT_TRUE(s.is_missing(2, 1));
  EXPECT_FALSE(s.is_missing(2, 0));
  EXPECT_FALSE(s.is_missing(1, 1));
  EXPECT_EQ(s.missing_mask.cols(), 4);
}

TEST(LoadCohort, HeaderIsCaseInsensitive) {
  const auto dir = temp_dir("case");
  write(dir / "c.csv", "Subject_ID,DAY,tk,Ts,Sleep_Score\n0,0,1,2,70\n");
  const auto c = load_cohort(dir / "c.csv", {"TK", "TS"}, {.trim_ends = false});
  EXPECT_EQ(c.subjects.size(), 1u);
}

TEST(LoadCohort, DuplicateDayIsIntegrityError) {
  const auto dir = temp_dir("dup");
  write(dir / "c.csv", header({"TK"}) + "1,0,1,70\n1,1,1,70\n1,1,2,70\n");
  EXPECT_THROW(load_cohort(dir / "c.csv", {"TK"}, {.trim_ends = false}), IntegrityError);
}

TEST(LoadCohort, MalformedRowReportsLine) {
  const auto dir = temp_dir("bad");
  write(dir / "c.csv", header({"TK"}) + "1,0,1,70\n1,1,abc,70\n");
  try {
    load_cohort(dir / "c.csv", {"TK"}, {.trim_ends = false});
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 3u);
  }
  write(dir / "c.csv", header({"TK"}) + "1,0,1\n");
  EXPECT_THROW(load_cohort(dir / "c.csv", {"TK"}, {.trim_ends = false}), ParseError);
}

TEST(LoadCohort, UnknownColumnIsSchemaError) {
  const auto dir = temp_dir("unknown");
  write(dir / "c.csv", "subject_id,day,TK,XX,sleep_score\n0,0,1,2,70\n");
  EXPECT_THROW(load_cohort(dir / "c.csv", {"TK"}, {.trim_ends = false}), SchemaError);
}

TEST(LoadCohort, DirectoryOfFilesAndTrim) {
  const auto dir = temp_dir("multi");
  for (int s = 0; s < 2; ++s) {
    std::string csv = header({"TK"});
    for (int d = 0; d < 5; ++d) csv += row(s, d, 1, d);
    write(dir / ("s" + std::to_string(s) + ".csv"), csv);
  }
  const auto c = load_cohort(dir, {"TK"});
  ASSERT_EQ(c.subjects.size(), 2u);
  EXPECT_EQ(c.subjects[0].days, (std::vector<int>{1, 2, 3}));
}

TEST(LoadCohort, MissingPathIsConfigError) {
  EXPECT_THROW(load_cohort("/nonexistent/adaptcast.csv"), ConfigError);
}

TEST(GenerateCohort, Deterministic) {
  SynthSpec s;
  s.seed = 1;
  s.anomaly_rate = 0.02;
  s.missing_rate = 0.05;
  EXPECT_EQ(generate_cohort(s), generate_cohort(s));
  auto other = s;
  other.seed = 2;
  EXPECT_FALSE(generate_cohort(s) == generate_cohort(other));
}

TEST(GenerateCohort, ShapesAndRanges) {
  SynthSpec s;
  s.seed = 3;
  const auto c = generate_cohort(s);
  EXPECT_EQ(c.subjects.size(), 16u);
  EXPECT_EQ(c.feature_names, default_features());
  for (const auto& sub : c.subjects) {
    EXPECT_EQ(sub.features.rows(), 60);
    EXPECT_GE(sub.target.minCoeff(), 0.0);
    EXPECT_LE(sub.target.maxCoeff(), 100.0);
    EXPECT_FALSE(sub.missing_mask.any());
    EXPECT_TRUE(sub.features.allFinite());
  }
}

TEST(GenerateCohort, RatesProduceMissingCells) {
  SynthSpec s;
  s.seed = 4;
  s.missing_rate = 0.1;
  const auto c = generate_cohort(s);
  double frac = 0;
  for (const auto& sub : c.subjects) frac += static_cast<double>(sub.missing_mask.count()) / static_cast<double>(sub.missing_mask.size());
  frac /= static_cast<double>(c.subjects.size());
  EXPECT_NEAR(frac, 0.1, 0.02);
}

TEST(GenerateCohort, ZeroShiftMeansAgree) {
  // Per-subject feature means differ only by sampling noise: the gap between
  // two subjects stays within 3 sigma of the two-sample mean difference. The
  // AR(1) latent inflates the variance of a mean, so sigma uses the pooled
  // long-run variance with the AR(1) factor (1 + a) / (1 - a).
  int violations = 0, checks = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    SynthSpec s;
    s.seed = seed;
    s.domain_shift_scale = 0.0;
    s.n_subjects = 4;
    s.n_days = 200;
    const auto c = generate_cohort(s);
    const double T = 200;
    for (Eigen::Index f = 0; f < c.subjects[0].features.cols(); ++f) {
      const auto& a = c.subjects[0].features.col(f);
      const auto& b = c.subjects[1].features.col(f);
      const double va = (a.array() - a.mean()).square().sum() / (T - 1);
      const double vb = (b.array() - b.mean()).square().sum() / (T - 1);
      const double sigma = std::sqrt((va + vb) / T * (1.8 / 0.2));
      ++checks;
      if (std::abs(a.mean() - b.mean()) >= 3 * sigma) ++violations;
    }
  }
  EXPECT_LE(violations, checks / 100 + 1);
}

TEST(GenerateCohort, ShiftMakesSubjectsLinearlySeparable) {
  // Least-squares one-vs-rest on 3-day window means; train on the first half
  // of each subject's windows, test on the second half.
  double acc_sum = 0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    SynthSpec s;
    s.seed = seed;
    const auto c = generate_cohort(s);
    const int N = static_cast<int>(c.subjects.size());
    const Eigen::Index F = c.subjects[0].features.cols();
    std::vector<Eigen::RowVectorXd> xtr, xte;
    std::vector<int> ytr, yte;
    for (int i = 0; i < N; ++i) {
      const auto& X = c.subjects[static_cast<std::size_t>(i)].features;
      for (Eigen::Index t = 0; t + 3 <= X.rows(); ++t) {
        Eigen::RowVectorXd r(F + 1);
        r << X.middleRows(t, 3).colwise().mean(), 1.0;
        if (t < X.rows() / 2) {
          xtr.push_back(r);
          ytr.push_back(i);
        } else {
          xte.push_back(r);
          yte.push_back(i);
        }
      }
    }
    Eigen::MatrixXd A(static_cast<Eigen::Index>(xtr.size()), F + 1);
    Eigen::MatrixXd Y = Eigen::MatrixXd::Zero(A.rows(), N);
    for (std::size_t r = 0; r < xtr.size(); ++r) {
      A.row(static_cast<Eigen::Index>(r)) = xtr[r];
      Y(static_cast<Eigen::Index>(r), ytr[r]) = 1.0;
    }
    const Eigen::MatrixXd W = A.colPivHouseholderQr().solve(Y);
    int correct = 0;
    for (std::size_t r = 0; r < xte.size(); ++r) {
      Eigen::Index arg;
      (xte[r] * W).maxCoeff(&arg);
      correct += static_cast<int>(arg) == yte[r];
    }
    acc_sum += static_cast<double>(correct) / static_cast<double>(xte.size());
  }
  EXPECT_GT(acc_sum / 5, 1.0 / 16 + 0.1);
}

TEST(SynthSpec, Validation) {
  SynthSpec s;
  s.n_subjects = 2;
  EXPECT_THROW(s.validate(), ConfigError);
  s = SynthSpec{};
  s.missing_rate = 1.5;
  EXPECT_THROW(s.validate(), ConfigError);
}

TEST(SynthSpec, JsonRoundTrip) {
  SynthSpec s;
  s.seed = 99;
  s.domain_shift_scale = 0.5;
  s.driver_feature = 3;
  const nlohmann::json j = s;
  const auto back = j.get<SynthSpec>();
  EXPECT_EQ(back.seed, 99u);
  EXPECT_EQ(back.domain_shift_scale, 0.5);
  EXPECT_EQ(back.driver_feature, 3);
}

TEST(MakeFolds, SixteenSubjects) {
  SynthSpec s;
  const auto folds = make_folds(generate_cohort(s));
  ASSERT_EQ(folds.size(), 16u);
  for (const auto& f : folds) {
    EXPECT_EQ(f.train_ids.size(), 14u);
    EXPECT_EQ(f.val_id, (f.test_id + 1) % 16);
  }
}

TEST(MakeFolds, SmallestCase) {
  SynthSpec s;
  s.n_subjects = 3;
  const auto folds = make_folds(generate_cohort(s));
  EXPECT_EQ(folds[0].test_id, 0);
  EXPECT_EQ(folds[0].val_id, 1);
  EXPECT_EQ(folds[0].train_ids, std::vector<int>{2});
}

TEST(MakeFolds, CoverAndDisjointProperty) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 40; ++trial) {
    Cohort c;
    const int n = std::uniform_int_distribution<int>(3, 25)(rng);
    std::set<int> ids;
    while (static_cast<int>(ids.size()) < n) ids.insert(std::uniform_int_distribution<int>(0, 200)(rng));
    for (int id : ids) {
      SubjectSeries s;
      s.subject_id = id;
      s.days = {0};
      s.features = Eigen::MatrixXd::Zero(1, 1);
      s.target = Eigen::VectorXd::Zero(1);
      s.refresh_mask();
      c.subjects.push_back(s);
    }
    c.feature_names = {"TK"};
    const bool fixed = trial % 2 == 1;
    const int fixed_id = *ids.begin();
    const auto folds = make_folds(c, fixed ? ValPolicy::kFixedId : ValPolicy::kNextSubject, fixed_id);
    ASSERT_EQ(folds.size(), static_cast<std::size_t>(n));
    for (const auto& f : folds) {
      std::multiset<int> all(f.train_ids.begin(), f.train_ids.end());
      all.insert(f.test_id);
      all.insert(f.val_id);
      EXPECT_NE(f.val_id, f.test_id);
      EXPECT_EQ(std::set<int>(all.begin(), all.end()), ids);
      EXPECT_EQ(all.size(), ids.size());
    }
  }
}

TEST(MakeFolds, TooFewSubjects) {
  SynthSpec s;
  s.n_subjects = 3;
  auto c = generate_cohort(s);
  c.subjects.pop_back();
  EXPECT_THROW(make_folds(c), ConfigError);
}
