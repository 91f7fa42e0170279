#pragma once

// Cohort containers, CSV ingestion, the seeded synthetic cohort generator and
// subject-level LOOCV fold construction.

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "adaptcast/common.hpp"

namespace adaptcast {

inline constexpr double kMissing = std::numeric_limits<double>::quiet_NaN();

// Daily Garmin variables, Hydration excluded. "ST" is the daytime stress
// average, which the device exports alongside the tabulated variables.
inline const std::vector<std::string>& default_features() {
  static const std::vector<std::string> names = {
      "TK", "TS", "TD", "HA", "AS",  "MI",  "RH", "MH", "XH", "AWR", "HRV", "LRV",
      "ST", "DS", "LS", "RS", "AW",  "AC",  "SS", "RM", "LR", "HR",  "AR"};
  return names;
}

inline constexpr const char* kTargetColumn = "sleep_score";

struct SubjectSeries {
  int subject_id = 0;
  std::vector<int> days;
  Eigen::MatrixXd features;  // T x F, NaN where missing
  Eigen::VectorXd target;    // T, NaN where missing
  // T x (F+1); the last column is the target.
  Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> missing_mask;

  std::size_t length() const { return days.size(); }
  std::size_t n_features() const { return static_cast<std::size_t>(features.cols()); }

  bool is_missing(std::size_t t, std::size_t col) const {
    return missing_mask(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(col));
  }

  // Recomputes the mask from NaN positions.
  void refresh_mask() {
    const auto T = features.rows(), F = features.cols();
    missing_mask.resize(T, F + 1);
    for (Eigen::Index t = 0; t < T; ++t) {
      for (Eigen::Index f = 0; f < F; ++f)
        missing_mask(t, f) = !std::isfinite(features(t, f));
      missing_mask(t, F) = !std::isfinite(target(t));
    }
  }

  bool operator==(const SubjectSeries& o) const {
    auto same = [](const auto& a, const auto& b) {
      if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
      for (Eigen::Index i = 0; i < a.size(); ++i) {
        const double x = a.data()[i], y = b.data()[i];
        if (std::isnan(x) != std::isnan(y)) return false;
        if (!std::isnan(x) && x != y) return false;
      }
      return true;
    };
    return subject_id == o.subject_id && days == o.days &&
           same(features, o.features) && same(target, o.target) &&
           missing_mask == o.missing_mask;
  }
};

struct Cohort {
  std::vector<SubjectSeries> subjects;
  std::vector<std::string> feature_names;

  std::size_t n_features() const { return feature_names.size(); }

  const SubjectSeries& subject(int id) const {
    for (const auto& s : subjects)
      if (s.subject_id == id) return s;
    throw ConfigError("no subject with id " + std::to_string(id), "subject");
  }

  std::vector<int> subject_ids() const {
    std::vector<int> ids;
    for (const auto& s : subjects) ids.push_back(s.subject_id);
    return ids;
  }

  // Throws IntegrityError when an invariant is broken.
  void validate() const {
    std::set<int> seen;
    for (const auto& s : subjects) {
      if (!seen.insert(s.subject_id).second)
        throw IntegrityError("duplicate subject id " + std::to_string(s.subject_id));
      if (s.days.empty())
        throw IntegrityError("subject " + std::to_string(s.subject_id) + " has no rows");
      if (s.n_features() != feature_names.size() ||
          static_cast<std::size_t>(s.target.size()) != s.length() ||
          static_cast<std::size_t>(s.features.rows()) != s.length())
        throw IntegrityError("subject " + std::to_string(s.subject_id) +
                             " does not match the cohort feature layout");
      for (std::size_t i = 1; i < s.days.size(); ++i)
        if (s.days[i] <= s.days[i - 1])
          throw IntegrityError("subject " + std::to_string(s.subject_id) +
                               ": day indices not strictly increasing");
    }
  }

  bool operator==(const Cohort& o) const {
    return subjects == o.subjects && feature_names == o.feature_names;
  }
};

struct FoldSplit {
  std::vector<int> train_ids;
  int val_id = 0;
  int test_id = 0;
};

struct SynthSpec {
  int n_subjects = 16;
  int n_days = 60;
  int n_features = 23;
  double domain_shift_scale = 1.0;
  double anomaly_rate = 0.0;
  double missing_rate = 0.0;
  std::uint64_t seed = 1;
  // When set, only this feature carries the latent sleep signal.
  std::optional<int> driver_feature;

  void validate() const {
    if (n_subjects < 3)
      throw ConfigError("n_subjects must be >= 3 for LOOCV", "n_subjects");
    if (n_days < 1) throw ConfigError("n_days must be >= 1", "n_days");
    if (n_features < 1) throw ConfigError("n_features must be >= 1", "n_features");
    if (!(domain_shift_scale >= 0.0))
      throw ConfigError("domain_shift_scale must be >= 0", "domain_shift_scale");
    if (!(anomaly_rate >= 0.0 && anomaly_rate <= 1.0))
      throw ConfigError("anomaly_rate must lie in [0,1]", "anomaly_rate");
    if (!(missing_rate >= 0.0 && missing_rate <= 1.0))
      throw ConfigError("missing_rate must lie in [0,1]", "missing_rate");
    if (driver_feature && (*driver_feature < 0 || *driver_feature >= n_features))
      throw ConfigError("driver_feature out of range", "driver_feature");
  }
};

inline void to_json(nlohmann::json& j, const SynthSpec& s) {
  j = {{"n_subjects", s.n_subjects},
       {"n_days", s.n_days},
       {"n_features", s.n_features},
       {"domain_shift_scale", s.domain_shift_scale},
       {"anomaly_rate", s.anomaly_rate},
       {"missing_rate", s.missing_rate},
       {"seed", s.seed}};
  if (s.driver_feature) j["driver_feature"] = *s.driver_feature;
}

inline void from_json(const nlohmann::json& j, SynthSpec& s) {
  s = SynthSpec{};
  s.n_subjects = j.value("n_subjects", s.n_subjects);
  s.n_days = j.value("n_days", s.n_days);
  s.n_features = j.value("n_features", s.n_features);
  s.domain_shift_scale = j.value("domain_shift_scale", s.domain_shift_scale);
  s.anomaly_rate = j.value("anomaly_rate", s.anomaly_rate);
  s.missing_rate = j.value("missing_rate", s.missing_rate);
  s.seed = j.value("seed", s.seed);
  if (j.contains("driver_feature") && !j["driver_feature"].is_null())
    s.driver_feature = j["driver_feature"].get<int>();
}

// ---------------------------------------------------------------------------
// CSV

struct LoadOptions {
  bool trim_ends = true;  // drop each subject's first and last day
};

namespace detail {

inline std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (char c : line) {
    if (c == '"') {
      quoted = !quoted;
    } else if (c == ',' && !quoted) {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(trim(cur));
  return out;
}

inline std::optional<double> parse_cell(const std::string& cell, std::size_t line,
                                        const std::string& column) {
  if (cell.empty()) return std::nullopt;
  const auto l = lower(cell);
  if (l == "nan" || l == "na") return std::nullopt;
  double v = 0.0;
  const auto* first = cell.data();
  const auto* last = cell.data() + cell.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last)
    throw ParseError("column '" + column + "': cannot parse '" + cell + "'", line);
  if (!std::isfinite(v)) return std::nullopt;
  return v;
}

struct RawRow {
  int day;
  std::vector<double> features;
  double target;
};

inline void read_csv_file(const std::filesystem::path& path,
                          const std::vector<std::string>& schema,
                          std::map<int, std::map<int, RawRow>>& rows) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string(), "input");
  std::string line;
  std::size_t line_no = 0;
  if (!std::getline(in, line)) throw ParseError("empty file " + path.string(), 1);
  ++line_no;
  if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line = line.substr(3);
  const auto header = split_csv_line(line);
  std::map<std::string, std::size_t> wanted;
  for (std::size_t i = 0; i < schema.size(); ++i) wanted[lower(schema[i])] = i;
  std::optional<std::size_t> sid_col, day_col, target_col;
  std::vector<std::optional<std::size_t>> feature_col(schema.size());
  for (std::size_t c = 0; c < header.size(); ++c) {
    const auto name = lower(header[c]);
    if (name == "subject_id") sid_col = c;
    else if (name == "day") day_col = c;
    else if (name == kTargetColumn) target_col = c;
    else if (auto it = wanted.find(name); it != wanted.end()) feature_col[it->second] = c;
    else throw SchemaError("unknown column '" + header[c] + "' in " + path.string());
  }
  if (!sid_col || !day_col || !target_col)
    throw SchemaError("header must contain subject_id, day and sleep_score in " +
                      path.string());
  for (std::size_t i = 0; i < schema.size(); ++i)
    if (!feature_col[i])
      throw SchemaError("missing column '" + schema[i] + "' in " + path.string());

  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != header.size())
      throw ParseError("expected " + std::to_string(header.size()) + " fields, got " +
                           std::to_string(cells.size()),
                       line_no);
    auto sid = parse_cell(cells[*sid_col], line_no, "subject_id");
    auto day = parse_cell(cells[*day_col], line_no, "day");
    if (!sid || !day || *sid != std::floor(*sid) || *day != std::floor(*day))
      throw ParseError("subject_id and day must be integers", line_no);
    RawRow row;
    row.day = static_cast<int>(*day);
    row.features.resize(schema.size());
    for (std::size_t i = 0; i < schema.size(); ++i)
      row.features[i] = parse_cell(cells[*feature_col[i]], line_no, schema[i]).value_or(kMissing);
    row.target = parse_cell(cells[*target_col], line_no, kTargetColumn).value_or(kMissing);
    auto& per_subject = rows[static_cast<int>(*sid)];
    if (!per_subject.emplace(row.day, std::move(row)).second)
      throw IntegrityError("duplicate (subject " + std::to_string(static_cast<int>(*sid)) +
                           ", day " + std::to_string(static_cast<int>(*day)) + ") at line " +
                           std::to_string(line_no));
  }
}

}  // namespace detail

// Reads one CSV, or every *.csv in a directory, into a Cohort. Missing cells
// are empty strings; sentinel scores are left for preprocessing.
inline Cohort load_cohort(const std::filesystem::path& path,
                          const std::vector<std::string>& schema = default_features(),
                          const LoadOptions& options = {}) {
  namespace fs = std::filesystem;
  if (!fs::exists(path)) throw ConfigError("input path does not exist: " + path.string(), "input");
  std::vector<fs::path> files;
  if (fs::is_directory(path)) {
    for (const auto& e : fs::directory_iterator(path))
      if (e.path().extension() == ".csv") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw ConfigError("no .csv files in " + path.string(), "input");
  } else {
    files.push_back(path);
  }
  std::map<int, std::map<int, detail::RawRow>> rows;
  for (const auto& f : files) detail::read_csv_file(f, schema, rows);

  Cohort cohort;
  cohort.feature_names = schema;
  for (auto& [sid, by_day] : rows) {
    std::vector<const detail::RawRow*> ordered;
    for (auto& [day, r] : by_day) ordered.push_back(&r);
    if (options.trim_ends) {
      if (ordered.size() < 3)
        throw IntegrityError("subject " + std::to_string(sid) +
                             " has too few days to trim first and last");
      ordered = {ordered.begin() + 1, ordered.end() - 1};
    }
    SubjectSeries s;
    s.subject_id = sid;
    const auto T = static_cast<Eigen::Index>(ordered.size());
    const auto F = static_cast<Eigen::Index>(schema.size());
    s.features.resize(T, F);
    s.target.resize(T);
    for (Eigen::Index t = 0; t < T; ++t) {
      s.days.push_back(ordered[static_cast<std::size_t>(t)]->day);
      for (Eigen::Index f = 0; f < F; ++f)
        s.features(t, f) = ordered[static_cast<std::size_t>(t)]->features[static_cast<std::size_t>(f)];
      s.target(t) = ordered[static_cast<std::size_t>(t)]->target;
    }
    s.refresh_mask();
    cohort.subjects.push_back(std::move(s));
  }
  cohort.validate();
  return cohort;
}

inline std::string format_double(double v) {
  if (!std::isfinite(v)) return {};
  std::array<char, 64> buf{};
  auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), ptr);
}

// Writes the flat one-row-per-(subject, day) format read by load_cohort.
inline void write_cohort_csv(const Cohort& cohort, std::ostream& out) {
  out << "subject_id,day";
  for (const auto& n : cohort.feature_names) out << ',' << n;
  out << ',' << kTargetColumn << '\n';
  for (const auto& s : cohort.subjects)
    for (std::size_t t = 0; t < s.length(); ++t) {
      out << s.subject_id << ',' << s.days[t];
      for (Eigen::Index f = 0; f < s.features.cols(); ++f)
        out << ',' << format_double(s.features(static_cast<Eigen::Index>(t), f));
      out << ',' << format_double(s.target(static_cast<Eigen::Index>(t))) << '\n';
    }
}

// ---------------------------------------------------------------------------
// Synthetic cohorts

// Seeded cohort with per-subject offset/scale shift. The latent sleep state is
// an AR(1) process (coefficient 0.8) bounded to +-3 around a per-subject mean;
// each feature is scale * (loading * latent + noise) + offset around a common
// base level; the score is 70 + 10 * latent clipped to [0, 100].
inline Cohort generate_cohort(const SynthSpec& spec) {
  spec.validate();
  constexpr double kAr = 0.8;
  constexpr double kBase = 10.0;
  constexpr double kFeatureNoise = 0.6;
  Rng rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  Cohort cohort;
  const auto F = spec.n_features;
  if (F == static_cast<int>(default_features().size())) {
    cohort.feature_names = default_features();
  } else {
    for (int f = 0; f < F; ++f) {
      char name[16];
      std::snprintf(name, sizeof name, "f%02d", f);
      cohort.feature_names.emplace_back(name);
    }
  }

  std::vector<double> loading(static_cast<std::size_t>(F));
  for (auto& l : loading) {
    const double mag = 0.3 + 0.7 * unit(rng);
    l = unit(rng) < 0.5 ? -mag : mag;
  }
  double noise_sd = kFeatureNoise;
  if (spec.driver_feature) {
    std::fill(loading.begin(), loading.end(), 0.0);
    loading[static_cast<std::size_t>(*spec.driver_feature)] = 1.0;
    noise_sd = 0.2;
  }

  const double shift = spec.domain_shift_scale;
  for (int s = 0; s < spec.n_subjects; ++s) {
    SubjectSeries series;
    series.subject_id = s;
    const auto T = static_cast<Eigen::Index>(spec.n_days);
    series.features.resize(T, F);
    series.target.resize(T);
    std::vector<double> offset(static_cast<std::size_t>(F)), scale(static_cast<std::size_t>(F));
    for (int f = 0; f < F; ++f) {
      offset[static_cast<std::size_t>(f)] = shift * normal(rng);
      scale[static_cast<std::size_t>(f)] = std::exp(0.3 * shift * normal(rng));
    }
    const double subject_mean = 0.5 * shift * normal(rng);
    double z = normal(rng);
    for (Eigen::Index t = 0; t < T; ++t) {
      if (t > 0) z = kAr * z + std::sqrt(1.0 - kAr * kAr) * normal(rng);
      z = std::clamp(z, -3.0, 3.0);
      const double latent = subject_mean + z;
      series.days.push_back(static_cast<int>(t));
      series.target(t) = std::clamp(70.0 + 10.0 * latent, 0.0, 100.0);
      for (int f = 0; f < F; ++f) {
        const auto fi = static_cast<std::size_t>(f);
        series.features(t, f) =
            kBase + scale[fi] * (loading[fi] * latent + noise_sd * normal(rng)) + offset[fi];
      }
    }
    for (Eigen::Index t = 0; t < T; ++t)
      for (int f = 0; f < F; ++f)
        if (unit(rng) < spec.anomaly_rate) series.features(t, f) *= 5.0;
    for (Eigen::Index t = 0; t < T; ++t) {
      for (int f = 0; f < F; ++f)
        if (unit(rng) < spec.missing_rate) series.features(t, f) = kMissing;
      if (unit(rng) < spec.missing_rate) series.target(t) = kMissing;
    }
    series.refresh_mask();
    cohort.subjects.push_back(std::move(series));
  }
  return cohort;
}

// ---------------------------------------------------------------------------
// Folds

enum class ValPolicy { kNextSubject, kFixedId };

// One fold per subject as test. The validation subject is the next id
// (cyclically) or a fixed id; everyone else trains.
inline std::vector<FoldSplit> make_folds(const Cohort& cohort,
                                         ValPolicy policy = ValPolicy::kNextSubject,
                                         int fixed_val_id = 0) {
  auto ids = cohort.subject_ids();
  if (ids.size() < 3)
    throw ConfigError("LOOCV needs at least 3 subjects, got " + std::to_string(ids.size()),
                      "subjects");
  std::sort(ids.begin(), ids.end());
  if (policy == ValPolicy::kFixedId &&
      std::find(ids.begin(), ids.end(), fixed_val_id) == ids.end())
    throw ConfigError("validation id " + std::to_string(fixed_val_id) + " not in cohort",
                      "val_id");
  std::vector<FoldSplit> folds;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    FoldSplit fold;
    fold.test_id = ids[i];
    fold.val_id = ids[(i + 1) % ids.size()];
    if (policy == ValPolicy::kFixedId && fixed_val_id != fold.test_id)
      fold.val_id = fixed_val_id;
    for (int id : ids)
      if (id != fold.test_id && id != fold.val_id) fold.train_ids.push_back(id);
    folds.push_back(std::move(fold));
  }
  return folds;
}

}  // namespace adaptcast
