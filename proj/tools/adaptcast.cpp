// Command-line front end: generate, preprocess, select-features, train,
// adapt, loocv, explain, grid. Exit codes: 0 ok, 1 runtime failure,
// 2 invalid configuration (error JSON on stderr names the field).

#include <CLI11.hpp>
#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include <cstdio>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <optional>
#include <set>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "adaptcast/adapt.hpp"
#include "adaptcast/dataio.hpp"
#include "adaptcast/evalharness.hpp"
#include "adaptcast/explain.hpp"
#include "adaptcast/featselect.hpp"
#include "adaptcast/model.hpp"
#include "adaptcast/preprocess.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace adaptcast;

namespace {

constexpr const char* kVersion = "0.1.0";

// ---------------------------------------------------------------------------
// Configuration

struct RunConfig {
  std::uint64_t seed = 0;
  std::optional<std::string> input;
  std::vector<std::string> schema = default_features();
  bool trim_ends = false;
  SynthSpec synth;
  std::string out = "out";
  std::vector<int> windows = {3, 5, 7, 9, 11};
  std::vector<int> horizons = {1, 3, 5, 7, 9};
  bool allow_custom = false;
  int trials = 0;
  int background = 50;
  int instances = 100;
  std::optional<int> subject;
  std::string checkpoint;
  PipelineConfig pipeline;
};

template <class T>
T get_field(const json& j, const char* key, const std::string& field, const T& fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("bad value for '" + field + "': " + e.what(), field);
  }
}

template <class T>
T get_section(const json& j, const char* key) {
  if (!j.contains(key)) return T{};
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad '") + key + "' section: " + e.what(), key);
  }
}

PreprocessConfig parse_preprocess(const json& j) {
  PreprocessConfig p;
  if (!j.is_object()) return p;
  p.iqr_multiplier = get_field(j, "iqr_multiplier", "preprocess.iqr_multiplier", p.iqr_multiplier);
  p.roll_window = get_field(j, "roll_window", "preprocess.roll_window", p.roll_window);
  p.roll_threshold = get_field(j, "roll_threshold", "preprocess.roll_threshold", p.roll_threshold);
  p.knn_k = get_field(j, "knn_k", "preprocess.knn_k", p.knn_k);
  p.day_position_weight = get_field(j, "day_position_weight", "preprocess.day_position_weight", p.day_position_weight);
  p.smooth = get_field(j, "smooth", "preprocess.smooth", p.smooth);
  return p;
}

bool in_set(int v, std::initializer_list<int> set) { return std::find(set.begin(), set.end(), v) != set.end(); }

RunConfig parse_run_config(const json& j) {
  RunConfig c;
  if (!j.contains("seed") || j["seed"].is_null()) throw ConfigError("seed is required", "seed");
  c.seed = get_field<std::uint64_t>(j, "seed", "seed", 0);
  if (j.contains("input") && !j["input"].is_null()) c.input = get_field<std::string>(j, "input", "input", "");
  c.schema = get_field(j, "schema", "schema", c.schema);
  c.trim_ends = get_field(j, "trim_ends", "trim_ends", c.trim_ends);
  c.synth = get_section<SynthSpec>(j, "synth");
  if (!j.contains("synth") || !j["synth"].contains("seed")) c.synth.seed = c.seed;
  c.out = get_field(j, "out", "out", c.out);
  c.windows = get_field(j, "windows", "windows", c.windows);
  c.horizons = get_field(j, "horizons", "horizons", c.horizons);
  c.allow_custom = get_field(j, "allow_custom", "allow_custom", c.allow_custom);
  c.trials = get_field(j, "trials", "trials", c.trials);
  c.background = get_field(j, "background", "background", c.background);
  c.instances = get_field(j, "instances", "instances", c.instances);
  if (j.contains("subject") && !j["subject"].is_null()) c.subject = get_field<int>(j, "subject", "subject", 0);
  c.checkpoint = get_field<std::string>(j, "checkpoint", "checkpoint", "");

  auto& p = c.pipeline;
  p.seed = c.seed;
  p.preprocess = parse_preprocess(j.value("preprocess", json::object()));
  p.selection = get_field(j, "selection", "selection", p.selection);
  p.target_k = get_field(j, "target_k", "target_k", p.target_k);
  p.global_selection = get_field(j, "global_selection", "global_selection", p.global_selection);
  p.window = get_field(j, "window", "window", p.window);
  p.horizon = get_field(j, "horizon", "horizon", p.horizon);
  p.model = get_section<ModelConfig>(j, "model");
  p.adapt = get_section<AdaptConfig>(j, "adapt");
  p.adapt.seed = c.seed;
  if (j.contains("modes")) {
    p.modes.clear();
    for (const auto& m : get_field<std::vector<std::string>>(j, "modes", "modes", {}))
      p.modes.push_back(parse_adapt_mode(m));
  }
  p.include_baseline = get_field(j, "include_baseline", "include_baseline", p.include_baseline);
  p.baseline = get_section<ModelConfig>(j, "baseline");
  p.trend_window = get_field(j, "trend_window", "trend_window", p.trend_window);
  const auto policy = get_field<std::string>(j, "val_policy", "val_policy", "next-subject");
  if (policy == "next-subject") {
    p.val_policy = ValPolicy::kNextSubject;
  } else if (policy == "fixed-id") {
    p.val_policy = ValPolicy::kFixedId;
  } else {
    throw ConfigError("val_policy must be next-subject or fixed-id", "val_policy");
  }
  p.val_id = get_field(j, "val_id", "val_id", p.val_id);
  p.test_ids = get_field(j, "test_ids", "test_ids", p.test_ids);
  p.jobs = resolve_jobs(get_field(j, "jobs", "jobs", 0));

  // range checks that belong to the run rather than to a module
  auto grid_ok = [&](int w, int d) {
    return c.allow_custom || (in_set(w, {3, 5, 7, 9, 11}) && in_set(d, {1, 3, 5, 7, 9}));
  };
  if (!grid_ok(p.window, 1)) throw ConfigError("window must be in {3,5,7,9,11} (or --allow-custom)", "window");
  if (!grid_ok(3, p.horizon)) throw ConfigError("horizon must be in {1,3,5,7,9} (or --allow-custom)", "horizon");
  for (int w : c.windows)
    if (!grid_ok(w, 1)) throw ConfigError("windows must lie in {3,5,7,9,11} (or --allow-custom)", "windows");
  for (int d : c.horizons)
    if (!grid_ok(3, d)) throw ConfigError("horizons must lie in {1,3,5,7,9} (or --allow-custom)", "horizons");
  if (p.window < 1 || p.horizon < 1) throw ConfigError("window and horizon must be >= 1", "window");
  if (p.target_k < 1) throw ConfigError("target_k must be >= 1", "target_k");
  if (p.trend_window < 1) throw ConfigError("trend_window must be >= 1", "trend_window");
  if (c.trials < 0) throw ConfigError("trials must be >= 0", "trials");
  if (c.background < 1) throw ConfigError("background must be >= 1", "background");
  if (c.instances < 1) throw ConfigError("instances must be >= 1", "instances");
  if (p.selection != "correlation" && p.selection != "mi" && p.selection != "rfe" && p.selection != "ensemble")
    throw ConfigError("selection must be correlation, mi, rfe or ensemble", "selection");
  if (c.input && !fs::exists(*c.input)) throw ConfigError("input path does not exist: " + *c.input, "input");
  c.synth.validate();
  p.adapt.validate();
  // the data-dependent fields are filled per fold; check the rest now
  for (ModelConfig m : {p.model, p.baseline}) {
    m.window = p.window;
    m.horizon = p.horizon;
    m.n_features = p.target_k;
    m.n_domains = 2;
    m.validate();
  }
  return c;
}

// Canonical JSON of the effective configuration; this is what manifests hold.
json effective_json(const RunConfig& c) {
  json j = pipeline_json(c.pipeline);
  j["seed"] = c.seed;
  j["input"] = c.input ? json(*c.input) : json(nullptr);
  j["schema"] = c.schema;
  j["trim_ends"] = c.trim_ends;
  j["synth"] = c.synth;
  j["out"] = c.out;
  j["windows"] = c.windows;
  j["horizons"] = c.horizons;
  j["allow_custom"] = c.allow_custom;
  j["trials"] = c.trials;
  j["background"] = c.background;
  j["instances"] = c.instances;
  j["subject"] = c.subject ? json(*c.subject) : json(nullptr);
  j["checkpoint"] = c.checkpoint;
  return j;
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// ---------------------------------------------------------------------------
// Output

class Outputs {
 public:
  explicit Outputs(fs::path dir) : dir_(std::move(dir)) {}

  // Write-temp-then-rename so readers never see a partial file.
  void write(const std::string& name, const std::string& content) {
    fs::create_directories(dir_);  // only once there is something to write
    const fs::path final_path = dir_ / name;
    fs::path tmp = final_path;
    tmp += ".tmp";
    {
      std::ofstream f(tmp, std::ios::binary);
      if (!f) throw Error("cannot write " + tmp.string());
      f << content;
      if (!f) throw Error("write failed for " + tmp.string());
    }
    fs::rename(tmp, final_path);
    files_.push_back(name);
  }
  void write_json(const std::string& name, const json& j) { write(name, j.dump(2) + "\n"); }

  void save_model(const std::string& stem, const ModelParams<float>& m) {
    // staged in a sibling directory so the pair appears complete
    const fs::path stage = dir_ / (".stage_" + stem);  // also creates dir_
    fs::create_directories(stage);
    save_checkpoint(m, stage / stem);
    for (const char* ext : {".bin", ".json"}) {
      fs::rename(stage / (stem + ext), dir_ / (stem + ext));
      files_.push_back(stem + ext);
    }
    fs::remove(stage);
  }

  void manifest(const std::string& command, const json& config) {
    json m;
    m["command"] = command;
    m["config"] = config;
    json hashed = config;  // where results land does not change them
    hashed.erase("out");
    m["config_hash"] = hex64(fnv1a(hashed.dump()));
    m["seed"] = config.at("seed");
    m["versions"] = {{"adaptcast", kVersion},
                     {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                   std::to_string(EIGEN_MINOR_VERSION)},
                     {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                           std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                           std::to_string(NLOHMANN_JSON_VERSION_PATCH)},
                     {"cli11", CLI11_VERSION},
                     {"compiler", __VERSION__}};
    m["outputs"] = files_;
    write_json("manifest.json", m);
  }

  const fs::path& dir() const { return dir_; }

 private:
  fs::path dir_;
  std::vector<std::string> files_;
};

std::string fmt(double v) { return format_double(v); }

// ---------------------------------------------------------------------------
// Commands

Cohort obtain_cohort(const RunConfig& c) {
  if (c.input) return load_cohort(*c.input, c.schema, LoadOptions{.trim_ends = c.trim_ends});
  return generate_cohort(c.synth);
}

FoldSplit fold_for(const Cohort& cohort, const RunConfig& c) {
  const auto folds = make_folds(cohort, c.pipeline.val_policy, c.pipeline.val_id);
  const int id = c.subject.value_or(cohort.subject_ids().front());
  for (const auto& f : folds)
    if (f.test_id == id) return f;
  throw ConfigError("no subject with id " + std::to_string(id), "subject");
}

ModelConfig fold_model(const RunConfig& c, const PreparedFold& p) {
  ModelConfig m = c.pipeline.model;
  m.kind = ModelKind::kAdaptive;
  m.window = c.pipeline.window;
  m.horizon = c.pipeline.horizon;
  m.n_features = static_cast<int>(p.selected.size());
  m.n_domains = p.n_domains;
  m.validate();
  return m;
}

AdaptConfig fold_adapt(const RunConfig& c, const PreparedFold& p) {
  AdaptConfig a = c.pipeline.adapt;
  a.mode = c.pipeline.modes.empty() ? AdaptMode::kBoth : c.pipeline.modes.front();
  a.seed = mix_seed(c.seed, 1000 + static_cast<std::uint64_t>(p.split.test_id));
  return a;
}

std::string predictions_csv(const std::vector<const FoldReport*>& reports) {
  std::ostringstream o;
  o << "model,day,true,pred,band,direction_correct\n";
  for (const auto* r : reports)
    for (const auto& d : r->predictions) {
      o << r->label() << ',' << d.day << ',' << fmt(d.truth) << ',' << fmt(d.pred) << ',' << fmt(d.band) << ',';
      if (d.direction_correct >= 0) o << d.direction_correct;
      o << '\n';
    }
  return o.str();
}

void cmd_generate(const RunConfig& c, Outputs& out) {
  const auto cohort = generate_cohort(c.synth);
  std::ostringstream csv;
  write_cohort_csv(cohort, csv);
  out.write("cohort.csv", csv.str());
}

void cmd_preprocess(const RunConfig& c, Outputs& out) {
  const auto cohort = obtain_cohort(c);
  const auto clean = clean_split(cohort.subjects, cohort.feature_names, c.pipeline.preprocess);
  Cohort cleaned{clean.series, cohort.feature_names};
  std::ostringstream csv;
  write_cohort_csv(cleaned, csv);
  out.write("cleaned.csv", csv.str());
  out.write_json("anomalies.json", {{"iqr", clean.iqr}, {"rolling", clean.rolling}});
}

void cmd_select(const RunConfig& c, Outputs& out) {
  const auto cohort = obtain_cohort(c);
  const auto r = select_on_cohort(cohort, c.pipeline);
  json j = r;
  std::vector<std::string> names;
  for (int i : r.selected) names.push_back(cohort.feature_names[static_cast<std::size_t>(i)]);
  j["selected_names"] = names;
  out.write_json("selection.json", j);
}

void cmd_train(RunConfig c, Outputs& out) {
  const auto cohort = obtain_cohort(c);
  if (c.trials > 0) {
    const auto search = random_search<float>(cohort, c.pipeline, c.trials);
    out.write_json("search.json", search);
    if (search.best < 0) throw Error("random search: every trial failed");
    const auto& best = search.trials[static_cast<std::size_t>(search.best)];
    c.pipeline.model = best.model;
    const auto mode = c.pipeline.adapt.mode;
    c.pipeline.adapt = best.adapt;
    c.pipeline.adapt.mode = mode;
  }
  const auto p = prepare_fold(cohort, fold_for(cohort, c), c.pipeline);
  auto model = init_model<float>(fold_model(c, p), mix_seed(fold_adapt(c, p).seed, 0));
  const auto history = train_phase1(model, p.windows.train, p.windows.val, fold_adapt(c, p));
  out.save_model("model", model);
  out.write_json("history.json", {{"test_subject", p.split.test_id},
                                  {"val_subject", p.split.val_id},
                                  {"selected_features", p.selected_names},
                                  {"model", model.config},
                                  {"adapt", c.pipeline.adapt},
                                  {"history", history}});
}

void cmd_adapt(const RunConfig& c, Outputs& out) {
  if (c.checkpoint.empty()) throw ConfigError("adapt needs --checkpoint (stem written by train)", "checkpoint");
  if (!fs::exists(c.checkpoint + ".json")) throw ConfigError("checkpoint not found: " + c.checkpoint, "checkpoint");
  const auto cohort = obtain_cohort(c);
  const auto p = prepare_fold(cohort, fold_for(cohort, c), c.pipeline);
  const auto phase1 = load_checkpoint<float>(c.checkpoint);
  if (phase1.config.n_features != static_cast<int>(p.selected.size()) || phase1.config.window != c.pipeline.window ||
      phase1.config.horizon != c.pipeline.horizon)
    throw ConfigError("checkpoint shape does not match this fold's windows", "checkpoint");
  const auto r = finish_mode(phase1, TrainHistory{}, p.windows, fold_adapt(c, p));
  const auto report = make_fold_report(p, 0, "adaptive", r, c.pipeline.trend_window);
  out.write("predictions_" + std::to_string(p.split.test_id) + ".csv", predictions_csv({&report}));
  json j = {{"test_subject", p.split.test_id}, {"mode", report.mode}, {"metrics", report.metrics}};
  j["tta"] = r.tta ? json(*r.tta) : json(nullptr);
  out.write_json("adapt.json", j);
}

void write_loocv(const Cohort& cohort, const RunConfig& c, const CohortReport& report, Outputs& out) {
  out.write_json("report.json", report);
  std::map<int, std::vector<const FoldReport*>> by_subject;
  for (const auto& f : report.folds) by_subject[f.test_subject].push_back(&f);
  for (const auto& [id, list] : by_subject) out.write("predictions_" + std::to_string(id) + ".csv", predictions_csv(list));

  std::ostringstream radar;
  radar << "subject,metric,model,value\n";
  for (const auto& r : report.radar()) radar << r.subject << ',' << r.metric << ',' << r.model << ',' << fmt(r.value) << '\n';
  out.write("radar.csv", radar.str());

  const auto [X, ids] = window_means(cohort, c.pipeline.window, c.pipeline.preprocess);
  const auto pca = pca_project(X, 2);
  std::ostringstream pc;
  pc << "subject,pc1,pc2\n";
  for (Eigen::Index i = 0; i < pca.coords.rows(); ++i) {
    pc << ids[static_cast<std::size_t>(i)] << ',' << fmt(pca.coords(i, 0)) << ',';
    if (pca.coords.cols() > 1) pc << fmt(pca.coords(i, 1));
    pc << '\n';
  }
  out.write("pca.csv", pc.str());
}

void cmd_loocv(const RunConfig& c, Outputs& out) {
  const auto cohort = obtain_cohort(c);
  write_loocv(cohort, c, run_loocv<float>(cohort, c.pipeline), out);
}

void cmd_explain(const RunConfig& c, Outputs& out) {
  const auto cohort = obtain_cohort(c);
  std::vector<int> ids = c.subject ? std::vector<int>{*c.subject} : cohort.subject_ids();
  if (!c.subject && !c.pipeline.test_ids.empty()) ids = c.pipeline.test_ids;
  const auto folds = make_folds(cohort, c.pipeline.val_policy, c.pipeline.val_id);
  std::vector<ShapSummary> summaries;
  for (int id : ids) {
    const auto it = std::find_if(folds.begin(), folds.end(), [id](const FoldSplit& f) { return f.test_id == id; });
    if (it == folds.end()) throw ConfigError("no subject with id " + std::to_string(id), "subject");
    const auto p = prepare_fold(cohort, *it, c.pipeline);
    const auto acfg = fold_adapt(c, p);
    auto r = run_mode<float>(p.windows, fold_model(c, p), acfg);
    KernelShapConfig kc;
    kc.seed = mix_seed(c.seed, 500 + static_cast<std::uint64_t>(id));
    kc.jobs = c.pipeline.jobs;
    const auto attrs = explain_windows(r.model, p.windows.train, p.windows.test, p.selected_names, c.background,
                                       c.instances, kc);
    summaries.push_back(shap_summary(attrs));
    std::ostringstream csv;
    write_shap_csv(summaries.back(), csv);
    out.write("shap_" + std::to_string(id) + ".csv", csv.str());
  }
  // selections differ per fold, so the cohort table is keyed by feature name
  std::map<std::string, std::pair<double, double>> total;
  for (const auto& s : summaries)
    for (std::size_t i = 0; i < s.feature_names.size(); ++i) {
      total[s.feature_names[i]].first += s.mean_abs[i];
      total[s.feature_names[i]].second += s.signed_mean[i];
    }
  ShapSummary cohort_s;
  for (const auto& [name, v] : total) {
    cohort_s.feature_names.push_back(name);
    cohort_s.mean_abs.push_back(v.first / static_cast<double>(summaries.size()));
    cohort_s.signed_mean.push_back(v.second / static_cast<double>(summaries.size()));
  }
  cohort_s.ranking = rank_by_magnitude(cohort_s.mean_abs);
  std::ostringstream csv;
  write_shap_csv(cohort_s, csv);
  out.write("shap_cohort.csv", csv.str());
}

void cmd_grid(const RunConfig& c, Outputs& out) {
  const auto cohort = obtain_cohort(c);
  struct Cell {
    int w, d;
    std::map<std::string, Summary> summary;
    std::string error;
  };
  std::vector<Cell> cells;
  for (int w : c.windows)
    for (int d : c.horizons) cells.push_back({w, d, {}, {}});
  parallel_for(cells.size(), c.pipeline.jobs, [&](std::size_t i) {
    PipelineConfig p = c.pipeline;
    p.window = cells[i].w;
    p.horizon = cells[i].d;
    p.include_baseline = true;
    p.jobs = 1;
    try {
      cells[i].summary = run_loocv<float>(cohort, p).summary;
    } catch (const std::exception& e) {
      cells[i].error = e.what();
    }
  });
  std::ostringstream lng;
  lng << "window,horizon,model,rmse_mean,rmse_median\n";
  std::set<std::string> models;
  for (const auto& cell : cells) {
    if (!cell.error.empty()) warn("grid cell w=" + std::to_string(cell.w) + " d=" + std::to_string(cell.d) + ": " + cell.error);
    for (const auto& [label, s] : cell.summary) {
      models.insert(label);
      lng << cell.w << ',' << cell.d << ',' << label << ',' << fmt(s.mean.rmse) << ',' << fmt(s.median.rmse) << '\n';
    }
  }
  out.write("grid.csv", lng.str());

  // wide layout: one row per (model, w), one column per horizon
  std::ostringstream wide;
  wide << "model,window";
  for (int d : c.horizons) wide << ",d" << d;
  wide << '\n';
  for (const auto& m : models)
    for (int w : c.windows) {
      wide << m << ',' << w;
      for (int d : c.horizons) {
        wide << ',';
        for (const auto& cell : cells)
          if (cell.w == w && cell.d == d && cell.summary.count(m)) wide << fmt(cell.summary.at(m).mean.rmse);
      }
      wide << '\n';
    }
  out.write("grid_table.csv", wide.str());
}

// ---------------------------------------------------------------------------
// Flag plumbing: every flag given on the command line overrides the JSON key
// it mirrors.

template <class T>
struct is_vector : std::false_type {};
template <class T>
struct is_vector<std::vector<T>> : std::true_type {};

class Flags {
 public:
  template <class T>
  void add(CLI::App* app, const std::string& flag, const std::string& pointer, const std::string& help) {
    auto value = std::make_shared<T>();
    CLI::Option* opt = app->add_option(flag, *value, help);
    if constexpr (!is_vector<T>::value) opt->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    apply_.push_back([opt, value, pointer](json& j) {
      if (opt->count() > 0) j[json::json_pointer(pointer)] = *value;
    });
  }
  void add_flag(CLI::App* app, const std::string& flag, const std::string& pointer, const std::string& help) {
    auto value = std::make_shared<bool>(false);
    CLI::Option* opt = app->add_flag(flag, *value, help);
    apply_.push_back([opt, value, pointer](json& j) {
      if (opt->count() > 0) j[json::json_pointer(pointer)] = *value;
    });
  }
  void overlay(json& j) const {
    for (const auto& f : apply_) f(j);
  }

 private:
  std::vector<std::function<void(json&)>> apply_;
};

void register_flags(CLI::App* app, Flags& f) {
  f.add<std::uint64_t>(app, "--seed", "/seed", "Master seed (required)");
  f.add<std::string>(app, "--input", "/input", "Cohort CSV file or directory; synthetic cohort when absent");
  f.add_flag(app, "--trim-ends", "/trim_ends", "Drop each subject's first and last day");
  f.add<std::string>(app, "--out", "/out", "Output directory");
  f.add<int>(app, "--window", "/window", "Input window w");
  f.add<int>(app, "--horizon", "/horizon", "Forecast horizon");
  f.add<std::vector<int>>(app, "--windows", "/windows", "Grid windows");
  f.add<std::vector<int>>(app, "--horizons", "/horizons", "Grid horizons");
  f.add_flag(app, "--allow-custom", "/allow_custom", "Allow window/horizon values outside the standard grid");
  f.add<std::string>(app, "--selection", "/selection", "correlation|mi|rfe|ensemble");
  f.add<int>(app, "--target-k", "/target_k", "Number of selected features");
  f.add_flag(app, "--global-selection", "/global_selection", "Select features once on the whole cohort");
  f.add<int>(app, "--trend-window", "/trend_window", "Rolling window for trend metrics");
  f.add<std::vector<std::string>>(app, "--modes", "/modes", "none|train-only|test-only|both");
  f.add_flag(app, "--include-baseline", "/include_baseline", "Also run the LSTM baseline");
  f.add<std::vector<int>>(app, "--test-ids", "/test_ids", "Restrict LOOCV to these test subjects");
  f.add<std::string>(app, "--val-policy", "/val_policy", "next-subject|fixed-id");
  f.add<int>(app, "--val-id", "/val_id", "Validation subject for fixed-id");
  f.add<int>(app, "--jobs", "/jobs", "Worker threads (default ADAPTCAST_JOBS or 1)");
  f.add<int>(app, "--subject", "/subject", "Subject id for train/adapt/explain");
  f.add<std::string>(app, "--checkpoint", "/checkpoint", "Model stem written by train");
  f.add<int>(app, "--trials", "/trials", "Random-search budget for train");
  f.add<int>(app, "--background", "/background", "SHAP background windows");
  f.add<int>(app, "--instances", "/instances", "SHAP explained windows");
  f.add<double>(app, "--alpha", "/adapt/alpha", "Domain loss weight");
  f.add<double>(app, "--lr", "/adapt/lr", "Phase-1 learning rate");
  f.add<double>(app, "--lr-tta", "/adapt/lr_tta", "Test-time learning rate");
  f.add<int>(app, "--tta-epochs", "/adapt/tta_epochs", "Test-time epochs");
  f.add<std::string>(app, "--tta-method", "/adapt/tta_method", "consistency|entropy|temporal");
  f.add<int>(app, "--max-epochs", "/adapt/max_epochs", "Phase-1 epoch cap");
  f.add<int>(app, "--patience", "/adapt/patience", "Early-stopping patience");
  f.add<int>(app, "--batch-size", "/adapt/batch_size", "8|16|32");
  f.add<std::string>(app, "--main-loss", "/adapt/main_loss", "mse|rmse");
  f.add<int>(app, "--n-subjects", "/synth/n_subjects", "Synthetic subjects");
  f.add<int>(app, "--n-days", "/synth/n_days", "Synthetic days per subject");
  f.add<int>(app, "--n-features", "/synth/n_features", "Synthetic feature count");
  f.add<double>(app, "--domain-shift-scale", "/synth/domain_shift_scale", "Synthetic between-subject shift");
  f.add<double>(app, "--anomaly-rate", "/synth/anomaly_rate", "Synthetic anomaly rate");
  f.add<double>(app, "--missing-rate", "/synth/missing_rate", "Synthetic missing rate");
  f.add<int>(app, "--driver-feature", "/synth/driver_feature", "Only this feature drives the synthetic target");
}

json read_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path, "config");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config file is not valid JSON: ") + e.what(), "config");
  }
  if (!j.is_object()) throw ConfigError("config file must hold a JSON object", "config");
  // a manifest re-runs its own configuration
  if (j.contains("command") && j.contains("config")) return j["config"];
  return j;
}

int fail(int code, const std::string& kind, const std::string& message, const std::string& field = "") {
  json e = {{"error", kind}, {"message", message}};
  if (!field.empty()) e["field"] = field;
  std::cerr << e.dump() << '\n';
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sleep-quality forecasting with domain adaptation"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  struct Command {
    const char* name;
    const char* help;
    std::function<void(const RunConfig&, Outputs&)> run;
  };
  const std::vector<Command> commands = {
      {"generate", "Write a seeded synthetic cohort", cmd_generate},
      {"preprocess", "Clean a cohort and report anomalies", cmd_preprocess},
      {"select-features", "Rank and select features on the cohort", cmd_select},
      {"train", "Phase-1 training for one fold (optionally after random search)", cmd_train},
      {"adapt", "Test-time adaptation and inference from a checkpoint", cmd_adapt},
      {"loocv", "Leave-one-subject-out evaluation", cmd_loocv},
      {"explain", "Kernel SHAP attributions per subject and cohort", cmd_explain},
      {"grid", "LOOCV over the window x horizon grid", cmd_grid},
  };
  std::deque<Flags> flags;
  std::deque<std::string> config_paths;
  std::vector<CLI::App*> subs;
  for (const auto& c : commands) {
    auto* sub = app.add_subcommand(c.name, c.help);
    flags.emplace_back();
    config_paths.emplace_back();
    sub->add_option("--config", config_paths.back(), "JSON config (flags override its keys)");
    register_flags(sub, flags.back());
    subs.push_back(sub);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail(2, "usage", e.what(), "arguments");
  }

  for (std::size_t i = 0; i < subs.size(); ++i) {
    if (!subs[i]->parsed()) continue;
    try {
      json j = config_paths[i].empty() ? json::object() : read_config_file(config_paths[i]);
      flags[i].overlay(j);
      const RunConfig cfg = parse_run_config(j);
      Outputs out(cfg.out);
      commands[i].run(cfg, out);
      out.manifest(commands[i].name, effective_json(cfg));
      return 0;
    } catch (const ConfigError& e) {
      return fail(2, "config", e.what(), e.field());
    } catch (const std::exception& e) {
      return fail(1, "runtime", e.what());
    }
  }
  return fail(2, "usage", "no subcommand given", "command");
}
