#include <gtest/gtest.h>
#include <nlohmann/json.hpp>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Run {
  int code = -1;
  std::string err;
};

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("adaptcast_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

Run run(const std::string& args, const fs::path& dir) {
  const fs::path err = dir / "stderr.txt";
  const std::string cmd = std::string(ADAPTCAST_CLI_PATH) + " " + args + " > " + (dir / "stdout.txt").string() +
                          " 2> " + err.string();
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(err)};
}

json error_json(const Run& r) {
  const auto first = r.err.find('{');
  if (first == std::string::npos) return json();
  return json::parse(r.err.substr(first, r.err.find('\n', first) - first), nullptr, false);
}

// A tiny synthetic run: four subjects, two epochs, five features.
const std::string kSmall =
    " --seed 7 --n-subjects 4 --n-days 36 --selection correlation --target-k 5"
    " --max-epochs 2 --tta-epochs 1 --batch-size 16 --jobs 1";

}  // namespace

TEST(Cli, HelpExitsZero) {
  const auto d = scratch("help");
  EXPECT_EQ(run("--help", d).code, 0);
  EXPECT_EQ(run("loocv --help", d).code, 0);
  EXPECT_NE(slurp(d / "stdout.txt").find("--window"), std::string::npos);
}

TEST(Cli, ConfigErrorsExitTwoWithField) {
  const auto d = scratch("errors");
  auto expect_field = [&](const std::string& args, const std::string& field) {
    const auto r = run(args, d);
    EXPECT_EQ(r.code, 2) << args << "\n" << r.err;
    const auto j = error_json(r);
    ASSERT_TRUE(j.is_object()) << r.err;
    EXPECT_EQ(j.value("error", ""), "config") << args;
    EXPECT_EQ(j.value("field", ""), field) << args;
  };
  expect_field("loocv --out " + (d / "o").string(), "seed");
  expect_field("loocv --seed 1 --input " + (d / "missing.csv").string(), "input");
  expect_field("loocv --seed 1 --window 4", "window");
  expect_field("grid --seed 1 --horizons 2", "horizons");
  expect_field("loocv --seed 1 --selection lasso", "selection");
  expect_field("adapt --seed 1 --out " + (d / "o").string(), "checkpoint");
  {
    std::ofstream(d / "bad.json") << "{\"seed\": 1, \"model\": {\"lstm_hidden\": 100}}";
    const auto r = run("loocv --config " + (d / "bad.json").string(), d);
    EXPECT_EQ(r.code, 2) << r.err;
  }
  EXPECT_EQ(run("", d).code, 2);
  EXPECT_EQ(run("frobnicate", d).code, 2);
  EXPECT_FALSE(fs::exists(d / "o" / "manifest.json"));
}

TEST(Cli, GenerateIsDeterministic) {
  const auto d = scratch("generate");
  ASSERT_EQ(run("generate --seed 3 --n-subjects 3 --n-days 20 --out " + (d / "a").string(), d).code, 0);
  ASSERT_EQ(run("generate --seed 3 --n-subjects 3 --n-days 20 --out " + (d / "b").string(), d).code, 0);
  ASSERT_EQ(run("generate --seed 4 --n-subjects 3 --n-days 20 --out " + (d / "c").string(), d).code, 0);
  EXPECT_EQ(slurp(d / "a" / "cohort.csv"), slurp(d / "b" / "cohort.csv"));
  EXPECT_NE(slurp(d / "a" / "cohort.csv"), slurp(d / "c" / "cohort.csv"));
  const auto m = json::parse(slurp(d / "a" / "manifest.json"));
  EXPECT_EQ(m["command"], "generate");
  EXPECT_EQ(m["seed"], 3);
  EXPECT_EQ(m["outputs"], json::array({"cohort.csv"}));
  EXPECT_TRUE(m["versions"].contains("eigen"));
  EXPECT_EQ(m["config_hash"].get<std::string>().size(), 16u);
  EXPECT_FALSE(fs::exists(d / "a" / "cohort.csv.tmp"));
}

TEST(Cli, PreprocessAndSelectOnGeneratedFile) {
  const auto d = scratch("prep");
  ASSERT_EQ(run("generate --seed 5 --n-subjects 3 --n-days 30 --anomaly-rate 0.05 --out " + (d / "g").string(), d).code, 0);
  const std::string in = " --input " + (d / "g" / "cohort.csv").string();
  ASSERT_EQ(run("preprocess --seed 5" + in + " --out " + (d / "p").string(), d).code, 0);
  const auto anomalies = json::parse(slurp(d / "p" / "anomalies.json"));
  EXPECT_TRUE(anomalies.contains("iqr"));
  EXPECT_NE(slurp(d / "p" / "cleaned.csv").find("subject"), std::string::npos);
  ASSERT_EQ(run("select-features --seed 5 --selection correlation --target-k 4" + in + " --out " + (d / "s").string(), d).code, 0);
  const auto sel = json::parse(slurp(d / "s" / "selection.json"));
  EXPECT_EQ(sel["method"], "correlation");
  EXPECT_LE(sel["selected_names"].size(), 4u);
}

TEST(Cli, LoocvOutputsAndReplayFromManifest) {
  const auto d = scratch("loocv");
  const auto r = run("loocv" + kSmall + " --modes none both --test-ids 1 2 --out " + (d / "a").string(), d);
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* f : {"report.json", "radar.csv", "pca.csv", "predictions_1.csv", "predictions_2.csv", "manifest.json"})
    EXPECT_TRUE(fs::exists(d / "a" / f)) << f;
  const auto preds = slurp(d / "a" / "predictions_1.csv");
  EXPECT_EQ(preds.substr(0, preds.find('\n')), "model,day,true,pred,band,direction_correct");
  EXPECT_NE(preds.find("adaptive:both,"), std::string::npos);
  const auto report = json::parse(slurp(d / "a" / "report.json"));
  EXPECT_EQ(report["folds"].size(), 4u);

  // the manifest alone reproduces the run (its "out" is overridden)
  const auto r2 = run("loocv --config " + (d / "a" / "manifest.json").string() + " --out " + (d / "b").string(), d);
  ASSERT_EQ(r2.code, 0) << r2.err;
  EXPECT_EQ(slurp(d / "a" / "report.json"), slurp(d / "b" / "report.json"));
  EXPECT_EQ(slurp(d / "a" / "predictions_2.csv"), slurp(d / "b" / "predictions_2.csv"));

  // worker count does not change results
  ASSERT_EQ(run("loocv" + kSmall + " --modes none both --test-ids 1 2 --jobs 2 --out " + (d / "c").string(), d).code, 0);
  EXPECT_EQ(slurp(d / "a" / "report.json"), slurp(d / "c" / "report.json"));
  EXPECT_EQ(json::parse(slurp(d / "a" / "manifest.json"))["config_hash"],
            json::parse(slurp(d / "c" / "manifest.json"))["config_hash"]);
}

TEST(Cli, TrainThenAdapt) {
  const auto d = scratch("train");
  const auto t = run("train" + kSmall + " --subject 2 --out " + (d / "t").string(), d);
  ASSERT_EQ(t.code, 0) << t.err;
  EXPECT_TRUE(fs::exists(d / "t" / "model.json"));
  EXPECT_TRUE(fs::exists(d / "t" / "model.bin"));
  EXPECT_TRUE(json::parse(slurp(d / "t" / "history.json")).contains("history"));
  const auto a = run("adapt" + kSmall + " --subject 2 --modes both --checkpoint " + (d / "t" / "model").string() +
                         " --out " + (d / "a").string(),
                     d);
  ASSERT_EQ(a.code, 0) << a.err;
  const auto j = json::parse(slurp(d / "a" / "adapt.json"));
  EXPECT_EQ(j["test_subject"], 2);
  EXPECT_TRUE(j["tta"].is_object());
  EXPECT_TRUE(fs::exists(d / "a" / "predictions_2.csv"));

  // a checkpoint for another window is refused
  const auto bad = run("adapt" + kSmall + " --subject 2 --window 5 --checkpoint " + (d / "t" / "model").string() +
                           " --out " + (d / "x").string(),
                       d);
  EXPECT_EQ(bad.code, 2);
  EXPECT_EQ(error_json(bad).value("field", ""), "checkpoint");
}

TEST(Cli, TrainWithRandomSearch) {
  const auto d = scratch("search");
  const auto t = run("train" + kSmall + " --trials 2 --test-ids 1 --out " + (d / "t").string(), d);
  ASSERT_EQ(t.code, 0) << t.err;
  const auto s = json::parse(slurp(d / "t" / "search.json"));
  EXPECT_EQ(s["trials"].size(), 2u);
  EXPECT_GE(s["best"].get<int>(), 0);
}

TEST(Cli, ExplainWritesPerSubjectAndCohortTables) {
  const auto d = scratch("explain");
  const auto r = run("explain" + kSmall + " --test-ids 1 3 --background 6 --instances 4 --out " + (d / "e").string(), d);
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* f : {"shap_1.csv", "shap_3.csv", "shap_cohort.csv"}) {
    const auto s = slurp(d / "e" / f);
    EXPECT_EQ(s.substr(0, s.find('\n')), "feature,mean_abs,signed_mean") << f;
  }
}

TEST(Cli, GridTables) {
  const auto d = scratch("grid");
  const auto r = run("grid" + kSmall + " --windows 3 5 --horizons 1 3 --test-ids 1 --modes both --out " +
                         (d / "g").string(),
                     d);
  ASSERT_EQ(r.code, 0) << r.err;
  std::istringstream lng(slurp(d / "g" / "grid.csv"));
  std::string line;
  int rows = 0;
  while (std::getline(lng, line)) ++rows;
  EXPECT_EQ(rows, 1 + 4 * 2);  // header + cells x {adaptive, lstm}
  const auto wide = slurp(d / "g" / "grid_table.csv");
  EXPECT_EQ(wide.substr(0, wide.find('\n')), "model,window,d1,d3");
  EXPECT_NE(wide.find("\nlstm,5,"), std::string::npos);
}
