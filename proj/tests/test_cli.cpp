#include "doctest.h"

#include "cli.hpp"
#include "mvlfmm/io.hpp"

#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <map>
#include <sstream>

namespace fs = std::filesystem;
using mvlfmm::read_text_file;
using mvlfmm::write_text_file;

namespace {

const fs::path kData = fs::path(MVLFMM_SOURCE_DIR) / "data";

struct Result {
  int code = 0;
  std::string out;
  std::string err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "mvlfmm");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = mvlfmm::cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("mvlfmm_test_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::vector<std::string> fit_args(const fs::path& out, const std::string& model = "spline") {
  return {"fit", "--curves", (kData / "reference_curves.csv").string(), "--covariates",
          (kData / "reference_covariates.csv").string(), "--model", model, "--out", out.string()};
}

/// Every regular file under `dir`, keyed by relative path.
std::map<std::string, std::string> tree(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files[fs::relative(e.path(), dir).string()] = read_text_file(e.path().string());
  return files;
}

std::vector<std::vector<std::string>> rows(const fs::path& file) {
  std::vector<std::vector<std::string>> out;
  std::istringstream in(read_text_file(file.string()));
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string part; std::getline(ss, part, ',');) f.push_back(part);
    out.push_back(f);
  }
  return out;
}

nlohmann::json json_of(const fs::path& file) { return nlohmann::json::parse(read_text_file(file.string())); }

}  // namespace

TEST_CASE("fit writes a bundle, summary and tidy exports") {
  const fs::path dir = scratch("fit");
  const Result r = run(fit_args(dir / "spline"));
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const auto summary = json_of(dir / "spline" / "summary.json");
  const int K = summary["K"].get<int>();
  CHECK(K >= 1);
  CHECK(summary["pve"].get<double>() >= 0.995);
  CHECK(summary["singular_count"].get<int>() == static_cast<int>(summary["singular_scores"].size()));
  for (int k = 1; k <= K; ++k) {
    char name[32];
    std::snprintf(name, sizeof name, "k_%03d.json", k);
    CHECK(fs::exists(dir / "spline" / "fits" / name));
  }
  for (const char* f : {"fpca.json", "meta.json", "fixed_effects.csv", "longitudinal_coefficients.csv",
                        "intercept_surface.csv", "acf.csv", "qq.csv", "singular.csv"})
    CHECK_MESSAGE(fs::exists(dir / "spline" / f), f);
  // 2 covariates x 3 dimensions x 101 grid points.
  const auto fx = rows(dir / "spline" / "fixed_effects.csv");
  CHECK(fx.size() == 2u * 3u * 101u);
  for (const auto& row : fx) {
    REQUIRE(row.size() == 8u);
    CHECK(std::stod(row[4]) <= std::stod(row[3]));
    CHECK(std::stod(row[3]) <= std::stod(row[5]));
    CHECK(row[6] == "NA");
  }
  CHECK(rows(dir / "spline" / "acf.csv").size() == static_cast<std::size_t>(K) * 6u);
  fs::remove_all(dir);
}

TEST_CASE("naive and spline fits share the decomposition but not the score models") {
  const fs::path dir = scratch("isolation");
  REQUIRE(run(fit_args(dir / "naive", "naive")).code == 0);
  REQUIRE(run(fit_args(dir / "spline", "spline")).code == 0);
  CHECK(read_text_file((dir / "naive" / "fpca.json").string()) ==
        read_text_file((dir / "spline" / "fpca.json").string()));
  CHECK(read_text_file((dir / "naive" / "fits" / "k_001.json").string()) !=
        read_text_file((dir / "spline" / "fits" / "k_001.json").string()));
  fs::remove_all(dir);
}

TEST_CASE("fit and simulate reruns are byte-identical") {
  const fs::path dir = scratch("determinism");
  auto args = fit_args(dir / "a");
  args.insert(args.end(), {"--holdout", "1", "--workers", "1"});
  REQUIRE(run(args).code == 0);
  args = fit_args(dir / "b");
  args.insert(args.end(), {"--holdout", "1", "--workers", "3"});
  REQUIRE(run(args).code == 0);
  CHECK(tree(dir / "a") == tree(dir / "b"));

  write_text_file((dir / "sim.json").string(),
                  R"({"n_subjects": 8, "n_per_side": 8, "replicates": 2, "models": ["naive", "spline"],
                      "write_datasets": true})");
  for (const char* out : {"s1", "s2"})
    REQUIRE(run({"simulate", "--config", (dir / "sim.json").string(), "--seed", "5", "--out", (dir / out).string()})
                .code == 0);
  CHECK(tree(dir / "s1") == tree(dir / "s2"));
  // replicates x models metric rows
  CHECK(rows(dir / "s1" / "metrics.csv").size() == 4u);
  CHECK(fs::exists(dir / "s1" / "replicate_001" / "train_curves.csv"));
  fs::remove_all(dir);
}

TEST_CASE("predict: population flag, empty query and change consistency") {
  const fs::path dir = scratch("predict");
  REQUIRE(run(fit_args(dir / "fit")).code == 0);
  const auto cov = rows(kData / "reference_covariates.csv");  // s1,left,x1,x2 first
  REQUIRE(cov[0][0] == "s1");
  REQUIRE(cov[0][1] == "left");
  const std::string x = cov[0][2] + "," + cov[0][3];
  write_text_file((dir / "q.csv").string(), "subject_id,side,T,x1,x2\ns1,left,0," + x + "\ns1,left,1," + x +
                                                "\nnobody,left,0," + x + "\nnobody,left,1," + x + "\n");
  REQUIRE(run({"predict", "--fit", (dir / "fit").string(), "--query", (dir / "q.csv").string(), "--out",
               (dir / "p").string()})
              .code == 0);
  const auto pred = rows(dir / "p" / "predictions.csv");
  REQUIRE(pred.size() == 4u * 3u * 101u);
  // Per query row: P x G values in dimension-major order.
  std::vector<mvlfmm::MvCurve> curves(4);
  for (auto& c : curves) {
    c.values.resize(3, 101);
    c.grid.resize(101);
  }
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const int row = std::stoi(pred[i][0]) - 1;
    const auto p = static_cast<Eigen::Index>((i % (3 * 101)) / 101), g = static_cast<Eigen::Index>(i % 101);
    curves[static_cast<std::size_t>(row)].values(p, g) = std::stod(pred[i][8]);
    curves[static_cast<std::size_t>(row)].grid(g) = std::stod(pred[i][7]);
    CHECK(pred[i][4] == (row < 2 ? "0" : "1"));
  }
  // Subject change minus population change isolates u + v.
  mvlfmm::MvCurve a = curves[1], b = curves[3];
  a.values -= curves[0].values;
  b.values -= curves[2].values;
  const double change = std::sqrt(mvlfmm::ispe(a, b));

  REQUIRE(run({"diagnose", "--fit", (dir / "fit").string(), "--curves", (kData / "reference_curves.csv").string(),
               "--covariates", (kData / "reference_covariates.csv").string(), "--out", (dir / "d").string()})
              .code == 0);
  double reported = -1.0;
  for (const auto& row : rows(dir / "d" / "change_metrics.csv"))
    if (row[0] == "s1" && row[1] == "left") reported = std::stod(row[3]);
  CHECK(change == doctest::Approx(reported).epsilon(1e-3));

  write_text_file((dir / "empty.csv").string(), "subject_id,side,T,x1,x2\n");
  const Result empty = run({"predict", "--fit", (dir / "fit").string(), "--query", (dir / "empty.csv").string(),
                            "--out", (dir / "e").string()});
  CHECK(empty.code == 0);
  CHECK(read_text_file((dir / "e" / "predictions.csv").string()) ==
        "row,subject_id,side,T,population,side_seen,dimension,t,value\n");

  write_text_file((dir / "bad.csv").string(), "subject_id,side,T,x1,x2\ns1,left,0.5,1,2\ns1,left,abc,1,2\n");
  const Result bad = run({"predict", "--fit", (dir / "fit").string(), "--query", (dir / "bad.csv").string(), "--out",
                          (dir / "b").string()});
  CHECK(bad.code == 3);
  const auto err = nlohmann::json::parse(bad.err);
  CHECK(err["error"] == "data");
  CHECK(err["message"].get<std::string>().find("line 3") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("configuration and data errors map to exit codes") {
  const fs::path dir = scratch("errors");
  write_text_file((dir / "c.json").string(), R"({"curves": "x.csv", "colour": "blue"})");
  Result r = run({"fit", "--config", (dir / "c.json").string(), "--out", (dir / "o").string()});
  CHECK(r.code == 2);
  CHECK(nlohmann::json::parse(r.err)["message"].get<std::string>().find("colour") != std::string::npos);

  r = run(fit_args(dir / "o", "cubic"));
  CHECK(r.code == 2);
  r = run({"fit", "--curves", (dir / "missing.csv").string(), "--covariates", (dir / "missing.csv").string()});
  CHECK(r.code == 3);
  CHECK(nlohmann::json::parse(r.err)["error"] == "data");
  r = run({"bogus"});
  CHECK(r.code == 2);
  r = run({"simulate", "--strength", "0.5", "--out", (dir / "o").string()});
  CHECK(r.code == 2);
  fs::remove_all(dir);
}

TEST_CASE("evaluate reproduces the holdout ISPE and zero self-ISE") {
  const fs::path dir = scratch("evaluate");
  auto args = fit_args(dir / "fit");
  args.insert(args.end(), {"--holdout", "1"});
  REQUIRE(run(args).code == 0);
  REQUIRE(run({"evaluate", "--predicted", (dir / "fit" / "test_predicted.csv").string(), "--observed",
               (dir / "fit" / "test_observed.csv").string(), "--out", (dir / "ev").string()})
              .code == 0);
  const double from_fit = json_of(dir / "fit" / "summary.json")["test"]["mean_ispe"].get<double>();
  CHECK(json_of(dir / "ev" / "evaluate.json")["mean_ispe"].get<double>() == doctest::Approx(from_fit).epsilon(1e-12));

  REQUIRE(run({"evaluate", "--estimate", (dir / "fit" / "fixed_effects.csv").string(), "--truth",
               (dir / "fit" / "fixed_effects.csv").string(), "--out", (dir / "ev2").string()})
              .code == 0);
  const auto ise = json_of(dir / "ev2" / "evaluate.json")["ise"];
  CHECK(ise["x1"].get<double>() == 0.0);
  CHECK(ise["x2"].get<double>() == 0.0);
  fs::remove_all(dir);
}

TEST_CASE("bootstrap bands and the recovery study outputs") {
  const fs::path dir = scratch("bootstrap");
  REQUIRE(run(fit_args(dir / "fit", "naive")).code == 0);
  REQUIRE(run({"bootstrap", "--fit", (dir / "fit").string(), "--curves", (kData / "reference_curves.csv").string(),
               "--covariates", (kData / "reference_covariates.csv").string(), "--B", "8", "--out",
               (dir / "b").string()})
              .code == 0);
  for (const auto& row : rows(dir / "b" / "fixed_effects.csv")) {
    const double est = std::stod(row[3]);
    CHECK(std::stod(row[6]) <= est);
    CHECK(est <= std::stod(row[7]));
  }
  CHECK(json_of(dir / "b" / "bootstrap.json")["requested"] == 8);

  REQUIRE(run({"simulate", "--study", "recovery", "--mode", "zero_fixed", "--replicates", "2", "--subjects", "8",
               "--out", (dir / "rec").string()})
              .code == 0);
  CHECK(rows(dir / "rec" / "recovery_errors.csv").size() == 10u);
  CHECK(rows(dir / "rec" / "recovery_curves.csv").size() == 10u * 3u * 101u);
  fs::remove_all(dir);
}
