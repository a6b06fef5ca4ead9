#include "doctest.h"
#include "test_support.hpp"

#include "mvlfmm/io.hpp"

#include <filesystem>

using namespace mvlfmm;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("mvlfmm_test_io_" + name);
  fs::remove_all(dir);
  return dir;
}

MvLfmmFit small_fit(const std::string& model) {
  CounterRng rng(7);
  const MvLongDataset data = testing::structured_dataset(8, 6, 2, rng);
  FitConfig config;
  config.fpca_basis = bspline_basis(10, 4, 0.0, 100.0);
  config.truncation = Truncation::by_k(3);
  config.covariates = {"x1"};
  config.long_basis = model == "mlfpca" ? mlfpca_long_basis() : spline_long_basis();
  config.lmm.n_restarts = 1;
  return fit_model(data, config);
}

}  // namespace

TEST_CASE("fit bundle round trip is exact") {
  for (const std::string model : {"spline", "mlfpca"}) {
    CAPTURE(model);
    const MvLfmmFit fit = small_fit(model);
    const fs::path dir = scratch_dir(model);
    save_fit(fit, dir.string());
    CHECK(fs::exists(dir / "fpca.json"));
    CHECK(fs::exists(dir / "meta.json"));
    CHECK(fs::exists(dir / "fits" / "k_001.json"));
    CHECK(fs::exists(dir / "fits" / "k_003.json"));
    CHECK_FALSE(fs::exists(dir / "fits" / "k_004.json"));

    const MvLfmmFit back = load_fit(dir.string());
    REQUIRE(back.K() == fit.K());
    CHECK(back.fpca.eig_coefs == fit.fpca.eig_coefs);
    CHECK(back.fpca.mean.values == fit.fpca.mean.values);
    CHECK(back.covariate_names == fit.covariate_names);
    CHECK(back.metadata == fit.metadata);
    CHECK(back.long_basis.per_k.size() == fit.long_basis.per_k.size());
    for (int k = 0; k < fit.K(); ++k) {
      const auto& a = fit.fits[static_cast<std::size_t>(k)];
      const auto& b = back.fits[static_cast<std::size_t>(k)];
      CHECK(a.beta == b.beta);
      CHECK(a.Q_star == b.Q_star);
      CHECK(a.blups_u == b.blups_u);
      CHECK(a.blups_v == b.blups_v);
      CHECK(a.group_ids == b.group_ids);
      CHECK(a.s == b.s);
    }
    const ObservationKey key{"s2", Side::right, 3, 0.4};
    const auto p1 = predict_curve(fit, key, {{"x1", 0.3}});
    const auto p2 = predict_curve(back, key, {{"x1", 0.3}});
    CHECK(p1.curve.values == p2.curve.values);

    // Saving the reloaded fit reproduces every file byte for byte.
    const fs::path again = scratch_dir(model + "_again");
    save_fit(back, again.string());
    for (const char* f : {"fpca.json", "meta.json", "fits/k_002.json"})
      CHECK(read_text_file((dir / f).string()) == read_text_file((again / f).string()));
    fs::remove_all(dir);
    fs::remove_all(again);
  }
}

TEST_CASE("broken bundles raise DataError") {
  const fs::path dir = scratch_dir("broken");
  CHECK_THROWS_AS(load_fit(dir.string()), DataError);
  save_fit(small_fit("spline"), dir.string());
  write_text_file((dir / "fits" / "k_002.json").string(), "{\"beta\": [1, 2");
  CHECK_THROWS_AS(load_fit(dir.string()), DataError);
  write_text_file((dir / "fits" / "k_002.json").string(), "{\"beta\": [1, 2]}");
  CHECK_THROWS_AS(load_fit(dir.string()), DataError);
  fs::remove_all(dir);
}

TEST_CASE("generator parameters round trip") {
  const GeneratorParams g = reference_params();
  const std::string text = generator_params_to_json(g);
  const GeneratorParams back = generator_params_from_json(text);
  CHECK(back.beta0 == g.beta0);
  CHECK(back.betaA == g.betaA);
  CHECK(back.Q_diag == g.Q_diag);
  CHECK(back.R_diag == g.R_diag);
  CHECK(back.s == g.s);
  CHECK(back.basis_coefs == g.basis_coefs);
  CHECK(back.mean.values == g.mean.values);
  CHECK(back.covariate_names == g.covariate_names);
  REQUIRE(back.covariate_law.size() == 2);
  CHECK(back.covariate_law[0].kind == CovariateLaw::Kind::bernoulli);
  CHECK(back.covariate_law[1].kind == CovariateLaw::Kind::gaussian);
  CHECK(back.noise_sigma == g.noise_sigma);
  CHECK(generator_params_to_json(back) == text);

  CHECK_THROWS_AS(generator_params_from_json("[]"), DataError);
  std::string bad = text;
  bad.replace(bad.find("\"bernoulli\""), 11, "\"poisson\"");
  CHECK_THROWS_AS(generator_params_from_json(bad), DataError);
}
