#include "doctest.h"
#include "test_support.hpp"

#include "mvlfmm/datamodel.hpp"

#include <set>
#include <sstream>

using namespace mvlfmm;

namespace {

std::string curve_csv(int subjects, int sides, int strides, int dims, int grid) {
  std::ostringstream out;
  out << "subject_id,side,stride,T_raw,dimension,t,value\n";
  for (int i = 1; i <= subjects; ++i)
    for (int j = 0; j < sides; ++j)
      for (int l = 1; l <= strides; ++l)
        for (int p = 1; p <= dims; ++p)
          for (int g = 0; g < grid; ++g)
            out << "s" << i << ',' << (j == 0 ? "left" : "right") << ',' << l << ','
                << 10 * l << ",dim" << p << ',' << g << ',' << 0.5 * g + i - p << '\n';
  return out.str();
}

std::string covariate_csv(int subjects) {
  std::ostringstream out;
  out << "subject_id,side,speed,sex\n";
  for (int i = 1; i <= subjects; ++i)
    for (const char* side : {"left", "right"}) out << "s" << i << ',' << side << ",3.1,1\n";
  return out.str();
}

}  // namespace

TEST_CASE("load: 2 subjects x 2 sides x 3 strides x 3 dims gives 12 observations") {
  std::istringstream curves(curve_csv(2, 2, 3, 3, 101)), cov(covariate_csv(2));
  const auto data = read_dataset(curves, cov);
  CHECK(data.size() == 12);
  CHECK(data.dims() == 3);
  CHECK(data.grid.size() == 101);
  CHECK(data.subjects() == std::vector<std::string>{"s1", "s2"});
  CHECK(data.curves[0].values(1, 4) == doctest::Approx(0.5 * 4 + 1 - 2));
}

TEST_CASE("load: missing covariate row is an unresolved-covariates error") {
  std::string cov = covariate_csv(2);
  cov = cov.substr(0, cov.rfind("s2,right"));
  std::istringstream curves(curve_csv(2, 2, 3, 1, 11)), covs(cov);
  CHECK_THROWS_WITH_AS(read_dataset(curves, covs), doctest::Contains("unresolved covariates"),
                       DataError);
}

TEST_CASE("load: one curve with a shorter grid is a ragged-grid error") {
  std::string csv = curve_csv(1, 2, 2, 1, 101);
  const auto cut = csv.find("s1,left,1,10,dim1,100,");
  csv.erase(cut, csv.find('\n', cut) + 1 - cut);
  std::istringstream curves(csv), cov(covariate_csv(1));
  CHECK_THROWS_WITH_AS(read_dataset(curves, cov), doctest::Contains("ragged grid"), DataError);
}

TEST_CASE("load: duplicate rows and non-finite values are rejected") {
  std::string csv = curve_csv(1, 2, 1, 1, 3);
  std::string dup = csv + "s1,left,1,10,dim1,2,5\n";
  std::istringstream c1(dup), v1(covariate_csv(1));
  CHECK_THROWS_AS(read_dataset(c1, v1), DataError);
  std::string bad = csv;
  bad.replace(bad.rfind(",1\n") + 1, 1, "nan");
  std::istringstream c2(bad), v2(covariate_csv(1));
  CHECK_THROWS_WITH_AS(read_dataset(c2, v2), doctest::Contains("non-finite"), DataError);
}

TEST_CASE("load -> write -> load round trips bit-exactly") {
  CounterRng rng(3);
  const auto data = testing::toy_dataset(3, 4, 2, rng, 21);
  std::stringstream curves, cov;
  write_curves(data, curves);
  write_covariates(data.covariates, cov);
  const auto back = read_dataset(curves, cov);
  REQUIRE(back.size() == data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    CHECK(back.curves[i].values == data.curves[i].values);
    CHECK(back.keys[i].same_observation(data.keys[i]));
    CHECK(back.keys[i].long_time == data.keys[i].long_time);
  }
  CHECK(back.grid == data.grid);
  CHECK(back.covariates.rows == data.covariates.rows);
}

TEST_CASE("normalize_long_time") {
  CounterRng rng(1);
  auto data = testing::toy_dataset(2, 3, 1, rng, 5);
  for (std::size_t i = 0; i < data.size(); ++i)
    data.keys[i].long_time = (data.keys[i].subject_id == "s1" ? 25.0 : 35.0) * (data.keys[i].stride - 1);

  const auto norm = normalize_long_time(data);
  CHECK(norm.keys[0].long_time == 0.0);
  CHECK(norm.keys[1].long_time == 0.5);
  CHECK(norm.keys[2].long_time == 1.0);
  for (const auto& k : norm.keys)
    if (k.stride == 3) CHECK(k.long_time == 1.0);

  const auto twice = normalize_long_time(norm);
  for (std::size_t i = 0; i < data.size(); ++i) CHECK(twice.keys[i].long_time == norm.keys[i].long_time);

  auto zero = data;
  for (auto& k : zero.keys)
    if (k.subject_id == "s2") k.long_time = 0.0;
  CHECK_THROWS_AS(normalize_long_time(zero), DataError);
}

TEST_CASE("center_dataset") {
  CounterRng rng(2);
  auto data = testing::toy_dataset(1, 1, 3, rng, 7);
  REQUIRE(data.size() == 2);

  SUBCASE("symmetric pair") {
    data.curves[1].values = -data.curves[0].values;
    const auto [mean, centered] = center_dataset(data);
    CHECK(mean.values.cwiseAbs().maxCoeff() == 0.0);
    CHECK(centered.curves[0].values == data.curves[0].values);
  }
  SUBCASE("identical curves") {
    data.curves[1].values = data.curves[0].values;
    const auto [mean, centered] = center_dataset(data);
    CHECK((mean.values - data.curves[0].values).cwiseAbs().maxCoeff() < 1e-15);
    CHECK(centered.curves[1].values.cwiseAbs().maxCoeff() < 1e-15);
  }
  SUBCASE("constant offset") {
    data.curves[1].values = data.curves[0].values.array() + 2.0;
    const auto [mean, centered] = center_dataset(data);
    CHECK((mean.values.array() - data.curves[0].values.array() - 1.0).abs().maxCoeff() < 1e-14);
    CHECK((centered.curves[0].values.array() + 1.0).abs().maxCoeff() < 1e-14);
    CHECK((centered.curves[1].values.array() - 1.0).abs().maxCoeff() < 1e-14);
  }
  SUBCASE("re-centering is the identity with zero mean") {
    auto big = testing::toy_dataset(4, 3, 2, rng, 11);
    const auto [m1, c1] = center_dataset(big);
    const auto [m2, c2] = center_dataset(c1);
    CHECK(m2.values.cwiseAbs().maxCoeff() < 1e-14);
    for (std::size_t i = 0; i < c1.size(); ++i)
      CHECK((c2.curves[i].values - c1.curves[i].values).cwiseAbs().maxCoeff() < 1e-14);
  }
}

TEST_CASE("split_test") {
  CounterRng rng(5);
  auto data = testing::toy_dataset(5, 20, 1, rng, 5);

  SUBCASE("subject with too few strides on one side is excluded") {
    std::vector<std::size_t> keep;
    bool dropped = false;
    for (std::size_t i = 0; i < data.size(); ++i) {
      const auto& k = data.keys[i];
      if (!dropped && k.subject_id == "s2" && k.side == Side::right && k.stride == 20) {
        dropped = true;
        continue;
      }
      keep.push_back(i);
    }
    const auto split = split_test(subset(data, keep), 10, 7);
    REQUIRE(split.excluded.size() == 1);
    CHECK(split.excluded[0].subject_id == "s2");
    CHECK(split.test.size() == 4 * 2 * 10);
    CHECK(exclusions_to_json(split.excluded).find("\"s2\"") != std::string::npos);
  }

  SUBCASE("partition, counts and determinism") {
    const auto a = split_test(data, 10, 11);
    const auto b = split_test(data, 10, 11);
    CHECK(a.test.size() == 5 * 2 * 10);
    CHECK(a.train.size() + a.test.size() == data.size());
    std::set<std::tuple<std::string, Side, int>> train_keys;
    for (const auto& k : a.train.keys) train_keys.insert({k.subject_id, k.side, k.stride});
    for (const auto& k : a.test.keys) CHECK(train_keys.count({k.subject_id, k.side, k.stride}) == 0);
    REQUIRE(a.test.size() == b.test.size());
    for (std::size_t i = 0; i < a.test.size(); ++i) CHECK(a.test.keys[i].same_observation(b.test.keys[i]));
    const auto c = split_test(data, 10, 12);
    bool differs = false;
    for (std::size_t i = 0; i < a.test.size(); ++i)
      differs = differs || !a.test.keys[i].same_observation(c.test.keys[i]);
    CHECK(differs);
  }

  CHECK_THROWS(split_test(data, 0, 1));
}
