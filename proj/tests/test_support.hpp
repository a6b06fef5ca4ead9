#pragma once

#include "mvlfmm/datamodel.hpp"
#include "mvlfmm/numeric.hpp"
#include "mvlfmm/rng.hpp"

#include <string>

namespace mvlfmm::testing {

/// Small synthetic dataset: subjects x sides x strides curves of `dims`
/// dimensions on a 101-point grid, values drawn from `rng`.
inline MvLongDataset toy_dataset(int subjects, int strides, int dims, CounterRng& rng,
                                 int grid_size = 101) {
  MvLongDataset data;
  data.grid = linspace(0.0, 100.0, grid_size);
  for (int p = 0; p < dims; ++p) data.dim_names.push_back("d" + std::to_string(p + 1));
  data.covariates.names = {"x1"};
  for (int i = 0; i < subjects; ++i) {
    const std::string id = "s" + std::to_string(i + 1);
    for (Side side : {Side::left, Side::right}) {
      data.covariates.rows[{id, side}] = Eigen::VectorXd::Constant(1, rng.normal());
      for (int l = 1; l <= strides; ++l) {
        MvCurve c;
        c.grid = data.grid;
        c.values.resize(dims, grid_size);
        for (int p = 0; p < dims; ++p)
          for (int g = 0; g < grid_size; ++g) c.values(p, g) = rng.normal();
        data.curves.push_back(c);
        data.keys.push_back({id, side, l, static_cast<double>(l) / strides});
      }
    }
  }
  return data;
}

}  // namespace mvlfmm::testing

namespace mvlfmm::testing {

/// Smooth data with subject, side and longitudinal structure: three
/// multivariate modes whose scores carry a covariate effect, random
/// intercepts, a subject-specific slope in T and small pointwise noise.
inline MvLongDataset structured_dataset(int subjects, int strides, int dims, CounterRng& rng,
                                        double scale = 1.0) {
  MvLongDataset data;
  data.grid = linspace(0.0, 100.0, 101);
  for (int p = 0; p < dims; ++p) data.dim_names.push_back("d" + std::to_string(p + 1));
  data.covariates.names = {"x1"};
  const double two_pi = 2.0 * std::numbers::pi;
  auto mode = [&](int k, int p, double t) {
    const double phase = 0.3 * p;
    switch (k) {
      case 0: return std::sin(two_pi * t / 100.0 + phase) + 0.2 * p;
      case 1: return std::cos(two_pi * t / 100.0 + phase);
      default: return std::sin(2.0 * two_pi * t / 100.0 + phase);
    }
  };
  for (int i = 0; i < subjects; ++i) {
    const std::string id = "s" + std::to_string(i + 1);
    const double x = rng.normal();
    const double u[3] = {2.0 * rng.normal(), 1.0 * rng.normal(), 0.5 * rng.normal()};
    const double slope = 1.5 * rng.normal();
    for (Side side : {Side::left, Side::right}) {
      data.covariates.rows[{id, side}] = Eigen::VectorXd::Constant(1, x);
      const double v[3] = {0.7 * rng.normal(), 0.4 * rng.normal(), 0.2 * rng.normal()};
      for (int l = 1; l <= strides; ++l) {
        const double T = static_cast<double>(l - 1) / std::max(1, strides - 1);
        double score[3];
        for (int k = 0; k < 3; ++k) score[k] = u[k] + v[k] + 0.3 * rng.normal();
        score[0] += 1.0 + 0.8 * x + slope * (T - 0.5);
        score[1] += -0.5 * x;
        MvCurve c;
        c.grid = data.grid;
        c.values.resize(dims, data.grid.size());
        for (int p = 0; p < dims; ++p)
          for (Eigen::Index g = 0; g < data.grid.size(); ++g) {
            double value = 10.0 * std::sin(data.grid(g) / 30.0) + 0.01 * rng.normal();
            for (int k = 0; k < 3; ++k) value += score[k] * mode(k, p, data.grid(g));
            c.values(p, g) = scale * value;
          }
        data.curves.push_back(c);
        data.keys.push_back({id, side, l, T});
      }
    }
  }
  return data;
}

}  // namespace mvlfmm::testing
