#pragma once

#include "cli_support.hpp"

namespace mvlfmm::cli {

// Each command returns its exit code; errors propagate as ConfigError,
// DataError or FitError.
int cmd_fit(Config& config, const GlobalOptions& global);
int cmd_simulate(Config& config, const GlobalOptions& global);
int cmd_predict(Config& config, const GlobalOptions& global);
int cmd_evaluate(Config& config, const GlobalOptions& global);
int cmd_bootstrap(Config& config, const GlobalOptions& global);
int cmd_diagnose(Config& config, const GlobalOptions& global);

/// Config keys accepted by each command.
inline constexpr std::initializer_list<const char*> kFitKeys = {
    "curves", "covariates", "model", "covariate_names", "fpca_basis_size", "fpca_order", "pve", "K",
    "covspec_subject", "covspec_side", "holdout_per_side", "normalize_time", "n_spline",
    "polynomial_degree", "level", "lmm_restarts", "max_lag", "seed"};
inline constexpr std::initializer_list<const char*> kSimulateKeys = {
    "name", "n_subjects", "n_per_side", "missing_prop", "strength", "models", "pve", "replicates",
    "test_per_side", "lmm_restarts", "params", "study", "mode", "n_mc", "write_params",
    "write_datasets", "seed"};
inline constexpr std::initializer_list<const char*> kPredictKeys = {"fit", "query", "seed"};
inline constexpr std::initializer_list<const char*> kEvaluateKeys = {
    "predicted", "observed", "estimate", "truth", "seed"};
inline constexpr std::initializer_list<const char*> kBootstrapKeys = {
    "fit", "curves", "covariates", "B", "level", "seed"};
inline constexpr std::initializer_list<const char*> kDiagnoseKeys = {
    "fit", "curves", "covariates", "max_lag", "cv_folds", "within_subject", "seed"};

}  // namespace mvlfmm::cli
