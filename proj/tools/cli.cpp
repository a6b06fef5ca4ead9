#include "cli.hpp"

#include "commands.hpp"
#include "mvlfmm/model.hpp"

#include <CLI11.hpp>

#include <functional>
#include <map>
#include <optional>
#include <ostream>

namespace mvlfmm::cli {

namespace {

void report(std::ostream& err, const char* kind, const std::string& message) {
  err << Json{{"error", kind}, {"message", message}}.dump() << '\n';
}

struct Command {
  CLI::App* app = nullptr;
  std::initializer_list<const char*> keys;
  std::function<int(Config&, const GlobalOptions&)> run;
  // Command-line overrides of config keys, applied only when given.
  std::map<std::string, std::string> text;  // key -> value
  std::map<std::string, double> number;
  std::map<std::string, int> integer;
};

void text_flag(Command& c, const std::string& flag, const std::string& key, const std::string& help) {
  c.app->add_option_function<std::string>(flag, [&c, key](const std::string& v) { c.text[key] = v; }, help);
}

// Paths given on the command line are relative to the working directory,
// not to the config file.
void path_flag(Command& c, const std::string& flag, const std::string& key, const std::string& help) {
  c.app->add_option_function<std::string>(
      flag, [&c, key](const std::string& v) { c.text[key] = std::filesystem::absolute(v).string(); }, help);
}

void number_flag(Command& c, const std::string& flag, const std::string& key, const std::string& help) {
  c.app->add_option_function<double>(flag, [&c, key](double v) { c.number[key] = v; }, help);
}

void integer_flag(Command& c, const std::string& flag, const std::string& key, const std::string& help) {
  c.app->add_option_function<int>(flag, [&c, key](int v) { c.integer[key] = v; }, help);
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multivariate multilevel longitudinal functional models"};
  app.name("mvlfmm");
  app.require_subcommand(1);
  app.fallthrough();
  GlobalOptions global;
  app.add_option("--config", global.config_file, "command configuration (JSON)");
  auto* seed_opt = app.add_option("--seed", global.seed, "random seed");
  app.add_option("--workers", global.workers, "worker threads (0 = all cores)");
  app.add_option("--out", global.out, "output directory")->capture_default_str();

  std::map<std::string, Command> commands;
  auto add = [&](const std::string& name, const std::string& help, std::initializer_list<const char*> keys,
                 std::function<int(Config&, const GlobalOptions&)> fn) -> Command& {
    Command& c = commands[name];
    c.app = app.add_subcommand(name, help);
    c.keys = keys;
    c.run = std::move(fn);
    return c;
  };

  Command& fit = add("fit", "fit the model and export estimates and diagnostics", kFitKeys, cmd_fit);
  path_flag(fit, "--curves", "curves", "curve CSV");
  path_flag(fit, "--covariates", "covariates", "covariate CSV");
  text_flag(fit, "--model", "model", "polynomial, naive, spline or mlfpca");
  integer_flag(fit, "--holdout", "holdout_per_side", "test strides held out per subject-side");

  Command& sim = add("simulate", "run a simulation scenario or study", kSimulateKeys, cmd_simulate);
  number_flag(sim, "--strength", "strength", "longitudinal variation strength factor (>= 1)");
  integer_flag(sim, "--replicates", "replicates", "number of replicates");
  integer_flag(sim, "--subjects", "n_subjects", "subjects per replicate");
  text_flag(sim, "--study", "study", "metrics or recovery");
  text_flag(sim, "--mode", "mode", "zero_fixed or with_fixed (recovery study)");
  path_flag(sim, "--params", "params", "generator parameter file");
  path_flag(sim, "--write-params", "write_params", "write the generator parameters to this file");

  Command& predict = add("predict", "predict curves for query rows", kPredictKeys, cmd_predict);
  path_flag(predict, "--fit", "fit", "fit bundle directory");
  path_flag(predict, "--query", "query", "query CSV: subject_id,side,T,<covariates>");

  Command& evaluate = add("evaluate", "ISPE or ISE from files", kEvaluateKeys, cmd_evaluate);
  path_flag(evaluate, "--predicted", "predicted", "predicted curve CSV");
  path_flag(evaluate, "--observed", "observed", "observed curve CSV");
  path_flag(evaluate, "--estimate", "estimate", "estimated effect CSV");
  path_flag(evaluate, "--truth", "truth", "true effect CSV");

  Command& boot = add("bootstrap", "simultaneous bands for the covariate effects", kBootstrapKeys, cmd_bootstrap);
  path_flag(boot, "--fit", "fit", "fit bundle directory");
  path_flag(boot, "--curves", "curves", "curve CSV");
  path_flag(boot, "--covariates", "covariates", "covariate CSV");
  integer_flag(boot, "--B", "B", "bootstrap replicates");

  Command& diag = add("diagnose", "residual, covariance and PVE diagnostics", kDiagnoseKeys, cmd_diagnose);
  path_flag(diag, "--fit", "fit", "fit bundle directory");
  path_flag(diag, "--curves", "curves", "curve CSV");
  path_flag(diag, "--covariates", "covariates", "covariate CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    report(err, "config", e.what());
    return kExitConfig;
  }

  try {
    Command* chosen = nullptr;
    std::string name;
    for (auto& [n, c] : commands)
      if (c.app->parsed()) {
        chosen = &c;
        name = n;
      }
    Json values = Json::object();
    std::filesystem::path base;
    if (!global.config_file.empty()) {
      values = load_config_json(global.config_file);
      base = std::filesystem::path(global.config_file).parent_path();
    }
    Config config(std::move(values), base, name, chosen->keys);
    for (const auto& [k, v] : chosen->text) config.set(k, v);
    for (const auto& [k, v] : chosen->number) config.set(k, v);
    for (const auto& [k, v] : chosen->integer) config.set(k, v);
    if (seed_opt->count() == 0) global.seed = config.get<std::uint64_t>("seed", 1);
    const int code = chosen->run(config, global);
    out << Json{{"status", "ok"}, {"command", name}, {"out", global.out}}.dump() << '\n';
    return code;
  } catch (const ConfigError& e) {
    report(err, "config", e.what());
    return kExitConfig;
  } catch (const DataError& e) {
    report(err, "data", e.what());
    return kExitData;
  } catch (const FitError& e) {
    report(err, "fit", e.what());
    return kExitFit;
  } catch (const std::invalid_argument& e) {
    report(err, "config", e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    report(err, "internal", e.what());
    return 1;
  }
}

}  // namespace mvlfmm::cli
