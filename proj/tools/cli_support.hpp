#pragma once

#include "mvlfmm/datamodel.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <initializer_list>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace mvlfmm::cli {

using Json = nlohmann::ordered_json;

/// Invalid command line or configuration (exit code 2).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Command configuration: a JSON object whose keys are checked against the
/// command's schema before anything runs. Relative paths resolve against
/// the directory of the config file.
class Config {
 public:
  Config(Json values, std::filesystem::path base, std::string command,
         std::initializer_list<const char*> allowed);

  bool has(const std::string& key) const { return values_.contains(key); }
  void set(const std::string& key, Json value) { values_[key] = std::move(value); }

  template <typename T>
  T get(const std::string& key, T fallback) const {
    return has(key) ? convert<T>(key) : fallback;
  }
  template <typename T>
  T require(const std::string& key) const {
    if (!has(key)) throw ConfigError(command_ + ": missing required key '" + key + "'");
    return convert<T>(key);
  }
  std::string path(const std::string& key) const;
  std::optional<std::string> optional_path(const std::string& key) const;

  /// The effective configuration (after flag overrides).
  const Json& values() const { return values_; }

 private:
  template <typename T>
  T convert(const std::string& key) const {
    try {
      return values_.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(command_ + ": bad value for '" + key + "': " + e.what());
    }
  }

  Json values_;
  std::filesystem::path base_;
  std::string command_;
};

/// Options shared by every command.
struct GlobalOptions {
  std::string config_file;
  std::uint64_t seed = 1;
  bool seed_given = false;
  unsigned workers = 0;
  std::string out = "out";
};

Json load_config_json(const std::string& file);

/// Plain comma-separated table with 1-based source line numbers.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::vector<int> lines;

  int column(const std::string& name) const;  // -1 when absent
};

/// Reads a header line and rows of the same width; throws DataError with
/// the offending line number otherwise. Blank lines are skipped.
CsvTable read_csv(const std::string& file);

double parse_number(const std::string& text, int line);

/// Shortest round-trip text of a double, or NA for non-finite values.
std::string num(double value);

void write_file(const std::filesystem::path& path, const std::string& text);

}  // namespace mvlfmm::cli
