#include "cli_support.hpp"

#include "mvlfmm/io.hpp"

#include <cerrno>
#include <cmath>
#include <cstdlib>
#include <fstream>

namespace mvlfmm::cli {

Config::Config(Json values, std::filesystem::path base, std::string command,
               std::initializer_list<const char*> allowed)
    : values_(std::move(values)), base_(std::move(base)), command_(std::move(command)) {
  if (!values_.is_object()) throw ConfigError(command_ + ": configuration must be a JSON object");
  const std::set<std::string> keys(allowed.begin(), allowed.end());
  for (const auto& item : values_.items())
    if (!keys.count(item.key())) throw ConfigError(command_ + ": unknown config key '" + item.key() + "'");
}

std::string Config::path(const std::string& key) const {
  const std::filesystem::path p(require<std::string>(key));
  return (p.is_absolute() || base_.empty() ? p : base_ / p).string();
}

std::optional<std::string> Config::optional_path(const std::string& key) const {
  if (!has(key)) return std::nullopt;
  return path(key);
}

Json load_config_json(const std::string& file) {
  std::ifstream in(file);
  if (!in) throw ConfigError("cannot open config file " + file);
  try {
    return Json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed config file " + file + ": " + e.what());
  }
}

int CsvTable::column(const std::string& name) const {
  for (std::size_t i = 0; i < header.size(); ++i)
    if (header[i] == name) return static_cast<int>(i);
  return -1;
}

namespace {

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  for (char c : line) {
    if (c == ',') {
      out.push_back(field);
      field.clear();
    } else if (c != '\r') {
      field += c;
    }
  }
  out.push_back(field);
  return out;
}

}  // namespace

CsvTable read_csv(const std::string& file) {
  std::ifstream in(file);
  if (!in) throw DataError("cannot open " + file);
  CsvTable table;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto fields = split(line);
    if (table.header.empty()) {
      table.header = std::move(fields);
      continue;
    }
    if (fields.size() != table.header.size())
      throw DataError(file + ": line " + std::to_string(line_no) + ": expected " +
                      std::to_string(table.header.size()) + " fields, found " +
                      std::to_string(fields.size()));
    table.rows.push_back(std::move(fields));
    table.lines.push_back(line_no);
  }
  if (table.header.empty()) throw DataError(file + ": missing header line");
  return table;
}

double parse_number(const std::string& text, int line) {
  errno = 0;
  char* end = nullptr;
  const double v = std::strtod(text.c_str(), &end);
  if (text.empty() || end != text.c_str() + text.size() || errno == ERANGE || !std::isfinite(v))
    throw DataError("line " + std::to_string(line) + ": malformed number '" + text + "'");
  return v;
}

std::string num(double value) { return std::isfinite(value) ? format_double(value) : "NA"; }

void write_file(const std::filesystem::path& path, const std::string& text) {
  write_text_file(path.string(), text);
}

}  // namespace mvlfmm::cli
