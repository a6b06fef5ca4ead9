#include "mvlfmm/datamodel.hpp"

#include "mvlfmm/rng.hpp"

#include "json.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>
#include <tuple>
#include <unordered_map>

namespace mvlfmm {

std::string to_string(Side side) { return side == Side::left ? "left" : "right"; }

Side parse_side(const std::string& text) {
  if (text == "left") return Side::left;
  if (text == "right") return Side::right;
  throw DataError("invalid side '" + text + "' (expected left or right)");
}

std::string format_double(double value) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, value, std::chars_format::general, 17);
  return std::string(buf, res.ptr);
}

const Eigen::VectorXd& CovariateTable::row(const std::string& subject, Side side) const {
  const auto it = rows.find({subject, side});
  if (it == rows.end())
    throw DataError("unresolved covariates for subject " + subject + " side " + to_string(side));
  return it->second;
}

int CovariateTable::index_of(const std::string& name) const {
  const auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end()) throw std::invalid_argument("unknown covariate '" + name + "'");
  return static_cast<int>(it - names.begin());
}

std::vector<std::string> MvLongDataset::subjects() const {
  std::vector<std::string> out;
  std::unordered_map<std::string, bool> seen;
  for (const auto& k : keys)
    if (seen.emplace(k.subject_id, true).second) out.push_back(k.subject_id);
  return out;
}

Eigen::MatrixXd MvLongDataset::stacked_values() const {
  const Eigen::Index g = grid.size();
  Eigen::MatrixXd out(static_cast<Eigen::Index>(curves.size()), dims() * g);
  for (std::size_t i = 0; i < curves.size(); ++i)
    for (int p = 0; p < dims(); ++p)
      out.row(static_cast<Eigen::Index>(i)).segment(p * g, g) = curves[i].values.row(p);
  return out;
}

void validate(const MvLongDataset& data) {
  if (data.curves.size() != data.keys.size())
    throw DataError("curves and keys differ in length");
  for (Eigen::Index i = 1; i < data.grid.size(); ++i)
    if (!(data.grid(i) > data.grid(i - 1))) throw DataError("grid is not strictly increasing");
  std::map<std::tuple<std::string, Side, int>, bool> seen;
  std::map<std::pair<std::string, Side>, std::pair<int, double>> last;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& c = data.curves[i];
    const auto& k = data.keys[i];
    if (c.values.rows() != data.dims() || c.values.cols() != data.grid.size())
      throw DataError("ragged grid in curve for subject " + k.subject_id);
    if (!c.values.allFinite()) throw DataError("non-finite value for subject " + k.subject_id);
    if (!seen.emplace(std::make_tuple(k.subject_id, k.side, k.stride), true).second)
      throw DataError("duplicate observation key for subject " + k.subject_id);
    data.covariates.row(k.subject_id, k.side);
    auto [it, inserted] = last.try_emplace(k.group(), k.stride, k.long_time);
    if (!inserted) {
      if (k.stride > it->second.first && !(k.long_time > it->second.second))
        throw DataError("longitudinal time not increasing with stride for subject " +
                        k.subject_id);
      it->second = {k.stride, k.long_time};
    }
  }
}

MvLongDataset subset(const MvLongDataset& data, const std::vector<std::size_t>& rows) {
  MvLongDataset out;
  out.covariates = data.covariates;
  out.grid = data.grid;
  out.dim_names = data.dim_names;
  out.curves.reserve(rows.size());
  out.keys.reserve(rows.size());
  for (auto r : rows) {
    out.curves.push_back(data.curves.at(r));
    out.keys.push_back(data.keys.at(r));
  }
  return out;
}

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, ',')) {
    if (!field.empty() && field.back() == '\r') field.pop_back();
    out.push_back(field);
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_double(const std::string& text, std::size_t line_no) {
  double value = 0.0;
  const char* first = text.data();
  const char* last = text.data() + text.size();
  if (!text.empty() && *first == '+') ++first;
  const auto res = std::from_chars(first, last, value);
  if (res.ec != std::errc() || res.ptr != last) {
    if (text == "nan" || text == "NaN" || text == "inf" || text == "-inf" || text == "Inf")
      throw DataError("non-finite value at line " + std::to_string(line_no));
    throw DataError("malformed number '" + text + "' at line " + std::to_string(line_no));
  }
  if (!std::isfinite(value)) throw DataError("non-finite value at line " + std::to_string(line_no));
  return value;
}

int parse_int(const std::string& text, std::size_t line_no) {
  int value = 0;
  const auto res = std::from_chars(text.data(), text.data() + text.size(), value);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size())
    throw DataError("malformed integer '" + text + "' at line " + std::to_string(line_no));
  return value;
}

CovariateTable read_covariates(std::istream& in) {
  CovariateTable table;
  std::string line;
  if (!std::getline(in, line)) throw DataError("covariate file is empty");
  auto header = split_csv(line);
  if (header.size() < 2 || header[0] != "subject_id" || header[1] != "side")
    throw DataError("covariate header must start with subject_id,side");
  table.names.assign(header.begin() + 2, header.end());
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    auto f = split_csv(line);
    if (f.size() != header.size())
      throw DataError("covariate row has wrong field count at line " + std::to_string(line_no));
    Eigen::VectorXd row(static_cast<Eigen::Index>(table.names.size()));
    for (std::size_t a = 0; a < table.names.size(); ++a)
      row(static_cast<Eigen::Index>(a)) = parse_double(f[a + 2], line_no);
    if (!table.rows.emplace(std::make_pair(f[0], parse_side(f[1])), row).second)
      throw DataError("duplicate covariate row for subject " + f[0] + " at line " +
                      std::to_string(line_no));
  }
  return table;
}

}  // namespace

MvLongDataset read_dataset(std::istream& curves, std::istream& covariates) {
  MvLongDataset data;
  data.covariates = read_covariates(covariates);

  std::string line;
  if (!std::getline(curves, line)) throw DataError("curve file is empty");
  const auto header = split_csv(line);
  const std::vector<std::string> expected{"subject_id", "side", "stride", "T_raw",
                                          "dimension",  "t",    "value"};
  if (header != expected)
    throw DataError("curve header must be subject_id,side,stride,T_raw,dimension,t,value");

  struct RawObservation {
    ObservationKey key;
    std::vector<std::vector<std::pair<double, double>>> by_dim;
  };
  std::vector<RawObservation> raw;
  std::map<std::tuple<std::string, Side, int>, std::size_t> index;
  std::map<std::string, int> dim_index;
  std::map<std::string, int> subject_rank;

  std::size_t line_no = 1;
  while (std::getline(curves, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto f = split_csv(line);
    if (f.size() != expected.size())
      throw DataError("curve row has wrong field count at line " + std::to_string(line_no));
    ObservationKey key{f[0], parse_side(f[1]), parse_int(f[2], line_no), parse_double(f[3], line_no)};
    const auto [dit, new_dim] = dim_index.try_emplace(f[4], static_cast<int>(data.dim_names.size()));
    if (new_dim) data.dim_names.push_back(f[4]);
    subject_rank.try_emplace(key.subject_id, static_cast<int>(subject_rank.size()));
    const auto id = std::make_tuple(key.subject_id, key.side, key.stride);
    auto [it, fresh] = index.try_emplace(id, raw.size());
    if (fresh) raw.push_back({key, {}});
    auto& obs = raw[it->second];
    if (obs.key.long_time != key.long_time)
      throw DataError("inconsistent T_raw within one stride at line " + std::to_string(line_no));
    if (obs.by_dim.size() <= static_cast<std::size_t>(dit->second))
      obs.by_dim.resize(static_cast<std::size_t>(dit->second) + 1);
    obs.by_dim[static_cast<std::size_t>(dit->second)].emplace_back(parse_double(f[5], line_no),
                                                                   parse_double(f[6], line_no));
  }
  if (raw.empty()) throw DataError("curve file has no rows");

  std::sort(raw.begin(), raw.end(), [&](const RawObservation& a, const RawObservation& b) {
    return std::make_tuple(subject_rank[a.key.subject_id], a.key.side, a.key.stride) <
           std::make_tuple(subject_rank[b.key.subject_id], b.key.side, b.key.stride);
  });

  const int dims = static_cast<int>(data.dim_names.size());
  for (auto& obs : raw) {
    if (static_cast<int>(obs.by_dim.size()) != dims)
      throw DataError("ragged grid: missing dimension for subject " + obs.key.subject_id);
    for (auto& series : obs.by_dim) {
      std::sort(series.begin(), series.end());
      for (std::size_t i = 1; i < series.size(); ++i)
        if (series[i].first == series[i - 1].first)
          throw DataError("duplicate (subject, side, stride, dimension, t) row for subject " +
                          obs.key.subject_id);
    }
  }

  const auto& first = raw.front().by_dim.front();
  data.grid.resize(static_cast<Eigen::Index>(first.size()));
  for (std::size_t g = 0; g < first.size(); ++g) data.grid(static_cast<Eigen::Index>(g)) = first[g].first;

  data.curves.reserve(raw.size());
  data.keys.reserve(raw.size());
  for (const auto& obs : raw) {
    MvCurve curve;
    curve.grid = data.grid;
    curve.values.resize(dims, data.grid.size());
    for (int p = 0; p < dims; ++p) {
      const auto& series = obs.by_dim[static_cast<std::size_t>(p)];
      if (series.size() != static_cast<std::size_t>(data.grid.size()))
        throw DataError("ragged grid for subject " + obs.key.subject_id + " stride " +
                        std::to_string(obs.key.stride));
      for (std::size_t g = 0; g < series.size(); ++g) {
        if (series[g].first != data.grid(static_cast<Eigen::Index>(g)))
          throw DataError("ragged grid for subject " + obs.key.subject_id + " stride " +
                          std::to_string(obs.key.stride));
        curve.values(p, static_cast<Eigen::Index>(g)) = series[g].second;
      }
    }
    if (!data.covariates.has_row(obs.key.subject_id, obs.key.side))
      throw DataError("unresolved covariates for subject " + obs.key.subject_id + " side " +
                      to_string(obs.key.side));
    data.curves.push_back(std::move(curve));
    data.keys.push_back(obs.key);
  }
  validate(data);
  return data;
}

MvLongDataset load_dataset(const std::string& curve_file, const std::string& covariate_file) {
  std::ifstream curves(curve_file);
  if (!curves) throw DataError("cannot open curve file " + curve_file);
  std::ifstream covariates(covariate_file);
  if (!covariates) throw DataError("cannot open covariate file " + covariate_file);
  return read_dataset(curves, covariates);
}

void write_curves(const MvLongDataset& data, std::ostream& out) {
  out << "subject_id,side,stride,T_raw,dimension,t,value\n";
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& k = data.keys[i];
    const std::string prefix = k.subject_id + ',' + to_string(k.side) + ',' +
                               std::to_string(k.stride) + ',' + format_double(k.long_time) + ',';
    for (int p = 0; p < data.dims(); ++p)
      for (Eigen::Index g = 0; g < data.grid.size(); ++g)
        out << prefix << data.dim_names[static_cast<std::size_t>(p)] << ','
            << format_double(data.grid(g)) << ',' << format_double(data.curves[i].values(p, g))
            << '\n';
  }
}

void write_covariates(const CovariateTable& table, std::ostream& out) {
  out << "subject_id,side";
  for (const auto& n : table.names) out << ',' << n;
  out << '\n';
  for (const auto& [key, row] : table.rows) {
    out << key.first << ',' << to_string(key.second);
    for (Eigen::Index a = 0; a < row.size(); ++a) out << ',' << format_double(row(a));
    out << '\n';
  }
}

MvLongDataset normalize_long_time(const MvLongDataset& data) {
  std::map<std::string, double> max_time;
  for (const auto& k : data.keys) {
    if (k.long_time < 0) throw DataError("negative longitudinal time for subject " + k.subject_id);
    auto [it, fresh] = max_time.try_emplace(k.subject_id, k.long_time);
    if (!fresh) it->second = std::max(it->second, k.long_time);
  }
  MvLongDataset out = data;
  for (auto& k : out.keys) {
    const double m = max_time.at(k.subject_id);
    if (!(m > 0)) throw DataError("subject " + k.subject_id + " has zero maximum longitudinal time");
    k.long_time = k.long_time == m ? 1.0 : k.long_time / m;
  }
  return out;
}

std::pair<MvCurve, MvLongDataset> center_dataset(const MvLongDataset& data) {
  if (data.size() < 2) throw std::invalid_argument("center_dataset needs at least 2 observations");
  MvCurve mean;
  mean.grid = data.grid;
  mean.values = Eigen::MatrixXd::Zero(data.dims(), data.grid.size());
  for (const auto& c : data.curves) mean.values += c.values;
  mean.values /= static_cast<double>(data.size());
  MvLongDataset centered = data;
  for (auto& c : centered.curves) c.values -= mean.values;
  return {mean, centered};
}

Split split_test(const MvLongDataset& data, int holdout_per_side, std::uint64_t seed) {
  if (holdout_per_side < 1) throw std::invalid_argument("holdout_per_side must be >= 1");
  std::map<std::pair<std::string, Side>, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < data.size(); ++i) groups[data.keys[i].group()].push_back(i);

  CounterRng rng(seed);
  Split split;
  std::vector<std::size_t> train_rows, test_rows;
  for (const auto& subject : data.subjects()) {
    std::string reason;
    for (Side side : {Side::left, Side::right}) {
      const auto it = groups.find({subject, side});
      const std::size_t n = it == groups.end() ? 0 : it->second.size();
      if (reason.empty() && n < static_cast<std::size_t>(2 * holdout_per_side))
        reason = "fewer than " + std::to_string(2 * holdout_per_side) + " strides on " +
                 to_string(side) + " side (" + std::to_string(n) + ")";
    }
    if (!reason.empty()) {
      split.excluded.push_back({subject, reason});
      continue;
    }
    for (Side side : {Side::left, Side::right}) {
      std::vector<std::size_t> rows = groups.at({subject, side});
      // Partial Fisher-Yates: the first `holdout` slots become the test set.
      for (int h = 0; h < holdout_per_side; ++h) {
        const auto remaining = rows.size() - static_cast<std::size_t>(h);
        const auto j = static_cast<std::size_t>(h) + static_cast<std::size_t>(rng.below(remaining));
        std::swap(rows[static_cast<std::size_t>(h)], rows[j]);
      }
      test_rows.insert(test_rows.end(), rows.begin(), rows.begin() + holdout_per_side);
      train_rows.insert(train_rows.end(), rows.begin() + holdout_per_side, rows.end());
    }
  }
  std::sort(train_rows.begin(), train_rows.end());
  std::sort(test_rows.begin(), test_rows.end());
  split.train = subset(data, train_rows);
  split.test = subset(data, test_rows);
  return split;
}

std::string exclusions_to_json(const std::vector<Exclusion>& excluded) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& e : excluded) j.push_back({{"subject_id", e.subject_id}, {"reason", e.reason}});
  return j.dump(2);
}

}  // namespace mvlfmm
