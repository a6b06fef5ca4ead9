#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <iosfwd>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mvlfmm {

/// Raised for malformed or inconsistent input data (CLI exit code 3).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Side : int { left = 0, right = 1 };

std::string to_string(Side side);
Side parse_side(const std::string& text);

/// One multivariate functional observation: P dimensions x G grid points.
struct MvCurve {
  Eigen::MatrixXd values;
  Eigen::VectorXd grid;

  Eigen::Index dims() const { return values.rows(); }
  Eigen::Index points() const { return values.cols(); }
};

struct ObservationKey {
  std::string subject_id;
  Side side = Side::left;
  int stride = 1;
  double long_time = 0.0;

  auto group() const { return std::make_pair(subject_id, side); }
  bool same_observation(const ObservationKey& other) const {
    return subject_id == other.subject_id && side == other.side && stride == other.stride;
  }
};

/// Scalar covariates, one row per (subject, side).
struct CovariateTable {
  std::vector<std::string> names;
  std::map<std::pair<std::string, Side>, Eigen::VectorXd> rows;

  const Eigen::VectorXd& row(const std::string& subject, Side side) const;
  bool has_row(const std::string& subject, Side side) const {
    return rows.count({subject, side}) > 0;
  }
  int index_of(const std::string& name) const;
};

/// Multivariate longitudinal functional dataset on a common grid.
///
/// `curves` and `keys` are parallel; unbalanced designs are simply missing
/// rows. Datasets are treated as immutable values once built.
struct MvLongDataset {
  std::vector<MvCurve> curves;
  std::vector<ObservationKey> keys;
  CovariateTable covariates;
  Eigen::VectorXd grid;
  std::vector<std::string> dim_names;

  std::size_t size() const { return curves.size(); }
  int dims() const { return static_cast<int>(dim_names.size()); }
  /// Subjects in order of first appearance.
  std::vector<std::string> subjects() const;
  /// Rows stacked as N x (P*G), dimension-major within a row.
  Eigen::MatrixXd stacked_values() const;
};

/// Checks every structural invariant; throws DataError on violation.
void validate(const MvLongDataset& data);

MvLongDataset subset(const MvLongDataset& data, const std::vector<std::size_t>& rows);

/// Reads the long curve CSV and the covariate CSV.
MvLongDataset load_dataset(const std::string& curve_file, const std::string& covariate_file);
MvLongDataset read_dataset(std::istream& curves, std::istream& covariates);

/// Writes the long curve CSV (17 significant digits).
void write_curves(const MvLongDataset& data, std::ostream& out);
void write_covariates(const CovariateTable& table, std::ostream& out);

/// Divides each subject's longitudinal times by that subject's maximum.
MvLongDataset normalize_long_time(const MvLongDataset& data);

/// Pointwise sample mean and the centered dataset.
std::pair<MvCurve, MvLongDataset> center_dataset(const MvLongDataset& data);

struct Exclusion {
  std::string subject_id;
  std::string reason;
};

struct Split {
  MvLongDataset train;
  MvLongDataset test;
  std::vector<Exclusion> excluded;
};

/// Moves `holdout_per_side` randomly chosen strides of each subject-side into
/// the test set. Subjects with fewer than 2*holdout strides on either side
/// are excluded and reported.
Split split_test(const MvLongDataset& data, int holdout_per_side, std::uint64_t seed);

std::string exclusions_to_json(const std::vector<Exclusion>& excluded);

/// Shortest decimal text that round-trips the double exactly.
std::string format_double(double value);

}  // namespace mvlfmm
