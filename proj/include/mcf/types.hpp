#pragma once

#include <Eigen/Dense>

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace mcf {

using Matrix = Eigen::MatrixXd;  // column-major, rows are units
using Vector = Eigen::VectorXd;
using Labels = std::vector<int>;
using Index = Eigen::Index;

/// Raised when inputs violate an operation's preconditions.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when an estimator cannot produce an estimate for the requested target
/// (e.g. no tree has estimation units of both arms for a query).
class EstimationFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Covariates, treatment labels and outcomes for n units.
struct Sample {
  Matrix x;
  Labels d;
  Vector y;
  int num_treatments = 2;
  std::optional<Matrix> potential_outcomes;  // n x M, simulation only
  std::optional<Vector> true_iate;           // simulation only

  Index size() const { return x.rows(); }
  Index num_covariates() const { return x.cols(); }

  /// Throws InvalidArgument unless all arrays share n and labels are < M.
  void validate() const;

  /// Rows `rows` of this sample, in the given order.
  Sample subset(const std::vector<Index>& rows) const;
};

/// Per-arm unit counts of `d` over labels 0..M-1.
std::vector<Index> arm_counts(const Labels& d, int num_treatments);

}  // namespace mcf
