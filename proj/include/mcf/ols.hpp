#pragma once

#include <vector>

#include "mcf/types.hpp"

namespace mcf::ols {

/// Least squares with HC1 heteroscedasticity-robust covariance. Columns that
/// are (numerically) linear combinations of earlier ones are dropped; their
/// coefficients are zero and their covariance rows/columns empty.
struct OlsFit {
  Vector coef;
  Matrix cov;                 // HC1, full size with zeros for dropped columns
  std::vector<int> dropped;   // column ids removed as collinear
  Vector residuals;
  double r2 = 0.0;

  double predict(const Vector& row) const { return row.dot(coef); }
  double prediction_se(const Vector& row) const;
};

OlsFit fit(const Matrix& design, const Vector& y);

/// [1, x] design.
Matrix with_intercept(const Matrix& x);

}  // namespace mcf::ols
