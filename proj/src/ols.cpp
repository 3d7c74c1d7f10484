#include "mcf/ols.hpp"

#include <cmath>

namespace mcf::ols {

double OlsFit::prediction_se(const Vector& row) const { return std::sqrt(std::max(0.0, row.dot(cov * row))); }

Matrix with_intercept(const Matrix& x) {
  Matrix out(x.rows(), x.cols() + 1);
  out.col(0).setOnes();
  out.rightCols(x.cols()) = x;
  return out;
}

OlsFit fit(const Matrix& design, const Vector& y) {
  const Index n = design.rows();
  const Index p = design.cols();
  if (y.size() != n) throw InvalidArgument("design and outcome differ in length");
  if (n <= p) throw InvalidArgument("OLS needs more rows than columns");

  // Greedy column selection in the given order: keep a column when it adds
  // rank to the ones kept so far.
  std::vector<int> kept;
  OlsFit out;
  const double scale = std::max(1.0, design.cwiseAbs().maxCoeff());
  for (int j = 0; j < p; ++j) {
    std::vector<int> trial = kept;
    trial.push_back(j);
    Matrix sub(n, static_cast<Index>(trial.size()));
    for (std::size_t c = 0; c < trial.size(); ++c) sub.col(c) = design.col(trial[c]);
    Eigen::ColPivHouseholderQR<Matrix> qr(sub);
    qr.setThreshold(1e-10 * scale);
    if (qr.rank() == static_cast<Index>(trial.size()))
      kept = std::move(trial);
    else
      out.dropped.push_back(j);
  }
  const auto k = static_cast<Index>(kept.size());
  Matrix X(n, k);
  for (Index c = 0; c < k; ++c) X.col(c) = design.col(kept[c]);

  const Matrix xtx = X.transpose() * X;
  const Eigen::LDLT<Matrix> ldlt(xtx);
  const Vector beta = ldlt.solve(X.transpose() * y);
  out.residuals = y - X * beta;
  const Matrix bread = ldlt.solve(Matrix::Identity(k, k));
  const Matrix meat = X.transpose() * out.residuals.array().square().matrix().asDiagonal() * X;
  const Matrix vk = bread * meat * bread * (static_cast<double>(n) / static_cast<double>(n - k));

  out.coef = Vector::Zero(p);
  out.cov = Matrix::Zero(p, p);
  for (Index a = 0; a < k; ++a) {
    out.coef[kept[a]] = beta[a];
    for (Index b = 0; b < k; ++b) out.cov(kept[a], kept[b]) = vk(a, b);
  }
  const double tss = (y.array() - y.mean()).square().sum();
  out.r2 = tss > 0.0 ? 1.0 - out.residuals.squaredNorm() / tss : 1.0;
  return out;
}

}  // namespace mcf::ols
