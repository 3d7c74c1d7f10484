#include "mcf/reference.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace mcf::reference {

std::optional<double> leaf_objective(std::span<const Index> units, const Labels& d, const Vector& y,
                                     const Matrix& matched, int num_treatments) {
  const int M = num_treatments;
  std::vector<double> mean(M), mse(M);
  std::vector<Index> n(M);
  for (int a = 0; a < M; ++a) {
    double s = 0.0;
    for (Index i : units)
      if (d[i] == a) {
        s += y[i];
        ++n[a];
      }
    if (n[a] == 0) return std::nullopt;
    mean[a] = s / static_cast<double>(n[a]);
  }
  for (int a = 0; a < M; ++a) {
    double s = 0.0;
    for (Index i : units)
      if (d[i] == a) s += (mean[a] - y[i]) * (mean[a] - y[i]);
    mse[a] = s / static_cast<double>(n[a]);
  }
  double total = 0.0;
  for (int m = 1; m < M; ++m)
    for (int l = 0; l < m; ++l) {
      double s = 0.0;
      for (Index i : units)
        if (d[i] == m || d[i] == l) s += (mean[m] - matched(i, m)) * (mean[l] - matched(i, l));
      const double mce = s / static_cast<double>(n[m] + n[l]);
      total += mse[m] + mse[l] - 2.0 * mce;
    }
  return total;
}

forest::MatchedOutcomes match_outcomes(const Labels& d, const Vector& y, const Matrix& prognostic,
                                       int num_treatments) {
  const Index n = prognostic.rows();
  const Vector mean = prognostic.colwise().mean();
  const Matrix c = prognostic.rowwise() - mean.transpose();
  const Matrix cov = c.transpose() * c / static_cast<double>(std::max<Index>(1, n - 1));
  Eigen::SelfAdjointEigenSolver<Matrix> eig(cov);
  const double top = std::max(eig.eigenvalues().maxCoeff(), 0.0);
  Vector inv_ev = Vector::Zero(cov.rows());
  for (Index k = 0; k < cov.rows(); ++k)
    if (eig.eigenvalues()[k] > 1e-12 * std::max(top, 1e-300)) inv_ev[k] = 1.0 / eig.eigenvalues()[k];
  const Matrix pinv = eig.eigenvectors() * inv_ev.asDiagonal() * eig.eigenvectors().transpose();

  forest::MatchedOutcomes out;
  out.values.resize(n, num_treatments);
  out.neighbour.assign(n, std::vector<Index>(num_treatments, -1));
  for (Index i = 0; i < n; ++i)
    for (int a = 0; a < num_treatments; ++a) {
      if (d[i] == a) {
        out.values(i, a) = y[i];
        out.neighbour[i][a] = i;
        continue;
      }
      Index best_j = -1;
      double best = std::numeric_limits<double>::infinity();
      for (Index j = 0; j < n; ++j) {
        if (d[j] != a) continue;
        const Vector diff = (prognostic.row(i) - prognostic.row(j)).transpose();
        const double dist = diff.dot(pinv * diff);
        if (dist < best) {
          best = dist;
          best_j = j;
        }
      }
      out.values(i, a) = y[best_j];
      out.neighbour[i][a] = best_j;
    }
  return out;
}

Vector forest_weights(const forest::McfForest& forest, const Matrix& x, Index row, int m, int l) {
  const int M = forest.num_treatments();
  Vector sum = Vector::Zero(forest.est_size());
  int used = 0;
  for (const forest::McfTree& t : forest.trees()) {
    const int leaf = t.splits.leaf_of(x, row);
    const auto am = t.arm_members(leaf, m, M);
    const auto al = t.arm_members(leaf, l, M);
    if (am.empty() || al.empty()) continue;
    ++used;
    for (int i : am) sum[i] += 1.0 / static_cast<double>(am.size());
    for (int i : al) sum[i] -= 1.0 / static_cast<double>(al.size());
  }
  if (used == 0) return Vector::Constant(forest.est_size(), std::numeric_limits<double>::quiet_NaN());
  return sum / static_cast<double>(used);
}

Vector predict_iate(const forest::McfForest& forest, const Matrix& x, int m, int l) {
  Vector out(x.rows());
  for (Index q = 0; q < x.rows(); ++q) out[q] = reference::forest_weights(forest, x, q, m, l).dot(forest.est_outcomes());
  return out;
}

Matrix group_weights(const forest::McfForest& forest, const Matrix& x, const Labels& groups, int num_groups, int m,
                     int l) {
  Matrix out = Matrix::Zero(forest.est_size(), num_groups);
  std::vector<double> count(num_groups, 0.0);
  for (Index q = 0; q < x.rows(); ++q) {
    const Vector w = reference::forest_weights(forest, x, q, m, l);
    if (w.hasNaN()) continue;
    out.col(groups[q]) += w;
    count[groups[q]] += 1.0;
  }
  for (int j = 0; j < num_groups; ++j)
    if (count[j] > 0.0) out.col(j) /= count[j];
  return out;
}

inference::ConditionalMoments knn_conditional_moments(const Vector& weights, const Vector& y, int k) {
  const Index n = weights.size();
  const Index kk = std::min<Index>(k, n);
  inference::ConditionalMoments out{Vector(n), Vector(n)};
  std::vector<Index> order(n);
  for (Index i = 0; i < n; ++i) {
    std::iota(order.begin(), order.end(), Index{0});
    std::sort(order.begin(), order.end(), [&](Index a, Index b) {
      const double da = std::abs(weights[a] - weights[i]);
      const double db = std::abs(weights[b] - weights[i]);
      return da != db ? da < db : a < b;
    });
    double s = 0.0;
    for (Index r = 0; r < kk; ++r) s += y[order[r]];
    const double mu = s / static_cast<double>(kk);
    double v = 0.0;
    for (Index r = 0; r < kk; ++r) v += (y[order[r]] - mu) * (y[order[r]] - mu);
    out.mean[i] = mu;
    out.variance[i] = v / static_cast<double>(kk - 1);
  }
  return out;
}

}  // namespace mcf::reference
